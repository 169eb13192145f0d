pub mod aggregation;
pub mod axioms;
pub mod belief;
pub mod error;
pub mod parimutuel;
pub mod mechanism;
pub mod portfolio;
pub mod revelation_game;
pub mod sampling;
