pub mod consensus;
pub mod error;
pub mod game;
pub mod graph;
pub mod privacy;
pub mod schedules;
pub mod solver;
