pub mod cli;
pub mod distill;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod event_data;
pub mod seeding;
pub mod trainer;

pub use error::{Error, Result};
