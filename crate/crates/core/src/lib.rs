pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod io;
pub mod losses;
pub mod models;
pub mod seeding;
pub mod trainer;

pub use error::{Error, Result};
