pub mod autodiff;
mod binio;
pub mod error;
pub mod model;
pub mod optimizer;
pub mod tensor;
pub mod losses;
pub mod data;
pub mod parallel;
pub mod eval;
pub mod train;
pub mod gradcheck;
pub mod config;
pub mod cli;
