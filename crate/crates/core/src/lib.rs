pub mod autodiff;
pub mod benchdata;
pub mod checks;
pub mod cli;
pub mod confenc;
pub mod config;
pub mod error;
pub mod metafeat;
pub mod metrics;
pub mod protocol;
pub mod ranker;
pub mod space;
pub mod transform;

pub use error::{Error, Result};
