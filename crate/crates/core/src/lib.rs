pub mod control;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod imitation;
pub mod pipeline;
pub mod ppo;
pub mod robots;
pub mod task;

pub use error::{Error, Result};
