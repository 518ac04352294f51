pub mod channel;
pub mod env;
pub mod error;
pub mod experiment;
pub mod ppo;
pub mod precode;
pub mod rng;
pub mod semcodec;
pub mod ses;

pub use error::{Error, Result};
