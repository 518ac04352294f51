//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha20 stream, keyed by the
//! experiment seed plus a fixed stream identifier. ChaCha20 is counter based,
//! so any implementation of the same algorithm reproduces the sequences given
//! `(seed, stream)`.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Algorithm identifier recorded in configuration files.
pub const RNG_ALGORITHM: &str = "chacha20";

pub type SimRng = ChaCha20Rng;

/// Stream identifiers. Distinct components never share a stream.
pub mod streams {
    pub const CHANNEL: u64 = 1;
    pub const POLICY: u64 = 2;
    pub const TRANSPORT: u64 = 3;
    pub const NET_INIT: u64 = 4;
    pub const MINIBATCH: u64 = 5;
    pub const EVAL_CHANNEL: u64 = 6;
    pub const EVAL_TRANSPORT: u64 = 7;
    pub const SCENE: u64 = 8;
    pub const SWEEP: u64 = 9;
}

pub fn stream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn check_algorithm(name: &str) -> Result<()> {
    if name.eq_ignore_ascii_case(RNG_ALGORITHM) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "unsupported rng algorithm {name:?}, only {RNG_ALGORITHM:?} is available"
        )))
    }
}
