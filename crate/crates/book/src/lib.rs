//! The guide's chapters as doc-tests, so `cargo test` keeps every snippet in
//! `book/src` compiling and passing.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/channel.md")]
pub mod channel {}
#[doc = include_str!("../../../book/src/precoding.md")]
pub mod precoding {}
#[doc = include_str!("../../../book/src/codec.md")]
pub mod codec {}
#[doc = include_str!("../../../book/src/ses.md")]
pub mod ses {}
#[doc = include_str!("../../../book/src/environment.md")]
pub mod environment {}
#[doc = include_str!("../../../book/src/ppo.md")]
pub mod ppo {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
