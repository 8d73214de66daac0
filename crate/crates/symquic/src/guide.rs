//! The user guide, embedded chapter by chapter.
//!
//! Each module below includes one chapter of the mdbook under
//! `book/` verbatim, which turns every Rust block in the guide into
//! a doc-test. Edit the chapters in `book/src/`; this module exists
//! so `cargo test` fails when a guide example stops compiling or
//! stops telling the truth.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/symbolic-bytes.md")]
pub mod symbolic_bytes {}

#[doc = include_str!("../../../book/src/exploration.md")]
pub mod exploration {}

#[doc = include_str!("../../../book/src/network-model.md")]
pub mod network_model {}

#[doc = include_str!("../../../book/src/interference.md")]
pub mod interference {}

#[doc = include_str!("../../../book/src/miniquic.md")]
pub mod miniquic {}

#[doc = include_str!("../../../book/src/wire-walkthrough.md")]
pub mod wire_walkthrough {}

#[doc = include_str!("../../../book/src/defects.md")]
pub mod defects {}

#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness {}

#[doc = include_str!("../../../book/src/running.md")]
pub mod running {}
