//! Interoperability testing for a miniature QUIC-like protocol, driven
//! by single-byte symbolic execution.
//!
//! The crate is organized as layers, each usable on its own:
//!
//! - [`symval`]: symbolic bytes, 256-bit value domains, and the
//!   predicate store that stands in for an SMT solver.
//! - [`explore`]: the path exploration engine. Worlds run until they
//!   hit a multi-way choice, fork, and are re-run per branch.
//! - [`netmodel`]: a tiny transport security layer (integrity tags)
//!   that cooperates with symbolic payload bytes.
//! - [`channel`]: the adversarial network between two endpoints, with
//!   symbolic drop decisions and symbolic packet mutation.
//! - [`miniquic`]: the protocol under test, two independently written
//!   endpoint implementations of it, and the seedable defect catalog.
//! - [`harness`]: the interoperability world that runs a client and a
//!   server against each other and the oracles that judge the outcome.
//! - [`run`]: end-to-end campaign driver, reporting, and replay.
//!
//! The guide in `book/` walks through the same layers with worked
//! examples; its code snippets are compiled as doc-tests via
//! [`guide`].

pub mod channel;
pub mod cli;
pub mod explore;
pub mod guide;
pub mod harness;
pub mod miniquic;
pub mod netmodel;
pub mod report;
pub mod run;
pub mod symval;
