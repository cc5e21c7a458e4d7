//! Lifted sum-of-squares reasoning for first-order probabilistic knowledge
//! bases over an open universe.
//!
//! The pipeline is [`parser`] → [`grounder`] → [`compiler`] → [`sdp`], with
//! [`certificate`] turning infeasibility into checkable refutations and
//! [`query`] tying the steps together. The runnable programs under
//! `examples/` are the best place to start.

pub mod model;
pub mod parser;
pub mod grounder;
pub mod compiler;
pub mod sdp;
pub mod certificate;
pub mod query;
pub mod cli;
