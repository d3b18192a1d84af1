//! Desk-scale masked-autoencoder scaling experiments.
//!
//! The crate covers the whole pipeline: a synthetic image corpus with a
//! stratified subset sampler ([`corpus`]), a small masked-autoencoder
//! vision transformer with exact gradients ([`mae`]), frozen-feature and
//! low-label evaluation protocols ([`eval`]), the log-log accuracy law and
//! its least-squares fit ([`scaling`]), threshold scenarios
//! ([`scenarios`]) and a resumable experiment grid runner ([`harness`]).

pub mod corpus;
pub mod error;
pub mod eval;
pub mod harness;
pub mod linalg;
pub mod mae;
pub mod rng;
pub mod scaling;
pub mod scenarios;

pub use corpus::{CorpusManifest, ImageRecord, MixtureSpec, SourceTag, SubsetSpec};
pub use error::{Error, Result};
