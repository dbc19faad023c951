//! Episodic few-shot segmentation with bi-directional prototype prediction
//! and iterative fine-tuning.
//!
//! The crate is `no_std` and only needs `alloc`. Everything here is pure
//! computation over in-memory tensors: a small reverse-mode tape
//! ([`graph`]), a strided CNN encoder ([`encoder`]), the prototype head
//! ([`protonet`]), paired augmentation ([`augment`]), the iterative adaptor
//! ([`ifa`]), episode construction and a synthetic cross-domain generator
//! ([`episodes`], [`synth`]), and the train / fine-tune / evaluate loops
//! ([`harness`]). File formats and the command line live in the `ifaseg`
//! companion crate.
#![no_std]

extern crate alloc;

pub mod augment;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod gestalt;
pub mod graph;
pub mod harness;
pub mod ifa;
pub mod image;
pub mod metrics;
pub mod optim;
pub mod protonet;
pub mod real;
pub mod synth;

pub use error::{Error, Result};
pub use real::Real;
