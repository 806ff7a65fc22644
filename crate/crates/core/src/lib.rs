//! One-shot federated training of a mixture-of-experts language model from
//! heterogeneous on-device language models.
//!
//! The pipeline runs entirely in-process at toy scale:
//!
//! 1. [`datagen`] synthesizes multi-domain Markov corpora and device shards.
//! 2. Devices train small dense LMs ([`models`]) and upload them once
//!    ([`orchestrator::CommLedger`]).
//! 3. [`clustering`] groups devices by data embedding and averages each
//!    group into a proxy teacher.
//! 4. [`distill`] transfers each proxy into a dense base model through a
//!    view-aligned attention adapter.
//! 5. [`fusion`] merges the base models into one MoE and tunes the shared
//!    layers and gate with experts frozen.
//!
//! All numerics are 64-bit and run on the reverse-mode tape in [`tensor`].

pub mod clustering;
pub mod datagen;
pub mod distill;
pub mod error;
pub mod fusion;
pub mod models;
pub mod orchestrator;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
