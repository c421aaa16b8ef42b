//! Secure federated-aggregation simulator.
//!
//! The pipeline under study: clients compute a local parameter delta,
//! binarize it against a median threshold, encrypt the signs with an
//! additively homomorphic Paillier key, and the server aggregates
//! ciphertexts, decrypts only the per-coordinate sum, and applies a
//! Byzantine sign-of-sum filter plus a momentum update. Around that core
//! sit baseline aggregators (FedAvg, DP mean, signSGD), baseline
//! quantizers (QSGD, TernGrad), synthetic data generation with non-IID
//! partitioning, a threat harness (poisoning, backdoor triggers, gradient
//! inversion), and a faithfulness guard for calibrated claim filtering.
//!
//! Everything is deterministic given a master seed: randomness is always
//! derived from explicit seeds, never from global state, so client work
//! can run on a thread pool without changing any result. The `parallel`
//! feature (on by default) backs the data-parallel inner loops with
//! rayon; without it the same loops run sequentially.

pub mod config;
pub mod datasim;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod fed;
pub mod guard;
pub mod learners;
pub mod paillier;
pub mod quantizer;
pub mod report;
pub mod seeds;
pub mod threat;

pub use error::{Result, SafeLmError};
