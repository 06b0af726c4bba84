//! Numerical core for retrofitting a concept bottleneck onto a frozen joint
//! text–image embedding space.
//!
//! The pipeline is:
//!
//! 1. [`sae`] learns a sparse dictionary over image embeddings; its atoms are
//!    candidate concept directions that get named outside this crate.
//! 2. [`select`] greedily picks an independent subset of named concepts whose
//!    text embeddings best reconstruct a set of probing image embeddings.
//! 3. [`decompose`] writes every image embedding as a sparse combination of the
//!    selected concept embeddings (orthogonal matching pursuit) and drops the
//!    residue.
//! 4. [`head`] fits a linear classifier on the reconstructed embeddings. Since
//!    the reconstruction is linear in the concepts, logits factor through the
//!    per-concept coefficients, which [`explain`] turns into explanations.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the chat
//! endpoint used to name concepts, and the command line live in `cbm-tools`.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod ablation;
pub mod bank;
pub mod decompose;
pub mod embedding;
pub mod error;
pub mod explain;
pub mod head;
pub mod linalg;
pub mod sae;
pub mod select;
pub mod synth;

pub use bank::ConceptBank;
pub use decompose::{decompose_batch, omp_decompose, OmpConfig, SparseCode};
pub use embedding::EmbeddingMatrix;
pub use error::{Error, Result};
pub use explain::{explain, Explanation};
pub use head::{ConceptWeightMatrix, InitMode, LinearHead, TrainConfig};
pub use linalg::Matrix;
pub use sae::{SaeConfig, SparseDictionary};
pub use select::{select_concepts, SelectionReport, StopReason};
