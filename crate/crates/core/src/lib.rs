//! Spiking transformer toolkit: EI_IF rate coding, quantized training
//! surrogates, spike-driven attention kernels, ANN-to-SNN conversion with an
//! equivalence auditor, and STDP-based fine-tuning.

pub mod approximators;
pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod conversion;
pub mod error;
pub mod model;
pub mod neuron;
pub mod plasticity;
pub mod quantization;
pub mod synapsis;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
