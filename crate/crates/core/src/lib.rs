//! Micro-expert compression for Mixture-of-Experts layers.
//!
//! An expert FFN `y = W_down (silu(W_gate x) ⊙ W_up x)` splits into `d_ff`
//! micro-experts, one per intermediate neuron: the up row, the gate row and
//! the down column that share that neuron. A layer's output is a weighted
//! sum of micro-expert basis vectors, so micro-experts can be ranked by the
//! energy they contribute on calibration data and then either removed
//! ([`prune`]) or given fewer bits ([`quant`]).
//!
//! ```
//! use camera_moe::{calibration, model::ModelConfig, prune, synth};
//!
//! let config = ModelConfig { n_layers: 2, n_experts: 4, n_shared: 1, d_model: 16, d_ff: 8, top_k: 2 };
//! let model = synth::random_model(&config, 7, &synth::LayerGen::default()).unwrap();
//! let batch = calibration::gen_synthetic(64, 16, 7, 1.0).unwrap();
//! let out = prune::prune_model(&model, &batch, &prune::PruneConfig::new(0.25, 1.0)).unwrap();
//! assert_eq!(out.records[0].kept, 30);
//! ```

pub mod calibration;
pub mod cli;
pub mod error;
pub mod mcam;
pub mod model;
pub mod oracles;
pub mod prune;
pub mod quant;
pub mod rank;
pub mod reports;
pub mod sweeps;
pub mod synth;
pub mod tensor;

pub use calibration::{CalibBatch, LayerSamples};
pub use error::{CameraError, Result};
pub use model::{ExpertWeights, MicroExpertId, MoELayer, MoEModel, ModelConfig};
pub use prune::{PruneConfig, RetainSet};
pub use quant::{QuantParams, QuantPlan, Variant};
pub use rank::{EnergyScores, Ranking};
pub use tensor::Matrix;
