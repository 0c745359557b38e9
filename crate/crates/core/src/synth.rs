//! Seeded random toy models.
//!
//! Up, gate and router entries are `N(0, 1/d_model)`. Down columns are
//! `N(0, gain²/d_ff)` times a per-neuron log-normal scale, which gives the
//! non-uniform basis-vector norms seen in trained FFNs.
//!
//! A gated FFN is roughly quadratic in its input, so stacked layers without
//! a norm drift in scale. [`random_model`] therefore rescales each layer's
//! down projections so that on a unit Gaussian probe batch, pushed through
//! the already-built prefix, the median per-token RMS is `output_rms`.
//! Token-level spread still widens with depth.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{ExpertWeights, MoELayer, MoEModel, ModelConfig};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerGen {
    /// Log-space standard deviation of the per-neuron down-column scale.
    pub neuron_scale_sigma: f64,
    /// Multiplier on the down-projection standard deviation.
    pub down_gain: f64,
    /// Median per-token output RMS targeted by [`random_model`]; `None`
    /// keeps the raw scale.
    pub output_rms: Option<f64>,
}

impl Default for LayerGen {
    fn default() -> Self {
        Self {
            neuron_scale_sigma: 0.5,
            down_gain: 2.0,
            output_rms: Some(1.0),
        }
    }
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix<f32> {
    if std == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng) as f32)
}

pub fn gaussian_matrix_f64<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

pub fn random_expert<R: Rng + ?Sized>(d_model: usize, width: usize, gen: &LayerGen, rng: &mut R) -> ExpertWeights {
    let in_std = 1.0 / (d_model as f64).sqrt();
    let w_up = gaussian_matrix(rng, width, d_model, in_std);
    let w_gate = gaussian_matrix(rng, width, d_model, in_std);
    let mut w_down = gaussian_matrix(rng, d_model, width, gen.down_gain / (width.max(1) as f64).sqrt());
    if gen.neuron_scale_sigma > 0.0 {
        let ln = LogNormal::new(0.0, gen.neuron_scale_sigma).expect("finite sigma");
        let scales: Vec<f32> = (0..width).map(|_| ln.sample(rng) as f32).collect();
        for r in 0..d_model {
            for (v, s) in w_down.row_mut(r).iter_mut().zip(&scales) {
                *v *= s;
            }
        }
    }
    ExpertWeights::new(w_up, w_gate, w_down).expect("shapes built consistently")
}

pub fn random_layer<R: Rng + ?Sized>(config: &ModelConfig, gen: &LayerGen, rng: &mut R) -> MoELayer {
    let experts = (0..config.total_experts())
        .map(|_| random_expert(config.d_model, config.d_ff, gen, rng))
        .collect();
    let router = gaussian_matrix(
        rng,
        config.n_experts,
        config.d_model,
        1.0 / (config.d_model as f64).sqrt(),
    );
    MoELayer::new(*config, experts, router).expect("config validated by caller")
}

const PROBE_ROWS: usize = 256;

fn median_token_rms(m: &Matrix<f32>) -> f64 {
    let mut r: Vec<f64> = m
        .iter_rows()
        .map(|row| (row.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>() / row.len().max(1) as f64).sqrt())
        .collect();
    if r.is_empty() {
        return 0.0;
    }
    r.sort_by(f64::total_cmp);
    r[r.len() / 2]
}

/// A seeded toy model. Identical `(config, seed, gen)` give bit-identical
/// weights.
pub fn random_model(config: &ModelConfig, seed: u64, gen: &LayerGen) -> Result<MoEModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = gaussian_matrix(&mut ChaCha8Rng::seed_from_u64(!seed), PROBE_ROWS, config.d_model, 1.0);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let mut layer = random_layer(config, gen, &mut rng);
        if let Some(target) = gen.output_rms {
            let y = layer.forward_batch(&probe)?;
            let r = median_token_rms(&y);
            if r > 0.0 && r.is_finite() {
                let s = (target / r) as f32;
                for e in &mut layer.experts {
                    e.w_down = e.w_down.map(|v| v * s);
                }
            }
        }
        probe = layer.forward_batch(&probe)?;
        layers.push(layer);
    }
    MoEModel::new(*config, layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_generation_is_deterministic() {
        let cfg = ModelConfig {
            n_layers: 2,
            n_experts: 3,
            n_shared: 1,
            d_model: 8,
            d_ff: 4,
            top_k: 2,
        };
        let a = random_model(&cfg, 9, &LayerGen::default()).unwrap();
        let b = random_model(&cfg, 9, &LayerGen::default()).unwrap();
        let c = random_model(&cfg, 10, &LayerGen::default()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.layers[0].widths(), vec![4; 4]);
    }

    #[test]
    fn stacked_layers_keep_unit_scale() {
        let cfg = ModelConfig {
            n_layers: 4,
            n_experts: 8,
            n_shared: 0,
            d_model: 32,
            d_ff: 16,
            top_k: 2,
        };
        let model = random_model(&cfg, 3, &LayerGen::default()).unwrap();
        let mut x = gaussian_matrix(&mut ChaCha8Rng::seed_from_u64(99), 512, 32, 1.0);
        for layer in &model.layers {
            x = layer.forward_batch(&x).unwrap();
            let r = median_token_rms(&x);
            assert!((0.5..2.0).contains(&r), "rms {r}");
        }
        let raw = LayerGen {
            output_rms: None,
            ..LayerGen::default()
        };
        let m = random_model(&cfg, 3, &raw).unwrap();
        assert_eq!(m.layers[0].experts[0].w_up, model.layers[0].experts[0].w_up);
    }
}
