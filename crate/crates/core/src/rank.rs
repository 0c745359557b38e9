//! Micro-expert energy ranking.
//!
//! For each micro-expert `i` with coefficient column `Φ[:, i]` over the
//! calibration tokens and basis vector `w_i`, the decoding-time energy is
//!
//! ```text
//! E_i = [(1 - α)·‖Φ[:, i]‖₂² + α·‖Φ[:, i]‖∞²] · ‖w_i‖₂²
//! ```
//!
//! `α = 0` gives the plain `‖Φ[:, i]‖₂²‖w_i‖₂²` energy. Micro-experts are
//! ranked by descending energy across all experts of the layer, shared
//! experts included, with ties going to the lower flat index.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::LayerSamples;
use crate::error::{CameraError, Result};
use crate::model::{check_len, MoELayer};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCoefficients {
    /// `n × N_e`, columns in flat micro-expert order.
    pub phi: Matrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyScores {
    pub energy: Vec<f64>,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ranking {
    /// Flat indices sorted by descending energy.
    pub order: Vec<usize>,
}

impl Ranking {
    pub fn from_energy(energy: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..energy.len()).collect();
        order.sort_by(|&a, &b| energy[b].total_cmp(&energy[a]).then(a.cmp(&b)));
        Self { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// `rank_of()[flat]` is the position of `flat` in the order (0 = most
    /// important).
    pub fn rank_of(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.order.len()];
        for (r, &i) in self.order.iter().enumerate() {
            ranks[i] = r;
        }
        ranks
    }

    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.order.len()];
        self.order
            .iter()
            .all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
    }
}

pub fn compute_coefficients(layer: &MoELayer, samples: &LayerSamples) -> Result<ActivationCoefficients> {
    check_len("samples d_model", layer.config.d_model, samples.x.cols())?;
    let n = samples.x.rows();
    let routes = (0..n)
        .map(|t| layer.route(samples.x.row(t)))
        .collect::<Result<Vec<_>>>()?;

    // One n × width block per expert; experts are independent.
    let blocks: Vec<Matrix<f64>> = layer
        .experts
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let mut block = Matrix::zeros(n, e.width());
            for (t, a) in routes.iter().enumerate() {
                let ai = a.get(i);
                if ai == 0.0 || e.width() == 0 {
                    continue;
                }
                let h = e.hidden(samples.x.row(t))?;
                for (dst, hj) in block.row_mut(t).iter_mut().zip(h) {
                    *dst = ai * hj;
                }
            }
            Ok(block)
        })
        .collect::<Result<_>>()?;

    let n_e = layer.n_micro_experts();
    let mut phi = Matrix::zeros(n, n_e);
    for t in 0..n {
        let row = phi.row_mut(t);
        let mut off = 0;
        for b in &blocks {
            row[off..off + b.cols()].copy_from_slice(b.row(t));
            off += b.cols();
        }
    }
    Ok(ActivationCoefficients { phi })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CameraError::invalid("alpha", format!("must be in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Energy from a coefficient matrix and squared basis norms. Accumulates
/// left to right over tokens in `f64`.
pub fn energy_from_parts(phi: &Matrix<f64>, basis_sq_norms: &[f64], alpha: f64) -> Result<EnergyScores> {
    check_alpha(alpha)?;
    check_len("basis norm count", phi.cols(), basis_sq_norms.len())?;
    let mut l2 = vec![0.0f64; phi.cols()];
    let mut linf = vec![0.0f64; phi.cols()];
    for row in phi.iter_rows() {
        for ((s, m), &v) in l2.iter_mut().zip(linf.iter_mut()).zip(row) {
            *s += v * v;
            *m = m.max(v.abs());
        }
    }
    let energy = l2
        .iter()
        .zip(&linf)
        .zip(basis_sq_norms)
        .map(|((&s, &m), &w)| ((1.0 - alpha) * s + alpha * m * m) * w)
        .collect();
    Ok(EnergyScores { energy, alpha })
}

pub fn compute_energy(phi: &ActivationCoefficients, layer: &MoELayer, alpha: f64) -> Result<EnergyScores> {
    energy_from_parts(&phi.phi, &layer.basis_sq_norms(), alpha)
}

pub fn rank_micro_experts(layer: &MoELayer, samples: &LayerSamples, alpha: f64) -> Result<(Ranking, EnergyScores)> {
    check_alpha(alpha)?;
    let phi = compute_coefficients(layer, samples)?;
    let scores = compute_energy(&phi, layer, alpha)?;
    Ok((Ranking::from_energy(&scores.energy), scores))
}
