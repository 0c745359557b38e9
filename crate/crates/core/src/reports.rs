//! Diagnostic tables: energy distributions, per-expert rank distributions,
//! per-expert pruning ratios and layer output approximation errors.
//!
//! Every table is a flat list of rows with a stable column order so the
//! same data can be written as CSV or JSON.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{capture_all_layers, CalibBatch};
use crate::error::{CameraError, Result};
use crate::model::{check_len, MoELayer, MoEModel};
use crate::prune::RetainSet;
use crate::rank::{EnergyScores, Ranking};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
}

impl Quantiles {
    /// Linear-interpolation quantiles. `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Self {
            min: v[0],
            p25: q(0.25),
            median: q(0.5),
            p75: q(0.75),
            max: v[v.len() - 1],
        })
    }
}

// ---------------------------------------------------------------------------
// Energy distribution

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyDistribution {
    pub alpha: f64,
    pub dropped: usize,
    /// Remaining energies, descending.
    pub energies: Vec<f64>,
    pub quantiles: Quantiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub layer: usize,
    pub position: usize,
    pub energy: f64,
}

/// Sorted energies with the `drop_top` largest removed.
pub fn energy_distribution(scores: &EnergyScores, drop_top: usize) -> Result<EnergyDistribution> {
    let n = scores.energy.len();
    if drop_top >= n {
        return Err(CameraError::invalid(
            "drop_top",
            format!("must be below the micro-expert count {n}, got {drop_top}"),
        ));
    }
    let mut energies = scores.energy.clone();
    energies.sort_by(|a, b| b.total_cmp(a));
    energies.drain(..drop_top);
    let quantiles = Quantiles::of(&energies).expect("non-empty after drop");
    Ok(EnergyDistribution {
        alpha: scores.alpha,
        dropped: drop_top,
        energies,
        quantiles,
    })
}

impl EnergyDistribution {
    pub fn rows(&self, layer: usize) -> Vec<EnergyRow> {
        self.energies
            .iter()
            .enumerate()
            .map(|(position, &energy)| EnergyRow {
                layer,
                position,
                energy,
            })
            .collect()
    }

    /// `max / median`; a heavy tail shows up as a large ratio.
    pub fn tail_ratio(&self) -> f64 {
        self.quantiles.max / self.quantiles.median
    }
}

// ---------------------------------------------------------------------------
// Rank distribution

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDistributionRow {
    pub layer: usize,
    pub expert: usize,
    pub shared: bool,
    pub width: usize,
    pub rank_min: Option<f64>,
    pub rank_p25: Option<f64>,
    pub rank_median: Option<f64>,
    pub rank_p75: Option<f64>,
    pub rank_max: Option<f64>,
    /// Ranks divided by `N_e − 1`, so 0 is the top and 1 the bottom.
    pub norm_min: Option<f64>,
    pub norm_p25: Option<f64>,
    pub norm_median: Option<f64>,
    pub norm_p75: Option<f64>,
    pub norm_max: Option<f64>,
}

/// Box-plot data of each expert's micro-expert global ranks, raw and
/// normalized.
pub fn rank_distribution_per_expert(ranking: &Ranking, layer: &MoELayer) -> Result<Vec<RankDistributionRow>> {
    check_len("ranking length", layer.n_micro_experts(), ranking.len())?;
    let rank_of = ranking.rank_of();
    let scale = (ranking.len().max(2) - 1) as f64;
    let offsets = layer.offsets();
    Ok(layer
        .experts
        .iter()
        .enumerate()
        .map(|(e, w)| {
            let raw: Vec<f64> = (offsets[e]..offsets[e] + w.width())
                .map(|i| rank_of[i] as f64)
                .collect();
            let norm: Vec<f64> = raw.iter().map(|r| r / scale).collect();
            let (rq, nq) = (Quantiles::of(&raw), Quantiles::of(&norm));
            RankDistributionRow {
                layer: 0,
                expert: e,
                shared: layer.is_shared(e),
                width: w.width(),
                rank_min: rq.map(|q| q.min),
                rank_p25: rq.map(|q| q.p25),
                rank_median: rq.map(|q| q.median),
                rank_p75: rq.map(|q| q.p75),
                rank_max: rq.map(|q| q.max),
                norm_min: nq.map(|q| q.min),
                norm_p25: nq.map(|q| q.p25),
                norm_median: nq.map(|q| q.median),
                norm_p75: nq.map(|q| q.p75),
                norm_max: nq.map(|q| q.max),
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Pruning ratios

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRatioRow {
    pub layer: usize,
    pub expert: usize,
    pub shared: bool,
    pub width: usize,
    pub kept: usize,
    /// `1 − kept/width`; 0 for an expert that had no micro-experts.
    pub ratio: f64,
}

pub fn per_expert_prune_ratio(retain: &RetainSet, layer: &MoELayer) -> Result<Vec<PruneRatioRow>> {
    check_len(
        "retain set micro-expert count",
        layer.n_micro_experts(),
        retain.n_micro_experts(),
    )?;
    let kept: Vec<usize> = retain.per_expert.iter().map(Vec::len).collect();
    prune_ratio_from_widths(&layer.widths(), &kept, layer.config.n_shared)
}

/// Same table from widths before and after pruning.
pub fn prune_ratio_from_widths(before: &[usize], after: &[usize], n_shared: usize) -> Result<Vec<PruneRatioRow>> {
    check_len("expert count", before.len(), after.len())?;
    before
        .iter()
        .zip(after)
        .enumerate()
        .map(|(expert, (&width, &kept))| {
            if kept > width {
                return Err(CameraError::invalid(
                    "widths",
                    format!("expert {expert} grew from {width} to {kept}"),
                ));
            }
            Ok(PruneRatioRow {
                layer: 0,
                expert,
                shared: expert < n_shared,
                width,
                kept,
                ratio: if width == 0 {
                    0.0
                } else {
                    1.0 - kept as f64 / width as f64
                },
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Approximation error

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxErrorRecord {
    pub layer: usize,
    /// Sum over tokens of `‖y_b − y_a‖₂`.
    pub l2: f64,
    /// Mean over tokens of the cosine similarity of `y_a` and `y_b`.
    pub cosine: f64,
}

fn row_cosine(a: &[f32], b: &[f32]) -> f64 {
    if a == b {
        return 1.0;
    }
    let (mut dot, mut sa, mut sb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        sa += x * x;
        sb += y * y;
    }
    if sa == 0.0 || sb == 0.0 {
        return 0.0;
    }
    (dot / (sa * sb).sqrt()).clamp(-1.0, 1.0)
}

/// L2 sum and mean cosine between matching rows of two output matrices.
pub fn compare_outputs(layer: usize, a: &Matrix<f32>, b: &Matrix<f32>) -> Result<ApproxErrorRecord> {
    if a.shape() != b.shape() {
        return Err(CameraError::DimensionMismatch {
            what: "output shape",
            expected: a.rows() * a.cols(),
            got: b.rows() * b.cols(),
        });
    }
    let n = a.rows().max(1) as f64;
    let mut l2 = 0.0;
    let mut cos = 0.0;
    for (ra, rb) in a.iter_rows().zip(b.iter_rows()) {
        l2 += ra
            .iter()
            .zip(rb)
            .map(|(&x, &y)| (f64::from(y) - f64::from(x)).powi(2))
            .sum::<f64>()
            .sqrt();
        cos += row_cosine(ra, rb);
    }
    Ok(ApproxErrorRecord {
        layer,
        l2,
        cosine: (cos / n).clamp(-1.0, 1.0),
    })
}

fn check_comparable(a: &MoEModel, b: &MoEModel) -> Result<()> {
    check_len("layer count", a.layers.len(), b.layers.len())?;
    check_len("d_model", a.config.d_model, b.config.d_model)?;
    check_len("expert count", a.config.total_experts(), b.config.total_experts())
}

/// Per requested layer, feeds `model_a`'s upstream hidden states to both
/// models' versions of that layer and compares the outputs.
pub fn approx_error(
    model_a: &MoEModel,
    model_b: &MoEModel,
    batch: &CalibBatch,
    layers: &[usize],
) -> Result<Vec<ApproxErrorRecord>> {
    check_comparable(model_a, model_b)?;
    for &l in layers {
        model_a.layer(l)?;
    }
    let samples = capture_all_layers(model_a, batch)?;
    layers
        .par_iter()
        .map(|&l| {
            let yb = model_b.layers[l].forward_batch(&samples[l].x)?;
            compare_outputs(l, &samples[l].y, &yb)
        })
        .collect()
}

/// Compares the final outputs of two full forward passes; `layer` is the
/// last layer index.
pub fn output_error(model_a: &MoEModel, model_b: &MoEModel, batch: &CalibBatch) -> Result<ApproxErrorRecord> {
    check_comparable(model_a, model_b)?;
    let ya = model_a.forward_batch(&batch.x)?;
    let yb = model_b.forward_batch(&batch.x)?;
    compare_outputs(model_a.layers.len().saturating_sub(1), &ya, &yb)
}

// ---------------------------------------------------------------------------
// Serialization

pub fn to_csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CameraError::io("<csv buffer>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    std::fs::write(path, to_csv_string(rows)?).map_err(|e| CameraError::io(path, e))
}

pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json_string(value)?).map_err(|e| CameraError::io(path, e))
}
