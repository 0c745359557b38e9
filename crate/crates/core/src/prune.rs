//! Structured micro-expert pruning.
//!
//! Each layer keeps its `m = round((1 − λ)·N_e)` highest-energy
//! micro-experts (at least one), selected globally across shared and
//! routed experts. Removing a micro-expert drops its up row, gate row and
//! down column together. Layers are processed in order and every layer is
//! ranked on the hidden states produced by the already-pruned prefix.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibBatch, LayerSamples};
use crate::error::{CameraError, Result};
use crate::model::{check_len, ExpertWeights, MoELayer, MoEModel};
use crate::rank::{rank_micro_experts, Ranking};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetainSet {
    /// Kept flat indices, ascending.
    pub kept: Vec<usize>,
    /// Removed flat indices, ascending.
    pub removed: Vec<usize>,
    /// Kept neuron indices of each expert, ascending.
    pub per_expert: Vec<Vec<usize>>,
}

impl RetainSet {
    pub fn from_kept(kept: &[usize], widths: &[usize]) -> Result<Self> {
        let n_e: usize = widths.iter().sum();
        let mut mask = vec![false; n_e];
        for &i in kept {
            if i >= n_e {
                return Err(CameraError::IndexOutOfRange {
                    what: "micro-expert",
                    index: i,
                    limit: n_e,
                });
            }
            mask[i] = true;
        }
        let mut per_expert = Vec::with_capacity(widths.len());
        let mut base = 0;
        for &w in widths {
            per_expert.push((0..w).filter(|&j| mask[base + j]).collect());
            base += w;
        }
        Ok(Self {
            kept: (0..n_e).filter(|&i| mask[i]).collect(),
            removed: (0..n_e).filter(|&i| !mask[i]).collect(),
            per_expert,
        })
    }

    pub fn keep_all(widths: &[usize]) -> Self {
        let n_e: usize = widths.iter().sum();
        Self::from_kept(&(0..n_e).collect::<Vec<_>>(), widths).expect("indices in range")
    }

    pub fn n_micro_experts(&self) -> usize {
        self.kept.len() + self.removed.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub lambda: f64,
    pub alpha: f64,
    /// Keep every shared-expert micro-expert and spend the rest of the
    /// budget on routed experts. Off by default.
    pub protect_shared: bool,
}

impl PruneConfig {
    pub fn new(lambda: f64, alpha: f64) -> Self {
        Self {
            lambda,
            alpha,
            protect_shared: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CameraError::invalid(
                "alpha",
                format!("must be in [0, 1], got {}", self.alpha),
            ));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(CameraError::invalid(
            "lambda",
            format!("must be in [0, 1), got {lambda}"),
        ));
    }
    Ok(())
}

/// `round_half_up((1 − λ)·N_e)`, at least 1 when `N_e > 0`.
pub fn retain_count(lambda: f64, n_e: usize) -> usize {
    if n_e == 0 {
        return 0;
    }
    let m = ((1.0 - lambda) * n_e as f64 + 0.5).floor() as usize;
    m.clamp(1, n_e)
}

pub fn select_retain_set(ranking: &Ranking, lambda: f64, widths: &[usize]) -> Result<RetainSet> {
    check_lambda(lambda)?;
    let n_e: usize = widths.iter().sum();
    check_len("ranking length", n_e, ranking.len())?;
    let m = retain_count(lambda, n_e);
    RetainSet::from_kept(&ranking.order[..m], widths)
}

/// Like [`select_retain_set`] but never removes shared-expert micro-experts
/// (the first `n_shared` experts).
pub fn select_retain_set_protecting_shared(
    ranking: &Ranking,
    lambda: f64,
    widths: &[usize],
    n_shared: usize,
) -> Result<RetainSet> {
    check_lambda(lambda)?;
    let n_e: usize = widths.iter().sum();
    check_len("ranking length", n_e, ranking.len())?;
    let shared_end: usize = widths[..n_shared.min(widths.len())].iter().sum();
    let m = retain_count(lambda, n_e).max(shared_end);
    let mut kept: Vec<usize> = (0..shared_end).collect();
    kept.extend(
        ranking
            .order
            .iter()
            .copied()
            .filter(|&i| i >= shared_end)
            .take(m - shared_end),
    );
    RetainSet::from_kept(&kept, widths)
}

/// Uniformly random retain set of size `m`; the baseline for comparisons.
pub fn random_retain_set<R: Rng + ?Sized>(widths: &[usize], m: usize, rng: &mut R) -> Result<RetainSet> {
    let n_e: usize = widths.iter().sum();
    if m > n_e {
        return Err(CameraError::invalid("m", format!("must be at most {n_e}, got {m}")));
    }
    let kept = sample(rng, n_e, m).into_vec();
    RetainSet::from_kept(&kept, widths)
}

pub fn prune_layer(layer: &MoELayer, retain: &RetainSet) -> Result<MoELayer> {
    check_len("retain expert count", layer.experts.len(), retain.per_expert.len())?;
    let experts = layer
        .experts
        .iter()
        .zip(&retain.per_expert)
        .map(|(e, keep)| {
            if let Some(&bad) = keep.iter().find(|&&j| j >= e.width()) {
                return Err(CameraError::IndexOutOfRange {
                    what: "neuron",
                    index: bad,
                    limit: e.width(),
                });
            }
            ExpertWeights::new(
                e.w_up.select_rows(keep),
                e.w_gate.select_rows(keep),
                e.w_down.select_cols(keep),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    MoELayer::new(layer.config, experts, layer.router.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPruneRecord {
    pub layer: usize,
    pub micro_experts_before: usize,
    pub kept: usize,
    pub widths_before: Vec<usize>,
    pub widths_after: Vec<usize>,
    /// Energy of the last kept micro-expert.
    pub boundary_energy: f64,
    /// `‖Y − Ŷ‖_F² / ‖Y‖_F²` on this layer's calibration inputs.
    pub relative_decoding_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub model: MoEModel,
    pub retain_sets: Vec<RetainSet>,
    pub records: Vec<LayerPruneRecord>,
}

fn relative_error(y: &crate::tensor::Matrix<f32>, y_hat: &crate::tensor::Matrix<f32>) -> f64 {
    let num: f64 = y
        .as_slice()
        .iter()
        .zip(y_hat.as_slice())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum();
    let den: f64 = y.as_slice().iter().map(|&a| f64::from(a).powi(2)).sum();
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

pub fn prune_model(model: &MoEModel, batch: &CalibBatch, config: &PruneConfig) -> Result<PruneOutcome> {
    config.validate()?;
    check_len("calibration d_model", model.config.d_model, batch.d_model())?;
    let mut hidden = batch.x.clone();
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut retain_sets = Vec::with_capacity(model.layers.len());
    let mut records = Vec::with_capacity(model.layers.len());

    for (i, layer) in model.layers.iter().enumerate() {
        let y = layer.forward_batch(&hidden)?;
        let samples = LayerSamples { x: hidden, y };
        let (ranking, scores) = rank_micro_experts(layer, &samples, config.alpha)?;
        let widths = layer.widths();
        let retain = if config.protect_shared {
            select_retain_set_protecting_shared(&ranking, config.lambda, &widths, layer.config.n_shared)?
        } else {
            select_retain_set(&ranking, config.lambda, &widths)?
        };
        let pruned = prune_layer(layer, &retain)?;
        let y_hat = pruned.forward_batch(&samples.x)?;

        let boundary_energy = retain
            .kept
            .iter()
            .map(|&k| scores.energy[k])
            .fold(f64::INFINITY, f64::min);
        records.push(LayerPruneRecord {
            layer: i,
            micro_experts_before: layer.n_micro_experts(),
            kept: retain.kept.len(),
            widths_before: widths,
            widths_after: pruned.widths(),
            boundary_energy,
            relative_decoding_error: relative_error(&samples.y, &y_hat),
        });
        hidden = y_hat;
        layers.push(pruned);
        retain_sets.push(retain);
    }
    Ok(PruneOutcome {
        model: MoEModel::new(model.config, layers)?,
        retain_sets,
        records,
    })
}

/// Prunes the same number of micro-experts per layer as [`prune_model`]
/// would, chosen uniformly at random.
pub fn random_prune_model<R: Rng + ?Sized>(model: &MoEModel, lambda: f64, rng: &mut R) -> Result<MoEModel> {
    check_lambda(lambda)?;
    let layers = model
        .layers
        .iter()
        .map(|layer| {
            let widths = layer.widths();
            let m = retain_count(lambda, layer.n_micro_experts());
            prune_layer(layer, &random_retain_set(&widths, m, rng)?)
        })
        .collect::<Result<Vec<_>>>()?;
    MoEModel::new(model.config, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{capture_layer_samples, gen_synthetic};
    use crate::model::{micro_expert_contribution, permute_micro_experts, ModelConfig};
    use crate::oracles::lemma_bound;
    use crate::rank::compute_coefficients;
    use crate::synth::{random_model, LayerGen};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(n_layers: usize) -> ModelConfig {
        ModelConfig {
            n_layers,
            n_experts: 4,
            n_shared: 1,
            d_model: 8,
            d_ff: 6,
            top_k: 2,
        }
    }

    #[test]
    fn retain_counts() {
        assert_eq!(retain_count(0.0, 8), 8);
        assert_eq!(retain_count(0.5, 8), 4);
        assert_eq!(retain_count(0.5, 7), 4);
        assert_eq!(retain_count(0.2, 256), 205);
        assert_eq!(retain_count(0.99, 10), 1);
    }

    #[test]
    fn lambda_zero_keeps_everything() {
        let ranking = Ranking::from_energy(&[3.0, 1.0, 2.0, 0.5]);
        let r = select_retain_set(&ranking, 0.0, &[2, 2]).unwrap();
        assert_eq!(r.kept, vec![0, 1, 2, 3]);
        assert!(r.removed.is_empty());
    }

    #[test]
    fn half_keeps_highest_energy() {
        let energy = [0.1, 5.0, 0.2, 4.0, 3.0, 0.3, 2.0, 0.0];
        let ranking = Ranking::from_energy(&energy);
        let r = select_retain_set(&ranking, 0.5, &[4, 4]).unwrap();
        assert_eq!(r.kept, vec![1, 3, 4, 6]);
        assert_eq!(r.per_expert, vec![vec![1, 3], vec![0, 2]]);
        assert_eq!(r.kept.len() + r.removed.len(), 8);
    }

    #[test]
    fn lambda_out_of_range() {
        let ranking = Ranking::from_energy(&[1.0]);
        assert!(select_retain_set(&ranking, 1.0, &[1]).is_err());
        assert!(select_retain_set(&ranking, -0.1, &[1]).is_err());
    }

    #[test]
    fn protect_shared_keeps_shared_experts() {
        let energy = [0.0, 0.0, 5.0, 4.0, 3.0, 2.0];
        let ranking = Ranking::from_energy(&energy);
        let r = select_retain_set_protecting_shared(&ranking, 0.5, &[2, 4], 1).unwrap();
        assert_eq!(r.kept, vec![0, 1, 2]);
        let plain = select_retain_set(&ranking, 0.5, &[2, 4]).unwrap();
        assert_eq!(plain.kept, vec![2, 3, 4]);
    }

    #[test]
    fn keep_all_is_bit_identical() {
        let model = random_model(&cfg(1), 1, &LayerGen::default()).unwrap();
        let layer = &model.layers[0];
        let pruned = prune_layer(layer, &RetainSet::keep_all(&layer.widths())).unwrap();
        assert_eq!(&pruned, layer);
    }

    #[test]
    fn fully_removed_expert_contributes_zero() {
        let model = random_model(&cfg(1), 2, &LayerGen::default()).unwrap();
        let layer = &model.layers[0];
        let widths = layer.widths();
        // drop routed expert 3 (flat 18..24)
        let kept: Vec<usize> = (0..18).chain(24..30).collect();
        let pruned = prune_layer(layer, &RetainSet::from_kept(&kept, &widths).unwrap()).unwrap();
        assert_eq!(pruned.widths(), vec![6, 6, 6, 0, 6]);
        let batch = gen_synthetic(32, 8, 2, 1.0).unwrap();
        for t in 0..32 {
            let x = batch.x.row(t);
            let a = layer.route(x).unwrap();
            let y0 = layer.forward(x).unwrap();
            let y1 = pruned.forward(x).unwrap();
            assert!(y1.iter().all(|v| v.is_finite()));
            if a.get(3) == 0.0 {
                for (p, q) in y0.iter().zip(&y1) {
                    assert!((p - q).abs() <= 1e-6 * (1.0 + p.abs()));
                }
            }
        }
    }

    #[test]
    fn pruned_layer_equals_restricted_sum() {
        let model = random_model(&cfg(1), 3, &LayerGen::default()).unwrap();
        let layer = &model.layers[0];
        let ranking = Ranking::from_energy(&(0..30).map(|i| ((i * 7) % 30) as f64).collect::<Vec<_>>());
        let retain = select_retain_set(&ranking, 0.4, &layer.widths()).unwrap();
        let pruned = prune_layer(layer, &retain).unwrap();
        let batch = gen_synthetic(8, 8, 3, 1.0).unwrap();
        for t in 0..8 {
            let x = batch.x.row(t);
            let y = pruned.forward(x).unwrap();
            let mut sum = vec![0.0f64; 8];
            for &k in &retain.kept {
                let id = layer.micro_expert(k).unwrap();
                for (s, c) in sum.iter_mut().zip(micro_expert_contribution(layer, id, x).unwrap()) {
                    *s += c;
                }
            }
            for (a, b) in y.iter().zip(&sum) {
                assert!((f64::from(*a) - b).abs() <= 1e-4 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn dropping_lowest_energy_matches_its_energy() {
        let model = random_model(&cfg(1), 4, &LayerGen::default()).unwrap();
        let layer = &model.layers[0];
        let batch = gen_synthetic(64, 8, 4, 1.0).unwrap();
        let s = capture_layer_samples(&model, &batch, 0).unwrap();
        let (ranking, scores) = rank_micro_experts(layer, &s, 0.0).unwrap();
        let last = *ranking.order.last().unwrap();
        let kept: Vec<usize> = ranking.order[..ranking.len() - 1].to_vec();
        let pruned = prune_layer(layer, &RetainSet::from_kept(&kept, &layer.widths()).unwrap()).unwrap();
        // measured in f64 through the coefficient matrix
        let phi = compute_coefficients(layer, &s).unwrap().phi;
        let rep = lemma_bound(&phi, &layer.basis_matrix(), &[last]).unwrap();
        assert!((rep.epsilon - scores.energy[last]).abs() <= 1e-9 * scores.energy[last].max(1e-300));
        // and through the f32 forward pass
        let y_hat = pruned.forward_batch(&s.x).unwrap();
        let err: f64 =
            s.y.as_slice()
                .iter()
                .zip(y_hat.as_slice())
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                .sum();
        let tol = 1e-6 * s.y.to_f64().frobenius_sq();
        assert!(err <= scores.energy[last] + tol);
    }

    #[test]
    fn lambda_zero_model_is_identical() {
        let model = random_model(&cfg(3), 5, &LayerGen::default()).unwrap();
        let batch = gen_synthetic(16, 8, 5, 1.0).unwrap();
        let out = prune_model(&model, &batch, &PruneConfig::new(0.0, 1.0)).unwrap();
        assert_eq!(out.model, model);
    }

    #[test]
    fn single_layer_is_capture_rank_prune() {
        let model = random_model(&cfg(1), 6, &LayerGen::default()).unwrap();
        let batch = gen_synthetic(16, 8, 6, 1.0).unwrap();
        let out = prune_model(&model, &batch, &PruneConfig::new(0.3, 0.5)).unwrap();
        let s = capture_layer_samples(&model, &batch, 0).unwrap();
        let (ranking, _) = rank_micro_experts(&model.layers[0], &s, 0.5).unwrap();
        let retain = select_retain_set(&ranking, 0.3, &model.layers[0].widths()).unwrap();
        assert_eq!(out.model.layers[0], prune_layer(&model.layers[0], &retain).unwrap());
        assert_eq!(out.retain_sets[0], retain);
    }

    #[test]
    fn parameter_count_follows_lambda() {
        let model = random_model(&cfg(2), 7, &LayerGen::default()).unwrap();
        let batch = gen_synthetic(16, 8, 7, 1.0).unwrap();
        let out = prune_model(&model, &batch, &PruneConfig::new(0.25, 1.0)).unwrap();
        let m = retain_count(0.25, 30);
        assert_eq!(out.model.parameter_count(), 2 * m * 3 * 8);
    }

    #[test]
    fn later_layers_are_ranked_on_pruned_prefix() {
        let model = random_model(&cfg(2), 8, &LayerGen::default()).unwrap();
        let batch = gen_synthetic(32, 8, 8, 1.0).unwrap();
        let out = prune_model(&model, &batch, &PruneConfig::new(0.5, 1.0)).unwrap();
        let h = out.model.layers[0].forward_batch(&batch.x).unwrap();
        let y = model.layers[1].forward_batch(&h).unwrap();
        let (ranking, _) = rank_micro_experts(&model.layers[1], &LayerSamples { x: h, y }, 1.0).unwrap();
        let retain = select_retain_set(&ranking, 0.5, &model.layers[1].widths()).unwrap();
        assert_eq!(out.retain_sets[1], retain);
    }

    #[test]
    fn pruning_commutes_with_permutation() {
        let model = random_model(&cfg(1), 9, &LayerGen::default()).unwrap();
        let layer = &model.layers[0];
        let perm = [5, 3, 1, 0, 2, 4];
        let mut permuted = layer.clone();
        permuted.experts[2] = permute_micro_experts(&layer.experts[2], &perm).unwrap();
        let batch = gen_synthetic(32, 8, 9, 1.0).unwrap();
        let s = LayerSamples {
            x: batch.x.clone(),
            y: layer.forward_batch(&batch.x).unwrap(),
        };
        let a = prune_layer(
            layer,
            &select_retain_set(&rank_micro_experts(layer, &s, 1.0).unwrap().0, 0.5, &layer.widths()).unwrap(),
        )
        .unwrap();
        let b = prune_layer(
            &permuted,
            &select_retain_set(
                &rank_micro_experts(&permuted, &s, 1.0).unwrap().0,
                0.5,
                &permuted.widths(),
            )
            .unwrap(),
        )
        .unwrap();
        let ya = a.forward_batch(&batch.x).unwrap();
        let yb = b.forward_batch(&batch.x).unwrap();
        for (p, q) in ya.as_slice().iter().zip(yb.as_slice()) {
            assert!((p - q).abs() <= 1e-5 * (1.0 + p.abs()));
        }
    }

    #[test]
    fn random_retain_is_seeded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let a = random_retain_set(&[4, 4, 4], 5, &mut r1).unwrap();
        let b = random_retain_set(&[4, 4, 4], 5, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.kept.len(), 5);
        assert!(random_retain_set(&[1], 2, &mut r1).is_err());
    }

    #[test]
    fn out_of_range_retain() {
        let model = random_model(&cfg(1), 1, &LayerGen::default()).unwrap();
        let bad = RetainSet {
            kept: vec![],
            removed: vec![],
            per_expert: vec![vec![9], vec![], vec![], vec![], vec![]],
        };
        assert!(prune_layer(&model.layers[0], &bad).is_err());
        assert!(RetainSet::from_kept(&[100], &[2, 2]).is_err());
    }
}
