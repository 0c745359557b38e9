//! MoE layer types, the reference forward pass and the micro-expert
//! decomposition.
//!
//! An expert computes `w_down · (silu(w_gate · x) ⊙ (w_up · x))`. Its
//! `width` neurons are the micro-experts: neuron `j` owns row `j` of
//! `w_up` and `w_gate` and column `j` of `w_down`. A layer output is the
//! sum over all micro-experts of `φ_j · w_down[:, j]` where
//! `φ_j = A_expert(x) · silu(w_gate[j] · x) · (w_up[j] · x)`.
//!
//! Experts are stored shared-first. Shared experts always receive router
//! coefficient 1.0; the router only scores the routed experts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CameraError, Result};
use crate::tensor::{dot_f64, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    /// Routed (non-shared) experts per layer.
    pub n_experts: usize,
    pub n_shared: usize,
    pub d_model: usize,
    /// Intermediate width of each expert before pruning.
    pub d_ff: usize,
    pub top_k: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 {
            return Err(CameraError::invalid("n_experts", "must be at least 1"));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(CameraError::invalid(
                "top_k",
                format!("must be in 1..={}, got {}", self.n_experts, self.top_k),
            ));
        }
        if self.d_model == 0 {
            return Err(CameraError::invalid("d_model", "must be at least 1"));
        }
        if self.d_ff == 0 {
            return Err(CameraError::invalid("d_ff", "must be at least 1"));
        }
        Ok(())
    }

    /// Shared plus routed experts.
    pub fn total_experts(&self) -> usize {
        self.n_experts + self.n_shared
    }

    /// Micro-experts per unpruned layer, `(n_experts + n_shared) · d_ff`.
    pub fn micro_experts_per_layer(&self) -> usize {
        self.total_experts() * self.d_ff
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    /// `width × d_model`
    pub w_up: Matrix<f32>,
    /// `width × d_model`
    pub w_gate: Matrix<f32>,
    /// `d_model × width`
    pub w_down: Matrix<f32>,
}

impl ExpertWeights {
    pub fn new(w_up: Matrix<f32>, w_gate: Matrix<f32>, w_down: Matrix<f32>) -> Result<Self> {
        let width = w_up.rows();
        let d_model = w_up.cols();
        if w_gate.shape() != (width, d_model) {
            return Err(CameraError::DimensionMismatch {
                what: "w_gate rows",
                expected: width,
                got: w_gate.rows(),
            });
        }
        if w_down.shape() != (d_model, width) {
            return Err(CameraError::DimensionMismatch {
                what: "w_down columns",
                expected: width,
                got: w_down.cols(),
            });
        }
        Ok(Self { w_up, w_gate, w_down })
    }

    /// A width-0 expert; contributes the zero vector.
    pub fn empty(d_model: usize) -> Self {
        Self {
            w_up: Matrix::zeros(0, d_model),
            w_gate: Matrix::zeros(0, d_model),
            w_down: Matrix::zeros(d_model, 0),
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w_up.rows()
    }

    #[inline]
    pub fn d_model(&self) -> usize {
        self.w_up.cols()
    }

    pub fn view(&self, neuron: usize) -> Result<MicroExpertView<'_>> {
        if neuron >= self.width() {
            return Err(CameraError::IndexOutOfRange {
                what: "neuron",
                index: neuron,
                limit: self.width(),
            });
        }
        Ok(MicroExpertView {
            w_up_row: self.w_up.row(neuron),
            w_gate_row: self.w_gate.row(neuron),
            w_down_col: self.w_down.column(neuron),
        })
    }

    /// `silu(w_gate[j]·x) · (w_up[j]·x)` for every neuron `j`.
    pub fn hidden(&self, x: &[f32]) -> Result<Vec<f64>> {
        check_len("expert input", self.d_model(), x.len())?;
        Ok((0..self.width())
            .map(|j| silu(dot_f64(self.w_gate.row(j), x)) * dot_f64(self.w_up.row(j), x))
            .collect())
    }

    /// Squared norms of the basis vectors (columns of `w_down`).
    pub fn basis_sq_norms(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.width()];
        for row in self.w_down.iter_rows() {
            for (acc, &v) in out.iter_mut().zip(row) {
                *acc += f64::from(v) * f64::from(v);
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.w_up.all_finite() && self.w_gate.all_finite() && self.w_down.all_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MicroExpertId {
    pub expert: usize,
    pub neuron: usize,
    pub flat: usize,
}

/// Borrowed view of one micro-expert's three weight vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroExpertView<'a> {
    pub w_up_row: &'a [f32],
    pub w_gate_row: &'a [f32],
    /// The basis vector. Columns are strided in row-major storage, so this
    /// one is copied out.
    pub w_down_col: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoELayer {
    pub config: ModelConfig,
    /// `n_shared` shared experts followed by `n_experts` routed experts.
    pub experts: Vec<ExpertWeights>,
    /// `n_experts × d_model`
    pub router: Matrix<f32>,
}

impl MoELayer {
    pub fn new(config: ModelConfig, experts: Vec<ExpertWeights>, router: Matrix<f32>) -> Result<Self> {
        config.validate()?;
        if experts.len() != config.total_experts() {
            return Err(CameraError::DimensionMismatch {
                what: "expert count",
                expected: config.total_experts(),
                got: experts.len(),
            });
        }
        for e in &experts {
            check_len("expert d_model", config.d_model, e.d_model())?;
        }
        if router.shape() != (config.n_experts, config.d_model) {
            return Err(CameraError::DimensionMismatch {
                what: "router rows",
                expected: config.n_experts,
                got: router.rows(),
            });
        }
        Ok(Self {
            config,
            experts,
            router,
        })
    }

    pub fn widths(&self) -> Vec<usize> {
        self.experts.iter().map(ExpertWeights::width).collect()
    }

    /// Current micro-expert count (sum of expert widths).
    pub fn n_micro_experts(&self) -> usize {
        self.experts.iter().map(ExpertWeights::width).sum()
    }

    pub fn is_shared(&self, expert: usize) -> bool {
        expert < self.config.n_shared
    }

    /// Flat offset of each expert's first micro-expert.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.experts
            .iter()
            .map(|e| {
                let o = acc;
                acc += e.width();
                o
            })
            .collect()
    }

    pub fn micro_expert(&self, flat: usize) -> Result<MicroExpertId> {
        let mut base = 0;
        for (expert, e) in self.experts.iter().enumerate() {
            if flat < base + e.width() {
                return Ok(MicroExpertId {
                    expert,
                    neuron: flat - base,
                    flat,
                });
            }
            base += e.width();
        }
        Err(CameraError::IndexOutOfRange {
            what: "micro-expert",
            index: flat,
            limit: base,
        })
    }

    pub fn micro_expert_at(&self, expert: usize, neuron: usize) -> Result<MicroExpertId> {
        let e = self.experts.get(expert).ok_or(CameraError::IndexOutOfRange {
            what: "expert",
            index: expert,
            limit: self.experts.len(),
        })?;
        if neuron >= e.width() {
            return Err(CameraError::IndexOutOfRange {
                what: "neuron",
                index: neuron,
                limit: e.width(),
            });
        }
        let flat = self.experts[..expert].iter().map(ExpertWeights::width).sum::<usize>() + neuron;
        Ok(MicroExpertId { expert, neuron, flat })
    }

    pub fn view(&self, id: MicroExpertId) -> Result<MicroExpertView<'_>> {
        self.experts
            .get(id.expert)
            .ok_or(CameraError::IndexOutOfRange {
                what: "expert",
                index: id.expert,
                limit: self.experts.len(),
            })?
            .view(id.neuron)
    }

    /// All basis vectors stacked as rows, `N_e × d_model`, in flat order.
    pub fn basis_matrix(&self) -> Matrix<f64> {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(self.n_micro_experts() * d);
        for e in &self.experts {
            for j in 0..e.width() {
                data.extend((0..d).map(|r| f64::from(e.w_down.get(r, j))));
            }
        }
        Matrix::from_vec(self.n_micro_experts(), d, data).expect("basis buffer sized from widths")
    }

    /// Squared basis-vector norms in flat order.
    pub fn basis_sq_norms(&self) -> Vec<f64> {
        self.experts.iter().flat_map(|e| e.basis_sq_norms()).collect()
    }

    pub fn route(&self, x: &[f32]) -> Result<RouterWeights> {
        route(&self.router, x, &self.config)
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        moe_forward(self, x)
    }

    /// Row-wise forward over a batch. Rows are independent, so the result
    /// does not depend on the thread count.
    pub fn forward_batch(&self, x: &Matrix<f32>) -> Result<Matrix<f32>> {
        check_len("batch d_model", self.config.d_model, x.cols())?;
        let rows: Vec<Vec<f32>> = (0..x.rows())
            .into_par_iter()
            .map(|t| moe_forward(self, x.row(t)))
            .collect::<Result<_>>()?;
        Matrix::from_rows(self.config.d_model, rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoEModel {
    pub config: ModelConfig,
    pub layers: Vec<MoELayer>,
}

impl MoEModel {
    pub fn new(config: ModelConfig, layers: Vec<MoELayer>) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.n_layers {
            return Err(CameraError::DimensionMismatch {
                what: "layer count",
                expected: config.n_layers,
                got: layers.len(),
            });
        }
        Ok(Self { config, layers })
    }

    pub fn layer(&self, index: usize) -> Result<&MoELayer> {
        self.layers.get(index).ok_or(CameraError::IndexOutOfRange {
            what: "layer",
            index,
            limit: self.layers.len(),
        })
    }

    /// Chains the layers: each layer's output is the next layer's input.
    pub fn forward_batch(&self, x: &Matrix<f32>) -> Result<Matrix<f32>> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward_batch(&h)?;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = moe_forward(layer, &h)?;
        }
        Ok(h)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.n_micro_experts() * 3 * self.config.d_model)
            .sum()
    }
}

/// Per-token expert coefficients `A`, aligned with `MoELayer::experts`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterWeights {
    pub coefficients: Vec<f64>,
}

impl RouterWeights {
    #[inline]
    pub fn get(&self, expert: usize) -> f64 {
        self.coefficients[expert]
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_vec(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| silu(x)).collect()
}

/// Softmax over the routed logits, keep the `top_k` largest (lower index
/// wins ties), renormalize the kept weights to sum to one. Shared experts
/// get 1.0.
pub fn route(router: &Matrix<f32>, x: &[f32], config: &ModelConfig) -> Result<RouterWeights> {
    if config.top_k == 0 || config.top_k > config.n_experts {
        return Err(CameraError::invalid(
            "top_k",
            format!("must be in 1..={}, got {}", config.n_experts, config.top_k),
        ));
    }
    check_len("router input", config.d_model, x.len())?;
    check_len("router rows", config.n_experts, router.rows())?;

    let logits: Vec<f64> = router.iter_rows().map(|r| dot_f64(r, x)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|&e| e / z).collect();

    let mut order: Vec<usize> = (0..config.n_experts).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let kept = &order[..config.top_k];
    let kept_sum: f64 = kept.iter().map(|&i| probs[i]).sum();

    let mut coefficients = vec![0.0; config.total_experts()];
    coefficients[..config.n_shared].fill(1.0);
    for &i in kept {
        coefficients[config.n_shared + i] = probs[i] / kept_sum;
    }
    Ok(RouterWeights { coefficients })
}

/// `w_down · (silu(w_gate·x) ⊙ (w_up·x))`, accumulated in `f64`.
pub fn expert_forward(e: &ExpertWeights, x: &[f32]) -> Result<Vec<f64>> {
    let h = e.hidden(x)?;
    Ok(e.w_down
        .iter_rows()
        .map(|row| row.iter().zip(&h).map(|(&w, &hj)| f64::from(w) * hj).sum())
        .collect())
}

pub fn moe_forward(layer: &MoELayer, x: &[f32]) -> Result<Vec<f32>> {
    let a = layer.route(x)?;
    let mut y = vec![0.0f64; layer.config.d_model];
    for (i, e) in layer.experts.iter().enumerate() {
        let ai = a.get(i);
        if ai == 0.0 || e.width() == 0 {
            continue;
        }
        for (acc, v) in y.iter_mut().zip(expert_forward(e, x)?) {
            *acc += ai * v;
        }
    }
    Ok(y.into_iter().map(|v| v as f32).collect())
}

/// The activation coefficient `φ` of one micro-expert for input `x`.
pub fn activation_coefficient(layer: &MoELayer, id: MicroExpertId, x: &[f32]) -> Result<f64> {
    let view = layer.view(id)?;
    check_len("micro-expert input", layer.config.d_model, x.len())?;
    let a = layer.route(x)?.get(id.expert);
    Ok(a * silu(dot_f64(view.w_gate_row, x)) * dot_f64(view.w_up_row, x))
}

/// `φ_i · w_i` for one micro-expert.
pub fn micro_expert_contribution(layer: &MoELayer, id: MicroExpertId, x: &[f32]) -> Result<Vec<f64>> {
    let phi = activation_coefficient(layer, id, x)?;
    let view = layer.view(id)?;
    Ok(view.w_down_col.iter().map(|&w| phi * f64::from(w)).collect())
}

/// Reorders an expert's micro-experts: new neuron `j` is old neuron
/// `perm[j]`. Rows of up/gate and columns of down move together.
pub fn permute_micro_experts(e: &ExpertWeights, perm: &[usize]) -> Result<ExpertWeights> {
    check_permutation(perm, e.width())?;
    Ok(ExpertWeights {
        w_up: e.w_up.select_rows(perm),
        w_gate: e.w_gate.select_rows(perm),
        w_down: e.w_down.select_cols(perm),
    })
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(CameraError::invalid(
            "perm",
            format!("length {} does not match width {}", perm.len(), n),
        ));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(CameraError::invalid("perm", "not a bijection"));
        }
    }
    Ok(())
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(CameraError::DimensionMismatch { what, expected, got });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{random_layer, LayerGen};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(n_experts: usize, n_shared: usize, d_model: usize, d_ff: usize, top_k: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_experts,
            n_shared,
            d_model,
            d_ff,
            top_k,
        }
    }

    fn scalar_expert() -> ExpertWeights {
        ExpertWeights::new(
            Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
            Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            Matrix::from_vec(1, 1, vec![3.0]).unwrap(),
        )
        .unwrap()
    }

    // x / (1 + e^-x) evaluated to 20 digits with mpmath.
    const SILU_1: f64 = 0.731_058_578_630_004_9;
    const SILU_M1: f64 = -0.268_941_421_369_995_1;

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(1.0) - SILU_1).abs() < 1e-15);
        assert!((silu(-1.0) - SILU_M1).abs() < 1e-15);
        // silu(x) - silu(-x) = x
        assert!((silu(1.0) - silu(-1.0) - 1.0).abs() < 1e-15);
        assert_eq!(silu_vec(&[0.0, 1.0]), vec![0.0, silu(1.0)]);
    }

    #[test]
    fn route_symmetric_logits() {
        let cfg = config(4, 0, 3, 1, 4);
        let router = Matrix::zeros(4, 3);
        let a = route(&router, &[1.0, 2.0, 3.0], &cfg).unwrap();
        for &c in &a.coefficients {
            assert!((c - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn route_top1_is_exactly_one() {
        let cfg = config(3, 1, 1, 1, 1);
        let router = Matrix::from_vec(3, 1, vec![0.5, 2.0, -1.0]).unwrap();
        let a = route(&router, &[1.0], &cfg).unwrap();
        assert_eq!(a.coefficients, vec![1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn route_top2_of_four() {
        // logits (2, 1, 0, 0) -> (e^2, e^1) / (e^2 + e^1)
        let cfg = config(4, 0, 1, 1, 2);
        let router = Matrix::from_vec(4, 1, vec![2.0, 1.0, 0.0, 0.0]).unwrap();
        let a = route(&router, &[1.0], &cfg).unwrap();
        let e2 = 2f64.exp();
        let e1 = 1f64.exp();
        assert!((a.get(0) - e2 / (e2 + e1)).abs() < 1e-15);
        assert!((a.get(1) - e1 / (e2 + e1)).abs() < 1e-15);
        assert_eq!(a.get(2), 0.0);
        assert_eq!(a.get(3), 0.0);
    }

    #[test]
    fn route_ties_prefer_lower_index() {
        let cfg = config(4, 0, 1, 1, 1);
        let router = Matrix::from_vec(4, 1, vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        let a = route(&router, &[1.0], &cfg).unwrap();
        assert_eq!(a.coefficients, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn route_rejects_bad_top_k() {
        let cfg = config(2, 0, 1, 1, 3);
        assert!(route(&Matrix::zeros(2, 1), &[1.0], &cfg).is_err());
    }

    #[test]
    fn expert_forward_scalar_case() {
        let e = scalar_expert();
        let y = expert_forward(&e, &[1.0]).unwrap();
        // 3 · silu(1) · 2
        assert!((y[0] - 6.0 * SILU_1).abs() < 1e-12);
        assert!((y[0] - 4.386_351_471_780_029).abs() < 1e-12);
        assert_eq!(expert_forward(&e, &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn width_zero_expert_is_zero() {
        let e = ExpertWeights::empty(4);
        assert_eq!(expert_forward(&e, &[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn expert_dimension_mismatch() {
        assert!(expert_forward(&scalar_expert(), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn single_expert_layer_matches_expert() {
        let cfg = config(1, 0, 1, 1, 1);
        let layer = MoELayer::new(cfg, vec![scalar_expert()], Matrix::zeros(1, 1)).unwrap();
        let y = moe_forward(&layer, &[1.0]).unwrap();
        assert_eq!(y[0], expert_forward(&scalar_expert(), &[1.0]).unwrap()[0] as f32);
        let id = layer.micro_expert(0).unwrap();
        let c = micro_expert_contribution(&layer, id, &[1.0]).unwrap();
        assert!((c[0] - 6.0 * SILU_1).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let cfg = config(3, 1, 4, 2, 2);
        let experts = (0..4)
            .map(|_| ExpertWeights::new(Matrix::zeros(2, 4), Matrix::zeros(2, 4), Matrix::zeros(4, 2)).unwrap())
            .collect();
        let layer = MoELayer::new(cfg, experts, Matrix::zeros(3, 4)).unwrap();
        assert_eq!(moe_forward(&layer, &[1.0, -1.0, 0.5, 2.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn decomposition_matches_forward_on_seeded_layer() {
        let cfg = config(4, 0, 5, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = random_layer(&cfg, &LayerGen::default(), &mut rng);
        let x: Vec<f32> = (0..5).map(|i| (i as f32 - 2.0) * 0.7).collect();
        let y = moe_forward(&layer, &x).unwrap();
        assert_eq!(layer.n_micro_experts(), 12);
        let mut sum = vec![0.0f64; 5];
        for flat in 0..12 {
            let id = layer.micro_expert(flat).unwrap();
            for (s, c) in sum.iter_mut().zip(micro_expert_contribution(&layer, id, &x).unwrap()) {
                *s += c;
            }
        }
        for (a, b) in y.iter().zip(&sum) {
            assert!((f64::from(*a) - b).abs() <= 1e-4 * (1.0 + f64::from(a.abs())));
        }
    }

    #[test]
    fn unrouted_expert_contributes_nothing() {
        let cfg = config(2, 0, 1, 1, 1);
        let router = Matrix::from_vec(2, 1, vec![5.0, -5.0]).unwrap();
        let layer = MoELayer::new(cfg, vec![scalar_expert(), scalar_expert()], router).unwrap();
        let id = layer.micro_expert(1).unwrap();
        assert_eq!(id.expert, 1);
        assert_eq!(micro_expert_contribution(&layer, id, &[1.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn flat_indexing_is_a_bijection() {
        let cfg = config(2, 1, 2, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = random_layer(&cfg, &LayerGen::default(), &mut rng);
        layer.experts[1] = ExpertWeights::empty(2);
        assert_eq!(layer.widths(), vec![3, 0, 3]);
        for flat in 0..6 {
            let id = layer.micro_expert(flat).unwrap();
            assert_eq!(layer.micro_expert_at(id.expert, id.neuron).unwrap(), id);
        }
        assert!(layer.micro_expert(6).is_err());
        assert_eq!(layer.micro_expert(3).unwrap().expert, 2);
    }

    #[test]
    fn view_aliases_rows_and_column() {
        let cfg = config(1, 0, 2, 2, 1);
        let e = ExpertWeights::new(
            Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            Matrix::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap(),
            Matrix::from_vec(2, 2, vec![9.0, 10.0, 11.0, 12.0]).unwrap(),
        )
        .unwrap();
        let layer = MoELayer::new(cfg, vec![e], Matrix::zeros(1, 2)).unwrap();
        let v = layer.view(layer.micro_expert(1).unwrap()).unwrap();
        assert_eq!(v.w_up_row, &[3.0, 4.0]);
        assert_eq!(v.w_gate_row, &[7.0, 8.0]);
        assert_eq!(v.w_down_col, vec![10.0, 12.0]);
    }

    #[test]
    fn identity_permutation_is_bit_identical() {
        let cfg = config(1, 0, 6, 5, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = random_layer(&cfg, &LayerGen::default(), &mut rng);
        let e = &layer.experts[0];
        assert_eq!(&permute_micro_experts(e, &[0, 1, 2, 3, 4]).unwrap(), e);
    }

    #[test]
    fn reversal_of_width_two_scalar_expert() {
        let e = ExpertWeights::new(
            Matrix::from_vec(2, 1, vec![2.0, -0.5]).unwrap(),
            Matrix::from_vec(2, 1, vec![1.0, 1.5]).unwrap(),
            Matrix::from_vec(1, 2, vec![3.0, 0.25]).unwrap(),
        )
        .unwrap();
        let p = permute_micro_experts(&e, &[1, 0]).unwrap();
        let direct = 3.0 * silu(1.0) * 2.0 + 0.25 * silu(1.5) * -0.5;
        assert!((expert_forward(&p, &[1.0]).unwrap()[0] - direct).abs() < 1e-6);
        assert!((expert_forward(&e, &[1.0]).unwrap()[0] - direct).abs() < 1e-6);
    }

    #[test]
    fn permutation_must_be_bijection() {
        let e = ExpertWeights::new(Matrix::zeros(3, 1), Matrix::zeros(3, 1), Matrix::zeros(1, 3)).unwrap();
        assert!(permute_micro_experts(&e, &[0, 0, 1]).is_err());
        assert!(permute_micro_experts(&e, &[0, 1]).is_err());
        assert!(permute_micro_experts(&e, &[0, 1, 3]).is_err());
        assert_eq!(inverse_permutation(&[2, 0, 1]), vec![1, 2, 0]);
    }

    #[test]
    fn layer_validation() {
        let cfg = config(2, 0, 3, 1, 1);
        assert!(MoELayer::new(cfg, vec![ExpertWeights::empty(3)], Matrix::zeros(2, 3)).is_err());
        assert!(MoELayer::new(
            cfg,
            vec![ExpertWeights::empty(3), ExpertWeights::empty(2)],
            Matrix::zeros(2, 3)
        )
        .is_err());
        assert!(MoELayer::new(
            cfg,
            vec![ExpertWeights::empty(3), ExpertWeights::empty(3)],
            Matrix::zeros(1, 3)
        )
        .is_err());
        assert!(ExpertWeights::new(Matrix::zeros(2, 3), Matrix::zeros(1, 3), Matrix::zeros(3, 2)).is_err());
    }
}
