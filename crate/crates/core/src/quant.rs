//! Micro-expert-aware mixed-precision quantization.
//!
//! The layer ranking is split into three precision levels `S₁, S₂, S₃`
//! (highest energy first) with ratios `r₁, r₂, r₃` and bit-widths
//! `b₁ ≥ b₂ ≥ b₃`. Within every expert the neurons of each level are made
//! contiguous by a colocating permutation, then:
//!
//! * [`Variant::CameraQ`] quantizes the level's rows of up/gate and
//!   columns of down, so every weight of a micro-expert shares one
//!   bit-width.
//! * [`Variant::CameraQDagger`] slices up/gate along the input dimension
//!   instead. Each up/gate row then spans every level.
//!
//! The quantizer is asymmetric round-to-nearest with one min/max scale and
//! zero-point per group. Groups run along the rows of each sliced
//! sub-matrix and stop at the row end. Weights are kept dequantized in
//! `f32` for the forward pass; codes and group metadata are kept for bit
//! accounting and the integrity audit.

use std::collections::BTreeSet;

use num_bigint::BigInt;
use num_rational::BigRational;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibBatch, LayerSamples};
use crate::error::{CameraError, Result};
use crate::model::{check_len, inverse_permutation, permute_micro_experts, ExpertWeights, MoELayer, MoEModel};
use crate::rank::{rank_micro_experts, Ranking};
use crate::tensor::Matrix;

pub const MAX_BITS: u8 = 16;
/// Stored per group: a 16-bit scale and a 16-bit zero-point.
pub const GROUP_OVERHEAD_BITS: u64 = 32;

/// Group-wise affine quantization of a row-major sub-matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedBlock {
    pub bits: u8,
    pub group_size: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, values in `[0, 2^bits − 1]`.
    pub codes: Vec<u16>,
    /// One per group, groups ordered row by row.
    pub scales: Vec<f32>,
    pub zero_points: Vec<f32>,
}

impl QuantizedBlock {
    pub fn groups_per_row(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }

    pub fn n_groups(&self) -> usize {
        self.rows * self.groups_per_row()
    }

    pub fn n_weights(&self) -> usize {
        self.rows * self.cols
    }

    /// Group index of entry `(r, c)`.
    pub fn group_of(&self, r: usize, c: usize) -> usize {
        r * self.groups_per_row() + c / self.group_size
    }

    pub fn dequantize(&self) -> Matrix<f32> {
        Matrix::from_fn(self.rows, self.cols, |r, c| {
            let g = self.group_of(r, c);
            let code = f64::from(self.codes[r * self.cols + c]);
            (f64::from(self.zero_points[g]) + code * f64::from(self.scales[g])) as f32
        })
    }
}

fn check_quant_args(bits: u8, group_size: usize) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(CameraError::invalid(
            "bits",
            format!("must be in 1..={MAX_BITS}, got {bits}"),
        ));
    }
    if group_size == 0 {
        return Err(CameraError::invalid("group_size", "must be at least 1"));
    }
    Ok(())
}

/// Quantizes every row of `m` in groups of `group_size`.
///
/// Per group: `scale = (max − min)/(2^b − 1)`, `zero_point = min`,
/// `code = round((w − min)/scale)`. A constant group gets scale 0 and all
/// codes 0, so it dequantizes to the constant exactly.
pub fn quantize_matrix_affine(m: &Matrix<f32>, bits: u8, group_size: usize) -> Result<QuantizedBlock> {
    check_quant_args(bits, group_size)?;
    if !m.all_finite() {
        return Err(CameraError::NonFiniteWeight);
    }
    let levels = f64::from((1u32 << bits) - 1);
    let (rows, cols) = m.shape();
    let mut codes = vec![0u16; rows * cols];
    let mut scales = Vec::new();
    let mut zero_points = Vec::new();
    for r in 0..rows {
        let row = m.row(r);
        for (gi, chunk) in row.chunks(group_size).enumerate() {
            let lo = chunk.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = chunk.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lo64 = f64::from(lo);
            let scale = (f64::from(hi) - lo64) / levels;
            let base = r * cols + gi * group_size;
            if scale > 0.0 {
                for (k, &w) in chunk.iter().enumerate() {
                    let q = ((f64::from(w) - lo64) / scale).round().clamp(0.0, levels);
                    codes[base + k] = q as u16;
                }
            }
            scales.push(scale as f32);
            zero_points.push(lo);
        }
    }
    Ok(QuantizedBlock {
        bits,
        group_size,
        rows,
        cols,
        codes,
        scales,
        zero_points,
    })
}

/// Quantizes a single vector; groups run along it.
pub fn quantize_group_affine(w: &[f32], bits: u8, group_size: usize) -> Result<QuantizedBlock> {
    quantize_matrix_affine(&Matrix::from_vec(1, w.len(), w.to_vec())?, bits, group_size)
}

// ---------------------------------------------------------------------------
// Plans

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub ratios: [f64; 3],
    pub bits: [u8; 3],
    pub group_size: usize,
    /// Flat indices per level, each ascending. `level_sets[0]` holds the
    /// highest-energy micro-experts.
    pub level_sets: [Vec<usize>; 3],
}

impl QuantPlan {
    pub fn n_micro_experts(&self) -> usize {
        self.level_sets.iter().map(Vec::len).sum()
    }

    /// Level index (0, 1, 2) of every flat micro-expert.
    pub fn level_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_micro_experts()];
        for (k, set) in self.level_sets.iter().enumerate() {
            for &i in set {
                out[i] = k;
            }
        }
        out
    }

    /// True when more than one level is populated with distinct bit-widths.
    pub fn is_mixed(&self) -> bool {
        let used: BTreeSet<u8> = self
            .level_sets
            .iter()
            .zip(self.bits)
            .filter(|(s, _)| !s.is_empty())
            .map(|(_, b)| b)
            .collect();
        used.len() > 1
    }
}

pub fn validate_plan_params(ratios: [f64; 3], bits: [u8; 3], group_size: usize) -> Result<()> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(CameraError::invalid("ratios", "must be finite and non-negative"));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CameraError::invalid("ratios", format!("must sum to 1, got {sum}")));
    }
    for &b in &bits {
        check_quant_args(b, group_size)?;
    }
    if bits[0] < bits[1] || bits[1] < bits[2] {
        return Err(CameraError::invalid(
            "bits",
            "must be non-increasing (highest precision first)",
        ));
    }
    Ok(())
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Splits the ranking into three consecutive level sets of sizes
/// `round(r₁N)`, `round((r₁+r₂)N) − round(r₁N)` and the remainder.
pub fn make_quant_plan(ranking: &Ranking, ratios: [f64; 3], bits: [u8; 3], group_size: usize) -> Result<QuantPlan> {
    validate_plan_params(ratios, bits, group_size)?;
    let n = ranking.len();
    let c1 = round_half_up(ratios[0] * n as f64).min(n);
    let c12 = round_half_up((ratios[0] + ratios[1]) * n as f64).clamp(c1, n);
    let mut level_sets = [
        ranking.order[..c1].to_vec(),
        ranking.order[c1..c12].to_vec(),
        ranking.order[c12..].to_vec(),
    ];
    for s in &mut level_sets {
        s.sort_unstable();
    }
    Ok(QuantPlan {
        ratios,
        bits,
        group_size,
        level_sets,
    })
}

/// Nominal average bits per weight, `Σ r_k·b_k + 32/group_size`.
pub fn average_bitwidth(plan: &QuantPlan) -> f64 {
    nominal_bitwidth(plan.ratios, plan.bits, plan.group_size)
}

pub fn nominal_bitwidth(ratios: [f64; 3], bits: [u8; 3], group_size: usize) -> f64 {
    ratios.iter().zip(bits).map(|(r, b)| r * f64::from(b)).sum::<f64>() + GROUP_OVERHEAD_BITS as f64 / group_size as f64
}

/// Parses a plain decimal such as `0.2` or `1` into an exact rational.
pub fn parse_decimal(s: &str) -> Result<BigRational> {
    let bad = || CameraError::invalid("ratio", format!("not a plain decimal: {s:?}"));
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let (int, frac) = body.split_once('.').unwrap_or((body, ""));
    if int.is_empty() && frac.is_empty() {
        return Err(bad());
    }
    if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
        return Err(bad());
    }
    let digits: BigInt = format!("{int}{frac}").parse().map_err(|_| bad())?;
    let denom = num_traits::pow(BigInt::from(10), frac.len());
    let v = BigRational::new(digits, denom);
    Ok(if neg { -v } else { v })
}

/// Exact `Σ r_k·b_k + 32/group_size` for decimal ratios.
pub fn average_bitwidth_exact(ratios: &[BigRational; 3], bits: [u8; 3], group_size: usize) -> BigRational {
    let weights = ratios
        .iter()
        .zip(bits)
        .map(|(r, b)| r * BigRational::from_integer(BigInt::from(b)))
        .fold(BigRational::from_integer(BigInt::from(0)), |a, b| a + b);
    weights + BigRational::new(BigInt::from(GROUP_OVERHEAD_BITS), BigInt::from(group_size))
}

// ---------------------------------------------------------------------------
// Layer quantization

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Rows of up/gate and columns of down per level.
    CameraQ,
    /// Input columns of up/gate and down per level.
    CameraQDagger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    Up,
    Gate,
    Down,
}

/// One quantized sub-matrix and where its entries live in the original
/// (un-permuted) expert matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub matrix: MatrixKind,
    pub level: usize,
    /// Original row indices of the sub-matrix, in storage order.
    pub rows: Vec<usize>,
    /// Original column indices of the sub-matrix, in storage order.
    pub cols: Vec<usize>,
    pub block: QuantizedBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertQuantRecord {
    pub expert: usize,
    /// Colocating permutation: storage neuron `j` is original neuron
    /// `colocation[j]`.
    pub colocation: Vec<usize>,
    pub blocks: Vec<BlockRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    /// Dequantized weights in the original neuron order.
    pub layer: MoELayer,
    pub experts: Vec<ExpertQuantRecord>,
    pub variant: Variant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitAccounting {
    pub weights: u64,
    pub weight_bits: u64,
    pub groups: u64,
    pub overhead_bits: u64,
    /// `(weight_bits + overhead_bits) / weights`
    pub average_bits: f64,
    /// `weight_bits / weights`
    pub average_weight_bits: f64,
}

impl BitAccounting {
    fn from_blocks<'a>(blocks: impl Iterator<Item = &'a QuantizedBlock>) -> Self {
        let mut weights = 0u64;
        let mut weight_bits = 0u64;
        let mut groups = 0u64;
        for b in blocks {
            weights += b.n_weights() as u64;
            weight_bits += b.n_weights() as u64 * u64::from(b.bits);
            groups += b.n_groups() as u64;
        }
        let overhead_bits = groups * GROUP_OVERHEAD_BITS;
        let w = weights.max(1) as f64;
        Self {
            weights,
            weight_bits,
            groups,
            overhead_bits,
            average_bits: (weight_bits + overhead_bits) as f64 / w,
            average_weight_bits: weight_bits as f64 / w,
        }
    }
}

impl QuantizedLayer {
    pub fn accounting(&self) -> BitAccounting {
        BitAccounting::from_blocks(self.experts.iter().flat_map(|e| e.blocks.iter().map(|b| &b.block)))
    }
}

/// Splits `0..n` into three consecutive ranges proportional to `counts`.
fn proportional_ranges(n: usize, counts: [usize; 3]) -> [std::ops::Range<usize>; 3] {
    let total: usize = counts.iter().sum();
    let mut bounds = [0usize; 4];
    let mut cum = 0;
    for k in 0..3 {
        cum += counts[k];
        bounds[k + 1] = if total == 0 {
            n
        } else {
            round_half_up(n as f64 * cum as f64 / total as f64).min(n)
        };
    }
    [bounds[0]..bounds[1], bounds[1]..bounds[2], bounds[2]..bounds[3]]
}

fn write_rows(dst: &mut Matrix<f32>, start_row: usize, src: &Matrix<f32>) {
    for r in 0..src.rows() {
        dst.row_mut(start_row + r).copy_from_slice(src.row(r));
    }
}

fn write_cols(dst: &mut Matrix<f32>, cols: std::ops::Range<usize>, src: &Matrix<f32>) {
    for r in 0..src.rows() {
        dst.row_mut(r)[cols.clone()].copy_from_slice(src.row(r));
    }
}

fn quantize_expert(
    expert_index: usize,
    e: &ExpertWeights,
    levels: &[usize],
    bits: [u8; 3],
    group_size: usize,
    variant: Variant,
) -> Result<(ExpertWeights, ExpertQuantRecord)> {
    let width = e.width();
    let d_model = e.d_model();
    let members: [Vec<usize>; 3] = std::array::from_fn(|k| (0..width).filter(|&j| levels[j] == k).collect());
    let colocation: Vec<usize> = members.iter().flatten().copied().collect();
    let mut p = permute_micro_experts(e, &colocation)?;

    let counts = [members[0].len(), members[1].len(), members[2].len()];
    let neuron_ranges = proportional_ranges(width, counts);
    let input_ranges = proportional_ranges(d_model, counts);
    let all_inputs: Vec<usize> = (0..d_model).collect();
    let mut blocks = Vec::new();

    for k in 0..3 {
        let b = bits[k];
        let neurons = neuron_ranges[k].clone();
        if neurons.is_empty() {
            continue;
        }
        let originals: Vec<usize> = colocation[neurons.clone()].to_vec();

        match variant {
            Variant::CameraQ => {
                for (kind, m) in [(MatrixKind::Up, &mut p.w_up), (MatrixKind::Gate, &mut p.w_gate)] {
                    let idx: Vec<usize> = neurons.clone().collect();
                    let q = quantize_matrix_affine(&m.select_rows(&idx), b, group_size)?;
                    write_rows(m, neurons.start, &q.dequantize());
                    blocks.push(BlockRecord {
                        matrix: kind,
                        level: k,
                        rows: originals.clone(),
                        cols: all_inputs.clone(),
                        block: q,
                    });
                }
            }
            Variant::CameraQDagger => {
                let inputs = input_ranges[k].clone();
                if !inputs.is_empty() {
                    let idx: Vec<usize> = inputs.clone().collect();
                    for (kind, m) in [(MatrixKind::Up, &mut p.w_up), (MatrixKind::Gate, &mut p.w_gate)] {
                        let q = quantize_matrix_affine(&m.select_cols(&idx), b, group_size)?;
                        write_cols(m, inputs.clone(), &q.dequantize());
                        blocks.push(BlockRecord {
                            matrix: kind,
                            level: k,
                            rows: colocation.clone(),
                            cols: idx.clone(),
                            block: q,
                        });
                    }
                }
            }
        }

        // down is sliced by micro-expert columns in both variants
        let idx: Vec<usize> = neurons.clone().collect();
        let q = quantize_matrix_affine(&p.w_down.select_cols(&idx), b, group_size)?;
        write_cols(&mut p.w_down, neurons, &q.dequantize());
        blocks.push(BlockRecord {
            matrix: MatrixKind::Down,
            level: k,
            rows: all_inputs.clone(),
            cols: originals,
            block: q,
        });
    }

    let restored = permute_micro_experts(&p, &inverse_permutation(&colocation))?;
    Ok((
        restored,
        ExpertQuantRecord {
            expert: expert_index,
            colocation,
            blocks,
        },
    ))
}

/// Quantizes one layer under `plan`. Experts are processed independently.
pub fn quantize_layer(layer: &MoELayer, plan: &QuantPlan, variant: Variant) -> Result<QuantizedLayer> {
    check_len(
        "plan micro-expert count",
        layer.n_micro_experts(),
        plan.n_micro_experts(),
    )?;
    let level_of = plan.level_of();
    let offsets = layer.offsets();
    let results: Vec<(ExpertWeights, ExpertQuantRecord)> = layer
        .experts
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let levels = &level_of[offsets[i]..offsets[i] + e.width()];
            quantize_expert(i, e, levels, plan.bits, plan.group_size, variant)
        })
        .collect::<Result<_>>()?;
    let (experts, records): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(QuantizedLayer {
        layer: MoELayer::new(layer.config, experts, layer.router.clone())?,
        experts: records,
        variant,
    })
}

pub fn quantize_layer_camera_q(layer: &MoELayer, plan: &QuantPlan) -> Result<QuantizedLayer> {
    quantize_layer(layer, plan, Variant::CameraQ)
}

pub fn quantize_layer_camera_q_dagger(layer: &MoELayer, plan: &QuantPlan) -> Result<QuantizedLayer> {
    quantize_layer(layer, plan, Variant::CameraQDagger)
}

// ---------------------------------------------------------------------------
// Integrity audit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrityAudit {
    /// Every weight belongs to exactly one group.
    pub coverage_ok: bool,
    /// Micro-experts whose up or gate weights span more than one bit-width.
    pub split_up_gate: usize,
    /// Micro-experts whose down column spans more than one bit-width.
    pub split_down: usize,
    /// Micro-experts whose weights overall span more than one bit-width.
    pub split_total: usize,
    pub micro_experts: usize,
}

impl IntegrityAudit {
    /// The micro-expert → bit-width relation is a function.
    pub fn consistent(&self) -> bool {
        self.coverage_ok && self.split_total == 0
    }
}

/// Bit-widths touching each micro-expert, in flat order, split into
/// (up/gate, down).
pub fn bits_per_micro_expert(q: &QuantizedLayer) -> Vec<(BTreeSet<u8>, BTreeSet<u8>)> {
    let mut out = Vec::new();
    for (e, rec) in q.layer.experts.iter().zip(&q.experts) {
        let mut local = vec![(BTreeSet::new(), BTreeSet::new()); e.width()];
        for b in &rec.blocks {
            match b.matrix {
                MatrixKind::Up | MatrixKind::Gate => {
                    for &r in &b.rows {
                        local[r].0.insert(b.block.bits);
                    }
                }
                MatrixKind::Down => {
                    for &c in &b.cols {
                        local[c].1.insert(b.block.bits);
                    }
                }
            }
        }
        out.extend(local);
    }
    out
}

pub fn audit_integrity(q: &QuantizedLayer) -> IntegrityAudit {
    let mut coverage_ok = true;
    for (e, rec) in q.layer.experts.iter().zip(&q.experts) {
        let mut up = Matrix::<u32>::zeros(e.width(), e.d_model());
        let mut gate = Matrix::<u32>::zeros(e.width(), e.d_model());
        let mut down = Matrix::<u32>::zeros(e.d_model(), e.width());
        for b in &rec.blocks {
            let target = match b.matrix {
                MatrixKind::Up => &mut up,
                MatrixKind::Gate => &mut gate,
                MatrixKind::Down => &mut down,
            };
            for &r in &b.rows {
                for &c in &b.cols {
                    target.set(r, c, target.get(r, c) + 1);
                }
            }
        }
        coverage_ok &= [up, gate, down].iter().all(|m| m.as_slice().iter().all(|&n| n == 1));
    }
    let per = bits_per_micro_expert(q);
    let split_up_gate = per.iter().filter(|(ug, _)| ug.len() > 1).count();
    let split_down = per.iter().filter(|(_, d)| d.len() > 1).count();
    let split_total = per.iter().filter(|(ug, d)| ug.union(d).count() > 1).count();
    IntegrityAudit {
        coverage_ok,
        split_up_gate,
        split_down,
        split_total,
        micro_experts: per.len(),
    }
}

// ---------------------------------------------------------------------------
// Model pipeline

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub ratios: [f64; 3],
    pub bits: [u8; 3],
    pub group_size: usize,
    pub alpha: f64,
    pub variant: Variant,
}

impl QuantParams {
    /// All micro-experts at `bits`.
    pub fn uniform(bits: u8, group_size: usize) -> Self {
        Self {
            ratios: [0.0, 1.0, 0.0],
            bits: [bits; 3],
            group_size,
            alpha: 1.0,
            variant: Variant::CameraQ,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub model: MoEModel,
    pub layers: Vec<QuantizedLayer>,
    pub plans: Vec<QuantPlan>,
}

impl QuantizedModel {
    pub fn accounting(&self) -> BitAccounting {
        BitAccounting::from_blocks(
            self.layers
                .iter()
                .flat_map(|l| l.experts.iter().flat_map(|e| e.blocks.iter().map(|b| &b.block))),
        )
    }
}

/// Quantizes layer by layer; each layer is ranked on the outputs of the
/// already-quantized prefix.
pub fn quantize_model(model: &MoEModel, batch: &CalibBatch, params: &QuantParams) -> Result<QuantizedModel> {
    validate_plan_params(params.ratios, params.bits, params.group_size)?;
    check_len("calibration d_model", model.config.d_model, batch.d_model())?;
    let mut hidden = batch.x.clone();
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut plans = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let y = layer.forward_batch(&hidden)?;
        let samples = LayerSamples { x: hidden, y };
        let (ranking, _) = rank_micro_experts(layer, &samples, params.alpha)?;
        let plan = make_quant_plan(&ranking, params.ratios, params.bits, params.group_size)?;
        let q = quantize_layer(layer, &plan, params.variant)?;
        hidden = q.layer.forward_batch(&samples.x)?;
        layers.push(q);
        plans.push(plan);
    }
    Ok(QuantizedModel {
        model: MoEModel::new(model.config, layers.iter().map(|l| l.layer.clone()).collect())?,
        layers,
        plans,
    })
}
