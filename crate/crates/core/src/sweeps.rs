//! Seeded property sweeps and the `verify` suite.
//!
//! Bound instances are derived from small random MoE layers: `Φ` is the
//! activation-coefficient matrix over a calibration batch and `W` the
//! stacked down columns. Dense Gaussian `(Φ, W)` pairs are not used because
//! nothing ties them to a layer, and the top-energy bound can fail on them.

use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{gen_synthetic, LayerSamples};
use crate::error::Result;
use crate::model::{micro_expert_contribution, moe_forward, MoELayer, ModelConfig};
use crate::oracles::{cssp_bruteforce, lemma_bound, p_lossless, singular_values, theorem_check};
use crate::quant::{average_bitwidth_exact, nominal_bitwidth, parse_decimal};
use crate::rank::compute_coefficients;
use crate::synth::{random_layer, LayerGen};
use crate::tensor::Matrix;

/// `(model, experts, activated, p_lossless at 25% expert pruning)`.
pub const LOSSLESS_REFERENCE: [(&str, usize, usize, f64); 5] = [
    ("Mixtral-8x7B", 8, 2, 0.5357),
    ("Phi3.5-MoE-42B", 16, 2, 0.5500),
    ("Deepseek-MoE-16B", 64, 4, 0.3062),
    ("Qwen3-30B-A3B", 128, 8, 0.0927),
    ("Deepseek-V2", 160, 6, 0.1724),
];

/// Plans whose nominal average must be exactly 9/4 bits.
pub const BIT_ACCOUNTING_REFERENCE: [[&str; 3]; 2] = [["0.1", "0.8", "0.1"], ["0.2", "0.6", "0.2"]];

/// Per-instance seeds drawn from one master seed.
pub fn instance_seeds(seed: u64, trials: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials).map(|_| rng.random()).collect()
}

/// Inclusive ranges for random layer shapes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShapeRanges {
    pub n_experts: (usize, usize),
    /// Allowed shared-expert counts.
    pub n_shared: &'static [usize],
    pub d_model: (usize, usize),
    pub d_ff: (usize, usize),
    pub tokens: (usize, usize),
}

impl ShapeRanges {
    /// Up to 20 micro-experts, within the enumeration guard.
    pub const BOUNDS: Self = Self {
        n_experts: (2, 4),
        n_shared: &[0, 1],
        d_model: (4, 16),
        d_ff: (2, 4),
        tokens: (8, 32),
    };

    /// Up to 12 micro-experts.
    pub const SMALL: Self = Self {
        n_experts: (2, 3),
        n_shared: &[0, 1],
        d_model: (4, 16),
        d_ff: (2, 3),
        tokens: (8, 32),
    };

    /// Shapes for forward decomposition checks.
    pub const DECOMPOSITION: Self = Self {
        n_experts: (2, 8),
        n_shared: &[0, 2],
        d_model: (8, 64),
        d_ff: (4, 32),
        tokens: (4, 4),
    };
}

fn pick<R: Rng>(rng: &mut R, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

/// A random layer and calibration batch drawn from `ranges`.
pub fn random_layer_instance(seed: u64, ranges: &ShapeRanges) -> Result<(MoELayer, LayerSamples)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_experts = pick(&mut rng, ranges.n_experts);
    let n_shared = ranges.n_shared[rng.random_range(0..ranges.n_shared.len())];
    let config = ModelConfig {
        n_layers: 1,
        n_experts,
        n_shared,
        d_model: pick(&mut rng, ranges.d_model),
        d_ff: pick(&mut rng, ranges.d_ff),
        top_k: rng.random_range(1..=n_experts),
    };
    config.validate()?;
    let layer = random_layer(&config, &LayerGen::default(), &mut rng);
    let n = pick(&mut rng, ranges.tokens);
    let x = gen_synthetic(n, config.d_model, rng.random(), 1.0)?.x;
    let y = layer.forward_batch(&x)?;
    Ok((layer, LayerSamples { x, y }))
}

/// `(Φ, W)` of a random layer: `Φ` is `n × N_e`, `W` is `N_e × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundInstance {
    pub phi: Matrix<f64>,
    pub w: Matrix<f64>,
}

impl BoundInstance {
    pub fn n_micro_experts(&self) -> usize {
        self.phi.cols()
    }
}

pub fn bound_instance(seed: u64, ranges: &ShapeRanges) -> Result<BoundInstance> {
    let (layer, samples) = random_layer_instance(seed, ranges)?;
    Ok(BoundInstance {
        phi: compute_coefficients(&layer, &samples)?.phi,
        w: layer.basis_matrix(),
    })
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionSweep {
    pub trials: usize,
    pub violations: usize,
    pub max_relative_error: f64,
}

/// Element-wise tolerance for the forward decomposition.
pub const DECOMPOSITION_TOLERANCE: f64 = 1e-4;

/// Checks that the layer output equals the sum of all micro-expert
/// contributions, token by token.
pub fn decomposition_sweep(seed: u64, trials: usize) -> Result<DecompositionSweep> {
    let per: Vec<(usize, f64)> = instance_seeds(seed, trials)
        .into_par_iter()
        .map(|s| {
            let (layer, samples) = random_layer_instance(s, &ShapeRanges::DECOMPOSITION)?;
            let mut bad = 0;
            let mut worst = 0.0f64;
            for t in 0..samples.x.rows() {
                let x = samples.x.row(t);
                let y = moe_forward(&layer, x)?;
                let mut sum = vec![0.0f64; y.len()];
                for flat in 0..layer.n_micro_experts() {
                    let c = micro_expert_contribution(&layer, layer.micro_expert(flat)?, x)?;
                    for (a, b) in sum.iter_mut().zip(&c) {
                        *a += b;
                    }
                }
                for (&a, &b) in y.iter().zip(&sum) {
                    let err = (f64::from(a) - b).abs();
                    let scale = b.abs().max(f64::from(f32::MIN_POSITIVE));
                    worst = worst.max(err / scale);
                    if err > DECOMPOSITION_TOLERANCE * scale {
                        bad += 1;
                    }
                }
            }
            Ok((bad, worst))
        })
        .collect::<Result<_>>()?;
    Ok(DecompositionSweep {
        trials,
        violations: per.iter().filter(|(b, _)| *b > 0).count(),
        max_relative_error: per.iter().map(|p| p.1).fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaSweep {
    pub trials: usize,
    /// Instances with `ε > ε_sup·(1 + 1e-6) + 1e-9`.
    pub stated_bound_violations: usize,
    /// Largest `ε / ε_sup`.
    pub worst_ratio: f64,
    /// Instances where `ε` exceeds the triangle-inequality bound.
    pub triangle_violations: usize,
    /// Single removals where `ε ≠ ε_sup` beyond 1e-9 relative.
    pub single_removal_violations: usize,
    pub single_removal_max_relative_error: f64,
}

impl LemmaSweep {
    /// Everything that must hold regardless of cross terms.
    pub fn sound(&self) -> bool {
        self.triangle_violations == 0 && self.single_removal_violations == 0
    }

    pub fn stated_bound_holds(&self) -> bool {
        self.stated_bound_violations == 0
    }
}

pub const SINGLE_REMOVAL_TOLERANCE: f64 = 1e-9;

/// Random removed sets of size `1..N_e`, plus one single removal per
/// instance.
pub fn lemma_sweep(seed: u64, trials: usize) -> Result<LemmaSweep> {
    struct One {
        stated_ok: bool,
        ratio: f64,
        triangle_ok: bool,
        single_err: f64,
    }
    let per: Vec<One> = instance_seeds(seed, trials)
        .into_par_iter()
        .map(|s| {
            let inst = bound_instance(s, &ShapeRanges::BOUNDS)?;
            let n_e = inst.n_micro_experts();
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x5eed);
            let size = rng.random_range(1..n_e);
            let mut removed = rand::seq::index::sample(&mut rng, n_e, size).into_vec();
            removed.sort_unstable();
            let r = lemma_bound(&inst.phi, &inst.w, &removed)?;
            let one = lemma_bound(&inst.phi, &inst.w, &[rng.random_range(0..n_e)])?;
            let single_err = if one.epsilon_sup > 0.0 {
                (one.epsilon - one.epsilon_sup).abs() / one.epsilon_sup
            } else {
                one.epsilon.abs()
            };
            Ok(One {
                stated_ok: r.holds,
                ratio: if r.epsilon_sup > 0.0 {
                    r.epsilon / r.epsilon_sup
                } else {
                    0.0
                },
                triangle_ok: r.epsilon <= r.triangle_bound * (1.0 + 1e-9) + 1e-12,
                single_err,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LemmaSweep {
        trials,
        stated_bound_violations: per.iter().filter(|o| !o.stated_ok).count(),
        worst_ratio: per.iter().map(|o| o.ratio).fold(0.0, f64::max),
        triangle_violations: per.iter().filter(|o| !o.triangle_ok).count(),
        single_removal_violations: per.iter().filter(|o| o.single_err > SINGLE_REMOVAL_TOLERANCE).count(),
        single_removal_max_relative_error: per.iter().map(|o| o.single_err).fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremSweep {
    pub trials: usize,
    pub violations: usize,
    pub max_tightness: f64,
    /// Instances where `|Σσ² − ‖Y‖²| > 1e-8·‖Y‖²`.
    pub energy_violations: usize,
    pub max_energy_relative_error: f64,
}

impl TheoremSweep {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.energy_violations == 0
    }
}

pub const ENERGY_CONSERVATION_TOLERANCE: f64 = 1e-8;

/// `theorem_check` at `keep = N_e / 2`.
pub fn theorem_sweep(seed: u64, trials: usize) -> Result<TheoremSweep> {
    let per: Vec<(bool, f64, f64)> = instance_seeds(seed, trials)
        .into_par_iter()
        .map(|s| {
            let inst = bound_instance(s, &ShapeRanges::BOUNDS)?;
            let r = theorem_check(&inst.phi, &inst.w, inst.n_micro_experts() / 2)?;
            let energy_err = if r.total_energy > 0.0 {
                (r.spectrum_energy - r.total_energy).abs() / r.total_energy
            } else {
                r.spectrum_energy
            };
            let tight = if r.tightness.is_finite() { r.tightness } else { 0.0 };
            Ok((r.holds, tight, energy_err))
        })
        .collect::<Result<_>>()?;
    Ok(TheoremSweep {
        trials,
        violations: per.iter().filter(|p| !p.0).count(),
        max_tightness: per.iter().map(|p| p.1).fold(0.0, f64::max),
        energy_violations: per.iter().filter(|p| p.2 > ENERGY_CONSERVATION_TOLERANCE).count(),
        max_energy_relative_error: per.iter().map(|p| p.2).fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichSweep {
    pub trials: usize,
    /// Exhaustive optimum above the greedy error.
    pub cssp_above_greedy: usize,
    /// Greedy error above `svd_error + δ`.
    pub greedy_above_bound: usize,
    /// Greedy error below the rank lower bound.
    pub greedy_below_svd: usize,
}

impl SandwichSweep {
    pub fn passed(&self) -> bool {
        self.cssp_above_greedy == 0 && self.greedy_above_bound == 0 && self.greedy_below_svd == 0
    }
}

/// `cssp ≤ greedy ≤ svd + δ` and `greedy ≥ svd` at `keep = N_e / 2` on
/// instances with at most 12 micro-experts.
pub fn sandwich_sweep(seed: u64, trials: usize) -> Result<SandwichSweep> {
    let per: Vec<[bool; 3]> = instance_seeds(seed, trials)
        .into_par_iter()
        .map(|s| {
            let inst = bound_instance(s, &ShapeRanges::SMALL)?;
            let keep = inst.n_micro_experts() / 2;
            let r = theorem_check(&inst.phi, &inst.w, keep)?;
            let best = cssp_bruteforce(&inst.phi, &inst.w, keep)?;
            let slack = 1e-9 * r.total_energy.max(1.0);
            Ok([
                best.error > r.epsilon + slack,
                !r.holds,
                r.epsilon < r.svd_error - slack,
            ])
        })
        .collect::<Result<_>>()?;
    Ok(SandwichSweep {
        trials,
        cssp_above_greedy: per.iter().filter(|p| p[0]).count(),
        greedy_above_bound: per.iter().filter(|p| p[1]).count(),
        greedy_below_svd: per.iter().filter(|p| p[2]).count(),
    })
}

/// Σσ² against `‖Y‖²` for one matrix.
pub fn energy_conservation_error(y: &Matrix<f64>) -> Result<f64> {
    let total = y.frobenius_sq();
    let spectrum: f64 = singular_values(y)?.iter().map(|s| s * s).sum();
    Ok(if total > 0.0 {
        (spectrum - total).abs() / total
    } else {
        spectrum
    })
}

// ---------------------------------------------------------------------------
// Verify

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub trials: usize,
    pub checks: Vec<Check>,
    pub decomposition: DecompositionSweep,
    pub lemma: LemmaSweep,
    pub theorem: TheoremSweep,
    pub sandwich: SandwichSweep,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn check_lossless_reference() -> Result<Check> {
    let mut bad = Vec::new();
    for (name, n, k, want) in LOSSLESS_REFERENCE {
        let got = p_lossless(n, k, 0.25)?.probability;
        if format!("{got:.4}") != format!("{want:.4}") {
            bad.push(format!("{name}: {got:.4} != {want:.4}"));
        }
    }
    Ok(Check {
        name: "lossless-probability".into(),
        passed: bad.is_empty(),
        detail: if bad.is_empty() {
            "5 reference rows match to four decimals".into()
        } else {
            bad.join("; ")
        },
    })
}

pub fn check_bit_accounting() -> Result<Check> {
    let want = BigRational::new(9.into(), 4.into());
    let mut bad = Vec::new();
    for r in BIT_ACCOUNTING_REFERENCE {
        let exact = average_bitwidth_exact(&r.map(|s| parse_decimal(s).expect("literal")), [3, 2, 1], 128);
        let f: [f64; 3] = r.map(|s| s.parse().expect("literal"));
        let float = nominal_bitwidth(f, [3, 2, 1], 128);
        if exact != want || (float - 2.25).abs() > 1e-9 {
            bad.push(format!("{r:?}: {exact} / {float}"));
        }
    }
    Ok(Check {
        name: "bit-accounting".into(),
        passed: bad.is_empty(),
        detail: if bad.is_empty() {
            "both plans average 9/4 bits".into()
        } else {
            bad.join("; ")
        },
    })
}

/// Runs every property check. The sandwich sweep is capped at 50
/// instances because it enumerates subsets.
pub fn verify(seed: u64, trials: usize) -> Result<VerifyReport> {
    let decomposition = decomposition_sweep(seed, trials)?;
    let lemma = lemma_sweep(seed.wrapping_add(1), trials)?;
    let theorem = theorem_sweep(seed.wrapping_add(2), trials)?;
    let sandwich = sandwich_sweep(seed.wrapping_add(3), trials.min(50))?;
    let checks = vec![
        Check {
            name: "decomposition".into(),
            passed: decomposition.violations == 0,
            detail: format!(
                "{} of {} layers off; max relative error {:.3e}",
                decomposition.violations, trials, decomposition.max_relative_error
            ),
        },
        Check {
            name: "lemma".into(),
            passed: lemma.sound(),
            detail: format!(
                "triangle violations {}, single-removal violations {}; stated energy-sum bound exceeded on {} of {} (worst ratio {:.3})",
                lemma.triangle_violations,
                lemma.single_removal_violations,
                lemma.stated_bound_violations,
                trials,
                lemma.worst_ratio
            ),
        },
        Check {
            name: "theorem".into(),
            passed: theorem.passed(),
            detail: format!(
                "{} violations, {} energy-conservation violations (max {:.3e})",
                theorem.violations, theorem.energy_violations, theorem.max_energy_relative_error
            ),
        },
        Check {
            name: "sandwich".into(),
            passed: sandwich.passed(),
            detail: format!(
                "cssp>greedy {}, greedy>bound {}, greedy<svd {}",
                sandwich.cssp_above_greedy, sandwich.greedy_above_bound, sandwich.greedy_below_svd
            ),
        },
        check_lossless_reference()?,
        check_bit_accounting()?,
    ];
    Ok(VerifyReport {
        seed,
        trials,
        checks,
        decomposition,
        lemma,
        theorem,
        sandwich,
    })
}
