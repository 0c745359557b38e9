//! Exact reference computations used to check the ranking: exhaustive
//! column-subset selection, truncated-SVD error, the per-micro-expert
//! energy bound, the boundary-energy bound against the SVD optimum, and
//! the lossless-activation probability of expert-level pruning.
//!
//! All routines take a generic coefficient matrix `Φ` (`n × N_e`) and basis
//! matrix `W` (`N_e × d`) so they can be driven by synthetic instances as
//! well as by real layers.

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CameraError, Result};
use crate::model::check_len;
use crate::rank::{energy_from_parts, Ranking};
use crate::tensor::Matrix;

/// Largest `N_e` accepted by [`cssp_bruteforce`].
pub const ENUMERATION_GUARD: usize = 20;
/// Relative off-diagonal tolerance of the Jacobi SVD.
pub const SVD_TOLERANCE: f64 = 1e-10;
/// Relative slack applied when checking the SVD-gap inequality.
pub const THEOREM_SLACK: f64 = 1e-6;

fn check_pair(phi: &Matrix<f64>, w: &Matrix<f64>) -> Result<()> {
    check_len("basis rows vs coefficient columns", phi.cols(), w.rows())
}

fn check_index_set(indices: &[usize], n_e: usize) -> Result<()> {
    let mut seen = vec![false; n_e];
    for &i in indices {
        if i >= n_e {
            return Err(CameraError::IndexOutOfRange {
                what: "micro-expert",
                index: i,
                limit: n_e,
            });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(CameraError::invalid("indices", format!("duplicate index {i}")));
        }
    }
    Ok(())
}

/// `‖Φ[:, R] W[R, :]‖_F²` for an index set `R`.
pub fn partial_reconstruction_sq(phi: &Matrix<f64>, w: &Matrix<f64>, indices: &[usize]) -> Result<f64> {
    check_pair(phi, w)?;
    check_index_set(indices, phi.cols())?;
    let d = w.cols();
    let mut row = vec![0.0f64; d];
    let mut total = 0.0;
    for t in 0..phi.rows() {
        row.fill(0.0);
        for &i in indices {
            let c = phi.get(t, i);
            if c == 0.0 {
                continue;
            }
            for (acc, &wv) in row.iter_mut().zip(w.row(i)) {
                *acc += c * wv;
            }
        }
        total += row.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total)
}

/// Decoding error `‖ΦW − Φ[:, S] W[S, :]‖_F²` of keeping `kept`.
pub fn decoding_error(phi: &Matrix<f64>, w: &Matrix<f64>, kept: &[usize]) -> Result<f64> {
    check_pair(phi, w)?;
    check_index_set(kept, phi.cols())?;
    let removed = complement(kept, phi.cols());
    partial_reconstruction_sq(phi, w, &removed)
}

pub fn complement(set: &[usize], n: usize) -> Vec<usize> {
    let mut mask = vec![false; n];
    for &i in set {
        mask[i] = true;
    }
    (0..n).filter(|&i| !mask[i]).collect()
}

// ---------------------------------------------------------------------------
// Truncated SVD

/// Singular values in descending order, by one-sided Jacobi rotations.
///
/// Converges when every column pair satisfies
/// `|a_p·a_q| ≤ tol·‖a_p‖‖a_q‖`; gives up after `10·min(n, d)` sweeps.
pub fn singular_values(y: &Matrix<f64>) -> Result<Vec<f64>> {
    let (n, d) = y.shape();
    if n == 0 || d == 0 {
        return Ok(Vec::new());
    }
    // Orthogonalize the shorter side.
    let a = if d <= n { y.clone() } else { y.transpose() };
    let (m, k) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..k).map(|c| a.column(c)).collect();

    let max_sweeps = (10 * k).max(10);
    let mut converged = k < 2;
    let mut residual = 0.0;
    let mut sweeps = 0;
    while !converged && sweeps < max_sweeps {
        sweeps += 1;
        residual = 0.0f64;
        for p in 0..k - 1 {
            for q in p + 1..k {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..m {
                        alpha += cp[i] * cp[i];
                        beta += cq[i] * cq[i];
                        gamma += cp[i] * cq[i];
                    }
                    (alpha, beta, gamma)
                };
                if alpha == 0.0 || beta == 0.0 || gamma == 0.0 {
                    continue;
                }
                let ratio = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(ratio);
                if ratio <= SVD_TOLERANCE {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                let (cp, cq) = (&mut left[p], &mut right[0]);
                for i in 0..m {
                    let xp = cp[i];
                    let xq = cq[i];
                    cp[i] = c * xp - s * xq;
                    cq[i] = s * xp + c * xq;
                }
            }
        }
        converged = residual <= SVD_TOLERANCE;
    }
    if !converged {
        return Err(CameraError::SvdNoConvergence { sweeps, residual });
    }
    let mut sv: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdError {
    /// `Σ_{i > rank} σ_i²`
    pub error: f64,
    pub singular_values: Vec<f64>,
}

/// Optimal rank-`rank` approximation error of `y` (Eckart–Young–Mirsky).
pub fn svd_rank_k_error(y: &Matrix<f64>, rank: usize) -> Result<SvdError> {
    let limit = y.rows().min(y.cols());
    if rank > limit {
        return Err(CameraError::invalid(
            "rank",
            format!("must be at most {limit}, got {rank}"),
        ));
    }
    let singular_values = singular_values(y)?;
    let error = singular_values[rank..].iter().map(|s| s * s).sum();
    Ok(SvdError { error, singular_values })
}

// ---------------------------------------------------------------------------
// Column subset selection

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsspResult {
    /// Kept indices, ascending.
    pub subset: Vec<usize>,
    pub error: f64,
}

/// Exhaustive search for the `m` micro-experts whose partial decoding is
/// closest to `ΦW`. Ties go to the lexicographically smallest subset.
pub fn cssp_bruteforce(phi: &Matrix<f64>, w: &Matrix<f64>, m: usize) -> Result<CsspResult> {
    check_pair(phi, w)?;
    let n_e = phi.cols();
    if n_e > ENUMERATION_GUARD {
        return Err(CameraError::EnumerationGuard {
            n: n_e,
            limit: ENUMERATION_GUARD,
        });
    }
    if m == 0 || m > n_e {
        return Err(CameraError::invalid("m", format!("must be in 1..={n_e}, got {m}")));
    }

    // error(S) = Σ_{i,j ∉ S} (φ_i·φ_j)(w_i·w_j)
    let gram = Matrix::from_fn(n_e, n_e, |i, j| {
        let pp: f64 = (0..phi.rows()).map(|t| phi.get(t, i) * phi.get(t, j)).sum();
        let ww: f64 = w.row(i).iter().zip(w.row(j)).map(|(a, b)| a * b).sum();
        pp * ww
    });
    let removed_error = |kept_mask: u32| -> f64 {
        let removed: Vec<usize> = (0..n_e).filter(|&i| kept_mask & (1 << i) == 0).collect();
        removed
            .iter()
            .map(|&i| removed.iter().map(|&j| gram.get(i, j)).sum::<f64>())
            .sum()
    };

    // Partition by the smallest kept index so each chunk is itself in
    // lexicographic order.
    let best = (0..=n_e - m)
        .into_par_iter()
        .filter_map(|first| {
            let mut local: Option<(f64, Vec<usize>)> = None;
            for_each_combination(first + 1, n_e, m - 1, |rest| {
                let mut subset = Vec::with_capacity(m);
                subset.push(first);
                subset.extend_from_slice(rest);
                let mask = subset.iter().fold(0u32, |acc, &i| acc | (1 << i));
                let err = removed_error(mask);
                if local.as_ref().is_none_or(|(e, _)| err < *e) {
                    local = Some((err, subset));
                }
            });
            local
        })
        .reduce_with(|a, b| match a.0.total_cmp(&b.0) {
            std::cmp::Ordering::Less => a,
            std::cmp::Ordering::Greater => b,
            std::cmp::Ordering::Equal => {
                if a.1 <= b.1 {
                    a
                } else {
                    b
                }
            }
        })
        .expect("at least one subset");

    let error = decoding_error(phi, w, &best.1)?;
    Ok(CsspResult { subset: best.1, error })
}

/// Calls `f` with every ascending `k`-combination of `start..n`, in
/// lexicographic order.
fn for_each_combination(start: usize, n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    if k == 0 {
        f(&[]);
        return;
    }
    if start + k > n {
        return;
    }
    let mut idx: Vec<usize> = (start..start + k).collect();
    loop {
        f(&idx);
        let Some(i) = (0..k).rev().find(|&i| idx[i] < n - k + i) else {
            return;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// The `keep` highest plain-energy (`α = 0`) micro-experts, ascending.
pub fn greedy_top_energy(phi: &Matrix<f64>, w: &Matrix<f64>, keep: usize) -> Result<(Vec<usize>, Ranking, Vec<f64>)> {
    check_pair(phi, w)?;
    let sq: Vec<f64> = (0..w.rows()).map(|i| w.row_sq_norm(i)).collect();
    let energy = energy_from_parts(phi, &sq, 0.0)?.energy;
    let ranking = Ranking::from_energy(&energy);
    let mut kept = ranking.order[..keep.min(ranking.len())].to_vec();
    kept.sort_unstable();
    Ok((kept, ranking, energy))
}

// ---------------------------------------------------------------------------
// Bounds

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    /// `‖Φ[:, R] W[R, :]‖_F²` for the removed set `R`.
    pub epsilon: f64,
    /// `Σ_{i∈R} ‖Φ[:, i]‖₂² ‖w_i‖₂²`
    pub epsilon_sup: f64,
    /// `(Σ_{i∈R} ‖Φ[:, i]‖₂ ‖w_i‖₂)²`, which always bounds `epsilon` by the
    /// triangle inequality.
    pub triangle_bound: f64,
    pub removed: usize,
    /// `epsilon ≤ epsilon_sup·(1 + 1e-6) + 1e-9`.
    pub holds: bool,
}

/// Compares the decoding error of removing `removed` with the per-micro-
/// expert energy sum. The energy sum is exact for a single removal but is
/// not an upper bound in general (cross terms between removed micro-
/// experts can add constructively), so the result is reported, not
/// asserted. `triangle_bound` is the bound that always holds.
pub fn lemma_bound(phi: &Matrix<f64>, w: &Matrix<f64>, removed: &[usize]) -> Result<LemmaReport> {
    check_pair(phi, w)?;
    check_index_set(removed, phi.cols())?;
    let epsilon = partial_reconstruction_sq(phi, w, removed)?;
    let mut epsilon_sup = 0.0;
    let mut norm_sum = 0.0;
    for &i in removed {
        let p = phi.column_sq_norm(i);
        let q = w.row_sq_norm(i);
        epsilon_sup += p * q;
        norm_sum += (p * q).sqrt();
    }
    Ok(LemmaReport {
        epsilon,
        epsilon_sup,
        triangle_bound: norm_sum * norm_sum,
        removed: removed.len(),
        holds: epsilon <= epsilon_sup * (1.0 + 1e-6) + 1e-9,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    /// `‖Y − Ŷ‖_F²` for the top-energy keep set.
    pub epsilon: f64,
    /// Energy sum of the removed micro-experts.
    pub epsilon_sup: f64,
    /// `‖Y − Y*‖_F²` for the rank-`keep` truncated SVD.
    pub svd_error: f64,
    /// `k·(ε_boundary − min_{i>keep} σ_i²)`
    pub delta: f64,
    pub k: usize,
    pub keep: usize,
    /// Energy of the `keep`-th ranked micro-expert.
    pub boundary_energy: f64,
    /// `min_{keep < i ≤ N_e} σ_i²`, with σ zero-padded past `min(n, d)`.
    pub min_tail_sigma_sq: f64,
    /// `epsilon ≤ (svd_error + delta)` within [`THEOREM_SLACK`].
    pub holds: bool,
    /// `epsilon / (svd_error + delta)`; diagnostic only.
    pub tightness: f64,
    /// `‖Y‖_F²`
    pub total_energy: f64,
    /// `Σ σ_i²`
    pub spectrum_energy: f64,
}

/// Checks `‖Y − Ŷ‖_F² ≤ ‖Y − Y*‖_F² + k·(ε_boundary − min σ²)` for the
/// greedy top-`keep` set against the rank-`keep` SVD.
pub fn theorem_check(phi: &Matrix<f64>, w: &Matrix<f64>, keep: usize) -> Result<OracleReport> {
    check_pair(phi, w)?;
    let n_e = phi.cols();
    if keep == 0 || keep >= n_e {
        return Err(CameraError::invalid("keep", format!("must be in 1..{n_e}, got {keep}")));
    }
    let (kept, ranking, energy) = greedy_top_energy(phi, w, keep)?;
    let removed = complement(&kept, n_e);
    let epsilon = partial_reconstruction_sq(phi, w, &removed)?;
    let epsilon_sup = removed.iter().map(|&i| energy[i]).sum();

    let y = phi.matmul(w)?;
    let sv = singular_values(&y)?;
    let sigma_sq = |i: usize| sv.get(i).map_or(0.0, |s| s * s);
    let svd_error: f64 = (keep..sv.len().max(keep)).map(sigma_sq).sum();
    let min_tail_sigma_sq = (keep..n_e).map(sigma_sq).fold(f64::INFINITY, f64::min);
    let boundary_energy = energy[ranking.order[keep - 1]];
    let k = n_e - keep;
    let delta = k as f64 * (boundary_energy - min_tail_sigma_sq);
    let rhs = svd_error + delta;
    let total_energy = y.frobenius_sq();
    let holds = epsilon <= rhs + THEOREM_SLACK * rhs.abs() + 1e-12 * total_energy;

    Ok(OracleReport {
        epsilon,
        epsilon_sup,
        svd_error,
        delta,
        k,
        keep,
        boundary_energy,
        min_tail_sigma_sq,
        holds,
        tightness: if rhs > 0.0 { epsilon / rhs } else { f64::NAN },
        total_energy,
        spectrum_energy: sv.iter().map(|s| s * s).sum(),
    })
}

// ---------------------------------------------------------------------------
// Lossless activation probability

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosslessProbability {
    pub probability: f64,
    /// Exact value as `numerator/denominator`, reduced.
    pub exact: String,
    pub remaining: usize,
    /// Set when fewer than `n_activated` experts survive; probability is 0.
    pub insufficient: bool,
}

fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::ZERO;
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Probability that a token's `n_activated` routed experts all survive
/// when `floor((1 − prune_frac)·n_experts)` experts are kept uniformly:
/// `C(remaining, n_activated) / C(n_experts, n_activated)`.
pub fn p_lossless(n_experts: usize, n_activated: usize, prune_frac: f64) -> Result<LosslessProbability> {
    if !(0.0..1.0).contains(&prune_frac) {
        return Err(CameraError::invalid(
            "prune_frac",
            format!("must be in [0, 1), got {prune_frac}"),
        ));
    }
    if n_activated == 0 || n_activated > n_experts {
        return Err(CameraError::invalid(
            "n_activated",
            format!("must be in 1..={n_experts}, got {n_activated}"),
        ));
    }
    // The epsilon keeps e.g. 0.75·8 = 6 from flooring to 5.
    let remaining = (((1.0 - prune_frac) * n_experts as f64) + 1e-9).floor() as usize;
    if remaining < n_activated {
        return Ok(LosslessProbability {
            probability: 0.0,
            exact: "0/1".into(),
            remaining,
            insufficient: true,
        });
    }
    let ratio = BigRational::new(
        binomial(remaining, n_activated).into(),
        binomial(n_experts, n_activated).into(),
    );
    Ok(LosslessProbability {
        probability: ratio.to_f64().unwrap_or(f64::NAN),
        exact: format!("{}/{}", ratio.numer(), ratio.denom()),
        remaining,
        insufficient: false,
    })
}
