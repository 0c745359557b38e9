//! Exhaustive column subset selection and the spectral bound on greedy
//! top-energy selection, on one small layer.

use camera_moe::oracles::{cssp_bruteforce, greedy_top_energy, theorem_check};
use camera_moe::sweeps::{bound_instance, ShapeRanges};

pub struct Summary {
    pub n_micro_experts: usize,
    pub keep: usize,
    pub optimal_error: f64,
    pub greedy_error: f64,
    pub svd_error: f64,
    pub bound: f64,
    pub holds: bool,
}

pub fn run() -> camera_moe::Result<Summary> {
    let inst = bound_instance(5, &ShapeRanges::SMALL)?;
    let n_e = inst.phi.cols();
    let keep = n_e / 2;
    let optimal = cssp_bruteforce(&inst.phi, &inst.w, keep)?;
    let (kept, _, _) = greedy_top_energy(&inst.phi, &inst.w, keep)?;
    let greedy_error = camera_moe::oracles::decoding_error(&inst.phi, &inst.w, &kept)?;
    let report = theorem_check(&inst.phi, &inst.w, keep)?;
    Ok(Summary {
        n_micro_experts: n_e,
        keep,
        optimal_error: optimal.error,
        greedy_error,
        svd_error: report.svd_error,
        bound: report.svd_error + report.delta,
        holds: report.holds,
    })
}

fn main() -> camera_moe::Result<()> {
    let s = run()?;
    println!("keep {} of {} micro-experts", s.keep, s.n_micro_experts);
    println!("  rank-{} SVD error    {:.6e}", s.keep, s.svd_error);
    println!("  optimal subset error {:.6e}", s.optimal_error);
    println!("  greedy energy error  {:.6e}", s.greedy_error);
    println!("  spectral bound       {:.6e} (holds: {})", s.bound, s.holds);
    Ok(())
}
