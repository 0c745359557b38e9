//! Chance that a token's routed experts all survive expert-level pruning,
//! for several public MoE shapes.

use camera_moe::oracles::p_lossless;
use camera_moe::sweeps::LOSSLESS_REFERENCE;

pub fn run() -> camera_moe::Result<Vec<(String, String, f64)>> {
    LOSSLESS_REFERENCE
        .iter()
        .map(|&(model, n, k, _)| {
            let p = p_lossless(n, k, 0.25)?;
            Ok((model.to_string(), p.exact, p.probability))
        })
        .collect()
}

fn main() -> camera_moe::Result<()> {
    println!("25% of experts pruned uniformly at random:");
    for (model, exact, p) in run()? {
        println!("  {model:<16} {:>6.2}%  ({exact})", 100.0 * p);
    }
    Ok(())
}
