//! Energy-ranked structured pruning against a random keep set of the same
//! size, measured on the final model output.

use camera_moe::calibration::gen_synthetic;
use camera_moe::model::ModelConfig;
use camera_moe::prune::{prune_model, random_prune_model, PruneConfig};
use camera_moe::reports::output_error;
use camera_moe::synth::{random_model, LayerGen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Summary {
    pub lambda: f64,
    pub kept_per_layer: Vec<usize>,
    pub ranked_l2: f64,
    pub random_l2: f64,
}

pub fn run() -> camera_moe::Result<Vec<Summary>> {
    let config = ModelConfig {
        n_layers: 3,
        n_experts: 8,
        n_shared: 1,
        d_model: 32,
        d_ff: 16,
        top_k: 2,
    };
    let model = random_model(&config, 21, &LayerGen::default())?;
    let calib = gen_synthetic(256, config.d_model, 22, 1.0)?;
    let eval = gen_synthetic(256, config.d_model, 23, 1.0)?;
    let mut out = Vec::new();
    for lambda in [0.2, 0.4] {
        let pruned = prune_model(&model, &calib, &PruneConfig::new(lambda, 1.0))?;
        let random = random_prune_model(&model, lambda, &mut ChaCha8Rng::seed_from_u64(24))?;
        out.push(Summary {
            lambda,
            kept_per_layer: pruned.records.iter().map(|r| r.kept).collect(),
            ranked_l2: output_error(&model, &pruned.model, &eval)?.l2,
            random_l2: output_error(&model, &random, &eval)?.l2,
        });
    }
    Ok(out)
}

fn main() -> camera_moe::Result<()> {
    for s in run()? {
        println!(
            "lambda {:.1}: kept {:?}  output L2 ranked {:.4e} vs random {:.4e}",
            s.lambda, s.kept_per_layer, s.ranked_l2, s.random_l2
        );
    }
    Ok(())
}
