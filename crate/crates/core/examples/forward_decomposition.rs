//! A routed MoE layer's output equals the sum of its micro-expert
//! contributions `a_i(x)·w_i`.

use camera_moe::calibration::gen_synthetic;
use camera_moe::model::{micro_expert_contribution, ModelConfig};
use camera_moe::synth::{random_model, LayerGen};

/// Returns the largest absolute gap between the layer output and the
/// decomposed sum over a small batch.
pub fn run() -> camera_moe::Result<f64> {
    let config = ModelConfig {
        n_layers: 1,
        n_experts: 6,
        n_shared: 1,
        d_model: 24,
        d_ff: 12,
        top_k: 2,
    };
    let model = random_model(&config, 7, &LayerGen::default())?;
    let layer = model.layer(0)?;
    let batch = gen_synthetic(16, config.d_model, 8, 1.0)?;
    let mut worst = 0.0f64;
    for t in 0..batch.n() {
        let x = batch.x.row(t);
        let y = layer.forward(x)?;
        let mut sum = vec![0.0f64; config.d_model];
        for flat in 0..layer.n_micro_experts() {
            let c = micro_expert_contribution(layer, layer.micro_expert(flat)?, x)?;
            sum.iter_mut().zip(&c).for_each(|(s, v)| *s += v);
        }
        for (a, b) in y.iter().zip(&sum) {
            worst = worst.max((f64::from(*a) - b).abs());
        }
    }
    Ok(worst)
}

fn main() -> camera_moe::Result<()> {
    let gap = run()?;
    println!("max |layer(x) - sum_i a_i(x) w_i| = {gap:.3e}");
    Ok(())
}
