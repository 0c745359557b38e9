//! Energy ranking of every micro-expert in a layer, and how the `alpha`
//! blend between mean-square and peak activation changes the order.

use camera_moe::calibration::{capture_layer_samples, gen_synthetic};
use camera_moe::model::ModelConfig;
use camera_moe::rank::rank_micro_experts;
use camera_moe::synth::{random_model, LayerGen};

pub struct Summary {
    pub n_micro_experts: usize,
    /// `(expert, neuron, energy)` of the five strongest micro-experts.
    pub top: Vec<(usize, usize, f64)>,
    /// Positions on which the `alpha = 0` and `alpha = 1` orders agree.
    pub agreement: usize,
}

pub fn run() -> camera_moe::Result<Summary> {
    let config = ModelConfig {
        n_layers: 2,
        n_experts: 8,
        n_shared: 1,
        d_model: 32,
        d_ff: 16,
        top_k: 2,
    };
    let model = random_model(&config, 11, &LayerGen::default())?;
    let batch = gen_synthetic(256, config.d_model, 12, 1.0)?;
    let samples = capture_layer_samples(&model, &batch, 1)?;
    let layer = model.layer(1)?;
    let (ranking, scores) = rank_micro_experts(layer, &samples, 0.5)?;
    let top = ranking.order[..5]
        .iter()
        .map(|&f| {
            let id = layer.micro_expert(f)?;
            Ok((id.expert, id.neuron, scores.energy[f]))
        })
        .collect::<camera_moe::Result<Vec<_>>>()?;
    let (mean_sq, _) = rank_micro_experts(layer, &samples, 0.0)?;
    let (peak, _) = rank_micro_experts(layer, &samples, 1.0)?;
    let agreement = mean_sq.order.iter().zip(&peak.order).filter(|(a, b)| a == b).count();
    Ok(Summary {
        n_micro_experts: ranking.len(),
        top,
        agreement,
    })
}

fn main() -> camera_moe::Result<()> {
    let s = run()?;
    println!("{} micro-experts ranked", s.n_micro_experts);
    for (expert, neuron, energy) in &s.top {
        println!("  expert {expert:>2} neuron {neuron:>2}  energy {energy:.4e}");
    }
    println!(
        "alpha 0 vs 1 orders agree on {}/{} positions",
        s.agreement, s.n_micro_experts
    );
    Ok(())
}
