//! Energy distribution, per-expert rank spread and per-expert prune ratio
//! tables, rendered as CSV.

use camera_moe::calibration::{capture_layer_samples, gen_synthetic};
use camera_moe::model::ModelConfig;
use camera_moe::prune::select_retain_set;
use camera_moe::rank::rank_micro_experts;
use camera_moe::reports::{energy_distribution, per_expert_prune_ratio, rank_distribution_per_expert, to_csv_string};
use camera_moe::synth::{random_model, LayerGen};

pub struct Tables {
    pub tail_ratio: f64,
    pub energy_csv: String,
    pub rank_csv: String,
    pub prune_csv: String,
}

pub fn run() -> camera_moe::Result<Tables> {
    let config = ModelConfig {
        n_layers: 1,
        n_experts: 6,
        n_shared: 1,
        d_model: 32,
        d_ff: 8,
        top_k: 2,
    };
    let model = random_model(&config, 41, &LayerGen::default())?;
    let batch = gen_synthetic(128, config.d_model, 42, 1.0)?;
    let layer = model.layer(0)?;
    let samples = capture_layer_samples(&model, &batch, 0)?;
    let (ranking, scores) = rank_micro_experts(layer, &samples, 1.0)?;
    let energy = energy_distribution(&scores, 1)?;
    let retain = select_retain_set(&ranking, 0.5, &layer.widths())?;
    Ok(Tables {
        tail_ratio: energy.tail_ratio(),
        energy_csv: to_csv_string(&energy.rows(0))?,
        rank_csv: to_csv_string(&rank_distribution_per_expert(&ranking, layer)?)?,
        prune_csv: to_csv_string(&per_expert_prune_ratio(&retain, layer)?)?,
    })
}

fn main() -> camera_moe::Result<()> {
    let t = run()?;
    println!("energy max/median after dropping the top one: {:.2}", t.tail_ratio);
    println!("\n# rank distribution\n{}", t.rank_csv);
    println!("# prune ratio at lambda 0.5\n{}", t.prune_csv);
    println!("# energy (first rows)");
    for line in t.energy_csv.lines().take(6) {
        println!("{line}");
    }
    Ok(())
}
