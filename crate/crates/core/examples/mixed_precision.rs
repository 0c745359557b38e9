//! Mixed-precision quantization with both block layouts, their bit
//! accounting and the integrity audit.

use camera_moe::calibration::gen_synthetic;
use camera_moe::model::ModelConfig;
use camera_moe::quant::{audit_integrity, nominal_bitwidth, quantize_model, QuantParams, Variant};
use camera_moe::reports::output_error;
use camera_moe::synth::{random_model, LayerGen};

pub struct Summary {
    pub variant: Variant,
    pub nominal_bits: f64,
    pub measured_bits: f64,
    pub split_micro_experts: usize,
    pub coverage_ok: bool,
    pub output_l2: f64,
}

pub fn run() -> camera_moe::Result<Vec<Summary>> {
    let config = ModelConfig {
        n_layers: 2,
        n_experts: 4,
        n_shared: 0,
        d_model: 64,
        d_ff: 32,
        top_k: 2,
    };
    let model = random_model(&config, 31, &LayerGen::default())?;
    let batch = gen_synthetic(128, config.d_model, 32, 1.0)?;
    let mut out = Vec::new();
    for variant in [Variant::CameraQ, Variant::CameraQDagger] {
        let params = QuantParams {
            ratios: [0.2, 0.6, 0.2],
            bits: [3, 2, 1],
            group_size: 32,
            alpha: 1.0,
            variant,
        };
        let q = quantize_model(&model, &batch, &params)?;
        let audits: Vec<_> = q.layers.iter().map(audit_integrity).collect();
        out.push(Summary {
            variant,
            nominal_bits: nominal_bitwidth(params.ratios, params.bits, params.group_size),
            measured_bits: q.accounting().average_bits,
            split_micro_experts: audits.iter().map(|a| a.split_total).sum(),
            coverage_ok: audits.iter().all(|a| a.coverage_ok),
            output_l2: output_error(&model, &q.model, &batch)?.l2,
        });
    }
    Ok(out)
}

fn main() -> camera_moe::Result<()> {
    for s in run()? {
        println!(
            "{:?}: nominal {:.3} bits, measured {:.3} bits, {} split micro-experts, coverage {}, output L2 {:.4e}",
            s.variant, s.nominal_bits, s.measured_bits, s.split_micro_experts, s.coverage_ok, s.output_l2
        );
    }
    Ok(())
}
