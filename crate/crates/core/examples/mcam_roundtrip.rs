//! Writes a model to the MCAM container format, reads it back and checks
//! the forward pass is unchanged.

use camera_moe::calibration::gen_synthetic;
use camera_moe::mcam::{load_model, save_model, Container};
use camera_moe::model::ModelConfig;
use camera_moe::synth::{random_model, LayerGen};

pub struct Summary {
    pub bytes: usize,
    pub tensors: usize,
    pub identical: bool,
}

pub fn run() -> camera_moe::Result<Summary> {
    let config = ModelConfig {
        n_layers: 2,
        n_experts: 4,
        n_shared: 1,
        d_model: 16,
        d_ff: 8,
        top_k: 2,
    };
    let model = random_model(&config, 51, &LayerGen::default())?;
    let dir = std::env::temp_dir().join(format!("mcam-roundtrip-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| camera_moe::CameraError::Io {
        path: dir.clone(),
        source: e,
    })?;
    let path = dir.join("model.mcam");
    let mut meta = serde_json::Map::new();
    meta.insert("note".into(), "example".into());
    save_model(&path, &model, meta)?;
    let container = Container::read(&path)?;
    let back = load_model(&path)?;
    let x = gen_synthetic(8, config.d_model, 52, 1.0)?;
    let identical = model.forward_batch(&x.x)? == back.forward_batch(&x.x)?;
    let bytes = std::fs::metadata(&path).map(|m| m.len() as usize).unwrap_or(0);
    let _ = std::fs::remove_dir_all(&dir);
    Ok(Summary {
        bytes,
        tensors: container.tensors.len(),
        identical,
    })
}

fn main() -> camera_moe::Result<()> {
    let s = run()?;
    println!(
        "{} tensors, {} bytes, forward pass identical after reload: {}",
        s.tensors, s.bytes, s.identical
    );
    Ok(())
}
