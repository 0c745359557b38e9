//! Calibration batches and per-layer `(X, Y)` capture.
//!
//! Calibration inputs are raw `d_model` hidden states fed straight into
//! the first MoE layer. Layers are chained without a residual: layer `ℓ`
//! sees the output of layer `ℓ - 1`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CameraError, Result};
use crate::mcam::Container;
use crate::model::{check_len, MoEModel};
use crate::synth::gaussian_matrix;
use crate::tensor::Matrix;

pub const CALIB_TENSOR: &str = "X";

#[derive(Debug, Clone, PartialEq)]
pub struct CalibBatch {
    /// `n × d_model`
    pub x: Matrix<f32>,
}

impl CalibBatch {
    pub fn new(x: Matrix<f32>) -> Result<Self> {
        if x.rows() == 0 {
            return Err(CameraError::invalid(
                "calibration",
                "batch must contain at least one row",
            ));
        }
        for r in 0..x.rows() {
            if let Some(c) = x.row(r).iter().position(|v| !v.is_finite()) {
                return Err(CameraError::NonFiniteCalibration { row: r, col: c });
            }
        }
        Ok(Self { x })
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d_model(&self) -> usize {
        self.x.cols()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.push(CALIB_TENSOR, self.x.clone());
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSamples {
    /// Layer inputs, `n × d_model`.
    pub x: Matrix<f32>,
    /// Layer outputs, `n × d_model`.
    pub y: Matrix<f32>,
}

pub fn calibration_from_container(c: &Container, d_model: Option<usize>) -> Result<CalibBatch> {
    let x = c.get(CALIB_TENSOR)?;
    if let Some(d) = d_model {
        check_len("calibration d_model", d, x.cols())?;
    }
    CalibBatch::new(x.clone())
}

/// Reads a batch stored as tensor `X` in an MCAM container.
pub fn load_calibration(path: &Path, d_model: Option<usize>) -> Result<CalibBatch> {
    calibration_from_container(&Container::read(path)?, d_model)
}

/// Gaussian batch with entries `N(0, scale²)`, reproducible from `seed`.
pub fn gen_synthetic(n: usize, d_model: usize, seed: u64, scale: f64) -> Result<CalibBatch> {
    if n == 0 {
        return Err(CameraError::invalid("n", "must be at least 1"));
    }
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(CameraError::invalid("scale", "must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CalibBatch::new(gaussian_matrix(&mut rng, n, d_model, scale))
}

/// Runs layers `0..=layer` in sequence and returns the `(X, Y)` seen by
/// `layer`.
pub fn capture_layer_samples(model: &MoEModel, batch: &CalibBatch, layer: usize) -> Result<LayerSamples> {
    model.layer(layer)?;
    check_len("calibration d_model", model.config.d_model, batch.d_model())?;
    let mut x = batch.x.clone();
    for l in &model.layers[..layer] {
        x = l.forward_batch(&x)?;
    }
    let y = model.layers[layer].forward_batch(&x)?;
    Ok(LayerSamples { x, y })
}

/// `(X, Y)` for every layer from one sequential pass.
pub fn capture_all_layers(model: &MoEModel, batch: &CalibBatch) -> Result<Vec<LayerSamples>> {
    check_len("calibration d_model", model.config.d_model, batch.d_model())?;
    let mut out = Vec::with_capacity(model.layers.len());
    let mut x = batch.x.clone();
    for l in &model.layers {
        let y = l.forward_batch(&x)?;
        out.push(LayerSamples { x, y: y.clone() });
        x = y;
    }
    Ok(out)
}
