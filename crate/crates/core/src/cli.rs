//! The `camera` command line.
//!
//! Exit codes: 0 success, 1 parse or validation error, 2 runtime error,
//! 3 verification failure. Every artifact embeds a [`RunManifest`]: report
//! JSON files carry it under `manifest`, MCAM files in their header
//! metadata. Nothing is written outside the paths named by flags.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::calibration::{capture_all_layers, capture_layer_samples, gen_synthetic, load_calibration, CalibBatch};
use crate::error::{CameraError, Result};
use crate::mcam::{load_model, save_model};
use crate::model::{MoEModel, ModelConfig};
use crate::oracles::{cssp_bruteforce, decoding_error, greedy_top_energy, p_lossless, theorem_check};
use crate::prune::{prune_model, PruneConfig};
use crate::quant::{audit_integrity, nominal_bitwidth, quantize_model, QuantParams, Variant};
use crate::rank::{compute_coefficients, compute_energy, Ranking};
use crate::reports::{
    approx_error, energy_distribution, per_expert_prune_ratio, prune_ratio_from_widths, rank_distribution_per_expert,
    write_csv, write_json, ApproxErrorRecord, EnergyDistribution, EnergyRow, PruneRatioRow, RankDistributionRow,
};
use crate::sweeps::{bound_instance, lemma_sweep, sandwich_sweep, theorem_sweep, verify, ShapeRanges};
use crate::synth::{random_model, LayerGen};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "camera",
    version,
    about = "Micro-expert ranking, pruning and mixed-precision quantization for MoE layers"
)]
pub struct Cli {
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded random toy MoE model.
    GenModel(GenModelArgs),
    /// Write a seeded Gaussian calibration batch.
    GenCalib(GenCalibArgs),
    /// Rank one layer's micro-experts by energy.
    Rank(RankArgs),
    /// Prune every layer to the top-ranked micro-experts.
    Prune(PruneArgs),
    /// Mixed-precision quantization over ranked micro-experts.
    Quantize(QuantizeArgs),
    /// Exact reference computations.
    #[command(subcommand)]
    Oracle(OracleCommand),
    /// Energy, rank, prune-ratio and approximation-error tables.
    Report(ReportArgs),
    /// Run the property suite; exits 3 on any violation.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    /// Routed experts per layer.
    #[arg(long, default_value_t = 8)]
    pub experts: usize,
    #[arg(long, default_value_t = 0)]
    pub shared: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 32)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 2)]
    pub top_k: usize,
    /// Log-space std of the per-neuron down-column scale.
    #[arg(long, default_value_t = LayerGen::default().neuron_scale_sigma)]
    pub neuron_scale_sigma: f64,
    #[arg(long, default_value_t = LayerGen::default().down_gain)]
    pub down_gain: f64,
    /// Per-layer output RMS the generator rescales to.
    #[arg(long, default_value_t = 1.0)]
    pub output_rms: f64,
    /// Skip the per-layer output rescaling.
    #[arg(long)]
    pub raw_scale: bool,
    #[arg(long, env = "CAMERA_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenCalibArgs {
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, env = "CAMERA_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// `n,d,seed,scale`
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d_model: usize,
    pub seed: u64,
    pub scale: f64,
}

fn parse_synthetic(s: &str) -> std::result::Result<SyntheticSpec, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [n, d, seed, scale] = parts[..] else {
        return Err(format!("expected n,d,seed,scale, got {s:?}"));
    };
    let bad = |what: &str| format!("bad {what} in {s:?}");
    Ok(SyntheticSpec {
        n: n.parse().map_err(|_| bad("n"))?,
        d_model: d.parse().map_err(|_| bad("d"))?,
        seed: seed.parse().map_err(|_| bad("seed"))?,
        scale: scale.parse().map_err(|_| bad("scale"))?,
    })
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct CalibSource {
    /// Calibration batch (MCAM with tensor `X`).
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Generate the batch instead: `n,d,seed,scale`.
    #[arg(long, value_parser = parse_synthetic)]
    pub synthetic: Option<SyntheticSpec>,
}

impl CalibSource {
    fn load(&self, d_model: usize) -> Result<CalibBatch> {
        match (&self.calib, self.synthetic) {
            (Some(p), _) => load_calibration(p, Some(d_model)),
            (None, Some(s)) => {
                if s.d_model != d_model {
                    return Err(CameraError::DimensionMismatch {
                        what: "synthetic calibration d_model",
                        expected: d_model,
                        got: s.d_model,
                    });
                }
                gen_synthetic(s.n, s.d_model, s.seed, s.scale)
            }
            (None, None) => Err(CameraError::invalid(
                "calib",
                "one of --calib or --synthetic is required",
            )),
        }
    }

    fn describe(&self) -> Value {
        match (&self.calib, self.synthetic) {
            (Some(p), _) => json!({ "calib": p }),
            (_, Some(s)) => json!({ "synthetic": s }),
            _ => Value::Null,
        }
    }

    fn inputs(&self) -> Vec<&Path> {
        self.calib.as_deref().into_iter().collect()
    }
}

fn parse_unit_interval(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("must be in [0, 1), got {v}"))
    }
}

fn parse_alpha(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("must be in [0, 1], got {v}"))
    }
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String> {
    let v: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad entry {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into()
        .map_err(|_| format!("expected three comma-separated values, got {s:?}"))
}

fn parse_bits(s: &str) -> std::result::Result<[u8; 3], String> {
    parse_triple(s)
}

fn parse_ratios(s: &str) -> std::result::Result<[f64; 3], String> {
    parse_triple(s)
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub source: CalibSource,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 1.0, value_parser = parse_alpha)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub source: CalibSource,
    /// Fraction of micro-experts removed per layer, in [0, 1).
    #[arg(long, value_parser = parse_unit_interval)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0, value_parser = parse_alpha)]
    pub alpha: f64,
    /// Never prune shared-expert micro-experts.
    #[arg(long)]
    pub protect_shared: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Q,
    QDagger,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Q => Variant::CameraQ,
            VariantArg::QDagger => Variant::CameraQDagger,
        }
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub source: CalibSource,
    /// Bit-widths per level, highest first.
    #[arg(long, default_value = "3,2,1", value_parser = parse_bits)]
    pub bits: [u8; 3],
    /// Fraction of micro-experts per level, summing to 1.
    #[arg(long, default_value = "0.2,0.6,0.2", value_parser = parse_ratios)]
    pub ratios: [f64; 3],
    #[arg(long, default_value_t = 128)]
    pub group: usize,
    #[arg(long, value_enum, default_value_t = VariantArg::Q)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 1.0, value_parser = parse_alpha)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum OracleCommand {
    /// Exhaustive column subset selection against the greedy ranking.
    Cssp(CsspArgs),
    /// Bound sweeps over seeded instances.
    Bounds(BoundsArgs),
    /// Probability that a token's experts survive expert-level pruning.
    Plossless(PlosslessArgs),
}

#[derive(Debug, Args)]
pub struct CsspArgs {
    /// Use this model layer instead of a seeded random instance.
    #[arg(long, requires = "calib_group")]
    pub model: Option<PathBuf>,
    #[arg(long, group = "calib_group")]
    pub calib: Option<PathBuf>,
    #[arg(long, group = "calib_group", value_parser = parse_synthetic)]
    pub synthetic: Option<SyntheticSpec>,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    /// Subset size; defaults to half the micro-experts.
    #[arg(long)]
    pub keep: Option<usize>,
    #[arg(long, env = "CAMERA_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[arg(long, default_value_t = 500)]
    pub trials: usize,
    #[arg(long, env = "CAMERA_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlosslessArgs {
    #[arg(long)]
    pub experts: usize,
    #[arg(long)]
    pub activated: usize,
    #[arg(long, value_parser = parse_unit_interval)]
    pub prune: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Compressed model to compare against `--model`.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    #[command(flatten)]
    pub source: CalibSource,
    #[arg(long, default_value_t = 1.0, value_parser = parse_alpha)]
    pub alpha: f64,
    /// Drop this many highest energies from the distribution tables.
    #[arg(long, default_value_t = 0)]
    pub drop_top: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one CSV per table into this directory.
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, env = "CAMERA_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub parameters: Value,
    pub inputs: Vec<InputDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CameraError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(subcommand: &str, parameters: Value, inputs: &[&Path]) -> Result<Self> {
        Ok(Self {
            subcommand: subcommand.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            parameters,
            inputs: inputs
                .iter()
                .map(|p| {
                    Ok(InputDigest {
                        path: p.to_path_buf(),
                        sha256: sha256_file(p)?,
                    })
                })
                .collect::<Result<_>>()?,
        })
    }

    fn metadata(&self) -> Result<Map<String, Value>> {
        let mut m = Map::new();
        m.insert("manifest".into(), serde_json::to_value(self)?);
        Ok(m)
    }
}

// ---------------------------------------------------------------------------
// Commands

#[derive(Debug, Serialize)]
struct RankRecord {
    flat_index: usize,
    expert: usize,
    neuron: usize,
    energy: f64,
    rank: usize,
}

fn rank_records(model: &MoEModel, layer: usize, ranking: &Ranking, energy: &[f64]) -> Result<Vec<RankRecord>> {
    let l = model.layer(layer)?;
    let rank_of = ranking.rank_of();
    (0..l.n_micro_experts())
        .map(|flat| {
            let id = l.micro_expert(flat)?;
            Ok(RankRecord {
                flat_index: flat,
                expert: id.expert,
                neuron: id.neuron,
                energy: energy[flat],
                rank: rank_of[flat],
            })
        })
        .collect()
}

fn cmd_gen_model(a: &GenModelArgs, out: &mut dyn Write) -> Result<()> {
    let config = ModelConfig {
        n_layers: a.layers,
        n_experts: a.experts,
        n_shared: a.shared,
        d_model: a.d_model,
        d_ff: a.d_ff,
        top_k: a.top_k,
    };
    let gen = LayerGen {
        neuron_scale_sigma: a.neuron_scale_sigma,
        down_gain: a.down_gain,
        output_rms: (!a.raw_scale).then_some(a.output_rms),
    };
    if !(a.output_rms.is_finite() && a.output_rms > 0.0) {
        return Err(CameraError::invalid("output-rms", "must be finite and positive"));
    }
    if !(gen.neuron_scale_sigma.is_finite() && gen.neuron_scale_sigma >= 0.0) {
        return Err(CameraError::invalid(
            "neuron-scale-sigma",
            "must be finite and non-negative",
        ));
    }
    if !(gen.down_gain.is_finite() && gen.down_gain > 0.0) {
        return Err(CameraError::invalid("down-gain", "must be finite and positive"));
    }
    let model = random_model(&config, a.seed, &gen)?;
    let manifest = RunManifest::new(
        "gen-model",
        json!({ "config": config, "generator": gen, "seed": a.seed, "out": a.out }),
        &[],
    )?;
    save_model(&a.out, &model, manifest.metadata()?)?;
    writeln!(
        out,
        "wrote {} ({} parameters)",
        a.out.display(),
        model.parameter_count()
    )
    .ok();
    Ok(())
}

fn cmd_gen_calib(a: &GenCalibArgs, out: &mut dyn Write) -> Result<()> {
    let batch = gen_synthetic(a.n, a.d_model, a.seed, a.scale)?;
    let manifest = RunManifest::new(
        "gen-calib",
        json!({ "n": a.n, "d_model": a.d_model, "seed": a.seed, "scale": a.scale, "out": a.out }),
        &[],
    )?;
    let mut c = batch.to_container();
    c.metadata = manifest.metadata()?;
    c.write(&a.out)?;
    writeln!(out, "wrote {} ({} x {})", a.out.display(), a.n, a.d_model).ok();
    Ok(())
}

fn cmd_rank(a: &RankArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&a.model)?;
    let batch = a.source.load(model.config.d_model)?;
    let samples = capture_layer_samples(&model, &batch, a.layer)?;
    let layer = model.layer(a.layer)?;
    let phi = compute_coefficients(layer, &samples)?;
    let scores = compute_energy(&phi, layer, a.alpha)?;
    let ranking = Ranking::from_energy(&scores.energy);
    let mut inputs = vec![a.model.as_path()];
    inputs.extend(a.source.inputs());
    let manifest = RunManifest::new(
        "rank",
        json!({ "model": a.model, "source": a.source.describe(), "layer": a.layer, "alpha": a.alpha, "out": a.out }),
        &inputs,
    )?;
    let records = rank_records(&model, a.layer, &ranking, &scores.energy)?;
    write_json(
        &a.out,
        &json!({ "manifest": manifest, "layer": a.layer, "alpha": a.alpha, "records": records }),
    )?;
    writeln!(out, "ranked {} micro-experts of layer {}", records.len(), a.layer).ok();
    Ok(())
}

fn cmd_prune(a: &PruneArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&a.model)?;
    let batch = a.source.load(model.config.d_model)?;
    let config = PruneConfig {
        lambda: a.lambda,
        alpha: a.alpha,
        protect_shared: a.protect_shared,
    };
    let outcome = prune_model(&model, &batch, &config)?;
    let mut inputs = vec![a.model.as_path()];
    inputs.extend(a.source.inputs());
    let manifest = RunManifest::new(
        "prune",
        json!({
            "model": a.model, "source": a.source.describe(), "lambda": a.lambda, "alpha": a.alpha,
            "protect_shared": a.protect_shared, "out": a.out, "report": a.report,
        }),
        &inputs,
    )?;
    save_model(&a.out, &outcome.model, manifest.metadata()?)?;
    if let Some(path) = &a.report {
        let mut ratios = Vec::new();
        for (i, (retain, layer)) in outcome.retain_sets.iter().zip(&model.layers).enumerate() {
            for mut row in per_expert_prune_ratio(retain, layer)? {
                row.layer = i;
                ratios.push(row);
            }
        }
        let layers: Vec<usize> = (0..model.layers.len()).collect();
        let errors = approx_error(&model, &outcome.model, &batch, &layers)?;
        write_json(
            path,
            &json!({ "manifest": manifest, "layers": outcome.records, "prune_ratios": ratios, "approx_error": errors }),
        )?;
    }
    let kept: usize = outcome.records.iter().map(|r| r.kept).sum();
    let before: usize = outcome.records.iter().map(|r| r.micro_experts_before).sum();
    writeln!(out, "kept {kept} of {before} micro-experts; wrote {}", a.out.display()).ok();
    Ok(())
}

fn cmd_quantize(a: &QuantizeArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&a.model)?;
    let batch = a.source.load(model.config.d_model)?;
    let params = QuantParams {
        ratios: a.ratios,
        bits: a.bits,
        group_size: a.group,
        alpha: a.alpha,
        variant: a.variant.into(),
    };
    let q = quantize_model(&model, &batch, &params)?;
    let mut inputs = vec![a.model.as_path()];
    inputs.extend(a.source.inputs());
    let manifest = RunManifest::new(
        "quantize",
        json!({
            "model": a.model, "source": a.source.describe(), "params": params, "out": a.out, "report": a.report,
        }),
        &inputs,
    )?;
    save_model(&a.out, &q.model, manifest.metadata()?)?;
    let accounting = q.accounting();
    let nominal = nominal_bitwidth(a.ratios, a.bits, a.group);
    if let Some(path) = &a.report {
        let layers: Vec<Value> = q
            .layers
            .iter()
            .zip(&q.plans)
            .enumerate()
            .map(|(i, (l, p))| {
                json!({
                    "layer": i,
                    "level_sizes": p.level_sets.iter().map(Vec::len).collect::<Vec<_>>(),
                    "accounting": l.accounting(),
                    "audit": audit_integrity(l),
                })
            })
            .collect();
        let idx: Vec<usize> = (0..model.layers.len()).collect();
        let errors = approx_error(&model, &q.model, &batch, &idx)?;
        write_json(
            path,
            &json!({
                "manifest": manifest,
                "nominal_average_bits": nominal,
                "accounting": accounting,
                "layers": layers,
                "approx_error": errors,
            }),
        )?;
    }
    writeln!(
        out,
        "nominal {nominal:.4} bits/weight, measured {:.4}; wrote {}",
        accounting.average_bits,
        a.out.display()
    )
    .ok();
    Ok(())
}

fn emit(out: &mut dyn Write, path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    match path {
        Some(p) => write_json(p, value),
        None => {
            let s = crate::reports::to_json_string(value)?;
            out.write_all(s.as_bytes()).map_err(|e| CameraError::io("<stdout>", e))
        }
    }
}

fn cmd_oracle(c: &OracleCommand, out: &mut dyn Write) -> Result<()> {
    match c {
        OracleCommand::Plossless(a) => {
            let p = p_lossless(a.experts, a.activated, a.prune)?;
            writeln!(out, "{:.4}", p.probability).map_err(|e| CameraError::io("<stdout>", e))?;
            if let Some(path) = &a.out {
                let manifest = RunManifest::new(
                    "oracle plossless",
                    json!({ "experts": a.experts, "activated": a.activated, "prune": a.prune }),
                    &[],
                )?;
                write_json(path, &json!({ "manifest": manifest, "result": p }))?;
            }
            Ok(())
        }
        OracleCommand::Bounds(a) => {
            let report = json!({
                "manifest": RunManifest::new("oracle bounds", json!({ "trials": a.trials, "seed": a.seed }), &[])?,
                "lemma": lemma_sweep(a.seed, a.trials)?,
                "theorem": theorem_sweep(a.seed, a.trials)?,
                "sandwich": sandwich_sweep(a.seed, a.trials.min(50))?,
            });
            emit(out, a.out.as_deref(), &report)
        }
        OracleCommand::Cssp(a) => {
            let (phi, w, inputs) = match &a.model {
                Some(path) => {
                    let model = load_model(path)?;
                    let source = CalibSource {
                        calib: a.calib.clone(),
                        synthetic: a.synthetic,
                    };
                    let batch = source.load(model.config.d_model)?;
                    let samples = capture_layer_samples(&model, &batch, a.layer)?;
                    let layer = model.layer(a.layer)?;
                    let phi = compute_coefficients(layer, &samples)?.phi;
                    let mut inputs = vec![path.clone()];
                    inputs.extend(a.calib.clone());
                    (phi, layer.basis_matrix(), inputs)
                }
                None => {
                    let inst = bound_instance(a.seed, &ShapeRanges::BOUNDS)?;
                    (inst.phi, inst.w, Vec::new())
                }
            };
            let n_e = phi.cols();
            let keep = a.keep.unwrap_or(n_e / 2).max(1);
            let best = cssp_bruteforce(&phi, &w, keep)?;
            let (greedy, _, _) = greedy_top_energy(&phi, &w, keep)?;
            let greedy_error = decoding_error(&phi, &w, &greedy)?;
            let theorem = if keep < n_e {
                Some(theorem_check(&phi, &w, keep)?)
            } else {
                None
            };
            let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            let manifest = RunManifest::new(
                "oracle cssp",
                json!({ "model": a.model, "calib": a.calib, "synthetic": a.synthetic, "layer": a.layer, "keep": keep, "seed": a.seed }),
                &input_refs,
            )?;
            let report = json!({
                "manifest": manifest,
                "micro_experts": n_e,
                "keep": keep,
                "optimal": best,
                "greedy": { "subset": greedy, "error": greedy_error },
                "theorem": theorem,
            });
            emit(out, a.out.as_deref(), &report)
        }
    }
}

#[derive(Debug, Serialize)]
struct ReportBundle {
    manifest: RunManifest,
    energy: Vec<EnergyDistribution>,
    rank_distribution: Vec<RankDistributionRow>,
    prune_ratios: Vec<PruneRatioRow>,
    approx_error: Vec<ApproxErrorRecord>,
}

fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&a.model)?;
    let batch = a.source.load(model.config.d_model)?;
    let samples = capture_all_layers(&model, &batch)?;
    let mut energy = Vec::new();
    let mut energy_rows: Vec<EnergyRow> = Vec::new();
    let mut rank_rows = Vec::new();
    for (i, (layer, s)) in model.layers.iter().zip(&samples).enumerate() {
        let scores = compute_energy(&compute_coefficients(layer, s)?, layer, a.alpha)?;
        let ranking = Ranking::from_energy(&scores.energy);
        let dist = energy_distribution(&scores, a.drop_top)?;
        energy_rows.extend(dist.rows(i));
        energy.push(dist);
        for mut row in rank_distribution_per_expert(&ranking, layer)? {
            row.layer = i;
            rank_rows.push(row);
        }
    }

    let mut inputs = vec![a.model.as_path()];
    let mut prune_ratios = Vec::new();
    let mut errors = Vec::new();
    if let Some(path) = &a.compare {
        inputs.push(path);
        let other = load_model(path)?;
        for (i, (la, lb)) in model.layers.iter().zip(&other.layers).enumerate() {
            for mut row in prune_ratio_from_widths(&la.widths(), &lb.widths(), model.config.n_shared)? {
                row.layer = i;
                prune_ratios.push(row);
            }
        }
        let idx: Vec<usize> = (0..model.layers.len()).collect();
        errors = approx_error(&model, &other, &batch, &idx)?;
    }
    inputs.extend(a.source.inputs());
    let manifest = RunManifest::new(
        "report",
        json!({
            "model": a.model, "compare": a.compare, "source": a.source.describe(), "alpha": a.alpha,
            "drop_top": a.drop_top, "out": a.out, "csv_dir": a.csv_dir,
        }),
        &inputs,
    )?;

    if let Some(dir) = &a.csv_dir {
        std::fs::create_dir_all(dir).map_err(|e| CameraError::io(dir, e))?;
        write_csv(&dir.join("energy.csv"), &energy_rows)?;
        write_csv(&dir.join("rank_distribution.csv"), &rank_rows)?;
        write_csv(&dir.join("prune_ratio.csv"), &prune_ratios)?;
        write_csv(&dir.join("approx_error.csv"), &errors)?;
    }
    let bundle = ReportBundle {
        manifest,
        energy,
        rank_distribution: rank_rows,
        prune_ratios,
        approx_error: errors,
    };
    write_json(&a.out, &bundle)?;
    writeln!(out, "wrote {}", a.out.display()).ok();
    Ok(())
}

fn cmd_verify(a: &VerifyArgs, out: &mut dyn Write) -> Result<bool> {
    let report = verify(a.seed, a.trials)?;
    for c in &report.checks {
        writeln!(
            out,
            "[{}] {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        )
        .ok();
    }
    if let Some(path) = &a.out {
        let manifest = RunManifest::new("verify", json!({ "seed": a.seed, "trials": a.trials }), &[])?;
        write_json(path, &json!({ "manifest": manifest, "report": report }))?;
    }
    Ok(report.passed())
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::GenModel(a) => cmd_gen_model(a, out)?,
        Command::GenCalib(a) => cmd_gen_calib(a, out)?,
        Command::Rank(a) => cmd_rank(a, out)?,
        Command::Prune(a) => cmd_prune(a, out)?,
        Command::Quantize(a) => cmd_quantize(a, out)?,
        Command::Oracle(c) => cmd_oracle(c, out)?,
        Command::Report(a) => cmd_report(a, out)?,
        Command::Verify(a) => {
            if !cmd_verify(a, out)? {
                return Ok(EXIT_VERIFY);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name) and runs the command,
/// writing normal output to `out` and diagnostics to `err`.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                write!(err, "{text}").ok();
            } else {
                write!(out, "{text}").ok();
            }
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            writeln!(err, "error: invalid argument `threads`: must be at least 1").ok();
            return EXIT_USAGE;
        }
        // Fails only if a pool already exists, which is harmless.
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    match dispatch(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            writeln!(err, "error: {e}").ok();
            if e.is_validation() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with(
            std::iter::once("camera").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn plossless_prints_four_decimals() {
        let (code, out, _) = run_capture(&[
            "oracle",
            "plossless",
            "--experts",
            "8",
            "--activated",
            "2",
            "--prune",
            "0.25",
        ]);
        assert_eq!(code, 0);
        assert_eq!(out, "0.5357\n");
    }

    #[test]
    fn bad_lambda_names_flag() {
        let (code, _, err) = run_capture(&["prune", "--lambda", "1.5"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("--lambda"), "{err}");
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = run_capture(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("gen-model"));
    }

    #[test]
    fn synthetic_spec_parsing() {
        let s = parse_synthetic("16, 8, 3, 0.5").unwrap();
        assert_eq!((s.n, s.d_model, s.seed, s.scale), (16, 8, 3, 0.5));
        assert!(parse_synthetic("16,8,3").is_err());
        assert!(parse_bits("3,2").is_err());
        assert_eq!(parse_ratios("0.2,0.6,0.2").unwrap(), [0.2, 0.6, 0.2]);
    }

    #[test]
    fn runtime_error_exit_code() {
        let (code, _, err) = run_capture(&[
            "rank",
            "--model",
            "/nonexistent/model.mcam",
            "--synthetic",
            "4,8,1,1.0",
            "--out",
            "/nonexistent/r.json",
        ]);
        assert_eq!(code, EXIT_RUNTIME);
        assert!(err.contains("io error"));
    }

    #[test]
    fn calib_sources_are_exclusive() {
        let (code, _, _) = run_capture(&[
            "rank",
            "--model",
            "m",
            "--calib",
            "c",
            "--synthetic",
            "4,8,1,1",
            "--out",
            "o",
        ]);
        assert_eq!(code, EXIT_USAGE);
    }
}
