//! The `train`, `spectrum`, `sweep` and `compare` commands.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use winq_core::autodiff::Graph;
use winq_core::checkpoint::Checkpoint;
use winq_core::data::{write_token_dump, SyntheticCorpus};
use winq_core::landscape::{interpolation_curvature_sweep, normalize_alphas, SweepResult};
use winq_core::spectrum::{saddle_diagnostic, slq_estimate, spectrum_stats, ste_hessian_operator, SaddleReport, SpectrumEstimate, SpectrumStats};
use winq_core::tensor::{ParamKind, ParamVector};
use winq_core::train::{pretrain, prepare_params, steps_to_loss, winq_train, TrainConfig, TrainOutcome, SMOOTHING_WINDOW};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::manifest::{ExperimentManifest, OutputDir};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.winq";
pub const INITIAL_CHECKPOINT_FILE: &str = "initial.winq";
pub const TOKENS_FILE: &str = "corpus.toks";
pub const SPECTRUM_FILE: &str = "spectrum.csv";
pub const STATS_FILE: &str = "spectrum_stats.txt";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_DETAIL_FILE: &str = "sweep.json";
pub const COMPARE_FILE: &str = "compare.json";

/// Gradient-norm threshold below which a point counts as near-stationary in
/// the spectrum record.
pub const STATIONARY_EPS: f64 = 1e-3;

fn load_config(path: &Path, seed_override: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed_override {
        cfg.override_seeds(s);
    }
    Ok(cfg)
}

fn run_meta(cfg: &ExperimentConfig, step: usize) -> serde_json::Value {
    json!({
        "config": serde_json::from_str::<serde_json::Value>(&cfg.to_json()).expect("config JSON parses"),
        "step": step,
        "seeds": cfg.train.seeds,
        "quantizer": cfg.train.weight_spec().ok().flatten(),
        "activation_bits": cfg.train.activation_bits,
    })
}

/// Parameters at the start of quantization-aware training: initialization,
/// optional full-precision warm start, learnable steps attached.
pub fn starting_point(cfg: &ExperimentConfig, graph: &Graph, init: &ParamVector, corpus: &SyntheticCorpus) -> Result<ParamVector> {
    let mut base = cfg.train.clone();
    base.eta = cfg.pretrain.eta.unwrap_or(cfg.train.eta);
    let warm = pretrain(graph, init, corpus, &base, cfg.pretrain.steps)?;
    Ok(prepare_params(&warm, &cfg.train)?)
}

#[derive(Debug)]
pub struct TrainRun {
    pub start: ParamVector,
    pub outcome: TrainOutcome,
    pub manifest: ExperimentManifest,
}

pub fn cmd_train(config: &Path, out_dir: &Path, seed_override: Option<u64>) -> Result<TrainRun> {
    let cfg = load_config(config, seed_override)?;
    let corpus = cfg.corpus()?;
    let (graph, init) = cfg.model()?;
    let mut out = OutputDir::create(out_dir)?;
    if cfg.corpus.dump_tokens {
        let mut bytes = Vec::new();
        write_token_dump(&corpus, &mut bytes)?;
        out.write(TOKENS_FILE, &bytes)?;
    }
    let start = starting_point(&cfg, &graph, &init, &corpus)?;
    Checkpoint::new(start.clone(), None, run_meta(&cfg, 0)).save(&out.path(INITIAL_CHECKPOINT_FILE))?;
    out.record(INITIAL_CHECKPOINT_FILE);

    let outcome = winq_train(&graph, &start, &corpus, &cfg.train)?;
    out.write(METRICS_FILE, outcome.metrics.to_jsonl().as_bytes())?;
    Checkpoint::new(outcome.params.clone(), Some(outcome.optimizer.clone()), run_meta(&cfg, cfg.train.steps))
        .save(&out.path(CHECKPOINT_FILE))?;
    out.record(CHECKPOINT_FILE);

    let last = outcome.metrics.records.last();
    let summary = json!({
        "steps": cfg.train.steps,
        "final_loss": last.map(|r| r.loss),
        "final_smoothed_loss": outcome.metrics.final_smoothed_loss(),
        "final_quant_err_rel": last.map(|r| r.quant_err_rel),
        "reinits": outcome.metrics.reinits,
    });
    let manifest = out.finish("train", &cfg, &[config], summary)?;
    Ok(TrainRun { start, outcome, manifest })
}

/// Load a checkpoint and check it belongs to the config's model.
pub fn load_checkpoint_for(cfg: &ExperimentConfig, path: &Path) -> Result<(Graph, ParamVector)> {
    let bad = |message: String| CliError::Checkpoint { path: path.display().to_string(), message };
    let ckpt = Checkpoint::load(path).map_err(|e| bad(e.to_string()))?;
    let layout = cfg.model.layout()?;
    let stored = ckpt.params.layout();
    for e in layout.entries() {
        match stored.get(&e.name) {
            Some(s) if s.shape == e.shape => {}
            Some(s) => return Err(bad(format!("parameter {} has shape {:?}, config expects {:?}", e.name, s.shape, e.shape))),
            None => return Err(bad(format!("parameter {} missing for the configured model", e.name))),
        }
    }
    if let Some(extra) = stored.entries().iter().find(|s| s.kind != ParamKind::Step && layout.get(&s.name).is_none()) {
        return Err(bad(format!("unexpected parameter {}", extra.name)));
    }
    let params = prepare_params(&ckpt.params, &cfg.train)?;
    Ok((cfg.model.graph(&layout)?, params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRecord {
    pub stats: SpectrumStats,
    pub dim: usize,
    pub loss: f64,
    pub saddle: SaddleReport,
    pub provenance: String,
}

impl SpectrumRecord {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let s = &self.stats;
        let mut out = String::new();
        let class = serde_json::to_value(self.saddle.class).expect("enum serializes");
        let rows: [(&str, String); 14] = [
            ("max_abs", s.max_abs.to_string()),
            ("near_zero_mass", s.near_zero_mass.to_string()),
            ("negative_mass", s.negative_mass.to_string()),
            ("positive_mass", s.positive_mass.to_string()),
            ("tau", s.tau.to_string()),
            ("m", s.m.to_string()),
            ("k", s.k.to_string()),
            ("seed", s.seed.to_string()),
            ("dim", self.dim.to_string()),
            ("loss", self.loss.to_string()),
            ("grad_rel_norm", self.saddle.grad_rel_norm.to_string()),
            ("stationarity", class.as_str().unwrap_or_default().to_string()),
            ("stationarity_eps", STATIONARY_EPS.to_string()),
            ("operator", self.provenance.clone()),
        ];
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[derive(Debug)]
pub struct SpectrumRun {
    pub estimate: SpectrumEstimate,
    pub record: SpectrumRecord,
    pub manifest: ExperimentManifest,
}

pub fn cmd_spectrum(config: &Path, checkpoint: &Path, out_dir: &Path, tau: Option<f64>, seed_override: Option<u64>) -> Result<SpectrumRun> {
    let mut cfg = load_config(config, seed_override)?;
    if let Some(t) = tau {
        cfg.spectrum.tau = t;
    }
    let (graph, params) = load_checkpoint_for(&cfg, checkpoint)?;
    let corpus = cfg.corpus()?;
    let batch = cfg.hessian_batch(&corpus)?;
    let quant = cfg.train.quant_config()?;
    let mask = cfg.hessian_mask(&params);
    let op = ste_hessian_operator(&graph, &params, &batch, &quant, mask.as_deref())?;
    let estimate = slq_estimate(&op, &cfg.spectrum.slq())?;
    let stats = spectrum_stats(&estimate, cfg.spectrum.tau)?;
    let (loss, grad) = graph.loss_and_grad(&params, &batch, &quant)?;
    let (g_sub, w_sub): (Vec<f64>, Vec<f64>) = match &mask {
        Some(m) => (0..grad.len()).filter(|&i| m[i]).map(|i| (grad[i], params.as_slice()[i])).unzip(),
        None => (grad, params.as_slice().to_vec()),
    };
    let saddle = saddle_diagnostic(&g_sub, &w_sub, &stats, STATIONARY_EPS);
    let record = SpectrumRecord { stats, dim: w_sub.len(), loss, saddle, provenance: estimate.provenance.clone() };

    let mut out = OutputDir::create(out_dir)?;
    out.write(SPECTRUM_FILE, estimate.to_csv().as_bytes())?;
    out.write(STATS_FILE, record.to_text().as_bytes())?;
    let summary = serde_json::to_value(&record).expect("record serializes");
    let manifest = out.finish("spectrum", &cfg, &[config, checkpoint], summary)?;
    Ok(SpectrumRun { estimate, record, manifest })
}

/// Parse a comma-separated α list such as `"0,0.4,1"`.
pub fn parse_alphas(text: &str) -> Result<Vec<f64>> {
    let values = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("cannot parse alpha {s:?} in {text:?}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(normalize_alphas(&values)?)
}

#[derive(Debug)]
pub struct SweepRun {
    pub result: SweepResult,
    pub manifest: ExperimentManifest,
}

pub fn cmd_sweep(
    config: &Path,
    checkpoint: &Path,
    out_dir: &Path,
    alphas: Option<&str>,
    tau: Option<f64>,
    seed_override: Option<u64>,
) -> Result<SweepRun> {
    let mut cfg = load_config(config, seed_override)?;
    if let Some(t) = tau {
        cfg.spectrum.tau = t;
    }
    if let Some(a) = alphas {
        cfg.sweep.alphas = parse_alphas(a)?;
    }
    let (graph, params) = load_checkpoint_for(&cfg, checkpoint)?;
    let corpus = cfg.corpus()?;
    let batch = cfg.hessian_batch(&corpus)?;
    let quant = cfg.train.quant_config()?;
    let mask = cfg.hessian_mask(&params);
    let result = interpolation_curvature_sweep(
        &graph,
        &params,
        &batch,
        &quant,
        &cfg.sweep.alphas,
        &cfg.spectrum.slq(),
        cfg.spectrum.tau,
        cfg.sweep.mode,
        mask.as_deref(),
    )?;
    let mut out = OutputDir::create(out_dir)?;
    out.write(SWEEP_FILE, result.to_csv().as_bytes())?;
    let detail = serde_json::to_string_pretty(&result).expect("sweep serializes");
    out.write(SWEEP_DETAIL_FILE, detail.as_bytes())?;
    let summary = serde_json::to_value(&result.rows).expect("rows serialize");
    let manifest = out.finish("sweep", &cfg, &[config, checkpoint], summary)?;
    Ok(SweepRun { result, manifest })
}

/// Steps-to-target and final loss of one side of a comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    /// First step whose smoothed loss reaches the target; `None` if never.
    pub steps_to_target: Option<usize>,
    pub final_smoothed_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub target_loss: f64,
    /// `"given"` or `"baseline_final_smoothed"`.
    pub target_source: String,
    pub smoothing_window: usize,
    pub baseline: RunSummary,
    pub winq: RunSummary,
    /// `baseline.steps_to_target / winq.steps_to_target`; `None` when either
    /// side never reaches the target.
    pub ratio: Option<f64>,
    pub unreached: Vec<String>,
}

/// Two configs are comparable when they differ only in noise, interpolation
/// weight and interval (and the noise seed, which only matters with noise).
pub fn check_fair(baseline: &ExperimentConfig, winq: &ExperimentConfig) -> Result<()> {
    let unfair = |what: &str| Err(CliError::Unfair(format!("configs differ in {what}")));
    if baseline.model != winq.model {
        return unfair("model");
    }
    if baseline.corpus != winq.corpus {
        return unfair("corpus (data seed or length)");
    }
    if baseline.pretrain != winq.pretrain {
        return unfair("pretraining");
    }
    if baseline.train.seeds.init != winq.train.seeds.init {
        return unfair("init seed");
    }
    if baseline.train.seeds.data != winq.train.seeds.data {
        return unfair("data seed");
    }
    let strip = |t: &TrainConfig| {
        let mut t = t.clone();
        t.sigma = 0.0;
        t.alpha = 0.0;
        t.reinit_interval = None;
        t.seeds.noise = 0;
        t
    };
    if strip(&baseline.train) != strip(&winq.train) {
        return unfair("training settings other than sigma, alpha and reinit_interval");
    }
    Ok(())
}

#[derive(Debug)]
pub struct CompareRun {
    pub record: ComparisonRecord,
    pub baseline: TrainOutcome,
    pub winq: TrainOutcome,
    pub manifest: ExperimentManifest,
}

fn summarize(outcome: &TrainOutcome, target: f64) -> RunSummary {
    let losses = outcome.metrics.losses();
    RunSummary {
        steps: losses.len(),
        steps_to_target: steps_to_loss(&losses, target, SMOOTHING_WINDOW),
        final_smoothed_loss: outcome.metrics.final_smoothed_loss().unwrap_or(f64::NAN),
    }
}

pub fn cmd_compare(
    baseline_config: &Path,
    winq_config: &Path,
    out_dir: &Path,
    target_loss: Option<f64>,
    seed_override: Option<u64>,
) -> Result<CompareRun> {
    let base_cfg = load_config(baseline_config, seed_override)?;
    let winq_cfg = load_config(winq_config, seed_override)?;
    check_fair(&base_cfg, &winq_cfg)?;
    let corpus = base_cfg.corpus()?;
    let (graph, init) = base_cfg.model()?;
    let start = starting_point(&base_cfg, &graph, &init, &corpus)?;

    let (baseline, winq) = std::thread::scope(|s| {
        let b = s.spawn(|| winq_train(&graph, &start, &corpus, &base_cfg.train));
        let w = winq_train(&graph, &start, &corpus, &winq_cfg.train);
        (b.join().expect("baseline run panicked"), w)
    });
    let (baseline, winq) = (baseline?, winq?);

    let (target, source) = match target_loss {
        Some(t) => (t, "given"),
        None => (baseline.metrics.final_smoothed_loss().unwrap_or(f64::NAN), "baseline_final_smoothed"),
    };
    let b = summarize(&baseline, target);
    let w = summarize(&winq, target);
    let mut unreached = Vec::new();
    if b.steps_to_target.is_none() {
        unreached.push("baseline".to_string());
    }
    if w.steps_to_target.is_none() {
        unreached.push("winq".to_string());
    }
    let ratio = match (b.steps_to_target, w.steps_to_target) {
        (Some(x), Some(y)) => Some(x as f64 / y as f64),
        _ => None,
    };
    let record = ComparisonRecord {
        target_loss: target,
        target_source: source.to_string(),
        smoothing_window: SMOOTHING_WINDOW,
        baseline: b,
        winq: w,
        ratio,
        unreached,
    };

    let mut out = OutputDir::create(out_dir)?;
    out.write("metrics_baseline.jsonl", baseline.metrics.to_jsonl().as_bytes())?;
    out.write("metrics_winq.jsonl", winq.metrics.to_jsonl().as_bytes())?;
    out.write(COMPARE_FILE, serde_json::to_string_pretty(&record).expect("record serializes").as_bytes())?;
    let summary = serde_json::to_value(&record).expect("record serializes");
    let mut manifest = out.finish("compare", &winq_cfg, &[baseline_config, winq_config], summary)?;
    manifest.summary["baseline_config_digest"] = json!(base_cfg.digest());
    std::fs::write(out_dir.join(crate::manifest::MANIFEST_FILE), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| CliError::io(out_dir, e))?;
    Ok(CompareRun { record, baseline, winq, manifest })
}
