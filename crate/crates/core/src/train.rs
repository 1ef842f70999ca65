//! Quantization-aware training: straight-through baseline, AdamW, and the
//! re-initialization + noise-injection loop, optionally in the Hadamard domain.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{BatchSampler, SyntheticCorpus};
use crate::error::{Result, WinqError};
use crate::hadamard::fwht_rows;
use crate::quant::{
    attach_learnable_steps, check_activation_bits, quantize_grouped, Granularity, QuantConfig, QuantKind, QuantizerSpec, SteMode,
};
use crate::tensor::{ParamKind, ParamVector};

/// Trailing window used to smooth losses before comparing against a target.
pub const SMOOTHING_WINDOW: usize = 100;
/// Consecutive steps above `DIVERGENCE_FACTOR ×` the initial loss that abort a run.
pub const DIVERGENCE_WINDOW: usize = 100;
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adamw,
    /// Plain gradient descent, `W ← W − η g`.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay to learnable quantizer steps too.
    pub decay_steps: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adamw, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, decay_steps: false }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub noise: u64,
}

fn default_alpha() -> f64 {
    0.4
}

fn default_sigma() -> f64 {
    1e-3
}

fn default_weight_bits() -> u32 {
    2
}

fn default_activation_bits() -> u32 {
    16
}

fn default_batch() -> usize {
    32
}

fn default_context() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Total steps `T`.
    pub steps: usize,
    /// Learning rate `η`.
    pub eta: f64,
    /// Re-initialization interval `K`; defaults to `T/4`.
    #[serde(default)]
    pub reinit_interval: Option<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_weight_bits")]
    pub weight_bits: u32,
    #[serde(default = "default_activation_bits")]
    pub activation_bits: u32,
    /// Overrides the per-bit-width default quantizer (e.g. ternary at 2 bits).
    #[serde(default)]
    pub quantizer: Option<QuantKind>,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub hadamard: bool,
    /// Linear warmup length in steps; 0 keeps the rate constant.
    #[serde(default)]
    pub warmup: usize,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_context")]
    pub context: usize,
}

impl TrainConfig {
    pub fn new(steps: usize, eta: f64) -> Self {
        Self {
            steps,
            eta,
            reinit_interval: None,
            alpha: default_alpha(),
            sigma: default_sigma(),
            weight_bits: default_weight_bits(),
            activation_bits: default_activation_bits(),
            quantizer: None,
            granularity: Granularity::PerTensor,
            optimizer: OptimizerConfig::default(),
            seeds: Seeds::default(),
            hadamard: false,
            warmup: 0,
            grad_clip: None,
            batch: default_batch(),
            context: default_context(),
        }
    }

    /// The straight-through baseline: no noise, no re-initialization.
    pub fn baseline(mut self) -> Self {
        self.sigma = 0.0;
        self.alpha = 0.0;
        self
    }

    pub fn interval(&self) -> usize {
        self.reinit_interval.unwrap_or((self.steps / 4).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(WinqError::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta {} must be positive", self.eta));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma {} must be non-negative", self.sigma));
        }
        if self.interval() == 0 {
            return bad("reinit_interval must be at least 1".into());
        }
        if self.batch == 0 || self.context == 0 {
            return bad("batch and context must be positive".into());
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps < 0.0 || o.weight_decay < 0.0 {
            return bad("optimizer betas must lie in [0, 1) and eps, weight_decay be non-negative".into());
        }
        check_activation_bits(self.activation_bits)?;
        self.weight_spec().map(|_| ())
    }

    pub fn weight_spec(&self) -> Result<Option<QuantizerSpec>> {
        let spec = match self.quantizer {
            Some(QuantKind::Binary) => Some(QuantizerSpec::binary()),
            Some(QuantKind::Ternary) => Some(QuantizerSpec::ternary()),
            Some(kind) => Some(QuantizerSpec::new(kind, self.weight_bits)?),
            None => QuantizerSpec::for_bits(self.weight_bits)?,
        };
        Ok(spec.map(|s| s.with_granularity(self.granularity)))
    }

    pub fn quant_config(&self) -> Result<QuantConfig> {
        Ok(QuantConfig {
            weights: self.weight_spec()?,
            activation_bits: self.activation_bits,
            hadamard: self.hadamard,
            ste: SteMode::ClipMasked,
            frozen: None,
        })
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        if self.warmup == 0 {
            self.eta
        } else {
            self.eta * (step as f64 / self.warmup as f64).min(1.0)
        }
    }
}

/// AdamW moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One AdamW update with decoupled weight decay on the coordinates where
/// `decay` is true (all coordinates when `decay` is empty).
pub fn adamw_step(state: &mut OptimizerState, params: &mut [f64], grad: &[f64], lr: f64, cfg: &OptimizerConfig, decay: &[bool]) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != params.len() {
        return Err(WinqError::Shape {
            context: "optimizer step".into(),
            expected: vec![params.len()],
            actual: vec![grad.len(), state.m.len()],
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let shrink = 1.0 - lr * cfg.weight_decay;
    for i in 0..params.len() {
        if cfg.weight_decay != 0.0 && decay.get(i).copied().unwrap_or(true) {
            params[i] *= shrink;
        }
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64, cfg: &OptimizerConfig, decay: &[bool]) {
    let shrink = 1.0 - lr * cfg.weight_decay;
    for i in 0..params.len() {
        if cfg.weight_decay != 0.0 && decay.get(i).copied().unwrap_or(true) {
            params[i] *= shrink;
        }
        params[i] -= lr * grad[i];
    }
}

/// `W ← (1−α)W + αQ(W)` on every quantized tensor, using the grids currently
/// in force under `quant` (held ones if `quant.frozen` is set). With Hadamard
/// on, the interpolation happens in the rotated domain and is rotated back.
pub fn reinit_interpolate(params: &ParamVector, alpha: f64, quant: &QuantConfig) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(WinqError::Argument(format!("interpolation alpha {alpha} outside [0, 1]")));
    }
    let Some(spec) = quant.weights else { return Ok(params.clone()) };
    let grids = quant.current_grids(params)?;
    let mut out = params.clone();
    for e in params.layout().entries().iter().filter(|e| e.quantized) {
        let cols = *e.shape.last().unwrap_or(&1);
        let mut w = params.slice(&e.name).expect("layout entry").to_vec();
        if quant.hadamard {
            fwht_rows(&mut w, cols);
        }
        let q = quantize_grouped(&w, &grids[&e.name], &spec);
        let mut mixed: Vec<f64> = w.iter().zip(&q).map(|(&x, &qx)| (1.0 - alpha) * x + alpha * qx).collect();
        if quant.hadamard {
            fwht_rows(&mut mixed, cols);
        }
        out.slice_mut(&e.name).expect("layout entry").copy_from_slice(&mixed);
    }
    Ok(out)
}

/// `‖Q(W) − W‖ / ‖W‖` over all quantized tensors (rotated domain under
/// Hadamard, which has the same norms).
pub fn quant_error_rel(params: &ParamVector, quant: &QuantConfig) -> Result<f64> {
    let Some(spec) = quant.weights else { return Ok(0.0) };
    let grids = quant.current_grids(params)?;
    let (mut err, mut norm) = (0.0, 0.0);
    for e in params.layout().entries().iter().filter(|e| e.quantized) {
        let mut w = params.slice(&e.name).expect("layout entry").to_vec();
        if quant.hadamard {
            fwht_rows(&mut w, *e.shape.last().unwrap_or(&1));
        }
        let q = quantize_grouped(&w, &grids[&e.name], &spec);
        err += q.iter().zip(&w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        norm += w.iter().map(|x| x * x).sum::<f64>();
    }
    Ok(if norm == 0.0 { 0.0 } else { (err / norm).sqrt() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    None,
    Reinit,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_rel_norm: f64,
    pub quant_err_rel: f64,
    pub lr: f64,
    pub event: Event,
}

/// Quantized loss on the step's batch just before and after a re-init.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReinitReport {
    pub step: usize,
    pub loss_before: f64,
    pub loss_after: f64,
}

impl ReinitReport {
    pub fn relative_change(&self) -> f64 {
        (self.loss_after - self.loss_before).abs() / self.loss_before.abs().max(f64::MIN_POSITIVE)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<StepRecord>,
    pub reinits: Vec<ReinitReport>,
}

impl RunMetrics {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn final_smoothed_loss(&self) -> Option<f64> {
        smoothed_losses(&self.losses(), SMOOTHING_WINDOW).last().copied()
    }

    /// One JSON object per step.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("plain record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Trailing mean over up to `window` values ending at each index.
pub fn smoothed_losses(losses: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..losses.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// First 1-based step whose trailing-mean loss is at or below `target`.
pub fn steps_to_loss(losses: &[f64], target: f64, window: usize) -> Option<usize> {
    smoothed_losses(losses, window).iter().position(|&l| l <= target).map(|i| i + 1)
}

/// Training state a run can be resumed or checkpointed from.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ParamVector,
    pub optimizer: OptimizerState,
    pub metrics: RunMetrics,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// A non-finite value inside a training step means the run blew up.
fn blown_up(e: WinqError, step: usize) -> WinqError {
    match e {
        WinqError::NonFinite { .. } => WinqError::NonFiniteGradient { step },
        other => other,
    }
}

/// Prepare the parameter vector for `config`: attaches learnable step
/// parameters when the quantizer needs them and they are missing.
pub fn prepare_params(params: &ParamVector, config: &TrainConfig) -> Result<ParamVector> {
    match config.weight_spec()? {
        Some(spec) if spec.is_learnable() => {
            let has_steps = params.layout().entries().iter().any(|e| e.kind == ParamKind::Step);
            if has_steps {
                Ok(params.clone())
            } else {
                attach_learnable_steps(params, &spec)
            }
        }
        _ => Ok(params.clone()),
    }
}

/// The training loop. Each step draws `U ~ N(0, σ²)` over quantized weights,
/// takes the straight-through gradient at `Q(W + U)`, applies the optimizer
/// to `W`, and at steps `≡ 0 (mod K)` re-initializes toward the grid.
/// Logged losses are the unperturbed quantized loss before the update.
pub fn winq_train(graph: &Graph, params0: &ParamVector, corpus: &SyntheticCorpus, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let quant = config.quant_config()?;
    let mut params = prepare_params(params0, config)?;
    let layout = params.layout().clone();
    let n = params.len();
    let noise_mask = layout.quantized_mask();
    let decay_mask = layout.coordinate_mask(|e| config.optimizer.decay_steps || e.kind != ParamKind::Step);
    let mut state = OptimizerState::new(n);
    let mut sampler = BatchSampler::new(corpus, corpus.train_region(), config.batch, config.context, config.seeds.data)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seeds.noise);
    let noise = Normal::new(0.0, config.sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let interval = config.interval();

    let mut metrics = RunMetrics::default();
    let mut initial_loss = None;
    let mut above = 0usize;

    for step in 1..=config.steps {
        let batch = sampler.next_batch(corpus);
        let (loss, mut grad) = if config.sigma > 0.0 {
            let mut perturbed = params.as_slice().to_vec();
            for (x, &m) in perturbed.iter_mut().zip(&noise_mask) {
                if m {
                    *x += noise.sample(&mut noise_rng);
                }
            }
            let (_, g) = graph.grad_with(&layout, &perturbed, &batch, &quant).map_err(|e| blown_up(e, step))?;
            (graph.loss(&params, &batch, &quant).map_err(|e| blown_up(e, step))?, g)
        } else {
            graph.loss_and_grad(&params, &batch, &quant).map_err(|e| blown_up(e, step))?
        };
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(WinqError::NonFiniteGradient { step });
        }
        if let Some(clip) = config.grad_clip {
            let gn = norm(&grad);
            if gn > clip {
                let s = clip / gn;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }

        let init = *initial_loss.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * init {
            above += 1;
            if above >= DIVERGENCE_WINDOW {
                return Err(WinqError::Diverged { step, loss, threshold: DIVERGENCE_FACTOR * init, window: DIVERGENCE_WINDOW });
            }
        } else {
            above = 0;
        }

        let wn = norm(params.as_slice());
        let grad_rel_norm = if wn == 0.0 { 0.0 } else { norm(&grad) / wn };
        let quant_err_rel = quant_error_rel(&params, &quant)?;
        let lr = config.learning_rate(step);
        match config.optimizer.kind {
            OptimizerKind::Adamw => adamw_step(&mut state, params.as_mut_slice(), &grad, lr, &config.optimizer, &decay_mask)?,
            OptimizerKind::Sgd => {
                sgd_step(params.as_mut_slice(), &grad, lr, &config.optimizer, &decay_mask);
                state.step += 1;
            }
        }

        let mut event = Event::None;
        if config.alpha > 0.0 && step % interval == 0 {
            let loss_before = graph.loss(&params, &batch, &quant)?;
            params = reinit_interpolate(&params, config.alpha, &quant)?;
            let loss_after = graph.loss(&params, &batch, &quant)?;
            metrics.reinits.push(ReinitReport { step, loss_before, loss_after });
            event = Event::Reinit;
        }
        metrics.records.push(StepRecord { step, loss, grad_rel_norm, quant_err_rel, lr, event });
    }
    Ok(TrainOutcome { params, optimizer: state, metrics })
}

/// [`winq_train`] with the Hadamard rotation on both operands of every
/// quantized matmul and re-initialization in the rotated domain.
pub fn winq_train_hadamard(graph: &Graph, params0: &ParamVector, corpus: &SyntheticCorpus, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut cfg = config.clone();
    cfg.hadamard = true;
    winq_train(graph, params0, corpus, &cfg)
}

/// Full-precision warm start: `steps` AdamW steps at rate `eta`, no noise and
/// no re-initialization.
pub fn pretrain(graph: &Graph, params0: &ParamVector, corpus: &SyntheticCorpus, base: &TrainConfig, steps: usize) -> Result<ParamVector> {
    if steps == 0 {
        return Ok(params0.clone());
    }
    let mut cfg = base.clone().baseline();
    cfg.steps = steps;
    cfg.weight_bits = 16;
    cfg.activation_bits = 16;
    cfg.quantizer = None;
    cfg.hadamard = false;
    cfg.warmup = 0;
    // A separate data stream so the QAT run does not replay the same batches.
    cfg.seeds.data = base.seeds.data.wrapping_add(0x5052_4554_5241_494e);
    Ok(winq_train(graph, params0, corpus, &cfg)?.params)
}
