//! Self-checks run by `winq verify`. Each check compares a library result
//! against an independent computation (hand-worked values, a dense oracle,
//! or a separately written loop) on a small deterministic problem.

use serde::{Deserialize, Serialize};

use winq_core::autodiff::{finite_diff_grad, Graph};
use winq_core::checkpoint::Checkpoint;
use winq_core::data::{generate_corpus, Batch, BatchSampler, SyntheticCorpus};
use winq_core::hadamard::{fwht_rows, hadamard_reinit};
use winq_core::landscape::{verify_hessian_shift, verify_prox_equivalence};
use winq_core::model::{build_model, ModelConfig};
use winq_core::quant::{
    attach_learnable_steps, make_grid, quantize, quantize_grouped, QuantConfig, QuantGrid, QuantKind, QuantizerSpec, RoundingMode,
};
use winq_core::spectrum::{
    dense_hessian_oracle, slq_estimate, ste_hessian_operator, DiagonalOperator, LowRankOperator, Shifted, SlqConfig, SymmetricOperator,
};
use winq_core::tensor::ParamVector;
use winq_core::train::{reinit_interpolate, winq_train, OptimizerState, Seeds, TrainConfig};
use winq_core::Result as CoreResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn failed(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }

    pub fn to_text(&self) -> String {
        self.checks
            .iter()
            .map(|c| format!("{} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
            .collect()
    }
}

/// Deliberate defects for checking that the harness notices them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    /// Round ties away from zero instead of to even.
    pub half_away_rounding: bool,
}

impl Faults {
    fn rounding(&self) -> RoundingMode {
        if self.half_away_rounding {
            RoundingMode::HalfAway
        } else {
            RoundingMode::HalfEven
        }
    }
}

type Outcome = CoreResult<(bool, String)>;

pub fn run_verify(faults: Faults) -> VerifyReport {
    let checks: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("quantize_cross_oracle", Box::new(move || quantize_cross_oracle(faults))),
        ("quantize_idempotence", Box::new(move || quantize_idempotence(faults))),
        ("quantize_levels", Box::new(move || quantize_levels(faults))),
        ("gradient_finite_difference", Box::new(gradient_finite_difference)),
        ("hvp_symmetry", Box::new(hvp_symmetry)),
        ("hvp_dense_oracle", Box::new(hvp_dense_oracle)),
        ("slq_constructed_operators", Box::new(slq_constructed_operators)),
        ("prox_identity", Box::new(prox_identity)),
        ("hessian_shift", Box::new(hessian_shift)),
        ("hadamard_involution", Box::new(hadamard_involution)),
        ("hadamard_reinit_consistency", Box::new(hadamard_reinit_consistency)),
        ("baseline_reduction", Box::new(baseline_reduction)),
        ("reinit_contraction", Box::new(reinit_contraction)),
        ("checkpoint_round_trip", Box::new(checkpoint_round_trip)),
    ];
    let checks: Vec<CheckResult> = checks
        .into_iter()
        .map(|(name, f)| {
            let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
            CheckResult { name: name.to_string(), passed, detail }
        })
        .collect();
    VerifyReport { passed: checks.iter().all(|c| c.passed), checks }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Smooth deterministic test vector with entries in `[-scale, scale]`.
fn wave(n: usize, phase: f64, scale: f64) -> Vec<f64> {
    (0..n).map(|i| scale * (1.7 * i as f64 + phase).sin()).collect()
}

fn small_mlp(seed: u64, scale: f64) -> CoreResult<(Graph, ParamVector, Batch)> {
    let (g, mut p) = build_model(&ModelConfig::mlp(1, 8, 8, 8), seed)?;
    for x in p.as_mut_slice() {
        *x *= scale;
    }
    let c = generate_corpus(seed + 1, 8, 3000)?;
    let b = BatchSampler::new(&c, c.train_region(), 4, 8, seed)?.next_batch(&c);
    Ok((g, p, b))
}

fn quantize_cross_oracle(faults: Faults) -> Outcome {
    let r = faults.rounding();
    let two = QuantizerSpec::new(QuantKind::LearnableStep, 2)?.with_rounding(r);
    let four = QuantizerSpec::new(QuantKind::LearnableStep, 4)?.with_rounding(r);
    let bin = QuantizerSpec::binary().with_rounding(r);
    let cases: [(&str, Vec<f64>, Vec<f64>); 3] = [
        ("clip", quantize(&[0.4, -1.6, 2.3], &QuantGrid::with_scale(&two, 1.0), &two), vec![0.0, -2.0, 1.0]),
        ("ties", quantize(&[0.5, 1.5, 2.5], &QuantGrid::with_scale(&four, 1.0), &four), vec![0.0, 2.0, 2.0]),
        ("binary", {
            let w = [0.5, -0.2, 0.3];
            quantize(&w, &make_grid(&w, &bin)?, &bin)
        }, vec![1.0 / 3.0, -1.0 / 3.0, 1.0 / 3.0]),
    ];
    let bad: Vec<String> = cases
        .iter()
        .filter(|(_, got, want)| max_abs_diff(got, want) > 1e-12)
        .map(|(n, got, want)| format!("{n}: got {got:?}, want {want:?}"))
        .collect();
    Ok((bad.is_empty(), if bad.is_empty() { "3 hand-worked cases match".into() } else { bad.join("; ") }))
}

fn sample_specs(r: RoundingMode) -> CoreResult<Vec<QuantizerSpec>> {
    let mut specs = vec![QuantizerSpec::binary(), QuantizerSpec::ternary()];
    for kind in [QuantKind::SymmetricMinmax, QuantKind::AsymmetricMinmax, QuantKind::LearnableStep] {
        for bits in [2, 3, 4, 8] {
            specs.push(QuantizerSpec::new(kind, bits)?);
        }
    }
    Ok(specs.into_iter().map(|s| s.with_rounding(r)).collect())
}

fn quantize_idempotence(faults: Faults) -> Outcome {
    let w = wave(257, 0.3, 1.3);
    let mut worst = 0.0f64;
    for spec in sample_specs(faults.rounding())? {
        let grid = make_grid(&w, &spec)?;
        let q = quantize(&w, &grid, &spec);
        worst = worst.max(max_abs_diff(&quantize(&q, &grid, &spec), &q));
    }
    Ok((worst <= 1e-12, format!("max |Q(Q(w)) - Q(w)| = {worst:e}")))
}

fn quantize_levels(faults: Faults) -> Outcome {
    let w = wave(1000, 1.1, 2.0);
    for spec in sample_specs(faults.rounding())? {
        let grid = make_grid(&w, &spec)?;
        let mut q = quantize(&w, &grid, &spec);
        let (lo, hi) = match spec.kind {
            QuantKind::Binary | QuantKind::Ternary => (-grid.a, grid.a),
            _ => (grid.lo(), grid.hi()),
        };
        if q.iter().any(|&x| x < lo - 1e-12 || x > hi + 1e-12) {
            return Ok((false, format!("{spec:?}: value outside [{lo}, {hi}]")));
        }
        q.sort_by(f64::total_cmp);
        q.dedup();
        if q.len() > spec.max_levels() {
            return Ok((false, format!("{spec:?}: {} levels > {}", q.len(), spec.max_levels())));
        }
    }
    Ok((true, "level counts and ranges within bounds for 14 quantizers".into()))
}

fn gradient_finite_difference() -> Outcome {
    let (g, p, b) = small_mlp(1, 1.0)?;
    let fp = QuantConfig::default();
    let (_, grad) = g.loss_and_grad(&p, &b, &fp)?;
    let fd = finite_diff_grad(|x| g.loss(&p.with_data(x.to_vec())?, &b, &fp), p.as_slice(), 1e-5)?;
    let err = (0..grad.len()).map(|i| (grad[i] - fd[i]).powi(2)).sum::<f64>().sqrt();
    let rel = err / dot(&fd, &fd).sqrt().max(1e-5);
    Ok((rel <= 1e-4, format!("relative error {rel:e} over {} coordinates", grad.len())))
}

fn hvp_symmetry() -> Outcome {
    let (g, p, b) = small_mlp(2, 25.0)?;
    let spec = QuantizerSpec::new(QuantKind::LearnableStep, 2)?;
    let p = attach_learnable_steps(&p, &spec)?;
    let op = ste_hessian_operator(&g, &p, &b, &QuantConfig::weights(spec), None)?;
    let (u, v) = (wave(p.len(), 0.2, 1.0), wave(p.len(), 2.9, 1.0));
    let (uhv, vhu) = (dot(&u, &op.apply(&v)?), dot(&v, &op.apply(&u)?));
    let rel = (uhv - vhu).abs() / uhv.abs().max(vhu.abs()).max(1e-12);
    Ok((rel <= 1e-8, format!("|u.Hv - v.Hu| relative {rel:e}")))
}

fn hvp_dense_oracle() -> Outcome {
    let (g, p, b) = small_mlp(3, 25.0)?;
    let q = QuantConfig::weights(QuantizerSpec::new(QuantKind::SymmetricMinmax, 3)?);
    let op = ste_hessian_operator(&g, &p, &b, &q, None)?;
    let dense = dense_hessian_oracle(&op)?;
    let v = wave(dense.dim, 0.7, 1.0);
    let hv = op.apply(&v)?;
    let row: Vec<f64> = (0..dense.dim).map(|i| (0..dense.dim).map(|j| dense.get(i, j) * v[j]).sum()).collect();
    let scale = hv.iter().fold(1e-12f64, |m, x| m.max(x.abs()));
    let err = max_abs_diff(&row, &hv) / scale;
    let ok = err <= 1e-6 && dense.asymmetry <= 1e-6;
    Ok((ok, format!("product error {err:e}, asymmetry {:e}, dim {}", dense.asymmetry, dense.dim)))
}

/// Operators whose spectra are known exactly. Rademacher probes give every
/// axis-aligned eigenvector weight `1/d`, so moments are recovered exactly.
fn slq_constructed_operators() -> Outcome {
    let d = 60;
    let cfg = SlqConfig { probes: 20, steps: 30, seed: 7 };
    let levels: Vec<f64> = (0..d).map(|i| [-2.0, 0.5, 3.0][i % 3]).collect();
    let diag = DiagonalOperator(levels.clone());
    let shifted = Shifted { inner: &diag, shift: 1.5 };
    let axes = |i: usize| (0..d).map(|j| if j == i { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let low = LowRankOperator::new(d, vec![(4.0, axes(0)), (-1.0, axes(7)), (2.5, axes(30))])?;
    let mut worst = 0.0f64;
    let cases: [(&dyn SymmetricOperator, Vec<f64>); 3] = [
        (&diag, levels.clone()),
        (&shifted, levels.iter().map(|x| x + 1.5).collect()),
        (&low, (0..d).map(|i| match i { 0 => 4.0, 7 => -1.0, 30 => 2.5, _ => 0.0 }).collect()),
    ];
    for (op, eig) in cases {
        let est = slq_estimate(op, &cfg)?;
        for p in 1..=3 {
            let want = eig.iter().map(|l| l.powi(p)).sum::<f64>() / d as f64;
            worst = worst.max((est.moment(p) - want).abs() / want.abs().max(1e-12));
        }
    }
    Ok((worst <= 0.05, format!("worst relative moment error {worst:e}")))
}

fn prox_identity() -> Outcome {
    let (_, p, _) = small_mlp(4, 25.0)?;
    let q = QuantConfig::weights(QuantizerSpec::new(QuantKind::SymmetricMinmax, 2)?);
    let mut worst = 0.0f64;
    for (eta, alpha) in [(1e-3, 0.4), (0.1, 0.2), (1.0, 0.9)] {
        let r = verify_prox_equivalence(&p, &q, eta, alpha)?;
        if !r.cell_exits.is_empty() {
            return Ok((false, format!("{} coordinates left their cell at alpha {alpha}", r.cell_exits.len())));
        }
        worst = worst.max(r.max_deviation);
    }
    Ok((worst <= 1e-12, format!("max |prox - interpolation| = {worst:e}")))
}

fn hessian_shift() -> Outcome {
    let (g, p, b) = small_mlp(5, 25.0)?;
    let q = QuantConfig::weights(QuantizerSpec::new(QuantKind::SymmetricMinmax, 3)?);
    let r = verify_hessian_shift(&g, &p, &b, &q, 0.7, None)?;
    let ok = r.max_entry_error <= 1e-7 && r.max_eigenvalue_error <= 1e-7;
    Ok((ok, format!("entry error {:e}, eigenvalue error {:e}", r.max_entry_error, r.max_eigenvalue_error)))
}

fn hadamard_involution() -> Outcome {
    let mut worst = 0.0f64;
    for cols in [1, 2, 8, 64] {
        let x = wave(3 * cols, 0.4, 1.0);
        let mut y = x.clone();
        fwht_rows(&mut y, cols);
        let norm_gap = (dot(&x, &x) - dot(&y, &y)).abs();
        fwht_rows(&mut y, cols);
        worst = worst.max(max_abs_diff(&x, &y)).max(norm_gap);
    }
    Ok((worst <= 1e-12, format!("max |HHx - x| or norm change {worst:e}")))
}

fn hadamard_reinit_consistency() -> Outcome {
    let (_, p, _) = small_mlp(6, 25.0)?;
    let spec = QuantizerSpec::new(QuantKind::SymmetricMinmax, 3)?;
    let rotated = QuantConfig::weights(spec).with_hadamard(true);
    let mut worst = 0.0f64;
    for alpha in [0.0, 0.4, 1.0] {
        let a = hadamard_reinit(&p, alpha, &spec)?;
        let b = reinit_interpolate(&p, alpha, &rotated)?;
        worst = worst.max(max_abs_diff(a.as_slice(), b.as_slice()));
    }
    Ok((worst <= 1e-12, format!("max difference between rotated re-init paths {worst:e}")))
}

fn toy_run() -> CoreResult<(Graph, ParamVector, SyntheticCorpus, TrainConfig)> {
    let (g, p) = build_model(&ModelConfig::mlp(1, 8, 8, 8), 11)?;
    let corpus = generate_corpus(12, 8, 4000)?;
    let mut cfg = TrainConfig::new(25, 1e-2);
    cfg.batch = 4;
    cfg.context = 8;
    cfg.seeds = Seeds { init: 11, data: 13, noise: 14 };
    Ok((g, p, corpus, cfg))
}

/// With no noise and no re-initialization the loop is plain straight-through
/// Adam; compare against one written out here.
fn baseline_reduction() -> Outcome {
    let (g, p0, corpus, cfg) = toy_run()?;
    let cfg = cfg.baseline();
    let out = winq_train(&g, &p0, &corpus, &cfg)?;

    let spec = QuantizerSpec::new(QuantKind::LearnableStep, cfg.weight_bits)?;
    let quant = QuantConfig::weights(spec);
    let mut p = attach_learnable_steps(&p0, &spec)?;
    let mut sampler = BatchSampler::new(&corpus, corpus.train_region(), cfg.batch, cfg.context, cfg.seeds.data)?;
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v) = (vec![0.0; p.len()], vec![0.0; p.len()]);
    for t in 1..=cfg.steps {
        let batch = sampler.next_batch(&corpus);
        let (_, grad) = g.loss_and_grad(&p, &batch, &quant)?;
        let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
        for (i, w) in p.as_mut_slice().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            *w -= cfg.eta * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
    let same = out.params.as_slice() == p.as_slice();
    let gap = max_abs_diff(out.params.as_slice(), p.as_slice());
    Ok((same && out.metrics.reinits.is_empty(), format!("{} steps, max parameter difference {gap:e}", cfg.steps)))
}

fn reinit_contraction() -> Outcome {
    let (g, p0, corpus, cfg) = toy_run()?;
    let trained = winq_train(&g, &p0, &corpus, &cfg.clone().baseline())?.params;
    let quant = cfg.quant_config()?;
    let distance = |p: &ParamVector| -> CoreResult<f64> {
        let spec = quant.weights.expect("quantized config");
        let grids = quant.current_grids(p)?;
        let mut s = 0.0;
        for e in p.layout().entries().iter().filter(|e| e.quantized) {
            let w = p.slice(&e.name).expect("layout entry");
            let q = quantize_grouped(w, &grids[&e.name], &spec);
            s += w.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(s.sqrt())
    };
    let before = distance(&trained)?;
    let mut worst = 0.0f64;
    for alpha in [0.1, 0.4, 0.7] {
        let after = distance(&reinit_interpolate(&trained, alpha, &quant)?)?;
        worst = worst.max((after - (1.0 - alpha) * before).abs() / before.max(1e-300));
    }
    Ok((worst <= 1e-10, format!("relative deviation from (1-alpha) contraction {worst:e}")))
}

fn checkpoint_round_trip() -> Outcome {
    let (_, p, _) = small_mlp(7, 1.0)?;
    let mut opt = OptimizerState::new(p.len());
    for (i, x) in opt.m.iter_mut().enumerate() {
        *x = (i as f64).sin() * 1e-3;
    }
    opt.step = 17;
    let ckpt = Checkpoint::new(p, Some(opt), serde_json::json!({ "step": 17 }));
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::from_bytes(&bytes)?;
    let ok = back == ckpt && back.to_bytes() == bytes && Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err();
    Ok((ok, format!("{} bytes, bit-exact reload and truncation rejected", bytes.len())))
}
