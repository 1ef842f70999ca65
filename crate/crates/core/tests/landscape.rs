use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use winq_core::autodiff::{Graph, GraphBuilder};
use winq_core::data::{generate_corpus, Batch, BatchSampler};
use winq_core::landscape::*;
use winq_core::model::{build_model, ModelConfig};
use winq_core::quant::{attach_learnable_steps, QuantConfig, QuantKind, QuantizerSpec};
use winq_core::spectrum::{slq_estimate, spectrum_stats, ste_hessian_operator, SlqConfig};
use winq_core::tensor::{ParamKind, ParamLayout, ParamVector};
use winq_core::Tensor64;

#[test]
fn alpha_gamma_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let eta = 10f64.powf(rng.random_range(-5.0..0.0));
        let gamma = 10f64.powf(rng.random_range(-3.0..3.0));
        let back = gamma_from_alpha(eta, alpha_gamma_map(eta, gamma).unwrap()).unwrap();
        assert!((back - gamma).abs() <= 1e-12 * gamma.max(1.0), "eta={eta} gamma={gamma} back={back}");
    }
}

#[test]
fn prox_hand_example() {
    let gamma = gamma_from_alpha(0.1, 0.4).unwrap();
    let out = prox_step(&[0.5], &ProxParams::new(0.1, gamma, vec![1.0]).unwrap()).unwrap();
    assert!((out[0] - 0.7).abs() <= 1e-16 * 8.0);
}

fn single(w: Vec<f64>) -> ParamVector {
    let mut layout = ParamLayout::new();
    layout.push("w", vec![1, w.len()], ParamKind::Weight).unwrap();
    ParamVector::new(layout, w).unwrap()
}

#[test]
fn prox_equals_interpolation_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let specs = [
        QuantizerSpec::binary(),
        QuantizerSpec::ternary(),
        QuantizerSpec::new(QuantKind::SymmetricMinmax, 2).unwrap(),
        QuantizerSpec::new(QuantKind::AsymmetricMinmax, 3).unwrap(),
        QuantizerSpec::new(QuantKind::SymmetricMinmax, 4).unwrap(),
    ];
    for trial in 0..200 {
        let n = rng.random_range(1..64);
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let eta = 10f64.powf(rng.random_range(-4.0..0.0));
        let alpha = if trial == 0 { 0.0 } else { rng.random_range(0.0..0.999) };
        let quant = QuantConfig::weights(specs[trial % specs.len()]);
        let r = verify_prox_equivalence(&single(w), &quant, eta, alpha).unwrap();
        assert!(r.max_deviation <= 1e-12, "trial {trial}: {}", r.max_deviation);
        assert!(r.cell_exits.is_empty(), "trial {trial}: {:?}", r.cell_exits);
        if alpha == 0.0 {
            assert_eq!(r.max_deviation, 0.0);
        }
    }
    let big: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>() - 0.5).collect();
    let r = verify_prox_equivalence(&single(big), &QuantConfig::weights(specs[2]), 0.01, 0.37).unwrap();
    assert!(r.max_deviation <= 1e-12);
    assert_eq!(r.checked, 10_000);
}

#[test]
fn interpolation_never_crosses_a_cell_boundary() {
    let spec = QuantizerSpec::new(QuantKind::SymmetricMinmax, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let w: Vec<f64> = (0..32).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        for alpha in [0.05f64, 0.5, 0.95, 1.0] {
            let r = verify_prox_equivalence(&single(w.clone()), &QuantConfig::weights(spec), 0.1, alpha).unwrap();
            assert!(r.cell_exits.is_empty());
        }
    }
}

fn quadratic(coeffs: &[f64]) -> (Graph, ParamVector) {
    let mut layout = ParamLayout::new();
    layout.push("w", vec![1, coeffs.len()], ParamKind::Weight).unwrap();
    let mut g = GraphBuilder::new(&layout);
    let p = g.param("w").unwrap();
    let q = g.quant_weight(p, "w").unwrap();
    let sq = g.mul(q, q).unwrap();
    let c = g.constant(Tensor64::new(vec![1, coeffs.len()], coeffs.iter().map(|c| 0.5 * c).collect()).unwrap());
    let s = g.mul(sq, c).unwrap();
    let out = g.sum(s).unwrap();
    (g.finish(out).unwrap(), ParamVector::new(layout, vec![0.3, -0.7]).unwrap())
}

#[test]
fn hessian_shift_on_quadratic() {
    let (g, p) = quadratic(&[1.0, 2.0]);
    let batch = Batch::from_windows(&[&[0, 1]]).unwrap();
    let quant = QuantConfig::weights(QuantizerSpec::new(QuantKind::SymmetricMinmax, 4).unwrap());
    let zero = verify_hessian_shift(&g, &p, &batch, &quant, 0.0, None).unwrap();
    assert_eq!((zero.max_entry_error, zero.max_eigenvalue_error), (0.0, 0.0));
    let r = verify_hessian_shift(&g, &p, &batch, &quant, 3.0, None).unwrap();
    assert!(r.max_entry_error <= 1e-12 && r.max_eigenvalue_error <= 1e-12);
}

fn mlp_point(seed: u64, learnable: bool) -> (Graph, ParamVector, Batch, QuantConfig) {
    let cfg = ModelConfig::mlp(1, 8, 8, 8);
    let (g, mut p) = build_model(&cfg, seed).unwrap();
    for x in p.as_mut_slice() {
        *x *= 25.0;
    }
    let corpus = generate_corpus(seed, 8, 3000).unwrap();
    let b = BatchSampler::new(&corpus, corpus.train_region(), 4, 8, seed).unwrap().next_batch(&corpus);
    if learnable {
        let spec = QuantizerSpec::new(QuantKind::LearnableStep, 2).unwrap();
        (g, attach_learnable_steps(&p, &spec).unwrap(), b, QuantConfig::weights(spec))
    } else {
        (g, p, b, QuantConfig::weights(QuantizerSpec::new(QuantKind::SymmetricMinmax, 2).unwrap()))
    }
}

#[test]
fn hessian_shift_on_small_mlp() {
    for (seed, learnable) in [(1, false), (2, true)] {
        let (g, p, b, q) = mlp_point(seed, learnable);
        let r = verify_hessian_shift(&g, &p, &b, &q, 0.5, None).unwrap();
        assert!(r.max_entry_error <= 1e-8, "{r:?}");
        assert!(r.max_eigenvalue_error <= 1e-7, "{r:?}");
    }
}

#[test]
fn sweep_endpoints_and_determinism() {
    let (g, p, b, q) = mlp_point(3, false);
    let slq = SlqConfig { probes: 8, steps: 20, seed: 5 };
    let sweep = interpolation_curvature_sweep(&g, &p, &b, &q, &[1.0, 0.0, 0.5], &slq, 1e-3, GridMode::Frozen, None).unwrap();
    assert_eq!(sweep.rows.iter().map(|r| r.alpha).collect::<Vec<_>>(), vec![0.0, 0.5, 1.0]);

    // α = 0 is the unmodified point.
    let op = ste_hessian_operator(&g, &p, &b, &q, None).unwrap();
    let stats = spectrum_stats(&slq_estimate(&op, &slq).unwrap(), 1e-3).unwrap();
    assert_eq!(sweep.rows[0].max_abs_theta, stats.max_abs);
    assert_eq!(sweep.rows[0].near_zero_mass, stats.near_zero_mass);

    // α = 1 sits on Q(W); with frozen grids the quantized loss is unchanged.
    let base = g.loss(&p, &b, &q).unwrap();
    assert!((sweep.rows[0].loss - base).abs() <= 1e-12 * base);
    assert!((sweep.rows[2].loss - base).abs() <= 1e-9 * base);

    let again = interpolation_curvature_sweep(&g, &p, &b, &q, &[0.0, 0.5, 1.0], &slq, 1e-3, GridMode::Frozen, None).unwrap();
    assert_eq!(sweep, again);

    let csv = sweep.to_csv();
    assert!(csv.starts_with("alpha,max_abs_theta,near_zero_mass,loss\n"));
    assert_eq!(csv.lines().count(), 4);

    let fresh = interpolation_curvature_sweep(&g, &p, &b, &q, &DEFAULT_SWEEP_ALPHAS, &slq, 1e-3, GridMode::Recompute, None).unwrap();
    assert_eq!(fresh.rows.len(), 6);
    assert_eq!(fresh.rows[0].loss_drift, 0.0);
    assert!(fresh.rows.iter().all(|r| r.loss_drift.is_finite()));
    assert!(interpolation_curvature_sweep(&g, &p, &b, &q, &[1.5], &slq, 1e-3, GridMode::Frozen, None).is_err());
}
