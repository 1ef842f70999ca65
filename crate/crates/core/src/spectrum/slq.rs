use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{lanczos_tridiagonalize, SymmetricOperator};
use crate::error::{Result, WinqError};

fn default_probes() -> usize {
    50
}

fn default_steps() -> usize {
    40
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlqConfig {
    /// Number of probe vectors `m`.
    #[serde(default = "default_probes")]
    pub probes: usize,
    /// Lanczos steps per probe `k`.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SlqConfig {
    fn default() -> Self {
        Self { probes: default_probes(), steps: default_steps(), seed: 0 }
    }
}

/// Discrete spectral density: `(θ, w)` nodes from every probe, each probe
/// weighted `1/m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEstimate {
    pub nodes: Vec<(f64, f64)>,
    pub probes: usize,
    pub steps: usize,
    pub seed: u64,
    pub provenance: String,
    /// Unscaled per-probe nodes (weights sum to one per probe).
    pub per_probe: Vec<Vec<(f64, f64)>>,
}

impl SpectrumEstimate {
    pub fn total_mass(&self) -> f64 {
        self.nodes.iter().map(|n| n.1).sum()
    }

    /// `Σ w θᵖ`, an estimate of `tr(Aᵖ)/d`.
    pub fn moment(&self, p: i32) -> f64 {
        self.nodes.iter().map(|&(t, w)| w * t.powi(p)).sum()
    }

    /// The same moment computed from each probe separately.
    pub fn probe_moments(&self, p: i32) -> Vec<f64> {
        self.per_probe.iter().map(|nodes| nodes.iter().map(|&(t, w)| w * t.powi(p)).sum()).collect()
    }

    /// Monte-Carlo standard error of [`Self::moment`] from the probe spread.
    pub fn moment_std_error(&self, p: i32) -> f64 {
        let xs = self.probe_moments(p);
        let m = xs.len() as f64;
        if xs.len() < 2 {
            return f64::INFINITY;
        }
        let mean = xs.iter().sum::<f64>() / m;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0);
        (var / m).sqrt()
    }

    /// CSV with header `theta,weight`, one row per node.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta,weight\n");
        for (t, w) in &self.nodes {
            out.push_str(&format!("{t},{w}\n"));
        }
        out
    }
}

/// Rademacher vector for probe `index`: its own ChaCha stream under `seed`,
/// so probes are independent of evaluation order.
pub fn rademacher_probe(dim: usize, seed: u64, index: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    (0..dim).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// Stochastic Lanczos quadrature: `m` normalized Rademacher probes, `k`
/// Lanczos steps each, Ritz values weighted by squared first eigenvector
/// components. Probes run in parallel; the result does not depend on the
/// thread count.
pub fn slq_estimate<F, O>(op: &O, cfg: &SlqConfig) -> Result<SpectrumEstimate>
where
    F: Float + Send + Sync,
    O: SymmetricOperator<F> + ?Sized,
{
    if cfg.probes == 0 || cfg.steps == 0 {
        return Err(WinqError::Argument(format!("SLQ needs m ≥ 1 and k ≥ 1, got m={} k={}", cfg.probes, cfg.steps)));
    }
    let d = op.dim();
    if d == 0 {
        return Err(WinqError::Argument("operator has dimension 0".into()));
    }
    let per_probe: Vec<Vec<(f64, f64)>> = (0..cfg.probes)
        .into_par_iter()
        .map(|j| -> Result<Vec<(f64, f64)>> {
            let scale = 1.0 / (d as f64).sqrt();
            let probe: Vec<F> = rademacher_probe(d, cfg.seed, j).into_iter().map(|x| F::from(x * scale).expect("float")).collect();
            let t = lanczos_tridiagonalize(op, &probe, cfg.steps)?;
            let (theta, w) = t.ritz()?;
            Ok(theta.iter().zip(&w).map(|(&a, &b)| (a.to_f64().expect("finite"), b.to_f64().expect("finite"))).collect())
        })
        .collect::<Result<_>>()?;
    let inv_m = 1.0 / cfg.probes as f64;
    let nodes = per_probe.iter().flat_map(|p| p.iter().map(|&(t, w)| (t, w * inv_m))).collect();
    Ok(SpectrumEstimate { nodes, probes: cfg.probes, steps: cfg.steps, seed: cfg.seed, provenance: op.describe(), per_probe })
}
