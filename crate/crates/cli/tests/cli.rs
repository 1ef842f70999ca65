use std::path::{Path, PathBuf};
use std::process::Command;

use tempfile::TempDir;

use winq_cli::commands::{cmd_compare, cmd_spectrum, cmd_sweep, cmd_train, parse_alphas, CHECKPOINT_FILE, METRICS_FILE};
use winq_cli::error::CliError;
use winq_cli::manifest::{ExperimentManifest, CONFIG_FILE, MANIFEST_FILE};
use winq_cli::verify::{run_verify, Faults};
use winq_core::train::Event;

const BASE: &str = r#"
[model]
family = "mlp"
layers = 1
d_model = 8
vocab = 8
context = 8

[corpus]
seed = 1
length = 5000

[pretrain]
steps = 40

[train]
steps = 60
eta = 0.01
batch = 4
context = 8
TRAIN_EXTRA

[spectrum]
probes = 6
steps = 8
"#;

fn config(dir: &Path, name: &str, train_extra: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, BASE.replace("TRAIN_EXTRA", train_extra)).unwrap();
    p
}

fn winq(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_winq")).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_eta_exits_1_and_names_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, BASE.replace("eta = 0.01\n", "").replace("TRAIN_EXTRA", "")).unwrap();
    let (code, err) = winq(&["train", "--config", s(&cfg), "--out-dir", s(&tmp.path().join("o"))]);
    assert_eq!(code, 1);
    assert!(err.contains("eta"), "{err}");
}

#[test]
fn corrupt_or_mismatched_checkpoint_exits_3() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "c.toml", "");
    let bad = tmp.path().join("bad.winq");
    std::fs::write(&bad, b"WINQCKPT but not really").unwrap();
    let (code, _) = winq(&["spectrum", "--config", s(&cfg), "--checkpoint", s(&bad), "--out-dir", s(&tmp.path().join("o"))]);
    assert_eq!(code, 3);

    // A valid checkpoint for a different model.
    let run = cmd_train(&cfg, &tmp.path().join("t"), None).unwrap();
    drop(run);
    let other = tmp.path().join("other.toml");
    std::fs::write(&other, BASE.replace("d_model = 8", "d_model = 16").replace("TRAIN_EXTRA", "")).unwrap();
    let ckpt = tmp.path().join("t").join(CHECKPOINT_FILE);
    let err = cmd_spectrum(&other, &ckpt, &tmp.path().join("o2"), None, None).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn divergence_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.toml");
    let text = BASE.replace("eta = 0.01", "eta = 50.0").replace("TRAIN_EXTRA", "weight_bits = 16\n\n[train.optimizer]\nkind = \"sgd\"");
    std::fs::write(&cfg, text.replace("steps = 40", "steps = 0")).unwrap();
    let (code, err) = winq(&["train", "--config", s(&cfg), "--out-dir", s(&tmp.path().join("o"))]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn training_is_deterministic_and_logs_events() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "c.toml", "reinit_interval = 25");
    let a = cmd_train(&cfg, &tmp.path().join("a"), None).unwrap();
    let b = cmd_train(&cfg, &tmp.path().join("b"), None).unwrap();
    let read = |d: &str| std::fs::read(tmp.path().join(d).join(METRICS_FILE)).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_eq!(a.manifest.outputs, b.manifest.outputs);

    // floor(60 / 25) = 2 events, at steps 25 and 50.
    let events: Vec<usize> = a.outcome.metrics.records.iter().filter(|r| r.event == Event::Reinit).map(|r| r.step).collect();
    assert_eq!(events, vec![25, 50]);
    let first = std::str::from_utf8(&read("a")).unwrap().lines().next().unwrap().to_string();
    for key in ["\"step\"", "\"loss\"", "\"grad_rel_norm\"", "\"quant_err_rel\"", "\"lr\"", "\"event\""] {
        assert!(first.contains(key), "{first}");
    }

    let c = cmd_train(&cfg, &tmp.path().join("c"), Some(99)).unwrap();
    assert_ne!(c.outcome.metrics.losses(), a.outcome.metrics.losses());
    assert_eq!(c.manifest.seeds.noise, 99);
}

#[test]
fn manifest_rerun_reproduces_every_output() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "c.toml", "");
    let first = cmd_train(&cfg, &tmp.path().join("a"), Some(5)).unwrap();
    let echoed = tmp.path().join("a").join(CONFIG_FILE);
    let second = cmd_train(&echoed, &tmp.path().join("b"), None).unwrap();
    assert_eq!(first.manifest.outputs, second.manifest.outputs);
    assert_eq!(first.manifest.config_digest, second.manifest.config_digest);
    let loaded = ExperimentManifest::load(&tmp.path().join("a").join(MANIFEST_FILE)).unwrap();
    assert!(loaded.stale_outputs(&tmp.path().join("a")).unwrap().is_empty());
    assert_eq!(loaded.experiment_config().unwrap().train.seeds.init, 5);
}

#[test]
fn sweep_rows_and_alpha_handling() {
    let tmp = TempDir::new().unwrap();
    let cfg = config(tmp.path(), "c.toml", "weight_bits = 3\nquantizer = \"symmetric_minmax\"");
    cmd_train(&cfg, &tmp.path().join("t"), None).unwrap();
    let ckpt = tmp.path().join("t").join(CHECKPOINT_FILE);

    let sweep = cmd_sweep(&cfg, &ckpt, &tmp.path().join("w"), Some("0,1"), None, None).unwrap();
    assert_eq!(sweep.result.rows.len(), 2);
    let spec = cmd_spectrum(&cfg, &ckpt, &tmp.path().join("s"), None, None).unwrap();
    let row0 = &sweep.result.rows[0];
    assert_eq!(row0.alpha, 0.0);
    assert!((row0.max_abs_theta - spec.record.stats.max_abs).abs() <= 1e-12 * spec.record.stats.max_abs.max(1.0));
    assert!((row0.near_zero_mass - spec.record.stats.near_zero_mass).abs() <= 1e-12);
    let csv = std::fs::read_to_string(tmp.path().join("w").join("sweep.csv")).unwrap();
    assert!(csv.starts_with("alpha,max_abs_theta,near_zero_mass,loss\n"));
    let spectrum_csv = std::fs::read_to_string(tmp.path().join("s").join("spectrum.csv")).unwrap();
    assert!(spectrum_csv.starts_with("theta,weight\n"));

    let sorted = cmd_sweep(&cfg, &ckpt, &tmp.path().join("w2"), Some("0.6, 0.2,0"), None, None).unwrap();
    assert_eq!(sorted.result.rows.iter().map(|r| r.alpha).collect::<Vec<_>>(), vec![0.0, 0.2, 0.6]);
    let default = cmd_sweep(&cfg, &ckpt, &tmp.path().join("w3"), None, Some(1e-2), None).unwrap();
    assert_eq!(default.result.rows.len(), 6);
    assert_eq!(default.result.tau, 1e-2);

    assert!(matches!(parse_alphas("0,x"), Err(CliError::Usage(_))));
    assert!(parse_alphas("0,1.5").is_err());
    let (code, _) = winq(&["sweep", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out-dir", s(&tmp.path().join("w4")), "--alphas", "a"]);
    assert_eq!(code, 1);
}

#[test]
fn compare_against_itself_and_unreachable_targets() {
    let tmp = TempDir::new().unwrap();
    let base = config(tmp.path(), "b.toml", "sigma = 0.0\nalpha = 0.0");
    let same = cmd_compare(&base, &base, &tmp.path().join("c"), None, None).unwrap();
    assert_eq!(same.record.ratio, Some(1.0));
    assert!(same.record.unreached.is_empty());

    let low = cmd_compare(&base, &base, &tmp.path().join("d"), Some(-1.0), None).unwrap();
    assert_eq!(low.record.ratio, None);
    assert_eq!(low.record.unreached, vec!["baseline".to_string(), "winq".to_string()]);
}

#[test]
fn unfair_comparisons_are_refused() {
    let tmp = TempDir::new().unwrap();
    let base = config(tmp.path(), "b.toml", "sigma = 0.0\nalpha = 0.0");
    let fair = config(tmp.path(), "w.toml", "reinit_interval = 15\n[train.seeds]\nnoise = 4");
    let bits = config(tmp.path(), "x.toml", "weight_bits = 4");
    let eta = tmp.path().join("e.toml");
    std::fs::write(&eta, BASE.replace("eta = 0.01", "eta = 0.02").replace("TRAIN_EXTRA", "")).unwrap();
    assert!(cmd_compare(&base, &fair, &tmp.path().join("ok"), None, None).is_ok());
    for other in [&bits, &eta] {
        assert!(matches!(cmd_compare(&base, other, &tmp.path().join("no"), None, None), Err(CliError::Unfair(_))));
    }
    let (code, err) = winq(&["compare", "--config", s(&base), "--config", s(&eta), "--out-dir", s(&tmp.path().join("no2"))]);
    assert_eq!(code, 1);
    assert!(err.contains("unfair"), "{err}");
}

#[test]
fn verify_passes_and_catches_injected_rounding_fault() {
    let ok = run_verify(Faults::default());
    assert!(ok.passed, "{}", ok.to_text());
    let faulty = run_verify(Faults { half_away_rounding: true });
    assert!(!faulty.passed);
    let failed: Vec<&str> = faulty.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    assert_eq!(failed, vec!["quantize_cross_oracle"]);
    assert_eq!(winq(&["verify", "--fault-half-away-rounding"]).0, 1);
}
