use std::path::Path;
use std::process::Command;

use apn_core::harness::gradcheck::{check_case, gradcheck, Scope};
use apn_core::harness::{self, ExperimentConfig, ReproRecord, Variant, METRICS_HEADER};
use apn_core::pyramid::PyramidConfig;
use apn_core::rng::rng_from_seed;
use apn_core::synthdg::{generate_benchmark, Benchmark, BenchmarkSpec};
use apn_core::{checkpoint, ApnError, DType, Tensor};

fn tiny(variant: Variant, gammas: Vec<f64>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        variant,
        gammas,
        epochs: 2,
        batch_size: 4,
        seed: 5,
        benchmark: BenchmarkSpec { num_classes: 3, clips_per_pair: 5, ..BenchmarkSpec::default() },
        ..ExperimentConfig::default()
    };
    cfg.model.num_classes = 3;
    cfg.model.feature_dim = 8;
    cfg.model.head_count = 2;
    cfg.model.encoder_hidden = 16;
    cfg.ada.t_max = 1;
    cfg
}

fn bench(cfg: &ExperimentConfig) -> Benchmark {
    generate_benchmark(&cfg.benchmark).unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn erm_and_apn_train_identical_parameters() {
    let erm = tiny(Variant::Erm, vec![0.1]);
    let b = bench(&erm);
    let a = harness::run_experiment_on(&erm, &b, None).unwrap();
    let p = harness::run_experiment_on(&ExperimentConfig { variant: Variant::Apn, ..erm.clone() }, &b, None).unwrap();
    assert!(a.members[0].params.bitwise_eq(&p.members[0].params));
}

#[test]
fn gamma_ensemble_writes_one_checkpoint_per_member() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Variant::ApnAdaStar, vec![0.001, 0.01, 0.1, 1.0]);
    let b = bench(&cfg);
    let r = harness::run_experiment_on(&cfg, &b, Some(dir.path())).unwrap();
    assert_eq!(r.members.len(), 4);
    let files = std::fs::read_dir(dir.path().join("checkpoints")).unwrap().count();
    assert_eq!(files, 4);
    let ensemble: Vec<_> = r.rows.iter().filter(|row| row.member == "ensemble").collect();
    assert_eq!(ensemble.len(), 1 + b.targets.len());
    assert_eq!(r.ensemble_target.len(), 2);

    let csv = String::from_utf8(read(&dir.path().join("metrics.csv"))).unwrap();
    assert_eq!(csv.lines().next().unwrap(), METRICS_HEADER);
    let record: ReproRecord = serde_json::from_slice(&read(&dir.path().join("run.json"))).unwrap();
    assert_eq!(record.member_seeds.len(), 4);
    assert_eq!(record.manifest_hash.len(), 64);
    assert_eq!(record.config, cfg);
}

#[test]
fn metrics_are_reproducible_and_independent_of_parallelism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Variant::ApnAdaStar, vec![0.1, 1.0]);
    let b = bench(&cfg);
    harness::run_experiment_on(&cfg, &b, Some(&dir.path().join("a"))).unwrap();
    harness::run_experiment_on(&cfg, &b, Some(&dir.path().join("b"))).unwrap();
    let par = ExperimentConfig { parallel: 2, ..cfg.clone() };
    harness::run_experiment_on(&par, &b, Some(&dir.path().join("c"))).unwrap();
    let a = read(&dir.path().join("a/metrics.csv"));
    assert_eq!(a, read(&dir.path().join("b/metrics.csv")));
    assert_eq!(a, read(&dir.path().join("c/metrics.csv")));
    for i in 0..2 {
        let name = format!("checkpoints/member{i}.apn1");
        assert_eq!(read(&dir.path().join("a").join(&name)), read(&dir.path().join("c").join(&name)));
    }
}

#[test]
fn selection_uses_the_earliest_best_validation_epoch() {
    let mut cfg = tiny(Variant::Apn, vec![0.1]);
    cfg.epochs = 4;
    let r = harness::run_experiment_on(&cfg, &bench(&cfg), None).unwrap();
    let m = &r.members[0];
    let val: Vec<f64> = m.rows.iter().filter(|row| row.split == "val").map(|row| row.accuracy).collect();
    let best = val.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(m.best_epoch, val.iter().position(|&a| a == best).unwrap());
    assert_eq!(m.best_val_accuracy, best);
    assert!(m.rows.iter().filter(|row| row.split.starts_with("target:")).all(|row| row.epoch == m.best_epoch));
}

#[test]
fn learning_rate_schedule_is_visible_in_the_logs() {
    let mut cfg = tiny(Variant::Apn, vec![0.1]);
    cfg.epochs = 3;
    cfg.sgd.decay_every = 2;
    let r = harness::run_experiment_on(&cfg, &bench(&cfg), None).unwrap();
    let lrs: Vec<f64> = r.rows.iter().filter_map(|row| row.lr).collect();
    assert_eq!(lrs.len(), 3);
    for (e, lr) in lrs.iter().enumerate() {
        let want = 0.001 * 0.1f64.powi((e / 2) as i32);
        assert!((lr - want).abs() < 1e-15, "epoch {e}: {lr}");
    }
    let sgd = ExperimentConfig::default().sgd;
    for e in [0, 29, 30, 59, 60, 95] {
        assert!((sgd.lr_at_epoch(e) - 0.001 * 0.1f64.powi((e / 30) as i32)).abs() < 1e-18);
    }
}

#[test]
fn checkpoints_round_trip_and_reject_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Variant::Apn, vec![0.1]);
    let r = harness::run_experiment_on(&cfg, &bench(&cfg), Some(dir.path())).unwrap();
    let path = r.members[0].checkpoint.clone().unwrap();
    let again = dir.path().join("again.apn1");
    harness::save_checkpoint(&harness::load_checkpoint(&path).unwrap(), &again).unwrap();
    assert_eq!(read(&path), read(&again));

    let model = harness::load_model(&cfg.model, &path).unwrap();
    assert!(model.params.bitwise_eq(&r.members[0].params.to_dtype(DType::F32)));

    let wide = PyramidConfig { feature_dim: 16, ..cfg.model.clone() };
    assert!(matches!(harness::load_model(&wide, &path), Err(ApnError::Compat(_))));

    let mut params = harness::load_checkpoint(&path).unwrap();
    let mut trimmed = apn_core::params::ParamSet::new();
    for (name, t) in params.iter().filter(|(n, _)| *n != "head.b") {
        trimmed.insert(name, t.clone()).unwrap();
    }
    let cut = dir.path().join("cut.apn1");
    checkpoint::save(&trimmed, &cut).unwrap();
    match harness::load_model(&cfg.model, &cut) {
        Err(ApnError::Compat(msg)) => assert!(msg.contains("head.b"), "{msg}"),
        other => panic!("expected compatibility error, got {other:?}"),
    }

    let slot = params.slot("head.w").unwrap();
    params.get_mut(slot).data_mut()[0] = 0.25;
    assert!(!params.bitwise_eq(&harness::load_checkpoint(&path).unwrap()));
}

#[test]
fn gradcheck_detects_a_corrupted_gradient() {
    let x = Tensor::from_f64(&[3], vec![0.3, -1.2, 2.0]).unwrap();
    let f = |t: &apn_core::Tape, v: &[apn_core::Var]| {
        let s = t.mul(v[0], v[0])?;
        t.sum(s)
    };
    let mut rng = rng_from_seed(1);
    let ok = check_case(Scope::Kernels, "square", std::slice::from_ref(&x), &[0], DType::F64, &f, None, &mut rng).unwrap();
    assert!(ok.passed, "{ok:?}");
    let corrupt = |g: &mut [Tensor]| g[0].data_mut()[1] += 0.01;
    let bad =
        check_case(Scope::Kernels, "square", std::slice::from_ref(&x), &[0], DType::F64, &f, Some(&corrupt), &mut rng).unwrap();
    assert!(!bad.passed);
}

#[test]
fn kernel_gradients_pass_and_pyramid_scope_covers_every_level() {
    let report = gradcheck(&[Scope::Kernels], false, 3).unwrap();
    assert!(report.passed(), "{report}");
    assert!(report.max_rel_err(Scope::Kernels, DType::F64) <= 1e-6);
    let report = gradcheck(&[Scope::Pyramid], false, 3).unwrap();
    for tag in ["x_r1_global", "x_r1_locals", "x_r2", "x_r3", "x_logits", "theta"] {
        assert!(report.entries.iter().any(|e| e.name.starts_with(tag)), "missing {tag}");
    }
    assert!(report.passed(), "{report}");
}

#[test]
fn config_rejects_bad_values() {
    let bad = [
        r#"{"gammas":[]}"#,
        r#"{"gammas":[-1.0]}"#,
        r#"{"epochs":0}"#,
        r#"{"learning_rate":0.0}"#,
        r#"{"feature_dim":30,"head_count":4}"#,
        r#"{"segments":2}"#,
    ];
    let dir = tempfile::tempdir().unwrap();
    for (i, json) in bad.iter().enumerate() {
        let p = dir.path().join(format!("{i}.json"));
        std::fs::write(&p, json).unwrap();
        assert!(matches!(ExperimentConfig::load(&p), Err(ApnError::Config(_))), "{json}");
    }
    let p = dir.path().join("variant.json");
    std::fs::write(&p, r#"{"variant":"ada++"}"#).unwrap();
    assert!(ExperimentConfig::load(&p).is_err());
}

#[test]
fn cli_generates_data_and_trains_from_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Variant::ApnAda, vec![0.1]);
    cfg.epochs = 1;
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    let bin = env!("CARGO_BIN_EXE_apn");
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).env("APN_DETERMINISTIC", "1").output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let out = dir.path().to_str().unwrap();
    let cfg_arg = cfg_path.to_str().unwrap();
    run(&["gen-data", "--config", cfg_arg, "--out", out]);
    assert!(dir.path().join("dataset.vdg").exists());
    assert!(dir.path().join("dataset.manifest.json").exists());

    cfg.dataset = Some(dir.path().join("dataset.vdg"));
    std::fs::write(&cfg_path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    let train = run(&["train", "--config", cfg_arg, "--out", out, "--seed", "9", "--parallel", "2"]);
    assert!(train.contains("ensemble mean target accuracy"));
    let eval = run(&["eval", "--out", out]);
    assert!(eval.contains("val accuracy"));
    assert!(dir.path().join("eval.csv").exists());
    let grad = run(&["gradcheck", "--scope", "kernels"]);
    assert!(grad.lines().all(|l| l.starts_with("ok")));

    let fail = Command::new(bin).args(["train", "--variant", "nope", "--out", out]).output().unwrap();
    assert!(!fail.status.success());
}
