use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use licw::config::{OnlineSpec, SuiteConfig, TrainingSpec};
use licw::plotdata::emit_plotdata;
use licw::suite::{run_suite, AttackManifest, Manifest};
use licw::synth::SyntheticSpec;
use licw::HarnessError;
use licw_core::models::{CompressionModel, Family};

const CSVS: [&str; 7] = ["reports.csv", "attacks.csv", "eci.csv", "ldmr.csv", "cdmr.csv", "online_trajectory.csv", "failures.csv"];
const PLOTS: [&str; 4] = ["rd_curve.csv", "delta_scatter.csv", "ldmr_bars.csv", "defense_trajectory.csv"];

fn small(root: &Path, tag: &str) -> SuiteConfig {
    SuiteConfig {
        name: "small".into(),
        synthetic: Some(SyntheticSpec { count: 2, height: 64, width: 64, seed: 77 }),
        families: vec!["HYPER_S".into()],
        surface_steps: 2,
        eci_directions: vec![[1.0, 0.0]],
        ldmr: true,
        local_maps: true,
        training: TrainingSpec {
            steps: 3,
            crop: 16,
            batch: 2,
            synthetic: Some(SyntheticSpec { count: 2, height: 64, width: 64, seed: 5 }),
            ..TrainingSpec::default()
        },
        online: Some(OnlineSpec { iters: 3, ..OnlineSpec::default() }),
        seed: 11,
        output_dir: root.join(tag).join("out"),
        checkpoint_dir: root.join(tag).join("ckpt"),
        workers: Some(2),
        ..SuiteConfig::default()
    }
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    (header, lines.map(|l| l.split(',').map(String::from).collect()).collect())
}

#[test]
fn suite_counts_determinism_resume_and_figures() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small(root.path(), "a");
    let bundle = run_suite(&cfg).unwrap();
    assert!(bundle.failures.is_empty(), "{:?}", bundle.failures);

    // one SRDA report per (image, submodel, direction), one ARDA attack per (image, direction)
    assert_eq!(bundle.reports_for("SRDA").count(), 2 * 6 * 6);
    assert_eq!(bundle.reports_for("noise").count(), 2 * 6 * 6);
    assert_eq!(bundle.attacks.iter().filter(|a| a.method == "ARDA").count(), 2 * 6);
    assert_eq!(bundle.reports_for("ARDA").count(), 2 * 6 * 6);
    assert_eq!(bundle.reports_for("SRDA+online").count(), 2 * 6);
    for a in &bundle.attacks {
        assert!(a.max_rms <= 1e-3 + 1e-9 && a.min_pixel >= 0.0 && a.max_pixel <= 1.0, "{a:?}");
    }
    // none, do(y_s), do(y_h), both
    assert_eq!(bundle.eci.len(), 2 * 6 * 4);
    assert_eq!(bundle.training.len(), 6);
    let out = &cfg.output_dir;
    for f in CSVS {
        assert!(out.join(f).exists(), "{f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["methods"]["SRDA"]["all"]["count"], 72);
    assert_eq!(summary["methods"]["SRDA"]["by_direction"].as_object().unwrap().len(), 6);
    assert_eq!(summary["methods"]["SRDA"]["by_submodel"].as_object().unwrap().len(), 6);
    assert!(fs::read_dir(out.join("maps")).unwrap().count() > 0);
    let tasks = out.join("tasks");
    for a in &bundle.attacks {
        let m: AttackManifest = serde_json::from_slice(&fs::read(tasks.join(format!("{}.attack.json", a.task))).unwrap()).unwrap();
        assert_eq!(m.loss_init.len(), if a.method == "ARDA" { 6 } else { 1 });
        assert_eq!(m.targets.len(), m.loss_init.len());
        assert!(m.output.exists());
        let trace = fs::read_to_string(&m.loss_trace).unwrap();
        assert_eq!(trace.lines().count(), a.iterations + 1);
    }

    let files = emit_plotdata(&bundle, &out.join("plotdata")).unwrap();
    assert_eq!(files.len(), 4);
    let (h, rows) = csv_rows(&out.join("plotdata/rd_curve.csv"));
    assert_eq!(h, ["family", "lambda_index", "bpp_pre", "psnr_pre", "bpp_post", "psnr_post", "direction"]);
    assert_eq!(rows.len(), 6 * 6);
    let layers = CompressionModel::new(Family::HyperS, 0.01, 0).unwrap().layer_list().len();
    let (h, rows) = csv_rows(&out.join("plotdata/ldmr_bars.csv"));
    assert_eq!(h, ["family", "lambda_index", "kind", "layer", "ldmr", "cdmr"]);
    let kinds: BTreeSet<(String, String, String)> = rows.iter().map(|r| (r[0].clone(), r[1].clone(), r[2].clone())).collect();
    assert!(!kinds.is_empty());
    for k in &kinds {
        let n = rows.iter().filter(|r| (&r[0], &r[1], &r[2]) == (&k.0, &k.1, &k.2)).count();
        assert_eq!(n, layers, "{k:?}");
    }
    let (h, rows) = csv_rows(&out.join("plotdata/defense_trajectory.csv"));
    assert_eq!(h, ["family", "lambda_index", "direction", "image", "iteration", "loss", "best"]);
    for pair in rows.windows(2) {
        if pair[0][..4] == pair[1][..4] {
            assert!(pair[1][4].parse::<usize>().unwrap() > pair[0][4].parse::<usize>().unwrap());
        }
    }

    // resume: every task is taken from the manifest
    let again = run_suite(&cfg).unwrap();
    assert_eq!(again.computed, 0);
    assert_eq!(again.resumed, bundle.computed);
    let manifest = Manifest::load(&out.join("manifest.json")).unwrap();
    assert!(manifest.entries.values().all(|e| e.status == "ok"));
    assert_eq!(manifest.entries.len(), bundle.computed);

    // fresh directories, one worker: byte-identical tables
    let mut other = small(root.path(), "b");
    other.workers = Some(1);
    let b = run_suite(&other).unwrap();
    emit_plotdata(&b, &other.output_dir.join("plotdata")).unwrap();
    for f in CSVS {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(other.output_dir.join(f)).unwrap(), "{f}");
    }
    for f in PLOTS {
        assert_eq!(fs::read(out.join("plotdata").join(f)).unwrap(), fs::read(other.output_dir.join("plotdata").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn zero_budget_suite_has_zero_deltas() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = small(root.path(), "z");
    cfg.epsilon = 0.0;
    cfg.directions = vec![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    cfg.lambdas = vec![0.0067, 0.025];
    cfg.ldmr = false;
    cfg.local_maps = false;
    cfg.online = None;
    let bundle = run_suite(&cfg).unwrap();
    assert!(bundle.failures.is_empty(), "{:?}", bundle.failures);
    assert!(!bundle.reports.is_empty());
    for r in &bundle.reports {
        assert_eq!((r.delta_rate, r.delta_distortion), (0.0, 0.0), "{} {}", r.method, r.image);
    }
    for e in bundle.eci.iter() {
        assert_eq!(e.total, e.benign_total);
    }
}

#[test]
fn missing_checkpoints_without_training_fail() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = small(root.path(), "m");
    cfg.training.enabled = false;
    assert!(matches!(run_suite(&cfg), Err(HarnessError::Config(_))));
}

#[test]
fn config_validation() {
    let root = tempfile::tempdir().unwrap();
    let good = small(root.path(), "v");
    good.validate().unwrap();

    let path = root.path().join("c.json");
    fs::write(&path, good.to_json()).unwrap();
    assert_eq!(SuiteConfig::load(&path).unwrap(), good);

    let broken = [
        SuiteConfig { lambdas: vec![], ..good.clone() },
        SuiteConfig { lambdas: vec![0.01, -1.0], ..good.clone() },
        SuiteConfig { families: vec!["JPEG".into()], ..good.clone() },
        SuiteConfig { directions: vec![[0.0, 0.0]], ..good.clone() },
        SuiteConfig { epsilon: -1.0, ..good.clone() },
        SuiteConfig { images: vec![root.path().join("absent.ppm")], ..good.clone() },
        SuiteConfig { synthetic: None, ..good.clone() },
        SuiteConfig { synthetic: Some(SyntheticSpec { count: 1, height: 60, width: 64, seed: 0 }), ..good.clone() },
        SuiteConfig { workers: Some(0), ..good.clone() },
    ];
    for (k, cfg) in broken.iter().enumerate() {
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))), "case {k}");
    }

    fs::write(&path, good.to_json().replacen("\"name\"", "\"unknown\": 1,\n  \"name\"", 1)).unwrap();
    assert!(SuiteConfig::load(&path).is_err());

    let schema: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("schema/suite_config.schema.json")).unwrap()).unwrap();
    let props = schema["properties"].as_object().unwrap();
    let serialized: serde_json::Value = serde_json::from_str(&good.to_json()).unwrap();
    let keys: BTreeSet<&String> = serialized.as_object().unwrap().keys().collect();
    assert_eq!(keys, props.keys().collect::<BTreeSet<_>>());
}
