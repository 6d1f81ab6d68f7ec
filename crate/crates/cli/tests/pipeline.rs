use std::path::Path;

use pnlss::boucwen::{Dataset, Split};
use pnlss::io;
use pnlss::signals::{Signal, SignalSource};
use pnlss_cli::evaluate::evaluate;
use pnlss_cli::manifest::{RunManifest, MANIFEST_FILE};
use pnlss_cli::pipeline::{self, Layout};
use pnlss_cli::{PipelineConfig, Stage};

/// Small but complete configuration: short records, few iterations.
fn small_config(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.excitation.samples_per_period = 1024;
    cfg.excitation.bla_realizations = 2;
    cfg.excitation.swept_sine.duration = Some(2.0);
    cfg.state_degrees = vec![2];
    cfg.lm.max_iter = 4;
    cfg.sweep.r_list = vec![1];
    cfg.sweep.d_list = vec![2, 3];
    cfg.sweep.trials = 1;
    cfg.sweep.tensor_points = 100;
    cfg.sweep.lm.max_iter = 3;
    cfg.master_seed = 11;
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn manifest(out: &Path) -> RunManifest {
    io::read_json(&out.join(MANIFEST_FILE)).unwrap()
}

#[test]
fn full_pipeline_on_a_small_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = small_config(&out);
    let layout = Layout::new(&out);

    let err = pipeline::identify(&cfg).unwrap_err();
    assert_eq!(err.stage, Stage::Identify);
    assert!(err.to_string().contains("generate"), "{err}");

    let files = pipeline::generate(&cfg).unwrap();
    assert_eq!(files.len(), 4);
    let train = &files[0];
    assert_eq!(train.realizations, 2);
    assert!((train.input_rms / 55.0 - 1.0).abs() < 1e-3, "train rms {}", train.input_rms);
    let first = std::fs::read(layout.train()).unwrap();
    pipeline::generate(&cfg).unwrap();
    assert_eq!(std::fs::read(layout.train()).unwrap(), first);

    let report = pipeline::identify(&cfg).unwrap();
    assert_eq!(report.order, 3);
    assert_eq!(report.nonlinear_parameter_count, 3 * 10);
    assert!(report.linear.test_multisine_db.is_some());

    let (sweep, best) = pipeline::decouple(&cfg).unwrap();
    assert_eq!(sweep.rows.len(), 2);
    for row in &sweep.rows {
        assert_eq!(row.param_count, (2 * 3 + row.d + 1) * row.r);
    }
    let first_grid = std::fs::read(layout.sweep_table()).unwrap();
    pipeline::decouple(&cfg).unwrap();
    assert_eq!(std::fs::read(layout.sweep_table()).unwrap(), first_grid);
    assert!(best.is_some());
    assert!(layout.decoupled_model().exists());

    // Evaluating the trained PNLSS on its own training record matches the report.
    let own = evaluate(&cfg, &layout.pnlss_model(), &layout.train(), 0).unwrap();
    let train_db = report.pnlss.train_db.unwrap();
    assert!((own.rms_error_db.unwrap() - train_db).abs() < 0.01);

    let dec = evaluate(&cfg, &layout.decoupled_model(), &layout.test_multisine(), 0).unwrap();
    assert_eq!(dec.model_kind, "decoupled");
    let eval_dir = layout.evaluation_dir("decoupled_model__test_multisine");
    for f in ["error.csv", "spectrum.csv", "branches.csv", "summary.json"] {
        assert!(eval_dir.join(f).exists(), "{f} missing");
    }
    let spectrum = std::fs::read_to_string(eval_dir.join("spectrum.csv")).unwrap();
    // Lines 7..=204 of a 1024-sample period at 750 Hz lie in 5..150 Hz.
    assert_eq!(spectrum.lines().count() - 1, 204 - 7 + 1);

    let m = manifest(&out);
    m.verify(&out).unwrap();
    let stages: Vec<&str> = m.timings.iter().map(|t| t.stage.as_str()).collect();
    for s in ["generate", "identify", "decouple", "evaluate"] {
        assert!(stages.contains(&s));
    }
    assert!(m.files.iter().any(|f| f.path == "data/train.csv"));
    assert!(m.files.iter().any(|f| f.path == "models/decoupled_model.json"));
}

#[test]
fn zero_input_gives_zero_error_and_rates_must_match() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = small_config(&out);
    let model_path = dir.path().join("linear.json");
    let linear = pnlss::boucwen::linearized_model(&cfg.system, 750.0).unwrap();
    io::write_json(&model_path, &linear).unwrap();

    let zeros = |fs: f64| {
        let u = Signal::new(vec![0.0; 256], fs, SignalSource::External).unwrap();
        let y = Signal::new(vec![0.0; 256], fs, SignalSource::External).unwrap();
        Dataset::new(u, y, Split::Other, Some(256)).unwrap()
    };
    let data_path = dir.path().join("zeros.csv");
    io::write_dataset(&data_path, &zeros(750.0), serde_json::Value::Null).unwrap();
    let s = evaluate(&cfg, &model_path, &data_path, 0).unwrap();
    assert_eq!(s.rms_error, 0.0);
    assert_eq!(s.rms_error_db, None);

    let slow = dir.path().join("slow.csv");
    io::write_dataset(&slow, &zeros(500.0), serde_json::Value::Null).unwrap();
    let err = evaluate(&cfg, &model_path, &slow, 0).unwrap_err();
    assert_eq!(err.stage, Stage::Evaluate);
    assert!(err.to_string().contains("Hz"));
}

#[test]
fn decouple_without_a_model_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let err = pipeline::decouple(&cfg).unwrap_err();
    assert_eq!(err.stage, Stage::Decouple);
    assert!(err.to_string().contains("identify"), "{err}");
}
