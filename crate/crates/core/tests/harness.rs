use std::sync::OnceLock;

use coffee_core::coffee::{Method, TrainableGroup};
use coffee_core::diffusion::PretrainConfig;
use coffee_core::error::Error;
use coffee_core::harness::checkpoint::{load_checkpoint, save_checkpoint, ModelState};
use coffee_core::harness::config::{fingerprint, ConceptPair, ExperimentConfig};
use coffee_core::harness::pipeline::{
    evaluate_model, finetune_run, run_experiment, run_lambda_sweep, run_protocol_comparison, Artifacts, RunSpec,
};
use coffee_core::harness::report::{reports_csv, summarize, summary_csv};

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        concept_pairs: vec![ConceptPair::new("circle", "frame"), ConceptPair::new("cross", "checker")],
        seeds: vec![0, 1],
        ..ExperimentConfig::default()
    };
    cfg.finetune.steps = 25;
    cfg.pretrain = PretrainConfig {
        corpus_size: 320,
        steps: 150,
        batch_size: 16,
        ..PretrainConfig::default()
    };
    cfg
}

fn artifacts() -> &'static Artifacts {
    static ART: OnceLock<Artifacts> = OnceLock::new();
    ART.get_or_init(|| Artifacts::build(&small_config()).unwrap())
}

fn with_methods(methods: &[Method]) -> ExperimentConfig {
    ExperimentConfig {
        methods: methods.to_vec(),
        ..small_config()
    }
}

#[test]
fn direct_only_gives_one_report_per_pair_and_seed() {
    let cfg = with_methods(&[Method::Direct]);
    let out = run_experiment(&cfg, artifacts()).unwrap();
    assert_eq!(out.len(), 4);
    let keys: Vec<(String, u64)> = out.iter().map(|o| (o.report.concept.clone(), o.report.seed)).collect();
    assert_eq!(
        keys,
        vec![("circle".into(), 0), ("circle".into(), 1), ("cross".into(), 0), ("cross".into(), 1)]
    );
    for o in &out {
        assert_eq!(o.report.fingerprint, fingerprint(&cfg.pretrain));
        assert_eq!(o.report.n_samples, 16);
        assert_eq!(o.report.ffd, None);
    }
}

#[test]
fn reports_are_reproducible_and_carry_lambda_and_drift() {
    let cfg = with_methods(&[Method::Direct, Method::Coffee]);
    let a = run_experiment(&cfg, artifacts()).unwrap();
    let b = run_experiment(&cfg, artifacts()).unwrap();
    let ra: Vec<_> = a.iter().map(|o| o.report.clone()).collect();
    let rb: Vec<_> = b.iter().map(|o| o.report.clone()).collect();
    assert_eq!(reports_csv(&ra), reports_csv(&rb));
    assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
    let coffee = ra.iter().find(|r| r.method == Method::Coffee).unwrap();
    assert_eq!(coffee.lambda, 1.0);
    assert_eq!(coffee.drift.len(), 1);
    let summary = summary_csv(&summarize(&ra));
    let diff = summary.split("Difference with Direct Fine-tuning").nth(1).unwrap();
    let row = diff.lines().find(|l| l.starts_with("coffee,")).unwrap();
    for cell in row.split(',').skip(1).filter(|c| *c != "NA") {
        assert!(cell.ends_with('%') && (cell.starts_with('+') || cell.starts_with('-')), "{cell}");
    }
}

#[test]
fn lambda_sweep_degenerates_to_direct_at_zero_and_highlights_one() {
    let cfg = small_config();
    let table = run_lambda_sweep(&cfg, artifacts(), &[0.0, 1.0]).unwrap();
    assert_eq!(table.zero_matches_direct, Some(true));
    let hl: Vec<f32> = table.summary.iter().filter(|s| s.highlighted).map(|s| s.lambda).collect();
    assert_eq!(hl, vec![1.0]);
    assert!(run_lambda_sweep(&cfg, artifacts(), &[]).is_err());
    assert!(run_lambda_sweep(&cfg, artifacts(), &[1.0, 0.0]).is_err());
}

#[test]
fn single_lambda_sweep_matches_the_experiment() {
    let cfg = with_methods(&[Method::Coffee]);
    let table = run_lambda_sweep(&cfg, artifacts(), &[1.0]).unwrap();
    let runs = run_experiment(&cfg, artifacts()).unwrap();
    assert_eq!(table.rows.len(), runs.len());
    for (row, run) in table.rows.iter().zip(&runs) {
        assert_eq!(row.mcs_analog.to_bits(), run.report.mcs_analog.to_bits());
        assert_eq!(row.checkpoint_digest, run.checkpoint_digest);
    }
}

#[test]
fn protocol_table_counts_parameters_and_freezes_the_table_for_denoiser_runs() {
    let cfg = ExperimentConfig {
        seeds: vec![0],
        ..small_config()
    };
    let rows = run_protocol_comparison(&cfg, artifacts()).unwrap();
    let vocab = artifacts().model.table.vocab().len();
    assert_eq!(rows[0].groups, vec![TrainableGroup::TextEncoder]);
    assert_eq!(rows[0].trainable_params, vocab * 32);
    assert!(rows[0].param_fraction < 0.01);
    assert!(rows[1].table_unchanged);
    assert!(!rows[0].table_unchanged);
    assert_eq!(rows[2].delta_is_pct, 0.0);
}

#[test]
fn checkpoint_round_trip_preserves_files_and_metrics() {
    let cfg = small_config();
    let art = artifacts();
    let spec = RunSpec::new(&cfg.concept_pairs[0], Method::Coffee, 1, &cfg);
    let out = finetune_run(art, &cfg, &spec).unwrap();
    let before = evaluate_model(art, &cfg, &spec, &out.state, &out.refs).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    save_checkpoint(&p1, &out.state).unwrap();
    let loaded = load_checkpoint(&p1, Some(&out.state.fingerprint)).unwrap();
    save_checkpoint(&p2, &loaded).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let after = evaluate_model(art, &cfg, &spec, &loaded, &out.refs).unwrap();
    assert_eq!(serde_json::to_string(&before).unwrap(), serde_json::to_string(&after).unwrap());

    let bytes = std::fs::read(&p1).unwrap();
    match ModelState::from_bytes(&bytes[..bytes.len() - 10], None) {
        Err(Error::Truncated { expected, actual }) => assert_eq!(expected, actual + 10),
        other => panic!("expected truncation error, got {other:?}"),
    }
    assert!(matches!(
        load_checkpoint(&p1, Some("not-the-fingerprint")),
        Err(Error::FingerprintMismatch { .. })
    ));
}

#[test]
fn missing_checkpoint_names_the_command_that_makes_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.paths.work_dir = dir.path().to_path_buf();
    let err = Artifacts::load(&cfg, Some(std::path::Path::new("exp.json"))).err().unwrap();
    assert!(err.to_string().contains("coffee-lab pretrain --config exp.json"), "{err}");
}
