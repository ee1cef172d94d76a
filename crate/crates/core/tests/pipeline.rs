use std::path::{Path, PathBuf};

use seldlab::config::{Condition, RunConfig};
use seldlab::metrics::e_seld;
use seldlab::pipeline::{dataset_hash, evaluate_dirs, extract_features_dir, load_metrics, merge_runs, read_run, report, run, synth_data};
use seldlab::synth::DatasetLayout;
use seldlab::Error;

fn small_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.n_train_rooms = 2;
    cfg.dataset.n_test_rooms = 1;
    cfg.dataset.clips_per_room = 2;
    cfg.dataset.dataset_seed = 11;
    cfg.dataset.scene.clip_seconds = 10.0;
    cfg.dataset.scene.events_min = 3;
    cfg.dataset.scene.events_max = 5;
    cfg.model.channels = vec![2, 2, 2, 2];
    cfg.model.gru_hidden = 2;
    cfg.meta.rooms_per_batch = 2;
    cfg.meta.samples_per_room = 4;
    cfg.meta.k_support = 2;
    cfg.meta.q_query = 2;
    cfg.meta.inner_steps = 1;
    cfg.meta.epochs = 2;
    cfg.meta.steps_per_epoch = 1;
    cfg.pretrain.epochs = 2;
    cfg.pretrain.batch_size = 4;
    cfg.checkpoint_every = 1;
    cfg.dataset_dir = root.join("data");
    cfg.features_dir = root.join("features");
    cfg
}

fn prepared() -> (tempfile::TempDir, RunConfig) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    synth_data(&cfg, &cfg.dataset_dir).unwrap();
    extract_features_dir(&cfg.dataset_dir, &cfg.features_dir).unwrap();
    (dir, cfg)
}

fn run_condition(cfg: &RunConfig, cond: Condition, out: PathBuf) -> PathBuf {
    let mut c = cfg.clone();
    c.condition = cond;
    c.out_dir = out;
    run(&c).unwrap().out_dir
}

#[test]
fn synthesis_is_reproducible_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let rows = synth_data(&cfg, &dir.path().join("a")).unwrap();
    synth_data(&cfg, &dir.path().join("b")).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(dataset_hash(&dir.path().join("a")).unwrap(), dataset_hash(&dir.path().join("b")).unwrap());
    let layout = DatasetLayout::new(dir.path().join("a"));
    for r in &rows {
        assert!(layout.wav(&r.clip_id).exists() && layout.annotation(&r.clip_id).exists());
    }
}

#[test]
fn feature_cache_is_idempotent_and_reports_corrupt_audio() {
    let (dir, cfg) = prepared();
    let n = std::fs::read_dir(&cfg.features_dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "msld"))
        .count();
    assert_eq!(n, 6 * 2);
    let again = extract_features_dir(&cfg.dataset_dir, &cfg.features_dir).unwrap();
    assert_eq!(again.written, 0);
    assert_eq!(again.skipped, 12);

    let layout = DatasetLayout::new(&cfg.dataset_dir);
    let victim = layout.wav(&layout.read_manifest().unwrap()[0].clip_id);
    std::fs::write(&victim, b"RIFF junk").unwrap();
    let err = extract_features_dir(&cfg.dataset_dir, &dir.path().join("f2")).unwrap_err();
    assert!(err.to_string().contains(victim.file_name().unwrap().to_str().unwrap()), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn runs_report_and_evaluate_agree() {
    let (dir, cfg) = prepared();
    let runs: Vec<PathBuf> = Condition::ALL
        .iter()
        .map(|&c| run_condition(&cfg, c, dir.path().join(c.as_str())))
        .collect();
    for r in &runs {
        for f in ["config.toml", "dataset_hash.txt", "log.csv", "final.bin", "metrics.csv", "adaptation.csv"] {
            assert!(r.join(f).exists(), "{} missing {f}", r.display());
        }
        assert!(r.join("checkpoints/epoch_002.bin").exists());
        let saved = RunConfig::load(&r.join("config.toml")).unwrap();
        assert_eq!(saved.model, cfg.model);
        for row in load_metrics(&r.join("metrics.csv")).unwrap() {
            assert_eq!(e_seld(row.er20, row.f20, row.le_cd, row.lr_cd).unwrap(), row.e_seld);
        }
    }

    // serial reruns are bit-identical
    let again = run_condition(&cfg, Condition::Meta, dir.path().join("meta2"));
    assert_eq!(
        std::fs::read(runs[2].join("metrics.csv")).unwrap(),
        std::fs::read(again.join("metrics.csv")).unwrap()
    );
    assert_eq!(std::fs::read(runs[2].join("final.bin")).unwrap(), std::fs::read(again.join("final.bin")).unwrap());

    // offline evaluation of saved predictions reproduces the run's metrics
    let layout = DatasetLayout::new(&cfg.dataset_dir);
    let offline = evaluate_dirs(&cfg.dataset_dir.join("annotations"), &runs[1].join("predictions"), &layout.manifest()).unwrap();
    assert_eq!(offline, load_metrics(&runs[1].join("metrics.csv")).unwrap());

    let table = report(&runs, &dir.path().join("report")).unwrap();
    let text = std::fs::read_to_string(table).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0].split(',').count(), 1 + 5 * 3);
    assert_eq!(lines.len(), 1 + 1 + 1);
    assert!(lines.last().unwrap().starts_with("Overall,"));
    assert!(dir.path().join("report/curves.svg").exists());

    let single = merge_runs(&[read_run(&runs[0]).unwrap()]).unwrap();
    assert_eq!(single.0.len(), 6);

    // a run over a different dataset is refused
    std::fs::write(runs[0].join("dataset_hash.txt"), "0000").unwrap();
    let err = report(&runs, &dir.path().join("report2")).unwrap_err();
    assert!(matches!(err, Error::DatasetMismatch(_)));
}
