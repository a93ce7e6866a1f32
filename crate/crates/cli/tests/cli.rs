use std::path::Path;
use std::process::Command;

use mome_cli::*;
use mome_core::formats::{load_labels, load_volume};
use mome_core::head::MomeModel;
use mome_core::tensor::Tensor;
use mome_core::training::{load_checkpoint, read_metrics, METRICS_HEADER};
use mome_core::types::ClassVocabulary;

/// 16³ phantoms, three experts, a handful of volumes.
fn small_config() -> RunConfig {
    RunConfig::default()
        .with_overrides(&[
            ("data.phantom.grid".into(), "[16, 16, 16]".into()),
            ("data.n_train".into(), "3".into()),
            ("data.n_eval".into(), "4".into()),
            ("model.experts".into(), "3".into()),
            ("model.k_active".into(), "3".into()),
            ("model.encoder_widths".into(), "[4, 8, 8]".into()),
            ("model.token_channels".into(), "4".into()),
            ("model.text_dim".into(), "16".into()),
            ("train.patch".into(), "[16, 16, 16]".into()),
            ("train.epochs".into(), "1".into()),
            ("eval.slices".into(), "[8]".into()),
            ("eval.ablation_seeds".into(), "[5, 6]".into()),
        ])
        .unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mome"))
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn default_corpus_has_fifty_volumes_and_reruns_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let s = cmd_gen_data(&cfg, a.path()).unwrap();
    cmd_gen_data(&cfg, b.path()).unwrap();
    let count = |sub: &str, ext: &str| {
        std::fs::read_dir(a.path().join(sub))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext))
            .count()
    };
    assert_eq!((s.train, s.eval), (40, 10));
    assert_eq!(count("volumes", "vol"), 50);
    assert_eq!(count("labels", "lbl"), 50);
    assert!(a.path().join(MANIFEST).exists());
    assert_eq!(snapshot(a.path()), snapshot(b.path()));

    let vocab = ClassVocabulary::desk();
    let v = load_volume(&volume_path(a.path(), "eval-000")).unwrap();
    let l = load_labels(&label_path(a.path(), "eval-000"), &vocab).unwrap();
    assert_eq!(v.dims(), [32, 32, 32]);
    assert!(l.annotated().iter().all(|&x| x));
}

#[test]
fn unwritable_output_is_an_io_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let err = cmd_gen_data(&small_config(), &blocker.join("corpus")).unwrap_err();
    assert_eq!(exit_code(&err), 3);
    assert!(err.to_string().contains(&blocker.display().to_string()), "{err}");
}

#[test]
fn zero_epochs_writes_a_checkpoint_and_an_empty_log_then_resume_continues() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let run = dir.path().join("run");
    let mut cfg = small_config();
    cmd_gen_data(&cfg, &corpus).unwrap();

    cfg.train.epochs = 0;
    let s = cmd_train(&cfg, &corpus, &run, false).unwrap();
    assert_eq!((s.epochs, s.steps), (0, 0));
    assert!(s.checkpoint.exists());
    assert_eq!(std::fs::read_to_string(&s.metrics).unwrap(), format!("{METRICS_HEADER}\n"));

    cfg.train.epochs = 2;
    let s = cmd_train(&cfg, &corpus, &run, false).unwrap();
    assert_eq!(s.epochs, 2);
    let rows = read_metrics(&s.metrics).unwrap();
    assert_eq!(rows.len(), 6);

    // one epoch through the library, then resume through the command
    let resumed_run = dir.path().join("resumed");
    std::fs::create_dir_all(&resumed_run).unwrap();
    let first = cfg.clone();
    let mut state = mome_core::training::TrainState::new(first.model.clone(), first.train.clone()).unwrap();
    let items: Vec<_> = load_split(&corpus, mome_core::types::Split::Train)
        .unwrap()
        .1
        .into_iter()
        .map(|(v, l)| mome_core::training::TrainItem {
            volume: mome_core::datasynth::preprocess(&v, 1.5, [-175.0, 250.0]).unwrap(),
            labels: l,
        })
        .collect();
    let emb = embeddings(&first, &first.data.vocabulary).unwrap();
    mome_core::training::train(
        &mut state,
        &items,
        &emb,
        &mome_core::training::TrainOptions {
            checkpoint: Some(resumed_run.join(CHECKPOINT)),
            metrics: Some(resumed_run.join(METRICS)),
            stop_after: Some(1),
        },
    )
    .unwrap();
    let s = cmd_train(&first, &corpus, &resumed_run, true).unwrap();
    assert_eq!(s.epochs, 2);
    let resumed_rows = read_metrics(&s.metrics).unwrap();
    assert_eq!(resumed_rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), [0, 0, 0, 1, 1, 1]);
    for (a, b) in resumed_rows.iter().zip(&rows) {
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }

    let mut other = first.clone();
    other.train.lr *= 2.0;
    assert_eq!(exit_code(&cmd_train(&other, &corpus, &resumed_run, true).unwrap_err()), 2);
}

#[test]
fn eval_ablation_infer_and_report_produce_hashed_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let run = dir.path().join("run");
    let cfg = small_config();
    cmd_gen_data(&cfg, &corpus).unwrap();
    let t = cmd_train(&cfg, &corpus, &run, false).unwrap();
    let hash = cfg.hash();

    let eval_dir = dir.path().join("eval");
    let report = cmd_eval(&cfg, &t.checkpoint, &corpus, &eval_dir).unwrap();
    assert_eq!(report.per_volume.len(), 4);
    let csv = std::fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    assert!(csv.contains(&format!("config_hash={hash}")));
    for line in csv.lines().filter(|l| l.contains(",tumor,")) {
        let cells: Vec<&str> = line.split(',').collect();
        if let (Ok(s), Ok(p), Ok(h)) = (cells[4].parse::<f64>(), cells[5].parse::<f64>(), cells[6].parse::<f64>()) {
            let recomputed = if s + p > 0.0 { 2.0 * s * p / (s + p) } else { 0.0 };
            assert!((100.0 * (recomputed - h)).abs() <= 0.01);
        }
    }
    assert!(std::fs::read(eval_dir.join("slices").join("eval-000_z008_gt.pgm")).unwrap().starts_with(b"P5\n# config_hash="));

    let ab = dir.path().join("ablate");
    let rows = cmd_ablate_topk(&cfg, &t.checkpoint, &ab).unwrap();
    assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), [1, 2, 3]);
    assert!(std::fs::read_to_string(ab.join("ablation.csv")).unwrap().contains(&hash));
    assert!(std::fs::read_to_string(ab.join("ablation.svg")).unwrap().contains(&hash));

    let vol = volume_path(&corpus, "eval-001");
    let inf_a = dir.path().join("inf_a");
    let inf_b = dir.path().join("inf_b");
    cmd_infer(&cfg, &t.checkpoint, &vol, &inf_a).unwrap();
    cmd_infer(&cfg, &t.checkpoint, &vol, &inf_b).unwrap();
    assert_eq!(snapshot(&inf_a), snapshot(&inf_b));

    // the volume equals the patch, so tiling is a single direct forward
    let model: MomeModel<f32> = load_checkpoint(&t.checkpoint).unwrap().model;
    let raw = load_volume(&vol).unwrap();
    let (pre, tiled) = infer_volume(&cfg, &model, &raw).unwrap();
    let patch = Tensor::from_vec(&[1, 16, 16, 16], pre.voxels().to_vec()).unwrap();
    let direct = model
        .forward(&patch, &embeddings(&cfg, &cfg.data.vocabulary).unwrap(), 3)
        .unwrap();
    assert_eq!(tiled.probs, direct.probs);

    let missing = dir.path().join("nope.mckpt");
    let err = cmd_infer(&cfg, &missing, &vol, &inf_a).unwrap_err();
    assert_eq!(exit_code(&err), 3);
    assert!(err.to_string().contains("nope.mckpt"));

    let rep = cmd_report(&[run.clone(), eval_dir.clone(), ab.clone()], &dir.path().join("rep")).unwrap();
    let text = std::fs::read_to_string(rep).unwrap();
    assert!(text.contains(&hash) && text.contains("Top-K ablation"));
}

#[test]
fn binary_reports_one_line_reasons_and_exit_codes() {
    let out = bin().args(["train", "--corpus", "x", "--out", "y"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[usage]:") && err.contains("--seed"));

    let out = bin().args(["show-config", "--train.lr", "fast"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin().args(["show-config", "--model.k_active", "9"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin()
        .args(["eval", "--checkpoint", "/nonexistent/c.mckpt", "--corpus", "/nonexistent", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr).unwrap().contains("/nonexistent/c.mckpt"));

    let out = bin().args(["show-config"]).env("MOME_WORKERS", "lots").output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = bin().args(["show-config", "--workers", "1", "--train.lr", "0.01"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("# config_hash = "));
    assert!(text.contains("lr = 0.01"));
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "[train]\nlr = 0.5\nepochs = 3\n").unwrap();
    let cfg = RunConfig::load(Some(&path)).unwrap();
    assert_eq!((cfg.train.lr, cfg.train.epochs), (0.5, 3));
    assert_eq!(cfg.model, RunConfig::default().model);
    let cfg = cfg.with_overrides(&[("train.epochs".into(), "4".into())]).unwrap();
    assert_eq!(cfg.train.epochs, 4);
    std::fs::write(&path, "[train]\nlearning_rate = 0.5\n").unwrap();
    assert_eq!(exit_code(&RunConfig::load(Some(&path)).unwrap_err()), 2);
}
