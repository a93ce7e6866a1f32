//! Subcommand implementations behind the `mome` binary.

pub mod charts;
pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use mome_core::datasynth::{make_corpus, preprocess, resample_labels};
use mome_core::evaluation::{
    ablate_topk, ablation_csv, ablation_markdown, evaluate, export_slices, report_csv, report_markdown,
    sliding_window_infer, AblationRow, EvalOptions, EvalReport,
};
use mome_core::formats::{load_labels, load_volume, read_json, save_labels, save_volume, write_bytes, write_json};
use mome_core::head::{MomeModel, Prediction};
use mome_core::textbranch::{PromptTemplate, TextEmbedding};
use mome_core::training::{load_checkpoint, read_metrics, train, TrainItem, TrainOptions, TrainState};
use mome_core::types::{validate_manifest, ClassVocabulary, DatasetManifest, ManifestViolation, PartialLabelSet, Split, Volume,
};
use mome_core::{MomeError, Result};
use serde::{Deserialize, Serialize};

pub use config::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const RUN_RECORD: &str = "run.json";
pub const CHECKPOINT: &str = "checkpoint.mckpt";
pub const METRICS: &str = "metrics.csv";

/// Process exit status for an error.
pub fn exit_code(e: &MomeError) -> i32 {
    match e {
        MomeError::Shape(_) | MomeError::OutOfRange { .. } | MomeError::InvalidArgument(_) => 1,
        MomeError::Config(_) | MomeError::ClassCount { .. } | MomeError::MissingEmbedding(_) => 2,
        MomeError::Numeric(_) => 4,
        _ => 3,
    }
}

/// `--workers`, then `MOME_WORKERS`; `None` leaves the pool default.
pub fn resolve_workers(flag: Option<usize>, env: Option<&str>) -> Result<Option<usize>> {
    let n = match (flag, env) {
        (Some(n), _) => n,
        (None, Some(s)) => s
            .trim()
            .parse()
            .map_err(|_| MomeError::InvalidArgument(format!("MOME_WORKERS={s:?} is not a count")))?,
        (None, None) => return Ok(None),
    };
    if n == 0 {
        return Err(MomeError::InvalidArgument("worker count must be positive".into()));
    }
    Ok(Some(n))
}

/// Splits `--a.b value` and `--a.b=value` config overrides out of `args`.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--").filter(|k| k.split('=').next().is_some_and(|k| k.contains('.'))) else {
            rest.push(a);
            continue;
        };
        if let Some((k, v)) = key.split_once('=') {
            overrides.push((k.to_string(), v.to_string()));
        } else {
            let v = it
                .next()
                .ok_or_else(|| MomeError::InvalidArgument(format!("override --{key} needs a value")))?;
            overrides.push((key.to_string(), v));
        }
    }
    Ok((rest, overrides))
}

/// Written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
}

fn record(dir: &Path, command: &str, cfg: &RunConfig, seed: u64) -> Result<()> {
    write_json(
        &dir.join(RUN_RECORD),
        &RunRecord {
            command: command.into(),
            config_hash: cfg.hash(),
            seed,
            config: cfg.clone(),
        },
    )
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MomeError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn volume_path(corpus: &Path, id: &str) -> PathBuf {
    corpus.join("volumes").join(format!("{id}.vol"))
}

pub fn label_path(corpus: &Path, id: &str) -> PathBuf {
    corpus.join("labels").join(format!("{id}.lbl"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSummary {
    pub train: usize,
    pub eval: usize,
    pub files: Vec<PathBuf>,
}

/// Synthesizes the corpus into `volumes/`, `labels/` and `manifest.json`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<CorpusSummary> {
    cfg.validate()?;
    let d = &cfg.data;
    let corpus = make_corpus(&d.phantom, &d.vocabulary, d.n_train, d.n_eval, &d.plan, d.seed)?;
    ensure_dir(&out.join("volumes"))?;
    ensure_dir(&out.join("labels"))?;
    let mut files = Vec::new();
    for (v, l) in corpus.train.iter().chain(&corpus.eval) {
        let vp = volume_path(out, &v.id);
        let lp = label_path(out, &v.id);
        save_volume(v, &vp)?;
        save_labels(l, &lp)?;
        files.push(vp);
        files.push(lp);
    }
    write_json(&out.join(MANIFEST), &corpus.manifest)?;
    record(out, "gen-data", cfg, d.seed)?;
    Ok(CorpusSummary {
        train: corpus.train.len(),
        eval: corpus.eval.len(),
        files,
    })
}

/// Raw volumes and labels of one split, with the corpus vocabulary.
pub fn load_split(corpus: &Path, split: Split) -> Result<(ClassVocabulary, Vec<(Volume, PartialLabelSet)>)> {
    let manifest: DatasetManifest = read_json(&corpus.join(MANIFEST))?;
    let vocab = manifest.vocabulary.clone();
    let mut pairs = Vec::new();
    for id in manifest.volume_ids(split) {
        let v = load_volume(&volume_path(corpus, &id))?;
        let l = load_labels(&label_path(corpus, &id), &vocab)?;
        if v.dims() != l.dims() {
            return Err(MomeError::DimensionMismatch {
                path: label_path(corpus, &id),
                detail: format!("labels {:?} for volume {:?}", l.dims(), v.dims()),
            });
        }
        pairs.push((v, l));
    }
    let labels: Vec<PartialLabelSet> = pairs.iter().map(|(_, l)| l.clone()).collect();
    let violation = validate_manifest(&manifest, &labels)
        .into_iter()
        .find(|v| !matches!(v, ManifestViolation::MissingLabels { .. }));
    if let Some(v) = violation {
        return Err(MomeError::Metadata {
            path: corpus.join(MANIFEST),
            detail: v.to_string(),
        });
    }
    Ok((vocab, pairs))
}

fn preprocess_pairs(cfg: &RunConfig, pairs: Vec<(Volume, PartialLabelSet)>) -> Result<Vec<(Volume, PartialLabelSet)>> {
    pairs
        .into_iter()
        .map(|(v, l)| {
            let p = preprocess(&v, cfg.data.target_spacing, cfg.data.window)?;
            let l = resample_labels(&l, p.dims())?;
            Ok((p, l))
        })
        .collect()
}

pub fn embeddings(cfg: &RunConfig, vocab: &ClassVocabulary) -> Result<Vec<TextEmbedding>> {
    let template = PromptTemplate::new(cfg.text.template.clone())?;
    cfg.provider()?.embed_vocabulary(vocab, &template, cfg.model.text_dim)
}

fn check_vocab(cfg: &RunConfig, vocab: &ClassVocabulary) -> Result<()> {
    if vocab != &cfg.data.vocabulary {
        return Err(MomeError::Config(
            "corpus vocabulary differs from the configured vocabulary".into(),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Trains on the corpus train split, writing `checkpoint.mckpt`,
/// `metrics.csv` and a loss curve into `out`.
pub fn cmd_train(cfg: &RunConfig, corpus: &Path, out: &Path, resume: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let (vocab, pairs) = load_split(corpus, Split::Train)?;
    check_vocab(cfg, &vocab)?;
    let items: Vec<TrainItem> = preprocess_pairs(cfg, pairs)?
        .into_iter()
        .map(|(volume, labels)| TrainItem { volume, labels })
        .collect();
    let emb = embeddings(cfg, &vocab)?;
    ensure_dir(out)?;
    let ckpt = out.join(CHECKPOINT);
    let metrics = out.join(METRICS);
    let mut state = if resume && ckpt.exists() {
        let s = load_checkpoint(&ckpt)?;
        if s.model.cfg != cfg.model || s.train_cfg != cfg.train {
            return Err(MomeError::Config(format!(
                "{} was written with a different model or training config",
                ckpt.display()
            )));
        }
        s
    } else {
        if metrics.exists() {
            fs::remove_file(&metrics).map_err(|e| MomeError::io(&metrics, e))?;
        }
        TrainState::new(cfg.model.clone(), cfg.train.clone())?
    };
    train(
        &mut state,
        &items,
        &emb,
        &TrainOptions {
            checkpoint: Some(ckpt.clone()),
            metrics: Some(metrics.clone()),
            stop_after: None,
        },
    )?;
    let rows = read_metrics(&metrics)?;
    let hash = cfg.hash();
    write_json(
        &out.join(format!("{METRICS}.json")),
        &serde_json::json!({ "config_hash": hash, "seed": cfg.train.seed }),
    )?;
    let losses: Vec<f64> = rows.iter().map(|r| r.total).collect();
    write_text(
        &out.join("loss_curve.svg"),
        &charts::line_chart("training loss", &losses, &format!("config_hash={hash} seed={}", cfg.train.seed)),
    )?;
    record(out, "train", cfg, cfg.train.seed)?;
    Ok(TrainSummary {
        epochs: state.epoch,
        steps: state.step,
        final_loss: losses.last().copied(),
        checkpoint: ckpt,
        metrics,
    })
}

/// Model and effective config of a checkpoint: the stored model and
/// training settings replace the configured ones.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(MomeModel<f32>, RunConfig)> {
    let state = load_checkpoint(checkpoint)?;
    let mut effective = cfg.clone();
    effective.model = state.model.cfg.clone();
    effective.train = state.train_cfg.clone();
    effective.validate()?;
    Ok((state.model, effective))
}

/// Fully labelled evaluation of the corpus eval split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, corpus: &Path, out: &Path) -> Result<EvalReport> {
    let (model, cfg) = load_model(cfg, checkpoint)?;
    let (vocab, pairs) = load_split(corpus, Split::Eval)?;
    check_vocab(&cfg, &vocab)?;
    let set = preprocess_pairs(&cfg, pairs)?;
    let emb = embeddings(&cfg, &vocab)?;
    let opts = cfg.eval_options();
    let report = evaluate(&model, &set, &emb, &vocab, &opts)?;
    let hash = cfg.hash();
    let seed = cfg.train.seed;
    ensure_dir(out)?;
    write_text(&out.join("eval.csv"), &report_csv(&report, &vocab, &hash, seed))?;
    write_text(&out.join("eval.md"), &report_markdown(&report, &vocab, &hash, seed))?;
    write_json(
        &out.join("eval.json"),
        &serde_json::json!({ "config_hash": hash, "seed": seed, "report": report }),
    )?;
    if let Some((v, l)) = set.first() {
        let pred = sliding_window_infer(&model, v, &emb, opts.k, opts.patch, opts.overlap)?;
        let dir = out.join("slices");
        ensure_dir(&dir)?;
        let zs: Vec<usize> = cfg.eval.slices.iter().copied().filter(|&z| z < v.dims()[0]).collect();
        export_slices(v, &pred, Some(l), &zs, opts.detection.threshold, &dir, &v.id, &format!("config_hash={hash}"))?;
    }
    record(out, "eval", &cfg, seed)?;
    Ok(report)
}

/// Held-out sets for the ablation, one per configured seed.
pub fn ablation_sets(cfg: &RunConfig) -> Result<Vec<Vec<(Volume, PartialLabelSet)>>> {
    let d = &cfg.data;
    cfg.eval
        .ablation_seeds
        .iter()
        .map(|&s| {
            let c = make_corpus(&d.phantom, &d.vocabulary, 0, d.n_eval, &d.plan, s)?;
            preprocess_pairs(cfg, c.eval)
        })
        .collect()
}

/// Re-evaluates the checkpoint for every K in `1..=L`.
pub fn cmd_ablate_topk(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<Vec<AblationRow>> {
    let (model, cfg) = load_model(cfg, checkpoint)?;
    if cfg.eval.ablation_seeds.is_empty() {
        return Err(MomeError::Config("eval.ablation_seeds is empty".into()));
    }
    let vocab = cfg.data.vocabulary.clone();
    let sets = ablation_sets(&cfg)?;
    let emb = embeddings(&cfg, &vocab)?;
    let opts = cfg.eval_options();
    let l = cfg.model.experts;
    let ks: Vec<usize> = (1..=l).collect();
    let rows = ablate_topk(&model, &sets, &emb, &vocab, &ks, &opts)?;
    let full = rows.last().expect("at least one K");
    let plain = evaluate(&model, &sets[0], &emb, &vocab, &EvalOptions { k: l, ..opts })?;
    if plain.mean_dice.to_bits() != full.per_set[0].to_bits() {
        return Err(MomeError::Numeric(format!(
            "K={l} ablation row {} differs from plain evaluation {}",
            full.per_set[0], plain.mean_dice
        )));
    }
    let hash = cfg.hash();
    ensure_dir(out)?;
    write_text(&out.join("ablation.csv"), &ablation_csv(&rows, &vocab, &hash, &cfg.eval.ablation_seeds))?;
    write_text(&out.join("ablation.md"), &ablation_markdown(&rows, &vocab, &hash))?;
    let bars: Vec<(String, f64)> = rows.iter().map(|r| (format!("K={}", r.k), r.mean_dice)).collect();
    write_text(
        &out.join("ablation.svg"),
        &charts::bar_chart("mean Dice per top-K", &bars, &format!("config_hash={hash}")),
    )?;
    record(out, "ablate-topk", &cfg, cfg.train.seed)?;
    Ok(rows)
}

/// Preprocessed tiled prediction of one raw volume.
pub fn infer_volume(cfg: &RunConfig, model: &MomeModel<f32>, volume: &Volume) -> Result<(Volume, Prediction<f32>)> {
    let v = preprocess(volume, cfg.data.target_spacing, cfg.data.window)?;
    let emb = embeddings(cfg, &cfg.data.vocabulary)?;
    let opts = cfg.eval_options();
    let pred = sliding_window_infer(model, &v, &emb, opts.k, opts.patch, opts.overlap)?;
    Ok((v, pred))
}

/// Writes thresholded masks as `<id>.pred.lbl` plus the configured slices.
pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, volume: &Path, out: &Path) -> Result<PathBuf> {
    if !checkpoint.exists() {
        return Err(MomeError::io(
            checkpoint,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    let (model, cfg) = load_model(cfg, checkpoint)?;
    let raw = load_volume(volume)?;
    let (v, pred) = infer_volume(&cfg, &model, &raw)?;
    let k = pred.num_classes();
    let masks: Vec<u8> = (0..k)
        .flat_map(|c| pred.channel(c).iter().map(|&p| (p as f64 >= cfg.eval.threshold) as u8).collect::<Vec<_>>())
        .collect();
    let labels = PartialLabelSet::new(v.id.clone(), v.dims(), vec![true; k], masks)?;
    ensure_dir(out)?;
    let path = out.join(format!("{}.pred.lbl", v.id));
    save_labels(&labels, &path)?;
    let zs: Vec<usize> = cfg.eval.slices.iter().copied().filter(|&z| z < v.dims()[0]).collect();
    let hash = cfg.hash();
    export_slices(&v, &pred, None, &zs, cfg.eval.threshold, out, &v.id, &format!("config_hash={hash}"))?;
    record(out, "infer", &cfg, cfg.train.seed)?;
    Ok(path)
}

/// Collects the tables found in `dirs` into `out/report.md`.
pub fn cmd_report(dirs: &[PathBuf], out: &Path) -> Result<PathBuf> {
    let mut body = String::from("# Run report\n\n");
    let mut found = 0;
    for dir in dirs {
        if let Ok(rec) = read_json::<RunRecord>(&dir.join(RUN_RECORD)) {
            body.push_str(&format!(
                "## {} ({})\n\nconfig `{}`, seed {}\n\n",
                rec.command,
                dir.display(),
                rec.config_hash,
                rec.seed
            ));
            found += 1;
        }
        for name in ["eval.md", "ablation.md"] {
            let p = dir.join(name);
            if p.exists() {
                let text = fs::read_to_string(&p).map_err(|e| MomeError::io(&p, e))?;
                body.push_str(&text.replace("\n# ", "\n### ").replacen("# ", "### ", 1));
                body.push('\n');
                found += 1;
            }
        }
        let m = dir.join(METRICS);
        if m.exists() {
            let rows = read_metrics(&m)?;
            if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
                body.push_str(&format!(
                    "Training: {} steps, loss {:.4} → {:.4}\n\n",
                    rows.len(),
                    first.total,
                    last.total
                ));
            }
            found += 1;
        }
    }
    if found == 0 {
        return Err(MomeError::InvalidArgument("no run artifacts found in the given directories".into()));
    }
    ensure_dir(out)?;
    let path = out.join("report.md");
    write_text(&path, &body)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_split_from_flags() {
        let args = ["train", "--seed", "3", "--train.lr", "0.1", "--model.k_active=2", "--out", "x"]
            .map(String::from)
            .to_vec();
        let (rest, o) = split_overrides(args).unwrap();
        assert_eq!(rest, ["train", "--seed", "3", "--out", "x"]);
        assert_eq!(o, [("train.lr".into(), "0.1".into()), ("model.k_active".into(), "2".into())]);
        assert!(split_overrides(vec!["--train.lr".into()]).is_err());
    }

    #[test]
    fn worker_resolution() {
        assert_eq!(resolve_workers(Some(2), Some("5")).unwrap(), Some(2));
        assert_eq!(resolve_workers(None, Some("5")).unwrap(), Some(5));
        assert_eq!(resolve_workers(None, None).unwrap(), None);
        assert!(resolve_workers(None, Some("many")).is_err());
        assert!(resolve_workers(Some(0), None).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&MomeError::Config("x".into())), 2);
        assert_eq!(exit_code(&MomeError::Numeric("x".into())), 4);
        assert_eq!(exit_code(&MomeError::io("p", std::io::Error::other("x"))), 3);
        assert_eq!(exit_code(&MomeError::InvalidArgument("x".into())), 1);
    }
}
