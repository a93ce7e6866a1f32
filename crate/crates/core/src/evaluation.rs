//! Overlap metrics, scan-level tumor detection, tiled inference, the
//! top-K ablation and report rendering.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MomeError, Result};
use crate::formats::write_bytes;
use crate::head::{MomeModel, Prediction};
use crate::tensor::Tensor;
use crate::textbranch::TextEmbedding;
use crate::types::{ClassKind, ClassVocabulary, PartialLabelSet, Volume};

/// `2|A∩B| / (|A| + |B|)`, and 1 when both masks are empty.
pub fn dice(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(MomeError::Shape(format!("mask lengths {} and {}", pred.len(), gt.len())));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        a += (p != 0) as usize;
        b += (g != 0) as usize;
        inter += (p != 0 && g != 0) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

pub fn binarize(probs: &[f32], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| (p as f64 >= threshold) as u8).collect()
}

/// Window origins along one axis: stride `⌊patch·(1 − overlap)⌋`, the last
/// window flush with the end. An axis shorter than the patch gets one
/// centred window (negative origin, zero padded).
pub fn tile_origins(n: usize, patch: usize, overlap: f64) -> Vec<isize> {
    if n <= patch {
        return vec![-(((patch - n) / 2) as isize)];
    }
    let stride = ((patch as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let last = n - patch;
    let mut out: Vec<isize> = (0..).map(|i| i * stride).take_while(|&o| o < last).map(|o| o as isize).collect();
    out.push(last as isize);
    out
}

fn extract(volume: &Volume, origin: [isize; 3], patch: [usize; 3]) -> Tensor<f32> {
    let dims = volume.dims();
    let mut out = vec![0.0f32; patch.iter().product()];
    for pd in 0..patch[0] {
        let d = origin[0] + pd as isize;
        if d < 0 || d >= dims[0] as isize {
            continue;
        }
        for pw in 0..patch[1] {
            let w = origin[1] + pw as isize;
            if w < 0 || w >= dims[1] as isize {
                continue;
            }
            for ph in 0..patch[2] {
                let h = origin[2] + ph as isize;
                if h >= 0 && h < dims[2] as isize {
                    out[(pd * patch[1] + pw) * patch[2] + ph] = volume.at(d as usize, w as usize, h as usize);
                }
            }
        }
    }
    Tensor::from_vec(&[1, patch[0], patch[1], patch[2]], out).expect("patch shape")
}

/// Tiled inference with uniform averaging over overlapping windows.
pub fn sliding_window_infer(
    model: &MomeModel<f32>,
    volume: &Volume,
    embeddings: &[TextEmbedding],
    k: usize,
    patch: [usize; 3],
    overlap: f64,
) -> Result<Prediction<f32>> {
    if !(0.0..=0.75).contains(&overlap) {
        return Err(MomeError::InvalidArgument(format!("overlap {overlap} outside [0, 0.75]")));
    }
    let dims = volume.dims();
    let axes: Vec<Vec<isize>> = (0..3).map(|a| tile_origins(dims[a], patch[a], overlap)).collect();
    let mut tiles = Vec::new();
    for &d in &axes[0] {
        for &w in &axes[1] {
            for &h in &axes[2] {
                tiles.push([d, w, h]);
            }
        }
    }
    let preds: Vec<Prediction<f32>> = tiles
        .par_iter()
        .map(|&o| model.forward(&extract(volume, o, patch), embeddings, k))
        .collect::<Result<_>>()?;

    let classes = embeddings.len();
    let n: usize = dims.iter().product();
    let np: usize = patch.iter().product();
    let mut sum = vec![0.0f64; classes * n];
    let mut count = vec![0u32; n];
    for (o, pred) in tiles.iter().zip(&preds) {
        for pd in 0..patch[0] {
            let d = o[0] + pd as isize;
            if d < 0 || d >= dims[0] as isize {
                continue;
            }
            for pw in 0..patch[1] {
                let w = o[1] + pw as isize;
                if w < 0 || w >= dims[1] as isize {
                    continue;
                }
                for ph in 0..patch[2] {
                    let h = o[2] + ph as isize;
                    if h < 0 || h >= dims[2] as isize {
                        continue;
                    }
                    let dst = (d as usize * dims[1] + w as usize) * dims[2] + h as usize;
                    let src = (pd * patch[1] + pw) * patch[2] + ph;
                    count[dst] += 1;
                    for c in 0..classes {
                        sum[c * n + dst] += pred.probs.data()[c * np + src] as f64;
                    }
                }
            }
        }
    }
    let probs = sum
        .iter()
        .enumerate()
        .map(|(i, &s)| (s / count[i % n] as f64) as f32)
        .collect();
    Ok(Prediction {
        probs: Tensor::from_vec(&[classes, dims[0], dims[1], dims[2]], probs)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRule {
    pub threshold: f64,
    pub min_voxels: usize,
}

impl Default for DetectionRule {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_voxels: 8,
        }
    }
}

/// Scan-level decision: at least `min_voxels` voxels of the tumor channel
/// reach `threshold`.
pub fn detect(pred: &Prediction<f32>, vocab: &ClassVocabulary, k_tumor: usize, rule: DetectionRule) -> Result<bool> {
    if vocab.get(k_tumor)?.kind != ClassKind::Tumor {
        return Err(MomeError::InvalidArgument(format!(
            "class {:?} is not a tumor class",
            vocab.get(k_tumor)?.name
        )));
    }
    let hits = pred
        .channel(k_tumor)
        .iter()
        .filter(|&&p| p as f64 >= rule.threshold)
        .count();
    Ok(hits >= rule.min_voxels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub harmonic: f64,
}

pub fn harmonic_mean(sensitivity: f64, specificity: f64) -> f64 {
    if sensitivity + specificity > 0.0 {
        2.0 * sensitivity * specificity / (sensitivity + specificity)
    } else {
        0.0
    }
}

/// Sensitivity over tumor-bearing cases, specificity over tumor-free ones.
pub fn detection_metrics(decisions: &[bool], truth: &[bool]) -> Result<DetectionMetrics> {
    if decisions.len() != truth.len() {
        return Err(MomeError::Shape(format!(
            "{} decisions for {} cases",
            decisions.len(),
            truth.len()
        )));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MomeError::InvalidArgument(
            "detection metrics need tumor-bearing and tumor-free cases".into(),
        ));
    }
    let tp = decisions.iter().zip(truth).filter(|(&d, &t)| d && t).count();
    let tn = decisions.iter().zip(truth).filter(|(&d, &t)| !d && !t).count();
    let sensitivity = tp as f64 / pos as f64;
    let specificity = tn as f64 / neg as f64;
    Ok(DetectionMetrics {
        sensitivity,
        specificity,
        harmonic: harmonic_mean(sensitivity, specificity),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub patch: [usize; 3],
    pub overlap: f64,
    /// Top-K width used at inference.
    pub k: usize,
    pub detection: DetectionRule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TumorDetection {
    pub class_index: usize,
    pub metrics: Option<DetectionMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean Dice over the volumes whose ground truth contains the class;
    /// `None` when no volume does.
    pub per_class_dice: Vec<Option<f64>>,
    pub mean_dice: f64,
    pub organ_dice: f64,
    pub tumor_dice: f64,
    pub detection: Vec<TumorDetection>,
    /// Per volume, per class Dice (`None` where the class is absent).
    pub per_volume: Vec<(String, Vec<Option<f64>>)>,
    pub options: EvalOptions,
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Fully labelled evaluation of every volume.
pub fn evaluate(
    model: &MomeModel<f32>,
    set: &[(Volume, PartialLabelSet)],
    embeddings: &[TextEmbedding],
    vocab: &ClassVocabulary,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let k = vocab.len();
    if embeddings.len() != k {
        return Err(MomeError::ClassCount {
            expected: k,
            found: embeddings.len(),
        });
    }
    let preds: Vec<Prediction<f32>> = set
        .iter()
        .map(|(v, _)| sliding_window_infer(model, v, embeddings, opts.k, opts.patch, opts.overlap))
        .collect::<Result<_>>()?;
    summarize(&preds, set, vocab, opts)
}

/// Metrics of precomputed predictions.
pub fn summarize(
    preds: &[Prediction<f32>],
    set: &[(Volume, PartialLabelSet)],
    vocab: &ClassVocabulary,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let k = vocab.len();
    let mut per_volume = Vec::with_capacity(set.len());
    for (pred, (v, gt)) in preds.iter().zip(set) {
        if gt.num_classes() != k || pred.num_classes() != k {
            return Err(MomeError::ClassCount {
                expected: k,
                found: gt.num_classes().min(pred.num_classes()),
            });
        }
        if gt.annotated().iter().any(|&a| !a) {
            return Err(MomeError::InvalidLabels(format!(
                "evaluation volume {} is not fully annotated",
                v.id
            )));
        }
        let row = (0..k)
            .map(|c| {
                let truth = gt.mask(c);
                if truth.contains(&1) {
                    dice(&binarize(pred.channel(c), opts.detection.threshold), truth).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        per_volume.push((v.id.clone(), row));
    }
    let per_class_dice: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let vals: Vec<f64> = per_volume.iter().filter_map(|(_, r)| r[c]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    let of_kind = |kind| {
        mean_of(
            vocab
                .indices_of(kind)
                .into_iter()
                .filter_map(|c| per_class_dice[c]),
        )
    };
    let mut detection = Vec::new();
    for c in vocab.indices_of(ClassKind::Tumor) {
        let decisions = preds
            .iter()
            .map(|p| detect(p, vocab, c, opts.detection))
            .collect::<Result<Vec<_>>>()?;
        let truth: Vec<bool> = set.iter().map(|(_, gt)| gt.mask(c).contains(&1)).collect();
        detection.push(TumorDetection {
            class_index: c,
            metrics: detection_metrics(&decisions, &truth).ok(),
        });
    }
    Ok(EvalReport {
        mean_dice: mean_of(per_class_dice.iter().flatten().copied()),
        organ_dice: of_kind(ClassKind::Organ),
        tumor_dice: of_kind(ClassKind::Tumor),
        per_class_dice,
        detection,
        per_volume,
        options: opts.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    /// Per class Dice averaged over the evaluation sets.
    pub per_class: Vec<Option<f64>>,
    pub mean_dice: f64,
    /// Mean Dice on each evaluation set.
    pub per_set: Vec<f64>,
}

/// Re-evaluates `model` on every set for each top-K width.
pub fn ablate_topk(
    model: &MomeModel<f32>,
    sets: &[Vec<(Volume, PartialLabelSet)>],
    embeddings: &[TextEmbedding],
    vocab: &ClassVocabulary,
    ks: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let o = EvalOptions { k, ..opts.clone() };
        let reports = sets
            .iter()
            .map(|s| evaluate(model, s, embeddings, vocab, &o))
            .collect::<Result<Vec<_>>>()?;
        let per_class = (0..vocab.len())
            .map(|c| {
                let v: Vec<f64> = reports.iter().filter_map(|r| r.per_class_dice[c]).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        let per_set: Vec<f64> = reports.iter().map(|r| r.mean_dice).collect();
        rows.push(AblationRow {
            k,
            per_class,
            mean_dice: mean_of(per_set.iter().copied()),
            per_set,
        });
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

pub fn report_csv(r: &EvalReport, vocab: &ClassVocabulary, config_hash: &str, seed: u64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# config_hash={config_hash} seed={seed} k={} threshold={} min_voxels={}",
        r.options.k, r.options.detection.threshold, r.options.detection.min_voxels);
    let _ = writeln!(s, "class,name,kind,dice,sensitivity,specificity,harmonic");
    for (c, e) in vocab.entries().iter().enumerate() {
        let det = r.detection.iter().find(|d| d.class_index == c).and_then(|d| d.metrics);
        let _ = writeln!(
            s,
            "{c},{},{},{},{},{},{}",
            e.name,
            kind_name(e.kind),
            fmt_opt(r.per_class_dice[c]),
            fmt_opt(det.map(|m| m.sensitivity)),
            fmt_opt(det.map(|m| m.specificity)),
            fmt_opt(det.map(|m| m.harmonic)),
        );
    }
    let _ = writeln!(s, "mean,all,,{:.6},,,", r.mean_dice);
    let _ = writeln!(s, "mean,organ,,{:.6},,,", r.organ_dice);
    let _ = writeln!(s, "mean,tumor,,{:.6},,,", r.tumor_dice);
    s
}

fn kind_name(k: ClassKind) -> &'static str {
    match k {
        ClassKind::Organ => "organ",
        ClassKind::Tumor => "tumor",
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{:.2}", 100.0 * x))
}

pub fn report_markdown(r: &EvalReport, vocab: &ClassVocabulary, config_hash: &str, seed: u64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Evaluation\n");
    let _ = writeln!(
        s,
        "config `{config_hash}`, seed {seed}, top-K {}, detection threshold {} with at least {} voxels\n",
        r.options.k, r.options.detection.threshold, r.options.detection.min_voxels
    );
    let _ = writeln!(s, "| class | kind | Dice (%) |");
    let _ = writeln!(s, "|---|---|---|");
    for (c, e) in vocab.entries().iter().enumerate() {
        let _ = writeln!(s, "| {} | {} | {} |", e.name, kind_name(e.kind), pct(r.per_class_dice[c]));
    }
    let _ = writeln!(s, "| **mean** | | {} |", pct(Some(r.mean_dice)));
    let _ = writeln!(s, "| organ mean | | {} |", pct(Some(r.organ_dice)));
    let _ = writeln!(s, "| tumor mean | | {} |\n", pct(Some(r.tumor_dice)));
    let _ = writeln!(s, "| tumor | Sen. | Spec. | Harm. |");
    let _ = writeln!(s, "|---|---|---|---|");
    for d in &r.detection {
        let m = d.metrics;
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} |",
            vocab.entries()[d.class_index].name,
            pct(m.map(|m| m.sensitivity)),
            pct(m.map(|m| m.specificity)),
            pct(m.map(|m| m.harmonic)),
        );
    }
    s
}

pub fn ablation_csv(rows: &[AblationRow], vocab: &ClassVocabulary, config_hash: &str, seeds: &[u64]) -> String {
    let mut s = String::new();
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(s, "# config_hash={config_hash} seeds={}", seeds.join(";"));
    let names: Vec<&str> = vocab.entries().iter().map(|e| e.name.as_str()).collect();
    let _ = writeln!(s, "k,{},average", names.join(","));
    for r in rows {
        let cells: Vec<String> = r.per_class.iter().map(|&v| fmt_opt(v)).collect();
        let _ = writeln!(s, "{},{},{:.6}", r.k, cells.join(","), r.mean_dice);
    }
    s
}

pub fn ablation_markdown(rows: &[AblationRow], vocab: &ClassVocabulary, config_hash: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Top-K ablation\n\nconfig `{config_hash}`\n");
    let names: Vec<&str> = vocab.entries().iter().map(|e| e.name.as_str()).collect();
    let _ = writeln!(s, "| K | {} | Avg. |", names.join(" | "));
    let _ = writeln!(s, "|---|{}---|", "---|".repeat(names.len()));
    for r in rows {
        let cells: Vec<String> = r.per_class.iter().map(|&v| pct(v)).collect();
        let _ = writeln!(s, "| {} | {} | {} |", r.k, cells.join(" | "), pct(Some(r.mean_dice)));
    }
    s
}

/// Gray level used for class `k` in overlays.
pub fn overlay_level(k: usize) -> u8 {
    255u8.saturating_sub((25 * k) as u8)
}

fn pgm(width: usize, height: usize, comment: &str, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n# {comment}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Writes `<prefix>_z<z>_{input,pred,gt}.pgm` for every requested slice
/// along the first axis. `volume` holds intensities in `[0, 1]`.
pub fn export_slices(
    volume: &Volume,
    pred: &Prediction<f32>,
    gt: Option<&PartialLabelSet>,
    z_indices: &[usize],
    threshold: f64,
    dir: &Path,
    prefix: &str,
    comment: &str,
) -> Result<Vec<PathBuf>> {
    let [d, w, h] = volume.dims();
    if pred.dims() != volume.dims() || gt.is_some_and(|g| g.dims() != volume.dims()) {
        return Err(MomeError::Shape("slice export inputs disagree in extent".into()));
    }
    let plane = w * h;
    let n = d * plane;
    let mut written = Vec::new();
    for &z in z_indices {
        if z >= d {
            return Err(MomeError::OutOfRange { index: z, len: d });
        }
        let input: Vec<u8> = volume.voxels()[z * plane..(z + 1) * plane]
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let mut predicted = input.clone();
        for (i, px) in predicted.iter_mut().enumerate() {
            let mut best: Option<(usize, f32)> = None;
            for c in 0..pred.num_classes() {
                let p = pred.channel(c)[z * plane + i];
                if p as f64 >= threshold && best.is_none_or(|(_, b)| p > b) {
                    best = Some((c, p));
                }
            }
            if let Some((c, _)) = best {
                *px = overlay_level(c);
            }
        }
        let mut images = vec![("input", input.clone()), ("pred", predicted)];
        if let Some(gt) = gt {
            let mut truth = input;
            for (i, px) in truth.iter_mut().enumerate() {
                if let Some(c) = (0..gt.num_classes()).rev().find(|&c| gt.masks()[c * n + z * plane + i] == 1) {
                    *px = overlay_level(c);
                }
            }
            images.push(("gt", truth));
        }
        for (tag, pixels) in images {
            let path = dir.join(format!("{prefix}_z{z:03}_{tag}.pgm"));
            write_bytes(&path, &pgm(h, w, comment, &pixels))?;
            written.push(path);
        }
    }
    Ok(written)
}
