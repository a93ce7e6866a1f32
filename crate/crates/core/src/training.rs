//! Partial-label training: loss, schedule, AdamW, the epoch loop and
//! checkpoints.

use std::f64::consts::PI;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::{ModelConfig, TrainConfig};
use crate::error::{MomeError, Result};
use crate::formats::{read_bytes, write_bytes};
use crate::head::{as_patch, MomeModel, Prediction};
use crate::loss::{masked_loss_values, LossReport};
use crate::tensor::{Scalar, Tensor};
use crate::textbranch::TextEmbedding;
use crate::types::{PartialLabelSet, Volume};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOMECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "step,epoch,lr,total,bce,dice";

/// Loss of a prediction against a partial label set of the same extent.
pub fn masked_loss<T: Scalar>(pred: &Prediction<T>, labels: &PartialLabelSet) -> Result<LossReport> {
    if pred.dims() != labels.dims() {
        return Err(MomeError::Shape(format!(
            "prediction {:?} vs labels {:?}",
            pred.dims(),
            labels.dims()
        )));
    }
    let targets = label_targets::<T>(labels);
    let k = labels.num_classes();
    let n = pred.probs.inner_len();
    let probs = pred.probs.clone().reshaped(&[pred.num_classes(), n])?;
    masked_loss_values(&probs, &targets.reshaped(&[k, n])?, labels.annotated())
}

fn label_targets<T: Scalar>(labels: &PartialLabelSet) -> Tensor<T> {
    let n: usize = labels.dims().iter().product();
    let data = labels.masks().iter().map(|&b| T::of(b as f64)).collect();
    Tensor::from_vec(&[labels.num_classes(), n], data).expect("label shape")
}

/// Linear warm-up over `warmup_fraction · total_steps`, then half-cosine
/// decay to zero.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(MomeError::OutOfRange {
            index: step,
            len: total_steps,
        });
    }
    let warm = (cfg.warmup_fraction * total_steps as f64).floor() as usize;
    if step < warm {
        return Ok(cfg.lr * step as f64 / warm as f64);
    }
    let progress = (step - warm) as f64 / (total_steps - warm) as f64;
    Ok(cfg.lr * 0.5 * (1.0 + (PI * progress).cos()))
}

/// One training example: a patch, its dense targets and annotation flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    /// `[1, D, W, H]`
    pub patch: Tensor<T>,
    /// `[K, D·W·H]`
    pub targets: Tensor<T>,
    pub annotated: Vec<bool>,
}

impl<T: Scalar> Sample<T> {
    /// Whole volume as one sample.
    pub fn whole(volume: &Volume, labels: &PartialLabelSet) -> Result<Self> {
        if volume.dims() != labels.dims() {
            return Err(MomeError::Shape(format!(
                "volume {:?} vs labels {:?}",
                volume.dims(),
                labels.dims()
            )));
        }
        let [d, w, h] = volume.dims();
        Ok(Self {
            patch: Tensor::from_vec(&[1, d, w, h], volume.voxels().iter().map(|&v| T::of(v as f64)).collect())?,
            targets: label_targets(labels),
            annotated: labels.annotated().to_vec(),
        })
    }
}

/// Loss and parameter gradients (in store order) for one sample.
pub fn loss_and_grads<T: Scalar>(
    model: &MomeModel<T>,
    sample: &Sample<T>,
    embeddings: &[TextEmbedding],
    k: usize,
) -> Result<(LossReport, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let x = g.constant(as_patch(&sample.patch)?);
    let trace = model.forward_graph(&mut g, &p, x, embeddings, k)?;
    let (loss, report) = g.masked_loss(trace.probs, sample.targets.clone(), sample.annotated.clone())?;
    let mut grads = g.backward(loss);
    let out = model
        .params
        .ids()
        .map(|id| {
            grads
                .take(p.get(id))
                .unwrap_or_else(|| Tensor::zeros(model.params.get(id).shape()))
        })
        .collect();
    Ok((report, out))
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(model: &MomeModel<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = model.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn update(&mut self, model: &mut MomeModel<f32>, grads: &[Tensor<f32>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let ids: Vec<_> = model.params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = model.params.get_mut(id).data_mut();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g[j] as f64;
                let mj = cfg.beta1 * m[j] as f64 + (1.0 - cfg.beta1) * gj;
                let vj = cfg.beta2 * v[j] as f64 + (1.0 - cfg.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let step = (mj / c1) / ((vj / c2).sqrt() + cfg.adam_eps);
                let pj = p[j] as f64;
                p[j] = (pj - lr * cfg.weight_decay * pj - lr * step) as f32;
            }
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: MomeModel<f32>,
    pub optimizer: AdamW,
    pub train_cfg: TrainConfig,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
}

impl TrainState {
    pub fn new(model_cfg: ModelConfig, train_cfg: TrainConfig) -> Result<Self> {
        train_cfg.validate()?;
        let model = MomeModel::new(model_cfg, train_cfg.seed)?;
        let optimizer = AdamW::new(&model);
        let rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x7472_6169_6e5f_7267);
        Ok(Self {
            model,
            optimizer,
            train_cfg,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    /// One AdamW update from the mean gradient over `batch`.
    pub fn train_step(&mut self, batch: &[Sample<f32>], embeddings: &[TextEmbedding], lr: f64) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(MomeError::InvalidArgument("empty batch".into()));
        }
        let k = self.model.cfg.train_k();
        let mut sum: Option<Vec<Tensor<f32>>> = None;
        let mut reports = Vec::with_capacity(batch.len());
        for sample in batch {
            let (report, grads) = loss_and_grads(&self.model, sample, embeddings, k)?;
            if !report.total.is_finite() {
                return Err(MomeError::Numeric(format!(
                    "loss is {} at step {} (bce {}, dice {})",
                    report.total, self.step, report.bce, report.dice
                )));
            }
            if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
                let name = self.model.params.iter().nth(i).map_or("?", |(n, _)| n);
                return Err(MomeError::Numeric(format!(
                    "non-finite gradient for {name} at step {}",
                    self.step
                )));
            }
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
            }
            reports.push(report);
        }
        let mut grads = sum.expect("non-empty batch");
        if batch.len() > 1 {
            let inv = 1.0 / batch.len() as f32;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
        }
        self.optimizer.update(&mut self.model, &grads, lr, &self.train_cfg);
        self.step += 1;
        Ok(mean_report(&reports))
    }
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    if reports.len() == 1 {
        return reports[0].clone();
    }
    let n = reports.len() as f64;
    let k = reports[0].per_class.len();
    LossReport {
        total: reports.iter().map(|r| r.total).sum::<f64>() / n,
        bce: reports.iter().map(|r| r.bce).sum::<f64>() / n,
        dice: reports.iter().map(|r| r.dice).sum::<f64>() / n,
        per_class: (0..k)
            .map(|c| {
                let vals: Vec<f64> = reports.iter().map(|r| r.per_class[c]).filter(|v| !v.is_nan()).collect();
                if vals.is_empty() {
                    f64::NAN
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            })
            .collect(),
    }
}

/// Origin of a `patch`-long window on an axis of length `n`: centred and
/// allowed to go negative (zero padding) when the axis is shorter than
/// the patch, otherwise clamped inside.
fn window_origin(center: isize, n: usize, patch: usize) -> isize {
    if n <= patch {
        return -(((patch - n) / 2) as isize);
    }
    (center - (patch / 2) as isize).clamp(0, (n - patch) as isize)
}

/// Random crop, centred on an annotated foreground voxel with probability
/// `foreground_prob`, otherwise uniform. Voxels outside the volume are
/// zero in both image and targets.
pub fn sample_patch<T: Scalar>(
    rng: &mut ChaCha8Rng,
    volume: &Volume,
    labels: &PartialLabelSet,
    patch: [usize; 3],
    foreground_prob: f64,
) -> Result<Sample<T>> {
    let dims = volume.dims();
    if dims != labels.dims() {
        return Err(MomeError::Shape(format!("volume {dims:?} vs labels {:?}", labels.dims())));
    }
    let n: usize = dims.iter().product();
    let want_fg = rng.gen_bool(foreground_prob);
    let mut center = None;
    if want_fg {
        let fg: Vec<usize> = (0..n)
            .filter(|&x| (0..labels.num_classes()).any(|k| labels.annotated()[k] && labels.mask(k)[x] == 1))
            .collect();
        if !fg.is_empty() {
            let x = fg[rng.gen_range(0..fg.len())];
            center = Some([x / (dims[1] * dims[2]), (x / dims[2]) % dims[1], x % dims[2]].map(|c| c as isize));
        }
    }
    let center = match center {
        Some(c) => c,
        None => {
            let mut c = [0isize; 3];
            for a in 0..3 {
                let lo = (patch[a] / 2) as isize;
                let hi = lo + dims[a].saturating_sub(patch[a]) as isize;
                c[a] = rng.gen_range(lo..=hi);
            }
            c
        }
    };
    let origin: [isize; 3] = [0, 1, 2].map(|a| window_origin(center[a], dims[a], patch[a]));
    let k = labels.num_classes();
    let np: usize = patch.iter().product();
    let mut img = vec![T::zero(); np];
    let mut tgt = vec![T::zero(); k * np];
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
                if h < 0 || h >= dims[2] as isize {
                    continue;
                }
                let src = (d as usize * dims[1] + w as usize) * dims[2] + h as usize;
                let dst = (pd * patch[1] + pw) * patch[2] + ph;
                img[dst] = T::of(volume.voxels()[src] as f64);
                for c in 0..k {
                    tgt[c * np + dst] = T::of(labels.masks()[c * n + src] as f64);
                }
            }
        }
    }
    Ok(Sample {
        patch: Tensor::from_vec(&[1, patch[0], patch[1], patch[2]], img)?,
        targets: Tensor::from_vec(&[k, np], tgt)?,
        annotated: labels.annotated().to_vec(),
    })
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.epoch, self.lr, self.total, self.bce, self.dice)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || MomeError::InvalidArgument(format!("malformed metrics row {line:?}"));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            epoch: f[1].parse().map_err(|_| bad())?,
            lr: num(f[2])?,
            total: num(f[3])?,
            bce: num(f[4])?,
            dice: num(f[5])?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = String::from_utf8_lossy(&read_bytes(path)?).into_owned();
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(MomeError::Metadata {
            path: path.into(),
            detail: format!("expected header {METRICS_HEADER:?}"),
        });
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRow::parse).collect()
}

/// A preprocessed training volume with its partial labels.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub volume: Volume,
    pub labels: PartialLabelSet,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub checkpoint: Option<PathBuf>,
    /// Rows are appended; the header is written when the file is new.
    pub metrics: Option<PathBuf>,
    /// Stop after this many epochs in this call (the schedule still spans
    /// `epochs`).
    pub stop_after: Option<usize>,
}

pub fn steps_per_epoch(items: usize, batch_size: usize) -> usize {
    items.div_ceil(batch_size)
}

/// Runs the remaining epochs of `state`. Returns the rows logged by this
/// call.
pub fn train(
    state: &mut TrainState,
    items: &[TrainItem],
    embeddings: &[TextEmbedding],
    opts: &TrainOptions,
) -> Result<Vec<MetricsRow>> {
    let cfg = state.train_cfg.clone();
    cfg.validate()?;
    state.model.cfg.check_patch(cfg.patch)?;
    if items.is_empty() && state.epoch < cfg.epochs {
        return Err(MomeError::InvalidArgument("no training volumes".into()));
    }
    let per_epoch = steps_per_epoch(items.len(), cfg.batch_size);
    let total_steps = cfg.epochs * per_epoch;
    let mut metrics = match &opts.metrics {
        Some(path) => Some(open_metrics(path)?),
        None => None,
    };
    let mut rows = Vec::new();
    let last_epoch = opts
        .stop_after
        .map_or(cfg.epochs, |n| (state.epoch + n).min(cfg.epochs));
    while state.epoch < last_epoch {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| sample_patch(&mut state.rng, &items[i].volume, &items[i].labels, cfg.patch, cfg.foreground_prob))
                .collect::<Result<Vec<_>>>()?;
            let lr = lr_at(state.step, total_steps, &cfg)?;
            let report = state.train_step(&batch, embeddings, lr)?;
            let row = MetricsRow {
                step: state.step - 1,
                epoch: state.epoch,
                lr,
                total: report.total,
                bce: report.bce,
                dice: report.dice,
            };
            if let Some((file, path)) = metrics.as_mut() {
                let path: &Path = path;
                writeln!(file, "{}", row.csv()).map_err(|e| MomeError::io(path, e))?;
            }
            rows.push(row);
        }
        state.epoch += 1;
        if let Some(path) = &opts.checkpoint {
            if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
                save_checkpoint(state, path)?;
            }
        }
    }
    if let Some(path) = &opts.checkpoint {
        save_checkpoint(state, path)?;
    }
    Ok(rows)
}

fn open_metrics(path: &Path) -> Result<(std::fs::File, PathBuf)> {
    let fresh = !path.exists();
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| MomeError::io(path, e))?;
    if fresh {
        writeln!(file, "{METRICS_HEADER}").map_err(|e| MomeError::io(path, e))?;
    }
    Ok((file, path.to_path_buf()))
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    step: usize,
    adam_t: u64,
    rng: RngState,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_array(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(buf, name.len());
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, t.shape().len());
    for &d in t.shape() {
        put_u32(buf, d);
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// `MOMECKPT`, version (u32 LE), JSON metadata length and bytes, array
/// count, then per array: name, rank, dims and f32 LE data. Parameters
/// are stored under their names; optimizer moments under `adam.m.<name>`
/// and `adam.v.<name>`.
pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        model: state.model.cfg.clone(),
        train: state.train_cfg.clone(),
        epoch: state.epoch,
        step: state.step,
        adam_t: state.optimizer.t,
        rng: RngState {
            seed: state.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
    };
    let meta = serde_json::to_vec(&meta).map_err(|e| MomeError::Config(e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, meta.len());
    buf.extend_from_slice(&meta);
    let params = &state.model.params;
    put_u32(&mut buf, 3 * params.len());
    for (name, t) in params.iter() {
        put_array(&mut buf, name, t);
    }
    for (i, (name, _)) in params.iter().enumerate() {
        put_array(&mut buf, &format!("adam.m.{name}"), &state.optimizer.m[i]);
    }
    for (i, (name, _)) in params.iter().enumerate() {
        put_array(&mut buf, &format!("adam.v.{name}"), &state.optimizer.v[i]);
    }
    Ok(buf)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let tmp = path.with_extension("tmp");
    write_bytes(&tmp, &bytes)?;
    std::fs::rename(&tmp, path).map_err(|e| MomeError::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(MomeError::Truncated {
                path: self.path.into(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<TrainState> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(MomeError::BadMagic {
            path: path.into(),
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
        });
    }
    let mut c = Cursor { bytes, pos: 8, path };
    let version = c.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(MomeError::Metadata {
            path: path.into(),
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let meta_len = c.u32()?;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(meta_len)?).map_err(|e| MomeError::Metadata {
        path: path.into(),
        detail: e.to_string(),
    })?;
    let count = c.u32()?;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = c.u32()?;
        let name = String::from_utf8(c.take(name_len)?.to_vec()).map_err(|e| MomeError::Metadata {
            path: path.into(),
            detail: e.to_string(),
        })?;
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        arrays.push((name, Tensor::from_vec(&shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(MomeError::DimensionMismatch {
            path: path.into(),
            detail: format!("{} trailing bytes", bytes.len() - c.pos),
        });
    }

    let mut model = MomeModel::<f32>::new(meta.model.clone(), meta.train.seed)?;
    let (params, rest): (Vec<_>, Vec<_>) = arrays.into_iter().partition(|(n, _)| !n.starts_with("adam."));
    model.params.assign_from(&params)?;
    let mut optimizer = AdamW::new(&model);
    optimizer.t = meta.adam_t;
    let mut seen = 0;
    for (name, t) in rest {
        let (slot, pname) = if let Some(p) = name.strip_prefix("adam.m.") {
            (&mut optimizer.m, p)
        } else if let Some(p) = name.strip_prefix("adam.v.") {
            (&mut optimizer.v, p)
        } else {
            return Err(MomeError::Metadata {
                path: path.into(),
                detail: format!("unknown array {name}"),
            });
        };
        let id = model.params.find(pname).ok_or_else(|| MomeError::Metadata {
            path: path.into(),
            detail: format!("moment for unknown parameter {pname}"),
        })?;
        if t.shape() != model.params.get(id).shape() {
            return Err(MomeError::Shape(format!("moment {name} has shape {:?}", t.shape())));
        }
        slot[id.index()] = t;
        seen += 1;
    }
    if seen != 2 * model.params.len() {
        return Err(MomeError::Metadata {
            path: path.into(),
            detail: format!("expected {} moment arrays, found {seen}", 2 * model.params.len()),
        });
    }

    let seed_bytes: Vec<u8> = (0..meta.rng.seed.len() / 2)
        .map(|i| u8::from_str_radix(&meta.rng.seed[2 * i..2 * i + 2], 16))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| MomeError::Metadata {
            path: path.into(),
            detail: e.to_string(),
        })?;
    let seed: [u8; 32] = seed_bytes.try_into().map_err(|_| MomeError::Metadata {
        path: path.into(),
        detail: "rng seed must be 32 bytes".into(),
    })?;
    let word_pos: u128 = meta.rng.word_pos.parse().map_err(|_| MomeError::Metadata {
        path: path.into(),
        detail: "bad rng word position".into(),
    })?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(meta.rng.stream);
    rng.set_word_pos(word_pos);

    Ok(TrainState {
        model,
        optimizer,
        train_cfg: meta.train,
        rng,
        epoch: meta.epoch,
        step: meta.step,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&read_bytes(path)?, path)
}
