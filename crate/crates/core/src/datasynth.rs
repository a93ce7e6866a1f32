//! Procedural abdominal phantoms and partially labelled multi-source
//! corpora built from them.
//!
//! Coordinates are grid fractions: voxel `i` of an axis of length `n` sits
//! at `(i + 0.5) / n`. Organs are axis-aligned ellipsoids, tumors are
//! spheres clipped to their host organ.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MomeError, Result};
use crate::kernels::Trilinear;
use crate::types::{
    ClassKind, ClassVocabulary, DatasetEntry, DatasetManifest, PartialLabelSet, Split, Volume,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub class_index: usize,
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub intensity_mean: f64,
    pub intensity_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TumorSpec {
    pub class_index: usize,
    pub host: usize,
    pub radius_range: [f64; 2],
    pub intensity_offset: f64,
    /// Chance that a generated volume carries this tumor.
    pub presence_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    /// Maximal centre shift per axis, as a grid fraction.
    pub center: f64,
    /// Maximal relative radius change.
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub grid: [usize; 3],
    pub spacing_mm: f64,
    pub background_mean: f64,
    pub background_sd: f64,
    pub noise_sd: f64,
    pub organs: Vec<OrganSpec>,
    pub tumors: Vec<TumorSpec>,
    pub jitter: Jitter,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let organ = |class_index, center, radii, intensity_mean| OrganSpec {
            class_index,
            center,
            radii,
            intensity_mean,
            intensity_sd: 10.0,
        };
        let tumor = |class_index, host, radius_range, intensity_offset| TumorSpec {
            class_index,
            host,
            radius_range,
            intensity_offset,
            presence_prob: 0.7,
        };
        Self {
            grid: [32, 32, 32],
            spacing_mm: 1.5,
            background_mean: -60.0,
            background_sd: 15.0,
            noise_sd: 20.0,
            organs: vec![
                organ(0, [0.5, 0.32, 0.35], [0.22, 0.16, 0.2], 100.0),
                organ(1, [0.5, 0.72, 0.3], [0.14, 0.11, 0.13], 190.0),
                organ(2, [0.5, 0.72, 0.72], [0.14, 0.1, 0.12], 140.0),
                organ(3, [0.5, 0.35, 0.75], [0.1, 0.17, 0.09], 40.0),
            ],
            tumors: vec![
                tumor(4, 0, [0.07, 0.11], -70.0),
                tumor(5, 1, [0.05, 0.08], -90.0),
            ],
            jitter: Jitter {
                center: 0.03,
                radius: 0.1,
            },
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self, vocab: &ClassVocabulary) -> Result<()> {
        let bad = |m: String| Err(MomeError::Config(m));
        if self.grid.iter().any(|&g| g == 0) || !(self.spacing_mm > 0.0) {
            return bad("phantom grid and spacing must be positive".into());
        }
        if self.noise_sd < 0.0 || self.background_sd < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        if !(0.0..0.5).contains(&self.jitter.center) || !(0.0..1.0).contains(&self.jitter.radius) {
            return bad("jitter out of range".into());
        }
        for (k, entry) in vocab.entries().iter().enumerate() {
            let organs = self.organs.iter().filter(|o| o.class_index == k).count();
            let tumors = self.tumors.iter().filter(|t| t.class_index == k).count();
            let ok = match entry.kind {
                ClassKind::Organ => organs == 1 && tumors == 0,
                ClassKind::Tumor => organs == 0 && tumors == 1,
            };
            if !ok {
                return bad(format!("class {:?} needs exactly one matching phantom shape", entry.name));
            }
        }
        if self.organs.len() + self.tumors.len() != vocab.len() {
            return bad("phantom shapes reference classes outside the vocabulary".into());
        }
        for o in &self.organs {
            for a in 0..3 {
                let reach = self.jitter.center + o.radii[a] * (1.0 + self.jitter.radius);
                if o.radii[a] <= 0.0 || o.center[a] - reach < 0.0 || o.center[a] + reach > 1.0 {
                    return bad(format!("organ of class {} does not fit the grid", o.class_index));
                }
            }
        }
        for t in &self.tumors {
            let host = self.organs.iter().find(|o| o.class_index == t.host);
            let Some(host) = host else {
                return bad(format!("tumor class {} has no host organ shape", t.class_index));
            };
            if vocab.get(t.class_index)?.host != Some(t.host) {
                return bad(format!("tumor class {} host disagrees with the vocabulary", t.class_index));
            }
            let min_host = host.radii.iter().copied().fold(f64::INFINITY, f64::min) * (1.0 - self.jitter.radius);
            let [lo, hi] = t.radius_range;
            if !(0.0 < lo && lo <= hi && hi < min_host) {
                return bad(format!(
                    "tumor class {} radius range {:?} must lie below host radius {min_host}",
                    t.class_index, t.radius_range
                ));
            }
            if !(0.0..=1.0).contains(&t.presence_prob) {
                return bad("tumor presence probability outside [0, 1]".into());
            }
        }
        Ok(())
    }
}

/// Analytic parameters of one generated shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub class_index: usize,
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub present: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    /// Every class annotated.
    pub truth: PartialLabelSet,
    pub shapes: Vec<ShapeRecord>,
}

fn coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

fn inside(p: [f64; 3], center: [f64; 3], radii: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum::<f64>() <= 1.0
}

/// Mask of each shape, rasterised from its analytic record. Tumor shapes
/// are clipped to their host.
pub fn rasterize(spec: &PhantomSpec, shapes: &[ShapeRecord], num_classes: usize) -> Vec<u8> {
    let [d, w, h] = spec.grid;
    let n = d * w * h;
    let mut masks = vec![0u8; num_classes * n];
    let host_of = |k: usize| spec.tumors.iter().find(|t| t.class_index == k).map(|t| t.host);
    for s in shapes.iter().filter(|s| s.present) {
        let host = host_of(s.class_index).and_then(|hk| shapes.iter().find(|o| o.class_index == hk));
        for x in 0..n {
            let p = [coord(x / (w * h), d), coord((x / h) % w, w), coord(x % h, h)];
            if inside(p, s.center, s.radii) && host.is_none_or(|o| inside(p, o.center, o.radii)) {
                masks[s.class_index * n + x] = 1;
            }
        }
    }
    masks
}

fn draw_shapes(spec: &PhantomSpec, rng: &mut ChaCha8Rng, presence: Option<&[bool]>) -> Vec<ShapeRecord> {
    let mut shapes = Vec::new();
    for o in &spec.organs {
        let mut center = o.center;
        let mut radii = o.radii;
        for a in 0..3 {
            center[a] += rng.gen_range(-1.0..=1.0) * spec.jitter.center;
            radii[a] *= 1.0 + rng.gen_range(-1.0..=1.0) * spec.jitter.radius;
        }
        shapes.push(ShapeRecord {
            class_index: o.class_index,
            center,
            radii,
            present: true,
        });
    }
    for (i, t) in spec.tumors.iter().enumerate() {
        let drawn = rng.gen_bool(t.presence_prob);
        let present = presence.map_or(drawn, |p| p[i]);
        let r = rng.gen_range(t.radius_range[0]..=t.radius_range[1]);
        let host = shapes.iter().find(|s| s.class_index == t.host).expect("validated host").clone();
        let dir = loop {
            let u: [f64; 3] = [0; 3].map(|_| rng.gen_range(-1.0..=1.0));
            if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                break u;
            }
        };
        let center = [0, 1, 2].map(|a| host.center[a] + 0.6 * dir[a] * (host.radii[a] - r));
        shapes.push(ShapeRecord {
            class_index: t.class_index,
            center,
            radii: [r; 3],
            present,
        });
    }
    shapes
}

/// One phantom. `presence` overrides the random tumor draws, one flag per
/// entry of `spec.tumors`.
pub fn generate_volume_with(
    spec: &PhantomSpec,
    vocab: &ClassVocabulary,
    seed: u64,
    id: &str,
    presence: Option<&[bool]>,
) -> Result<Phantom> {
    spec.validate(vocab)?;
    if presence.is_some_and(|p| p.len() != spec.tumors.len()) {
        return Err(MomeError::InvalidArgument("one presence flag per tumor spec".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = draw_shapes(spec, &mut rng, presence);
    let k = vocab.len();
    let masks = rasterize(spec, &shapes, k);
    let n: usize = spec.grid.iter().product();

    let gauss = |rng: &mut ChaCha8Rng, sd: f64| -> f64 {
        if sd == 0.0 {
            0.0
        } else {
            sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        }
    };
    let mut voxels = Vec::with_capacity(n);
    for x in 0..n {
        let mut value = spec.background_mean + gauss(&mut rng, spec.background_sd);
        for o in &spec.organs {
            if masks[o.class_index * n + x] == 1 {
                value = o.intensity_mean + gauss(&mut rng, o.intensity_sd);
            }
        }
        for t in &spec.tumors {
            if masks[t.class_index * n + x] == 1 {
                value += t.intensity_offset;
            }
        }
        value += gauss(&mut rng, spec.noise_sd);
        voxels.push(value as f32);
    }
    let volume = Volume::new(id, spec.grid, [spec.spacing_mm; 3], voxels)?;
    let truth = PartialLabelSet::new(id, spec.grid, vec![true; k], masks)?;
    Ok(Phantom { volume, truth, shapes })
}

pub fn generate_volume(spec: &PhantomSpec, vocab: &ClassVocabulary, seed: u64, id: &str) -> Result<Phantom> {
    generate_volume_with(spec, vocab, seed, id, None)
}

/// Per-volume seed derived from the corpus seed and the volume index.
pub fn volume_seed(master: u64, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest length"))
}

/// Emulated source dataset and the classes it annotates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub dataset_id: String,
    pub classes: Vec<usize>,
}

pub fn default_plan() -> Vec<PlanEntry> {
    let entry = |id: &str, classes: &[usize]| PlanEntry {
        dataset_id: id.into(),
        classes: classes.to_vec(),
    };
    vec![
        entry("A", &[0, 2, 4, 5]),
        entry("B", &[1, 3, 4, 5]),
        entry("C", &[0, 1, 2, 3]),
    ]
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pub train: Vec<(Volume, PartialLabelSet)>,
    /// Full ground truth of the training volumes, same order as `train`.
    pub train_truth: Vec<PartialLabelSet>,
    /// Fully annotated held-out volumes.
    pub eval: Vec<(Volume, PartialLabelSet)>,
}

pub const EVAL_DATASET: &str = "eval";

/// Tumor presence pattern of held-out volume `i`: tumor `t` is present
/// when bit `t` of `i` is clear, so every tumor class gets positive and
/// negative cases once there are enough volumes.
pub fn eval_presence(i: usize, tumors: usize) -> Vec<bool> {
    (0..tumors).map(|t| (i >> t) & 1 == 0).collect()
}

/// Round-robin assignment of `n_train` phantoms to the plan's datasets,
/// plus `n_eval` fully annotated held-out phantoms.
pub fn make_corpus(
    spec: &PhantomSpec,
    vocab: &ClassVocabulary,
    n_train: usize,
    n_eval: usize,
    plan: &[PlanEntry],
    seed: u64,
) -> Result<Corpus> {
    spec.validate(vocab)?;
    let k = vocab.len();
    if plan.is_empty() {
        return Err(MomeError::Config("annotation plan is empty".into()));
    }
    let mut covered = vec![false; k];
    let mut flags = Vec::with_capacity(plan.len());
    for p in plan {
        let mut f = vec![false; k];
        for &c in &p.classes {
            if c >= k {
                return Err(MomeError::Config(format!(
                    "dataset {} annotates class {c}, vocabulary has {k}",
                    p.dataset_id
                )));
            }
            f[c] = true;
            covered[c] = true;
        }
        flags.push(f);
    }
    if let Some(c) = covered.iter().position(|&c| !c) {
        return Err(MomeError::Config(format!(
            "annotation plan leaves class {:?} unannotated everywhere",
            vocab.get(c)?.name
        )));
    }
    if plan.iter().any(|p| p.dataset_id == EVAL_DATASET) {
        return Err(MomeError::Config(format!("dataset id {EVAL_DATASET:?} is reserved")));
    }

    let train: Vec<Phantom> = (0..n_train)
        .into_par_iter()
        .map(|i| generate_volume(spec, vocab, volume_seed(seed, i), &format!("train-{i:03}")))
        .collect::<Result<_>>()?;
    let eval: Vec<Phantom> = (0..n_eval)
        .into_par_iter()
        .map(|i| {
            let presence = eval_presence(i, spec.tumors.len());
            generate_volume_with(spec, vocab, volume_seed(seed, n_train + i), &format!("eval-{i:03}"), Some(&presence))
        })
        .collect::<Result<_>>()?;

    let mut datasets: Vec<DatasetEntry> = plan
        .iter()
        .zip(&flags)
        .map(|(p, f)| DatasetEntry {
            dataset_id: p.dataset_id.clone(),
            split: Split::Train,
            volume_ids: Vec::new(),
            annotated_classes: f.clone(),
        })
        .collect();
    let mut train_pairs = Vec::with_capacity(n_train);
    let mut train_truth = Vec::with_capacity(n_train);
    for (i, ph) in train.into_iter().enumerate() {
        let j = i % plan.len();
        datasets[j].volume_ids.push(ph.volume.id.clone());
        let labels = ph.truth.restricted_to(&flags[j])?.with_dataset(plan[j].dataset_id.clone());
        train_pairs.push((ph.volume, labels));
        train_truth.push(ph.truth);
    }
    if n_eval > 0 {
        datasets.push(DatasetEntry {
            dataset_id: EVAL_DATASET.into(),
            split: Split::Eval,
            volume_ids: eval.iter().map(|p| p.volume.id.clone()).collect(),
            annotated_classes: vec![true; k],
        });
    }
    let eval = eval
        .into_iter()
        .map(|p| (p.volume, p.truth.with_dataset(EVAL_DATASET)))
        .collect();
    Ok(Corpus {
        manifest: DatasetManifest {
            vocabulary: vocab.clone(),
            datasets,
        },
        train: train_pairs,
        train_truth,
        eval,
    })
}

/// Trilinear resampling to isotropic `target_spacing` followed by
/// clipping to `window` and scaling to `[0, 1]`.
pub fn preprocess(v: &Volume, target_spacing: f64, window: [f64; 2]) -> Result<Volume> {
    let [lo, hi] = window;
    if !(lo < hi) {
        return Err(MomeError::InvalidArgument(format!("degenerate window [{lo}, {hi}]")));
    }
    if !(target_spacing > 0.0) {
        return Err(MomeError::InvalidArgument("target spacing must be positive".into()));
    }
    let dims = v.dims();
    let spacing = v.spacing_mm();
    let to: [usize; 3] = [0, 1, 2].map(|a| ((dims[a] as f64 * spacing[a] / target_spacing).round() as usize).max(1));
    let resampled = if to == dims {
        v.voxels().to_vec()
    } else {
        Trilinear::new(1, dims, to).forward(v.voxels())
    };
    let scale = hi - lo;
    let voxels = resampled
        .iter()
        .map(|&x| ((x as f64).clamp(lo, hi) - lo) / scale)
        .map(|x| x as f32)
        .collect();
    Volume::new(v.id.clone(), to, [target_spacing; 3], voxels)
}

/// Nearest-neighbour resampling of label masks onto a new grid, used
/// alongside [`preprocess`] when spacing changes.
pub fn resample_labels(l: &PartialLabelSet, to: [usize; 3]) -> Result<PartialLabelSet> {
    let from = l.dims();
    if from == to {
        return Ok(l.clone());
    }
    let pick = |i: usize, a: usize| (((i as f64 + 0.5) * from[a] as f64 / to[a] as f64) as usize).min(from[a] - 1);
    let n_to: usize = to.iter().product();
    let mut masks = Vec::with_capacity(l.num_classes() * n_to);
    for k in 0..l.num_classes() {
        let m = l.mask(k);
        for x in 0..n_to {
            let (d, w, h) = (x / (to[1] * to[2]), (x / to[2]) % to[1], x % to[2]);
            let src = (pick(d, 0) * from[1] + pick(w, 1)) * from[2] + pick(h, 2);
            masks.push(m[src]);
        }
    }
    let mut out = PartialLabelSet::new(l.volume_id.clone(), to, l.annotated().to_vec(), masks)?;
    out.dataset_id = l.dataset_id.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> PhantomSpec {
        let mut s = PhantomSpec::default();
        s.background_sd = 0.0;
        s.noise_sd = 0.0;
        s.organs.iter_mut().for_each(|o| o.intensity_sd = 0.0);
        s.tumors.iter_mut().for_each(|t| t.presence_prob = 0.0);
        s.jitter = Jitter { center: 0.0, radius: 0.0 };
        s
    }

    #[test]
    fn default_spec_is_valid() {
        PhantomSpec::default().validate(&ClassVocabulary::desk()).unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let v = ClassVocabulary::desk();
        let s = PhantomSpec::default();
        let a = generate_volume(&s, &v, 11, "a").unwrap();
        let b = generate_volume(&s, &v, 11, "a").unwrap();
        assert_eq!(a, b);
        let c = generate_volume(&s, &v, 12, "a").unwrap();
        assert_ne!(a.volume, c.volume);
    }

    #[test]
    fn tumors_lie_inside_hosts_and_masks_match_records() {
        let v = ClassVocabulary::desk();
        let s = PhantomSpec::default();
        for seed in 0..20 {
            let p = generate_volume(&s, &v, seed, "x").unwrap();
            for t in &s.tumors {
                let tm = p.truth.mask(t.class_index);
                let hm = p.truth.mask(t.host);
                assert!(tm.iter().zip(hm).all(|(&a, &b)| a <= b));
            }
            assert_eq!(rasterize(&s, &p.shapes, v.len()), p.truth.masks());
        }
    }

    #[test]
    fn quiet_phantom_centre_has_organ_mean() {
        let v = ClassVocabulary::desk();
        let s = PhantomSpec {
            grid: [33, 33, 33],
            ..quiet()
        };
        let p = generate_volume(&s, &v, 0, "q").unwrap();
        for o in &s.organs {
            let idx = o.center.map(|c| (c * 33.0 - 0.5).round() as usize);
            let at = p.volume.at(idx[0], idx[1], idx[2]);
            assert_eq!(at as f64, o.intensity_mean);
        }
    }

    #[test]
    fn plan_application_and_round_robin_sizes() {
        let v = ClassVocabulary::desk();
        let c = make_corpus(&PhantomSpec::default(), &v, 40, 0, &default_plan(), 0).unwrap();
        let sizes: Vec<usize> = c.manifest.datasets.iter().map(|d| d.volume_ids.len()).collect();
        assert_eq!(sizes, vec![14, 13, 13]);
        for (vol, l) in &c.train {
            let d = c.manifest.datasets.iter().find(|d| d.volume_ids.contains(&vol.id)).unwrap();
            assert_eq!(l.annotated(), d.annotated_classes.as_slice());
        }
        assert!(crate::types::validate_manifest(&c.manifest, &c.train.iter().map(|p| p.1.clone()).collect::<Vec<_>>()).is_empty());
    }

    #[test]
    fn single_full_dataset_keeps_ground_truth() {
        let v = ClassVocabulary::desk();
        let plan = vec![PlanEntry {
            dataset_id: "all".into(),
            classes: (0..v.len()).collect(),
        }];
        let c = make_corpus(&PhantomSpec::default(), &v, 3, 0, &plan, 5).unwrap();
        for ((_, l), truth) in c.train.iter().zip(&c.train_truth) {
            assert_eq!(l.masks(), truth.masks());
            assert_eq!(l.annotated(), truth.annotated());
        }
    }

    #[test]
    fn uncovered_plan_is_rejected() {
        let v = ClassVocabulary::desk();
        let plan = vec![PlanEntry {
            dataset_id: "A".into(),
            classes: vec![0, 1],
        }];
        assert!(matches!(
            make_corpus(&PhantomSpec::default(), &v, 2, 0, &plan, 0),
            Err(MomeError::Config(_))
        ));
    }

    #[test]
    fn held_out_volumes_cover_both_tumor_outcomes() {
        let v = ClassVocabulary::desk();
        let c = make_corpus(&PhantomSpec::default(), &v, 0, 10, &default_plan(), 0).unwrap();
        for k in [4, 5] {
            let present = c.eval.iter().filter(|(_, l)| l.mask(k).contains(&1)).count();
            assert!(present > 0 && present < 10, "class {k}: {present}");
        }
    }

    #[test]
    fn preprocessing_windows_and_scales() {
        let vol = Volume::new("w", [1, 1, 4], [1.5; 3], vec![-500.0, -175.0, 250.0, 37.5]).unwrap();
        let out = preprocess(&vol, 1.5, [-175.0, 250.0]).unwrap();
        assert_eq!(out.voxels(), &[0.0, 0.0, 1.0, 0.5]);
        assert!(preprocess(&vol, 1.5, [3.0, 3.0]).is_err());
        let flat = Volume::new("c", [2, 2, 2], [1.5; 3], vec![-300.0; 8]).unwrap();
        assert!(preprocess(&flat, 1.5, [-175.0, 250.0]).unwrap().voxels().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn anisotropic_volumes_are_resampled() {
        let vol = Volume::new("a", [2, 4, 4], [3.0, 1.5, 1.5], vec![0.0; 32]).unwrap();
        let out = preprocess(&vol, 1.5, [-175.0, 250.0]).unwrap();
        assert_eq!(out.dims(), [4, 4, 4]);
        assert_eq!(out.spacing_mm(), [1.5; 3]);
    }
}
