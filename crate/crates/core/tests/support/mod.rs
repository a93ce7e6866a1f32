#![allow(dead_code)]

use mome_core::config::ModelConfig;
use mome_core::head::{MomeModel, Prediction};
use mome_core::tensor::Tensor;
use mome_core::textbranch::{EmbeddingProvider, TextEmbedding};
use mome_core::training::{loss_and_grads, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 8³ patches, three experts, four token channels, 16-dim text.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        experts: 3,
        token_channels: 4,
        text_dim: 16,
        encoder_widths: vec![4, 6, 8],
        router_hidden: 8,
        controller_hidden: 12,
        k_active: 3,
        attention: true,
        attention_heads: 2,
        ..ModelConfig::default()
    }
}

pub fn stub_embeddings(names: &[&str], dim: usize) -> Vec<TextEmbedding> {
    names
        .iter()
        .enumerate()
        .map(|(k, n)| EmbeddingProvider::Stub.embed(n, k, dim).unwrap())
        .collect()
}

/// Random intensities with a bright ball, three classes of which the
/// last is unannotated.
pub fn tiny_sample(seed: u64) -> Sample<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 8usize;
    let mut patch = Vec::with_capacity(n * n * n);
    let mut targets = vec![0.0; 3 * n * n * n];
    for d in 0..n {
        for w in 0..n {
            for h in 0..n {
                let i = (d * n + w) * n + h;
                let r2 = [d, w, h].iter().map(|&x| (x as f64 - 3.5).powi(2)).sum::<f64>();
                let inside = r2 < 6.0;
                patch.push(if inside { 0.8 } else { 0.2 } + rng.gen_range(-0.1..0.1));
                targets[i] = inside as u8 as f64;
                targets[n * n * n + i] = (h < 3) as u8 as f64;
                targets[2 * n * n * n + i] = (w > 5) as u8 as f64;
            }
        }
    }
    Sample {
        patch: Tensor::from_vec(&[1, n, n, n], patch).unwrap(),
        targets: Tensor::from_vec(&[3, n * n * n], targets).unwrap(),
        annotated: vec![true, true, false],
    }
}

/// Voxel-mean BCE plus soft Dice per annotated class, averaged.
pub fn oracle_loss(pred: &Prediction<f64>, targets: &Tensor<f64>, annotated: &[bool]) -> f64 {
    let n = targets.shape()[1];
    let mut total = 0.0;
    let mut count = 0.0;
    for (k, _) in annotated.iter().enumerate().filter(|(_, &a)| a) {
        let p = pred.channel(k);
        let y = &targets.data()[k * n..(k + 1) * n];
        let bce: f64 = p
            .iter()
            .zip(y)
            .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / n as f64;
        let inter: f64 = p.iter().zip(y).map(|(p, y)| p * y).sum();
        let dice = 1.0 - (2.0 * inter + 1e-5) / (p.iter().sum::<f64>() + y.iter().sum::<f64>() + 1e-5);
        total += bce + dice;
        count += 1.0;
    }
    total / count
}

#[derive(Debug)]
pub struct GroupCheck {
    pub group: &'static str,
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

pub const GROUPS: [&str; 3] = ["backbone", "controller", "router"];

/// Central differences against the analytic gradient on `per_tensor`
/// random entries of every parameter tensor.
pub fn gradcheck(model: &MomeModel<f64>, sample: &Sample<f64>, emb: &[TextEmbedding], per_tensor: usize) -> Vec<GroupCheck> {
    let k = model.cfg.experts;
    let (_, grads) = loss_and_grads(model, sample, emb, k).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let h = 1e-4;
    let mut out: Vec<GroupCheck> = GROUPS
        .iter()
        .map(|&group| GroupCheck {
            group,
            checked: 0,
            max_rel: 0.0,
            worst: String::new(),
        })
        .collect();
    let ids: Vec<_> = model.params.ids().collect();
    for (slot, &id) in ids.iter().enumerate() {
        let name = model.params.name(id).to_string();
        let gi = GROUPS.iter().position(|g| name.starts_with(&format!("{g}."))).expect("grouped parameter");
        let len = model.params.get(id).data().len();
        for _ in 0..per_tensor.min(len) {
            let j = rng.gen_range(0..len);
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params.get_mut(id).data_mut()[j] += delta;
                let pred = m.forward(&sample.patch, emb, k).unwrap();
                oracle_loss(&pred, &sample.targets, &sample.annotated)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grads[slot].data()[j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            let c = &mut out[gi];
            c.checked += 1;
            if rel > c.max_rel {
                c.max_rel = rel;
                c.worst = format!("{name}[{j}]: analytic {a:e}, numeric {fd:e}");
            }
        }
    }
    out
}
