//! Partial-label segmentation loss: per annotated class, voxel-mean binary
//! cross-entropy plus soft Dice, averaged over the annotated classes.
//! Unannotated classes are skipped entirely.

use serde::{Deserialize, Serialize};

use crate::error::{MomeError, Result};
use crate::tensor::{Scalar, Tensor};

pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
    /// `bce + dice` per class; NaN where the class is unannotated.
    pub per_class: Vec<f64>,
}

struct ClassTerms {
    bce: f64,
    dice: f64,
    intersection: f64,
    pred_sum: f64,
    target_sum: f64,
}

fn class_terms<T: Scalar>(p: &[T], y: &[T]) -> ClassTerms {
    let mut bce = 0.0;
    let (mut inter, mut ps, mut ys) = (0.0, 0.0, 0.0);
    for (&p, &y) in p.iter().zip(y) {
        let (p, y) = (p.f64(), y.f64());
        bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        inter += p * y;
        ps += p;
        ys += y;
    }
    let n = p.len() as f64;
    ClassTerms {
        bce: bce / n,
        dice: 1.0 - (2.0 * inter + DICE_SMOOTH) / (ps + ys + DICE_SMOOTH),
        intersection: inter,
        pred_sum: ps,
        target_sum: ys,
    }
}

fn check_inputs<T: Scalar>(probs: &Tensor<T>, targets: &Tensor<T>, annotated: &[bool]) -> Result<()> {
    if probs.shape() != targets.shape() {
        return Err(MomeError::Shape(format!(
            "prediction {:?} vs labels {:?}",
            probs.shape(),
            targets.shape()
        )));
    }
    if probs.shape()[0] != annotated.len() {
        return Err(MomeError::ClassCount {
            expected: probs.shape()[0],
            found: annotated.len(),
        });
    }
    if !annotated.iter().any(|&a| a) {
        return Err(MomeError::InvalidLabels(
            "loss needs at least one annotated class".into(),
        ));
    }
    Ok(())
}

/// Loss values for `probs`/`targets` of shape `[K, ...]`.
pub fn masked_loss_values<T: Scalar>(
    probs: &Tensor<T>,
    targets: &Tensor<T>,
    annotated: &[bool],
) -> Result<LossReport> {
    check_inputs(probs, targets, annotated)?;
    let n = probs.inner_len();
    let count = annotated.iter().filter(|&&a| a).count() as f64;
    let (mut bce, mut dice) = (0.0, 0.0);
    let mut per_class = Vec::with_capacity(annotated.len());
    for (k, &ann) in annotated.iter().enumerate() {
        if !ann {
            per_class.push(f64::NAN);
            continue;
        }
        let terms = class_terms(
            &probs.data()[k * n..(k + 1) * n],
            &targets.data()[k * n..(k + 1) * n],
        );
        bce += terms.bce;
        dice += terms.dice;
        per_class.push(terms.bce + terms.dice);
    }
    let (bce, dice) = (bce / count, dice / count);
    Ok(LossReport {
        total: bce + dice,
        bce,
        dice,
        per_class,
    })
}

/// `∂total/∂probs`. Rows of unannotated classes are exactly zero.
pub fn masked_loss_grad<T: Scalar>(
    probs: &Tensor<T>,
    targets: &Tensor<T>,
    annotated: &[bool],
) -> Tensor<T> {
    let n = probs.inner_len();
    let count = annotated.iter().filter(|&&a| a).count() as f64;
    let mut grad = Tensor::zeros(probs.shape());
    for (k, &ann) in annotated.iter().enumerate() {
        if !ann {
            continue;
        }
        let p = &probs.data()[k * n..(k + 1) * n];
        let y = &targets.data()[k * n..(k + 1) * n];
        let terms = class_terms(p, y);
        let denom = terms.pred_sum + terms.target_sum + DICE_SMOOTH;
        let numer = 2.0 * terms.intersection + DICE_SMOOTH;
        let inv_n = 1.0 / n as f64;
        for ((g, &p), &y) in grad.data_mut()[k * n..(k + 1) * n].iter_mut().zip(p).zip(y) {
            let (p, y) = (p.f64(), y.f64());
            let d_bce = inv_n * (-y / p + (1.0 - y) / (1.0 - p));
            let d_dice = -(2.0 * y * denom - numer) / (denom * denom);
            *g = T::of((d_bce + d_dice) / count);
        }
    }
    grad
}
