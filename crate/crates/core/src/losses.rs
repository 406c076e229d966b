//! Scalar objectives: pixel reconstruction, cross-entropy, binary cross-entropy,
//! discriminator and adversarial losses, and their weighted total.
//!
//! Every loss exists twice: a plain `f64` evaluation and a `*_var` form that
//! builds an autodiff graph. Both use mean reduction.

use serde::{Deserialize, Serialize};
use ulrseg_tensor::ops::softplus;
use ulrseg_tensor::{Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Pixel reconstruction weight.
    pub lambda1: f64,
    /// Feature loss weight.
    pub lambda2: f64,
    /// Adversarial weight.
    pub lambda3: f64,
    /// Share of the segmentation term, in `[0, 1]`.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.01,
            lambda3: 0.01,
            alpha: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.alpha];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        if self.alpha > 1.0 {
            return Err(Error::Config(format!("alpha {} exceeds 1", self.alpha)));
        }
        Ok(())
    }
}

/// Named losses of one optimization step. Absent terms are omitted from logs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fea: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub d: Option<f64>,
    pub total: f64,
}

impl LossBundle {
    /// Named values present in this bundle, `total` last.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut out: Vec<(&'static str, f64)> = [
            ("l1", self.l1),
            ("l2", self.l2),
            ("fea", self.fea),
            ("adv", self.adv),
            ("ce", self.ce),
            ("d", self.d),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect();
        out.push(("total", self.total));
        out
    }

    /// First non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<(&'static str, f64)> {
        self.entries().into_iter().find(|(_, v)| !v.is_finite())
    }

    /// Joint-stage total from the stored parts; missing terms count as zero.
    pub fn recompute_total(&self, w: &LossWeights) -> f64 {
        total_loss(
            &LossParts {
                l2: self.l2.unwrap_or(0.0),
                fea: self.fea.unwrap_or(0.0),
                adv: self.adv.unwrap_or(0.0),
                ce: self.ce.unwrap_or(0.0),
            },
            w,
        )
    }
}

/// Inputs of the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l2: f64,
    pub fea: f64,
    pub adv: f64,
    pub ce: f64,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean squared error over every element.
pub fn pixel_l2(gt: &Tensor, sr: &Tensor) -> Result<f64> {
    same_shape(gt, sr, "pixel_l2")?;
    let n = gt.len() as f64;
    Ok(gt
        .data()
        .iter()
        .zip(sr.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n)
}

/// Mean absolute error over every element.
pub fn pixel_l1(gt: &Tensor, sr: &Tensor) -> Result<f64> {
    same_shape(gt, sr, "pixel_l1")?;
    let n = gt.len() as f64;
    Ok(gt
        .data()
        .iter()
        .zip(sr.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

fn logits_nchw(logits: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match logits.shape() {
        [c, h, w] => Ok((1, *c, *h, *w)),
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        s => Err(Error::Shape(format!(
            "logits must be C×H×W or N×C×H×W, got {s:?}"
        ))),
    }
}

fn check_labels(labels: &[u8], n: usize, c: usize, plane: usize, ignore_index: u8) -> Result<()> {
    if labels.len() != n * plane {
        return Err(Error::Shape(format!(
            "{} labels for {n} maps of {plane} pixels",
            labels.len()
        )));
    }
    if let Some(bad) = labels
        .iter()
        .find(|&&v| v != ignore_index && v as usize >= c)
    {
        return Err(Error::Label(format!("label {bad} outside [0, {c})")));
    }
    if labels.iter().all(|&v| v == ignore_index) {
        return Err(Error::Label(
            "every pixel carries the ignore index; cross-entropy is undefined".into(),
        ));
    }
    Ok(())
}

/// Mean over non-ignored pixels of `-x_y + log Σ_j exp(x_j)`.
///
/// `labels` lists one class per pixel in batch-major, row-major order.
pub fn cross_entropy(logits: &Tensor, labels: &[u8], ignore_index: u8) -> Result<f64> {
    let (n, c, h, w) = logits_nchw(logits)?;
    let plane = h * w;
    check_labels(labels, n, c, plane, ignore_index)?;
    let x = logits.data();
    let (mut total, mut count) = (0.0, 0usize);
    for b in 0..n {
        for p in 0..plane {
            let y = labels[b * plane + p];
            if y == ignore_index {
                continue;
            }
            let at = |ch: usize| x[(b * c + ch) * plane + p];
            let m = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..c).map(|ch| (at(ch) - m).exp()).sum::<f64>().ln();
            total += lse - at(y as usize);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Binary cross-entropy of a logit against `y ∈ {0, 1}`, via log-sigmoid.
pub fn bce(u: f64, y: f64) -> f64 {
    y * softplus(-u) + (1.0 - y) * softplus(u)
}

fn batch_mean(xs: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    xs.iter().map(|&x| f(x)).sum::<f64>() / xs.len() as f64
}

/// `bce(real, 1) + bce(fake, 0)`, each averaged over the batch.
pub fn disc_loss(logit_real: &[f64], logit_fake: &[f64]) -> f64 {
    batch_mean(logit_real, |u| bce(u, 1.0)) + batch_mean(logit_fake, |u| bce(u, 0.0))
}

/// `bce(fake, 1)` averaged over the batch.
pub fn adv_loss(logit_fake: &[f64]) -> f64 {
    batch_mean(logit_fake, |u| bce(u, 1.0))
}

/// `(1 − α)(λ1·l2 + λ2·fea + λ3·adv) + α·ce`.
pub fn total_loss(p: &LossParts, w: &LossWeights) -> f64 {
    (1.0 - w.alpha) * (w.lambda1 * p.l2 + w.lambda2 * p.fea + w.lambda3 * p.adv) + w.alpha * p.ce
}

pub fn pixel_l2_var(gt: &Var, sr: &Var) -> Result<Var> {
    same_shape(gt.value(), sr.value(), "pixel_l2")?;
    Ok(sr.mse(gt))
}

pub fn pixel_l1_var(gt: &Var, sr: &Var) -> Result<Var> {
    same_shape(gt.value(), sr.value(), "pixel_l1")?;
    Ok(sr.mae(gt))
}

/// Graph form of [`cross_entropy`] for `N×C×H×W` logits.
pub fn cross_entropy_var(logits: &Var, labels: &[u8], ignore_index: u8) -> Result<Var> {
    let (n, c, h, w) = logits_nchw(logits.value())?;
    check_labels(labels, n, c, h * w, ignore_index)?;
    let x = if logits.value().ndim() == 3 {
        logits.reshape(&[1, c, h, w])
    } else {
        logits.clone()
    };
    Ok(x.cross_entropy(labels, ignore_index))
}

pub fn disc_loss_var(logit_real: &Var, logit_fake: &Var) -> Var {
    logit_real
        .bce_with_logits(1.0)
        .add(&logit_fake.bce_with_logits(0.0))
}

pub fn adv_loss_var(logit_fake: &Var) -> Var {
    logit_fake.bce_with_logits(1.0)
}

/// Graph form of [`total_loss`]; absent terms contribute nothing.
pub fn total_loss_var(
    l2: &Var,
    fea: Option<&Var>,
    adv: Option<&Var>,
    ce: &Var,
    w: &LossWeights,
) -> Var {
    let mut sr = l2.scale(w.lambda1);
    if let Some(f) = fea {
        sr = sr.add(&f.scale(w.lambda2));
    }
    if let Some(a) = adv {
        sr = sr.add(&a.scale(w.lambda3));
    }
    sr.scale(1.0 - w.alpha).add(&ce.scale(w.alpha))
}
