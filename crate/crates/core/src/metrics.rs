//! Evaluation metrics for segmentation maps and reconstructed images.
//!
//! Region-based scores use 4-connectivity. ARI compares partitions by label
//! identity, Covering compares connected components. Pixels whose ground
//! truth is the ignore index are excluded from mIoU, ARI and Covering.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::types::{ImageTensor, LabelMap};

/// Boundary tolerance as a fraction of the image diagonal.
pub const BF_TOLERANCE_FRACTION: f64 = 0.0075;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Rows index ground truth, columns index prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulates one map pair; ground-truth `ignore` pixels are skipped.
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: u8) -> Result<()> {
        pred.same_shape(gt)?;
        let c = self.num_classes;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == ignore {
                continue;
            }
            if g as usize >= c || p as usize >= c {
                return Err(Error::Label(format!(
                    "class pair ({g}, {p}) outside [0, {c})"
                )));
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    /// IoU per class; `None` when the class is absent from both maps.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let inter = self.get(k, k);
                let gt: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let pred: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let union = gt + pred - inter;
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in either map.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::Invalid("mIoU of an empty confusion matrix".into()));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

pub fn miou(pred: &LabelMap, gt: &LabelMap, num_classes: usize, ignore: u8) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, gt, ignore)?;
    cm.miou()
}

fn same_image_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::Shape(format!(
            "images differ: {:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, max_val: f64) -> Result<f64> {
    same_image_shape(a, b)?;
    let (x, y) = (a.tensor().data(), b.tensor().data());
    let mse = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Normalized 1-D Gaussian taps.
fn gaussian_1d(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5) over
/// fully contained windows, averaged over channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, max_val: f64) -> Result<f64> {
    same_image_shape(a, b)?;
    let (c, h, w) = (a.channels(), a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}"
        )));
    }
    let k = gaussian_1d(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x = &a.tensor().data()[ch * plane..(ch + 1) * plane];
        let y = &b.tensor().data()[ch * plane..(ch + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(x, h, w, &k);
        let my = filter_valid(y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let s: f64 = (0..mx.len())
            .map(|i| {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cov = sxy[i] - ux * uy;
                ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                    / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
            })
            .sum();
        total += s / mx.len() as f64;
    }
    Ok(total / c as f64)
}

fn choose2(n: u64) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index of the partitions induced by label identity.
///
/// When both partitions are trivial (one cluster or all singletons) the
/// chance-corrected denominator vanishes and the score is 1.0.
pub fn ari(pred: &LabelMap, gt: &LabelMap, ignore: u8) -> Result<f64> {
    pred.same_shape(gt)?;
    let mut table: BTreeMap<(u8, u8), u64> = BTreeMap::new();
    let mut rows: BTreeMap<u8, u64> = BTreeMap::new();
    let mut cols: BTreeMap<u8, u64> = BTreeMap::new();
    let mut n = 0u64;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g == ignore {
            continue;
        }
        *table.entry((g, p)).or_default() += 1;
        *rows.entry(g).or_default() += 1;
        *cols.entry(p).or_default() += 1;
        n += 1;
    }
    if n < 2 {
        return Err(Error::Invalid(
            "ARI needs at least two labeled pixels".into(),
        ));
    }
    let index: f64 = table.values().map(|&v| choose2(v)).sum();
    let a: f64 = rows.values().map(|&v| choose2(v)).sum();
    let b: f64 = cols.values().map(|&v| choose2(v)).sum();
    let expected = a * b / choose2(n);
    let max = 0.5 * (a + b);
    if (max - expected).abs() < f64::EPSILON * max.max(1.0) {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// A 4-connected region of equal labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub class: u8,
    pub pixels: Vec<usize>,
}

/// Connected components of a label map; ignored pixels belong to none.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionPartition {
    pub regions: Vec<Region>,
    /// Region index per pixel, `None` for ignored pixels.
    pub component: Vec<Option<usize>>,
}

impl RegionPartition {
    pub fn new(map: &LabelMap, ignore: Option<u8>) -> Self {
        let (h, w) = (map.height(), map.width());
        let mut component = vec![None; h * w];
        let mut regions = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..h * w {
            let class = map.data()[start];
            if component[start].is_some() || Some(class) == ignore {
                continue;
            }
            let id = regions.len();
            let mut pixels = Vec::new();
            component[start] = Some(id);
            queue.push_back(start);
            while let Some(p) = queue.pop_front() {
                pixels.push(p);
                let (y, x) = (p / w, p % w);
                let mut visit = |q: usize| {
                    if component[q].is_none() && map.data()[q] == class {
                        component[q] = Some(id);
                        queue.push_back(q);
                    }
                };
                if y > 0 {
                    visit(p - w);
                }
                if y + 1 < h {
                    visit(p + w);
                }
                if x > 0 {
                    visit(p - 1);
                }
                if x + 1 < w {
                    visit(p + 1);
                }
            }
            regions.push(Region { class, pixels });
        }
        Self { regions, component }
    }
}

/// Ground-truth-weighted best-overlap IoU of predicted regions.
///
/// Directional: scores how well `pred` covers the regions of `gt`.
pub fn covering(pred: &LabelMap, gt: &LabelMap, ignore: u8) -> Result<f64> {
    pred.same_shape(gt)?;
    let gp = RegionPartition::new(gt, Some(ignore));
    let pp = RegionPartition::new(pred, None);
    let n: usize = gp.regions.iter().map(|r| r.pixels.len()).sum();
    if n == 0 {
        return Err(Error::Invalid("covering of a fully ignored map".into()));
    }
    let mut score = 0.0;
    for r in &gp.regions {
        let mut inter: BTreeMap<usize, usize> = BTreeMap::new();
        for &p in &r.pixels {
            let id = pp.component[p].expect("prediction has no ignored pixels");
            *inter.entry(id).or_default() += 1;
        }
        let best = inter
            .iter()
            .map(|(&id, &i)| i as f64 / (r.pixels.len() + pp.regions[id].pixels.len() - i) as f64)
            .fold(0.0, f64::max);
        score += r.pixels.len() as f64 / n as f64 * best;
    }
    Ok(score)
}

/// Pixels with at least one 4-neighbour of a different label.
pub fn boundary_pixels(map: &LabelMap) -> Vec<(usize, usize)> {
    let (h, w) = (map.height(), map.width());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = map.get(y, x);
            let differs = (y > 0 && map.get(y - 1, x) != v)
                || (y + 1 < h && map.get(y + 1, x) != v)
                || (x > 0 && map.get(y, x - 1) != v)
                || (x + 1 < w && map.get(y, x + 1) != v);
            if differs {
                out.push((y, x));
            }
        }
    }
    out
}

/// Default tolerance: 0.75% of the image diagonal.
pub fn default_bf_tolerance(h: usize, w: usize) -> f64 {
    BF_TOLERANCE_FRACTION * ((h * h + w * w) as f64).sqrt()
}

/// Fraction of `from` within Euclidean distance `tol` of some pixel of `to`.
fn matched_fraction(
    from: &[(usize, usize)],
    to: &[(usize, usize)],
    h: usize,
    w: usize,
    tol: f64,
) -> f64 {
    let mut mask = vec![false; h * w];
    for &(y, x) in to {
        mask[y * w + x] = true;
    }
    let r = tol.floor() as isize;
    let tol2 = tol * tol;
    let hits = from
        .iter()
        .filter(|&&(y, x)| {
            for dy in -r..=r {
                for dx in -r..=r {
                    if ((dy * dy + dx * dx) as f64) > tol2 {
                        continue;
                    }
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0
                        && xx >= 0
                        && (yy as usize) < h
                        && (xx as usize) < w
                        && mask[yy as usize * w + xx as usize]
                    {
                        return true;
                    }
                }
            }
            false
        })
        .count();
    hits as f64 / from.len() as f64
}

/// Boundary F-measure with matching tolerance `tol` in pixels.
///
/// Two maps without any boundary score 1.0; if only one side has boundaries
/// the score is 0.
pub fn boundary_f(pred: &LabelMap, gt: &LabelMap, tol: f64) -> Result<f64> {
    pred.same_shape(gt)?;
    if tol.is_nan() || tol < 0.0 {
        return Err(Error::Invalid(format!(
            "boundary tolerance must be non-negative, got {tol}"
        )));
    }
    let (h, w) = (gt.height(), gt.width());
    let bp = boundary_pixels(pred);
    let bg = boundary_pixels(gt);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let precision = matched_fraction(&bp, &bg, h, w, tol);
    let recall = matched_fraction(&bg, &bp, h, w, tol);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Learned perceptual similarity needs an external pretrained scorer.
pub fn lpips(_a: &ImageTensor, _b: &ImageTensor) -> Result<f64> {
    Err(Error::Unavailable(
        "LPIPS requires an external pretrained scorer".into(),
    ))
}

/// Fréchet inception distance needs an external pretrained scorer.
pub fn fid(_a: &[ImageTensor], _b: &[ImageTensor]) -> Result<f64> {
    Err(Error::Unavailable(
        "FID requires an external pretrained scorer".into(),
    ))
}

/// Serializes non-finite values as the strings `"inf"`, `"-inf"`, `"nan"`.
pub mod float_or_inf {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

/// The full metric battery for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub miou: f64,
    #[serde(with = "float_or_inf")]
    pub psnr: f64,
    #[serde(with = "float_or_inf")]
    pub ssim: f64,
    pub ari: f64,
    pub covering: f64,
    pub bf: f64,
}

impl SampleMetrics {
    /// Scores a reconstruction and its predicted labels against ground truth.
    ///
    /// SSIM is skipped (NaN) for images smaller than the window.
    #[allow(clippy::too_many_arguments)]
    pub fn compute(
        sr: &ImageTensor,
        hr: &ImageTensor,
        pred: &LabelMap,
        gt: &LabelMap,
        num_classes: usize,
        ignore: u8,
        bf_tol: Option<f64>,
    ) -> Result<Self> {
        let tol = bf_tol.unwrap_or_else(|| default_bf_tolerance(gt.height(), gt.width()));
        let ssim = if hr.height() >= SSIM_WINDOW && hr.width() >= SSIM_WINDOW {
            ssim(sr, hr, 1.0)?
        } else {
            f64::NAN
        };
        Ok(Self {
            miou: miou(pred, gt, num_classes, ignore)?,
            psnr: psnr(sr, hr, 1.0)?,
            ssim,
            ari: ari(pred, gt, ignore)?,
            covering: covering(pred, gt, ignore)?,
            bf: boundary_f(pred, gt, tol)?,
        })
    }

    /// Per-field arithmetic mean.
    pub fn mean(rows: &[SampleMetrics]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Invalid("no rows to aggregate".into()));
        }
        let n = rows.len() as f64;
        let avg = |f: fn(&SampleMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            miou: avg(|r| r.miou),
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            ari: avg(|r| r.ari),
            covering: avg(|r| r.covering),
            bf: avg(|r| r.bf),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(rows: &[&[u8]]) -> LabelMap {
        LabelMap::from_rows(rows).unwrap()
    }

    #[test]
    fn miou_worked_example() {
        let pred = map(&[&[0, 0], &[1, 1]]);
        let gt = map(&[&[0, 1], &[1, 1]]);
        let v = miou(&pred, &gt, 2, 255).unwrap();
        assert!((v - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        let zeros = LabelMap::filled(3, 3, 0);
        let ones = LabelMap::filled(3, 3, 1);
        assert_eq!(miou(&zeros, &ones, 2, 255).unwrap(), 0.0);
    }

    #[test]
    fn psnr_fixed_points() {
        let a = ImageTensor::filled(1, 4, 4, 0.2);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = ImageTensor::filled(1, 4, 4, 0.3);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_constants() {
        let a = ImageTensor::filled(1, 12, 12, 0.0);
        let b = ImageTensor::filled(1, 12, 12, 1.0);
        let v = ssim(&a, &b, 1.0).unwrap();
        assert!((v - 1e-4 / (1.0 + 1e-4)).abs() < 1e-12);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(
            &ImageTensor::filled(1, 10, 10, 0.0),
            &ImageTensor::filled(1, 10, 10, 0.0),
            1.0
        )
        .is_err());
    }

    #[test]
    fn ari_degenerate_cases() {
        let singletons = LabelMap::from_fn(2, 3, |y, x| (y * 3 + x) as u8);
        let one = LabelMap::filled(2, 3, 0);
        assert!(ari(&singletons, &one, 255).unwrap().abs() < 1e-12);
        assert_eq!(ari(&one, &one, 255).unwrap(), 1.0);
        assert!(ari(&LabelMap::filled(1, 1, 0), &LabelMap::filled(1, 1, 0), 255).is_err());
    }

    #[test]
    fn covering_halves() {
        let gt = LabelMap::filled(4, 4, 0);
        let pred = LabelMap::from_fn(4, 4, |_, x| (x >= 2) as u8);
        assert!((covering(&pred, &gt, 255).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn boundary_shifted_edge() {
        let a = LabelMap::from_fn(8, 8, |_, x| (x >= 4) as u8);
        let b = LabelMap::from_fn(8, 8, |_, x| (x >= 5) as u8);
        assert_eq!(boundary_f(&a, &b, 2.0).unwrap(), 1.0);
        let far = LabelMap::from_fn(8, 8, |_, x| (x >= 1) as u8);
        let near_end = LabelMap::from_fn(8, 8, |_, x| (x >= 7) as u8);
        assert_eq!(boundary_f(&far, &near_end, 2.0).unwrap(), 0.0);
        let flat = LabelMap::filled(8, 8, 3);
        assert_eq!(boundary_f(&flat, &flat, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn psnr_serializes_infinity_as_text() {
        let m = SampleMetrics {
            miou: 1.0,
            psnr: f64::INFINITY,
            ssim: 1.0,
            ari: 1.0,
            covering: 1.0,
            bf: 1.0,
        };
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains(r#""psnr":"inf""#));
        let back: SampleMetrics = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
