//! Frozen feature extractors and the feature loss computed on their outputs.
//!
//! `L_fea = L1(F̂_real, F̂_fake) + (1 − cos(F̂_real, F̂_fake))` where `F̂` is the
//! feature stack normalized to unit length along channels. Both terms are
//! evaluated per spatial position and averaged over positions: the L1 term is
//! the channel-wise L1 distance of the two unit vectors, the cosine term is
//! one minus their dot product.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ulrseg_tensor::{Binder, Conv2d, ConvGeom, Tensor, Var};

use crate::error::{Error, Result};
use crate::types::ImageTensor;

/// Guard against dividing by a zero feature vector.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AfeKind {
    /// Frozen random convolutional stack.
    Stub,
    /// Externally supplied extractor registered at runtime.
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AfeConfig {
    pub kind: AfeKind,
    /// `(channels, reduction)`: output channels and spatial downscale factor.
    pub dims: (usize, usize),
    pub seed: u64,
}

impl Default for AfeConfig {
    fn default() -> Self {
        Self {
            kind: AfeKind::Stub,
            dims: (32, 4),
            seed: 17,
        }
    }
}

/// A frozen map from images to feature stacks.
pub trait FeatureExtractor {
    /// Output `(channels, height, width)` for an `h×w` input.
    fn output_dims(&self, h: usize, w: usize) -> (usize, usize, usize);

    /// Smallest accepted input side.
    fn min_resolution(&self) -> usize;

    /// Features of an `N×3×H×W` batch. Gradients reach the input only.
    fn extract_var(&self, img: &Var) -> Result<Var>;

    /// Features of one image, `C×h×w`.
    fn extract(&self, img: &ImageTensor) -> Result<Tensor> {
        let out = self.extract_var(&Var::constant(img.to_batch()))?;
        let (_, c, h, w) = out.value().dims4();
        Ok(out.value().reshape(&[c, h, w]))
    }
}

/// Stride-2 3×3 convolutions with leaky ReLU, weights fixed at construction.
#[derive(Clone, Debug)]
pub struct StubExtractor {
    convs: Vec<Conv2d>,
    reduction: usize,
}

impl StubExtractor {
    /// `reduction` must be a power of two; each halving adds one layer whose
    /// width doubles up to `channels`.
    pub fn new(channels: usize, reduction: usize, seed: u64) -> Result<Self> {
        if channels == 0 || reduction == 0 || !reduction.is_power_of_two() {
            return Err(Error::Config(format!(
                "stub extractor needs positive channels and a power-of-two reduction, got ({channels}, {reduction})"
            )));
        }
        let layers = reduction.trailing_zeros() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut cin = 3;
        for i in 0..layers.max(1) {
            let stride = if i < layers { 2 } else { 1 };
            let cout = if i + 1 >= layers.max(1) {
                channels
            } else {
                (channels >> (layers - 1 - i)).max(8)
            };
            convs.push(Conv2d::new(
                &format!("afe.conv{i}"),
                cin,
                cout,
                3,
                ConvGeom::new(stride, 1, 1),
                true,
                1.0,
                &mut rng,
            ));
            cin = cout;
        }
        Ok(Self { convs, reduction })
    }
}

impl FeatureExtractor for StubExtractor {
    fn output_dims(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let c = self.convs.last().map_or(0, |c| c.out_channels());
        (c, h / self.reduction, w / self.reduction)
    }

    fn min_resolution(&self) -> usize {
        self.reduction.max(2)
    }

    fn extract_var(&self, img: &Var) -> Result<Var> {
        let s = img.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!(
                "extractor expects N×3×H×W, got {s:?}"
            )));
        }
        let min = self.min_resolution();
        if s[2] < min
            || s[3] < min
            || !s[2].is_multiple_of(self.reduction)
            || !s[3].is_multiple_of(self.reduction)
        {
            return Err(Error::Shape(format!(
                "extractor input {}×{} is below the minimum {min} or not a multiple of {}",
                s[2], s[3], self.reduction
            )));
        }
        let mut b = Binder::frozen();
        let mut h = img.clone();
        for c in &self.convs {
            h = c.forward(&mut b, &h).leaky_relu(0.2);
        }
        Ok(h)
    }
}

/// Builds the extractor named by `cfg`. External extractors are supplied by
/// the caller, so requesting one here reports it as unavailable.
pub fn build_extractor(cfg: &AfeConfig) -> Result<Box<dyn FeatureExtractor>> {
    match cfg.kind {
        AfeKind::Stub => Ok(Box::new(StubExtractor::new(cfg.dims.0, cfg.dims.1, cfg.seed)?)),
        AfeKind::External => Err(Error::Unavailable(
            "no external feature extractor is registered; use kind = \"stub\" or supply one through FeatureExtractor".into(),
        )),
    }
}

/// Unit-length features along channels, `C×H×W` or `N×C×H×W`.
pub fn normalize_features(f: &Tensor) -> Result<Tensor> {
    let x = as_batch(f)?;
    let out = Var::constant(x).l2_normalize_channels(NORM_EPS);
    Ok(out.value().reshape(f.shape()))
}

fn as_batch(f: &Tensor) -> Result<Tensor> {
    match f.shape() {
        [c, h, w] => Ok(f.reshape(&[1, *c, *h, *w])),
        [_, _, _, _] => Ok(f.clone()),
        s => Err(Error::Shape(format!(
            "features must be C×H×W or N×C×H×W, got {s:?}"
        ))),
    }
}

/// The two terms of the feature loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureLossParts {
    pub l1: f64,
    pub cos: f64,
}

impl FeatureLossParts {
    pub fn total(&self) -> f64 {
        self.l1 + self.cos
    }
}

/// Graph form on `N×C×H×W` stacks.
pub fn feature_loss_var(real: &Var, fake: &Var) -> Result<Var> {
    if real.shape() != fake.shape() || real.shape().len() != 4 {
        return Err(Error::Shape(format!(
            "feature stacks differ: {:?} vs {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let (n, _, h, w) = real.value().dims4();
    let positions = (n * h * w) as f64;
    let a = real.l2_normalize_channels(NORM_EPS);
    let b = fake.l2_normalize_channels(NORM_EPS);
    let l1 = a.sub(&b).abs().sum().scale(1.0 / positions);
    let dot = a.mul(&b).sum().scale(1.0 / positions);
    Ok(l1.add(&dot.scale(-1.0).add_scalar(1.0)))
}

/// Per-term values for `C×H×W` or `N×C×H×W` stacks.
pub fn feature_loss_parts(real: &Tensor, fake: &Tensor) -> Result<FeatureLossParts> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape(format!(
            "feature stacks differ: {:?} vs {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let a = normalize_features(&as_batch(real)?)?;
    let b = normalize_features(&as_batch(fake)?)?;
    let (n, c, h, w) = a.dims4();
    let plane = h * w;
    let positions = (n * plane) as f64;
    let (mut l1, mut dot) = (0.0, 0.0);
    for bi in 0..n {
        for p in 0..plane {
            for ch in 0..c {
                let i = (bi * c + ch) * plane + p;
                l1 += (a.data()[i] - b.data()[i]).abs();
                dot += a.data()[i] * b.data()[i];
            }
        }
    }
    Ok(FeatureLossParts {
        l1: l1 / positions,
        cos: 1.0 - dot / positions,
    })
}

/// `L1 + (1 − cos)` on channel-normalized features.
pub fn feature_loss(real: &Tensor, fake: &Tensor) -> Result<f64> {
    Ok(feature_loss_parts(real, fake)?.total())
}
