//! Residual-in-residual dense super-resolution generator.
//!
//! `conv_first → [RRDB × n] → conv_body (+ skip) → [upsample ×f → conv → lrelu]*
//! → conv_hr → lrelu → conv_last → clamp[0,1]`.
//!
//! A dense block with `k` convolutions concatenates every intermediate feature;
//! its output is `x + β·conv_k(...)`. An RRDB chains its dense blocks and
//! returns `x + β·chain(x)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ulrseg_tensor::{Binder, Conv2d, ConvGeom, Module, Param, Tensor, Var};

use crate::error::{Error, Result};
use crate::types::ImageTensor;

pub const LRELU_SLOPE: f64 = 0.2;

/// He gain approximating the default uniform fan-in initialization.
const PLAIN_GAIN: f64 = 0.408_248_290_463_863;
/// Dense-block convolutions start small so each block is close to identity.
const DENSE_GAIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_rrdb: usize,
    pub dense_blocks_per_rrdb: usize,
    pub convs_per_dense_block: usize,
    pub base_channels: usize,
    pub growth_channels: usize,
    pub residual_scale: f64,
    pub upsample_stages: Vec<usize>,
    /// Overall magnification; must equal the product of `upsample_stages`.
    pub scale: usize,
}

impl GeneratorConfig {
    /// 23 RRDBs of 3 dense blocks with 5 convolutions, 64/32 channels, ×24.
    pub fn full() -> Self {
        Self {
            num_rrdb: 23,
            dense_blocks_per_rrdb: 3,
            convs_per_dense_block: 5,
            base_channels: 64,
            growth_channels: 32,
            residual_scale: 0.2,
            upsample_stages: vec![2, 2, 2, 3],
            scale: 24,
        }
    }

    /// Two RRDBs of two dense blocks with three convolutions, ×4.
    pub fn toy() -> Self {
        Self {
            num_rrdb: 2,
            dense_blocks_per_rrdb: 2,
            convs_per_dense_block: 3,
            base_channels: 16,
            growth_channels: 8,
            residual_scale: 0.2,
            upsample_stages: vec![2, 2],
            scale: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_rrdb", self.num_rrdb),
            ("dense_blocks_per_rrdb", self.dense_blocks_per_rrdb),
            ("convs_per_dense_block", self.convs_per_dense_block),
            ("base_channels", self.base_channels),
            ("growth_channels", self.growth_channels),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!(
                "generator {name} must be at least 1"
            )));
        }
        if !(self.residual_scale > 0.0 && self.residual_scale <= 1.0) {
            return Err(Error::Config(format!(
                "residual_scale {} outside (0, 1]",
                self.residual_scale
            )));
        }
        if self.upsample_stages.is_empty() || self.upsample_stages.contains(&0) {
            return Err(Error::Config(
                "upsample_stages must be non-empty positive factors".into(),
            ));
        }
        let product: usize = self.upsample_stages.iter().product();
        if product != self.scale {
            return Err(Error::Config(format!(
                "upsample stages {:?} multiply to {product}, configured scale is {}",
                self.upsample_stages, self.scale
            )));
        }
        Ok(())
    }

    /// Parameter count implied by the layer shapes.
    pub fn param_count(&self) -> usize {
        let conv = |cin: usize, cout: usize| cout * cin * 9 + cout;
        let (nf, gc, k) = (
            self.base_channels,
            self.growth_channels,
            self.convs_per_dense_block,
        );
        let dense: usize =
            (0..k - 1).map(|i| conv(nf + i * gc, gc)).sum::<usize>() + conv(nf + (k - 1) * gc, nf);
        conv(3, nf)
            + self.num_rrdb * self.dense_blocks_per_rrdb * dense
            + conv(nf, nf)
            + self.upsample_stages.len() * conv(nf, nf)
            + conv(nf, nf)
            + conv(nf, 3)
    }
}

#[derive(Clone, Debug)]
struct DenseBlock {
    convs: Vec<Conv2d>,
}

impl DenseBlock {
    fn forward(&self, b: &mut Binder, x: &Var, beta: f64) -> Var {
        let mut feats = vec![x.clone()];
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            let refs: Vec<&Var> = feats.iter().collect();
            let input = if refs.len() == 1 {
                x.clone()
            } else {
                Var::concat_channels(&refs)
            };
            let y = conv.forward(b, &input);
            if i == last {
                return x.add(&y.scale(beta));
            }
            feats.push(y.leaky_relu(LRELU_SLOPE));
        }
        unreachable!("dense block has at least one convolution")
    }
}

#[derive(Clone, Debug)]
struct Rrdb {
    blocks: Vec<DenseBlock>,
}

impl Rrdb {
    fn forward(&self, b: &mut Binder, x: &Var, beta: f64) -> Var {
        let mut h = x.clone();
        for blk in &self.blocks {
            h = blk.forward(b, &h, beta);
        }
        x.add(&h.scale(beta))
    }
}

/// Generator weights together with their configuration.
#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    conv_first: Conv2d,
    trunk: Vec<Rrdb>,
    conv_body: Conv2d,
    up: Vec<Conv2d>,
    conv_hr: Conv2d,
    conv_last: Conv2d,
}

/// Seeded construction; the parameter count depends only on `cfg`.
pub fn build_generator(cfg: &GeneratorConfig, seed: u64) -> Result<Generator> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let same = ConvGeom::same(3);
    let (nf, gc) = (cfg.base_channels, cfg.growth_channels);
    let mut conv = |name: String, cin: usize, cout: usize, gain: f64| {
        Conv2d::new(&name, cin, cout, 3, same, true, gain, &mut rng)
    };
    let conv_first = conv("conv_first".into(), 3, nf, PLAIN_GAIN);
    let mut trunk = Vec::with_capacity(cfg.num_rrdb);
    for r in 0..cfg.num_rrdb {
        let mut blocks = Vec::with_capacity(cfg.dense_blocks_per_rrdb);
        for d in 0..cfg.dense_blocks_per_rrdb {
            let k = cfg.convs_per_dense_block;
            let convs = (0..k)
                .map(|i| {
                    let cout = if i + 1 == k { nf } else { gc };
                    conv(
                        format!("trunk.{r}.rdb{d}.conv{i}"),
                        nf + i * gc,
                        cout,
                        DENSE_GAIN,
                    )
                })
                .collect();
            blocks.push(DenseBlock { convs });
        }
        trunk.push(Rrdb { blocks });
    }
    let conv_body = conv("conv_body".into(), nf, nf, PLAIN_GAIN);
    let up = (0..cfg.upsample_stages.len())
        .map(|i| conv(format!("up.{i}"), nf, nf, PLAIN_GAIN))
        .collect();
    let conv_hr = conv("conv_hr".into(), nf, nf, PLAIN_GAIN);
    let mut conv_last = conv("conv_last".into(), nf, 3, PLAIN_GAIN);
    // Outputs start near mid-gray, away from the clamp.
    if let Some(bias) = conv_last.bias.as_mut() {
        bias.value = Tensor::full(&[3], 0.5);
    }
    Ok(Generator {
        config: cfg.clone(),
        conv_first,
        trunk,
        conv_body,
        up,
        conv_hr,
        conv_last,
    })
}

impl Generator {
    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Graph forward on an `N×3×s×s` batch; output is `N×3×(s·scale)×(s·scale)`.
    pub fn forward(&self, b: &mut Binder, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] || s[2] == 0 {
            return Err(Error::Shape(format!(
                "generator expects N×3×s×s input, got {s:?}"
            )));
        }
        let beta = self.config.residual_scale;
        let fea = self.conv_first.forward(b, x);
        let mut trunk = fea.clone();
        for rrdb in &self.trunk {
            trunk = rrdb.forward(b, &trunk, beta);
        }
        let mut h = fea.add(&self.conv_body.forward(b, &trunk));
        for (conv, &f) in self.up.iter().zip(&self.config.upsample_stages) {
            h = conv
                .forward(b, &h.upsample_nearest(f))
                .leaky_relu(LRELU_SLOPE);
        }
        let h = self.conv_hr.forward(b, &h).leaky_relu(LRELU_SLOPE);
        Ok(self.conv_last.forward(b, &h).clamp(0.0, 1.0))
    }

    /// Zeroes every dense-block convolution, making each dense block an identity.
    pub fn zero_dense_branches(&mut self) {
        for rrdb in &mut self.trunk {
            for blk in &mut rrdb.blocks {
                for conv in &mut blk.convs {
                    for p in conv.params_mut() {
                        p.value = Tensor::zeros(p.value.shape());
                    }
                }
            }
        }
    }
}

impl Module for Generator {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.conv_first.params();
        for rrdb in &self.trunk {
            for blk in &rrdb.blocks {
                for c in &blk.convs {
                    v.extend(c.params());
                }
            }
        }
        v.extend(self.conv_body.params());
        for c in &self.up {
            v.extend(c.params());
        }
        v.extend(self.conv_hr.params());
        v.extend(self.conv_last.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv_first.params_mut();
        for rrdb in &mut self.trunk {
            for blk in &mut rrdb.blocks {
                for c in &mut blk.convs {
                    v.extend(c.params_mut());
                }
            }
        }
        v.extend(self.conv_body.params_mut());
        for c in &mut self.up {
            v.extend(c.params_mut());
        }
        v.extend(self.conv_hr.params_mut());
        v.extend(self.conv_last.params_mut());
        v
    }
}

/// Super-resolves a single image.
pub fn generate(state: &Generator, lr: &ImageTensor) -> Result<ImageTensor> {
    if lr.channels() != 3 || lr.height() != lr.width() {
        return Err(Error::Shape(format!(
            "generator expects 3×s×s input, got {:?}",
            lr.tensor().shape()
        )));
    }
    let out = state.forward(&mut Binder::frozen(), &Var::constant(lr.to_batch()))?;
    Ok(ImageTensor::from_batch(out.value(), 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_product_must_match_scale() {
        let mut cfg = GeneratorConfig::toy();
        cfg.scale = 8;
        assert!(build_generator(&cfg, 0).is_err());
        assert!(GeneratorConfig::full().validate().is_ok());
    }

    #[test]
    fn toy_shapes_and_range() {
        let g = build_generator(&GeneratorConfig::toy(), 3).unwrap();
        let lr = ImageTensor::from_fn(3, 8, 8, |c, y, x| ((c + 2 * y + 3 * x) % 7) as f64 / 6.0);
        let sr = generate(&g, &lr).unwrap();
        assert_eq!(sr.tensor().shape(), &[3, 32, 32]);
        assert!(sr.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(generate(&g, &ImageTensor::filled(1, 8, 8, 0.0)).is_err());
    }
}
