//! Encoder–decoder segmentation network with atrous spatial pyramid pooling.
//!
//! Encoder: a residual backbone whose last stages trade stride for dilation
//! so features stay at `1/output_stride` resolution. ASPP runs a 1×1 branch,
//! one dilated 3×3 branch per rate and a global-pooling branch in parallel.
//! Decoder: bilinear ×4 to the stride-4 low-level features, concatenation
//! with their 1×1 projection, one 3×3 refinement, a 1×1 classifier, and a
//! bilinear upsample back to input size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ulrseg_tensor::{
    BatchNorm2d, Binder, Conv2d, ConvGeom, Module, NormMode, NormUpdate, Param, Tensor, Var,
};

use crate::error::{Error, Result};
use crate::types::{ImageTensor, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// Stem plus four basic residual stages.
    Tiny,
    /// 101-layer bottleneck residual network.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    pub backbone: Backbone,
    pub num_classes: usize,
    pub aspp_rates: Vec<usize>,
    pub low_level_channels: usize,
    pub output_stride: usize,
    /// Width of the ASPP projection and decoder.
    pub aspp_channels: usize,
    /// Base width of the backbone.
    pub width: usize,
}

impl SegConfig {
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            backbone: Backbone::Tiny,
            num_classes,
            aspp_rates: vec![6, 12, 18],
            low_level_channels: 8,
            output_stride: 16,
            aspp_channels: 32,
            width: 16,
        }
    }

    pub fn full(num_classes: usize) -> Self {
        Self {
            backbone: Backbone::Full,
            num_classes,
            aspp_rates: vec![6, 12, 18],
            low_level_channels: 48,
            output_stride: 16,
            aspp_channels: 256,
            width: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(
                "segmentation needs at least 2 classes".into(),
            ));
        }
        if self.aspp_rates.is_empty()
            || self.aspp_rates.windows(2).any(|w| w[0] >= w[1])
            || self.aspp_rates[0] == 0
        {
            return Err(Error::Config(format!(
                "aspp_rates must be non-empty, positive and strictly increasing, got {:?}",
                self.aspp_rates
            )));
        }
        if self.output_stride != 8 && self.output_stride != 16 {
            return Err(Error::Config(format!(
                "output_stride must be 8 or 16, got {}",
                self.output_stride
            )));
        }
        if self.low_level_channels == 0 || self.aspp_channels == 0 || self.width == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Convolution without bias followed by batch normalization.
#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let geom = ConvGeom::new(stride, dilation * (k - 1) / 2, dilation);
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, k, geom, false, 1.0, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout),
        }
    }

    fn forward(&self, b: &mut Binder, x: &Var, mode: NormMode, relu: bool) -> Var {
        let h = self.conv.forward(b, x);
        let y = self.bn.forward(b, &h, mode);
        if relu {
            y.relu()
        } else {
            y
        }
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.conv.params();
        p.extend(self.bn.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv.params_mut();
        p.extend(self.bn.params_mut());
        p
    }
}

/// Residual block: basic (two 3×3) or bottleneck (1×1, 3×3, 1×1).
#[derive(Clone, Debug)]
struct ResBlock {
    body: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
}

impl ResBlock {
    fn basic<R: Rng>(
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            body: vec![
                ConvBn::new(&format!("{name}.a"), cin, cout, 3, stride, dilation, rng),
                ConvBn::new(&format!("{name}.b"), cout, cout, 3, 1, dilation, rng),
            ],
            shortcut: (stride != 1 || cin != cout)
                .then(|| ConvBn::new(&format!("{name}.down"), cin, cout, 1, stride, 1, rng)),
        }
    }

    fn bottleneck<R: Rng>(
        name: &str,
        cin: usize,
        mid: usize,
        stride: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let cout = mid * 4;
        Self {
            body: vec![
                ConvBn::new(&format!("{name}.a"), cin, mid, 1, 1, 1, rng),
                ConvBn::new(&format!("{name}.b"), mid, mid, 3, stride, dilation, rng),
                ConvBn::new(&format!("{name}.c"), mid, cout, 1, 1, 1, rng),
            ],
            shortcut: (stride != 1 || cin != cout)
                .then(|| ConvBn::new(&format!("{name}.down"), cin, cout, 1, stride, 1, rng)),
        }
    }

    fn forward(&self, b: &mut Binder, x: &Var, mode: NormMode) -> Var {
        let last = self.body.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.body.iter().enumerate() {
            h = layer.forward(b, &h, mode, i != last);
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(b, x, mode, false),
            None => x.clone(),
        };
        h.add(&skip).relu()
    }

    fn layers(&self) -> impl Iterator<Item = &ConvBn> {
        self.body.iter().chain(self.shortcut.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvBn> {
        self.body.iter_mut().chain(self.shortcut.iter_mut())
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    stem: ConvBn,
    max_pool: bool,
    stages: [Vec<ResBlock>; 4],
}

impl Encoder {
    /// Stride and dilation of stages 3 and 4.
    fn late_geometry(output_stride: usize) -> [(usize, usize); 2] {
        if output_stride == 16 {
            [(2, 1), (1, 2)]
        } else {
            [(1, 2), (1, 4)]
        }
    }

    fn tiny<R: Rng>(w: usize, output_stride: usize, rng: &mut R) -> (Self, usize, usize) {
        let [(s3, d3), (s4, d4)] = Self::late_geometry(output_stride);
        let stem = ConvBn::new("enc.stem", 3, w, 3, 2, 1, rng);
        let stages = [
            vec![ResBlock::basic("enc.s1.0", w, w, 2, 1, rng)],
            vec![ResBlock::basic("enc.s2.0", w, 2 * w, 2, 1, rng)],
            vec![ResBlock::basic("enc.s3.0", 2 * w, 4 * w, s3, d3, rng)],
            vec![ResBlock::basic("enc.s4.0", 4 * w, 4 * w, s4, d4, rng)],
        ];
        (
            Self {
                stem,
                max_pool: false,
                stages,
            },
            w,
            4 * w,
        )
    }

    fn full<R: Rng>(w: usize, output_stride: usize, rng: &mut R) -> (Self, usize, usize) {
        let [(s3, d3), (s4, d4)] = Self::late_geometry(output_stride);
        let stem = ConvBn::new("enc.stem", 3, w, 7, 2, 1, rng);
        let spec = [
            (3, w, 1, 1),
            (4, 2 * w, 2, 1),
            (23, 4 * w, s3, d3),
            (3, 8 * w, s4, d4),
        ];
        let mut cin = w;
        let stages = spec.map(|(n, mid, stride, dilation)| {
            (0..n)
                .map(|i| {
                    let name = format!("enc.s{}.{i}", mid / w);
                    let blk = if i == 0 {
                        ResBlock::bottleneck(&name, cin, mid, stride, dilation, rng)
                    } else {
                        ResBlock::bottleneck(&name, mid * 4, mid, 1, dilation, rng)
                    };
                    cin = mid * 4;
                    blk
                })
                .collect::<Vec<_>>()
        });
        (
            Self {
                stem,
                max_pool: true,
                stages,
            },
            4 * w,
            32 * w,
        )
    }

    /// Returns (stride-4 low-level features, final features).
    fn forward(&self, b: &mut Binder, x: &Var, mode: NormMode) -> (Var, Var) {
        let mut h = self.stem.forward(b, x, mode, true);
        if self.max_pool {
            h = h.max_pool2d(3, 2, 1);
        }
        let mut low = None;
        for (i, stage) in self.stages.iter().enumerate() {
            for blk in stage {
                h = blk.forward(b, &h, mode);
            }
            if i == 0 {
                low = Some(h.clone());
            }
        }
        (low.expect("four stages"), h)
    }

    fn layers(&self) -> Vec<&ConvBn> {
        let mut v = vec![&self.stem];
        for stage in &self.stages {
            for blk in stage {
                v.extend(blk.layers());
            }
        }
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut ConvBn> {
        let mut v = vec![&mut self.stem];
        for stage in &mut self.stages {
            for blk in stage {
                v.extend(blk.layers_mut());
            }
        }
        v
    }
}

#[derive(Clone, Debug)]
struct Aspp {
    branches: Vec<ConvBn>,
    /// Image-level branch: a biased 1×1 convolution on pooled features.
    pool_conv: Conv2d,
    project: ConvBn,
}

impl Aspp {
    fn new<R: Rng>(cin: usize, cout: usize, rates: &[usize], rng: &mut R) -> Self {
        let mut branches = vec![ConvBn::new("aspp.b0", cin, cout, 1, 1, 1, rng)];
        for (i, &r) in rates.iter().enumerate() {
            branches.push(ConvBn::new(
                &format!("aspp.b{}", i + 1),
                cin,
                cout,
                3,
                1,
                r,
                rng,
            ));
        }
        let pool_conv = Conv2d::new("aspp.pool", cin, cout, 1, ConvGeom::same(1), true, 1.0, rng);
        let project = ConvBn::new("aspp.project", cout * (rates.len() + 2), cout, 1, 1, 1, rng);
        Self {
            branches,
            pool_conv,
            project,
        }
    }

    fn forward(&self, b: &mut Binder, x: &Var, mode: NormMode) -> Var {
        let (_, _, h, w) = x.value().dims4();
        let mut outs: Vec<Var> = self
            .branches
            .iter()
            .map(|br| br.forward(b, x, mode, true))
            .collect();
        let pooled = self.pool_conv.forward(b, &x.global_avg_pool()).relu();
        outs.push(pooled.broadcast_spatial(h, w));
        let refs: Vec<&Var> = outs.iter().collect();
        self.project
            .forward(b, &Var::concat_channels(&refs), mode, true)
    }
}

/// Segmentation network weights and configuration.
#[derive(Clone, Debug)]
pub struct SegNet {
    config: SegConfig,
    encoder: Encoder,
    aspp: Aspp,
    low_proj: ConvBn,
    refine: ConvBn,
    classifier: Conv2d,
}

pub fn build_segnet(cfg: &SegConfig, seed: u64) -> Result<SegNet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (encoder, low_c, high_c) = match cfg.backbone {
        Backbone::Tiny => Encoder::tiny(cfg.width, cfg.output_stride, &mut rng),
        Backbone::Full => Encoder::full(cfg.width, cfg.output_stride, &mut rng),
    };
    let a = cfg.aspp_channels;
    let aspp = Aspp::new(high_c, a, &cfg.aspp_rates, &mut rng);
    let low_proj = ConvBn::new("dec.low", low_c, cfg.low_level_channels, 1, 1, 1, &mut rng);
    let refine = ConvBn::new(
        "dec.refine",
        a + cfg.low_level_channels,
        a,
        3,
        1,
        1,
        &mut rng,
    );
    let classifier = Conv2d::new(
        "dec.classifier",
        a,
        cfg.num_classes,
        1,
        ConvGeom::same(1),
        true,
        1.0,
        &mut rng,
    );
    Ok(SegNet {
        config: cfg.clone(),
        encoder,
        aspp,
        low_proj,
        refine,
        classifier,
    })
}

impl SegNet {
    pub fn config(&self) -> &SegConfig {
        &self.config
    }

    /// Graph forward on `N×3×H×W`; returns `N×C×H×W` logits.
    pub fn forward(&self, b: &mut Binder, x: &Var, mode: NormMode) -> Result<Var> {
        let s = x.shape();
        let os = self.config.output_stride;
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!(
                "segmenter expects N×3×H×W input, got {s:?}"
            )));
        }
        if s[2] == 0 || s[3] == 0 || !s[2].is_multiple_of(os) || !s[3].is_multiple_of(os) {
            return Err(Error::Shape(format!(
                "input {}×{} is not divisible by output stride {os}",
                s[2], s[3]
            )));
        }
        let (h, w) = (s[2], s[3]);
        let (low, high) = self.encoder.forward(b, x, mode);
        let ctx = self.aspp.forward(b, &high, mode);
        let (_, _, lh, lw) = low.value().dims4();
        let ctx = ctx.upsample_bilinear(lh, lw);
        let low = self.low_proj.forward(b, &low, mode, true);
        let fused = self
            .refine
            .forward(b, &Var::concat_channels(&[&ctx, &low]), mode, true);
        Ok(self.classifier.forward(b, &fused).upsample_bilinear(h, w))
    }

    fn layers(&self) -> Vec<&ConvBn> {
        let mut v = self.encoder.layers();
        v.extend(self.aspp.branches.iter());
        v.push(&self.aspp.project);
        v.push(&self.low_proj);
        v.push(&self.refine);
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut ConvBn> {
        let mut v = self.encoder.layers_mut();
        v.extend(self.aspp.branches.iter_mut());
        v.push(&mut self.aspp.project);
        v.push(&mut self.low_proj);
        v.push(&mut self.refine);
        v
    }

    /// Folds batch statistics from a training forward into running statistics.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate]) {
        let mut layers = self.layers_mut();
        for u in updates {
            if let Some(l) = layers.iter_mut().find(|l| l.bn.name == u.name) {
                l.bn.apply_update(u);
            }
        }
    }
}

impl Module for SegNet {
    fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.layers().into_iter().flat_map(|l| l.params()).collect();
        p.extend(self.aspp.pool_conv.params());
        p.extend(self.classifier.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let SegNet {
            encoder,
            aspp,
            low_proj,
            refine,
            classifier,
            ..
        } = self;
        let mut p: Vec<&mut Param> = encoder
            .layers_mut()
            .into_iter()
            .flat_map(|l| l.params_mut())
            .collect();
        let Aspp {
            branches,
            pool_conv,
            project,
        } = aspp;
        for l in branches {
            p.extend(l.params_mut());
        }
        p.extend(project.params_mut());
        p.extend(low_proj.params_mut());
        p.extend(refine.params_mut());
        p.extend(pool_conv.params_mut());
        p.extend(classifier.params_mut());
        p
    }

    fn buffers(&self) -> Vec<(String, Tensor)> {
        self.layers()
            .into_iter()
            .flat_map(|l| l.bn.buffers())
            .collect()
    }

    fn load_buffer(&mut self, name: &str, value: &Tensor) -> bool {
        self.layers_mut()
            .into_iter()
            .any(|l| l.bn.load_buffer(name, value))
    }
}

/// Per-class logits for one image, `C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegLogits(Tensor);

impl SegLogits {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.ndim() != 3 {
            return Err(Error::Shape(format!(
                "logits must be C×H×W, got {:?}",
                t.shape()
            )));
        }
        if !t.all_finite() {
            return Err(Error::Invalid("logits contain non-finite values".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.shape()[0]
    }
}

/// Inference on one image with stored normalization statistics.
pub fn segment(model: &SegNet, img: &ImageTensor) -> Result<SegLogits> {
    let out = model.forward(
        &mut Binder::frozen(),
        &Var::constant(img.to_batch()),
        NormMode::Running,
    )?;
    let item = out.value().batch_item(0);
    let (_, c, h, w) = item.dims4();
    SegLogits::new(item.into_reshape(&[c, h, w]))
}

/// Per-pixel argmax; ties resolve to the lowest class index.
pub fn predict_labels(logits: &SegLogits) -> LabelMap {
    let s = logits.tensor().shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = logits.tensor().data();
    let plane = h * w;
    LabelMap::from_fn(h, w, |y, x| {
        let p = y * w + x;
        let mut best = 0;
        for k in 1..c {
            if d[k * plane + p] > d[best * plane + p] {
                best = k;
            }
        }
        best as u8
    })
}
