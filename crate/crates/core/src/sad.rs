//! Segmentation-aware discriminator over concatenated (image, label-map) pairs.
//!
//! Every weight is spectrally normalized. The top singular value is tracked by
//! a persistent block power iteration: a small orthonormal basis is refined
//! by alternating multiplications with `W` and `Wᵀ`, then a Rayleigh–Ritz
//! step picks the dominant singular pair inside the basis. With eight
//! vectors, five iterations estimate σ of a random 64×64 matrix within a few
//! percent, where a single vector often stays 20% low.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ulrseg_tensor::{Binder, Conv2d, ConvGeom, Linear, Module, Param, Tensor, Var};

use crate::datakit::encode_onehot;
use crate::error::{Error, Result};
use crate::segnet::SegLogits;
use crate::types::{ImageTensor, LabelMap};

/// Floor below which a weight is treated as zero and left unnormalized.
pub const SIGMA_EPS: f64 = 1e-12;

/// Power-iteration basis size.
pub const DEFAULT_POWER_VECTORS: usize = 8;

/// Iterations used when verifying normalization.
pub const VERIFY_ITERATIONS: usize = 5;

pub const LRELU_SLOPE: f64 = 0.2;

/// Persistent singular-vector estimate of one weight viewed as `[rows, cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    rows: usize,
    cols: usize,
    /// Orthonormal right basis, `cols × k`, column-major.
    basis: Vec<f64>,
    k: usize,
    u: Vec<f64>,
    v: Vec<f64>,
    sigma: f64,
}

/// Orthonormalizes the `k` columns (each of length `n`) in place with
/// modified Gram–Schmidt. Degenerate columns become zero.
fn orthonormalize(cols: &mut [f64], n: usize, k: usize) {
    let scale = cols
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    for j in 0..k {
        for i in 0..j {
            let (prev, cur) = cols.split_at_mut(j * n);
            let qi = &prev[i * n..(i + 1) * n];
            let cj = &mut cur[..n];
            let dot: f64 = qi.iter().zip(cj.iter()).map(|(a, b)| a * b).sum();
            cj.iter_mut().zip(qi).for_each(|(c, q)| *c -= dot * q);
        }
        let cj = &mut cols[j * n..(j + 1) * n];
        let norm = cj.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-10 * scale {
            cj.iter_mut().for_each(|v| *v /= norm);
        } else {
            cj.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Eigen-decomposition of a symmetric `k×k` matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and column-major eigenvectors.
fn symmetric_eigen(a: &[f64], k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut vecs = vec![0.0; k * k];
    for i in 0..k {
        vecs[i * k + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..k)
            .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * k + j].powi(2))
            .sum();
        let diag: f64 = (0..k).map(|i| m[i * k + i].powi(2)).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..k {
            for q in p + 1..k {
                let apq = m[p * k + q];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[q * k + q] - m[p * k + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..k {
                    let (mrp, mrq) = (m[r * k + p], m[r * k + q]);
                    m[r * k + p] = c * mrp - s * mrq;
                    m[r * k + q] = s * mrp + c * mrq;
                }
                for r in 0..k {
                    let (mpr, mqr) = (m[p * k + r], m[q * k + r]);
                    m[p * k + r] = c * mpr - s * mqr;
                    m[q * k + r] = s * mpr + c * mqr;
                }
                for r in 0..k {
                    let (vp, vq) = (vecs[p * k + r], vecs[q * k + r]);
                    vecs[p * k + r] = c * vp - s * vq;
                    vecs[q * k + r] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..k).map(|i| m[i * k + i]).collect(), vecs)
}

impl SpectralState {
    /// Random orthonormal starting basis for a `[rows, cols]` weight.
    pub fn new<R: Rng + ?Sized>(rows: usize, cols: usize, vectors: usize, rng: &mut R) -> Self {
        let k = vectors.clamp(1, rows.min(cols).max(1));
        let mut basis = Tensor::randn(&[k * cols], 1.0, rng).into_data();
        orthonormalize(&mut basis, cols, k);
        Self {
            rows,
            cols,
            v: basis[..cols].to_vec(),
            basis,
            k,
            u: vec![0.0; rows],
            sigma: 0.0,
        }
    }

    /// Left singular vector estimate.
    pub fn u(&self) -> &[f64] {
        &self.u
    }

    /// Right singular vector estimate.
    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// σ estimate from the last refresh.
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Runs `iters` block power iterations against `w` and updates the
    /// singular-pair estimate.
    pub fn refresh(&mut self, w: &Tensor, iters: usize) {
        let (m, n, k) = (self.rows, self.cols, self.k);
        assert_eq!(w.len(), m * n, "spectral state shape mismatch");
        let wd = w.data();
        if wd.iter().all(|v| v.abs() < SIGMA_EPS) {
            self.u.iter_mut().for_each(|x| *x = 0.0);
            self.sigma = 0.0;
            return;
        }
        let mut left = vec![0.0; k * m];
        for _ in 0..iters.max(1) {
            // left = orth(W · basis)
            for j in 0..k {
                let bj = &self.basis[j * n..(j + 1) * n];
                for i in 0..m {
                    left[j * m + i] = wd[i * n..(i + 1) * n]
                        .iter()
                        .zip(bj)
                        .map(|(a, b)| a * b)
                        .sum();
                }
            }
            orthonormalize(&mut left, m, k);
            // basis = orth(Wᵀ · left)
            for j in 0..k {
                let lj = &left[j * m..(j + 1) * m];
                let bj = &mut self.basis[j * n..(j + 1) * n];
                bj.iter_mut().for_each(|x| *x = 0.0);
                for (i, &li) in lj.iter().enumerate() {
                    if li != 0.0 {
                        bj.iter_mut()
                            .zip(&wd[i * n..(i + 1) * n])
                            .for_each(|(x, a)| *x += li * a);
                    }
                }
            }
            orthonormalize(&mut self.basis, n, k);
        }
        // Rayleigh–Ritz: B = leftᵀ W basis (k×k), top right singular vector of B.
        let mut wb = vec![0.0; k * m];
        for j in 0..k {
            let bj = &self.basis[j * n..(j + 1) * n];
            for i in 0..m {
                wb[j * m + i] = wd[i * n..(i + 1) * n]
                    .iter()
                    .zip(bj)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        let mut b = vec![0.0; k * k];
        for r in 0..k {
            for c in 0..k {
                b[r * k + c] = (0..m).map(|i| left[r * m + i] * wb[c * m + i]).sum();
            }
        }
        let mut btb = vec![0.0; k * k];
        for r in 0..k {
            for c in 0..k {
                btb[r * k + c] = (0..k).map(|i| b[i * k + r] * b[i * k + c]).sum();
            }
        }
        let (vals, vecs) = symmetric_eigen(&btb, k);
        let top = (0..k).fold(0, |best, i| if vals[i] > vals[best] { i } else { best });
        let coeff = &vecs[top * k..(top + 1) * k];
        let mut v = vec![0.0; n];
        for (j, &c) in coeff.iter().enumerate() {
            v.iter_mut()
                .zip(&self.basis[j * n..(j + 1) * n])
                .for_each(|(x, bj)| *x += c * bj);
        }
        let norm_v = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm_v < SIGMA_EPS {
            self.sigma = 0.0;
            return;
        }
        v.iter_mut().for_each(|x| *x /= norm_v);
        let mut u: Vec<f64> = (0..m)
            .map(|i| {
                wd[i * n..(i + 1) * n]
                    .iter()
                    .zip(&v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let sigma = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if sigma < SIGMA_EPS {
            self.sigma = 0.0;
            return;
        }
        u.iter_mut().for_each(|x| *x /= sigma);
        self.u = u;
        self.v = v;
        self.sigma = sigma;
    }

    /// `uᵀ W v` for the current estimate.
    pub fn sigma_of(&self, w: &Tensor) -> f64 {
        let (m, n) = (self.rows, self.cols);
        let wd = w.data();
        (0..m)
            .map(|i| {
                self.u[i]
                    * wd[i * n..(i + 1) * n]
                        .iter()
                        .zip(&self.v)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .sum()
    }

    pub fn to_tensors(&self) -> [Tensor; 2] {
        [
            Tensor::new(&[self.cols, self.k], self.basis.clone()),
            Tensor::new(&[self.rows + self.cols + 1], {
                let mut d = self.u.clone();
                d.extend_from_slice(&self.v);
                d.push(self.sigma);
                d
            }),
        ]
    }

    fn load_basis(&mut self, t: &Tensor) -> bool {
        if t.len() != self.basis.len() {
            return false;
        }
        self.basis = t.data().to_vec();
        true
    }

    fn load_pair(&mut self, t: &Tensor) -> bool {
        let (m, n) = (self.rows, self.cols);
        if t.len() != m + n + 1 {
            return false;
        }
        let d = t.data();
        self.u = d[..m].to_vec();
        self.v = d[m..m + n].to_vec();
        self.sigma = d[m + n];
        true
    }
}

/// Divides `w` by its estimated top singular value, refreshing `state`.
/// Weights whose estimate falls below [`SIGMA_EPS`] are returned unchanged.
pub fn spectral_normalize(w: &Tensor, state: &mut SpectralState, iters: usize) -> Result<Tensor> {
    if iters == 0 {
        return Err(Error::Invalid(
            "spectral normalization needs at least one iteration".into(),
        ));
    }
    if !w.all_finite() {
        return Err(Error::Invalid("weight contains non-finite values".into()));
    }
    state.refresh(w, iters);
    let sigma = state.sigma_of(w);
    if sigma.abs() < SIGMA_EPS {
        return Ok(w.clone());
    }
    Ok(w.scale(1.0 / sigma))
}

/// Rows and columns of a weight flattened to `(out, in·kh·kw)`.
pub fn matrix_dims(w: &Tensor) -> (usize, usize) {
    let rows = w.shape()[0];
    (rows, w.len() / rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    /// Channels of the input pair: `3 + C`, or 3 for the image-only critic.
    pub in_channels: usize,
    pub conv_blocks: usize,
    pub widths: Vec<usize>,
    /// Power iterations per training step.
    pub power_iterations: usize,
    #[serde(default = "default_power_vectors")]
    pub power_vectors: usize,
}

fn default_power_vectors() -> usize {
    DEFAULT_POWER_VECTORS
}

impl DiscConfig {
    /// Four blocks of widths 64–512 over `3 + C` channels.
    pub fn full(num_classes: usize) -> Self {
        Self {
            in_channels: 3 + num_classes,
            conv_blocks: 4,
            widths: vec![64, 128, 256, 512],
            power_iterations: 1,
            power_vectors: DEFAULT_POWER_VECTORS,
        }
    }

    pub fn toy(num_classes: usize) -> Self {
        Self {
            in_channels: 3 + num_classes,
            conv_blocks: 3,
            widths: vec![16, 32, 32],
            power_iterations: 1,
            power_vectors: DEFAULT_POWER_VECTORS,
        }
    }

    /// Same layout judging images alone.
    pub fn rgb_only(&self) -> Self {
        Self {
            in_channels: 3,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_blocks == 0 || self.widths.len() != self.conv_blocks {
            return Err(Error::Config(format!(
                "discriminator has {} blocks but {} widths",
                self.conv_blocks,
                self.widths.len()
            )));
        }
        if self.widths.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config(
                "discriminator widths must be positive".into(),
            ));
        }
        if self.power_iterations == 0 || self.power_vectors == 0 {
            return Err(Error::Config(
                "power_iterations and power_vectors must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct SnConv {
    conv: Conv2d,
    sn: SpectralState,
}

impl SnConv {
    fn forward(&self, b: &mut Binder, x: &Var) -> Var {
        let w = b.bind(&self.conv.weight);
        let (wn, _) = w.spectral_divide(self.sn.u(), self.sn.v(), SIGMA_EPS);
        let bias = self.conv.bias.as_ref().map(|p| b.bind(p));
        x.conv2d(&wn, bias.as_ref(), self.conv.geom)
    }
}

/// Discriminator weights, spectral states and configuration.
#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscConfig,
    convs: Vec<SnConv>,
    head: Linear,
    head_sn: SpectralState,
}

pub fn build_discriminator(cfg: &DiscConfig, seed: u64) -> Result<Discriminator> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut convs = Vec::new();
    let mut cin = cfg.in_channels;
    for (i, &w) in cfg.widths.iter().enumerate() {
        for (j, stride) in [(0, 1), (1, 2)] {
            let conv = Conv2d::new(
                &format!("block{i}.conv{j}"),
                cin,
                w,
                3,
                ConvGeom::new(stride, 1, 1),
                true,
                1.0,
                &mut rng,
            );
            let (r, c) = matrix_dims(&conv.weight.value);
            let sn = SpectralState::new(r, c, cfg.power_vectors, &mut rng);
            convs.push(SnConv { conv, sn });
            cin = w;
        }
    }
    let head = Linear::new("head", cin, 1, &mut rng);
    let head_sn = SpectralState::new(1, cin, cfg.power_vectors, &mut rng);
    let mut d = Discriminator {
        config: cfg.clone(),
        convs,
        head,
        head_sn,
    };
    d.refresh(crate::sad::VERIFY_ITERATIONS);
    Ok(d)
}

impl Discriminator {
    pub fn config(&self) -> &DiscConfig {
        &self.config
    }

    /// Advances every power iteration against the current weights.
    pub fn refresh(&mut self, iters: usize) {
        for c in &mut self.convs {
            c.sn.refresh(&c.conv.weight.value, iters);
        }
        self.head_sn.refresh(&self.head.weight.value, iters);
    }

    /// `uᵀWv` used by the next forward pass, per layer.
    pub fn sigma_estimates(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .convs
            .iter()
            .map(|c| {
                (
                    c.conv.weight.name.clone(),
                    c.sn.sigma_of(&c.conv.weight.value),
                )
            })
            .collect();
        out.push((
            self.head.weight.name.clone(),
            self.head_sn.sigma_of(&self.head.weight.value),
        ));
        out
    }

    /// Top singular value of each weight after normalization, measured with a
    /// fresh verification-strength estimate.
    pub fn normalized_sigmas(&self) -> Vec<(String, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut layers: Vec<(&Param, &SpectralState)> =
            self.convs.iter().map(|c| (&c.conv.weight, &c.sn)).collect();
        layers.push((&self.head.weight, &self.head_sn));
        layers
            .into_iter()
            .map(|(p, sn)| {
                let used = sn.sigma_of(&p.value);
                let (r, c) = matrix_dims(&p.value);
                let mut probe = SpectralState::new(r, c, self.config.power_vectors, &mut rng);
                probe.refresh(&p.value, VERIFY_ITERATIONS);
                let ratio = if used.abs() < SIGMA_EPS {
                    probe.sigma()
                } else {
                    probe.sigma() / used
                };
                (p.name.clone(), ratio)
            })
            .collect()
    }

    /// Graph forward on `N×(3+C)×H×W`; returns `N` logits.
    pub fn forward(&self, b: &mut Binder, z: &Var) -> Result<Var> {
        let s = z.shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects N×{}×H×W input, got {s:?}",
                self.config.in_channels
            )));
        }
        let n = s[0];
        let mut h = z.clone();
        for c in &self.convs {
            h = c.forward(b, &h).leaky_relu(LRELU_SLOPE);
        }
        let (_, ch, _, _) = h.value().dims4();
        let pooled = h.global_avg_pool().reshape(&[n, ch]);
        let w = b.bind(&self.head.weight);
        let (wn, _) = w.spectral_divide(self.head_sn.u(), self.head_sn.v(), SIGMA_EPS);
        let bias = b.bind(&self.head.bias);
        Ok(pooled.linear(&wn, Some(&bias)).reshape(&[n]))
    }

    /// Sets the final layer's weight and bias to zero.
    pub fn zero_head(&mut self) {
        for p in self.head.params_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
    }

    /// Weights of every layer with their spectral normalization applied.
    pub fn normalized_weights(&self) -> Vec<Tensor> {
        let mut layers: Vec<(&Param, &SpectralState)> =
            self.convs.iter().map(|c| (&c.conv.weight, &c.sn)).collect();
        layers.push((&self.head.weight, &self.head_sn));
        layers
            .into_iter()
            .map(|(p, sn)| {
                let s = sn.sigma_of(&p.value);
                if s.abs() < SIGMA_EPS {
                    p.value.clone()
                } else {
                    p.value.scale(1.0 / s)
                }
            })
            .collect()
    }

    /// Number of spectrally normalized layers.
    pub fn num_layers(&self) -> usize {
        self.convs.len() + 1
    }

    fn states_mut(&mut self) -> Vec<(String, &mut SpectralState)> {
        let mut v: Vec<(String, &mut SpectralState)> = self
            .convs
            .iter_mut()
            .map(|c| (c.conv.weight.name.clone(), &mut c.sn))
            .collect();
        v.push((self.head.weight.name.clone(), &mut self.head_sn));
        v
    }
}

impl Module for Discriminator {
    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.convs.iter().flat_map(|c| c.conv.params()).collect();
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self
            .convs
            .iter_mut()
            .flat_map(|c| c.conv.params_mut())
            .collect();
        v.extend(self.head.params_mut());
        v
    }

    fn buffers(&self) -> Vec<(String, Tensor)> {
        let mut layers: Vec<(&Param, &SpectralState)> =
            self.convs.iter().map(|c| (&c.conv.weight, &c.sn)).collect();
        layers.push((&self.head.weight, &self.head_sn));
        layers
            .into_iter()
            .flat_map(|(p, sn)| {
                let [basis, pair] = sn.to_tensors();
                [
                    (format!("{}.sn_basis", p.name), basis),
                    (format!("{}.sn_pair", p.name), pair),
                ]
            })
            .collect()
    }

    fn load_buffer(&mut self, name: &str, value: &Tensor) -> bool {
        for (wname, sn) in self.states_mut() {
            if name == format!("{wname}.sn_basis") {
                return sn.load_basis(value);
            }
            if name == format!("{wname}.sn_pair") {
                return sn.load_pair(value);
            }
        }
        false
    }
}

/// An `(image, label-map)` stack of `3 + C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairInput(Tensor);

impl PairInput {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }
}

/// Ground-truth pair: the image with the one-hot label map.
pub fn make_real_pair(
    hr: &ImageTensor,
    label: &LabelMap,
    num_classes: usize,
    ignore: u8,
) -> Result<PairInput> {
    if hr.channels() != 3 || (hr.height(), hr.width()) != (label.height(), label.width()) {
        return Err(Error::Shape(format!(
            "image {:?} and label {}×{} do not form a pair",
            hr.tensor().shape(),
            label.height(),
            label.width()
        )));
    }
    let onehot = encode_onehot(label, num_classes, ignore)?;
    Ok(PairInput(
        Tensor::concat_channels(&[
            &hr.to_batch(),
            &onehot.reshape(&[1, num_classes, label.height(), label.width()]),
        ])
        .into_reshape(&[3 + num_classes, label.height(), label.width()]),
    ))
}

/// Generated pair: the reconstruction with per-pixel class probabilities.
pub fn make_fake_pair(sr: &ImageTensor, logits: &SegLogits) -> Result<PairInput> {
    let z = fake_pair_var(
        &Var::constant(sr.to_batch()),
        &Var::constant({
            let s = logits.tensor().shape();
            logits.tensor().reshape(&[1, s[0], s[1], s[2]])
        }),
    )?;
    let (_, c, h, w) = z.value().dims4();
    Ok(PairInput(z.value().reshape(&[c, h, w])))
}

/// Graph form of the generated pair for `N×3×H×W` images and `N×C×H×W` logits.
pub fn fake_pair_var(sr: &Var, logits: &Var) -> Result<Var> {
    let (a, b) = (sr.shape(), logits.shape());
    if a.len() != 4 || b.len() != 4 || a[1] != 3 || a[0] != b[0] || a[2..] != b[2..] {
        return Err(Error::Shape(format!(
            "image {a:?} and logits {b:?} do not form a pair"
        )));
    }
    Ok(Var::concat_channels(&[sr, &logits.softmax_channels()]))
}

/// Graph form of the ground-truth pair from an image batch and one-hot stack.
pub fn real_pair_var(hr: &Var, onehot: &Var) -> Result<Var> {
    let (a, b) = (hr.shape(), onehot.shape());
    if a.len() != 4 || b.len() != 4 || a[1] != 3 || a[0] != b[0] || a[2..] != b[2..] {
        return Err(Error::Shape(format!(
            "image {a:?} and one-hot {b:?} do not form a pair"
        )));
    }
    Ok(Var::concat_channels(&[hr, onehot]))
}

/// Logit for a single pair.
pub fn discriminate(d: &Discriminator, z: &PairInput) -> Result<f64> {
    let s = z.tensor().shape();
    let x = z.tensor().reshape(&[1, s[0], s[1], s[2]]);
    Ok(d.forward(&mut Binder::frozen(), &Var::constant(x))?
        .value()
        .data()[0])
}
