//! Differentiable operations on [`Var`].

use std::rc::Rc;

use crate::autograd::Var;
use crate::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::tensor::{gemm, Tensor};

fn unary(x: &Var, value: Tensor, f: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor + 'static) -> Var {
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, parents, out| vec![Some(f(g, parents[0].value(), out))]),
    )
}

/// Numerically safe `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-axis source taps for bilinear resampling with half-pixel centers.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a + b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a - b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.scale(-1.0))]),
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        let value = self.value().zip_map(other.value(), |a, b| a * b);
        Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, _| {
                vec![
                    Some(g.zip_map(p[1].value(), |g, b| g * b)),
                    Some(g.zip_map(p[0].value(), |g, a| g * a)),
                ]
            }),
        )
    }

    pub fn scale(&self, s: f64) -> Var {
        unary(self, self.value().scale(s), move |g, _, _| g.scale(s))
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        unary(self, self.value().map(|v| v + s), |g, _, _| g.clone())
    }

    pub fn abs(&self) -> Var {
        unary(self, self.value().map(f64::abs), |g, x, _| {
            g.zip_map(x, |g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            })
        })
    }

    pub fn sum(&self) -> Var {
        let shape = self.shape().to_vec();
        unary(self, Tensor::scalar(self.value().sum()), move |g, _, _| {
            Tensor::full(&shape, g.item())
        })
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let from = self.shape().to_vec();
        unary(self, self.value().reshape(shape), move |g, _, _| {
            g.reshape(&from)
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let value = self.value().map(|v| if v > 0.0 { v } else { slope * v });
        unary(self, value, move |g, x, _| {
            g.zip_map(x, |g, x| if x > 0.0 { g } else { slope * g })
        })
    }

    pub fn relu(&self) -> Var {
        self.leaky_relu(0.0)
    }

    /// Clamps to `[lo, hi]`; gradient passes where the input lies inside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let value = self.value().map(|v| v.clamp(lo, hi));
        unary(self, value, move |g, x, _| {
            g.zip_map(x, |g, x| if (lo..=hi).contains(&x) { g } else { 0.0 })
        })
    }

    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, geom: ConvGeom) -> Var {
        let value = conv2d_forward(self.value(), weight.value(), bias.map(Var::value), geom);
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Var::from_op(
            value,
            parents,
            Box::new(move |g, p, _| {
                let (gx, gw, gb) = conv2d_backward(
                    p[0].value(),
                    p[1].value(),
                    g,
                    geom,
                    p[0].requires_grad(),
                    p[1].requires_grad(),
                );
                let mut out = vec![gx, gw];
                if p.len() == 3 {
                    out.push(Some(gb));
                }
                out
            }),
        )
    }

    /// `y = x W^T + b` for `x: [N, F]`, `W: [O, F]`, `b: [O]`.
    pub fn linear(&self, weight: &Var, bias: Option<&Var>) -> Var {
        let (n, f) = self.value().dims2();
        let (o, wf) = weight.value().dims2();
        assert_eq!(f, wf, "linear: feature mismatch");
        let mut out = vec![0.0; n * o];
        if let Some(b) = bias {
            for row in out.chunks_mut(o) {
                row.copy_from_slice(b.value().data());
            }
        }
        gemm(
            n,
            f,
            o,
            self.value().data(),
            f as isize,
            1,
            weight.value().data(),
            1,
            f as isize,
            1.0,
            &mut out,
            o as isize,
            1,
        );
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Var::from_op(
            Tensor::new(&[n, o], out),
            parents,
            Box::new(move |g, p, _| {
                let x = p[0].value();
                let w = p[1].value();
                let mut gx = vec![0.0; n * f];
                gemm(
                    n,
                    o,
                    f,
                    g.data(),
                    o as isize,
                    1,
                    w.data(),
                    f as isize,
                    1,
                    0.0,
                    &mut gx,
                    f as isize,
                    1,
                );
                let mut gw = vec![0.0; o * f];
                gemm(
                    o,
                    n,
                    f,
                    g.data(),
                    1,
                    o as isize,
                    x.data(),
                    f as isize,
                    1,
                    0.0,
                    &mut gw,
                    f as isize,
                    1,
                );
                let mut res = vec![
                    Some(Tensor::new(&[n, f], gx)),
                    Some(Tensor::new(&[o, f], gw)),
                ];
                if p.len() == 3 {
                    let mut gb = vec![0.0; o];
                    for row in g.data().chunks(o) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    res.push(Some(Tensor::new(&[o], gb)));
                }
                res
            }),
        )
    }

    pub fn concat_channels(items: &[&Var]) -> Var {
        let values: Vec<&Tensor> = items.iter().map(|v| v.value()).collect();
        let value = Tensor::concat_channels(&values);
        let widths: Vec<usize> = items.iter().map(|v| v.shape()[1]).collect();
        Var::from_op(
            value,
            items.iter().map(|v| (*v).clone()).collect(),
            Box::new(move |g, _, _| {
                let (n, total, h, w) = g.dims4();
                let plane = h * w;
                let mut offset = 0;
                widths
                    .iter()
                    .map(|&c| {
                        let mut data = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total + offset) * plane;
                            data.extend_from_slice(&g.data()[start..start + c * plane]);
                        }
                        offset += c;
                        Some(Tensor::new(&[n, c, h, w], data))
                    })
                    .collect()
            }),
        )
    }

    pub fn upsample_nearest(&self, factor: usize) -> Var {
        let (n, c, h, w) = self.value().dims4();
        let (oh, ow) = (h * factor, w * factor);
        let x = self.value().data();
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let src = &x[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / factor) * w + xx / factor];
                }
            }
        }
        unary(self, Tensor::new(&[n, c, oh, ow], out), move |g, _, _| {
            let mut gx = vec![0.0; n * c * h * w];
            for nc in 0..n * c {
                let src = &g.data()[nc * oh * ow..(nc + 1) * oh * ow];
                let dst = &mut gx[nc * h * w..(nc + 1) * h * w];
                for y in 0..oh {
                    for xx in 0..ow {
                        dst[(y / factor) * w + xx / factor] += src[y * ow + xx];
                    }
                }
            }
            Tensor::new(&[n, c, h, w], gx)
        })
    }

    /// Bilinear resize with half-pixel centers (no corner alignment).
    pub fn upsample_bilinear(&self, oh: usize, ow: usize) -> Var {
        let (n, c, h, w) = self.value().dims4();
        let ty = Rc::new(bilinear_taps(h, oh));
        let tx = Rc::new(bilinear_taps(w, ow));
        let x = self.value().data();
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let src = &x[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (xx, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                    dst[y * ow + xx] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        unary(self, Tensor::new(&[n, c, oh, ow], out), move |g, _, _| {
            let mut gx = vec![0.0; n * c * h * w];
            for nc in 0..n * c {
                let src = &g.data()[nc * oh * ow..(nc + 1) * oh * ow];
                let dst = &mut gx[nc * h * w..(nc + 1) * h * w];
                for (y, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (xx, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let v = src[y * ow + xx];
                        dst[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                        dst[y0 * w + x1] += v * (1.0 - ly) * lx;
                        dst[y1 * w + x0] += v * ly * (1.0 - lx);
                        dst[y1 * w + x1] += v * ly * lx;
                    }
                }
            }
            Tensor::new(&[n, c, h, w], gx)
        })
    }

    /// `[N,C,H,W] -> [N,C,1,1]` spatial mean.
    pub fn global_avg_pool(&self) -> Var {
        let (n, c, h, w) = self.value().dims4();
        let plane = h * w;
        let data = self
            .value()
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        unary(self, Tensor::new(&[n, c, 1, 1], data), move |g, _, _| {
            let mut gx = Vec::with_capacity(n * c * plane);
            for &v in g.data() {
                gx.extend(std::iter::repeat_n(v / plane as f64, plane));
            }
            Tensor::new(&[n, c, h, w], gx)
        })
    }

    /// `[N,C,1,1] -> [N,C,H,W]` by replication.
    pub fn broadcast_spatial(&self, h: usize, w: usize) -> Var {
        let (n, c, one_h, one_w) = self.value().dims4();
        assert_eq!((one_h, one_w), (1, 1), "broadcast_spatial expects 1x1 maps");
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c * plane);
        for &v in self.value().data() {
            data.extend(std::iter::repeat_n(v, plane));
        }
        unary(self, Tensor::new(&[n, c, h, w], data), move |g, _, _| {
            let sums = g.data().chunks(plane).map(|p| p.iter().sum()).collect();
            Tensor::new(&[n, c, 1, 1], sums)
        })
    }

    /// Max pooling with implicit `-inf` padding.
    pub fn max_pool2d(&self, kernel: usize, stride: usize, padding: usize) -> Var {
        let (n, c, h, w) = self.value().dims4();
        let geom = ConvGeom::new(stride, padding, 1);
        let oh = geom.out_size(h, kernel);
        let ow = geom.out_size(w, kernel);
        let x = self.value().data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut arg = vec![0usize; n * c * oh * ow];
        for nc in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = nc * h * w;
                    for i in 0..kernel {
                        for j in 0..kernel {
                            let iy = (y * stride + i) as isize - padding as isize;
                            let ix = (xx * stride + j) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                continue;
                            }
                            let idx = nc * h * w + iy as usize * w + ix as usize;
                            if x[idx] > best {
                                best = x[idx];
                                best_i = idx;
                            }
                        }
                    }
                    let o = (nc * oh + y) * ow + xx;
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
        let len = x.len();
        unary(self, Tensor::new(&[n, c, oh, ow], out), move |g, _, _| {
            let mut gx = vec![0.0; len];
            for (o, &i) in arg.iter().enumerate() {
                gx[i] += g.data()[o];
            }
            Tensor::new(&[n, c, h, w], gx)
        })
    }

    /// Batch normalization using the batch's own statistics.
    ///
    /// Returns the output together with the per-channel batch mean and the
    /// unbiased batch variance (for running-statistic updates).
    pub fn batch_norm_train(&self, gamma: &Var, beta: &Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let (n, c, h, w) = self.value().dims4();
        let plane = h * w;
        let count = (n * plane) as f64;
        let x = self.value().data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let p = &x[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                mean[ch] += p.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for b in 0..n {
            for ch in 0..c {
                let p = &x[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                var[ch] += p.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let (gm, bt) = (gamma.value().data()[ch], beta.value().data()[ch]);
                for i in base..base + plane {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = gm * xhat[i] + bt;
                }
            }
        }
        let unbiased = var
            .iter()
            .map(|v| {
                if count > 1.0 {
                    v * count / (count - 1.0)
                } else {
                    *v
                }
            })
            .collect();
        let xhat = Tensor::new(&[n, c, h, w], xhat);
        let y = Var::from_op(
            Tensor::new(&[n, c, h, w], out),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, p, _| {
                let gamma = p[1].value().data();
                let gd = g.data();
                let xh = xhat.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for i in base..base + plane {
                            sum_g[ch] += gd[i];
                            sum_gx[ch] += gd[i] * xh[i];
                        }
                    }
                }
                let mut gx = vec![0.0; gd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        let k = gamma[ch] * inv_std[ch];
                        for i in base..base + plane {
                            gx[i] = k * (gd[i] - sum_g[ch] / count - xh[i] * sum_gx[ch] / count);
                        }
                    }
                }
                vec![
                    Some(Tensor::new(&[n, c, h, w], gx)),
                    Some(Tensor::new(&[c], sum_gx)),
                    Some(Tensor::new(&[c], sum_g)),
                ]
            }),
        );
        (y, mean, unbiased)
    }

    /// Batch normalization with fixed statistics: an affine map per channel.
    pub fn batch_norm_eval(
        &self,
        gamma: &Var,
        beta: &Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Var {
        let (n, c, h, w) = self.value().dims4();
        let plane = h * w;
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let rm = running_mean.to_vec();
        let x = self.value().data();
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let (gm, bt) = (gamma.value().data()[ch], beta.value().data()[ch]);
                for i in base..base + plane {
                    out[i] = gm * (x[i] - rm[ch]) * inv_std[ch] + bt;
                }
            }
        }
        Var::from_op(
            Tensor::new(&[n, c, h, w], out),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, p, _| {
                let x = p[0].value().data();
                let gamma = p[1].value().data();
                let gd = g.data();
                let mut gx = vec![0.0; gd.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for i in base..base + plane {
                            gx[i] = gd[i] * gamma[ch] * inv_std[ch];
                            gg[ch] += gd[i] * (x[i] - rm[ch]) * inv_std[ch];
                            gb[ch] += gd[i];
                        }
                    }
                }
                vec![
                    Some(Tensor::new(&[n, c, h, w], gx)),
                    Some(Tensor::new(&[c], gg)),
                    Some(Tensor::new(&[c], gb)),
                ]
            }),
        )
    }

    /// Softmax across the channel axis of an NCHW tensor.
    pub fn softmax_channels(&self) -> Var {
        let (n, c, h, w) = self.value().dims4();
        let plane = h * w;
        let x = self.value().data();
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for p in 0..plane {
                let idx = |ch: usize| (b * c + ch) * plane + p;
                let m = (0..c)
                    .map(|ch| x[idx(ch)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|ch| (x[idx(ch)] - m).exp()).sum();
                for ch in 0..c {
                    out[idx(ch)] = (x[idx(ch)] - m).exp() / z;
                }
            }
        }
        unary(self, Tensor::new(&[n, c, h, w], out), move |g, _, y| {
            let (gd, yd) = (g.data(), y.data());
            let mut gx = vec![0.0; gd.len()];
            for b in 0..n {
                for p in 0..plane {
                    let idx = |ch: usize| (b * c + ch) * plane + p;
                    let dot: f64 = (0..c).map(|ch| gd[idx(ch)] * yd[idx(ch)]).sum();
                    for ch in 0..c {
                        gx[idx(ch)] = yd[idx(ch)] * (gd[idx(ch)] - dot);
                    }
                }
            }
            Tensor::new(&[n, c, h, w], gx)
        })
    }

    /// Divides each channel vector by `max(||x||_2, eps)`.
    pub fn l2_normalize_channels(&self, eps: f64) -> Var {
        let (n, c, h, w) = self.value().dims4();
        let plane = h * w;
        let x = self.value().data();
        let mut norms = vec![0.0; n * plane];
        for b in 0..n {
            for p in 0..plane {
                let s: f64 = (0..c).map(|ch| x[(b * c + ch) * plane + p].powi(2)).sum();
                norms[b * plane + p] = s.sqrt().max(eps);
            }
        }
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..plane {
                    let i = (b * c + ch) * plane + p;
                    out[i] = x[i] / norms[b * plane + p];
                }
            }
        }
        unary(self, Tensor::new(&[n, c, h, w], out), move |g, x, y| {
            let (gd, yd, xd) = (g.data(), y.data(), x.data());
            let mut gx = vec![0.0; gd.len()];
            for b in 0..n {
                for p in 0..plane {
                    let idx = |ch: usize| (b * c + ch) * plane + p;
                    let norm = norms[b * plane + p];
                    let raw: f64 = (0..c).map(|ch| xd[idx(ch)].powi(2)).sum::<f64>().sqrt();
                    if raw > eps {
                        let dot: f64 = (0..c).map(|ch| gd[idx(ch)] * yd[idx(ch)]).sum();
                        for ch in 0..c {
                            gx[idx(ch)] = (gd[idx(ch)] - yd[idx(ch)] * dot) / norm;
                        }
                    } else {
                        for ch in 0..c {
                            gx[idx(ch)] = gd[idx(ch)] / eps;
                        }
                    }
                }
            }
            Tensor::new(&[n, c, h, w], gx)
        })
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, target: &Var) -> Var {
        let n = self.value().len() as f64;
        let value = self
            .value()
            .data()
            .iter()
            .zip(target.value().data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n;
        Var::from_op(
            Tensor::scalar(value),
            vec![self.clone(), target.clone()],
            Box::new(move |g, p, _| {
                let k = 2.0 * g.item() / n;
                let d = p[0].value().zip_map(p[1].value(), |a, b| k * (a - b));
                let neg = d.scale(-1.0);
                vec![Some(d), Some(neg)]
            }),
        )
    }

    /// Mean absolute difference over all elements.
    pub fn mae(&self, target: &Var) -> Var {
        self.sub(target).abs().mean()
    }

    /// Mean pixel-wise cross-entropy over non-ignored labels.
    ///
    /// `labels` holds one class index per `(n, h, w)` position in NCHW order
    /// without the channel axis. Panics when every pixel is ignored.
    pub fn cross_entropy(&self, labels: &[u8], ignore_index: u8) -> Var {
        let (n, c, h, w) = self.value().dims4();
        let plane = h * w;
        assert_eq!(
            labels.len(),
            n * plane,
            "cross_entropy: label count mismatch"
        );
        let x = self.value().data();
        let mut total = 0.0;
        let mut count = 0usize;
        let mut probs = vec![0.0; x.len()];
        for b in 0..n {
            for p in 0..plane {
                let label = labels[b * plane + p];
                let idx = |ch: usize| (b * c + ch) * plane + p;
                let m = (0..c)
                    .map(|ch| x[idx(ch)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|ch| (x[idx(ch)] - m).exp()).sum();
                for ch in 0..c {
                    probs[idx(ch)] = (x[idx(ch)] - m).exp() / z;
                }
                if label == ignore_index {
                    continue;
                }
                let y = label as usize;
                assert!(y < c, "label {y} out of range for {c} classes");
                total += -x[idx(y)] + m + z.ln();
                count += 1;
            }
        }
        assert!(count > 0, "cross_entropy: every pixel is ignored");
        let labels = labels.to_vec();
        let count_f = count as f64;
        unary(self, Tensor::scalar(total / count_f), move |g, _, _| {
            let k = g.item() / count_f;
            let mut gx = vec![0.0; probs.len()];
            for b in 0..n {
                for p in 0..plane {
                    let label = labels[b * plane + p];
                    if label == ignore_index {
                        continue;
                    }
                    for ch in 0..c {
                        let i = (b * c + ch) * plane + p;
                        let onehot = if ch == label as usize { 1.0 } else { 0.0 };
                        gx[i] = k * (probs[i] - onehot);
                    }
                }
            }
            Tensor::new(&[n, c, h, w], gx)
        })
    }

    /// Mean binary cross-entropy of logits against targets in `{0, 1}`.
    pub fn bce_with_logits(&self, target: f64) -> Var {
        let n = self.value().len() as f64;
        let value = self
            .value()
            .data()
            .iter()
            .map(|&u| target * softplus(-u) + (1.0 - target) * softplus(u))
            .sum::<f64>()
            / n;
        unary(self, Tensor::scalar(value), move |g, x, _| {
            let k = g.item() / n;
            x.map(|u| k * (sigmoid(u) - target))
        })
    }

    /// Divides a weight by `sigma = u^T W v`, with `W` viewed as
    /// `[shape[0], rest]`. Weights whose estimate falls below `eps` pass
    /// through unchanged.
    pub fn spectral_divide(&self, u: &[f64], v: &[f64], eps: f64) -> (Var, f64) {
        let rows = self.shape()[0];
        let cols = self.value().len() / rows;
        assert_eq!(u.len(), rows);
        assert_eq!(v.len(), cols);
        let w = self.value().data();
        let sigma: f64 = (0..rows)
            .map(|i| {
                u[i] * w[i * cols..(i + 1) * cols]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum();
        if sigma.abs() < eps {
            return (self.clone(), sigma);
        }
        let (u, v) = (u.to_vec(), v.to_vec());
        let var = unary(self, self.value().scale(1.0 / sigma), move |g, w, _| {
            let gw: f64 = g.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            let k = gw / (sigma * sigma);
            let mut out = g.scale(1.0 / sigma);
            let d = out.data_mut();
            for i in 0..rows {
                for j in 0..cols {
                    d[i * cols + j] -= k * u[i] * v[j];
                }
            }
            out
        });
        (var, sigma)
    }
}
