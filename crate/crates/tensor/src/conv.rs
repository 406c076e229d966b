//! im2col convolution kernels.
//!
//! The column buffer is processed in chunks of output positions so that the
//! largest intermediate stays bounded for high-resolution feature maps.

use crate::tensor::{gemm, Tensor};

/// Stride, zero padding and dilation of a 2-D convolution (same on both axes).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1 with "same" padding for an odd kernel.
    pub const fn same(kernel: usize) -> Self {
        Self::new(1, kernel / 2, 1)
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        assert!(
            input + 2 * self.padding >= span,
            "kernel span {span} exceeds padded input {}",
            input + 2 * self.padding
        );
        (input + 2 * self.padding - span) / self.stride + 1
    }
}

// Upper bound on column-buffer elements per chunk (~64 MiB of f64).
const MAX_COL_ELEMS: usize = 8 << 20;

struct Layout {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeom,
}

impl Layout {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn chunk(&self) -> usize {
        (MAX_COL_ELEMS / self.k().max(1)).clamp(1, self.oh * self.ow)
    }

    /// Fills `cols[K, len]` for output positions `p0..p0+len` of one image.
    fn im2col(&self, img: &[f64], p0: usize, len: usize, cols: &mut [f64]) {
        let g = self.geom;
        for ci in 0..self.cin {
            let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * len..(row + 1) * len];
                    for (t, slot) in dst.iter_mut().enumerate() {
                        let p = p0 + t;
                        let oy = p / self.ow;
                        let ox = p % self.ow;
                        let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                        *slot = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < self.h
                            && (ix as usize) < self.w
                        {
                            plane[iy as usize * self.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols[K, len]` back into the image gradient.
    fn col2im(&self, cols: &[f64], p0: usize, len: usize, img: &mut [f64]) {
        let g = self.geom;
        for ci in 0..self.cin {
            let plane = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * len..(row + 1) * len];
                    for (t, &v) in src.iter().enumerate() {
                        let p = p0 + t;
                        let oy = p / self.ow;
                        let ox = p % self.ow;
                        let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                            plane[iy as usize * self.w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn layout(x: &Tensor, w: &Tensor, geom: ConvGeom) -> (usize, usize, Layout) {
    let (n, cin, h, wd) = x.dims4();
    let (cout, wcin, kh, kw) = w.dims4();
    assert_eq!(
        cin, wcin,
        "conv2d: input has {cin} channels, kernel expects {wcin}"
    );
    let oh = geom.out_size(h, kh);
    let ow = geom.out_size(wd, kw);
    (
        n,
        cout,
        Layout {
            cin,
            h,
            w: wd,
            kh,
            kw,
            oh,
            ow,
            geom,
        },
    )
}

/// `y[n,o] = sum_k W[o,k] * cols[k]  (+ b[o])`.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, geom: ConvGeom) -> Tensor {
    let (n, cout, l) = layout(x, w, geom);
    let k = l.k();
    let positions = l.oh * l.ow;
    let chunk = l.chunk();
    let mut out = vec![0.0; n * cout * positions];
    let mut cols = vec![0.0; k * chunk];
    let in_stride = l.cin * l.h * l.w;
    for b in 0..n {
        let img = &x.data()[b * in_stride..(b + 1) * in_stride];
        let dst = &mut out[b * cout * positions..(b + 1) * cout * positions];
        let mut p0 = 0;
        while p0 < positions {
            let len = chunk.min(positions - p0);
            l.im2col(img, p0, len, &mut cols[..k * len]);
            gemm(
                cout,
                k,
                len,
                w.data(),
                k as isize,
                1,
                &cols[..k * len],
                len as isize,
                1,
                0.0,
                &mut dst[p0..],
                positions as isize,
                1,
            );
            p0 += len;
        }
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                for v in &mut dst[o * positions..(o + 1) * positions] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(&[n, cout, l.oh, l.ow], out)
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    geom: ConvGeom,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let (n, cout, l) = layout(x, w, geom);
    let k = l.k();
    let positions = l.oh * l.ow;
    let chunk = l.chunk();
    let in_stride = l.cin * l.h * l.w;
    let mut gx = need_input.then(|| vec![0.0; x.len()]);
    let mut gw = need_kernel.then(|| vec![0.0; w.len()]);
    let mut gb = vec![0.0; cout];
    let mut cols = vec![0.0; k * chunk];
    let gy = grad_out.data();
    for b in 0..n {
        let gyb = &gy[b * cout * positions..(b + 1) * cout * positions];
        for (o, slot) in gb.iter_mut().enumerate() {
            *slot += gyb[o * positions..(o + 1) * positions].iter().sum::<f64>();
        }
        let img = &x.data()[b * in_stride..(b + 1) * in_stride];
        let mut p0 = 0;
        while p0 < positions {
            let len = chunk.min(positions - p0);
            if let Some(gw) = gw.as_mut() {
                l.im2col(img, p0, len, &mut cols[..k * len]);
                // gW[o,k] += gY[o,p] * cols[k,p]
                gemm(
                    cout,
                    len,
                    k,
                    &gyb[p0..],
                    positions as isize,
                    1,
                    &cols[..k * len],
                    1,
                    len as isize,
                    1.0,
                    gw,
                    k as isize,
                    1,
                );
            }
            if let Some(gx) = gx.as_mut() {
                // gcols[k,p] = W[o,k]^T * gY[o,p]
                gemm(
                    k,
                    cout,
                    len,
                    w.data(),
                    1,
                    k as isize,
                    &gyb[p0..],
                    positions as isize,
                    1,
                    0.0,
                    &mut cols[..k * len],
                    len as isize,
                    1,
                );
                l.col2im(
                    &cols[..k * len],
                    p0,
                    len,
                    &mut gx[b * in_stride..(b + 1) * in_stride],
                );
            }
            p0 += len;
        }
    }
    (
        gx.map(|d| Tensor::new(x.shape(), d)),
        gw.map(|d| Tensor::new(w.shape(), d)),
        Tensor::new(&[cout], gb),
    )
}
