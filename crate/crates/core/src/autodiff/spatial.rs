//! NHWC convolution, max-pooling and local response normalization kernels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`, zero padding split as evenly as
    /// possible with the extra row/column at the bottom/right.
    Same,
    /// No padding; the kernel must fit inside the input.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub f: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], filters: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let [n, h, w, c] = *input else {
            return Err(Error::shape("conv2d", format!("input must be N×H×W×C, got {input:?}")));
        };
        let [kh, kw, fc, f] = *filters else {
            return Err(Error::shape(
                "conv2d",
                format!("filters must be kh×kw×C×F, got {filters:?}"),
            ));
        };
        if fc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but filters expect {fc} ({input:?} vs {filters:?})"),
            ));
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::shape("conv2d", "stride and kernel extents must be positive"));
        }
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::shape(
                        "conv2d",
                        format!("{kh}×{kw} kernel does not fit {h}×{w} input without padding"),
                    ));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, pad_h / 2, pad_w / 2)
            }
        };
        Ok(ConvGeom {
            n,
            h,
            w,
            c,
            kh,
            kw,
            f,
            stride,
            pad_top,
            pad_left,
            oh,
            ow,
        })
    }

    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.c
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.oh, self.ow, self.f]
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if inside.
    fn source(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(pad).filter(|&i| i < extent)
    }
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = (n * g.oh + oy) * g.ow + ox;
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.w) else { continue };
                        let src = ((n * g.h + iy) * g.w + ix) * g.c;
                        let off = (ky * g.kw + kx) * g.c;
                        dst[off..off + g.c].copy_from_slice(&input[src..src + g.c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut out = vec![0.0; g.n * g.h * g.w * g.c];
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let row = (n * g.oh + oy) * g.ow + ox;
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.w) else { continue };
                        let dst = ((n * g.h + iy) * g.w + ix) * g.c;
                        let off = (ky * g.kw + kx) * g.c;
                        for ch in 0..g.c {
                            out[dst + ch] += src[off + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_forward(input: &Tensor, filters: &Tensor, g: &ConvGeom) -> Tensor {
    let cols = im2col(input.data(), g);
    let mut out = vec![0.0; g.rows() * g.f];
    gemm(g.rows(), g.patch(), g.f, &cols, false, filters.data(), false, &mut out, 0.0);
    Tensor::new(g.output_shape(), out).expect("conv output shape")
}

/// Returns `(d_input, d_filters)`; `d_input` only when requested.
pub(crate) fn conv2d_backward(
    grad: &Tensor,
    input: &Tensor,
    filters: &Tensor,
    g: &ConvGeom,
    want_input: bool,
    want_filters: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let d_filters = want_filters.then(|| {
        let cols = im2col(input.data(), g);
        let mut df = vec![0.0; g.patch() * g.f];
        gemm(g.patch(), g.rows(), g.f, &cols, true, grad.data(), false, &mut df, 0.0);
        Tensor::new(filters.shape().to_vec(), df).expect("filter grad shape")
    });
    let d_input = want_input.then(|| {
        let mut dcols = vec![0.0; g.rows() * g.patch()];
        gemm(g.rows(), g.f, g.patch(), grad.data(), false, filters.data(), true, &mut dcols, 0.0);
        Tensor::new(input.shape().to_vec(), col2im(&dcols, g)).expect("input grad shape")
    });
    (d_input, d_filters)
}

/// Valid-padding max-pool. Returns the output and, per output element, the
/// linear input index it was taken from (first maximum in row-major window
/// order).
pub(crate) fn maxpool_forward(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let &[n, h, w, c] = input.shape() else {
        return Err(Error::shape(
            "maxpool2d",
            format!("input must be N×H×W×C, got {:?}", input.shape()),
        ));
    };
    if window == 0 || stride == 0 {
        return Err(Error::shape("maxpool2d", "window and stride must be at least 1"));
    }
    if window > h || window > w {
        return Err(Error::shape(
            "maxpool2d",
            format!("window {window} larger than {h}×{w} input"),
        ));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    let mut best_val = f64::NEG_INFINITY;
                    for ky in 0..window {
                        for kx in 0..window {
                            let idx = ((b * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
                            if best == usize::MAX || x[idx] > best_val {
                                best = idx;
                                best_val = x[idx];
                            }
                        }
                    }
                    out.push(best_val);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((Tensor::new([n, oh, ow, c], out)?, argmax))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrnParams {
    pub radius: usize,
    pub bias: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        LrnParams {
            radius: 4,
            bias: 1.0,
            alpha: 0.001 / 9.0,
            beta: 0.75,
        }
    }
}

/// Cross-channel LRN over the last axis. Returns the output and the per-element
/// denominator base `bias + alpha * Σ x²` needed by the backward pass.
pub(crate) fn lrn_forward(input: &Tensor, p: &LrnParams) -> Result<(Tensor, Vec<f64>)> {
    let c = *input
        .shape()
        .last()
        .ok_or_else(|| Error::shape("lrn", "scalar input has no channel axis"))?;
    if c == 0 {
        return Err(Error::shape("lrn", "channel count must be at least 1"));
    }
    let x = input.data();
    let mut base = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for (pos, chunk) in x.chunks(c).enumerate() {
        for ch in 0..c {
            let lo = ch.saturating_sub(p.radius);
            let hi = (ch + p.radius).min(c - 1);
            let sq: f64 = chunk[lo..=hi].iter().map(|v| v * v).sum();
            let s = p.bias + p.alpha * sq;
            base[pos * c + ch] = s;
            out[pos * c + ch] = chunk[ch] * s.powf(-p.beta);
        }
    }
    Ok((Tensor::new(input.shape().to_vec(), out)?, base))
}

pub(crate) fn lrn_backward(grad: &Tensor, input: &Tensor, base: &[f64], p: &LrnParams) -> Tensor {
    let c = *input.shape().last().expect("lrn rank");
    let x = input.data();
    let gd = grad.data();
    let mut dx = vec![0.0; x.len()];
    // t_c = g_c x_c S_c^(-β-1), reused by every j in the window of c.
    let t: Vec<f64> = (0..x.len())
        .map(|i| gd[i] * x[i] * base[i].powf(-p.beta - 1.0))
        .collect();
    for pos in 0..x.len() / c {
        let o = pos * c;
        for j in 0..c {
            let lo = j.saturating_sub(p.radius);
            let hi = (j + p.radius).min(c - 1);
            let cross: f64 = t[o + lo..=o + hi].iter().sum();
            dx[o + j] = gd[o + j] * base[o + j].powf(-p.beta)
                - 2.0 * p.alpha * p.beta * x[o + j] * cross;
        }
    }
    Tensor::new(input.shape().to_vec(), dx).expect("lrn grad shape")
}
