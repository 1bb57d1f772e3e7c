use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::param::{join, Parameterized, Slot};
use crate::error::{Error, Result};
use crate::tensor::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{lit, Element, Tensor};

/// Stride, zero padding and dilation of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub const POINTWISE: ConvGeometry = ConvGeometry {
        stride: 1,
        padding: 0,
        dilation: 1,
    };

    /// Stride 1 with `padding = dilation`, which preserves the extent of a 3×3 kernel.
    pub fn same3(dilation: usize) -> Self {
        ConvGeometry {
            stride: 1,
            padding: dilation,
            dilation,
        }
    }

    pub fn strided3(stride: usize) -> Self {
        ConvGeometry {
            stride,
            padding: 1,
            dilation: 1,
        }
    }

    /// Output length along one axis, `None` when the kernel does not fit.
    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span && self.stride > 0).then(|| (padded - span) / self.stride + 1)
    }
}

/// Index bookkeeping for one `(ky, kx)` tap: valid output range along an axis.
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    // input index = o * stride + offset must lie in [0, in_len)
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi_num = in_len as isize - 1 - offset;
    let hi = if hi_num < 0 { -1 } else { hi_num / s };
    let lo = lo.max(0) as usize;
    let hi = (hi + 1).clamp(0, out_len as isize) as usize;
    (lo, hi.max(lo))
}

struct Im2col {
    in_ch: usize,
    height: usize,
    width: usize,
    kernel: usize,
    out_h: usize,
    out_w: usize,
    geom: ConvGeometry,
}

impl Im2col {
    fn rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn offset(&self, tap: usize) -> isize {
        (tap * self.geom.dilation) as isize - self.geom.padding as isize
    }

    fn pack<E: Element>(&self, img: &[E], cols: &mut [E]) {
        let (k, hw, ohw) = (self.kernel, self.height * self.width, self.cols());
        let s = self.geom.stride;
        for c in 0..self.in_ch {
            let plane = &img[c * hw..(c + 1) * hw];
            for ky in 0..k {
                let oy_off = self.offset(ky);
                let (ylo, yhi) = valid_range(self.out_h, self.height, s, oy_off);
                for kx in 0..k {
                    let ox_off = self.offset(kx);
                    let (xlo, xhi) = valid_range(self.out_w, self.width, s, ox_off);
                    let row = &mut cols[((c * k + ky) * k + kx) * ohw..][..ohw];
                    row.fill(E::zero());
                    for oy in ylo..yhi {
                        let iy = (oy * s) as isize + oy_off;
                        let src = &plane[iy as usize * self.width..][..self.width];
                        let dst = &mut row[oy * self.out_w..][..self.out_w];
                        for ox in xlo..xhi {
                            dst[ox] = src[((ox * s) as isize + ox_off) as usize];
                        }
                    }
                }
            }
        }
    }

    fn unpack_add<E: Element>(&self, cols: &[E], img: &mut [E]) {
        let (k, hw, ohw) = (self.kernel, self.height * self.width, self.cols());
        let s = self.geom.stride;
        for c in 0..self.in_ch {
            let plane = &mut img[c * hw..(c + 1) * hw];
            for ky in 0..k {
                let oy_off = self.offset(ky);
                let (ylo, yhi) = valid_range(self.out_h, self.height, s, oy_off);
                for kx in 0..k {
                    let ox_off = self.offset(kx);
                    let (xlo, xhi) = valid_range(self.out_w, self.width, s, ox_off);
                    let row = &cols[((c * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in ylo..yhi {
                        let iy = (oy * s) as isize + oy_off;
                        let dst = &mut plane[iy as usize * self.width..][..self.width];
                        let src = &row[oy * self.out_w..][..self.out_w];
                        for ox in xlo..xhi {
                            dst[((ox * s) as isize + ox_off) as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding.
///
/// `weight` is `[out_ch, in_ch, k, k]` with odd `k`; `bias`, when given, is `[out_ch]`.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    geom: ConvGeometry,
) -> Result<Tensor<E>> {
    let s = x.shape4()?;
    let &[out_ch, in_ch, kh, kw] = weight.shape() else {
        return Err(Error::dim(format!(
            "conv2d weight must be rank 4, got {:?}",
            weight.shape()
        )));
    };
    if in_ch != s.channels {
        return Err(Error::dim(format!(
            "conv2d weight {:?} expects {in_ch} input channels, input is {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::contract(format!("conv2d kernel must be square and odd, got {kh}x{kw}")));
    }
    if geom.stride == 0 || geom.dilation == 0 {
        return Err(Error::contract("conv2d stride and dilation must be >= 1"));
    }
    if let Some(b) = bias {
        if b.shape() != [out_ch] {
            return Err(Error::dim(format!(
                "conv2d bias {:?} does not match {out_ch} output channels",
                b.shape()
            )));
        }
    }
    let (Some(out_h), Some(out_w)) = (geom.output_len(s.height, kh), geom.output_len(s.width, kw))
    else {
        return Err(Error::dim(format!(
            "conv2d kernel {kh}x{kw} with {geom:?} does not fit input {:?}",
            x.shape()
        )));
    };
    let lay = Im2col {
        in_ch,
        height: s.height,
        width: s.width,
        kernel: kh,
        out_h,
        out_w,
        geom,
    };
    let pointwise = kh == 1 && geom == ConvGeometry::POINTWISE;
    let (krows, ohw, in_len) = (lay.rows(), lay.cols(), in_ch * s.pixels());

    let mut out = vec![E::zero(); s.batch * out_ch * ohw];
    let mut cols = if pointwise { Vec::new() } else { vec![E::zero(); krows * ohw] };
    for b in 0..s.batch {
        let img = &x.data()[b * in_len..(b + 1) * in_len];
        let dst = &mut out[b * out_ch * ohw..(b + 1) * out_ch * ohw];
        if let Some(bias) = bias {
            for (row, &bv) in dst.chunks_exact_mut(ohw).zip(bias.data()) {
                row.fill(bv);
            }
        }
        if pointwise {
            gemm_nn(out_ch, krows, ohw, weight.data(), img, dst);
        } else {
            lay.pack(img, &mut cols);
            gemm_nn(out_ch, krows, ohw, weight.data(), &cols, dst);
        }
    }

    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    let (xc, wc) = (x.clone(), weight.clone());
    Ok(Tensor::from_op(
        vec![s.batch, out_ch, out_h, out_w],
        out,
        "conv2d",
        parents,
        move |g| {
            let need_x = xc.is_tracked();
            let need_w = wc.is_tracked();
            let mut gx = need_x.then(|| vec![E::zero(); s.batch * in_len]);
            let mut gw = need_w.then(|| vec![E::zero(); out_ch * krows]);
            let mut cols = vec![E::zero(); if pointwise { 0 } else { krows * ohw }];
            let mut dcols = vec![E::zero(); krows * ohw];
            for b in 0..s.batch {
                let gb = &g[b * out_ch * ohw..(b + 1) * out_ch * ohw];
                let img = &xc.data()[b * in_len..(b + 1) * in_len];
                if let Some(gw) = gw.as_mut() {
                    if pointwise {
                        gemm_nt(out_ch, ohw, krows, gb, img, gw);
                    } else {
                        lay.pack(img, &mut cols);
                        gemm_nt(out_ch, ohw, krows, gb, &cols, gw);
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    let gxb = &mut gx[b * in_len..(b + 1) * in_len];
                    if pointwise {
                        gemm_tn(krows, out_ch, ohw, wc.data(), gb, gxb);
                    } else {
                        dcols.fill(E::zero());
                        gemm_tn(krows, out_ch, ohw, wc.data(), gb, &mut dcols);
                        lay.unpack_add(&dcols, gxb);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                let mut gbias = vec![E::zero(); out_ch];
                for b in 0..s.batch {
                    for (o, acc) in gbias.iter_mut().enumerate() {
                        let row = &g[(b * out_ch + o) * ohw..][..ohw];
                        *acc += row.iter().copied().sum();
                    }
                }
                grads.push(Some(gbias));
            }
            grads
        },
    ))
}

/// Convolution layer: weight, optional bias, and fixed geometry.
pub struct Conv2d<E: Element> {
    pub weight: Slot<E>,
    pub bias: Option<Slot<E>>,
    pub geom: ConvGeometry,
}

impl<E: Element> Conv2d<E> {
    /// He-normal weights (fan-in), zero bias.
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        geom: ConvGeometry,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let n = out_ch * in_ch * kernel * kernel;
        let weight = (0..n).map(|_| lit::<E>(normal.sample(rng))).collect();
        Conv2d {
            weight: Slot::param(&[out_ch, in_ch, kernel, kernel], weight),
            bias: with_bias.then(|| Slot::param(&[out_ch], vec![E::zero(); out_ch])),
            geom,
        }
    }

    pub fn pointwise<R: Rng>(in_ch: usize, out_ch: usize, with_bias: bool, rng: &mut R) -> Self {
        Self::new(in_ch, out_ch, 1, ConvGeometry::POINTWISE, with_bias, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let bias = self.bias.as_ref().map(Slot::get);
        conv2d(x, &self.weight.get(), bias.as_ref(), self.geom)
    }
}

impl<E: Element> Parameterized<E> for Conv2d<E> {
    fn collect_slots<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Slot<E>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}
