use crate::error::{Error, Result};
use crate::tensor::{lit, Element, Tensor};

/// Source taps for one output coordinate under the half-pixel
/// (align-corners = false) convention.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w_hi: f64,
}

fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Tap {
                lo,
                hi,
                w_hi: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of every `(batch, channel)` plane to `out_h × out_w`.
pub fn resize_bilinear<E: Element>(x: &Tensor<E>, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
    let s = x.shape4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::contract(format!("resize to empty {out_h}x{out_w}")));
    }
    if (out_h, out_w) == (s.height, s.width) {
        return Ok(x.clone());
    }
    let ty = taps(s.height, out_h);
    let tx = taps(s.width, out_w);
    let planes = s.batch * s.channels;
    let (in_hw, out_hw) = (s.pixels(), out_h * out_w);
    let mut out = vec![E::zero(); planes * out_hw];
    for p in 0..planes {
        let src = &x.data()[p * in_hw..(p + 1) * in_hw];
        let dst = &mut out[p * out_hw..(p + 1) * out_hw];
        for (oy, t) in ty.iter().enumerate() {
            // lerp form: equal endpoints reproduce the endpoint exactly
            let wy: E = lit(t.w_hi);
            let r0 = &src[t.lo * s.width..][..s.width];
            let r1 = &src[t.hi * s.width..][..s.width];
            for (ox, u) in tx.iter().enumerate() {
                let wx: E = lit(u.w_hi);
                let top = r0[u.lo] + wx * (r0[u.hi] - r0[u.lo]);
                let bot = r1[u.lo] + wx * (r1[u.hi] - r1[u.lo]);
                dst[oy * out_w + ox] = top + wy * (bot - top);
            }
        }
    }
    Ok(Tensor::from_op(
        vec![s.batch, s.channels, out_h, out_w],
        out,
        "resize_bilinear",
        vec![x.clone()],
        move |g| {
            let mut gx = vec![E::zero(); planes * in_hw];
            for p in 0..planes {
                let src = &g[p * out_hw..(p + 1) * out_hw];
                let dst = &mut gx[p * in_hw..(p + 1) * in_hw];
                for (oy, t) in ty.iter().enumerate() {
                    let (wy1, wy0): (E, E) = (lit(t.w_hi), lit(1.0 - t.w_hi));
                    for (ox, u) in tx.iter().enumerate() {
                        let (wx1, wx0): (E, E) = (lit(u.w_hi), lit(1.0 - u.w_hi));
                        let v = src[oy * out_w + ox];
                        dst[t.lo * s.width + u.lo] += wy0 * wx0 * v;
                        dst[t.lo * s.width + u.hi] += wy0 * wx1 * v;
                        dst[t.hi * s.width + u.lo] += wy1 * wx0 * v;
                        dst[t.hi * s.width + u.hi] += wy1 * wx1 * v;
                    }
                }
            }
            vec![Some(gx)]
        },
    ))
}

/// Integer-factor bilinear upsampling (align-corners = false).
pub fn bilinear_upsample<E: Element>(x: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
    if factor < 1 {
        return Err(Error::contract("upsampling factor must be >= 1"));
    }
    let s = x.shape4()?;
    resize_bilinear(x, s.height * factor, s.width * factor)
}
