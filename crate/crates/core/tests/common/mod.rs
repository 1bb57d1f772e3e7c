#![allow(dead_code)]

use ocnet_core::nn::ConvGeometry;
use ocnet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn uniform_f32(shape: &[usize], rng: &mut impl Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Six nested loops over output pixel, output channel, input channel and taps.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&[f64]>, g: ConvGeometry) -> Vec<f64> {
    let [b, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let span = g.dilation * (k - 1) + 1;
    let oh = (h + 2 * g.padding - span) / g.stride + 1;
    let ow = (wd + 2 * g.padding - span) / g.stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for n in 0..b {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |bs| bs[oc]);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                let ix = (xx * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((n * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((n * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

/// `feat[b][p][c]` from a `[B, C, H, W]` map.
pub fn pixels(x: &Tensor<f64>) -> Vec<Vec<Vec<f64>>> {
    let s = x.shape();
    let (c, n) = (s[1], s[2] * s[3]);
    (0..s[0])
        .map(|b| (0..n).map(|p| (0..c).map(|ch| x.data()[(b * c + ch) * n + p]).collect()).collect())
        .collect()
}

/// `M v` for a `[out, in, 1, 1]` weight.
pub fn apply_1x1(w: &Tensor<f64>, v: &[f64]) -> Vec<f64> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    (0..o).map(|r| (0..i).map(|c| w.data()[r * i + c] * v[c]).sum()).collect()
}

/// `w_pi = exp(q_p·k_i) / Σ_j exp(q_p·k_j)` by a double loop without max subtraction.
pub fn brute_weights(q: &[Vec<f64>], k: &[Vec<f64>]) -> Vec<Vec<f64>> {
    q.iter()
        .map(|qp| {
            let e: Vec<f64> = k.iter().map(|ki| qp.iter().zip(ki).map(|(a, b)| a * b).sum::<f64>().exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}

/// `c_p = Σ_i w_pi φ_i`.
pub fn brute_aggregate(w: &[Vec<f64>], phi: &[Vec<f64>]) -> Vec<Vec<f64>> {
    w.iter()
        .map(|row| {
            (0..phi[0].len())
                .map(|c| row.iter().zip(phi).map(|(wi, f)| wi * f[c]).sum())
                .collect()
        })
        .collect()
}
