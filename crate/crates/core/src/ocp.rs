//! Object context pooling.
//!
//! Every pixel `p` gets a distribution `w_p` over all `N = H·W` pixels of its
//! map, the softmax of `f_q(x_p)·f_k(x_i)` over `i`, and is re-described as the
//! `w_p`-weighted sum of the value transform `φ(x_i)`. The full `N×N` map is
//! materialized so it can be inspected and rendered.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, Parameterized, Slot};
use crate::tensor::{Element, Tensor};

/// Query, key and value transforms, each a bias-free 1×1 convolution.
pub struct OcpParams<E: Element> {
    pub query: Conv2d<E>,
    /// `None` reuses the query transform as the key transform.
    pub key: Option<Conv2d<E>>,
    pub value: Conv2d<E>,
    /// Divide similarities by `sqrt(key_ch)`. Off by default.
    pub scaled: bool,
}

impl<E: Element> OcpParams<E> {
    pub fn new<R: Rng>(in_ch: usize, key_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        OcpParams {
            query: Conv2d::pointwise(in_ch, key_ch, false, rng),
            key: Some(Conv2d::pointwise(in_ch, key_ch, false, rng)),
            value: Conv2d::pointwise(in_ch, out_ch, false, rng),
            scaled: false,
        }
    }

    /// Same as [`OcpParams::new`] but with one transform serving as query and key.
    pub fn shared<R: Rng>(in_ch: usize, key_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        OcpParams {
            key: None,
            ..Self::new(in_ch, key_ch, out_ch, rng)
        }
    }

    pub fn in_channels(&self) -> usize {
        self.query.in_channels()
    }

    pub fn key_channels(&self) -> usize {
        self.query.out_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.value.out_channels()
    }
}

impl<E: Element> Parameterized<E> for OcpParams<E> {
    fn collect_slots<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Slot<E>)>) {
        self.query.collect_slots(&join(prefix, "query"), out);
        if let Some(key) = &self.key {
            key.collect_slots(&join(prefix, "key"), out);
        }
        self.value.collect_slots(&join(prefix, "value"), out);
    }
}

/// Row-stochastic `[B, N, N]` similarity map; row `p` is `w_p`.
#[derive(Debug, Clone)]
pub struct ObjectContextMap<E: Element> {
    pub weights: Tensor<E>,
    pub height: usize,
    pub width: usize,
}

impl<E: Element> ObjectContextMap<E> {
    pub fn batch(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// `w_p` for pixel `(y, x)` of image `b`, in row-major pixel order.
    pub fn row(&self, b: usize, y: usize, x: usize) -> &[E] {
        let n = self.pixels();
        let p = y * self.width + x;
        &self.weights.data()[(b * n + p) * n..][..n]
    }
}

fn check_channels<E: Element>(x: &Tensor<E>, p: &OcpParams<E>) -> Result<()> {
    let s = x.shape4()?;
    if s.channels != p.in_channels() {
        return Err(Error::Dimension(format!(
            "object context transforms expect {} channels, input is {:?}",
            p.in_channels(),
            x.shape()
        )));
    }
    Ok(())
}

/// Softmax-normalized query/key similarities between every pair of pixels.
pub fn object_context_estimate<E: Element>(
    x: &Tensor<E>,
    p: &OcpParams<E>,
) -> Result<ObjectContextMap<E>> {
    check_channels(x, p)?;
    let s = x.shape4()?;
    let (n, kc) = (s.pixels(), p.key_channels());
    let q = p.query.forward(x)?.reshape(&[s.batch, kc, n])?;
    let k = match &p.key {
        Some(key) => key.forward(x)?.reshape(&[s.batch, kc, n])?,
        None => q.clone(),
    };
    let mut sim = q.bmm(&k, true, false)?;
    if p.scaled {
        sim = sim.scale(1.0 / (kc as f64).sqrt());
    }
    Ok(ObjectContextMap {
        weights: sim.softmax_rows()?,
        height: s.height,
        width: s.width,
    })
}

/// `c_p = Σ_i w_pi φ(x_i)` for every pixel.
pub fn object_context_aggregate<E: Element>(
    x: &Tensor<E>,
    w: &ObjectContextMap<E>,
    p: &OcpParams<E>,
) -> Result<Tensor<E>> {
    check_channels(x, p)?;
    let s = x.shape4()?;
    let n = s.pixels();
    if w.weights.shape() != [s.batch, n, n] || (w.height, w.width) != (s.height, s.width) {
        return Err(Error::Dimension(format!(
            "context map {:?} over {}x{} does not fit input {:?}",
            w.weights.shape(),
            w.height,
            w.width,
            x.shape()
        )));
    }
    let oc = p.out_channels();
    let v = p.value.forward(x)?.reshape(&[s.batch, oc, n])?;
    v.bmm(&w.weights, false, true)?
        .reshape(&[s.batch, oc, s.height, s.width])
}

/// Estimation followed by aggregation.
pub fn ocp_forward<E: Element>(x: &Tensor<E>, p: &OcpParams<E>) -> Result<Tensor<E>> {
    Ok(ocp_forward_with_map(x, p)?.0)
}

/// Like [`ocp_forward`], also returning the context map.
pub fn ocp_forward_with_map<E: Element>(
    x: &Tensor<E>,
    p: &OcpParams<E>,
) -> Result<(Tensor<E>, ObjectContextMap<E>)> {
    let w = object_context_estimate(x, p)?;
    let out = object_context_aggregate(x, &w, p)?;
    Ok((out, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::conv2d;
    use crate::nn::ConvGeometry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(in_ch: usize, kc: usize, oc: usize, seed: u64) -> OcpParams<f64> {
        OcpParams::new(in_ch, kc, oc, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn random_map(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn constant_input_gives_uniform_rows() {
        let p = params(3, 2, 4, 1);
        let x = Tensor::<f64>::full(&[1, 3, 3, 4], 0.8);
        let w = object_context_estimate(&x, &p).unwrap();
        for v in w.weights.data() {
            assert!((v - 1.0 / 12.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pixel_map_is_one() {
        let p = params(3, 2, 4, 2);
        let x = random_map(&[2, 3, 1, 1], 5);
        let w = object_context_estimate(&x, &p).unwrap();
        assert_eq!(w.weights.data(), &[1.0, 1.0]);
        let out = ocp_forward(&x, &p).unwrap();
        let phi = conv2d(&x, &p.value.weight.get(), None, ConvGeometry::POINTWISE).unwrap();
        assert_eq!(out.data(), phi.data());
    }

    #[test]
    fn constant_input_output_is_phi_of_a_pixel() {
        let p = params(2, 2, 3, 3);
        let x = Tensor::<f64>::full(&[1, 2, 2, 3], -0.4);
        let out = ocp_forward(&x, &p).unwrap();
        let phi = p.value.forward(&x).unwrap();
        for (a, b) in out.data().iter().zip(phi.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_rows_select_phi() {
        let p = params(3, 2, 2, 4);
        let x = random_map(&[1, 3, 2, 2], 9);
        // every pixel attends to pixel 3
        let mut data = vec![0.0; 16];
        for r in 0..4 {
            data[r * 4 + 3] = 1.0;
        }
        let w = ObjectContextMap {
            weights: Tensor::new(&[1, 4, 4], data).unwrap(),
            height: 2,
            width: 2,
        };
        let c = object_context_aggregate(&x, &w, &p).unwrap();
        let phi = p.value.forward(&x).unwrap();
        for ch in 0..2 {
            for px in 0..4 {
                assert_eq!(c.data()[ch * 4 + px], phi.data()[ch * 4 + 3]);
            }
        }
    }

    #[test]
    fn uniform_rows_average_phi() {
        let p = params(3, 2, 2, 6);
        let x = random_map(&[1, 3, 2, 3], 10);
        let w = ObjectContextMap {
            weights: Tensor::full(&[1, 6, 6], 1.0 / 6.0),
            height: 2,
            width: 3,
        };
        let c = object_context_aggregate(&x, &w, &p).unwrap();
        let phi = p.value.forward(&x).unwrap();
        for ch in 0..2 {
            let mean = phi.data()[ch * 6..(ch + 1) * 6].iter().sum::<f64>() / 6.0;
            for px in 0..6 {
                assert!((c.data()[ch * 6 + px] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_map_rejected() {
        let p = params(3, 2, 2, 6);
        let x = random_map(&[1, 3, 2, 3], 10);
        let w = ObjectContextMap {
            weights: Tensor::full(&[1, 4, 4], 0.25),
            height: 2,
            width: 2,
        };
        assert!(matches!(
            object_context_aggregate(&x, &w, &p),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn scaled_similarity_divides_by_root_key_dim() {
        let mut p = params(3, 4, 2, 7);
        let x = random_map(&[1, 3, 2, 2], 1);
        let plain = object_context_estimate(&x, &p).unwrap();
        p.scaled = true;
        let scaled = object_context_estimate(&x, &p).unwrap();
        assert_ne!(plain.weights.data(), scaled.weights.data());
        for r in scaled.weights.data().chunks(4) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_transform_is_symmetric_before_softmax() {
        let p = OcpParams::<f64>::shared(3, 2, 2, &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(p.slots().len(), 2);
        let x = random_map(&[1, 3, 2, 3], 4);
        let q = p.query.forward(&x).unwrap().reshape(&[1, 2, 6]).unwrap();
        let w = object_context_estimate(&x, &p).unwrap();
        let sim = q.bmm(&q, true, false).unwrap();
        for r in 0..6 {
            let row = &sim.data()[r * 6..][..6];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for c in 0..6 {
                assert!((w.weights.data()[r * 6 + c] - row[c].exp() / z).abs() < 1e-12);
                assert_eq!(sim.data()[r * 6 + c], sim.data()[c * 6 + r]);
            }
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let p = params(3, 2, 2, 1);
        let x = random_map(&[1, 4, 2, 2], 1);
        assert!(matches!(ocp_forward(&x, &p), Err(Error::Dimension(_))));
    }
}
