//! Convolutional building blocks.

mod batchnorm;
mod conv;
mod param;
mod resize;

use rand::Rng;

pub use batchnorm::{batchnorm, BatchNorm2d};
pub use conv::{conv2d, Conv2d, ConvGeometry};
pub use param::{Parameterized, Slot, SlotKind};
pub(crate) use param::join;
pub use resize::{bilinear_upsample, resize_bilinear};

use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// Whether batch normalization uses batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel spatial mean, producing a `[B, C, 1, 1]` map.
pub fn global_avg_pool<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let s = x.shape4()?;
    let hw = s.pixels();
    let inv = E::one() / E::from_usize(hw).unwrap_or_else(E::one);
    let data = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().copied().sum::<E>() * inv)
        .collect();
    Ok(Tensor::from_op(
        vec![s.batch, s.channels, 1, 1],
        data,
        "global_avg_pool",
        vec![x.clone()],
        move |g| {
            let mut gx = Vec::with_capacity(g.len() * hw);
            for &v in g {
                gx.extend(std::iter::repeat(v * inv).take(hw));
            }
            vec![Some(gx)]
        },
    ))
}

/// Bias-free convolution followed by batch normalization and ReLU.
pub struct ConvBnRelu<E: Element> {
    pub conv: Conv2d<E>,
    pub bn: BatchNorm2d<E>,
}

impl<E: Element> ConvBnRelu<E> {
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        geom: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(in_ch, out_ch, kernel, geom, false, rng),
            bn: BatchNorm2d::new(out_ch),
        }
    }

    pub fn pointwise<R: Rng>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self::new(in_ch, out_ch, 1, ConvGeometry::POINTWISE, rng)
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward(&self, x: &Tensor<E>, mode: Mode) -> Result<Tensor<E>> {
        Ok(self.bn.forward(&self.conv.forward(x)?, mode)?.relu())
    }
}

impl<E: Element> Parameterized<E> for ConvBnRelu<E> {
    fn collect_slots<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Slot<E>)>) {
        self.conv.collect_slots(&join(prefix, "conv"), out);
        self.bn.collect_slots(&join(prefix, "bn"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_constant_map() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 5], 1.25);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 1, 1]);
        assert!(y.data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn pool_single_pixel_identity() {
        let x = Tensor::<f64>::new(&[1, 3, 1, 1], vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), x.data());
    }

    #[test]
    fn pool_arithmetic_mean() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[1.5]);
    }
}
