use super::param::{join, Parameterized, Slot};
use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::{lit, Element, Tensor};

/// Per-channel affine normalization with running statistics.
pub struct BatchNorm2d<E: Element> {
    pub scale: Slot<E>,
    pub shift: Slot<E>,
    pub running_mean: Slot<E>,
    pub running_var: Slot<E>,
    pub eps: f64,
    pub momentum: f64,
}

impl<E: Element> BatchNorm2d<E> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            scale: Slot::param(&[channels], vec![E::one(); channels]),
            shift: Slot::param(&[channels], vec![E::zero(); channels]),
            running_mean: Slot::buffer(&[channels], vec![E::zero(); channels]),
            running_var: Slot::buffer(&[channels], vec![E::one(); channels]),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, x: &Tensor<E>, mode: Mode) -> Result<Tensor<E>> {
        batchnorm(x, self, mode)
    }
}

impl<E: Element> Parameterized<E> for BatchNorm2d<E> {
    fn collect_slots<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Slot<E>)>) {
        out.push((join(prefix, "scale"), &self.scale));
        out.push((join(prefix, "shift"), &self.shift));
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }
}

/// Batch normalization over `(batch, height, width)` for each channel.
///
/// Training mode normalizes with the biased batch variance and folds the
/// batch mean and unbiased variance into the running statistics; eval mode
/// uses the running statistics.
pub fn batchnorm<E: Element>(x: &Tensor<E>, p: &BatchNorm2d<E>, mode: Mode) -> Result<Tensor<E>> {
    let s = x.shape4()?;
    let (scale, shift) = (p.scale.get(), p.shift.get());
    if scale.shape() != [s.channels] {
        return Err(Error::dim(format!(
            "batchnorm over {} channels applied to {:?}",
            scale.numel(),
            x.shape()
        )));
    }
    let hw = s.pixels();
    let count = s.batch * hw;
    let eps: E = lit(p.eps);
    let mut mean = vec![E::zero(); s.channels];
    let mut inv_std = vec![E::zero(); s.channels];
    match mode {
        Mode::Train => {
            let mut var = vec![E::zero(); s.channels];
            for c in 0..s.channels {
                let plane = |b: usize| &x.data()[(b * s.channels + c) * hw..][..hw];
                let mut acc = E::zero();
                for b in 0..s.batch {
                    acc += plane(b).iter().copied().sum();
                }
                let m = acc / lit(count as f64);
                let mut sq = E::zero();
                for b in 0..s.batch {
                    sq += plane(b).iter().map(|&v| (v - m) * (v - m)).sum();
                }
                mean[c] = m;
                var[c] = sq / lit(count as f64);
                inv_std[c] = E::one() / (var[c] + eps).sqrt();
            }
            let mom: E = lit(p.momentum);
            let unbias: E = if count > 1 {
                lit(count as f64 / (count - 1) as f64)
            } else {
                E::one()
            };
            let rm: Vec<E> = p
                .running_mean
                .get()
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &m)| (E::one() - mom) * r + mom * m)
                .collect();
            let rv: Vec<E> = p
                .running_var
                .get()
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &v)| (E::one() - mom) * r + mom * v * unbias)
                .collect();
            p.running_mean.set_data(rm)?;
            p.running_var.set_data(rv)?;
        }
        Mode::Eval => {
            mean.copy_from_slice(p.running_mean.get().data());
            for (inv, &v) in inv_std.iter_mut().zip(p.running_var.get().data()) {
                *inv = E::one() / (v + eps).sqrt();
            }
        }
    }

    let mut xhat = vec![E::zero(); x.numel()];
    let mut out = vec![E::zero(); x.numel()];
    for b in 0..s.batch {
        for c in 0..s.channels {
            let off = (b * s.channels + c) * hw;
            let (g, sh) = (scale.data()[c], shift.data()[c]);
            for i in off..off + hw {
                let h = (x.data()[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                out[i] = g * h + sh;
            }
        }
    }

    let scale_c = scale.clone();
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        "batchnorm",
        vec![x.clone(), scale, shift],
        move |g| {
            let mut gx = vec![E::zero(); g.len()];
            let mut gscale = vec![E::zero(); s.channels];
            let mut gshift = vec![E::zero(); s.channels];
            let n: E = lit(count as f64);
            for c in 0..s.channels {
                let idx = |b: usize| (b * s.channels + c) * hw;
                let (mut sg, mut sgx) = (E::zero(), E::zero());
                for b in 0..s.batch {
                    for i in idx(b)..idx(b) + hw {
                        sg += g[i];
                        sgx += g[i] * xhat[i];
                    }
                }
                gshift[c] = sg;
                gscale[c] = sgx;
                let gamma = scale_c.data()[c];
                let k = gamma * inv_std[c];
                for b in 0..s.batch {
                    for i in idx(b)..idx(b) + hw {
                        gx[i] = match mode {
                            Mode::Train => k * (g[i] - sg / n - xhat[i] * sgx / n),
                            Mode::Eval => k * g[i],
                        };
                    }
                }
            }
            vec![Some(gx), Some(gscale), Some(gshift)]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..2 * 3 * 4 * 4).map(|_| rng.gen_range(-3.0..5.0)).collect();
        Tensor::new(&[2, 3, 4, 4], data).unwrap()
    }

    /// Two-pass mean and biased variance of one channel.
    fn two_pass(x: &Tensor<f64>, c: usize) -> (f64, f64) {
        let s = x.shape4().unwrap();
        let vals: Vec<f64> = (0..s.batch)
            .flat_map(|b| {
                let off = (b * s.channels + c) * s.pixels();
                x.data()[off..off + s.pixels()].to_vec()
            })
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn training_output_is_standardized() {
        let bn = BatchNorm2d::<f64>::new(3);
        let y = bn.forward(&batch(1), Mode::Train).unwrap();
        for c in 0..3 {
            let (m, v) = two_pass(&y, c);
            assert!(m.abs() < 1e-4, "{m}");
            assert!((v - 1.0).abs() < 1e-4, "{v}");
        }
    }

    #[test]
    fn training_matches_two_pass_oracle() {
        let x = batch(7);
        let bn = BatchNorm2d::<f64>::new(3);
        bn.scale.set_data(vec![0.5, 2.0, -1.0]).unwrap();
        bn.shift.set_data(vec![0.1, 0.0, 3.0]).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let s = x.shape4().unwrap();
        for c in 0..3 {
            let (m, v) = two_pass(&x, c);
            let (g, sh) = (bn.scale.get().data()[c], bn.shift.get().data()[c]);
            for b in 0..s.batch {
                for i in 0..s.pixels() {
                    let idx = (b * s.channels + c) * s.pixels() + i;
                    let want = g * (x.data()[idx] - m) / (v + 1e-5).sqrt() + sh;
                    assert!((y.data()[idx] - want).abs() < 1e-5);
                }
            }
            let n = (s.batch * s.pixels()) as f64;
            let rm = bn.running_mean.get().data()[c];
            let rv = bn.running_var.get().data()[c];
            assert!((rm - 0.1 * m).abs() < 1e-12);
            assert!((rv - (0.9 + 0.1 * v * n / (n - 1.0))).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_with_identity_stats_is_near_identity() {
        let x = batch(3);
        let bn = BatchNorm2d::<f64>::new(3);
        let y = bn.forward(&x, Mode::Eval).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
        assert_eq!(bn.running_mean.get().data(), &[0.0; 3]);
    }

    #[test]
    fn running_var_stays_non_negative() {
        let bn = BatchNorm2d::<f64>::new(3);
        for seed in 0..5 {
            bn.forward(&batch(seed), Mode::Train).unwrap();
        }
        assert!(bn.running_var.get().data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let bn = BatchNorm2d::<f64>::new(2);
        assert!(bn.forward(&batch(0), Mode::Eval).is_err());
    }
}
