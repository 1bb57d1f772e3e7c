use rand::Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::nn::resize_bilinear;
use crate::tensor::{no_grad, Tensor};
use crate::training::IGNORE_LABEL;

/// Intensity used for padded image pixels (normalizes to zero).
const PAD_VALUE: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    pub crop_h: usize,
    pub crop_w: usize,
}

impl AugmentConfig {
    /// Flip, scale in `[0.5, 2]`, crop back to `crop_h × crop_w`.
    pub fn standard(crop_h: usize, crop_w: usize) -> Self {
        AugmentConfig {
            flip: true,
            scale_min: 0.5,
            scale_max: 2.0,
            crop_h,
            crop_w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::contract(format!(
                "scale range [{}, {}] is empty or non-positive",
                self.scale_min, self.scale_max
            )));
        }
        if self.crop_h == 0 || self.crop_w == 0 {
            return Err(Error::contract("crop size must be positive"));
        }
        Ok(())
    }

    /// Draws the random decisions for a `h × w` sample.
    pub fn sample_params<R: Rng>(&self, h: usize, w: usize, rng: &mut R) -> AugmentParams {
        let flip = self.flip && rng.gen_bool(0.5);
        let scale = if self.scale_min == self.scale_max {
            self.scale_min
        } else {
            rng.gen_range(self.scale_min..=self.scale_max)
        };
        let (sh, sw) = scaled_size(h, w, scale);
        let top = rng.gen_range(0..=sh.max(self.crop_h) - self.crop_h);
        let left = rng.gen_range(0..=sw.max(self.crop_w) - self.crop_w);
        AugmentParams {
            flip,
            scale,
            top,
            left,
            crop_h: self.crop_h,
            crop_w: self.crop_w,
        }
    }
}

/// One concrete augmentation: optional horizontal flip, rescale, then a
/// `crop_h × crop_w` window at `(top, left)` of the rescaled sample padded at
/// the bottom and right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: f64,
    pub top: usize,
    pub left: usize,
    pub crop_h: usize,
    pub crop_w: usize,
}

impl AugmentParams {
    pub fn identity(h: usize, w: usize) -> Self {
        AugmentParams {
            flip: false,
            scale: 1.0,
            top: 0,
            left: 0,
            crop_h: h,
            crop_w: w,
        }
    }
}

fn scaled_size(h: usize, w: usize, scale: f64) -> (usize, usize) {
    let f = |n: usize| ((n as f64 * scale).round() as usize).max(1);
    (f(h), f(w))
}

/// Mirrors each row of every `h × w` plane in `data`.
pub fn hflip_planes<T: Copy>(data: &mut [T], w: usize) {
    for row in data.chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Nearest-neighbour label resize: output `(y, x)` takes input
/// `(⌊(y + 0.5)·h/out_h⌋, ⌊(x + 0.5)·w/out_w⌋)`.
pub fn resize_labels_nearest(labels: &[u8], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    let src = |d: usize, n: usize, out: usize| (((d as f64 + 0.5) * n as f64 / out as f64) as usize).min(n - 1);
    let cols: Vec<usize> = (0..out_w).map(|x| src(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let row = &labels[src(y, h, out_h) * w..][..w];
        out.extend(cols.iter().map(|&x| row[x]));
    }
    out
}

pub fn augment_with(s: &Sample, p: &AugmentParams) -> Result<Sample> {
    let (h, w) = (s.height, s.width);
    let mut image = s.image.clone();
    let mut labels = s.labels.clone();
    if p.flip {
        hflip_planes(&mut image, w);
        hflip_planes(&mut labels, w);
    }
    let (sh, sw) = scaled_size(h, w, p.scale);
    if (sh, sw) != (h, w) {
        let _guard = no_grad();
        let t = Tensor::<f32>::new(&[1, 3, h, w], image)?;
        image = resize_bilinear(&t, sh, sw)?.to_vec();
        labels = resize_labels_nearest(&labels, h, w, sh, sw);
    }
    let (ph, pw) = (sh.max(p.crop_h), sw.max(p.crop_w));
    if p.top + p.crop_h > ph || p.left + p.crop_w > pw {
        return Err(Error::contract(format!(
            "crop {}x{} at ({}, {}) leaves the {ph}x{pw} canvas",
            p.crop_h, p.crop_w, p.top, p.left
        )));
    }
    let (ch, cw) = (p.crop_h, p.crop_w);
    let mut out_img = vec![PAD_VALUE; 3 * ch * cw];
    let mut out_lab = vec![IGNORE_LABEL; ch * cw];
    for y in 0..ch {
        let sy = p.top + y;
        if sy >= sh {
            break;
        }
        for x in 0..cw {
            let sx = p.left + x;
            if sx >= sw {
                break;
            }
            out_lab[y * cw + x] = labels[sy * sw + sx];
            for c in 0..3 {
                out_img[c * ch * cw + y * cw + x] = image[c * sh * sw + sy * sw + sx];
            }
        }
    }
    Sample::new(ch, cw, out_img, out_lab)
}

/// Random flip, rescale and crop.
pub fn augment<R: Rng>(s: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Result<Sample> {
    cfg.validate()?;
    augment_with(s, &cfg.sample_params(s.height, s.width, rng))
}
