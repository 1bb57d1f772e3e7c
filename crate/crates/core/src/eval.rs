//! Confusion matrices, IoU metrics and multi-scale + flip inference.

use crate::data::{batch_tensor, hflip_planes, Dataset};
use crate::error::{Error, Result};
use crate::model::{SegModel, OUTPUT_STRIDE};
use crate::nn::{resize_bilinear, Mode};
use crate::tensor::ops::softmax_in_place;
use crate::tensor::{no_grad, Tensor};

/// Pixel counts indexed by (ground truth, prediction).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::dim(format!(
                "{} counts for a {num_classes}x{num_classes} matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { num_classes, counts })
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image; pixels labelled `ignore` are skipped.
    pub fn add(&mut self, truth: &[u8], pred: &[u8], ignore: u8) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::dim(format!(
                "{} labels against {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let k = self.num_classes;
        for (&t, &p) in truth.iter().zip(pred) {
            if t == ignore {
                continue;
            }
            if t as usize >= k || p as usize >= k {
                return Err(Error::Data(format!("class pair ({t}, {p}) outside {k} classes")));
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::dim(format!(
                "cannot merge {} classes into {}",
                other.num_classes, self.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    /// IoU per class; `None` for classes absent from both truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub mean_iou: f64,
    /// Fraction of scored pixels predicted correctly.
    pub pixel_accuracy: f64,
}

/// `IoU_k = tp / (tp + fp + fn)`, averaged over classes that occur.
pub fn miou(cm: &ConfusionMatrix) -> Result<MiouReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::contract("mIoU of an empty confusion matrix"));
    }
    let k = cm.num_classes;
    let mut trace = 0u64;
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            trace += tp;
            let row: u64 = (0..k).map(|p| cm.get(c, p)).sum();
            let col: u64 = (0..k).map(|t| cm.get(t, c)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(MiouReport {
        mean_iou: present.iter().sum::<f64>() / present.len() as f64,
        pixel_accuracy: trace as f64 / total as f64,
        per_class,
    })
}

/// Something that maps a `[B, 3, H, W]` image to `[B, K, H, W]` logits.
pub trait Segmenter {
    fn num_classes(&self) -> usize;
    fn logits(&self, image: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Segmenter for SegModel<f32> {
    fn num_classes(&self) -> usize {
        SegModel::num_classes(self)
    }

    fn logits(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let _guard = no_grad();
        Ok(self.forward(image, Mode::Eval)?.logits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferConfig {
    pub scales: Vec<f64>,
    pub flip: bool,
}

impl InferConfig {
    pub fn single_scale() -> Self {
        InferConfig {
            scales: vec![1.0],
            flip: false,
        }
    }

    pub fn ms_flip() -> Self {
        InferConfig {
            scales: vec![0.75, 1.0, 1.25],
            flip: true,
        }
    }
}

/// `round(len·scale)` moved to the nearest positive multiple of the output stride.
pub fn scaled_extent(len: usize, scale: f64) -> usize {
    let units = (len as f64 * scale / OUTPUT_STRIDE as f64).round() as usize;
    units.max(1) * OUTPUT_STRIDE
}

fn hflip(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let w = t.shape4()?.width;
    let mut data = t.to_vec();
    hflip_planes(&mut data, w);
    Tensor::new(t.shape(), data)
}

/// Class softmax at every pixel of a `[B, K, H, W]` map.
pub fn softmax_classes(logits: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = logits.shape4()?;
    let (k, hw) = (s.channels, s.pixels());
    let mut out = logits.to_vec();
    let mut row = vec![0f32; k];
    for b in 0..s.batch {
        let plane = &mut out[b * k * hw..][..k * hw];
        for p in 0..hw {
            for c in 0..k {
                row[c] = plane[c * hw + p];
            }
            softmax_in_place(&mut row);
            for c in 0..k {
                plane[c * hw + p] = row[c];
            }
        }
    }
    Tensor::new(logits.shape(), out)
}

/// Average of the class-probability maps over every scale (and its mirror
/// when `flip` is set), all brought back to the input size.
///
/// Scaled sizes are rounded to the nearest multiple of the output stride.
pub fn ms_flip_infer<S: Segmenter>(model: &S, image: &Tensor<f32>, cfg: &InferConfig) -> Result<Tensor<f32>> {
    if cfg.scales.is_empty() || cfg.scales.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::contract(format!("invalid inference scales {:?}", cfg.scales)));
    }
    let s = image.shape4()?;
    let _guard = no_grad();
    let mut acc = vec![0f32; s.batch * model.num_classes() * s.pixels()];
    let mut views = 0;
    for &scale in &cfg.scales {
        let (h, w) = (scaled_extent(s.height, scale), scaled_extent(s.width, scale));
        let scaled = resize_bilinear(image, h, w)?;
        for mirrored in [false, true] {
            if mirrored && !cfg.flip {
                continue;
            }
            let input = if mirrored { hflip(&scaled)? } else { scaled.clone() };
            let mut logits = model.logits(&input)?;
            if mirrored {
                logits = hflip(&logits)?;
            }
            let probs = softmax_classes(&resize_bilinear(&logits, s.height, s.width)?)?;
            if probs.numel() != acc.len() {
                return Err(Error::dim(format!(
                    "segmenter returned {:?} for {} classes",
                    probs.shape(),
                    model.num_classes()
                )));
            }
            for (a, &p) in acc.iter_mut().zip(probs.data()) {
                *a += p;
            }
            views += 1;
        }
    }
    let inv = 1.0 / views as f32;
    if views > 1 {
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    Tensor::new(&[s.batch, model.num_classes(), s.height, s.width], acc)
}

/// Most probable class per pixel (lowest index on ties), in `(batch, y, x)` order.
pub fn argmax_classes(probs: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = probs.shape4()?;
    let (k, hw) = (s.channels, s.pixels());
    let mut out = Vec::with_capacity(s.batch * hw);
    for b in 0..s.batch {
        let plane = &probs.data()[b * k * hw..][..k * hw];
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if plane[c * hw + p] > plane[best * hw + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// Confusion matrix of `model` over `data`, one image at a time.
pub fn evaluate<S: Segmenter>(model: &S, data: &Dataset, cfg: &InferConfig, ignore: u8) -> Result<ConfusionMatrix> {
    if data.num_classes != model.num_classes() {
        return Err(Error::contract(format!(
            "dataset has {} classes, model predicts {}",
            data.num_classes,
            model.num_classes()
        )));
    }
    let mut cm = ConfusionMatrix::new(data.num_classes);
    for s in &data.samples {
        let (input, labels) = batch_tensor::<f32>(&[s])?;
        let pred = argmax_classes(&ms_flip_infer(model, &input, cfg)?)?;
        cm.add(&labels, &pred, ignore)?;
    }
    Ok(cm)
}
