//! Synthetic segmentation data: generation, augmentation, batching and the
//! PPM/PGM exchange format.

mod augment;
mod io;
mod synth;

pub use augment::{augment, augment_with, hflip_planes, resize_labels_nearest, AugmentConfig, AugmentParams};
pub use io::{load_manifest, read_pgm, read_ppm, save_dataset, write_pgm, write_ppm, MANIFEST};
pub use synth::{generate_shapes, Geometry, PlacedShape, ShapeKind, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::{lit, Element, Tensor};

/// An RGB image with a per-pixel class label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// Planar `[3, H, W]` intensities in `[0, 1]`.
    pub image: Vec<f32>,
    /// Row-major class indices; [`crate::training::IGNORE_LABEL`] marks unlabelled pixels.
    pub labels: Vec<u8>,
    /// Generating shapes, when the sample came from the generator.
    pub shapes: Vec<PlacedShape>,
}

impl Sample {
    pub fn new(height: usize, width: usize, image: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        let hw = height * width;
        if hw == 0 || image.len() != 3 * hw || labels.len() != hw {
            return Err(Error::dim(format!(
                "{height}x{width} sample needs {} image values and {hw} labels, got {} and {}",
                3 * hw,
                image.len(),
                labels.len()
            )));
        }
        Ok(Sample {
            height,
            width,
            image,
            labels,
            shapes: Vec::new(),
        })
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Network input value for an intensity in `[0, 1]`.
pub fn normalize(v: f32) -> f64 {
    v as f64 - 0.5
}

/// Stacks samples of equal size into a `[B, 3, H, W]` input and a flat label map.
pub fn batch_tensor<E: Element>(samples: &[&Sample]) -> Result<(Tensor<E>, Vec<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::contract("cannot batch zero samples"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::dim(format!(
                "batch mixes {}x{} with {h}x{w}",
                s.height, s.width
            )));
        }
        data.extend(s.image.iter().map(|&v| lit::<E>(normalize(v))));
        labels.extend_from_slice(&s.labels);
    }
    Ok((Tensor::new(&[samples.len(), 3, h, w], data)?, labels))
}

/// A list of samples with a fixed number of classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Labelled pixels per class; ignored and out-of-range labels are skipped.
    pub fn class_pixel_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for s in &self.samples {
            for &l in &s.labels {
                if let Some(c) = counts.get_mut(l as usize) {
                    *c += 1;
                }
            }
        }
        counts
    }
}
