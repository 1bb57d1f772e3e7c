//! Object context map heatmaps for query pixels.

use std::path::{Path, PathBuf};

use ocnet_core::data::{batch_tensor, read_ppm, write_pgm, write_ppm, Sample};
use ocnet_core::model::{SegModel, OUTPUT_STRIDE};
use ocnet_core::nn::{bilinear_upsample, Mode};
use ocnet_core::tensor::{no_grad, Tensor};

use crate::commands::load_model;
use crate::{CliError, Result, RunConfig};

/// One query pixel's row of the object context map.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Query in image pixels, `(y, x)`.
    pub query: (usize, usize),
    /// Feature cell holding the query.
    pub cell: (usize, usize),
    /// The raw row at feature resolution, row-major.
    pub weights: Vec<f32>,
    /// Min-max normalized row, upsampled to image size.
    pub pixels: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

/// Maps values onto `[0, 255]` by their own minimum and maximum; a constant
/// input maps to all zeros.
pub fn min_max_normalize(row: &[f32]) -> Vec<f32> {
    let lo = row.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return vec![0.0; row.len()];
    }
    row.iter().map(|v| (v - lo) / (hi - lo) * 255.0).collect()
}

/// Parses `y,x`.
pub fn parse_query(s: &str) -> Result<(usize, usize)> {
    let bad = || CliError::Usage(format!("pixel '{s}' is not of the form Y,X"));
    let (y, x) = s.split_once(',').ok_or_else(bad)?;
    Ok((y.trim().parse().map_err(|_| bad())?, x.trim().parse().map_err(|_| bad())?))
}

pub fn heatmaps(model: &SegModel<f32>, image: &Tensor<f32>, queries: &[(usize, usize)]) -> Result<Vec<Heatmap>> {
    let s = image.shape4()?;
    if s.batch != 1 {
        return Err(CliError::Usage(format!("expected one image, got {}", s.batch)));
    }
    if !model.context.kind().has_object_context() {
        return Err(ocnet_core::Error::Contract(format!(
            "module '{}' has no object context map",
            model.context.kind()
        ))
        .into());
    }
    for &(y, x) in queries {
        if y >= s.height || x >= s.width {
            return Err(CliError::Usage(format!(
                "pixel ({y}, {x}) is outside the {}x{} image",
                s.height, s.width
            )));
        }
    }
    let _guard = no_grad();
    let (_, _, map) = model.forward_features(image, Mode::Eval)?;
    let map = map.expect("object context modules return their map");
    queries
        .iter()
        .map(|&(y, x)| {
            let cell = (y / OUTPUT_STRIDE, x / OUTPUT_STRIDE);
            let weights = map.row(0, cell.0, cell.1).to_vec();
            let norm = Tensor::new(&[1, 1, map.height, map.width], min_max_normalize(&weights))?;
            let up = bilinear_upsample(&norm, OUTPUT_STRIDE)?;
            Ok(Heatmap {
                query: (y, x),
                cell,
                weights,
                pixels: up.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
                height: map.height * OUTPUT_STRIDE,
                width: map.width * OUTPUT_STRIDE,
            })
        })
        .collect()
}

/// Copy of a planar RGB image with a red cross on `(y, x)`.
pub fn mark_query(h: usize, w: usize, planar: &[f32], (y, x): (usize, usize)) -> Vec<f32> {
    let mut out = planar.to_vec();
    let hw = h * w;
    let arm = 2isize;
    for d in -arm..=arm {
        for (py, px) in [(y as isize + d, x as isize), (y as isize, x as isize + d)] {
            if (0..h as isize).contains(&py) && (0..w as isize).contains(&px) {
                let i = py as usize * w + px as usize;
                for (c, v) in [1.0, 0.0, 0.0].into_iter().enumerate() {
                    out[c * hw + i] = v;
                }
            }
        }
    }
    out
}

/// Writes `ocmap_y{Y}_x{X}.pgm` and `query_y{Y}_x{X}.ppm` for every query.
pub fn visualize(
    cfg: &RunConfig,
    checkpoint: &Path,
    image_path: &Path,
    queries: &[(usize, usize)],
    out: &Path,
) -> Result<Vec<PathBuf>> {
    if queries.is_empty() {
        return Err(CliError::Usage("no query pixels given".into()));
    }
    let model = load_model(cfg, checkpoint)?;
    let (h, w, planar) = read_ppm(image_path)?;
    let sample = Sample::new(h, w, planar.clone(), vec![0; h * w])?;
    let (input, _) = batch_tensor::<f32>(&[&sample])?;
    let maps = heatmaps(&model, &input, queries)?;
    std::fs::create_dir_all(out).map_err(|e| ocnet_core::Error::io(out, e))?;
    let mut written = Vec::new();
    for m in maps {
        let (y, x) = m.query;
        let pgm = out.join(format!("ocmap_y{y}_x{x}.pgm"));
        write_pgm(&pgm, m.height, m.width, &m.pixels)?;
        let ppm = out.join(format!("query_y{y}_x{x}.ppm"));
        write_ppm(&ppm, h, w, &mark_query(h, w, &planar, m.query))?;
        written.extend([pgm, ppm]);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_rows_render_black() {
        assert_eq!(min_max_normalize(&[0.25; 6]), vec![0.0; 6]);
        assert_eq!(min_max_normalize(&[1.0]), vec![0.0]);
    }

    #[test]
    fn extremes_hit_the_ends() {
        let v = min_max_normalize(&[0.1, 0.3, 0.2]);
        assert_eq!((v[0], v[1]), (0.0, 255.0));
        assert!((v[2] - 127.5).abs() < 1e-3);
    }

    #[test]
    fn query_parsing() {
        assert_eq!(parse_query("3, 14").unwrap(), (3, 14));
        assert!(matches!(parse_query("3"), Err(CliError::Usage(_))));
        assert!(matches!(parse_query("a,1"), Err(CliError::Usage(_))));
    }
}
