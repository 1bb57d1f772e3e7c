use crate::error::{Error, Result};
use crate::tensor::ops::softmax_in_place;
use crate::tensor::{lit, Element, Tensor};

pub const IGNORE_LABEL: u8 = 255;

/// Per-class weights `1 / ln(1.02 + f_k)` from pixel counts per class.
pub fn class_weights_from_counts(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .map(|&c| {
            let freq = if total == 0 { 0.0 } else { c as f64 / total as f64 };
            1.0 / (1.02 + freq).ln()
        })
        .collect()
}

fn check_labels<E: Element>(logits: &Tensor<E>, labels: &[u8], ignore: u8) -> Result<(usize, usize)> {
    let s = logits.shape4()?;
    let pixels = s.batch * s.pixels();
    if labels.len() != pixels {
        return Err(Error::dim(format!(
            "logits {:?} cover {pixels} pixels, label map has {}",
            logits.shape(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= s.channels) {
        return Err(Error::Data(format!(
            "label {bad} outside [0, {}) and not the ignore label {ignore}",
            s.channels
        )));
    }
    Ok((s.channels, s.pixels()))
}

/// Softmax over classes for every pixel, as `[pixel][class]` rows in
/// `(batch, y, x)` order.
fn pixel_softmax<E: Element>(logits: &Tensor<E>, k: usize, hw: usize) -> Vec<E> {
    let batch = logits.numel() / (k * hw);
    let mut probs = vec![E::zero(); logits.numel()];
    for b in 0..batch {
        let plane = &logits.data()[b * k * hw..][..k * hw];
        for p in 0..hw {
            let row = &mut probs[(b * hw + p) * k..][..k];
            for (c, v) in row.iter_mut().enumerate() {
                *v = plane[c * hw + p];
            }
            softmax_in_place(row);
        }
    }
    probs
}

/// Softmax probability of the labelled class at every pixel; ignored pixels get 1.
pub fn true_class_probs<E: Element>(logits: &Tensor<E>, labels: &[u8], ignore: u8) -> Result<Vec<f64>> {
    let (k, hw) = check_labels(logits, labels, ignore)?;
    let probs = pixel_softmax(logits, k, hw);
    Ok(labels
        .iter()
        .enumerate()
        .map(|(p, &l)| if l == ignore { 1.0 } else { probs[p * k + l as usize].as_f64() })
        .collect())
}

/// Weighted cross entropy averaged over the counted pixels.
///
/// A pixel counts when its label is not `ignore` and, if `mask` is given, its
/// mask entry is set. Each counted pixel contributes
/// `-w[label]·ln softmax(logits)[label]`; the sum is divided by the number of
/// counted pixels. `weights = None` means all ones.
pub fn class_balanced_ce<E: Element>(
    logits: &Tensor<E>,
    labels: &[u8],
    weights: Option<&[f64]>,
    ignore: u8,
    mask: Option<&[bool]>,
) -> Result<Tensor<E>> {
    let (k, hw) = check_labels(logits, labels, ignore)?;
    if let Some(w) = weights {
        if w.len() != k {
            return Err(Error::dim(format!("{} class weights for {k} classes", w.len())));
        }
    }
    if let Some(m) = mask {
        if m.len() != labels.len() {
            return Err(Error::dim(format!("mask of {} for {} pixels", m.len(), labels.len())));
        }
    }
    let counted: Vec<bool> = labels
        .iter()
        .enumerate()
        .map(|(p, &l)| l != ignore && mask.map_or(true, |m| m[p]))
        .collect();
    let count = counted.iter().filter(|&&c| c).count();
    if count == 0 {
        return Err(Error::Data("no labelled pixels to score".into()));
    }
    let weight = |c: usize| -> E { lit(weights.map_or(1.0, |w| w[c])) };
    let probs = pixel_softmax(logits, k, hw);
    let mut total = E::zero();
    for (p, &l) in labels.iter().enumerate() {
        if counted[p] {
            let lp = probs[p * k + l as usize].max(E::min_positive_value());
            total -= weight(l as usize) * lp.ln();
        }
    }
    let inv: E = lit(1.0 / count as f64);
    let labels = labels.to_vec();
    let wvec: Vec<E> = (0..k).map(weight).collect();
    Ok(Tensor::from_op(
        vec![1],
        vec![total * inv],
        "class_balanced_ce",
        vec![logits.clone()],
        move |g| {
            let scale = g[0] * inv;
            let mut gx = vec![E::zero(); probs.len()];
            for (p, &l) in labels.iter().enumerate() {
                if !counted[p] {
                    continue;
                }
                let (b, px) = (p / hw, p % hw);
                let w = wvec[l as usize] * scale;
                for c in 0..k {
                    let onehot = if c == l as usize { E::one() } else { E::zero() };
                    gx[(b * k + c) * hw + px] = w * (probs[p * k + c] - onehot);
                }
            }
            vec![Some(gx)]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(k: usize, cols: &[&[f64]]) -> Tensor<f64> {
        // cols[p] are the k logits of pixel p, laid out as [1, k, 1, n]
        let n = cols.len();
        let mut data = vec![0.0; k * n];
        for (p, c) in cols.iter().enumerate() {
            for (j, &v) in c.iter().enumerate() {
                data[j * n + p] = v;
            }
        }
        Tensor::new(&[1, k, 1, n], data).unwrap()
    }

    #[test]
    fn peaked_logits_give_near_zero_loss() {
        let z = logits(3, &[&[20.0, 0.0, 0.0], &[0.0, 20.0, 0.0]]);
        let l = class_balanced_ce(&z, &[0, 1], None, IGNORE_LABEL, None).unwrap();
        assert!(l.item() < 1e-3);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let z = logits(4, &[&[0.3; 4], &[0.3; 4], &[0.3; 4]]);
        let l = class_balanced_ce(&z, &[0, 3, 2], None, IGNORE_LABEL, None).unwrap();
        assert!((l.item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weighted_two_pixel_example() {
        let z = logits(2, &[&[1.0, 0.0], &[0.0, 2.0]]);
        let l = class_balanced_ce(&z, &[0, 0], Some(&[2.0, 1.0]), IGNORE_LABEL, None).unwrap();
        let nll = |a: f64, b: f64| -(a.exp() / (a.exp() + b.exp())).ln();
        let want = (2.0 * nll(1.0, 0.0) + 2.0 * nll(0.0, 2.0)) / 2.0;
        assert!((l.item() - want).abs() < 1e-12);
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let z = logits(2, &[&[1.0, 0.0], &[5.0, -5.0]]);
        let a = class_balanced_ce(&z, &[1, IGNORE_LABEL], None, IGNORE_LABEL, None).unwrap();
        let z1 = logits(2, &[&[1.0, 0.0]]);
        let b = class_balanced_ce(&z1, &[1], None, IGNORE_LABEL, None).unwrap();
        assert_eq!(a.item(), b.item());
    }

    #[test]
    fn out_of_range_label_is_data_error() {
        let z = logits(2, &[&[1.0, 0.0]]);
        assert!(matches!(
            class_balanced_ce(&z, &[2], None, IGNORE_LABEL, None),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn weights_favor_rare_classes() {
        let w = class_weights_from_counts(&[900, 100]);
        assert!(w[1] > w[0]);
        assert!((w[0] - 1.0 / (1.02f64 + 0.9).ln()).abs() < 1e-12);
    }
}
