use crate::error::{Error, Result};

/// Online hard example mining settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OhemConfig {
    /// Pixels whose true-class probability is below this are hard.
    pub theta: f64,
    /// Lower bound on the number of pixels kept per batch.
    pub min_kept: usize,
}

impl OhemConfig {
    pub fn new(theta: f64, min_kept: usize) -> Result<Self> {
        if !(theta > 0.0 && theta <= 1.0) || min_kept == 0 {
            return Err(Error::contract(format!(
                "OHEM needs 0 < theta <= 1 and min_kept >= 1, got {theta} and {min_kept}"
            )));
        }
        Ok(OhemConfig { theta, min_kept })
    }

    /// `theta = 0.7` and a quarter of the batch pixels.
    pub fn for_batch(batch_pixels: usize) -> Self {
        OhemConfig {
            theta: 0.7,
            min_kept: (batch_pixels / 4).max(1),
        }
    }
}

/// Pixels that enter the loss.
///
/// Every non-ignored pixel with `prob < theta` is kept. If that is fewer than
/// `min_kept`, the `min_kept` non-ignored pixels of lowest probability are kept
/// instead, ties going to the lower pixel index.
pub fn ohem_select(probs: &[f64], labels: &[u8], ignore: u8, cfg: &OhemConfig) -> Result<Vec<bool>> {
    if probs.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let valid: Vec<usize> = (0..labels.len()).filter(|&p| labels[p] != ignore).collect();
    if valid.is_empty() {
        return Err(Error::Data("OHEM over a batch with no labelled pixels".into()));
    }
    let mut mask = vec![false; labels.len()];
    let mut hard = 0;
    for &p in &valid {
        if probs[p] < cfg.theta {
            mask[p] = true;
            hard += 1;
        }
    }
    if hard < cfg.min_kept {
        let mut order = valid;
        // stable sort keeps ascending index among equal probabilities
        order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
        for &p in order.iter().take(cfg.min_kept) {
            mask[p] = true;
        }
    }
    Ok(mask)
}
