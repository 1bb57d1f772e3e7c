//! Losses, hard-pixel mining, the learning-rate schedule, the optimizer and
//! the training loop.

mod loss;
mod ohem;
mod optim;
mod schedule;
mod trainer;

pub use loss::{class_balanced_ce, class_weights_from_counts, true_class_probs, IGNORE_LABEL};
pub use ohem::{ohem_select, OhemConfig};
pub use optim::Sgd;
pub use schedule::{poly_lr, ScheduleConfig};
pub use trainer::{StepLog, TrainConfig, Trainer};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Weights of the main and auxiliary loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisionConfig {
    pub main_weight: f64,
    pub aux_weight: f64,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        SupervisionConfig {
            main_weight: 1.0,
            aux_weight: 0.4,
        }
    }
}

/// `main_weight·L(main) + aux_weight·L(aux)`, with OHEM restricting the main
/// term only. Both logit maps must already be at label resolution.
pub fn deep_supervised_loss<E: Element>(
    main: &Tensor<E>,
    aux: &Tensor<E>,
    labels: &[u8],
    class_weights: Option<&[f64]>,
    sup: &SupervisionConfig,
    ohem: Option<&OhemConfig>,
    ignore: u8,
) -> Result<Tensor<E>> {
    if sup.main_weight < 0.0 || sup.aux_weight < 0.0 {
        return Err(Error::contract(format!(
            "loss weights must be non-negative, got {sup:?}"
        )));
    }
    let mask = match ohem {
        Some(cfg) => Some(ohem_select(
            &true_class_probs(main, labels, ignore)?,
            labels,
            ignore,
            cfg,
        )?),
        None => None,
    };
    let l_main = class_balanced_ce(main, labels, class_weights, ignore, mask.as_deref())?;
    let l_aux = class_balanced_ce(aux, labels, class_weights, ignore, None)?;
    l_main.scale(sup.main_weight).add(&l_aux.scale(sup.aux_weight))
}
