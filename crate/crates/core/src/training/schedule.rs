use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub max_iter: usize,
    pub power: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.power > 0.0) {
            return Err(Error::contract(format!(
                "schedule needs base_lr > 0 and power > 0, got {} and {}",
                self.base_lr, self.power
            )));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract(format!(
                "weight decay {} must be >= 0 and momentum {} in [0, 1)",
                self.weight_decay, self.momentum
            )));
        }
        Ok(())
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            base_lr: 0.01,
            max_iter: 2000,
            power: 0.9,
            weight_decay: 5e-4,
            momentum: 0.9,
        }
    }
}

/// `base_lr · (1 − iter/max_iter)^power`.
pub fn poly_lr(iter: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if iter > cfg.max_iter {
        return Err(Error::contract(format!(
            "iteration {iter} is past the schedule end {}",
            cfg.max_iter
        )));
    }
    if cfg.max_iter == 0 {
        return Ok(cfg.base_lr);
    }
    let frac = 1.0 - iter as f64 / cfg.max_iter as f64;
    Ok(cfg.base_lr * frac.powf(cfg.power))
}
