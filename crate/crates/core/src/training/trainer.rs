use rand::seq::SliceRandom;

use super::{class_weights_from_counts, deep_supervised_loss, poly_lr, OhemConfig, ScheduleConfig, Sgd, SupervisionConfig, IGNORE_LABEL};
use crate::data::{augment_with, batch_tensor, AugmentConfig, Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::nn::{Mode, Parameterized};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Element;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub supervision: SupervisionConfig,
    pub ohem: Option<OhemConfig>,
    /// Weight classes by inverse log frequency instead of uniformly.
    pub class_balanced: bool,
    pub augment: Option<AugmentConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

/// The optimization loop.
///
/// Every random choice of iteration `t` (which samples, which augmentation)
/// is a pure function of the seed and `t`, so a run restored from its
/// parameters, optimizer state and iteration counter continues exactly as
/// the uninterrupted run would.
pub struct Trainer<E: Element> {
    pub model: SegModel<E>,
    pub optimizer: Sgd<E>,
    pub iteration: usize,
    pub config: TrainConfig,
    pub class_weights: Option<Vec<f64>>,
    order: Option<(usize, Vec<usize>)>,
}

impl<E: Element> Trainer<E> {
    pub fn new(model: SegModel<E>, config: TrainConfig, train: &Dataset) -> Result<Self> {
        config.schedule.validate()?;
        if config.batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        if let Some(a) = &config.augment {
            a.validate()?;
        }
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if train.num_classes != model.num_classes() {
            return Err(Error::contract(format!(
                "dataset has {} classes, model predicts {}",
                train.num_classes,
                model.num_classes()
            )));
        }
        let class_weights = config
            .class_balanced
            .then(|| class_weights_from_counts(&train.class_pixel_counts()));
        let optimizer = Sgd::new(config.schedule.momentum, config.schedule.weight_decay);
        Ok(Trainer {
            model,
            optimizer,
            iteration: 0,
            config,
            class_weights,
            order: None,
        })
    }

    fn sample_index(&mut self, global: usize, n: usize) -> usize {
        let epoch = global / n;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut stream_rng(self.config.seed, Stream::Order, epoch as u64, 0));
            self.order = Some((epoch, perm));
        }
        self.order.as_ref().expect("order cached above").1[global % n]
    }

    /// Samples of iteration `iteration`, augmented.
    pub fn batch_samples(&mut self, train: &Dataset, iteration: usize) -> Result<Vec<Sample>> {
        let b = self.config.batch_size;
        (0..b)
            .map(|j| {
                let idx = self.sample_index(iteration * b + j, train.len());
                let s = &train.samples[idx];
                match &self.config.augment {
                    Some(cfg) => {
                        let mut rng = stream_rng(self.config.seed, Stream::Augment, iteration as u64, j as u64);
                        augment_with(s, &cfg.sample_params(s.height, s.width, &mut rng))
                    }
                    None => Ok(s.clone()),
                }
            })
            .collect()
    }

    /// One forward/backward/update.
    pub fn step(&mut self, train: &Dataset) -> Result<StepLog> {
        let it = self.iteration;
        let lr = poly_lr(it, &self.config.schedule)?;
        if it == self.config.schedule.max_iter {
            return Err(Error::contract(format!("schedule of {it} iterations is finished")));
        }
        let samples = self.batch_samples(train, it)?;
        let refs: Vec<&Sample> = samples.iter().collect();
        let (input, labels) = batch_tensor::<E>(&refs)?;
        let out = self.model.forward(&input, Mode::Train)?;
        let loss = deep_supervised_loss(
            &out.logits,
            &out.aux_logits,
            &labels,
            self.class_weights.as_deref(),
            &self.config.supervision,
            self.config.ohem.as_ref(),
            IGNORE_LABEL,
        )?;
        loss.backward()?;
        self.optimizer.step(&self.model.params(), lr)?;
        self.iteration += 1;
        Ok(StepLog {
            iteration: it,
            lr,
            loss: loss.item().as_f64(),
        })
    }

    /// Runs `iterations` steps, passing each log line to `on_step`.
    pub fn run(
        &mut self,
        train: &Dataset,
        iterations: usize,
        mut on_step: impl FnMut(&Self, &StepLog) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..iterations {
            let log = self.step(train)?;
            on_step(self, &log)?;
        }
        Ok(())
    }
}
