//! Mini-batch training loop shared by the encoder and the translator.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::Dropout;
use crate::numerics::{Adam, AdamConfig, Bound, LrSchedule, ParamStore, Tape, Var};
use crate::seeding;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub warmup: u64,
    pub clip_norm: Option<f64>,
    pub dropout: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 32,
            lr_init: 1e-7,
            lr_peak: 5e-4,
            warmup: 200,
            clip_norm: None,
            dropout: 0.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        self.adam()?.validate()
    }

    pub fn adam(&self) -> Result<AdamConfig> {
        let mut c = AdamConfig::new(LrSchedule::new(self.lr_init, self.lr_peak, self.warmup)?);
        c.clip_norm = self.clip_norm;
        Ok(c)
    }
}

/// Mean of each named loss component over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: Vec<(String, f64)>,
}

impl EpochLog {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.losses.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: u64,
    /// Loss components on the very first batch, before any update.
    pub initial: Vec<(String, f64)>,
    pub epochs: Vec<EpochLog>,
}

impl TrainReport {
    /// Per-epoch curve of one loss component.
    pub fn curve(&self, name: &str) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.get(name)).collect()
    }
}

/// A finished run: its loss log and the optimizer state it ended with.
#[derive(Debug)]
pub struct Trained {
    pub report: TrainReport,
    pub optimizer: Adam,
}

/// Scalar losses of one batch; `total` is differentiated, every entry of
/// `parts` is logged (include the total there to log it).
pub struct BatchLoss {
    pub total: Var,
    pub parts: Vec<(&'static str, Var)>,
}

/// Runs `config.epochs` passes over `n` examples in seeded random order.
pub fn fit<F>(params: &mut ParamStore, n: usize, config: &TrainConfig, mut batch_loss: F) -> Result<Trained>
where
    F: FnMut(&mut Tape, &Bound, &[usize], &mut Dropout) -> Result<BatchLoss>,
{
    config.validate()?;
    if n == 0 {
        return Err(Error::EmptyInput("training set".into()));
    }
    let mut adam = Adam::new(config.adam()?, params)?;
    let mut drop = Dropout {
        p: config.dropout,
        rng: seeding::child_rng(config.seed, 0xD80),
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport {
        steps: 0,
        initial: Vec::new(),
        epochs: Vec::new(),
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut seeding::child_rng(config.seed, epoch as u64));
        let mut sums: Vec<(&'static str, f64)> = Vec::new();
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let step = adam.step_count() + 1;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let loss = batch_loss(&mut tape, &bound, batch, &mut drop).map_err(|e| match e {
                Error::NonFinite(op) => Error::Training {
                    step,
                    reason: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
            let values: Vec<(&'static str, f64)> = loss
                .parts
                .iter()
                .map(|&(name, v)| tape.scalar_value(v).map(|x| (name, f64::from(x))))
                .collect::<Result<_>>()?;
            let total = tape.scalar_value(loss.total)?;
            if !total.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("loss is {total}"),
                });
            }
            if report.initial.is_empty() {
                report.initial = values.iter().map(|&(k, v)| (k.to_string(), v)).collect();
            }
            if sums.is_empty() {
                sums = values.iter().map(|&(k, _)| (k, 0.0)).collect();
            }
            for (s, (_, v)) in sums.iter_mut().zip(&values) {
                s.1 += v;
            }
            tape.backward(loss.total)?;
            params.accumulate_grads(&tape, &bound)?;
            adam.step(params)?;
            batches += 1;
        }
        report.epochs.push(EpochLog {
            epoch: epoch + 1,
            losses: sums
                .into_iter()
                .map(|(k, s)| (k.to_string(), s / batches as f64))
                .collect(),
        });
    }
    report.steps = adam.step_count();
    Ok(Trained {
        report,
        optimizer: adam,
    })
}
