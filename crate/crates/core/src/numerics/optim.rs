use super::params::ParamStore;
use crate::error::{Error, Result};

/// Linear warmup from `lr_init` to `lr_peak`, then inverse square-root decay
/// anchored so that `lr(warmup) == lr_peak`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr_init: f64,
    pub lr_peak: f64,
    pub warmup: u64,
}

impl LrSchedule {
    pub fn new(lr_init: f64, lr_peak: f64, warmup: u64) -> Result<Self> {
        if warmup == 0 {
            return Err(Error::Config("warmup steps must be positive".into()));
        }
        if !(lr_init >= 0.0 && lr_peak >= 0.0 && lr_init.is_finite() && lr_peak.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates must be finite and non-negative, got {lr_init} and {lr_peak}"
            )));
        }
        Ok(Self {
            lr_init,
            lr_peak,
            warmup,
        })
    }

    pub fn lr(&self, t: u64) -> f64 {
        let w = self.warmup as f64;
        let t = t as f64;
        if t < w {
            self.lr_init + (self.lr_peak - self.lr_init) * t / w
        } else {
            self.lr_peak * (w / t).sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
    /// Global gradient-norm clip; disabled when `None`.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn new(schedule: LrSchedule) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            schedule,
            clip_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Adam with bias correction, driven by an [`LrSchedule`].
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
    seen_version: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Ok(Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
            seen_version: params.grad_version(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    /// Restores a saved state; moment shapes must match the parameters.
    pub fn restore(&mut self, t: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Result<()> {
        let fits =
            |xs: &[Vec<f32>]| xs.len() == self.m.len() && xs.iter().zip(&self.m).all(|(a, b)| a.len() == b.len());
        if !fits(&m) || !fits(&v) {
            return Err(Error::Config("optimizer moments do not match parameters".into()));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// Returns the learning rate used.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<f64> {
        if params.grad_version() == self.seen_version {
            return Err(Error::StaleGradient);
        }
        self.seen_version = params.grad_version();
        self.t += 1;
        let c = self.config;
        let lr = c.schedule.lr(self.t);
        let clip = match c.clip_norm {
            Some(max) => {
                let norm = params
                    .iter()
                    .filter_map(|(_, t)| t.grad())
                    .flat_map(|g| g.iter())
                    .map(|&x| f64::from(x) * f64::from(x))
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    (max / norm) as f32
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step = (lr / bc1) as f32;
        let inv_bc2_sqrt = (1.0 / bc2.sqrt()) as f32;
        let eps = c.eps as f32;
        for ((p, m), v) in params.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * clip;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *x -= step * *mi / (vi.sqrt() * inv_bc2_sqrt + eps);
            }
        }
        params.zero_grads();
        let bad = params.iter().any(|(_, t)| t.data().iter().any(|x| !x.is_finite()));
        if bad {
            return Err(Error::Training {
                step: self.t,
                reason: "non-finite parameter after update".into(),
            });
        }
        Ok(lr)
    }
}
