use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine annealing: `lr_min + (lr_max - lr_min) * (1 + cos(pi * t_cur / t_i)) / 2`.
pub fn lr_at(t_cur: f64, t_i: f64, lr_min: f64, lr_max: f64) -> Result<f64> {
    if t_i <= 0.0 {
        return Err(Error::invalid("cosine cycle length must be positive"));
    }
    if !(0.0..=t_i).contains(&t_cur) {
        return Err(Error::invalid(format!("T_cur={t_cur} outside [0, {t_i}]")));
    }
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t_cur / t_i).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    /// Length of the first cycle, in epochs.
    pub t_0: usize,
    pub t_mult: usize,
    pub lr_min: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_0: 10,
            t_mult: 2,
            lr_min: 0.0,
        }
    }
}

/// Warm-restart schedule stepped once per epoch.
#[derive(Debug, Clone)]
pub struct WarmRestarts {
    lr_max: f64,
    lr_min: f64,
    t_mult: usize,
    t_i: usize,
    t_cur: usize,
}

impl WarmRestarts {
    pub fn new(lr_max: f64, cfg: &ScheduleConfig) -> Result<Self> {
        if cfg.t_0 == 0 {
            return Err(Error::invalid("T_0 must be at least 1"));
        }
        if cfg.t_mult == 0 {
            return Err(Error::invalid("T_mult must be at least 1"));
        }
        if cfg.lr_min > lr_max {
            return Err(Error::invalid(format!(
                "lr_min {} exceeds lr_max {lr_max}",
                cfg.lr_min
            )));
        }
        Ok(WarmRestarts {
            lr_max,
            lr_min: cfg.lr_min,
            t_mult: cfg.t_mult,
            t_i: cfg.t_0,
            t_cur: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.t_cur as f64, self.t_i as f64, self.lr_min, self.lr_max).expect("t_cur < t_i")
    }

    pub fn position(&self) -> (usize, usize) {
        (self.t_cur, self.t_i)
    }

    pub fn step(&mut self) {
        self.t_cur += 1;
        if self.t_cur >= self.t_i {
            self.t_cur = 0;
            self.t_i *= self.t_mult;
        }
    }
}

impl Iterator for WarmRestarts {
    type Item = f64;
    fn next(&mut self) -> Option<f64> {
        let lr = self.lr();
        self.step();
        Some(lr)
    }
}
