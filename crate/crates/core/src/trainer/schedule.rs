use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RampShape {
    Linear,
    Exponential,
}

impl RampShape {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(RampShape::Linear),
            "exponential" | "exp" => Ok(RampShape::Exponential),
            _ => Err(Error::Parse(format!("unknown ramp shape {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RampShape::Linear => "linear",
            RampShape::Exponential => "exponential",
        }
    }
}

/// Margin ramp from `start` to `end` over `total_steps`, flat afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
    pub shape: RampShape,
}

impl MarginSchedule {
    pub fn new(start: f64, end: f64, total_steps: usize, shape: RampShape) -> Result<Self> {
        let s = Self { start, end, total_steps, shape };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.start && self.start <= self.end && self.end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "margin schedule needs 0 <= start <= end < 1, got {} -> {}",
                self.start, self.end
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidConfig("margin schedule needs at least one step".into()));
        }
        if self.shape == RampShape::Exponential && self.start == 0.0 {
            return Err(Error::InvalidExponentialSchedule);
        }
        Ok(())
    }

    pub fn margin_at(&self, step: usize) -> Result<f64> {
        self.validate()?;
        let frac = (step as f64 / self.total_steps as f64).min(1.0);
        let m = match self.shape {
            RampShape::Linear => self.start + (self.end - self.start) * frac,
            RampShape::Exponential => self.start * (self.end / self.start).powf(frac),
        };
        Ok(m.clamp(self.start, self.end))
    }
}

/// Reduce-on-plateau learning-rate control driven by a validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub patience: usize,
    pub decay_factor: f64,
    pub min_lr: f64,
    pub best: f64,
    pub bad_validations: usize,
    /// Minimum absolute decrease that counts as an improvement.
    pub threshold: f64,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, decay_factor: f64, min_lr: f64) -> Result<Self> {
        if !(lr >= 0.0) || !(min_lr > 0.0) || !(decay_factor > 0.0 && decay_factor < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "plateau scheduler needs lr >= 0, min_lr > 0, factor in (0, 1); got {lr}, {min_lr}, {decay_factor}"
            )));
        }
        // lr = 0 freezes training; keep it rather than lifting it to min_lr
        let lr = if lr == 0.0 { 0.0 } else { lr.max(min_lr) };
        Ok(Self { lr, patience, decay_factor, min_lr, best: f64::INFINITY, bad_validations: 0, threshold: 1e-4 })
    }

    /// Feeds one validation result. The rate decays once more than `patience`
    /// consecutive validations fail to improve on the best value.
    pub fn step(&mut self, val_metric: f64) {
        if val_metric < self.best - self.threshold {
            self.best = val_metric;
            self.bad_validations = 0;
            return;
        }
        self.bad_validations += 1;
        if self.bad_validations > self.patience {
            self.lr = (self.lr * self.decay_factor).max(self.min_lr).min(self.lr);
            self.bad_validations = 0;
        }
    }
}
