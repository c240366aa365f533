/// Linear warmup followed by half-cosine decay to zero.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: usize, total_steps: usize) -> Self {
        assert!(total_steps >= 1 && warmup_steps <= total_steps);
        LrSchedule { base_lr, warmup_steps, total_steps }
    }

    /// Learning rate at `step` in `[0, total_steps)`.
    ///
    /// Warmup ramps linearly so the very first step already trains
    /// (`(step+1)/warmup_steps`); afterwards the rate follows
    /// `0.5 (1 + cos(pi t))` with `t` spanning the remaining steps, ending
    /// exactly at zero on the last one.
    pub fn lr_at(&self, step: usize) -> crate::Result<f64> {
        if step >= self.total_steps {
            return Err(crate::Error::StepOutOfRange { step, total: self.total_steps });
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * (step + 1) as f64 / self.warmup_steps as f64);
        }
        let span = (self.total_steps - self.warmup_steps).saturating_sub(1).max(1);
        let t = (step - self.warmup_steps) as f64 / span as f64;
        Ok(self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}
