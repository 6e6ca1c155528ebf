use std::f64::consts::PI;

/// Linear warmup followed by a cosine decay, with the peak learning rate
/// set by the linear scaling rule `base_lr · batch / 256`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_lr: f64,
}

impl ScheduleConfig {
    /// Schedule over `epochs` epochs with warmup a fraction of the total.
    pub fn from_epochs(base_lr: f64, batch_size: usize, epochs: usize, steps_per_epoch: usize, warmup_frac: f64, min_lr: f64) -> Self {
        let total_steps = epochs * steps_per_epoch;
        let warmup_steps = (warmup_frac * total_steps as f64).round() as usize;
        ScheduleConfig { base_lr, batch_size, warmup_steps, total_steps, min_lr }
    }

    pub fn peak_lr(&self) -> f64 {
        peak_lr(self.base_lr, self.batch_size)
    }

    /// Ramp value at `step` (`0` at step 0, peak at `warmup_steps`).
    pub fn warmup_lr(&self, step: f64) -> f64 {
        self.peak_lr() * step / self.warmup_steps.max(1) as f64
    }

    /// Cosine value at `step` (peak at `warmup_steps`, `min_lr` at `total_steps`).
    pub fn cosine_lr(&self, step: f64) -> f64 {
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps as f64) / span;
        self.min_lr + (self.peak_lr() - self.min_lr) * 0.5 * (1.0 + (PI * progress).cos())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            self.min_lr
        } else if step < self.warmup_steps {
            self.warmup_lr(step as f64)
        } else {
            self.cosine_lr(step as f64)
        }
    }
}

pub fn peak_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ScheduleConfig {
        ScheduleConfig { base_lr: 1e-3, batch_size: 512, warmup_steps: 100, total_steps: 1000, min_lr: 1e-6 }
    }

    #[test]
    fn scaling_rule() {
        assert!((cfg().peak_lr() - 2e-3).abs() < 1e-18);
        assert!((peak_lr(1e-4, 256) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn endpoints_and_junction() {
        let c = cfg();
        assert_eq!(c.lr_at(0), 0.0);
        assert!((c.lr_at(1) - c.peak_lr() / 100.0).abs() < 1e-18);
        assert!((c.warmup_lr(100.0) - c.cosine_lr(100.0)).abs() < 1e-12);
        assert_eq!(c.lr_at(1000), c.min_lr);
        assert_eq!(c.lr_at(5000), c.min_lr);
        assert!((c.lr_at(550) - (c.peak_lr() + c.min_lr) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn monotone_phases() {
        let c = cfg();
        for s in 1..100 {
            assert!(c.lr_at(s) > c.lr_at(s - 1));
        }
        for s in 101..1000 {
            assert!(c.lr_at(s) <= c.lr_at(s - 1));
        }
    }
}
