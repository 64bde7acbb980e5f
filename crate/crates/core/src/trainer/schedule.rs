/// Linear warm-up followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl CosineSchedule {
    /// Warm-up covers `ceil(warmup_ratio · total_steps)` steps.
    pub fn new(total_steps: usize, warmup_ratio: f64) -> Self {
        let warmup_steps = ((warmup_ratio * total_steps as f64).ceil() as usize).min(total_steps);
        Self { total_steps, warmup_steps }
    }

    /// Multiplier of the base learning rate at 0-based `step`.
    pub fn factor(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
