use std::f64::consts::PI;

/// Linear warmup to `peak_lr`, then half-cosine decay to zero at `total_steps`.
/// Out-of-range steps are clamped to the schedule's ends.
pub fn cosine_lr(step: u64, total_steps: u64, warmup_steps: u64, peak_lr: f64) -> f64 {
    let step = step.min(total_steps);
    if warmup_steps > 0 && step < warmup_steps {
        return peak_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps);
    if span == 0 {
        return peak_lr;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    peak_lr * 0.5 * (1.0 + (PI * progress).cos())
}
