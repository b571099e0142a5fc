//! Warmup-linear learning-rate schedule.

use serde::{Deserialize, Serialize};

/// Linear ramp to `base` over `warmup` steps, then linear decay to
/// `base * min_ratio` at `total` steps, constant afterwards. The emitted
/// rate is clamped to `[base * min_ratio, base]` so it never vanishes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: u64,
    pub total: u64,
    pub min_ratio: f64,
}

impl LrSchedule {
    pub fn new(base: f64, warmup: u64, total: u64, min_ratio: f64) -> Self {
        assert!(base > 0.0, "base rate must be positive");
        assert!(total >= warmup, "total steps must cover the warmup");
        assert!((0.0..=1.0).contains(&min_ratio) && min_ratio > 0.0, "min_ratio must be in (0, 1]");
        LrSchedule { base, warmup, total, min_ratio }
    }

    pub fn rate(&self, step: u64) -> f64 {
        let floor = self.base * self.min_ratio;
        let raw = if self.warmup > 0 && step <= self.warmup {
            self.base * step as f64 / self.warmup as f64
        } else if step >= self.total {
            floor
        } else {
            let span = (self.total - self.warmup) as f64;
            let frac = (step - self.warmup) as f64 / span;
            self.base + (floor - self.base) * frac
        };
        raw.clamp(floor, self.base)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = LrSchedule::new(5e-4, 1000, 10_000, 0.1);
        assert_eq!(s.rate(1000), 5e-4);
        assert_eq!(s.rate(500), 2.5e-4);
        assert!((s.rate(10_000) - 5e-5).abs() < 1e-18);
        assert!((s.rate(50_000) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn bounded_and_continuous() {
        let s = LrSchedule::new(1.0, 100, 1000, 0.1);
        let mut prev = s.rate(0);
        for step in 1..1200 {
            let r = s.rate(step);
            assert!(r >= 0.1 - 1e-12 && r <= 1.0 + 1e-12, "rate {r} out of bounds at {step}");
            assert!((r - prev).abs() < 0.02, "jump at step {step}");
            prev = r;
        }
    }
}
