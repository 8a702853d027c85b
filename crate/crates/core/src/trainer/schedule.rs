//! Linear warmup followed by cosine cycles of doubling length and shrinking
//! amplitude.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub warmup_init: f64,
    pub max_lr: f64,
    pub min_lr: f64,
    pub cycles: usize,
    pub first_cycle_steps: usize,
    /// Per-cycle multiplier `M` applied to both bounds.
    pub shrink: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            warmup_steps: 16_000,
            warmup_init: 1e-7,
            max_lr: 1.0,
            min_lr: 1e-5,
            cycles: 1,
            first_cycle_steps: 18_000,
            shrink: 1.0,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.cycles == 0 || self.first_cycle_steps == 0 {
            problems.push("schedule needs at least one non-empty cycle".to_string());
        }
        if !(self.max_lr > 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.max_lr) {
            problems.push(format!(
                "need 0 <= min_lr {} <= max_lr {}, max_lr > 0",
                self.min_lr, self.max_lr
            ));
        }
        if !(self.warmup_init >= 0.0) {
            problems.push(format!("warmup_init {} must be non-negative", self.warmup_init));
        }
        if !(self.shrink > 0.0) {
            problems.push(format!("shrink {} must be positive", self.shrink));
        }
        if self.cycles > 40 {
            problems.push(format!("{} cycles overflow the doubling lengths", self.cycles));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Length of cycle `i` (0-based): `2^i` first-cycle lengths.
    pub fn cycle_len(&self, i: usize) -> usize {
        self.first_cycle_steps << i
    }

    /// `(max, min)` learning rates of cycle `i` (0-based).
    pub fn cycle_bounds(&self, i: usize) -> (f64, f64) {
        let m = self.shrink.powi(i as i32);
        (self.max_lr * m, self.min_lr * m)
    }

    pub fn total_steps(&self) -> usize {
        self.warmup_steps + (0..self.cycles).map(|i| self.cycle_len(i)).sum::<usize>()
    }

    /// Learning rate for update `step` (0-based). Steps past the end clamp to
    /// the final minimum.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let f = step as f64 / self.warmup_steps as f64;
            return self.warmup_init + (self.max_lr - self.warmup_init) * f;
        }
        let mut offset = step - self.warmup_steps;
        for i in 0..self.cycles {
            let len = self.cycle_len(i);
            if offset < len {
                let f = offset as f64 / len as f64;
                let (max, min) = self.cycle_bounds(i);
                return min + 0.5 * (max - min) * (1.0 + (PI * f).cos());
            }
            offset -= len;
        }
        log::warn!(
            "step {step} is past the {}-step schedule, using the final minimum",
            self.total_steps()
        );
        self.cycle_bounds(self.cycles.saturating_sub(1)).1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_endpoints() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 1e-7);
        assert_eq!(s.lr_at(16_000), 1.0);
        assert!((s.lr_at(8_000) - (1e-7 + (1.0 - 1e-7) * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn mid_cycle_is_midpoint() {
        let s = LrSchedule {
            cycles: 2,
            shrink: 0.5,
            ..LrSchedule::default()
        };
        assert!((s.lr_at(16_000 + 9_000) - (1.0 + 1e-5) / 2.0).abs() < 1e-12);
        // second cycle: 36K long, bounds halved
        assert!((s.lr_at(16_000 + 18_000 + 18_000) - (0.5 + 0.5e-5) / 2.0).abs() < 1e-12);
        assert_eq!(s.lr_at(16_000 + 18_000), 0.5);
    }

    #[test]
    fn past_the_end_clamps() {
        let s = LrSchedule {
            cycles: 2,
            shrink: 0.5,
            ..LrSchedule::default()
        };
        assert_eq!(s.lr_at(s.total_steps() + 5), 0.5e-5);
    }
}
