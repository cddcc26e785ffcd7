use serde::{Deserialize, Serialize};

/// Plateau learning-rate decay: multiply by `decay_rate` whenever the best
/// observed loss has not improved for `decay_threshold` iterations, floored
/// at `lower_bound`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub initial_lr: f64,
    pub decay_threshold: u64,
    pub decay_rate: f64,
    pub lower_bound: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            initial_lr: 2e-4,
            decay_threshold: 5000,
            decay_rate: 0.1,
            lower_bound: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    cfg: PlateauConfig,
    lr: f64,
    best: f64,
    best_iter: u64,
}

impl PlateauSchedule {
    pub fn new(cfg: PlateauConfig) -> Self {
        PlateauSchedule {
            cfg,
            lr: cfg.initial_lr,
            best: f64::INFINITY,
            best_iter: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Record the loss observed at `iter`. Returns the learning rate to use
    /// from now on.
    pub fn observe(&mut self, iter: u64, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.best_iter = iter;
        } else if iter.saturating_sub(self.best_iter) >= self.cfg.decay_threshold {
            self.lr = (self.lr * self.cfg.decay_rate).max(self.cfg.lower_bound);
            self.best_iter = iter; // restart the stall window
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PlateauConfig {
        PlateauConfig {
            initial_lr: 2e-4,
            decay_threshold: 10,
            decay_rate: 0.1,
            lower_bound: 1e-7,
        }
    }

    #[test]
    fn no_stall_keeps_initial_lr() {
        let mut s = PlateauSchedule::new(cfg());
        for i in 0..100 {
            // strictly improving
            let lr = s.observe(i, 1.0 / (i + 1) as f64);
            assert_eq!(lr, 2e-4);
        }
    }

    #[test]
    fn one_stall_decays_by_rate() {
        let mut s = PlateauSchedule::new(cfg());
        s.observe(0, 1.0);
        for i in 1..=10 {
            s.observe(i, 2.0); // no improvement
        }
        assert!((s.lr() - 2e-5).abs() < 1e-18, "lr {}", s.lr());
    }

    #[test]
    fn repeated_stalls_clamp_at_lower_bound() {
        let mut s = PlateauSchedule::new(cfg());
        s.observe(0, 1.0);
        for i in 1..10_000 {
            s.observe(i, 2.0);
        }
        assert_eq!(s.lr(), 1e-7);
    }

    #[test]
    fn lr_sequence_is_non_increasing_and_bounded() {
        let mut s = PlateauSchedule::new(cfg());
        let mut prev = f64::INFINITY;
        let mut x: u64 = 12345;
        for i in 0..5000 {
            // xorshift noise losses
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            let loss = (x % 1000) as f64 / 1000.0;
            let lr = s.observe(i, loss);
            assert!(lr <= prev);
            assert!(lr >= 1e-7);
            prev = lr;
        }
    }
}
