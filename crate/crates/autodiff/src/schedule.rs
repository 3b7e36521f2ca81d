//! Per-epoch validation monitors: learning-rate reduction on plateau and
//! early stopping. Both count an epoch as an improvement only when the loss
//! falls below the best seen so far by at least `min_improvement`.

use crate::optim::OptimConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
struct BestTracker {
    best: Option<f64>,
    min_improvement: f64,
}

impl BestTracker {
    fn observe(&mut self, loss: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some(best) => loss < best - self.min_improvement,
        };
        if improved {
            self.best = Some(loss);
        }
        improved
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    tracker: BestTracker,
    factor: f64,
    patience: usize,
    stale_epochs: usize,
    lr: f64,
}

impl PlateauScheduler {
    pub fn new(cfg: &OptimConfig) -> Self {
        PlateauScheduler {
            tracker: BestTracker { best: None, min_improvement: cfg.min_improvement },
            factor: cfg.plateau_factor,
            patience: cfg.plateau_patience,
            stale_epochs: 0,
            lr: cfg.learning_rate,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's validation loss; returns the learning rate for the
    /// next epoch.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if self.tracker.observe(val_loss) {
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
            if self.stale_epochs >= self.patience {
                self.lr *= self.factor;
                self.stale_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    tracker: BestTracker,
    patience: usize,
    stale_epochs: usize,
}

impl EarlyStopping {
    pub fn new(cfg: &OptimConfig) -> Self {
        EarlyStopping {
            tracker: BestTracker { best: None, min_improvement: cfg.min_improvement },
            patience: cfg.early_stop_patience,
            stale_epochs: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.tracker.best
    }

    /// Returns whether this epoch improved on the best loss, and whether to stop.
    pub fn check(&mut self, val_loss: f64) -> (bool, StopDecision) {
        let improved = self.tracker.observe(val_loss);
        if improved {
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
        }
        let decision = if self.stale_epochs >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        };
        (improved, decision)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotone_improvement_never_reduces_or_stops() {
        let cfg = OptimConfig::pretrain();
        let mut sched = PlateauScheduler::new(&cfg);
        let mut stop = EarlyStopping::new(&cfg);
        for e in 0..40 {
            let loss = 1.0 - 0.01 * e as f64;
            assert_eq!(sched.step(loss), 1e-3);
            assert_eq!(stop.check(loss), (true, StopDecision::Continue));
        }
    }

    #[test]
    fn lr_halves_after_five_stale_epochs() {
        let cfg = OptimConfig::pretrain();
        let mut sched = PlateauScheduler::new(&cfg);
        assert_eq!(sched.step(1.0), 1e-3); // epoch 1 sets the best
        for epoch in 2..=5 {
            assert_eq!(sched.step(1.0), 1e-3, "epoch {epoch}");
        }
        assert_eq!(sched.step(1.0), 5e-4); // epoch 6: fifth stale epoch
        for _ in 0..4 {
            assert_eq!(sched.step(1.0), 5e-4);
        }
        assert_eq!(sched.step(1.0), 2.5e-4);
    }

    #[test]
    fn stops_after_ten_stale_epochs() {
        let cfg = OptimConfig::pretrain();
        let mut stop = EarlyStopping::new(&cfg);
        assert_eq!(stop.check(1.0), (true, StopDecision::Continue));
        for _ in 0..9 {
            assert_eq!(stop.check(1.0).1, StopDecision::Continue);
        }
        assert_eq!(stop.check(1.0), (false, StopDecision::Stop));
        assert_eq!(stop.best(), Some(1.0));
    }

    #[test]
    fn float_noise_does_not_count_as_improvement() {
        let cfg = OptimConfig::pretrain();
        let mut stop = EarlyStopping::new(&cfg);
        stop.check(1.0);
        assert!(!stop.check(1.0 - 1e-9).0);
        assert!(stop.check(1.0 - 1e-3).0);
    }

    #[test]
    fn improvement_resets_the_plateau_counter() {
        let cfg = OptimConfig::pretrain();
        let mut sched = PlateauScheduler::new(&cfg);
        sched.step(1.0);
        for _ in 0..4 {
            sched.step(1.0);
        }
        sched.step(0.5);
        for _ in 0..4 {
            assert_eq!(sched.step(0.5), 1e-3);
        }
    }
}
