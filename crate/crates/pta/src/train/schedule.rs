//! Plateau learning-rate schedule with early stopping: reduce the rate by
//! a fixed factor once per plateau after `patience` epochs without
//! improvement, stop entirely after `early_stop` epochs without one.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleDecision {
    pub improved: bool,
    pub reduce_lr: bool,
    pub stop: bool,
}

#[derive(Debug)]
pub struct PlateauSchedule {
    patience: usize,
    early_stop: usize,
    best: f64,
    best_epoch: usize,
    epochs_seen: usize,
    since_best: usize,
    reduced_this_plateau: bool,
}

impl PlateauSchedule {
    pub fn new(patience: usize, early_stop: usize) -> Self {
        assert!(
            patience < early_stop,
            "patience ({patience}) must be below the early-stop horizon ({early_stop})"
        );
        Self {
            patience,
            early_stop,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_seen: 0,
            since_best: 0,
            reduced_this_plateau: false,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    /// Feeds one epoch's monitored value (higher is better).
    pub fn observe(&mut self, value: f64) -> ScheduleDecision {
        let epoch = self.epochs_seen;
        self.epochs_seen += 1;
        if value > self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.since_best = 0;
            self.reduced_this_plateau = false;
            return ScheduleDecision {
                improved: true,
                reduce_lr: false,
                stop: false,
            };
        }
        self.since_best += 1;
        let reduce_lr = self.since_best == self.patience && !self.reduced_this_plateau;
        if reduce_lr {
            self.reduced_this_plateau = true;
        }
        ScheduleDecision {
            improved: false,
            reduce_lr,
            stop: self.since_best >= self.early_stop,
        }
    }
}
