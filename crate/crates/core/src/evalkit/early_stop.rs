//! Patience-based early stopping on a validation signal.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopSignal {
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without an improvement strictly
/// greater than `min_delta` over the reference value. An improvement exactly
/// equal to `min_delta` does not reset the counter.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    min_delta: f64,
    patience: usize,
    reference: f64,
    stale: usize,
    best: f64,
    best_index: usize,
    n_seen: usize,
}

impl EarlyStop {
    pub fn new(min_delta: f64, patience: usize) -> Self {
        assert!(patience >= 1, "patience must be at least 1");
        EarlyStop {
            min_delta,
            patience,
            reference: f64::INFINITY,
            stale: 0,
            best: f64::INFINITY,
            best_index: 0,
            n_seen: 0,
        }
    }

    /// Feed the next validation value; returns whether training should stop
    /// after this epoch.
    pub fn update(&mut self, value: f64) -> StopSignal {
        if value < self.best {
            self.best = value;
            self.best_index = self.n_seen;
        }
        if value < self.reference - self.min_delta {
            self.reference = value;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.n_seen += 1;
        if self.stale >= self.patience {
            StopSignal::Stop
        } else {
            StopSignal::Continue
        }
    }

    /// 0-based index of the global minimizer among the values seen.
    pub fn best_index(&self) -> usize {
        self.best_index
    }

    pub fn best_value(&self) -> f64 {
        self.best
    }

    /// True when the most recent update found a new global best.
    pub fn last_was_best(&self) -> bool {
        self.n_seen > 0 && self.best_index + 1 == self.n_seen
    }
}
