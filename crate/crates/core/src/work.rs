//! Thread-local work accounting.
//!
//! Kernels report multiply-accumulates and value touches to whichever
//! [`Stage`] is active on the current thread. Counters only grow until
//! [`reset`] is called.

use std::cell::{Cell, RefCell};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Estimator,
    Mask,
    Sparse,
    Mix,
    Dense,
    Train,
    Other,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Estimator,
        Stage::Mask,
        Stage::Sparse,
        Stage::Mix,
        Stage::Dense,
        Stage::Train,
        Stage::Other,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Estimator => "estimator",
            Stage::Mask => "mask",
            Stage::Sparse => "sparse_attention",
            Stage::Mix => "mix",
            Stage::Dense => "dense_reference",
            Stage::Train => "train",
            Stage::Other => "other",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WorkCounter {
    macs: [u64; 7],
    touches: [u64; 7],
    /// Nonzeros emitted by mask interpolation.
    pub nnz_emitted: u64,
}

impl WorkCounter {
    pub fn macs(&self, stage: Stage) -> u64 {
        self.macs[stage.index()]
    }

    /// Stored values read or written by sparse kernels.
    pub fn touches(&self, stage: Stage) -> u64 {
        self.touches[stage.index()]
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.iter().sum()
    }

    /// MACs of the linear-complexity pipeline (everything but the dense reference).
    pub fn sea_macs(&self) -> u64 {
        [Stage::Estimator, Stage::Mask, Stage::Sparse, Stage::Mix]
            .iter()
            .map(|s| self.macs(*s))
            .sum()
    }

    pub fn delta(&self, earlier: &WorkCounter) -> WorkCounter {
        let mut out = WorkCounter::default();
        for i in 0..7 {
            out.macs[i] = self.macs[i] - earlier.macs[i];
            out.touches[i] = self.touches[i] - earlier.touches[i];
        }
        out.nnz_emitted = self.nnz_emitted - earlier.nnz_emitted;
        out
    }
}

thread_local! {
    static COUNTER: RefCell<WorkCounter> = RefCell::new(WorkCounter::default());
    static STAGE: Cell<Stage> = const { Cell::new(Stage::Other) };
}

pub fn reset() {
    COUNTER.with(|c| *c.borrow_mut() = WorkCounter::default());
}

pub fn snapshot() -> WorkCounter {
    COUNTER.with(|c| c.borrow().clone())
}

pub fn current_stage() -> Stage {
    STAGE.with(|s| s.get())
}

/// Runs `f` with `stage` as the attribution target, restoring the previous stage after.
pub fn with_stage<R>(stage: Stage, f: impl FnOnce() -> R) -> R {
    let prev = STAGE.with(|s| s.replace(stage));
    let out = f();
    STAGE.with(|s| s.set(prev));
    out
}

pub(crate) fn add_macs(n: u64) {
    let stage = current_stage();
    COUNTER.with(|c| c.borrow_mut().macs[stage.index()] += n);
}

pub(crate) fn add_touches(n: u64) {
    let stage = current_stage();
    COUNTER.with(|c| c.borrow_mut().touches[stage.index()] += n);
}

pub(crate) fn add_nnz(n: u64) {
    COUNTER.with(|c| c.borrow_mut().nnz_emitted += n);
}
