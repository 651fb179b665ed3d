//! Per-thread multiply-accumulate counters.
//!
//! Dense products and attention score loops report their MAC counts here,
//! attributed to whichever [`Site`] is active. Used to check the closed-form
//! FLOP formulas against what the forward pass really executes.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    Other,
    InputProjection,
    Lpa,
    Encoder,
    Ffn,
    Head,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    /// Weight-matrix products.
    Dense,
    /// `QK^T` and `PV` inside attention.
    Scores,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounts {
    macs: BTreeMap<(Site, OpKind), u64>,
    attention_calls: BTreeMap<Site, u64>,
}

impl OpCounts {
    pub fn macs(&self, site: Site, kind: OpKind) -> u64 {
        self.macs.get(&(site, kind)).copied().unwrap_or(0)
    }

    pub fn attention_calls(&self, site: Site) -> u64 {
        self.attention_calls.get(&site).copied().unwrap_or(0)
    }

    /// All forward MACs (everything except [`Site::Backward`]).
    pub fn forward_macs(&self) -> u64 {
        self.macs
            .iter()
            .filter(|((site, _), _)| *site != Site::Backward)
            .map(|(_, v)| v)
            .sum()
    }
}

thread_local! {
    static COUNTS: RefCell<OpCounts> = RefCell::new(OpCounts::default());
    static SITE: Cell<Site> = const { Cell::new(Site::Other) };
}

pub fn reset() {
    COUNTS.with(|c| *c.borrow_mut() = OpCounts::default());
}

pub fn snapshot() -> OpCounts {
    COUNTS.with(|c| c.borrow().clone())
}

pub fn current_site() -> Site {
    SITE.with(Cell::get)
}

/// Runs `f` with `site` as the attribution target, restoring the previous site afterwards.
pub fn with_site<R>(site: Site, f: impl FnOnce() -> R) -> R {
    let prev = SITE.with(|s| s.replace(site));
    let out = f();
    SITE.with(|s| s.set(prev));
    out
}

pub(crate) fn record(kind: OpKind, macs: u64) {
    let site = current_site();
    COUNTS.with(|c| *c.borrow_mut().macs.entry((site, kind)).or_insert(0) += macs);
}

pub(crate) fn record_attention_call() {
    let site = current_site();
    COUNTS.with(|c| *c.borrow_mut().attention_calls.entry(site).or_insert(0) += 1);
}
