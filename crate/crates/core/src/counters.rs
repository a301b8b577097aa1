//! Per-thread multiply-accumulate counters for the attention and cosine kernels.
//!
//! Only forward kernels count. Counts from several threads are merged by the
//! caller, typically by summing the [`OpCounts`] each worker returns.

use std::cell::Cell;

thread_local! {
    static ATTENTION: Cell<u64> = const { Cell::new(0) };
    static COSINE: Cell<u64> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// Query-key score and probability-value products.
    pub attention_macs: u64,
    /// Cosine numerator products.
    pub cosine_macs: u64,
}

impl std::ops::Add for OpCounts {
    type Output = OpCounts;
    fn add(self, rhs: OpCounts) -> OpCounts {
        OpCounts {
            attention_macs: self.attention_macs + rhs.attention_macs,
            cosine_macs: self.cosine_macs + rhs.cosine_macs,
        }
    }
}

pub fn reset() {
    ATTENTION.with(|c| c.set(0));
    COSINE.with(|c| c.set(0));
}

pub fn read() -> OpCounts {
    OpCounts {
        attention_macs: ATTENTION.with(Cell::get),
        cosine_macs: COSINE.with(Cell::get),
    }
}

/// Runs `f` with zeroed counters and returns what it accumulated, restoring
/// the previous totals afterwards.
pub fn scoped<T>(f: impl FnOnce() -> T) -> (T, OpCounts) {
    let saved = read();
    reset();
    let out = f();
    let counted = read();
    ATTENTION.with(|c| c.set(saved.attention_macs + counted.attention_macs));
    COSINE.with(|c| c.set(saved.cosine_macs + counted.cosine_macs));
    (out, counted)
}

#[inline]
pub(crate) fn add_attention(n: u64) {
    ATTENTION.with(|c| c.set(c.get() + n));
}

#[inline]
pub(crate) fn add_cosine(n: u64) {
    COSINE.with(|c| c.set(c.get() + n));
}
