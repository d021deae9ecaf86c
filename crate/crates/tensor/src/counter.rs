//! Multiply-accumulate tally for convolutions and matrix products.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` and returns the MACs executed by conv / matmul / linear ops on
/// this thread while it ran.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let prev = MACS.with(|m| m.replace(Some(0)));
    let out = f();
    let total = MACS.with(|m| m.replace(prev)).unwrap_or(0);
    if let Some(outer) = prev {
        MACS.with(|m| m.set(Some(outer + total)));
    }
    (out, total)
}

pub(crate) fn add_macs(n: u64) {
    MACS.with(|m| {
        if let Some(v) = m.get() {
            m.set(Some(v + n));
        }
    });
}
