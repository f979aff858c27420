//! Per-thread count of floating-point kernel invocations, used to check
//! that the integer executor never touches float arithmetic.

use std::cell::Cell;

thread_local! {
    static FLOAT_OPS: Cell<u64> = const { Cell::new(0) };
}

/// Records `n` float element operations on the current thread.
#[inline]
pub fn record(n: usize) {
    FLOAT_OPS.with(|c| c.set(c.get().wrapping_add(n as u64)));
}

/// Float operations recorded so far on the current thread.
pub fn count() -> u64 {
    FLOAT_OPS.with(|c| c.get())
}
