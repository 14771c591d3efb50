//! Process-wide switch for parallelism inside single tensor ops.
//!
//! Every op computes identical (bitwise) results either way: parallel paths
//! split work on fixed chunk boundaries and all reductions combine in fixed
//! order. Turning intra-op parallelism off is purely a scheduling choice —
//! with few cores it is usually faster to run whole experiment repeats in
//! parallel and keep each run on one thread.

use std::sync::atomic::{AtomicBool, Ordering};

static INTRA_OP: AtomicBool = AtomicBool::new(true);

pub fn intra_op() -> bool {
    INTRA_OP.load(Ordering::Relaxed)
}

pub fn set_intra_op(enabled: bool) {
    INTRA_OP.store(enabled, Ordering::Relaxed);
}
