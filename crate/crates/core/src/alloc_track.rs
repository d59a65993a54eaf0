//! Per-thread heap accounting.
//!
//! Install [`CountingAllocator`] as the `#[global_allocator]` of a binary or
//! test target to make [`measure_peak`] report real numbers; without it
//! the measurement comes back as `None`. Allocation itself is delegated to
//! mimalloc, which keeps large training buffers mapped between batches.

use std::alloc::{GlobalAlloc, Layout};

use mimalloc::MiMalloc;
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

pub struct CountingAllocator;

static INSTALLED: AtomicBool = AtomicBool::new(false);

thread_local! {
    static LIVE: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
}

fn record(delta: isize) {
    let _ = LIVE.try_with(|live| {
        let now = live.get() + delta;
        live.set(now);
        let _ = PEAK.try_with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

// SAFETY: every call is forwarded unchanged to mimalloc; the
// bookkeeping touches only const-initialized thread-locals, which never
// allocate.
unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = MiMalloc.alloc(layout);
        if !p.is_null() {
            record(layout.size() as isize);
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = MiMalloc.alloc_zeroed(layout);
        if !p.is_null() {
            record(layout.size() as isize);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        MiMalloc.dealloc(ptr, layout);
        record(-(layout.size() as isize));
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = MiMalloc.realloc(ptr, layout, new_size);
        if !p.is_null() {
            record(new_size as isize - layout.size() as isize);
        }
        p
    }
}

pub fn is_installed() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

/// Runs `f` and reports the peak number of bytes allocated on this thread
/// above the level at entry. Memory still held by the return value counts.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, Option<usize>) {
    // Touch the allocator once so installation is detectable.
    drop(Box::new(0u8));
    let baseline = LIVE.with(Cell::get);
    PEAK.with(|p| p.set(baseline));
    let r = f();
    let peak = PEAK.with(Cell::get);
    let bytes = is_installed().then(|| (peak - baseline).max(0) as usize);
    (r, bytes)
}
