//! Global allocator wrapper with per-thread byte accounting.
//!
//! Tracking is off unless a thread is inside [`measure_peak`]; the fast path
//! costs one thread-local read per allocation.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;

pub struct CountingAlloc;

#[global_allocator]
static GLOBAL: CountingAlloc = CountingAlloc;

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static CURRENT: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
}

fn record(delta: isize) {
    let _ = ACTIVE.try_with(|a| {
        if a.get() {
            let cur = CURRENT.with(|c| {
                let v = c.get() + delta;
                c.set(v);
                v
            });
            PEAK.with(|p| {
                if cur > p.get() {
                    p.set(cur)
                }
            });
        }
    });
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            record(layout.size() as isize);
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            record(layout.size() as isize);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        record(-(layout.size() as isize));
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            record(new_size as isize - layout.size() as isize);
        }
        p
    }
}

/// Runs `f` and returns its result with the peak number of heap bytes the
/// current thread held above its starting point while `f` ran.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let was_active = ACTIVE.with(|a| a.replace(true));
    let start = CURRENT.with(|c| c.get());
    let outer_peak = PEAK.with(|p| p.replace(start));
    let r = f();
    let peak = PEAK.with(|p| p.get());
    PEAK.with(|p| p.set(outer_peak.max(peak)));
    if !was_active {
        ACTIVE.with(|a| a.set(false));
        CURRENT.with(|c| c.set(0));
        PEAK.with(|p| p.set(0));
    }
    (r, (peak - start).max(0) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_a_vector() {
        let (_, peak) = measure_peak(|| {
            let v = vec![0u8; 10_000];
            std::hint::black_box(&v);
        });
        assert!(peak >= 10_000, "peak {peak}");
        let (_, none) = measure_peak(|| 1 + 1);
        assert_eq!(none, 0);
    }
}
