//! Kernel parallelism switch.
//!
//! `UNITOK_THREADS` caps the worker count used inside batched kernels.
//! Unset, `0` or `1` keeps every kernel on the calling thread. Kernels only
//! split work across independent output blocks, so results do not depend on
//! the thread count.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

pub const THREADS_ENV: &str = "UNITOK_THREADS";

static THREADS: AtomicUsize = AtomicUsize::new(usize::MAX);
static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

pub fn threads() -> usize {
    let t = THREADS.load(Ordering::Relaxed);
    if t != usize::MAX {
        return t;
    }
    let parsed =
        std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(0);
    THREADS.store(parsed, Ordering::Relaxed);
    parsed
}

/// Overrides the environment setting for this process.
pub fn set_threads(n: usize) {
    THREADS.store(n, Ordering::Relaxed);
}

pub(crate) fn enabled() -> bool {
    threads() > 1
}

pub(crate) fn install<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    let pool = POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads().max(1))
            .build()
            .expect("thread pool")
    });
    pool.install(f)
}

/// Keeps large tensor buffers on the heap between steps instead of mapping
/// fresh pages for every allocation. Training allocates and frees many
/// megabyte-sized buffers per step, and page faults otherwise dominate the
/// backward pass. Process-wide; call once at startup. No-op off glibc.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        // M_TRIM_THRESHOLD = -1, M_MMAP_THRESHOLD = -3
        libc::mallopt(-1, 512 << 20);
        libc::mallopt(-3, 32 << 20);
    }
}
