//! Efficient-attention laboratory: a dense tensor core with tape-based
//! reverse-mode differentiation, seven interchangeable attention operators,
//! pyramid/columnar vision-transformer assembly, an analytic
//! parameter/MAC cost model, a runtime-scaling benchmark harness, and a
//! synthetic-task training loop.
//!
//! Everything runs at two precisions: f64 for the verification suites
//! (gradient checks, oracle equivalences), f32 for training and timing.
//! All randomness descends from explicit 64-bit seeds.
//!
//! With the default `parallel` feature, large matrix products distribute
//! independent output rows across a rayon pool; each element keeps its
//! fixed left-to-right summation order, so sequential and parallel builds
//! produce bit-identical results. Disable with `--no-default-features`,
//! or at runtime via `set_parallel(false)` / `ATNZ_THREADS=1`.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod error;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::OnceLock;

static PARALLEL: AtomicBool = AtomicBool::new(false);
static PARALLEL_INIT: OnceLock<()> = OnceLock::new();

fn init_parallel_from_env() {
    PARALLEL_INIT.get_or_init(|| {
        let threads = std::env::var("ATNZ_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok());
        #[cfg(feature = "parallel")]
        {
            match threads {
                Some(1) => PARALLEL.store(false, Ordering::Relaxed),
                Some(n) if n > 1 => {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                    PARALLEL.store(true, Ordering::Relaxed);
                }
                _ => PARALLEL.store(true, Ordering::Relaxed),
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = threads;
            PARALLEL.store(false, Ordering::Relaxed);
        }
    });
}

/// Whether data-parallel execution of heavy kernels is currently active.
/// Defaults to the `parallel` feature's presence, honoring `ATNZ_THREADS`.
pub fn parallel_active() -> bool {
    init_parallel_from_env();
    PARALLEL.load(Ordering::Relaxed)
}

/// Switch data-parallel execution on or off at runtime. Timing harnesses
/// switch it off during measurement; results are identical either way.
pub fn set_parallel(enabled: bool) {
    init_parallel_from_env();
    #[cfg(not(feature = "parallel"))]
    let enabled = {
        let _ = enabled;
        false
    };
    PARALLEL.store(enabled, Ordering::Relaxed);
}

/// Restores the previous parallelism setting when dropped.
pub struct ParallelGuard(bool);

impl ParallelGuard {
    pub fn disable() -> Self {
        let prev = parallel_active();
        set_parallel(false);
        ParallelGuard(prev)
    }
}

impl Drop for ParallelGuard {
    fn drop(&mut self) {
        set_parallel(self.0);
    }
}

thread_local! {
    static FINITE_CHECKS: std::cell::Cell<bool> = const { std::cell::Cell::new(true) };
}

/// Whether tensor ops scan their outputs for non-finite values (the
/// default). See [`FiniteCheckGuard`].
pub fn finite_checks_active() -> bool {
    FINITE_CHECKS.with(|c| c.get())
}

/// Suspends output finiteness scans on the current thread until dropped.
///
/// The scans are a debugging contract, not part of any kernel's cost; a
/// timing loop that replays a computation already validated on identical
/// inputs can skip them so the measurement covers arithmetic alone.
pub struct FiniteCheckGuard(bool);

impl FiniteCheckGuard {
    pub fn skip() -> Self {
        let prev = finite_checks_active();
        FINITE_CHECKS.with(|c| c.set(false));
        FiniteCheckGuard(prev)
    }
}

impl Drop for FiniteCheckGuard {
    fn drop(&mut self) {
        FINITE_CHECKS.with(|c| c.set(self.0));
    }
}
