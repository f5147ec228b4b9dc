//! Relative contrastive self-supervised learning for 3-axis accelerometry.

pub mod augment;
pub mod clirun;
pub mod dataio;
pub mod distnet;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod ndtensor;
pub mod relconloss;
pub mod sampler;

pub use error::{Error, Result};

/// Keeps freed tape buffers in the process heap instead of returning them to
/// the OS after every step. Training allocates the same multi-megabyte
/// buffers each step, and on glibc the default trim/mmap thresholds turn that
/// into page-fault churn costing ~40% of wall time. No-op elsewhere.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        const BYTES: libc::c_int = 1 << 30;
        // SAFETY: mallopt only adjusts allocator tunables; both options are
        // valid for glibc and take a byte count.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, BYTES);
            libc::mallopt(libc::M_TRIM_THRESHOLD, BYTES);
        }
    }
}
