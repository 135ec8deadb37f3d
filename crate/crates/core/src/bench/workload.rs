use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("invalid range: need 1 <= lo <= hi and iters >= 1 (lo={lo}, hi={hi}, iters={iters})")]
    InvalidRange { lo: u64, hi: u64, iters: u32 },
}

/// Newton-Raphson square roots of every integer in `lo..=hi`, starting
/// from `x = n` and running exactly `iters` steps of `x = (x + n/x) / 2`.
/// Returns the sum of the final approximations.
#[inline(never)]
pub fn self_workload(lo: u64, hi: u64, iters: u32) -> Result<f64, WorkloadError> {
    if lo == 0 || lo > hi || iters == 0 {
        return Err(WorkloadError::InvalidRange { lo, hi, iters });
    }
    let mut checksum = 0.0f64;
    for n in lo..=hi {
        let target = n as f64;
        let mut x = target;
        for _ in 0..iters {
            x = std::hint::black_box((x + target / x) / 2.0);
        }
        checksum += x;
    }
    Ok(checksum)
}
