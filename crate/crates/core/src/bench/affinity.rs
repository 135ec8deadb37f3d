//! CPU affinity for benchmark children.

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PinError {
    #[error("cpu affinity control is unavailable: {0}")]
    PinUnsupported(String),
    #[error("core {core} is not in this process's allowed set {allowed:?}")]
    InvalidCore { core: usize, allowed: Vec<usize> },
}

/// A validated core that benchmark children will be restricted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorePin {
    core: usize,
}

impl CorePin {
    pub fn core(&self) -> usize {
        self.core
    }
}

/// Checks that `core` can be used for pinning. Children spawned with the
/// returned [`CorePin`] are restricted to exactly that core.
pub fn pin_to_core(core: usize) -> Result<CorePin, PinError> {
    let allowed = current_affinity().map_err(|e| PinError::PinUnsupported(e.to_string()))?;
    if !allowed.contains(&core) {
        return Err(PinError::InvalidCore { core, allowed });
    }
    Ok(CorePin { core })
}

#[cfg(target_os = "linux")]
mod imp {
    use std::io;
    use std::mem;

    const SET_SIZE: usize = mem::size_of::<libc::cpu_set_t>();

    pub fn get(pid: libc::pid_t) -> io::Result<Vec<usize>> {
        // SAFETY: cpu_set_t is plain data; the kernel fills at most SET_SIZE bytes.
        let mask = unsafe {
            let mut mask: libc::cpu_set_t = mem::zeroed();
            if libc::sched_getaffinity(pid, SET_SIZE, &mut mask) != 0 {
                return Err(io::Error::last_os_error());
            }
            mask
        };
        Ok((0..libc::CPU_SETSIZE as usize)
            .filter(|&i| unsafe { libc::CPU_ISSET(i, &mask) })
            .collect())
    }

    /// Restricts the calling thread to `cores`.
    pub fn set_current(cores: &[usize]) -> io::Result<()> {
        // SAFETY: as above; CPU_SET bounds are checked against CPU_SETSIZE first.
        unsafe {
            let mut mask: libc::cpu_set_t = mem::zeroed();
            for &core in cores {
                if core >= libc::CPU_SETSIZE as usize {
                    return Err(io::Error::from_raw_os_error(libc::EINVAL));
                }
                libc::CPU_SET(core, &mut mask);
            }
            if libc::sched_setaffinity(0, SET_SIZE, &mask) != 0 {
                return Err(io::Error::last_os_error());
            }
        }
        Ok(())
    }
}

#[cfg(not(target_os = "linux"))]
mod imp {
    use std::io;

    pub fn get(_pid: i32) -> io::Result<Vec<usize>> {
        Err(io::Error::new(
            io::ErrorKind::Unsupported,
            "no affinity control on this platform",
        ))
    }

    pub fn set_current(_cores: &[usize]) -> io::Result<()> {
        Err(io::Error::new(
            io::ErrorKind::Unsupported,
            "no affinity control on this platform",
        ))
    }
}

/// Cores the current process may run on.
pub fn current_affinity() -> io::Result<Vec<usize>> {
    imp::get(0)
}

/// Cores process `pid` may run on.
pub fn affinity_of(pid: u32) -> io::Result<Vec<usize>> {
    imp::get(pid as _)
}

/// Pins the calling thread to one core until dropped, then restores its
/// previous set. Children spawned meanwhile inherit the pin.
pub(crate) struct ThreadPin {
    previous: Vec<usize>,
}

impl ThreadPin {
    pub(crate) fn new(pin: CorePin) -> io::Result<Self> {
        let previous = imp::get(0)?;
        imp::set_current(&[pin.core])?;
        Ok(ThreadPin { previous })
    }
}

impl Drop for ThreadPin {
    fn drop(&mut self) {
        if let Err(e) = imp::set_current(&self.previous) {
            log::warn!("could not restore cpu affinity: {e}");
        }
    }
}
