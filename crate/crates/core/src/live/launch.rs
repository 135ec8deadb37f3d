//! Starting a command held before `execve` until tracing is attached.
//!
//! `std::process::Command` cannot be used: it returns only after the exec
//! has happened. Here the forked child blocks on a pipe read, the recorder
//! attaches to its pid, then releases it by writing one byte. A second
//! close-on-exec pipe reports a failed `execve` back to the parent.

use std::ffi::{CString, OsStr, OsString};
use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::os::unix::ffi::{OsStrExt, OsStringExt};
use std::path::{Path, PathBuf};

fn pipe() -> io::Result<(OwnedFd, OwnedFd)> {
    let mut fds = [0; 2];
    // SAFETY: fds has room for the two descriptors pipe2 writes.
    if unsafe { libc::pipe2(fds.as_mut_ptr(), libc::O_CLOEXEC) } != 0 {
        return Err(io::Error::last_os_error());
    }
    // SAFETY: both fds are fresh and owned by us.
    unsafe { Ok((OwnedFd::from_raw_fd(fds[0]), OwnedFd::from_raw_fd(fds[1]))) }
}

fn cstring(s: &OsStr) -> io::Result<CString> {
    CString::new(s.as_bytes())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "argument contains NUL"))
}

/// Looks `program` up in `path_var` the way `execvp` would.
pub fn resolve_program(program: &OsStr, path_var: Option<&OsStr>) -> io::Result<PathBuf> {
    let p = Path::new(program);
    if program.as_bytes().contains(&b'/') {
        return Ok(p.to_path_buf());
    }
    let search = path_var
        .map(|v| v.to_os_string())
        .unwrap_or_else(|| "/usr/local/bin:/usr/bin:/bin".into());
    for dir in std::env::split_paths(&search) {
        let cand = dir.join(p);
        let Ok(c) = cstring(cand.as_os_str()) else {
            continue;
        };
        // SAFETY: c is a valid NUL-terminated path.
        if unsafe { libc::access(c.as_ptr(), libc::X_OK) } == 0 && cand.is_file() {
            return Ok(cand);
        }
    }
    Err(io::Error::new(
        io::ErrorKind::NotFound,
        format!("`{}` not found in PATH", program.to_string_lossy()),
    ))
}

/// A forked child blocked before its `execve`.
#[derive(Debug)]
pub struct HeldChild {
    pid: libc::pid_t,
    gate: Option<OwnedFd>,
    exec_status: OwnedFd,
}

/// A released child that has exec'd successfully.
#[derive(Debug)]
pub struct RunningChild {
    pid: libc::pid_t,
}

impl HeldChild {
    /// Forks a child that will exec `argv` once released. Everything that
    /// allocates happens before the fork.
    pub fn spawn(argv: &[OsString]) -> io::Result<HeldChild> {
        let program = argv
            .first()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "empty command"))?;
        let path =
            cstring(resolve_program(program, std::env::var_os("PATH").as_deref())?.as_os_str())?;
        let args: Vec<CString> = argv.iter().map(|a| cstring(a)).collect::<io::Result<_>>()?;
        let mut arg_ptrs: Vec<*const libc::c_char> = args.iter().map(|a| a.as_ptr()).collect();
        arg_ptrs.push(std::ptr::null());
        let env: Vec<CString> = std::env::vars_os()
            .map(|(k, v)| {
                let mut kv = k.into_vec();
                kv.push(b'=');
                kv.extend(v.into_vec());
                CString::new(kv).map_err(|_| {
                    io::Error::new(io::ErrorKind::InvalidInput, "environment contains NUL")
                })
            })
            .collect::<io::Result<_>>()?;
        let mut env_ptrs: Vec<*const libc::c_char> = env.iter().map(|e| e.as_ptr()).collect();
        env_ptrs.push(std::ptr::null());

        let (gate_r, gate_w) = pipe()?;
        let (status_r, status_w) = pipe()?;

        // SAFETY: the child only calls async-signal-safe functions (close,
        // read, execve, write, _exit) on data prepared above.
        let pid = unsafe { libc::fork() };
        if pid < 0 {
            return Err(io::Error::last_os_error());
        }
        if pid == 0 {
            unsafe {
                libc::close(gate_w.as_raw_fd());
                libc::close(status_r.as_raw_fd());
                let mut b = 0u8;
                let n = loop {
                    let n = libc::read(gate_r.as_raw_fd(), (&mut b as *mut u8).cast(), 1);
                    if n >= 0 || *libc::__errno_location() != libc::EINTR {
                        break n;
                    }
                };
                if n != 1 {
                    libc::_exit(125);
                }
                libc::execve(path.as_ptr(), arg_ptrs.as_ptr(), env_ptrs.as_ptr());
                let err = (*libc::__errno_location()).to_ne_bytes();
                libc::write(status_w.as_raw_fd(), err.as_ptr().cast(), err.len());
                libc::_exit(127);
            }
        }
        drop(gate_r);
        drop(status_w);
        Ok(HeldChild {
            pid,
            gate: Some(gate_w),
            exec_status: status_r,
        })
    }

    pub fn pid(&self) -> u32 {
        self.pid as u32
    }

    /// Lets the child exec. Fails if `execve` failed, after reaping it.
    pub fn release(mut self) -> io::Result<RunningChild> {
        let gate = self.gate.take().expect("released once");
        // SAFETY: writing one byte from a valid buffer.
        let n = unsafe { libc::write(gate.as_raw_fd(), [1u8].as_ptr().cast(), 1) };
        if n != 1 {
            let err = io::Error::last_os_error();
            drop(gate);
            reap(self.pid).ok();
            return Err(err);
        }
        drop(gate);
        let mut buf = [0u8; 4];
        let mut got = 0;
        while got < buf.len() {
            // SAFETY: reading into the unfilled tail of buf.
            let n = unsafe {
                libc::read(
                    self.exec_status.as_raw_fd(),
                    buf[got..].as_mut_ptr().cast(),
                    buf.len() - got,
                )
            };
            if n < 0 {
                let err = io::Error::last_os_error();
                if err.kind() == io::ErrorKind::Interrupted {
                    continue;
                }
                return Err(err);
            }
            if n == 0 {
                break;
            }
            got += n as usize;
        }
        let pid = self.pid;
        self.pid = -1;
        if got == 0 {
            return Ok(RunningChild { pid });
        }
        reap(pid).ok();
        Err(io::Error::from_raw_os_error(i32::from_ne_bytes(buf)))
    }
}

impl Drop for HeldChild {
    /// Closing the gate without releasing makes the child exit without
    /// running anything.
    fn drop(&mut self) {
        if self.pid > 0 {
            self.gate.take();
            reap(self.pid).ok();
        }
    }
}

fn reap(pid: libc::pid_t) -> io::Result<i32> {
    let mut status = 0;
    loop {
        // SAFETY: waiting on our own child.
        let r = unsafe { libc::waitpid(pid, &mut status, 0) };
        if r == pid {
            break;
        }
        let err = io::Error::last_os_error();
        if err.kind() != io::ErrorKind::Interrupted {
            return Err(err);
        }
    }
    Ok(if libc::WIFEXITED(status) {
        libc::WEXITSTATUS(status)
    } else if libc::WIFSIGNALED(status) {
        128 + libc::WTERMSIG(status)
    } else {
        -1
    })
}

impl RunningChild {
    pub fn pid(&self) -> u32 {
        self.pid as u32
    }

    /// Waits for exit. Signal deaths map to `128 + signal`.
    pub fn wait(self) -> io::Result<i32> {
        reap(self.pid)
    }
}
