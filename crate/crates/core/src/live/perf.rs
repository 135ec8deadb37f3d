//! perf_event_open plumbing: event attributes, per-CPU ring buffers.

use std::ffi::CString;
use std::fs;
use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd, RawFd};
use std::sync::atomic::{AtomicU64, Ordering};

use perf_event_open_sys as sys;
use sys::bindings::{perf_event_attr, perf_event_mmap_page};

use super::decode::{BASE_SAMPLE_TYPE, SAMPLE_CALLCHAIN, SAMPLE_RAW, SAMPLE_REGS_USER};

const PERF_TYPE_SOFTWARE: u32 = 1;
const PERF_TYPE_TRACEPOINT: u32 = 2;
const PERF_COUNT_SW_CPU_CLOCK: u64 = 0;
const PERF_COUNT_SW_DUMMY: u64 = 9;

/// Attributes of one event, independent of where it is opened.
#[derive(Debug, Clone, Default)]
pub struct EventSpec {
    pub type_: u32,
    pub config: u64,
    pub config1: u64,
    pub config2: u64,
    pub sample_period: u64,
    pub extra_sample: u64,
    pub regs_mask: u64,
    pub task: bool,
    pub context_switch: bool,
    /// Count hits in kernel context too. Kernel tracepoints need this.
    pub kernel: bool,
    pub uprobe_path: Option<CString>,
}

impl EventSpec {
    /// Dummy event carrying fork/exit records.
    pub fn task_tracking() -> Self {
        EventSpec {
            type_: PERF_TYPE_SOFTWARE,
            config: PERF_COUNT_SW_DUMMY,
            sample_period: 1,
            task: true,
            ..Default::default()
        }
    }

    pub fn context_switches() -> Self {
        EventSpec {
            type_: PERF_TYPE_SOFTWARE,
            config: PERF_COUNT_SW_DUMMY,
            sample_period: 1,
            context_switch: true,
            ..Default::default()
        }
    }

    pub fn cpu_clock(period_ns: u64) -> Self {
        EventSpec {
            type_: PERF_TYPE_SOFTWARE,
            config: PERF_COUNT_SW_CPU_CLOCK,
            sample_period: period_ns,
            extra_sample: SAMPLE_CALLCHAIN,
            kernel: true,
            ..Default::default()
        }
    }

    pub fn tracepoint(id: u64) -> Self {
        EventSpec {
            type_: PERF_TYPE_TRACEPOINT,
            config: id,
            sample_period: 1,
            extra_sample: SAMPLE_RAW,
            kernel: true,
            ..Default::default()
        }
    }

    pub fn uprobe(
        pmu_type: u32,
        path: CString,
        offset: u64,
        ref_ctr_offset: u64,
        retprobe: bool,
        regs_mask: u64,
    ) -> Self {
        EventSpec {
            type_: pmu_type,
            config: retprobe as u64 | (ref_ctr_offset << 32),
            config2: offset,
            sample_period: 1,
            extra_sample: if regs_mask != 0 { SAMPLE_REGS_USER } else { 0 },
            regs_mask,
            uprobe_path: Some(path),
            ..Default::default()
        }
    }

    pub fn sample_type(&self) -> u64 {
        BASE_SAMPLE_TYPE | self.extra_sample
    }

    fn attr(&self, on_exec: bool, inherit: bool) -> perf_event_attr {
        let mut a = perf_event_attr {
            type_: self.type_,
            size: std::mem::size_of::<perf_event_attr>() as u32,
            config: self.config,
            sample_type: self.sample_type(),
            sample_regs_user: self.regs_mask,
            clockid: libc::CLOCK_MONOTONIC,
            ..Default::default()
        };
        a.__bindgen_anon_1.sample_period = self.sample_period;
        a.__bindgen_anon_3.config1 = match &self.uprobe_path {
            Some(p) => p.as_ptr() as u64,
            None => self.config1,
        };
        a.__bindgen_anon_4.config2 = self.config2;
        a.set_disabled(1);
        a.set_enable_on_exec(on_exec as u64);
        a.set_inherit(inherit as u64);
        a.set_exclude_kernel(!self.kernel as u64);
        a.set_exclude_hv(1);
        a.set_exclude_callchain_kernel(1);
        a.set_sample_id_all(1);
        a.set_use_clockid(1);
        a.set_task(self.task as u64);
        a.set_context_switch(self.context_switch as u64);
        a
    }
}

/// An open perf event.
#[derive(Debug)]
pub struct Event {
    fd: OwnedFd,
    pub id: u64,
}

impl Event {
    /// Opens `spec` for task `pid` on `cpu`. With `inherit` the event
    /// follows descendants. Events on another task switch on when it next
    /// execs.
    pub fn open(spec: &EventSpec, pid: libc::pid_t, cpu: i32, inherit: bool) -> io::Result<Event> {
        let mut attr = spec.attr(pid > 0, inherit);
        // SAFETY: attr is fully initialized; uprobe_path outlives the call.
        let fd = unsafe {
            sys::perf_event_open(
                &mut attr,
                pid,
                cpu,
                -1,
                sys::bindings::PERF_FLAG_FD_CLOEXEC as libc::c_ulong,
            )
        };
        if fd < 0 {
            return Err(io::Error::last_os_error());
        }
        // SAFETY: fd was just returned by the kernel and is owned here.
        let fd = unsafe { OwnedFd::from_raw_fd(fd) };
        let mut id = 0u64;
        // SAFETY: PERF_EVENT_IOC_ID writes one u64.
        if unsafe { sys::ioctls::ID(fd.as_raw_fd(), &mut id) } < 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(Event { fd, id })
    }

    /// Like [`Event::open`], but a sampling event denied kernel access is
    /// retried user-only. The flag reports whether that happened.
    pub fn open_sampling(
        spec: &EventSpec,
        pid: libc::pid_t,
        cpu: i32,
        inherit: bool,
    ) -> io::Result<(Event, bool)> {
        match Event::open(spec, pid, cpu, inherit) {
            Err(e)
                if spec.kernel && matches!(e.raw_os_error(), Some(libc::EACCES | libc::EPERM)) =>
            {
                let user_only = EventSpec {
                    kernel: false,
                    ..spec.clone()
                };
                Event::open(&user_only, pid, cpu, inherit).map(|ev| (ev, true))
            }
            other => other.map(|ev| (ev, false)),
        }
    }

    /// Sends this event's records to `target`'s ring buffer.
    pub fn redirect_to(&self, target: &Event) -> io::Result<()> {
        // SAFETY: both fds are live perf events.
        if unsafe { sys::ioctls::SET_OUTPUT(self.fd.as_raw_fd(), target.fd.as_raw_fd()) } < 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(())
    }

    pub fn raw_fd(&self) -> RawFd {
        self.fd.as_raw_fd()
    }
}

/// Opens `spec` on the calling thread and closes it again.
pub fn try_open_self(spec: &EventSpec) -> io::Result<()> {
    Event::open(spec, 0, -1, false).map(drop)
}

/// Like [`try_open_self`] for a sampling event; see [`Event::open_sampling`].
pub fn try_open_sampling_self(spec: &EventSpec) -> io::Result<bool> {
    Event::open_sampling(spec, 0, -1, false).map(|(_, user_only)| user_only)
}

/// Dynamic PMU type of the uprobe event source.
pub fn uprobe_pmu_type() -> Option<u32> {
    fs::read_to_string("/sys/bus/event_source/devices/uprobe/type")
        .ok()?
        .trim()
        .parse()
        .ok()
}

/// Parses a CPU list such as `0-3,6,8-9`.
pub fn parse_cpu_list(text: &str) -> Option<Vec<u32>> {
    let mut cpus = Vec::new();
    for part in text.trim().split(',').filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u32, u32) = (a.parse().ok()?, b.parse().ok()?);
                if a > b {
                    return None;
                }
                cpus.extend(a..=b);
            }
            None => cpus.push(part.parse().ok()?),
        }
    }
    Some(cpus)
}

pub fn online_cpus() -> io::Result<Vec<u32>> {
    let text = fs::read_to_string("/sys/devices/system/cpu/online")?;
    parse_cpu_list(&text)
        .filter(|c| !c.is_empty())
        .ok_or_else(|| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("bad cpu list `{}`", text.trim()),
            )
        })
}

/// The mmap'd ring buffer of one event.
pub struct RingBuffer {
    base: *mut u8,
    map_len: usize,
    data_offset: usize,
    data_size: usize,
    pub cpu: u32,
    fd: RawFd,
}

// SAFETY: the mapping is owned exclusively by this value; the kernel is the
// only other party and synchronizes through data_head/data_tail.
unsafe impl Send for RingBuffer {}

impl RingBuffer {
    /// Maps `pages` (a power of two) data pages for `event`.
    pub fn map(event: &Event, pages: usize, cpu: u32) -> io::Result<RingBuffer> {
        assert!(pages.is_power_of_two());
        // SAFETY: sysconf has no preconditions.
        let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) } as usize;
        let map_len = page * (pages + 1);
        // SAFETY: mapping a perf fd; the kernel validates length and flags.
        let base = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                map_len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_SHARED,
                event.raw_fd(),
                0,
            )
        };
        if base == libc::MAP_FAILED {
            return Err(io::Error::last_os_error());
        }
        let base = base as *mut u8;
        // SAFETY: the first page is the perf_event_mmap_page header.
        let (data_offset, data_size) = unsafe {
            let meta = base as *const perf_event_mmap_page;
            let off = (*meta).data_offset as usize;
            let size = (*meta).data_size as usize;
            if size == 0 {
                (page, page * pages)
            } else {
                (off, size)
            }
        };
        Ok(RingBuffer {
            base,
            map_len,
            data_offset,
            data_size,
            cpu,
            fd: event.raw_fd(),
        })
    }

    pub fn raw_fd(&self) -> RawFd {
        self.fd
    }

    fn head_tail(&self) -> (&AtomicU64, &AtomicU64) {
        // SAFETY: data_head/data_tail are naturally aligned u64s in the
        // header page and live as long as the mapping.
        unsafe {
            let meta = self.base as *mut perf_event_mmap_page;
            (
                AtomicU64::from_ptr(std::ptr::addr_of_mut!((*meta).data_head)),
                AtomicU64::from_ptr(std::ptr::addr_of_mut!((*meta).data_tail)),
            )
        }
    }

    /// Copies every complete record out of the buffer and hands it to `f`.
    pub fn drain(&mut self, mut f: impl FnMut(&[u8])) {
        let (head_a, tail_a) = self.head_tail();
        let head = head_a.load(Ordering::Acquire);
        let mut tail = tail_a.load(Ordering::Relaxed);
        // SAFETY: the data area spans data_size bytes after data_offset.
        let data =
            unsafe { std::slice::from_raw_parts(self.base.add(self.data_offset), self.data_size) };
        let mut rec = Vec::new();
        while tail < head {
            let start = (tail % self.data_size as u64) as usize;
            let mut hdr = [0u8; 8];
            copy_wrapped(data, start, &mut hdr);
            let size = u16::from_ne_bytes([hdr[6], hdr[7]]) as usize;
            if size < 8 || tail + size as u64 > head {
                break;
            }
            rec.resize(size, 0);
            copy_wrapped(data, start, &mut rec);
            f(&rec);
            tail += size as u64;
        }
        tail_a.store(tail, Ordering::Release);
    }
}

fn copy_wrapped(data: &[u8], start: usize, out: &mut [u8]) {
    let first = (data.len() - start).min(out.len());
    out[..first].copy_from_slice(&data[start..start + first]);
    let rest = out.len() - first;
    out[first..].copy_from_slice(&data[..rest]);
}

impl Drop for RingBuffer {
    fn drop(&mut self) {
        // SAFETY: unmapping exactly what map() mapped.
        unsafe {
            libc::munmap(self.base as *mut libc::c_void, self.map_len);
        }
    }
}
