//! Classical resource usage (CRU) sampling.

use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("CRU trace is empty")]
    Empty,
}

/// Step-interpolated `(seconds since start, value)` trace.
#[derive(Debug, Clone, PartialEq)]
pub struct CruTrace {
    points: Vec<(f64, f64)>,
}

impl CruTrace {
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self, TraceError> {
        if points.is_empty() {
            return Err(TraceError::Empty);
        }
        for (i, &(t, v)) in points.iter().enumerate() {
            if !t.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(TraceError::Parse {
                    line: i + 1,
                    message: format!("point ({t}, {v}) needs a finite time and a value in [0, 1]"),
                });
            }
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(CruTrace { points })
    }

    /// One `time,value` pair per line; blank lines and `#` comments are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parsed = line
                .split_once(',')
                .and_then(|(t, v)| Some((t.trim().parse().ok()?, v.trim().parse().ok()?)));
            points.push(parsed.ok_or_else(|| TraceError::Parse {
                line: i + 1,
                message: format!("expected `time,value`, got {line:?}"),
            })?);
        }
        Self::new(points)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Value of the last point at or before `t`; the first value before the
    /// trace starts.
    pub fn value_at(&self, t: f64) -> f64 {
        let idx = self.points.partition_point(|&(pt, _)| pt <= t);
        self.points[idx.saturating_sub(1)].1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CruMode {
    Measured,
    Scripted(CruTrace),
}

/// Process CPU time (user + system).
fn process_cpu_time() -> Option<Duration> {
    let mut usage = std::mem::MaybeUninit::<libc::rusage>::uninit();
    // SAFETY: getrusage writes a full rusage struct on success.
    let rc = unsafe { libc::getrusage(libc::RUSAGE_SELF, usage.as_mut_ptr()) };
    if rc != 0 {
        return None;
    }
    let u = unsafe { usage.assume_init() };
    let tv = |t: libc::timeval| Duration::new(t.tv_sec as u64, (t.tv_usec as u32) * 1000);
    Some(tv(u.ru_utime) + tv(u.ru_stime))
}

/// Produces one CRU sample per call.
///
/// Measured mode reports the busy fraction of the process since the
/// previous call, normalized by the number of cores and smoothed by an
/// exponentially weighted moving average whose half-life is the heartbeat
/// period.
#[derive(Debug)]
pub struct CruMeter {
    mode: CruMode,
    half_life: Duration,
    started: Instant,
    cores: f64,
    last: Option<(Instant, Duration)>,
    value: f64,
    stale: bool,
}

impl CruMeter {
    pub fn new(mode: CruMode, half_life: Duration) -> Self {
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get()) as f64;
        CruMeter {
            mode,
            half_life,
            started: Instant::now(),
            cores,
            last: None,
            value: 0.0,
            stale: false,
        }
    }

    /// True when the last measurement failed and the previous value was
    /// repeated.
    pub fn is_stale(&self) -> bool {
        self.stale
    }

    pub fn sample(&mut self) -> f64 {
        let now = Instant::now();
        match &self.mode {
            CruMode::Scripted(trace) => trace.value_at(now.duration_since(self.started).as_secs_f64()),
            CruMode::Measured => {
                let Some(cpu) = process_cpu_time() else {
                    if !self.stale {
                        log::warn!("CPU usage unavailable; repeating last CRU value");
                    }
                    self.stale = true;
                    return self.value;
                };
                self.stale = false;
                if let Some((t0, c0)) = self.last {
                    let wall = now.duration_since(t0).as_secs_f64();
                    if wall > 0.0 {
                        let busy = (cpu.saturating_sub(c0).as_secs_f64() / (wall * self.cores)).clamp(0.0, 1.0);
                        let w = 1.0 - 0.5f64.powf(wall / self.half_life.as_secs_f64().max(1e-9));
                        self.value += w * (busy - self.value);
                    }
                }
                self.last = Some((now, cpu));
                self.value
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_interpolation() {
        let t = CruTrace::parse("# t,v\n0,0.1\n10,0.9\n").unwrap();
        assert_eq!(t.value_at(5.0), 0.1);
        assert_eq!(t.value_at(10.0), 0.9);
        assert_eq!(t.value_at(100.0), 0.9);
        let late = CruTrace::new(vec![(3.0, 0.4), (6.0, 0.2)]).unwrap();
        assert_eq!(late.value_at(0.0), 0.4);
        assert!(CruTrace::parse("").is_err());
        assert!(CruTrace::parse("1;2").is_err());
        assert!(CruTrace::parse("0,1.5").is_err());
    }

    #[test]
    fn measured_value_is_a_fraction() {
        let mut m = CruMeter::new(CruMode::Measured, Duration::from_millis(100));
        assert_eq!(m.sample(), 0.0);
        std::thread::sleep(Duration::from_millis(50));
        let v = m.sample();
        assert!((0.0..=1.0).contains(&v), "CRU {v}");
        assert!(!m.is_stale());
    }
}
