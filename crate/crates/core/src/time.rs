//! Simulated time in nanoseconds since the start of a run.

pub type SimTime = u64;

pub const NANOS_PER_MICRO: SimTime = 1_000;
pub const NANOS_PER_MILLI: SimTime = 1_000_000;
pub const NANOS_PER_SEC: SimTime = 1_000_000_000;

pub const fn millis(ms: u64) -> SimTime {
    ms * NANOS_PER_MILLI
}

pub const fn micros(us: u64) -> SimTime {
    us * NANOS_PER_MICRO
}

pub fn from_millis_f64(ms: f64) -> SimTime {
    if ms <= 0.0 {
        0
    } else {
        (ms * NANOS_PER_MILLI as f64).round() as SimTime
    }
}

pub fn as_millis_f64(t: SimTime) -> f64 {
    t as f64 / NANOS_PER_MILLI as f64
}
