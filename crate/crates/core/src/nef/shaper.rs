use std::time::Duration;

/// Per-flow token bucket in virtual time.
///
/// Tokens are counted in nanobits so that an integer bits-per-second rate
/// refills an integer amount every nanosecond and no rounding ever creeps in.
/// The bucket holds one averaging window's worth of traffic. Packets leave in
/// FIFO order; a packet waits until the bucket holds its size (or the whole
/// bucket, for packets larger than the bucket) and may then drive the level
/// negative.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    rate_bps: u64,
    capacity: i128,
    tokens: i128,
    updated: Duration,
    last_departure: Duration,
}

const NANOBITS_PER_BYTE: i128 = 8 * 1_000_000_000;

impl TokenBucket {
    pub fn new(rate_kbps: f64, window_ms: u32, start_empty: bool) -> Self {
        let rate_bps = ((rate_kbps * 1000.0).round() as u64).max(1);
        // rate [bit/s] * window [ms] / 1000 = bits; * 1e9 for nanobits.
        let capacity = rate_bps as i128 * window_ms as i128 * 1_000_000;
        Self {
            rate_bps,
            capacity,
            tokens: if start_empty { 0 } else { capacity },
            updated: Duration::ZERO,
            last_departure: Duration::ZERO,
        }
    }

    pub fn capacity_bytes(&self) -> f64 {
        self.capacity as f64 / NANOBITS_PER_BYTE as f64
    }

    fn refill(&mut self, now: Duration) {
        if now > self.updated {
            let elapsed = (now - self.updated).as_nanos() as i128;
            self.tokens = (self.tokens + elapsed * self.rate_bps as i128).min(self.capacity);
            self.updated = now;
        }
    }

    /// Returns the time the packet leaves the shaper.
    pub fn admit(&mut self, send: Duration, size_bytes: u32) -> Duration {
        let start = send.max(self.last_departure);
        self.refill(start);
        let size = size_bytes as i128 * NANOBITS_PER_BYTE;
        let need = size.min(self.capacity);
        let mut departure = start;
        if self.tokens < need {
            let missing = need - self.tokens;
            let rate = self.rate_bps as i128;
            let wait_ns = (missing + rate - 1) / rate;
            departure = start + Duration::from_nanos(wait_ns as u64);
            self.refill(departure);
        }
        self.tokens -= size;
        self.last_departure = departure;
        departure
    }
}
