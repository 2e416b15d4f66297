use serde::{Deserialize, Serialize};

/// Reader-side accounting for one streaming request.
///
/// The reader consumes one token every `1/rate` seconds starting at the
/// first token. A consume that finds the buffer empty stalls; the stall ends
/// the instant the next token is generated, and the gap is accrued as
/// rebuffer time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientBuffer {
    pub generated: u32,
    pub consumed: u32,
    pub output_len: u32,
    /// Seconds between consecutive reads.
    pub period: f64,
    /// Absolute time of the first token, once generated.
    pub first_token_time: Option<f64>,
    pub rebuffer_accrued: f64,
    /// Scheduled time of the next read, if any remain.
    pub next_consume_time: Option<f64>,
    /// Scheduled time of a read that found the buffer empty.
    pub stalled_since: Option<f64>,
}

/// Result of appending a generated token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenAppended {
    /// Occupancy right after the append.
    pub buffer_after: u32,
    /// The reader should be woken at the current instant (first token or a
    /// stalled read).
    pub wake_reader: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConsumeOutcome {
    Consumed { next: Option<f64> },
    Stalled,
}

impl ClientBuffer {
    pub fn new(output_len: u32, rate: f64) -> Self {
        Self {
            generated: 0,
            consumed: 0,
            output_len,
            period: 1.0 / rate,
            first_token_time: None,
            rebuffer_accrued: 0.0,
            next_consume_time: None,
            stalled_since: None,
        }
    }

    pub fn occupancy(&self) -> u32 {
        self.generated - self.consumed
    }

    pub fn generation_complete(&self) -> bool {
        self.generated >= self.output_len
    }

    pub fn reading_complete(&self) -> bool {
        self.consumed >= self.output_len
    }

    pub fn append_token(&mut self, now: f64) -> TokenAppended {
        debug_assert!(self.generated < self.output_len);
        self.generated += 1;
        let mut wake_reader = self.stalled_since.is_some();
        if self.first_token_time.is_none() {
            self.first_token_time = Some(now);
            self.next_consume_time = Some(now);
            wake_reader = true;
        }
        TokenAppended {
            buffer_after: self.occupancy(),
            wake_reader,
        }
    }

    /// Handles a read at `now`, which is either the scheduled read time or
    /// the generation instant that ends a stall.
    pub fn consume(&mut self, now: f64) -> ConsumeOutcome {
        if self.generated > self.consumed {
            if let Some(since) = self.stalled_since.take() {
                self.rebuffer_accrued += now - since;
            }
            self.consumed += 1;
            let next = (self.consumed < self.output_len).then_some(now + self.period);
            self.next_consume_time = next;
            ConsumeOutcome::Consumed { next }
        } else {
            if self.stalled_since.is_none() {
                self.stalled_since = Some(now);
            }
            ConsumeOutcome::Stalled
        }
    }

    /// Seconds until the buffer empties if nothing more is generated.
    pub fn drain_time(&self) -> f64 {
        self.occupancy() as f64 * self.period
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_start_at_first_token() {
        let mut b = ClientBuffer::new(3, 10.0);
        let a = b.append_token(1.0);
        assert_eq!(a.buffer_after, 1);
        assert!(a.wake_reader);
        assert_eq!(b.consume(1.0), ConsumeOutcome::Consumed { next: Some(1.1) });
        assert_eq!(b.occupancy(), 0);
    }

    #[test]
    fn stall_accrues_until_generation() {
        let mut b = ClientBuffer::new(2, 10.0);
        b.append_token(0.0);
        b.consume(0.0);
        assert_eq!(b.consume(0.1), ConsumeOutcome::Stalled);
        let a = b.append_token(0.35);
        assert!(a.wake_reader);
        assert_eq!(b.consume(0.35), ConsumeOutcome::Consumed { next: None });
        assert!((b.rebuffer_accrued - 0.25).abs() < 1e-12);
        assert!(b.reading_complete());
    }
}
