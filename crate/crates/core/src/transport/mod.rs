//! Publish/subscribe message plane.
//!
//! Two interchangeable brokers sit behind [`BrokerHandle`]: the in-process
//! [`MemoryBroker`] and a TCP broker speaking newline-delimited JSON frames
//! ([`tcp`]). Routing keys match by exact string.

mod codec;
mod memory;
pub mod tcp;

pub use codec::{decode_record, encode_record, CodecError, TimestampedRecord};
pub use memory::{MemoryBroker, MemorySubscription, SubQueue};

use crate::timebase::Duration;

pub const DEFAULT_MAX_FRAME: usize = 1 << 20;
pub const DEFAULT_RETENTION_CAP: usize = 100_000;
pub const DEFAULT_TCP_ADDR: &str = "127.0.0.1:5673";

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("broker handle is closed")]
    Closed,
    #[error("payload of {size} bytes exceeds the {max} byte frame limit")]
    FrameTooLarge { size: usize, max: usize },
    #[error("invalid routing key {0:?}")]
    InvalidRoutingKey(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("broker rejected request: {0}")]
    Remote(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BrokerConfig {
    pub max_frame: usize,
    /// Per-subscription (and per-key backlog) capacity; overflow drops the oldest.
    pub retention_cap: usize,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            max_frame: DEFAULT_MAX_FRAME,
            retention_cap: DEFAULT_RETENTION_CAP,
        }
    }
}

/// A routed message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    routing_key: String,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn new(routing_key: impl Into<String>, payload: Vec<u8>) -> Result<Self, TransportError> {
        let routing_key = routing_key.into();
        validate_routing_key(&routing_key)?;
        Ok(Envelope {
            routing_key,
            payload,
        })
    }

    pub fn record(routing_key: &str, rec: &TimestampedRecord) -> Result<Self, TransportError> {
        Envelope::new(routing_key, encode_record(rec)?)
    }

    pub fn routing_key(&self) -> &str {
        &self.routing_key
    }

    pub fn decode(&self) -> Result<TimestampedRecord, CodecError> {
        decode_record(&self.payload)
    }
}

pub fn validate_routing_key(key: &str) -> Result<(), TransportError> {
    if key.is_empty() || key.chars().any(char::is_control) {
        return Err(TransportError::InvalidRoutingKey(key.to_string()));
    }
    Ok(())
}

/// A connection to some broker implementation.
///
/// Safe for concurrent publishing. Publishing on a closed handle fails.
pub trait BrokerHandle: Send + Sync {
    fn publish(&self, env: Envelope) -> Result<(), TransportError>;

    fn subscribe(&self, routing_key: &str) -> Result<Box<dyn Subscription>, TransportError>;

    fn close(&self);

    fn is_closed(&self) -> bool;
}

/// The receiving end of one routing key. Consumed by one thread at a time.
pub trait Subscription: Send {
    fn routing_key(&self) -> &str;

    /// Returns up to `max_count` pending envelopes immediately when any are
    /// pending, otherwise waits up to `deadline` for one to arrive.
    fn poll(&mut self, max_count: usize, deadline: Duration) -> Result<Vec<Envelope>, TransportError>;

    fn pending(&self) -> usize;

    /// Envelopes discarded because the retention cap was exceeded.
    fn dropped(&self) -> u64;
}
