//! The bridge unit's incoming pipeline: a bounded, time-ordered queue of
//! decoded records and the two ways of filling it.
//!
//! * Unthreaded: the step thread itself pulls from the subscription
//!   ([`fill_unthreaded`]).
//! * Threaded: a consumer keeps draining the subscription into the queue in
//!   the background ([`spawn_consumer_thread`], or a logical-clock pump in
//!   virtual mode, see [`crate::clock`]).

use std::collections::VecDeque;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Instant;

use log::{error, warn};

use crate::clock::Clock;
use crate::timebase::{Duration, ValueKind, VariableDecl, Direction};
use crate::transport::{CodecError, Envelope, Subscription, TimestampedRecord, TransportError};

pub const DEFAULT_QUEUE_CAPACITY: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IngestMode {
    Unthreaded,
    Threaded,
}

impl fmt::Display for IngestMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IngestMode::Unthreaded => "unthreaded",
            IngestMode::Threaded => "threaded",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("message on {key:?}: {source}")]
    Decode {
        key: String,
        #[source]
        source: CodecError,
    },
    #[error("record {seqno}: {reason}")]
    Schema { seqno: u64, reason: String },
    #[error("a consumer is already attached to this queue")]
    AlreadyStarted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OfferOutcome {
    Accepted,
    DroppedOldest,
    RejectedOutOfOrder,
}

#[derive(Debug, Default)]
struct QueueInner {
    records: VecDeque<TimestampedRecord>,
    /// Highest data timestamp ever accepted.
    high_water: Option<i64>,
    offered: u64,
    dropped: u64,
    rejected: u64,
    consumed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct QueueStats {
    pub len: usize,
    pub offered: u64,
    pub dropped: u64,
    pub rejected: u64,
    pub consumed: u64,
}

/// Bounded queue of records in non-decreasing data-timestamp order.
///
/// Overflow evicts the oldest record. A record older than anything already
/// accepted is rejected. One producer and one consumer may use it
/// concurrently.
#[derive(Debug)]
pub struct IncomingQueue {
    inner: Mutex<QueueInner>,
    arrived: Condvar,
    capacity: usize,
    consumer_attached: AtomicBool,
}

impl IncomingQueue {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        IncomingQueue {
            inner: Mutex::new(QueueInner::default()),
            arrived: Condvar::new(),
            capacity,
            consumer_attached: AtomicBool::new(false),
        }
    }

    fn lock(&self) -> MutexGuard<'_, QueueInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn offer(&self, rec: TimestampedRecord) -> OfferOutcome {
        let mut inner = self.lock();
        inner.offered += 1;
        if inner.high_water.is_some_and(|hw| rec.data_ts < hw) {
            inner.rejected += 1;
            error!(
                "out-of-order record rejected: seqno {} at {} ns is older than {} ns",
                rec.seqno,
                rec.data_ts,
                inner.high_water.unwrap_or_default()
            );
            drop(inner);
            self.arrived.notify_all();
            return OfferOutcome::RejectedOutOfOrder;
        }
        inner.high_water = Some(rec.data_ts);
        inner.records.push_back(rec);
        let outcome = if inner.records.len() > self.capacity {
            inner.records.pop_front();
            inner.dropped += 1;
            if inner.dropped.is_power_of_two() {
                warn!(
                    "incoming queue over capacity {}; {} records dropped so far",
                    self.capacity, inner.dropped
                );
            }
            OfferOutcome::DroppedOldest
        } else {
            OfferOutcome::Accepted
        };
        drop(inner);
        self.arrived.notify_all();
        outcome
    }

    pub fn len(&self) -> usize {
        self.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> QueueStats {
        let inner = self.lock();
        QueueStats {
            len: inner.records.len(),
            offered: inner.offered,
            dropped: inner.dropped,
            rejected: inner.rejected,
            consumed: inner.consumed,
        }
    }

    pub fn dropped_count(&self) -> u64 {
        self.lock().dropped
    }

    pub fn snapshot(&self) -> Vec<TimestampedRecord> {
        self.lock().records.iter().cloned().collect()
    }

    /// Runs `f` with exclusive access to the buffered records. The view only
    /// allows removal from the front, so ordering cannot be broken.
    pub fn with_view<R>(&self, f: impl FnOnce(&mut QueueView<'_>) -> R) -> R {
        let mut inner = self.lock();
        let mut view = QueueView { inner: &mut inner };
        f(&mut view)
    }

    /// Blocks until more than `seen` records have been offered in total or
    /// `wait` elapses.
    pub fn wait_for_offer(&self, seen: u64, wait: Duration) {
        let deadline = Instant::now() + wait.to_std();
        let mut inner = self.lock();
        while inner.offered <= seen {
            let now = Instant::now();
            if now >= deadline {
                return;
            }
            inner = self
                .arrived
                .wait_timeout(inner, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    pub(crate) fn attach_consumer(&self) -> Result<(), IngestError> {
        if self.consumer_attached.swap(true, Ordering::SeqCst) {
            return Err(IngestError::AlreadyStarted);
        }
        Ok(())
    }

    pub(crate) fn detach_consumer(&self) {
        self.consumer_attached.store(false, Ordering::SeqCst);
    }
}

pub struct QueueView<'a> {
    inner: &'a mut QueueInner,
}

impl QueueView<'_> {
    pub fn records(&self) -> &VecDeque<TimestampedRecord> {
        &self.inner.records
    }

    /// Removes the first `n` records and returns the last one removed.
    pub fn consume_front(&mut self, n: usize) -> Option<TimestampedRecord> {
        let n = n.min(self.inner.records.len());
        let mut last = None;
        for _ in 0..n {
            last = self.inner.records.pop_front();
        }
        self.inner.consumed += n as u64;
        last
    }
}

/// Decoding plus validation of incoming payloads against the declared
/// output variables and the scenario epoch.
#[derive(Debug, Clone, Default)]
pub struct RecordSchema {
    required: Vec<(String, ValueKind)>,
    epoch: i64,
}

impl RecordSchema {
    pub fn new(variables: &[VariableDecl], epoch: i64) -> Self {
        RecordSchema {
            required: variables
                .iter()
                .filter(|v| v.direction == Direction::Output)
                .map(|v| (v.name.clone(), v.kind))
                .collect(),
            epoch,
        }
    }

    pub fn decode(&self, env: &Envelope) -> Result<TimestampedRecord, IngestError> {
        let rec = env.decode().map_err(|source| IngestError::Decode {
            key: env.routing_key().to_string(),
            source,
        })?;
        if rec.data_ts < self.epoch {
            return Err(IngestError::Schema {
                seqno: rec.seqno,
                reason: format!(
                    "data timestamp {} ns precedes the scenario epoch {} ns",
                    rec.data_ts, self.epoch
                ),
            });
        }
        for (name, kind) in &self.required {
            match rec.values.get(name) {
                None => {
                    return Err(IngestError::Schema {
                        seqno: rec.seqno,
                        reason: format!("missing output {name}"),
                    })
                }
                Some(v) if v.kind() != *kind => {
                    return Err(IngestError::Schema {
                        seqno: rec.seqno,
                        reason: format!("output {name} is {} but declared {kind}", v.kind()),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(rec)
    }
}

/// Pulls from `sub` into `q`, one envelope at a time, until `stop(q)` holds
/// or the clock reaches `deadline`. Waits for arrivals in slices of at most
/// `slice`. Returns the number of records offered.
pub fn fill_unthreaded(
    q: &IncomingQueue,
    sub: &mut dyn Subscription,
    schema: &RecordSchema,
    clock: &dyn Clock,
    stop: &dyn Fn(&IncomingQueue) -> bool,
    deadline: Duration,
    slice: Duration,
) -> Result<usize, IngestError> {
    let mut ingested = 0;
    loop {
        if stop(q) {
            return Ok(ingested);
        }
        let now = clock.now();
        let wait = if now >= deadline {
            Duration::ZERO
        } else {
            slice.min(deadline.saturating_sub(now))
        };
        let batch = clock.poll(sub, 1, wait)?;
        if batch.is_empty() {
            if clock.now() >= deadline {
                return Ok(ingested);
            }
            continue;
        }
        for env in batch {
            q.offer(schema.decode(&env)?);
            ingested += 1;
        }
    }
}

/// Drains everything currently pending on `sub` into `q` without waiting.
/// Decode failures are reported through `errors` and do not stop the drain.
pub fn pump(
    q: &IncomingQueue,
    sub: &mut dyn Subscription,
    schema: &RecordSchema,
    errors: &Sender<IngestError>,
) -> Result<usize, TransportError> {
    let mut n = 0;
    loop {
        let batch = sub.poll(256, Duration::ZERO)?;
        if batch.is_empty() {
            return Ok(n);
        }
        for env in batch {
            match schema.decode(&env) {
                Ok(rec) => {
                    q.offer(rec);
                    n += 1;
                }
                Err(e) => {
                    let _ = errors.send(e);
                }
            }
        }
    }
}

/// Handle to a background consumer. Shutting down is idempotent.
pub struct ConsumerHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    errors: Receiver<IngestError>,
    queue: Arc<IncomingQueue>,
}

impl ConsumerHandle {
    pub(crate) fn new(
        stop: Arc<AtomicBool>,
        thread: Option<JoinHandle<()>>,
        errors: Receiver<IngestError>,
        queue: Arc<IncomingQueue>,
    ) -> Self {
        ConsumerHandle {
            stop,
            thread,
            errors,
            queue,
        }
    }

    /// Next error surfaced by the consumer, if any.
    pub fn try_error(&self) -> Option<IngestError> {
        self.errors.try_recv().ok()
    }

    pub fn is_running(&self) -> bool {
        !self.stop.load(Ordering::SeqCst)
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.queue.detach_consumer();
    }
}

impl Drop for ConsumerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

const CONSUMER_POLL: Duration = Duration::from_millis(20);

/// Starts an OS thread that keeps polling `sub`, decoding and offering into
/// `q`. Errors surface through [`ConsumerHandle::try_error`].
pub fn spawn_consumer_thread(
    q: Arc<IncomingQueue>,
    mut sub: Box<dyn Subscription>,
    schema: RecordSchema,
) -> Result<ConsumerHandle, IngestError> {
    q.attach_consumer()?;
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();
    let thread_stop = Arc::clone(&stop);
    let queue = Arc::clone(&q);
    let thread = thread::Builder::new()
        .name("bridge-consumer".into())
        .spawn(move || {
            while !thread_stop.load(Ordering::SeqCst) {
                match sub.poll(256, CONSUMER_POLL) {
                    Ok(batch) => {
                        for env in batch {
                            match schema.decode(&env) {
                                Ok(rec) => {
                                    queue.offer(rec);
                                }
                                Err(e) => {
                                    let _ = tx.send(e);
                                }
                            }
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(IngestError::Transport(e));
                        break;
                    }
                }
            }
        })
        .map_err(|e| IngestError::Transport(TransportError::Io(e)))?;
    Ok(ConsumerHandle::new(stop, Some(thread), rx, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::WallClock;
    use crate::timebase::Value;
    use crate::transport::{BrokerHandle, MemoryBroker};
    use proptest::prelude::*;

    fn rec(ts: i64) -> TimestampedRecord {
        TimestampedRecord::new(ts, ts as u64).with("x", Value::Integer(ts))
    }

    fn times(q: &IncomingQueue) -> Vec<i64> {
        q.snapshot().iter().map(|r| r.data_ts).collect()
    }

    #[test]
    fn offer_examples() {
        let q = IncomingQueue::new(2);
        assert_eq!(q.offer(rec(1)), OfferOutcome::Accepted);
        assert_eq!(q.len(), 1);
        assert_eq!(q.offer(rec(2)), OfferOutcome::Accepted);
        assert_eq!(q.offer(rec(3)), OfferOutcome::DroppedOldest);
        assert_eq!(times(&q), vec![2, 3]);

        let q = IncomingQueue::new(10);
        q.offer(rec(5));
        assert_eq!(q.offer(rec(4)), OfferOutcome::RejectedOutOfOrder);
        assert_eq!(times(&q), vec![5]);
        assert_eq!(q.stats().rejected, 1);
    }

    #[test]
    fn equal_timestamps_are_in_order() {
        let q = IncomingQueue::new(10);
        q.offer(rec(5));
        assert_eq!(q.offer(rec(5)), OfferOutcome::Accepted);
    }

    #[test]
    fn rejection_survives_consumption() {
        let q = IncomingQueue::new(10);
        q.offer(rec(5));
        q.with_view(|v| v.consume_front(1));
        assert_eq!(q.offer(rec(4)), OfferOutcome::RejectedOutOfOrder);
    }

    proptest! {
        #[test]
        fn counters_balance(cap in 1usize..20, ts in prop::collection::vec(0i64..50, 0..200)) {
            let q = IncomingQueue::new(cap);
            for t in &ts {
                q.offer(rec(*t));
                let s = q.stats();
                prop_assert!(s.len <= cap);
                prop_assert_eq!(s.dropped + s.len as u64 + s.rejected, s.offered);
            }
            let held = times(&q);
            prop_assert!(held.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    fn publish_n(broker: &MemoryBroker, key: &str, n: i64) {
        for i in 1..=n {
            broker.publish(Envelope::record(key, &rec(i)).unwrap()).unwrap();
        }
    }

    #[test]
    fn fill_until_non_empty() {
        let broker = MemoryBroker::default();
        let mut sub = broker.subscribe("in").unwrap();
        publish_n(&broker, "in", 1);
        let q = IncomingQueue::new(10);
        let clock = WallClock::new();
        let n = fill_unthreaded(
            &q,
            sub.as_mut(),
            &RecordSchema::default(),
            &clock,
            &|q| !q.is_empty(),
            clock.now() + Duration::from_secs(1),
            Duration::from_millis(10),
        )
        .unwrap();
        assert_eq!(n, 1);
    }

    #[test]
    fn fill_with_zero_deadline_and_nothing_pending() {
        let broker = MemoryBroker::default();
        let mut sub = broker.subscribe("in").unwrap();
        let q = IncomingQueue::new(10);
        let clock = WallClock::new();
        let n = fill_unthreaded(
            &q,
            sub.as_mut(),
            &RecordSchema::default(),
            &clock,
            &|_| false,
            Duration::ZERO,
            Duration::from_millis(10),
        )
        .unwrap();
        assert_eq!(n, 0);
    }

    #[test]
    fn fill_leaves_the_rest_on_the_transport() {
        let broker = MemoryBroker::default();
        let mut sub = broker.subscribe("in").unwrap();
        publish_n(&broker, "in", 50);
        let q = IncomingQueue::new(100);
        let clock = WallClock::new();
        let horizon = 1;
        let n = fill_unthreaded(
            &q,
            sub.as_mut(),
            &RecordSchema::default(),
            &clock,
            &|q| q.snapshot().iter().any(|r| r.data_ts <= horizon),
            clock.now() + Duration::from_secs(1),
            Duration::from_millis(10),
        )
        .unwrap();
        assert_eq!(n, 1);
        assert_eq!(sub.pending(), 49);
    }

    #[test]
    fn fill_propagates_decode_errors() {
        let broker = MemoryBroker::default();
        let mut sub = broker.subscribe("in").unwrap();
        broker.publish(Envelope::new("in", b"{}".to_vec()).unwrap()).unwrap();
        let q = IncomingQueue::new(10);
        let clock = WallClock::new();
        let err = fill_unthreaded(
            &q,
            sub.as_mut(),
            &RecordSchema::default(),
            &clock,
            &|q| !q.is_empty(),
            clock.now() + Duration::from_millis(50),
            Duration::from_millis(10),
        )
        .unwrap_err();
        assert!(matches!(err, IngestError::Decode { .. }), "{err}");
    }

    #[test]
    fn schema_checks_outputs() {
        let decls = [VariableDecl::output("x", ValueKind::Real)];
        let schema = RecordSchema::new(&decls, 0);
        let good = TimestampedRecord::new(1, 1).with("x", Value::Real(1.0));
        let wrong_kind = TimestampedRecord::new(1, 1).with("x", Value::Integer(1));
        let missing = TimestampedRecord::new(1, 1).with("y", Value::Real(1.0));
        assert!(schema.decode(&Envelope::record("k", &good).unwrap()).is_ok());
        assert!(schema.decode(&Envelope::record("k", &wrong_kind).unwrap()).is_err());
        assert!(schema.decode(&Envelope::record("k", &missing).unwrap()).is_err());
        let early = RecordSchema::new(&decls, 10);
        assert!(early.decode(&Envelope::record("k", &good).unwrap()).is_err());
    }

    fn wait_until(mut cond: impl FnMut() -> bool) -> bool {
        let start = Instant::now();
        while start.elapsed() < std::time::Duration::from_secs(5) {
            if cond() {
                return true;
            }
            thread::sleep(std::time::Duration::from_millis(2));
        }
        false
    }

    #[test]
    fn consumer_thread_fills_queue() {
        let broker = MemoryBroker::default();
        let sub = broker.subscribe("in").unwrap();
        let q = Arc::new(IncomingQueue::new(100));
        let mut handle = spawn_consumer_thread(Arc::clone(&q), sub, RecordSchema::default()).unwrap();
        publish_n(&broker, "in", 10);
        assert!(wait_until(|| q.len() == 10));
        handle.shutdown();
        handle.shutdown();
        assert!(!handle.is_running());
    }

    #[test]
    fn consumer_shutdown_without_traffic_is_prompt() {
        let broker = MemoryBroker::default();
        let sub = broker.subscribe("in").unwrap();
        let q = Arc::new(IncomingQueue::new(100));
        let mut handle = spawn_consumer_thread(Arc::clone(&q), sub, RecordSchema::default()).unwrap();
        let start = Instant::now();
        handle.shutdown();
        assert!(start.elapsed() < std::time::Duration::from_secs(1));
        // The queue accepts a new consumer once the old one is gone.
        let sub = broker.subscribe("in").unwrap();
        assert!(spawn_consumer_thread(q, sub, RecordSchema::default()).is_ok());
    }

    #[test]
    fn double_start_is_an_error() {
        let broker = MemoryBroker::default();
        let q = Arc::new(IncomingQueue::new(100));
        let _first =
            spawn_consumer_thread(Arc::clone(&q), broker.subscribe("in").unwrap(), RecordSchema::default())
                .unwrap();
        let second =
            spawn_consumer_thread(Arc::clone(&q), broker.subscribe("in").unwrap(), RecordSchema::default());
        assert!(matches!(second, Err(IngestError::AlreadyStarted)));
    }

    #[test]
    fn consumer_surfaces_errors() {
        let broker = MemoryBroker::default();
        let sub = broker.subscribe("in").unwrap();
        let q = Arc::new(IncomingQueue::new(100));
        let handle = spawn_consumer_thread(Arc::clone(&q), sub, RecordSchema::default()).unwrap();
        broker.publish(Envelope::new("in", b"garbage".to_vec()).unwrap()).unwrap();
        let mut seen = None;
        assert!(wait_until(|| {
            seen = handle.try_error();
            seen.is_some()
        }));
        assert!(matches!(seen, Some(IngestError::Decode { .. })));
    }

    #[test]
    fn consumer_overflow_drops_oldest() {
        // Transport retention above the arrival count, so only the incoming
        // queue can drop.
        let broker = MemoryBroker::new(crate::transport::BrokerConfig {
            retention_cap: 300_000,
            ..Default::default()
        });
        let sub = broker.subscribe("in").unwrap();
        let q = Arc::new(IncomingQueue::new(100_000));
        let _handle = spawn_consumer_thread(Arc::clone(&q), sub, RecordSchema::default()).unwrap();
        for i in 1..=200_000 {
            broker.publish(Envelope::record("in", &rec(i)).unwrap()).unwrap();
        }
        assert!(wait_until(|| q.stats().offered == 200_000));
        let stats = q.stats();
        assert_eq!(stats.len, 100_000);
        assert_eq!(stats.dropped, 100_000);
        let first = q.with_view(|v| v.records().front().map(|r| r.data_ts));
        assert_eq!(first, Some(100_001));
    }
}
