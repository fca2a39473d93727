//! Time sources for a run.
//!
//! [`WallClock`] uses real time: waits block, injected delays busy-wait.
//! [`VirtualClock`] is a single logical clock that drives replay publication
//! instants, step instants and consumer activity, so that message
//! availability is a pure function of the scenario. Nothing sleeps in
//! virtual mode; a wait is a jump to the next scheduled publication.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use log::warn;

use crate::ingress::{pump, spawn_consumer_thread, ConsumerHandle, IncomingQueue, IngestError, RecordSchema};
use crate::timebase::Duration;
use crate::transport::{BrokerHandle, Envelope, Subscription, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    Wallclock,
    Virtual,
}

impl std::fmt::Display for ClockMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClockMode::Wallclock => "wallclock",
            ClockMode::Virtual => "virtual",
        })
    }
}

pub trait Clock: Send + Sync {
    /// Elapsed time since the clock started.
    fn now(&self) -> Duration;

    /// Occupies the calling thread for `d`, emulating unit computation.
    fn spend(&self, d: Duration);

    /// Polls `sub`, waiting at most `wait` for something to arrive.
    fn poll(
        &self,
        sub: &mut dyn Subscription,
        max_count: usize,
        wait: Duration,
    ) -> Result<Vec<Envelope>, TransportError>;

    /// Waits until `q` has seen more than `seen` offers, or `wait` elapses.
    fn wait_for_offer(&self, q: &IncomingQueue, seen: u64, wait: Duration);

    /// Attaches a background consumer that keeps `q` filled from `sub`.
    fn start_consumer(
        &self,
        q: Arc<IncomingQueue>,
        sub: Box<dyn Subscription>,
        schema: RecordSchema,
    ) -> Result<ConsumerHandle, IngestError>;

    fn mode(&self) -> ClockMode;
}

pub struct WallClock {
    start: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        WallClock {
            start: Instant::now(),
        }
    }

    pub fn started_at(&self) -> Instant {
        self.start
    }
}

impl Default for WallClock {
    fn default() -> Self {
        WallClock::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> Duration {
        Duration::from_std(self.start.elapsed())
    }

    fn spend(&self, d: Duration) {
        let until = Instant::now() + d.to_std();
        while Instant::now() < until {
            std::hint::spin_loop();
        }
    }

    fn poll(
        &self,
        sub: &mut dyn Subscription,
        max_count: usize,
        wait: Duration,
    ) -> Result<Vec<Envelope>, TransportError> {
        sub.poll(max_count, wait)
    }

    fn wait_for_offer(&self, q: &IncomingQueue, seen: u64, wait: Duration) {
        q.wait_for_offer(seen, wait);
    }

    fn start_consumer(
        &self,
        q: Arc<IncomingQueue>,
        sub: Box<dyn Subscription>,
        schema: RecordSchema,
    ) -> Result<ConsumerHandle, IngestError> {
        spawn_consumer_thread(q, sub, schema)
    }

    fn mode(&self) -> ClockMode {
        ClockMode::Wallclock
    }
}

struct Scheduled {
    at: Duration,
    broker: Arc<dyn BrokerHandle>,
    env: Envelope,
}

type Pump = Box<dyn FnMut() -> bool + Send>;

/// Logical clock. Publications are scheduled up front; advancing the clock
/// delivers every publication due by the new instant, then lets each
/// registered consumer drain its subscription.
pub struct VirtualClock {
    now: Mutex<Duration>,
    schedule: Mutex<VecDeque<Scheduled>>,
    pumps: Mutex<Vec<Pump>>,
    delivery_failures: Mutex<u64>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Default for VirtualClock {
    fn default() -> Self {
        VirtualClock::new()
    }
}

impl VirtualClock {
    pub fn new() -> Self {
        VirtualClock {
            now: Mutex::new(Duration::ZERO),
            schedule: Mutex::new(VecDeque::new()),
            pumps: Mutex::new(Vec::new()),
            delivery_failures: Mutex::new(0),
        }
    }

    /// Schedules `env` for publication on `broker` at logical instant `at`.
    /// Publications due at the same instant go out in scheduling order.
    pub fn schedule(&self, at: Duration, broker: Arc<dyn BrokerHandle>, env: Envelope) {
        let mut schedule = lock(&self.schedule);
        let pos = schedule.partition_point(|s| s.at <= at);
        schedule.insert(pos, Scheduled { at, broker, env });
    }

    pub fn next_event(&self) -> Option<Duration> {
        lock(&self.schedule).front().map(|s| s.at)
    }

    pub fn pending_events(&self) -> usize {
        lock(&self.schedule).len()
    }

    pub fn delivery_failures(&self) -> u64 {
        *lock(&self.delivery_failures)
    }

    /// Moves the clock to `target` (never backwards) and delivers everything
    /// due by then.
    pub fn advance_to(&self, target: Duration) {
        {
            let mut now = lock(&self.now);
            if target > *now {
                *now = target;
            }
        }
        let due: Vec<Scheduled> = {
            let mut schedule = lock(&self.schedule);
            let n = schedule.partition_point(|s| s.at <= target);
            schedule.drain(..n).collect()
        };
        for item in due {
            if let Err(e) = item.broker.publish(item.env) {
                warn!("virtual clock: scheduled publication failed: {e}");
                *lock(&self.delivery_failures) += 1;
            }
        }
        self.run_pumps();
    }

    fn run_pumps(&self) {
        let mut pumps = lock(&self.pumps);
        pumps.retain_mut(|p| p());
    }

    /// Jumps to the next scheduled publication if it falls within `wait`,
    /// otherwise to the end of the wait.
    fn wait(&self, wait: Duration) {
        let now = self.now();
        let limit = now + wait;
        let target = match self.next_event() {
            Some(at) if at <= limit => at.max(now),
            _ => limit,
        };
        self.advance_to(target);
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        *lock(&self.now)
    }

    fn spend(&self, d: Duration) {
        let target = self.now() + d;
        self.advance_to(target);
    }

    fn poll(
        &self,
        sub: &mut dyn Subscription,
        max_count: usize,
        wait: Duration,
    ) -> Result<Vec<Envelope>, TransportError> {
        let got = sub.poll(max_count, Duration::ZERO)?;
        if !got.is_empty() || wait.is_zero() {
            return Ok(got);
        }
        self.wait(wait);
        sub.poll(max_count, Duration::ZERO)
    }

    fn wait_for_offer(&self, q: &IncomingQueue, seen: u64, wait: Duration) {
        if q.stats().offered > seen {
            return;
        }
        self.wait(wait);
    }

    fn start_consumer(
        &self,
        q: Arc<IncomingQueue>,
        mut sub: Box<dyn Subscription>,
        schema: RecordSchema,
    ) -> Result<ConsumerHandle, IngestError> {
        q.attach_consumer()?;
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel();
        let pump_stop = Arc::clone(&stop);
        let queue = Arc::clone(&q);
        let mut pump_fn: Pump = Box::new(move || {
            if pump_stop.load(Ordering::SeqCst) {
                return false;
            }
            match pump(&queue, sub.as_mut(), &schema, &tx) {
                Ok(_) => true,
                Err(e) => {
                    let _ = tx.send(IngestError::Transport(e));
                    false
                }
            }
        });
        // Anything already delivered is consumed immediately.
        if pump_fn() {
            lock(&self.pumps).push(pump_fn);
        }
        Ok(ConsumerHandle::new(stop, None, rx, q))
    }

    fn mode(&self) -> ClockMode {
        ClockMode::Virtual
    }
}
