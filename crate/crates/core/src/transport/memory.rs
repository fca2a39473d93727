use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, Weak};
use std::time::Instant;

use log::warn;

use super::{validate_routing_key, BrokerConfig, BrokerHandle, Envelope, Subscription, TransportError};
use crate::timebase::Duration;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Bounded FIFO feeding one subscription. Overflow drops the oldest entry.
#[derive(Debug)]
pub struct SubQueue {
    inner: Mutex<SubInner>,
    ready: Condvar,
    cap: usize,
}

#[derive(Debug, Default)]
struct SubInner {
    items: VecDeque<Envelope>,
    dropped: u64,
    closed: bool,
}

impl SubQueue {
    pub fn new(cap: usize) -> Self {
        SubQueue {
            inner: Mutex::new(SubInner::default()),
            ready: Condvar::new(),
            cap: cap.max(1),
        }
    }

    pub fn push(&self, env: Envelope) {
        let mut inner = lock(&self.inner);
        if inner.items.len() >= self.cap {
            inner.items.pop_front();
            inner.dropped += 1;
            if inner.dropped.is_power_of_two() {
                warn!(
                    "subscription {:?} over retention cap {}; {} envelopes dropped so far",
                    env.routing_key(),
                    self.cap,
                    inner.dropped
                );
            }
        }
        inner.items.push_back(env);
        drop(inner);
        self.ready.notify_all();
    }

    pub fn close(&self) {
        lock(&self.inner).closed = true;
        self.ready.notify_all();
    }

    pub fn pop(&self, max_count: usize, wait: Duration) -> Result<Vec<Envelope>, TransportError> {
        if max_count == 0 {
            return Err(TransportError::InvalidArgument("max_count must be at least 1"));
        }
        let deadline = Instant::now() + wait.to_std();
        let mut inner = lock(&self.inner);
        loop {
            if !inner.items.is_empty() {
                let n = max_count.min(inner.items.len());
                return Ok(inner.items.drain(..n).collect());
            }
            if inner.closed {
                return Err(TransportError::Closed);
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(Vec::new());
            }
            inner = self
                .ready
                .wait_timeout(inner, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    pub fn len(&self) -> usize {
        lock(&self.inner).items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> u64 {
        lock(&self.inner).dropped
    }
}

#[derive(Default)]
struct Topic {
    subscribers: Vec<Weak<SubQueue>>,
    /// Messages published while nobody was subscribed; handed to the next
    /// subscriber.
    backlog: VecDeque<Envelope>,
    backlog_dropped: u64,
}

#[derive(Default)]
struct State {
    topics: HashMap<String, Topic>,
    closed: bool,
}

struct Core {
    state: Mutex<State>,
    config: BrokerConfig,
}

/// In-process broker. Clones share the same message plane.
#[derive(Clone)]
pub struct MemoryBroker {
    core: Arc<Core>,
}

impl Default for MemoryBroker {
    fn default() -> Self {
        MemoryBroker::new(BrokerConfig::default())
    }
}

impl MemoryBroker {
    pub fn new(config: BrokerConfig) -> Self {
        MemoryBroker {
            core: Arc::new(Core {
                state: Mutex::new(State::default()),
                config,
            }),
        }
    }

    pub fn config(&self) -> BrokerConfig {
        self.core.config
    }

    /// Subscribes and returns the concrete subscription type.
    pub fn subscribe_local(&self, routing_key: &str) -> Result<MemorySubscription, TransportError> {
        validate_routing_key(routing_key)?;
        let mut state = lock(&self.core.state);
        if state.closed {
            return Err(TransportError::Closed);
        }
        let queue = Arc::new(SubQueue::new(self.core.config.retention_cap));
        let topic = state.topics.entry(routing_key.to_string()).or_default();
        topic.subscribers.retain(|w| w.strong_count() > 0);
        for env in topic.backlog.drain(..) {
            queue.push(env);
        }
        topic.subscribers.push(Arc::downgrade(&queue));
        Ok(MemorySubscription {
            key: routing_key.to_string(),
            queue,
        })
    }

    /// Envelopes held for a key that currently has no subscriber.
    pub fn backlog_len(&self, routing_key: &str) -> usize {
        lock(&self.core.state)
            .topics
            .get(routing_key)
            .map_or(0, |t| t.backlog.len())
    }
}

impl BrokerHandle for MemoryBroker {
    fn publish(&self, env: Envelope) -> Result<(), TransportError> {
        let max = self.core.config.max_frame;
        if env.payload.len() > max {
            return Err(TransportError::FrameTooLarge {
                size: env.payload.len(),
                max,
            });
        }
        let mut state = lock(&self.core.state);
        if state.closed {
            return Err(TransportError::Closed);
        }
        let cap = self.core.config.retention_cap;
        let topic = state.topics.entry(env.routing_key().to_string()).or_default();
        topic.subscribers.retain(|w| w.strong_count() > 0);
        let live: Vec<Arc<SubQueue>> = topic.subscribers.iter().filter_map(Weak::upgrade).collect();
        if live.is_empty() {
            if topic.backlog.len() >= cap {
                topic.backlog.pop_front();
                topic.backlog_dropped += 1;
            }
            topic.backlog.push_back(env);
            return Ok(());
        }
        // Delivery happens under the state lock so that every subscriber sees
        // publishes in one global order.
        let (last, rest) = live.split_last().expect("non-empty");
        for q in rest {
            q.push(env.clone());
        }
        last.push(env);
        Ok(())
    }

    fn subscribe(&self, routing_key: &str) -> Result<Box<dyn Subscription>, TransportError> {
        Ok(Box::new(self.subscribe_local(routing_key)?))
    }

    fn close(&self) {
        let mut state = lock(&self.core.state);
        state.closed = true;
        for topic in state.topics.values() {
            for q in topic.subscribers.iter().filter_map(Weak::upgrade) {
                q.close();
            }
        }
    }

    fn is_closed(&self) -> bool {
        lock(&self.core.state).closed
    }
}

pub struct MemorySubscription {
    key: String,
    queue: Arc<SubQueue>,
}

impl Subscription for MemorySubscription {
    fn routing_key(&self) -> &str {
        &self.key
    }

    fn poll(&mut self, max_count: usize, deadline: Duration) -> Result<Vec<Envelope>, TransportError> {
        self.queue.pop(max_count, deadline)
    }

    fn pending(&self) -> usize {
        self.queue.len()
    }

    fn dropped(&self) -> u64 {
        self.queue.dropped()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    fn env(key: &str, body: &str) -> Envelope {
        Envelope::new(key, body.as_bytes().to_vec()).unwrap()
    }

    #[test]
    fn single_subscriber_receives() {
        let broker = MemoryBroker::default();
        let mut sub = broker.subscribe("k").unwrap();
        broker.publish(env("k", "a")).unwrap();
        let got = sub.poll(10, Duration::ZERO).unwrap();
        assert_eq!(got, vec![env("k", "a")]);
    }

    #[test]
    fn exact_key_matching() {
        let broker = MemoryBroker::default();
        let mut sub = broker.subscribe("robot.data").unwrap();
        broker.publish(env("robot.*", "x")).unwrap();
        broker.publish(env("robot.data.extra", "x")).unwrap();
        assert!(sub.poll(10, Duration::ZERO).unwrap().is_empty());
    }

    #[test]
    fn late_subscriber_gets_backlog() {
        let broker = MemoryBroker::default();
        broker.publish(env("k", "1")).unwrap();
        broker.publish(env("k", "2")).unwrap();
        assert_eq!(broker.backlog_len("k"), 2);
        let mut sub = broker.subscribe("k").unwrap();
        assert_eq!(broker.backlog_len("k"), 0);
        let got = sub.poll(10, Duration::ZERO).unwrap();
        assert_eq!(got, vec![env("k", "1"), env("k", "2")]);
    }

    #[test]
    fn poll_empty_and_partial() {
        let broker = MemoryBroker::default();
        let mut sub = broker.subscribe("k").unwrap();
        assert!(sub.poll(1, Duration::ZERO).unwrap().is_empty());
        for i in 0..3 {
            broker.publish(env("k", &i.to_string())).unwrap();
        }
        let got = sub.poll(2, Duration::ZERO).unwrap();
        assert_eq!(got, vec![env("k", "0"), env("k", "1")]);
        assert_eq!(sub.pending(), 1);
        assert!(matches!(
            sub.poll(0, Duration::ZERO),
            Err(TransportError::InvalidArgument(_))
        ));
    }

    #[test]
    fn retention_cap_drops_oldest() {
        let broker = MemoryBroker::new(BrokerConfig {
            retention_cap: 3,
            ..BrokerConfig::default()
        });
        let mut sub = broker.subscribe("k").unwrap();
        for i in 0..5 {
            broker.publish(env("k", &i.to_string())).unwrap();
        }
        assert_eq!(sub.dropped(), 2);
        let got = sub.poll(10, Duration::ZERO).unwrap();
        assert_eq!(got, vec![env("k", "2"), env("k", "3"), env("k", "4")]);
    }

    #[test]
    fn oversized_and_closed() {
        let broker = MemoryBroker::new(BrokerConfig {
            max_frame: 4,
            ..BrokerConfig::default()
        });
        assert!(matches!(
            broker.publish(env("k", "12345")),
            Err(TransportError::FrameTooLarge { size: 5, max: 4 })
        ));
        broker.close();
        assert!(matches!(
            broker.publish(env("k", "1")),
            Err(TransportError::Closed)
        ));
    }

    #[test]
    fn close_wakes_blocked_poll() {
        let broker = MemoryBroker::default();
        let mut sub = broker.subscribe("k").unwrap();
        let b = broker.clone();
        let t = thread::spawn(move || {
            thread::sleep(std::time::Duration::from_millis(20));
            b.close();
        });
        let res = sub.poll(1, Duration::from_secs(5));
        assert!(matches!(res, Err(TransportError::Closed)));
        t.join().unwrap();
    }

    #[test]
    fn routing_key_validation() {
        assert!(Envelope::new("", vec![]).is_err());
        assert!(Envelope::new("a\nb", vec![]).is_err());
        assert!(Envelope::new("robot.data", vec![]).is_ok());
    }
}
