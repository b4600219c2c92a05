//! Deterministic single-threaded executor and request/response transport.
//!
//! Every message is an event in one FIFO queue; tasks woken by a delivery
//! run to their next await point before the next event is taken. When the
//! system is quiescent but requests are still open, the oldest dropped
//! request (or, failing that, the oldest open request) times out.

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Transport endpoint address; the simulator uses the peer index.
pub type PeerId = usize;

type LocalTask = Pin<Box<dyn Future<Output = ()>>>;

struct TaskWaker {
    id: usize,
    ready: Arc<Mutex<VecDeque<usize>>>,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.wake_by_ref();
    }

    fn wake_by_ref(self: &Arc<Self>) {
        self.ready.lock().unwrap().push_back(self.id);
    }
}

type Event = Box<dyn FnOnce()>;

struct RuntimeInner {
    tasks: RefCell<Vec<Option<LocalTask>>>,
    free: RefCell<Vec<usize>>,
    ready: Arc<Mutex<VecDeque<usize>>>,
    events: RefCell<VecDeque<Event>>,
    quiescence: RefCell<Vec<Rc<dyn Fn() -> bool>>>,
    delivered: Cell<u64>,
}

/// Handle to the executor. Cheap to clone.
#[derive(Clone)]
pub struct Runtime {
    inner: Rc<RuntimeInner>,
}

impl Default for Runtime {
    fn default() -> Self {
        Runtime::new()
    }
}

impl Runtime {
    pub fn new() -> Self {
        Runtime {
            inner: Rc::new(RuntimeInner {
                tasks: RefCell::new(Vec::new()),
                free: RefCell::new(Vec::new()),
                ready: Arc::new(Mutex::new(VecDeque::new())),
                events: RefCell::new(VecDeque::new()),
                quiescence: RefCell::new(Vec::new()),
                delivered: Cell::new(0),
            }),
        }
    }

    pub fn spawn(&self, fut: impl Future<Output = ()> + 'static) {
        let task: LocalTask = Box::pin(fut);
        let id = match self.inner.free.borrow_mut().pop() {
            Some(id) => {
                self.inner.tasks.borrow_mut()[id] = Some(task);
                id
            }
            None => {
                let mut tasks = self.inner.tasks.borrow_mut();
                tasks.push(Some(task));
                tasks.len() - 1
            }
        };
        self.inner.ready.lock().unwrap().push_back(id);
    }

    /// Queues an event behind all events already scheduled.
    pub fn schedule(&self, event: impl FnOnce() + 'static) {
        self.inner.events.borrow_mut().push_back(Box::new(event));
    }

    /// Registers a hook run when nothing is ready. It returns whether it
    /// made progress (for example by timing out a request).
    pub fn on_quiescence(&self, hook: Rc<dyn Fn() -> bool>) {
        self.inner.quiescence.borrow_mut().push(hook);
    }

    /// Number of events delivered so far; a logical clock.
    pub fn now(&self) -> u64 {
        self.inner.delivered.get()
    }

    pub fn live_tasks(&self) -> usize {
        self.inner.tasks.borrow().iter().filter(|t| t.is_some()).count()
    }

    fn poll_ready(&self) {
        loop {
            let next = self.inner.ready.lock().unwrap().pop_front();
            let Some(id) = next else { break };
            let task = self.inner.tasks.borrow_mut().get_mut(id).and_then(Option::take);
            let Some(mut task) = task else { continue };
            let waker = Waker::from(Arc::new(TaskWaker {
                id,
                ready: self.inner.ready.clone(),
            }));
            let mut cx = Context::from_waker(&waker);
            match task.as_mut().poll(&mut cx) {
                Poll::Ready(()) => self.inner.free.borrow_mut().push(id),
                Poll::Pending => self.inner.tasks.borrow_mut()[id] = Some(task),
            }
        }
    }

    /// Runs until no task is ready, no event is queued and no quiescence
    /// hook makes progress. Tasks still waiting afterwards are dropped.
    pub fn run(&self) {
        loop {
            self.poll_ready();
            let event = self.inner.events.borrow_mut().pop_front();
            if let Some(event) = event {
                self.inner.delivered.set(self.inner.delivered.get() + 1);
                event();
                continue;
            }
            let hooks: Vec<_> = self.inner.quiescence.borrow().clone();
            if !hooks.iter().any(|h| h()) {
                break;
            }
        }
        let idle: Vec<Option<LocalTask>> = self.inner.tasks.borrow_mut().drain(..).collect();
        self.inner.free.borrow_mut().clear();
        self.inner.ready.lock().unwrap().clear();
        drop(idle);
    }
}

/// A value that wakes its waiters whenever it is bumped.
#[derive(Default)]
pub struct Notify {
    generation: Cell<u64>,
    waiters: RefCell<Vec<Waker>>,
}

impl Notify {
    pub fn generation(&self) -> u64 {
        self.generation.get()
    }

    pub fn notify(&self) {
        self.generation.set(self.generation.get() + 1);
        for w in self.waiters.borrow_mut().drain(..) {
            w.wake();
        }
    }

    /// Resolves once the generation moves past `seen`.
    pub fn changed(&self, seen: u64) -> Changed<'_> {
        Changed { notify: self, seen }
    }
}

pub struct Changed<'a> {
    notify: &'a Notify,
    seen: u64,
}

impl Future for Changed<'_> {
    type Output = ();

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        if self.notify.generation.get() > self.seen {
            Poll::Ready(())
        } else {
            self.notify.waiters.borrow_mut().push(cx.waker().clone());
            Poll::Pending
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum RpcError {
    #[error("request timed out")]
    Timeout,
    #[error("no such endpoint")]
    NoEndpoint,
}

/// Per-peer transport counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportStats {
    pub requests_sent: u64,
    /// Outbox: responses this peer sent.
    pub responses_given: u64,
    /// Inbox: responses delivered to this peer.
    pub responses_received: u64,
    pub lookup_cycles: u64,
}

impl TransportStats {
    pub fn since(&self, earlier: &TransportStats) -> TransportStats {
        TransportStats {
            requests_sent: self.requests_sent - earlier.requests_sent,
            responses_given: self.responses_given - earlier.responses_given,
            responses_received: self.responses_received - earlier.responses_received,
            lookup_cycles: self.lookup_cycles - earlier.lookup_cycles,
        }
    }
}

pub type HandlerFuture<Resp> = Pin<Box<dyn Future<Output = Option<Resp>>>>;
pub type Handler<Req, Resp> = Rc<dyn Fn(PeerId, Req) -> HandlerFuture<Resp>>;

/// Observed transport activity, for transcripts and metrics.
pub enum TransportEvent<'a, Req, Resp> {
    Request { id: u64, from: PeerId, to: PeerId, body: &'a Req },
    Response { id: u64, from: PeerId, to: PeerId, body: &'a Resp },
    Dropped { id: u64, from: PeerId, to: PeerId },
    TimedOut { id: u64, from: PeerId, to: PeerId },
}

type Observer<Req, Resp> = Box<dyn FnMut(TransportEvent<'_, Req, Resp>)>;

struct Slot<Resp> {
    value: Option<Result<Resp, RpcError>>,
    waker: Option<Waker>,
}

struct Open<Resp> {
    from: PeerId,
    to: PeerId,
    dropped: bool,
    slot: Rc<RefCell<Slot<Resp>>>,
}

struct TransportInner<Req, Resp> {
    rt: Runtime,
    handlers: RefCell<Vec<Option<Handler<Req, Resp>>>>,
    open: RefCell<BTreeMap<u64, Open<Resp>>>,
    next_id: Cell<u64>,
    stats: RefCell<Vec<TransportStats>>,
    observer: RefCell<Option<Observer<Req, Resp>>>,
}

/// Reliable, ordered request/response messaging between endpoints.
pub struct Transport<Req, Resp> {
    inner: Rc<TransportInner<Req, Resp>>,
}

impl<Req, Resp> Clone for Transport<Req, Resp> {
    fn clone(&self) -> Self {
        Transport {
            inner: self.inner.clone(),
        }
    }
}

impl<Req: 'static, Resp: 'static> Transport<Req, Resp> {
    pub fn new(rt: &Runtime) -> Self {
        let t = Transport {
            inner: Rc::new(TransportInner {
                rt: rt.clone(),
                handlers: RefCell::new(Vec::new()),
                open: RefCell::new(BTreeMap::new()),
                next_id: Cell::new(0),
                stats: RefCell::new(Vec::new()),
                observer: RefCell::new(None),
            }),
        };
        let weak = Rc::downgrade(&t.inner);
        rt.on_quiescence(Rc::new(move || match weak.upgrade() {
            Some(inner) => Transport { inner }.expire_one(),
            None => false,
        }));
        t
    }

    pub fn runtime(&self) -> &Runtime {
        &self.inner.rt
    }

    pub fn register(&self, id: PeerId, handler: Handler<Req, Resp>) {
        let mut hs = self.inner.handlers.borrow_mut();
        if hs.len() <= id {
            hs.resize_with(id + 1, || None);
        }
        hs[id] = Some(handler);
        let mut stats = self.inner.stats.borrow_mut();
        if stats.len() <= id {
            stats.resize(id + 1, TransportStats::default());
        }
    }

    pub fn set_observer(&self, observer: Observer<Req, Resp>) {
        *self.inner.observer.borrow_mut() = Some(observer);
    }

    pub fn stats(&self) -> Vec<TransportStats> {
        self.inner.stats.borrow().clone()
    }

    pub fn add_lookup_cycles(&self, id: PeerId, cycles: u64) {
        self.inner.stats.borrow_mut()[id].lookup_cycles += cycles;
    }

    pub fn open_requests(&self) -> usize {
        self.inner.open.borrow().len()
    }

    fn observe(&self, event: TransportEvent<'_, Req, Resp>) {
        if let Some(obs) = self.inner.observer.borrow_mut().as_mut() {
            obs(event);
        }
    }

    /// Sends `body` from `from` to `to` and waits for the response.
    pub fn request(&self, from: PeerId, to: PeerId, body: Req) -> impl Future<Output = Result<Resp, RpcError>> {
        let id = self.inner.next_id.get();
        self.inner.next_id.set(id + 1);
        let slot = Rc::new(RefCell::new(Slot {
            value: None,
            waker: None,
        }));
        let handler = self.inner.handlers.borrow().get(to).cloned().flatten();
        if handler.is_none() {
            slot.borrow_mut().value = Some(Err(RpcError::NoEndpoint));
        } else {
            self.inner.stats.borrow_mut()[from].requests_sent += 1;
            self.observe(TransportEvent::Request { id, from, to, body: &body });
            self.inner.open.borrow_mut().insert(
                id,
                Open {
                    from,
                    to,
                    dropped: false,
                    slot: slot.clone(),
                },
            );
            let this = self.clone();
            self.inner.rt.schedule(move || this.deliver_request(id, from, to, body));
        }
        Reply { slot }
    }

    fn deliver_request(&self, id: u64, from: PeerId, to: PeerId, body: Req) {
        let handler = self.inner.handlers.borrow()[to].clone().expect("registered handler");
        let this = self.clone();
        self.inner.rt.spawn(async move {
            match handler(from, body).await {
                Some(resp) => {
                    this.inner.stats.borrow_mut()[to].responses_given += 1;
                    this.observe(TransportEvent::Response { id, from: to, to: from, body: &resp });
                    let t2 = this.clone();
                    this.inner.rt.schedule(move || t2.deliver_response(id, from, resp));
                }
                None => {
                    if let Some(open) = this.inner.open.borrow_mut().get_mut(&id) {
                        open.dropped = true;
                    }
                    this.observe(TransportEvent::Dropped { id, from, to });
                }
            }
        });
    }

    fn deliver_response(&self, id: u64, to: PeerId, resp: Resp) {
        self.inner.stats.borrow_mut()[to].responses_received += 1;
        let open = self.inner.open.borrow_mut().remove(&id);
        if let Some(open) = open {
            let mut slot = open.slot.borrow_mut();
            slot.value = Some(Ok(resp));
            if let Some(w) = slot.waker.take() {
                w.wake();
            }
        }
    }

    /// Times out one request: the oldest dropped one if any, else the
    /// oldest open one.
    fn expire_one(&self) -> bool {
        let victim = {
            let open = self.inner.open.borrow();
            open.iter()
                .find(|(_, o)| o.dropped)
                .or_else(|| open.iter().next())
                .map(|(id, _)| *id)
        };
        let Some(id) = victim else { return false };
        let open = self.inner.open.borrow_mut().remove(&id).unwrap();
        self.observe(TransportEvent::TimedOut {
            id,
            from: open.from,
            to: open.to,
        });
        let mut slot = open.slot.borrow_mut();
        slot.value = Some(Err(RpcError::Timeout));
        if let Some(w) = slot.waker.take() {
            w.wake();
        }
        true
    }
}

struct Reply<Resp> {
    slot: Rc<RefCell<Slot<Resp>>>,
}

impl<Resp> Future for Reply<Resp> {
    type Output = Result<Resp, RpcError>;

    fn poll(self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Self::Output> {
        let mut slot = self.slot.borrow_mut();
        match slot.value.take() {
            Some(v) => Poll::Ready(v),
            None => {
                slot.waker = Some(cx.waker().clone());
                Poll::Pending
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn echo_transport(rt: &Runtime, n: usize) -> Transport<u32, u32> {
        let t = Transport::<u32, u32>::new(rt);
        for i in 0..n {
            t.register(i, Rc::new(move |_, x| Box::pin(async move { Some(x + i as u32) })));
        }
        t
    }

    #[test]
    fn request_response_round_trip() {
        let rt = Runtime::new();
        let t = echo_transport(&rt, 3);
        let out = Rc::new(RefCell::new(Vec::new()));
        for from in 0..3 {
            let (t2, out2) = (t.clone(), out.clone());
            rt.spawn(async move {
                let r = t2.request(from, (from + 1) % 3, 10).await.unwrap();
                out2.borrow_mut().push((from, r));
            });
        }
        rt.run();
        assert_eq!(*out.borrow(), vec![(0, 11), (1, 12), (2, 10)]);
        let stats = t.stats();
        let given: u64 = stats.iter().map(|s| s.responses_given).sum();
        let received: u64 = stats.iter().map(|s| s.responses_received).sum();
        assert_eq!((given, received), (3, 3));
    }

    #[test]
    fn dropped_requests_time_out() {
        let rt = Runtime::new();
        let t = Transport::<u32, u32>::new(&rt);
        t.register(0, Rc::new(|_, _| Box::pin(async { None })));
        t.register(1, Rc::new(|_, _| Box::pin(async { Some(1) })));
        let out = Rc::new(Cell::new(None));
        let (t2, out2) = (t.clone(), out.clone());
        rt.spawn(async move {
            out2.set(Some(t2.request(1, 0, 5).await));
        });
        rt.run();
        assert_eq!(out.get(), Some(Err(RpcError::Timeout)));
        assert_eq!(t.open_requests(), 0);
    }

    #[test]
    fn deferred_responses_wait_for_state() {
        let rt = Runtime::new();
        let t = Transport::<u32, u32>::new(&rt);
        let notify = Rc::new(Notify::default());
        let value = Rc::new(Cell::new(None::<u32>));
        {
            let (notify, value) = (notify.clone(), value.clone());
            t.register(
                0,
                Rc::new(move |_, _| {
                    let (notify, value) = (notify.clone(), value.clone());
                    Box::pin(async move {
                        loop {
                            let seen = notify.generation();
                            if let Some(v) = value.get() {
                                return Some(v);
                            }
                            notify.changed(seen).await;
                        }
                    })
                }),
            );
        }
        t.register(1, Rc::new(|_, _| Box::pin(async { Some(0) })));
        let got = Rc::new(Cell::new(None));
        {
            let (t, got) = (t.clone(), got.clone());
            rt.spawn(async move { got.set(Some(t.request(1, 0, 0).await.unwrap())) });
        }
        {
            let (t, notify, value) = (t.clone(), notify.clone(), value.clone());
            rt.spawn(async move {
                // Some unrelated traffic first, then publish the value.
                t.request(0, 1, 0).await.unwrap();
                value.set(Some(42));
                notify.notify();
            });
        }
        rt.run();
        assert_eq!(got.get(), Some(42));
    }

    #[test]
    fn execution_is_deterministic() {
        let trace = || {
            let rt = Runtime::new();
            let t = echo_transport(&rt, 5);
            let log = Rc::new(RefCell::new(Vec::new()));
            t.set_observer({
                let log = log.clone();
                Box::new(move |e| {
                    if let TransportEvent::Response { id, from, to, body } = e {
                        log.borrow_mut().push((id, from, to, *body));
                    }
                })
            });
            for from in 0..5 {
                let t = t.clone();
                rt.spawn(async move {
                    for to in 0..5 {
                        t.request(from, to, from as u32).await.unwrap();
                    }
                });
            }
            rt.run();
            let v = log.borrow().clone();
            v
        };
        assert_eq!(trace(), trace());
    }
}
