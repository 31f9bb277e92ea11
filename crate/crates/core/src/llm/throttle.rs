use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use super::{CompletionRequest, CompletionResponse, CompletionService, LlmError};

/// Time source for rate limiting.
pub trait Clock: Send + Sync {
    /// Time elapsed since the clock's epoch.
    fn now(&self) -> Duration;
    fn sleep(&self, duration: Duration);
}

#[derive(Debug)]
pub struct SystemClock {
    epoch: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self {
            epoch: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.epoch.elapsed()
    }

    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// Clock that only moves when someone sleeps on it.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: Mutex<Duration>,
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn sleep(&self, duration: Duration) {
        *self.now.lock().unwrap_or_else(|e| e.into_inner()) += duration;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThrottleConfig {
    pub max_in_flight: usize,
    /// At most this many calls start per fixed interval window.
    pub requests_per_interval: Option<u32>,
    pub interval: Duration,
    /// How long a caller may wait for an in-flight slot.
    pub wait_timeout: Duration,
}

impl Default for ThrottleConfig {
    fn default() -> Self {
        Self {
            max_in_flight: 4,
            requests_per_interval: None,
            interval: Duration::from_secs(1),
            wait_timeout: Duration::from_secs(300),
        }
    }
}

#[derive(Debug, Default)]
struct SlotState {
    in_flight: usize,
    queue: VecDeque<u64>,
    next_ticket: u64,
}

#[derive(Debug, Default)]
struct Window {
    index: Option<u128>,
    started: u32,
}

/// Limits concurrent calls (FIFO admission) and call starts per interval.
pub struct Throttle<S> {
    inner: S,
    config: ThrottleConfig,
    clock: Arc<dyn Clock>,
    slots: Mutex<SlotState>,
    freed: Condvar,
    window: Mutex<Window>,
    peak: AtomicUsize,
}

impl<S: CompletionService> Throttle<S> {
    pub fn new(inner: S, config: ThrottleConfig) -> Result<Self, LlmError> {
        Self::with_clock(inner, config, Arc::new(SystemClock::default()))
    }

    pub fn with_clock(
        inner: S,
        config: ThrottleConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, LlmError> {
        if config.max_in_flight == 0 {
            return Err(LlmError::InvalidRequest("max_in_flight must be positive".into()));
        }
        if config.requests_per_interval == Some(0) || config.interval.is_zero() {
            return Err(LlmError::InvalidRequest("rate limit must be positive".into()));
        }
        Ok(Self {
            inner,
            config,
            clock,
            slots: Mutex::new(SlotState::default()),
            freed: Condvar::new(),
            window: Mutex::new(Window::default()),
            peak: AtomicUsize::new(0),
        })
    }

    /// Highest number of simultaneous calls observed.
    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    /// Tickets handed out so far (admitted or waiting).
    pub fn tickets_issued(&self) -> u64 {
        self.slots.lock().unwrap_or_else(|e| e.into_inner()).next_ticket
    }

    fn acquire_slot(&self) -> Result<(), LlmError> {
        let deadline = Instant::now() + self.config.wait_timeout;
        let mut state = self.slots.lock().unwrap_or_else(|e| e.into_inner());
        let ticket = state.next_ticket;
        state.next_ticket += 1;
        state.queue.push_back(ticket);
        loop {
            if state.queue.front() == Some(&ticket) && state.in_flight < self.config.max_in_flight
            {
                state.queue.pop_front();
                state.in_flight += 1;
                self.peak.fetch_max(state.in_flight, Ordering::SeqCst);
                // the next ticket may also fit
                self.freed.notify_all();
                return Ok(());
            }
            let remaining = deadline.saturating_duration_since(Instant::now());
            if remaining.is_zero() {
                state.queue.retain(|t| *t != ticket);
                self.freed.notify_all();
                return Err(LlmError::Retryable(format!(
                    "timed out after {:?} waiting for an in-flight slot",
                    self.config.wait_timeout
                )));
            }
            state = self
                .freed
                .wait_timeout(state, remaining)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    fn release_slot(&self) {
        let mut state = self.slots.lock().unwrap_or_else(|e| e.into_inner());
        state.in_flight -= 1;
        self.freed.notify_all();
    }

    fn wait_for_rate(&self) {
        let Some(limit) = self.config.requests_per_interval else {
            return;
        };
        let interval = self.config.interval.as_nanos();
        let mut window = self.window.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            let now = self.clock.now().as_nanos();
            let index = now / interval;
            if window.index != Some(index) {
                window.index = Some(index);
                window.started = 0;
            }
            if window.started < limit {
                window.started += 1;
                return;
            }
            let next = (index + 1) * interval;
            let wait = u64::try_from(next - now).unwrap_or(u64::MAX);
            self.clock.sleep(Duration::from_nanos(wait));
        }
    }
}

impl<S: CompletionService> CompletionService for Throttle<S> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        self.wait_for_rate();
        self.acquire_slot()?;
        let result = self.inner.complete(request);
        self.release_slot();
        result
    }
}
