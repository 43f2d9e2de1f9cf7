//! Per-endpoint concurrency limits and the retry policy.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use super::ClientError;

/// Default in-flight request limit per endpoint.
pub const DEFAULT_CONCURRENCY: usize = 4;

/// Counting semaphore; permits are returned when the guard drops.
#[derive(Debug)]
pub struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a> {
    sem: &'a Semaphore,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            free: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit { sem: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.sem.free.lock().unwrap() += 1;
        self.sem.cv.notify_one();
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Retries only [`ClientError::ServiceUnavailable`]; one backoff entry per
/// retry.
#[derive(Clone)]
pub struct RetryPolicy {
    pub backoff: Vec<Duration>,
    pub sleep: Sleeper,
}

impl std::fmt::Debug for RetryPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RetryPolicy").field("backoff", &self.backoff).finish()
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            backoff: vec![Duration::from_secs(1), Duration::from_secs(4)],
            sleep: Arc::new(std::thread::sleep),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            backoff: Vec::new(),
            ..Self::default()
        }
    }

    pub fn run<T>(&self, mut f: impl FnMut() -> Result<T, ClientError>) -> Result<T, ClientError> {
        let mut attempt = 0;
        loop {
            match f() {
                Err(ClientError::ServiceUnavailable(msg)) => match self.backoff.get(attempt) {
                    Some(d) => {
                        (self.sleep)(*d);
                        attempt += 1;
                    }
                    None => return Err(ClientError::ServiceUnavailable(msg)),
                },
                other => return other,
            }
        }
    }
}
