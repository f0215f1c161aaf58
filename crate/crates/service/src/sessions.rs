//! In-memory session table with a capacity bound and idle expiry.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use dialogue_core::dialogue::Session;

/// A session behind an async mutex. Tokio's mutex grants the lock in
/// request order, which gives per-session FIFO processing.
pub type SharedSession = Arc<tokio::sync::Mutex<Session>>;

struct Entry {
    session: SharedSession,
    last_used: Instant,
}

/// Returned when the table is full; `retry_after` is the time until the
/// least recently used session expires.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoreFull {
    pub retry_after: Duration,
}

pub struct SessionStore {
    entries: Mutex<HashMap<String, Entry>>,
    capacity: usize,
    idle_expiry: Duration,
}

/// 128 random bits from the thread-local CSPRNG, as 32 hex digits.
fn new_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

impl SessionStore {
    pub fn new(capacity: usize, idle_expiry: Duration) -> Self {
        Self {
            entries: Mutex::new(HashMap::new()),
            capacity,
            idle_expiry,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn purge(&self, entries: &mut HashMap<String, Entry>, now: Instant) {
        entries.retain(|_, e| now.duration_since(e.last_used) < self.idle_expiry);
    }

    pub fn create(&self) -> Result<String, StoreFull> {
        let now = Instant::now();
        let mut entries = self.entries.lock().expect("session table poisoned");
        self.purge(&mut entries, now);
        if entries.len() >= self.capacity {
            let oldest = entries.values().map(|e| e.last_used).min().unwrap_or(now);
            let retry_after = self.idle_expiry.saturating_sub(now.duration_since(oldest));
            return Err(StoreFull { retry_after });
        }
        let id = loop {
            let id = new_id();
            if !entries.contains_key(&id) {
                break id;
            }
        };
        let session = Arc::new(tokio::sync::Mutex::new(Session::new(id.clone())));
        entries.insert(id.clone(), Entry { session, last_used: now });
        Ok(id)
    }

    /// Looks up a live session and marks it used. Expired sessions are
    /// removed and reported as missing.
    pub fn get(&self, id: &str) -> Option<SharedSession> {
        let now = Instant::now();
        let mut entries = self.entries.lock().expect("session table poisoned");
        match entries.get_mut(id) {
            Some(e) if now.duration_since(e.last_used) < self.idle_expiry => {
                e.last_used = now;
                Some(e.session.clone())
            }
            Some(_) => {
                entries.remove(id);
                None
            }
            None => None,
        }
    }

    pub fn len(&self) -> usize {
        let mut entries = self.entries.lock().expect("session table poisoned");
        self.purge(&mut entries, Instant::now());
        entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
