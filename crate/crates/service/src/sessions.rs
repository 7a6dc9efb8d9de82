use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use ddcs_core::harness::{Runner, WorldConfig};

use crate::ApiError;

pub const MAX_SESSIONS: usize = 64;

pub type Session = Arc<Mutex<Runner>>;

#[derive(Default)]
pub struct Sessions {
    next: u64,
    live: HashMap<u64, Session>,
}

impl Sessions {
    pub fn open(&mut self, config: WorldConfig) -> Result<u64, ApiError> {
        if self.live.len() >= MAX_SESSIONS {
            return Err(ApiError::TooManySessions(MAX_SESSIONS));
        }
        let runner = Runner::new(config)?;
        self.next += 1;
        self.live.insert(self.next, Arc::new(Mutex::new(runner)));
        Ok(self.next)
    }

    pub fn get(&self, id: u64) -> Result<Session, ApiError> {
        self.live.get(&id).cloned().ok_or(ApiError::NoSession(id))
    }

    pub fn close(&mut self, id: u64) -> Result<(), ApiError> {
        self.live.remove(&id).map(|_| ()).ok_or(ApiError::NoSession(id))
    }
}
