//! Canned backends for tests: a response queue and an always-failing transport.

use super::{BackendQuery, ChatBackend, ClientError};
use std::collections::VecDeque;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Mutex;

/// Replays a fixed queue of raw responses, one per completion call.
pub struct ScriptedBackend {
    responses: Mutex<VecDeque<String>>,
    calls: AtomicU32,
}

impl ScriptedBackend {
    pub fn new<S: Into<String>>(responses: Vec<S>) -> Self {
        ScriptedBackend {
            responses: Mutex::new(responses.into_iter().map(Into::into).collect()),
            calls: AtomicU32::new(0),
        }
    }

    /// Completion calls served so far.
    pub fn calls(&self) -> u32 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, _query: &BackendQuery<'_>) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.responses
            .lock()
            .expect("scripted queue lock")
            .pop_front()
            .ok_or_else(|| ClientError::Unavailable {
                reason: "scripted response queue exhausted".into(),
                raw: None,
            })
    }

    fn name(&self) -> &'static str {
        "scripted"
    }
}

/// Transport that always fails, for exercising degradation paths.
pub struct UnavailableBackend;

impl ChatBackend for UnavailableBackend {
    fn complete(&self, _query: &BackendQuery<'_>) -> Result<String, ClientError> {
        Err(ClientError::Unavailable {
            reason: "backend configured as unavailable".into(),
            raw: None,
        })
    }

    fn name(&self) -> &'static str {
        "unavailable"
    }
}
