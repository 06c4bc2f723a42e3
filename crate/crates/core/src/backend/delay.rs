use std::time::Duration;

use super::{BackendInfo, ScoringBackend, TokenScore};
use crate::{BackendError, TokenId};

/// Sleeps for a fixed delay before every call, then defers to `inner`.
#[derive(Debug, Clone)]
pub struct DelayBackend<B> {
    inner: B,
    delay: Duration,
}

impl<B: ScoringBackend> DelayBackend<B> {
    pub fn new(inner: B, delay: Duration) -> Self {
        Self { inner, delay }
    }

    pub fn delay(&self) -> Duration {
        self.delay
    }
}

impl<B: ScoringBackend> ScoringBackend for DelayBackend<B> {
    fn info(&self) -> BackendInfo {
        self.inner.info()
    }

    fn max_parallelism(&self) -> Option<usize> {
        self.inner.max_parallelism()
    }

    fn score_window(
        &self,
        context: &[TokenId],
        targets: &[TokenId],
    ) -> Result<Vec<TokenScore>, BackendError> {
        std::thread::sleep(self.delay);
        self.inner.score_window(context, targets)
    }
}
