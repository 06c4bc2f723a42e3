use super::{check_request, BackendInfo, ScoringBackend, TokenScore};
use crate::{BackendError, TokenId};

/// Every token gets probability `1/V`; the argmax is always token 0.
#[derive(Debug, Clone)]
pub struct UniformBackend {
    vocab_size: u32,
}

impl UniformBackend {
    pub fn new(vocab_size: u32) -> Self {
        Self { vocab_size }
    }
}

impl ScoringBackend for UniformBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            model_id: format!("uniform-{}", self.vocab_size),
            vocab_size: self.vocab_size,
            bos_id: None,
            deterministic: true,
            scores_empty_context: true,
            reported_peak_mem_bytes: None,
        }
    }

    fn score_window(
        &self,
        context: &[TokenId],
        targets: &[TokenId],
    ) -> Result<Vec<TokenScore>, BackendError> {
        check_request(self.vocab_size, context, targets)?;
        let lp = -f64::from(self.vocab_size).ln();
        Ok(vec![
            TokenScore {
                logprob_nats: lp,
                argmax_id: 0
            };
            targets.len()
        ])
    }
}
