use std::sync::Arc;

use super::{check_request, BackendInfo, ScoringBackend, TokenScore};
use crate::markov::MarkovModel;
use crate::{BackendError, TokenId};

/// Serves scores straight from a [`MarkovModel`].
///
/// Empty contexts are answered from the order-0 table, so no BOS is needed.
#[derive(Debug, Clone)]
pub struct MarkovBackend {
    model: Arc<MarkovModel>,
    model_id: String,
}

impl MarkovBackend {
    pub fn new(model: Arc<MarkovModel>) -> Self {
        let model_id = format!("markov-k{}", model.order());
        Self { model, model_id }
    }

    pub fn with_model_id(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    pub fn model(&self) -> &MarkovModel {
        &self.model
    }
}

impl ScoringBackend for MarkovBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            model_id: self.model_id.clone(),
            vocab_size: self.model.vocab_size(),
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
        check_request(self.model.vocab_size(), context, targets)?;
        let keep = self.model.order().min(context.len());
        let mut history: Vec<TokenId> = context[context.len() - keep..].to_vec();
        let mut out = Vec::with_capacity(targets.len());
        for &t in targets {
            out.push(TokenScore {
                logprob_nats: self.model.log_prob(&history, t),
                argmax_id: self.model.argmax(&history),
            });
            history.push(t);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;

    fn backend() -> MarkovBackend {
        let doc = Document {
            doc_id: 0,
            tokens: vec![0, 1, 0, 1, 0],
        };
        MarkovBackend::new(Arc::new(MarkovModel::fit([doc], 1, 2, 1.0).unwrap()))
    }

    #[test]
    fn teacher_forced_scores() {
        let b = backend();
        let out = b.score_window(&[], &[0, 1]).unwrap();
        assert_eq!(out.len(), 2);
        // p(0 | ∅) from the order-0 table: (2 + 1) / (4 + 2)
        assert!((out[0].logprob_nats - 0.5f64.ln()).abs() < 1e-15);
        assert!((out[1].logprob_nats - 0.75f64.ln()).abs() < 1e-15);
        assert!((out[1].logprob_nats + 0.2877).abs() < 1e-4);
        assert_eq!(out[1].argmax_id, 1);
    }

    #[test]
    fn deterministic_and_context_aware() {
        let b = backend();
        assert_eq!(
            b.score_window(&[1, 0], &[1, 0]).unwrap(),
            b.score_window(&[1, 0], &[1, 0]).unwrap()
        );
        let with_ctx = b.score_window(&[0], &[1]).unwrap();
        assert_eq!(with_ctx[0].logprob_nats, b.model().log_prob(&[0], 1));
    }

    #[test]
    fn rejects_bad_requests() {
        let b = backend();
        assert!(matches!(
            b.score_window(&[], &[]),
            Err(BackendError::BadRequest(_))
        ));
        assert!(matches!(
            b.score_window(&[], &[2]),
            Err(BackendError::BadRequest(_))
        ));
    }
}
