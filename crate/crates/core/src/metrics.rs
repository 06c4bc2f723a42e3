//! Loss, perplexity, accuracy and protocol deltas.
//!
//! All losses are natural-log negative log-likelihoods (nats); perplexity is
//! `exp(mean NLL)`.

use serde::{Deserialize, Serialize};

use crate::backend::ScoredToken;
use crate::protocol::{Aggregation, ProtocolConfig};
use crate::sysmetrics::SystemMetrics;
use crate::{Error, Result};

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = NeumaierSum::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().collect::<NeumaierSum>().value()
}

/// NLL total and token count of one scored window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowTotal {
    pub nll_sum: f64,
    pub count: usize,
}

impl WindowTotal {
    pub fn from_scored(scored: &[ScoredToken]) -> Self {
        Self {
            nll_sum: compensated_sum(scored.iter().map(|t| -t.logprob_nats)),
            count: scored.len(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.nll_sum / self.count as f64
    }
}

/// Mean NLL of one window.
pub fn window_loss(scored: &[ScoredToken]) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::data("window_loss of an empty window"));
    }
    Ok(WindowTotal::from_scored(scored).mean())
}

/// Reduce window totals to `(mean NLL, perplexity)`.
///
/// `WindowMean` gives every window equal weight; `TokenMean` divides the
/// global NLL sum by the global token count. Windows with no scored tokens
/// are ignored.
pub fn aggregate(windows: &[WindowTotal], mode: Aggregation) -> Result<(f64, f64)> {
    let windows: Vec<&WindowTotal> = windows.iter().filter(|w| w.count > 0).collect();
    if windows.is_empty() {
        return Err(Error::data("nothing to aggregate: no scored tokens"));
    }
    let mean = match mode {
        Aggregation::WindowMean => {
            compensated_sum(windows.iter().map(|w| w.mean())) / windows.len() as f64
        }
        Aggregation::TokenMean => {
            let tokens: usize = windows.iter().map(|w| w.count).sum();
            compensated_sum(windows.iter().map(|w| w.nll_sum)) / tokens as f64
        }
    };
    Ok((mean, mean.exp()))
}

/// Percentage of positions where the argmax equals the true token.
pub fn token_accuracy(scored: &[ScoredToken]) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::data("token_accuracy of an empty list"));
    }
    let hits = scored.iter().filter(|t| t.argmax_id == t.token_id).count();
    Ok(accuracy_pct(hits, scored.len()))
}

pub fn accuracy_pct(correct: usize, total: usize) -> f64 {
    100.0 * correct as f64 / total as f64
}

/// `100 · (start − end) / start`.
pub fn percent_reduction(start: f64, end: f64) -> Result<f64> {
    if start.is_nan() || start <= 0.0 {
        return Err(Error::data(format!(
            "percent_reduction needs start > 0, got {start}"
        )));
    }
    Ok(100.0 * (start - end) / start)
}

/// Result of one (model, protocol, length) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model_id: String,
    pub protocol: ProtocolConfig,
    pub seq_len: usize,
    pub n_sequences: usize,
    pub n_windows: usize,
    pub scored_tokens: usize,
    pub correct_tokens: usize,
    #[serde(serialize_with = "crate::numfmt::serialize")]
    pub nll_sum_nats: f64,
    #[serde(serialize_with = "crate::numfmt::serialize")]
    pub mean_nll_nats: f64,
    #[serde(serialize_with = "crate::numfmt::serialize")]
    pub ppl: f64,
    #[serde(serialize_with = "crate::numfmt::serialize")]
    pub accuracy_pct: f64,
    pub cost_tokens: u64,
    pub n_calls: usize,
    pub skip_first_token: bool,
    /// Timing and memory. Varies between otherwise identical runs.
    pub system: SystemMetrics,
}

impl EvalRecord {
    /// The record without its `system` block.
    pub fn data_view(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("EvalRecord serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("system");
        }
        v
    }

    pub fn window_size(&self) -> Option<usize> {
        self.protocol.window_plan().map(|p| p.window_size)
    }

    pub fn stride(&self) -> Option<usize> {
        self.protocol.window_plan().map(|p| p.stride)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Better {
    NonSliding,
    Sliding,
}

impl Better {
    /// Strictly positive deltas favour non-sliding; ties go to sliding.
    pub fn from_delta(delta: f64) -> Self {
        if delta > 0.0 {
            Better::NonSliding
        } else {
            Better::Sliding
        }
    }

    pub fn arrow(self) -> &'static str {
        match self {
            Better::NonSliding => "↑",
            Better::Sliding => "↓",
        }
    }
}

/// One row of the non-sliding vs. sliding comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub model_id: String,
    pub seq_len: usize,
    #[serde(serialize_with = "crate::numfmt::serialize")]
    pub ppl_ns: f64,
    #[serde(serialize_with = "crate::numfmt::serialize")]
    pub ppl_s: f64,
    /// `ppl_s − ppl_ns`
    #[serde(serialize_with = "crate::numfmt::serialize")]
    pub delta_ppl: f64,
    #[serde(serialize_with = "crate::numfmt::serialize")]
    pub acc_ns: f64,
    #[serde(serialize_with = "crate::numfmt::serialize")]
    pub acc_s: f64,
    /// `acc_ns − acc_s`
    #[serde(serialize_with = "crate::numfmt::serialize")]
    pub delta_acc: f64,
    pub ppl_better: Better,
    pub acc_better: Better,
}

impl DeltaRow {
    pub fn from_values(
        model_id: impl Into<String>,
        seq_len: usize,
        ppl_ns: f64,
        ppl_s: f64,
        acc_ns: f64,
        acc_s: f64,
    ) -> Self {
        let delta_ppl = ppl_s - ppl_ns;
        let delta_acc = acc_ns - acc_s;
        Self {
            model_id: model_id.into(),
            seq_len,
            ppl_ns,
            ppl_s,
            delta_ppl,
            acc_ns,
            acc_s,
            delta_acc,
            ppl_better: Better::from_delta(delta_ppl),
            acc_better: Better::from_delta(delta_acc),
        }
    }
}

/// Compare a non-sliding record against a sliding one.
pub fn delta_metrics(ns: &EvalRecord, s: &EvalRecord) -> Result<DeltaRow> {
    if ns.model_id != s.model_id || ns.seq_len != s.seq_len {
        return Err(Error::data(format!(
            "delta_metrics: mismatched records ({} @ {}) vs ({} @ {})",
            ns.model_id, ns.seq_len, s.model_id, s.seq_len
        )));
    }
    Ok(DeltaRow::from_values(
        ns.model_id.clone(),
        ns.seq_len,
        ns.ppl,
        s.ppl,
        ns.accuracy_pct,
        s.accuracy_pct,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tok(position: usize, token_id: u32, logprob: f64, argmax: u32) -> ScoredToken {
        ScoredToken {
            position,
            token_id,
            logprob_nats: logprob,
            argmax_id: argmax,
            context_len: position,
        }
    }

    fn totals(pairs: &[(f64, usize)]) -> Vec<WindowTotal> {
        pairs
            .iter()
            .map(|&(nll_sum, count)| WindowTotal { nll_sum, count })
            .collect()
    }

    #[test]
    fn window_loss_examples() {
        assert_eq!(
            window_loss(&[tok(0, 0, -1.0, 0), tok(1, 0, -3.0, 0)]).unwrap(),
            2.0
        );
        let u = -(256f64).ln();
        let l = window_loss(&[tok(0, 0, u, 0), tok(1, 0, u, 0), tok(2, 0, u, 0)]).unwrap();
        assert!((l - 5.545177444479562).abs() < 1e-12);
        // oracle probabilities 0.5 and 0.75
        let l = window_loss(&[tok(0, 0, 0.5f64.ln(), 0), tok(1, 1, 0.75f64.ln(), 1)]).unwrap();
        assert!((l - 0.4904146265058631).abs() < 1e-12, "{l}");
        assert!(window_loss(&[]).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let (mean, ppl) =
            aggregate(&totals(&[(2.0, 1), (4.0, 1)]), Aggregation::WindowMean).unwrap();
        assert_eq!(mean, 3.0);
        assert!((ppl - 20.085536923187668).abs() < 1e-12);

        let w = totals(&[(4.0, 2), (1.0, 1)]);
        assert_eq!(aggregate(&w, Aggregation::WindowMean).unwrap().0, 1.5);
        assert!((aggregate(&w, Aggregation::TokenMean).unwrap().0 - 5.0 / 3.0).abs() < 1e-15);

        assert_eq!(
            aggregate(&totals(&[(0.0, 5)]), Aggregation::TokenMean)
                .unwrap()
                .1,
            1.0
        );
        assert!(aggregate(&[], Aggregation::TokenMean).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let all: Vec<_> = (0..4).map(|i| tok(i, 2, -1.0, 2)).collect();
        assert_eq!(token_accuracy(&all).unwrap(), 100.0);
        let none: Vec<_> = (0..4).map(|i| tok(i, 2, -1.0, 3)).collect();
        assert_eq!(token_accuracy(&none).unwrap(), 0.0);
        let some: Vec<_> = (0..8)
            .map(|i| tok(i, 1, -1.0, if i < 3 { 1 } else { 0 }))
            .collect();
        assert_eq!(token_accuracy(&some).unwrap(), 37.5);
        assert!(token_accuracy(&[]).is_err());
    }

    #[test]
    fn delta_examples() {
        let r = DeltaRow::from_values("m", 8192, 12.9255, 15.7140, 47.1186, 43.0966);
        assert!((r.delta_ppl - 2.7885).abs() < 1e-9);
        assert!((r.delta_acc - 4.0220).abs() < 1e-9);
        assert_eq!(r.ppl_better, Better::NonSliding);
        assert_eq!(r.acc_better, Better::NonSliding);

        let r = DeltaRow::from_values("m", 1024, 15.7299, 15.7140, 43.6972, 43.0966);
        assert!((r.delta_ppl + 0.0159).abs() < 1e-9);
        assert_eq!(r.ppl_better, Better::Sliding);

        let r = DeltaRow::from_values("m", 1024, 10.0, 10.0, 40.0, 40.0);
        assert_eq!((r.delta_ppl, r.delta_acc), (0.0, 0.0));
        assert_eq!(r.ppl_better, Better::Sliding);
        assert_eq!(r.acc_better, Better::Sliding);
    }

    #[test]
    fn percent_reduction_examples() {
        assert!((percent_reduction(15.2, 12.6).unwrap() - 17.105263157894736).abs() < 1e-9);
        assert!((percent_reduction(14.0, 11.4).unwrap() - 18.571428571428573).abs() < 1e-9);
        assert_eq!(percent_reduction(3.0, 3.0).unwrap(), 0.0);
        assert!(percent_reduction(0.0, 1.0).is_err());
        assert!(percent_reduction(-1.0, 1.0).is_err());
    }

    #[test]
    fn neumaier_beats_naive_on_cancellation() {
        let xs = [1.0, 1e100, 1.0, -1e100];
        assert_eq!(compensated_sum(xs), 2.0);
    }

    proptest! {
        #[test]
        fn log_round_trip(pairs in proptest::collection::vec((0.0f64..20.0, 1usize..50), 1..20)) {
            let w = totals(&pairs);
            for mode in [Aggregation::WindowMean, Aggregation::TokenMean] {
                let (mean, ppl) = aggregate(&w, mode).unwrap();
                let back = ppl.ln();
                prop_assert!((back - mean).abs() <= 1e-12 * mean.abs().max(1e-300));
            }
        }

        #[test]
        fn constant_stream_scale(c in 0.0f64..12.0, n in 1usize..300) {
            let scored: Vec<_> = (0..n).map(|i| tok(i, 0, -c, 0)).collect();
            let w = [WindowTotal::from_scored(&scored)];
            let (_, ppl) = aggregate(&w, Aggregation::TokenMean).unwrap();
            prop_assert!((ppl - c.exp()).abs() <= 1e-12 * c.exp());
        }

        #[test]
        fn equal_windows_aggregate_equally(sums in proptest::collection::vec(0.0f64..50.0, 1..30), n in 1usize..10) {
            let w: Vec<_> = sums.iter().map(|&s| WindowTotal { nll_sum: s, count: n }).collect();
            let a = aggregate(&w, Aggregation::WindowMean).unwrap().0;
            let b = aggregate(&w, Aggregation::TokenMean).unwrap().0;
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn accuracy_permutation_invariant(
            pairs in proptest::collection::vec((0u32..3, 0u32..3), 1..40),
            seed in any::<u64>(),
        ) {
            let scored: Vec<_> = pairs.iter().enumerate().map(|(i, &(t, a))| tok(i, t, -1.0, a)).collect();
            let mut shuffled = scored.clone();
            let mut rng = crate::rng::SplitMix64::new(seed);
            for i in (1..shuffled.len()).rev() {
                let j = rng.below(i as u64 + 1) as usize;
                shuffled.swap(i, j);
            }
            prop_assert_eq!(token_accuracy(&scored).unwrap(), token_accuracy(&shuffled).unwrap());
        }
    }
}
