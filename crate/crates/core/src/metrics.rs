//! Binary classification metrics: rank AUC, recall and specificity, and
//! their evaluation along acquisition rollouts.

use thiserror::Error;

use crate::classifier::ClassifierNet;
use crate::masking::{fraction_to_count, init_mask, CartesianMask, MaskError, MaskInit};
use crate::phantom::Slice;
use crate::policy::{rollout_greedy_until, rollout_random_until, EpisodeTrace, PolicyError, PolicyNet};
use crate::scalar::Scalar;
use crate::seed::tagged_seed;

const TAG_EVAL_INIT: u64 = 21;
const TAG_EVAL_RANDOM: u64 = 22;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("metric needs both classes (positives {positives}, negatives {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub auc: f64,
    pub recall: f64,
    pub specificity: f64,
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass { positives, negatives });
    }
    Ok((positives, negatives))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from average ranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    let (n_pos, n_neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based average rank of the tie group i..=j
        let rank = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += rank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// `(TP/(TP+FN), TN/(TN+FP))` with `score >= threshold` predicted positive.
pub fn recall_specificity(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64), MetricsError> {
    let (n_pos, n_neg) = class_counts(scores, labels)?;
    let tp = scores.iter().zip(labels).filter(|(&s, &l)| l == 1 && s >= threshold).count();
    let tn = scores.iter().zip(labels).filter(|(&s, &l)| l == 0 && s < threshold).count();
    Ok((tp as f64 / n_pos as f64, tn as f64 / n_neg as f64))
}

pub fn evaluate(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalResult, MetricsError> {
    let (n_pos, n_neg) = class_counts(scores, labels)?;
    let (recall, specificity) = recall_specificity(scores, labels, threshold)?;
    Ok(EvalResult { auc: auc(scores, labels)?, recall, specificity, threshold, n_pos, n_neg })
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("rate {rate} gives {count} columns, outside {initial}..={cols}")]
    Rate { rate: f64, count: usize, initial: usize, cols: usize },
    #[error("{slices} slices but {masks} initial masks")]
    InitCount { slices: usize, masks: usize },
    #[error("no traces")]
    NoTraces,
}

/// How lines are chosen after the initial mask.
#[derive(Debug, Clone, Copy)]
pub enum Acquisition<'a, T> {
    /// Greedy rollout of a trained policy.
    Policy(&'a PolicyNet<T>),
    /// Uniformly random unsampled lines, seeded per slice.
    Random { seed: u64 },
}

/// One initial mask per slice, seeded from `seed` and the slice id so that
/// every strategy starts from the same masks.
pub fn initial_masks(
    slices: &[Slice],
    cols: usize,
    initial_fraction: f64,
    center_fraction: f64,
    seed: u64,
) -> Result<Vec<CartesianMask>, MaskError> {
    slices
        .iter()
        .map(|s| {
            let seed = tagged_seed(seed, TAG_EVAL_INIT, s.id as u64);
            init_mask(cols, MaskInit { initial_fraction, center_fraction, seed })
        })
        .collect()
}

/// Rolls every slice out for up to `max_lines` acquisitions. An optional
/// `stop_confidence` ends an episode early once the prediction is that sure.
pub fn rollouts<T: Scalar>(
    classifier: &ClassifierNet<T>,
    strategy: Acquisition<'_, T>,
    slices: &[Slice],
    inits: &[CartesianMask],
    max_lines: usize,
    stop_confidence: Option<f64>,
) -> Result<Vec<EpisodeTrace>, EvaluationError> {
    if slices.len() != inits.len() {
        return Err(EvaluationError::InitCount { slices: slices.len(), masks: inits.len() });
    }
    slices
        .iter()
        .zip(inits)
        .map(|(s, init)| {
            let budget = max_lines.min(init.cols() - init.len());
            Ok(match strategy {
                Acquisition::Policy(p) => rollout_greedy_until(p, classifier, s, init, budget, stop_confidence)?,
                Acquisition::Random { seed } => {
                    let seed = tagged_seed(seed, TAG_EVAL_RANDOM, s.id as u64);
                    rollout_random_until(classifier, s, init, budget, seed, stop_confidence)?
                }
            })
        })
        .collect()
}

/// Lines to acquire after `initial` columns to reach `rate`.
pub fn lines_for_rate(rate: f64, initial: usize, cols: usize) -> Result<usize, EvaluationError> {
    let count = fraction_to_count(rate, cols);
    if !(0.0..=1.0).contains(&rate) || count < initial || count > cols {
        return Err(EvaluationError::Rate { rate, count, initial, cols });
    }
    Ok(count - initial)
}

/// Metrics of the predictions made after `lines` acquisitions. Episodes that
/// stopped early contribute their last prediction.
pub fn evaluate_after_lines(traces: &[EpisodeTrace], lines: usize, threshold: f64) -> Result<EvalResult, EvaluationError> {
    if traces.is_empty() {
        return Err(EvaluationError::NoTraces);
    }
    let scores: Vec<f64> = traces.iter().map(|t| t.steps[lines.min(t.lines())].prob).collect();
    let labels: Vec<u8> = traces.iter().map(|t| t.label).collect();
    Ok(evaluate(&scores, &labels, threshold)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateResult {
    pub rate: f64,
    pub lines: usize,
    pub result: EvalResult,
}

/// Per-rate metrics read off traces that all started from `initial`-column
/// masks. Rollouts are prefix-consistent (the choice at step `t` does not
/// depend on the final budget), so one long rollout serves every rate.
pub fn rates_from_traces(traces: &[EpisodeTrace], rates: &[f64], threshold: f64) -> Result<Vec<RateResult>, EvaluationError> {
    let first = traces.first().ok_or(EvaluationError::NoTraces)?;
    let (initial, cols) = (first.initial_mask.len(), first.initial_mask.cols());
    rates
        .iter()
        .map(|&rate| {
            let lines = lines_for_rate(rate, initial, cols)?;
            Ok(RateResult { rate, lines, result: evaluate_after_lines(traces, lines, threshold)? })
        })
        .collect()
}

/// Runs each slice to every rate in `rates` with `strategy` and scores the
/// terminal predictions.
pub fn evaluate_at_rates<T: Scalar>(
    classifier: &ClassifierNet<T>,
    strategy: Acquisition<'_, T>,
    slices: &[Slice],
    inits: &[CartesianMask],
    rates: &[f64],
) -> Result<Vec<RateResult>, EvaluationError> {
    let first = inits.first().ok_or(EvaluationError::NoTraces)?;
    let mut max_lines = 0;
    for &rate in rates {
        max_lines = max_lines.max(lines_for_rate(rate, first.len(), first.cols())?);
    }
    let traces = rollouts(classifier, strategy, slices, inits, max_lines, None)?;
    rates_from_traces(&traces, rates, DEFAULT_THRESHOLD)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineResult {
    pub lines: usize,
    /// Columns sampled, initial mask included.
    pub sampled: usize,
    pub result: EvalResult,
}

/// Metrics after each cumulative line count `0..=max_lines`.
pub fn per_line_from_traces(traces: &[EpisodeTrace], max_lines: usize, threshold: f64) -> Result<Vec<LineResult>, EvaluationError> {
    let first = traces.first().ok_or(EvaluationError::NoTraces)?;
    let initial = first.initial_mask.len();
    (0..=max_lines)
        .map(|lines| Ok(LineResult { lines, sampled: initial + lines, result: evaluate_after_lines(traces, lines, threshold)? }))
        .collect()
}

pub fn evaluate_per_line<T: Scalar>(
    classifier: &ClassifierNet<T>,
    policy: &PolicyNet<T>,
    slices: &[Slice],
    inits: &[CartesianMask],
    max_lines: usize,
) -> Result<Vec<LineResult>, EvaluationError> {
    let traces = rollouts(classifier, Acquisition::Policy(policy), slices, inits, max_lines, None)?;
    per_line_from_traces(&traces, max_lines, DEFAULT_THRESHOLD)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut acc = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    pairs += 1.0;
                    acc += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        acc / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(MetricsError::SingleClass { .. })));
    }

    #[test]
    fn recall_specificity_examples() {
        assert_eq!(recall_specificity(&[1.0, 1.0, 0.0], &[1, 1, 0], 0.5).unwrap(), (1.0, 1.0));
        assert_eq!(recall_specificity(&[0.0; 4], &[1, 0, 1, 0], 0.5).unwrap(), (0.0, 1.0));
        assert_eq!(recall_specificity(&[0.6, 0.4, 0.7, 0.2], &[1, 1, 0, 0], 0.5).unwrap(), (0.5, 0.5));
        assert!(recall_specificity(&[0.5], &[0], 0.5).is_err());
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec((0u32..20).prop_map(|v| v as f64 / 20.0), n),
                prop::collection::vec(0u8..2, n),
            )
        })
        .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
    }

    proptest! {
        #[test]
        fn auc_matches_pair_enumeration((s, l) in scored()) {
            prop_assert!((auc(&s, &l).unwrap() - brute_auc(&s, &l)).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_to_monotone_transform((s, l) in scored()) {
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert!((auc(&s, &l).unwrap() - auc(&t, &l).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn label_and_score_swap((s, l) in scored()) {
            let s2: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
            let l2: Vec<u8> = l.iter().map(|v| 1 - v).collect();
            prop_assert!((auc(&s, &l).unwrap() - auc(&s2, &l2).unwrap()).abs() < 1e-12);
            // strict inequality at the threshold flips, so compare away from it
            let th = 0.525;
            let (r, sp) = recall_specificity(&s, &l, th).unwrap();
            let (r2, sp2) = recall_specificity(&s2, &l2, 1.0 - th).unwrap();
            prop_assert_eq!((r, sp), (sp2, r2));
        }

        #[test]
        fn reversed_distinct_scores_complement(perm in Just((0..12).collect::<Vec<usize>>()).prop_shuffle(), l in prop::collection::vec(0u8..2, 12)) {
            prop_assume!(l.contains(&0) && l.contains(&1));
            let s: Vec<f64> = perm.iter().map(|&p| p as f64).collect();
            let r: Vec<f64> = s.iter().map(|v| -v).collect();
            prop_assert!((auc(&s, &l).unwrap() + auc(&r, &l).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
