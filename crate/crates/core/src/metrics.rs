//! BLEU, ROUGE-N, ROUGE-L and closed-set accuracy over word tokens.

use std::collections::HashMap;

use crate::data::normalize_answer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    /// BLEU n-gram weights; `None` means uniform `1/n`.
    pub bleu_weights: Option<Vec<f64>>,
    pub rouge_beta: f64,
    /// Add-one smoothing of BLEU precisions for orders above one.
    pub smoothing: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            bleu_weights: None,
            rouge_beta: 1.0,
            smoothing: false,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rouge_beta > 0.0) {
            return Err(Error::config("ROUGE-L beta must be positive"));
        }
        if let Some(w) = &self.bleu_weights {
            if w.is_empty() || w.iter().any(|v| *v < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::config("BLEU weights must be non-negative and sum to 1"));
            }
        }
        Ok(())
    }

    fn weights(&self, n: usize) -> Vec<f64> {
        match &self.bleu_weights {
            Some(w) if w.len() == n => w.clone(),
            _ => vec![1.0 / n as f64; n],
        }
    }
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    out
}

/// Clipped matches and candidate n-gram total.
fn clipped<S: AsRef<str>>(cand: &[S], reference: &[S], n: usize) -> (usize, usize) {
    let c = ngrams(cand, n);
    let r = ngrams(reference, n);
    let matched = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, cand.len().saturating_sub(n - 1))
}

fn bleu_from_counts(
    counts: &[(usize, usize)],
    cand_len: usize,
    ref_len: usize,
    cfg: &MetricConfig,
) -> f64 {
    if cand_len == 0 {
        return 0.0;
    }
    let weights = cfg.weights(counts.len());
    let mut log_sum = 0.0;
    for (i, (&(m, total), w)) in counts.iter().zip(&weights).enumerate() {
        let (m, total) = if cfg.smoothing && i > 0 {
            (m as f64 + 1.0, total as f64 + 1.0)
        } else {
            (m as f64, total as f64)
        };
        if m == 0.0 || total == 0.0 {
            return 0.0;
        }
        log_sum += w * (m / total).ln();
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * log_sum.exp()
}

/// Sentence BLEU up to order `n` against a single reference.
pub fn bleu_n<S: AsRef<str>>(cand: &[S], reference: &[S], n: usize, cfg: &MetricConfig) -> f64 {
    assert!(n >= 1, "BLEU order must be at least 1");
    let counts: Vec<(usize, usize)> = (1..=n).map(|k| clipped(cand, reference, k)).collect();
    bleu_from_counts(&counts, cand.len(), reference.len(), cfg)
}

/// Corpus BLEU: clipped counts and lengths summed over all pairs before
/// combining.
pub fn corpus_bleu<S: AsRef<str>>(pairs: &[(Vec<S>, Vec<S>)], n: usize, cfg: &MetricConfig) -> f64 {
    assert!(n >= 1, "BLEU order must be at least 1");
    let mut counts = vec![(0usize, 0usize); n];
    let (mut c_len, mut r_len) = (0, 0);
    for (cand, reference) in pairs {
        for (k, acc) in counts.iter_mut().enumerate() {
            let (m, t) = clipped(cand, reference, k + 1);
            acc.0 += m;
            acc.1 += t;
        }
        c_len += cand.len();
        r_len += reference.len();
    }
    bleu_from_counts(&counts, c_len, r_len, cfg)
}

/// Clipped n-gram matches over reference n-grams.
pub fn rouge_n<S: AsRef<str>>(cand: &[S], reference: &[S], n: usize) -> f64 {
    assert!(n >= 1, "ROUGE order must be at least 1");
    if reference.len() < n {
        return 0.0;
    }
    let (matched, _) = clipped(reference, cand, n);
    matched as f64 / (reference.len() - n + 1) as f64
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with recall over the reference and precision over the
/// candidate.
pub fn rouge_l<S: AsRef<str>>(cand: &[S], reference: &[S], beta: f64) -> f64 {
    let lcs = lcs_len(cand, reference);
    if lcs == 0 {
        return 0.0;
    }
    let r = lcs as f64 / reference.len() as f64;
    let p = lcs as f64 / cand.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * r * p / (r + b2 * p)
}

/// Fraction of exact matches after answer normalization.
pub fn closed_set_accuracy<S: AsRef<str>>(predictions: &[S], golds: &[S]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::rejected(format!(
            "{} predictions for {} gold answers",
            predictions.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Err(Error::rejected("no answers to score"));
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| normalize_answer(p.as_ref()) == normalize_answer(g.as_ref()))
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub count: usize,
}

/// `metric,value,count` table.
pub fn report_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,value,count\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{}\n", r.metric, r.value, r.count));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_examples() {
        let cfg = MetricConfig::default();
        assert_eq!(bleu_n(&w("a b c d"), &w("a b c d"), 4, &cfg), 1.0);
        let b = bleu_n(&w("the cat"), &w("the cat sat"), 2, &cfg);
        assert!((b - (-0.5f64).exp()).abs() < 1e-12);
        assert!((b - 0.60653).abs() < 1e-5);
        assert_eq!(bleu_n(&w("cat the"), &w("the cat"), 2, &cfg), 0.0);
        assert_eq!(bleu_n(&w(""), &w("the cat"), 2, &cfg), 0.0);
        let smooth = MetricConfig { smoothing: true, ..cfg.clone() };
        assert!(bleu_n(&w("cat the"), &w("the cat"), 2, &smooth) > 0.0);
    }

    #[test]
    fn clipping_limits_repeats() {
        let cfg = MetricConfig::default();
        let b = bleu_n(&w("the the the"), &w("the cat the"), 1, &cfg);
        assert!((b - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn corpus_bleu_of_one_pair_is_sentence_bleu() {
        let cfg = MetricConfig::default();
        let pairs = vec![(w("the cat sat on"), w("the cat sat on the mat"))];
        assert_eq!(
            corpus_bleu(&pairs, 2, &cfg),
            bleu_n(&pairs[0].0, &pairs[0].1, 2, &cfg)
        );
    }

    #[test]
    fn bleu_drops_when_matches_removed() {
        let cfg = MetricConfig::default();
        let reference = w("a b c d e f");
        let mut prev = f64::INFINITY;
        for cand in ["a b c d e f", "a b c d e x", "a b c d x x", "a b c x x x"] {
            let s = bleu_n(&w(cand), &reference, 2, &cfg);
            assert!(s <= prev);
            prev = s;
        }
    }

    #[test]
    fn rouge_n_examples() {
        assert_eq!(rouge_n(&w("a b c"), &w("a b c"), 2), 1.0);
        assert_eq!(rouge_n(&w("x y"), &w("a b"), 1), 0.0);
        assert_eq!(rouge_n(&w("a b"), &w("a b c d"), 1), 0.5);
        assert_eq!(rouge_n(&w("a b"), &w("a"), 2), 0.0);
    }

    #[test]
    fn rouge_l_examples() {
        assert_eq!(rouge_l(&w("a b c"), &w("a b c"), 1.0), 1.0);
        assert_eq!(rouge_l(&w("the cat"), &w("the cat sat"), 1.0), 0.8);
        let rev = rouge_l(&w("c b a"), &w("a b c"), 1.0);
        assert!((rev - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l(&w("x"), &w("a b"), 1.0), 0.0);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(closed_set_accuracy(&["Yes.", "No."], &["Yes.", "No."]).unwrap(), 1.0);
        assert_eq!(closed_set_accuracy(&["Yes.", "No."], &["Yes.", "Yes."]).unwrap(), 0.5);
        assert_eq!(closed_set_accuracy(&["yes"], &["Yes."]).unwrap(), 1.0);
        assert!(closed_set_accuracy(&["yes"], &["Yes.", "No."]).is_err());
    }

    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        if a.is_empty() || b.is_empty() {
            return 0;
        }
        if a[0] == b[0] {
            return 1 + brute_lcs(&a[1..], &b[1..]);
        }
        brute_lcs(&a[1..], b).max(brute_lcs(a, &b[1..]))
    }

    proptest! {
        #[test]
        fn scores_in_unit_interval(a in prop::collection::vec(0u8..5, 0..12), b in prop::collection::vec(0u8..5, 1..12)) {
            let a: Vec<String> = a.iter().map(|x| x.to_string()).collect();
            let b: Vec<String> = b.iter().map(|x| x.to_string()).collect();
            let cfg = MetricConfig::default();
            for s in [bleu_n(&a, &b, 2, &cfg), rouge_n(&a, &b, 1), rouge_l(&a, &b, 1.0)] {
                prop_assert!((0.0..=1.0).contains(&s));
            }
        }

        #[test]
        fn lcs_matches_recursion(a in prop::collection::vec(0u8..4, 0..9), b in prop::collection::vec(0u8..4, 0..9)) {
            let sa: Vec<String> = a.iter().map(|x| x.to_string()).collect();
            let sb: Vec<String> = b.iter().map(|x| x.to_string()).collect();
            prop_assert_eq!(lcs_len(&sa, &sb), brute_lcs(&a, &b));
        }
    }
}
