//! Evaluation metrics: corpus BLEU, chrF, KL divergence, area under a
//! learning curve, and the frequency-binned log-probability report.
//!
//! Everything here is a pure function of its inputs. BLEU smoothing is
//! fixed to add-1 on the numerator and denominator of n-gram precisions
//! for n >= 2; at this corpus scale zero-match 4-grams are routine and
//! add-1 keeps the score well-defined with a closed-form oracle.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

/// Corpus-level BLEU in [0, 100] over token sequences, one reference per
/// hypothesis. Geometric mean of clipped n-gram precisions (n <= max_n)
/// times the brevity penalty. Returns 0 if no 1-gram matches.
pub fn bleu<T: Eq + Hash + Clone>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Metric("bleu: empty hypothesis list".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Metric(format!(
            "bleu: {} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    assert!(max_n >= 1, "bleu: max_n must be at least 1");

    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, rf) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += rf.len();
        for n in 1..=max_n {
            let hc = ngram_counts(hyp, n);
            let rc = ngram_counts(rf, n);
            for (gram, &count) in &hc {
                matched[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
            }
            total[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }

    if matched[0] == 0 {
        return Ok(0.0);
    }
    let mut log_prec_sum = 0.0;
    for n in 1..=max_n {
        let (num, den) = if n == 1 {
            (matched[0] as f64, total[0] as f64)
        } else {
            ((matched[n - 1] + 1) as f64, (total[n - 1] + 1) as f64)
        };
        log_prec_sum += (num / den).ln();
    }
    let geo = (log_prec_sum / max_n as f64).exp();
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * geo)
}

fn ngram_counts<T: Eq + Hash + Clone>(seq: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// chrF in [0, 100]: character n-gram F_beta (n = 1..=char_n, uniform
/// weight), macro-averaged over segments. Whitespace is removed before
/// n-gram extraction; orders where neither side has any n-gram are
/// skipped.
pub fn chrf(hypotheses: &[String], references: &[String], char_n: usize, beta: f64) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Metric("chrf: empty hypothesis list".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Metric(format!(
            "chrf: {} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    assert!(char_n >= 1, "chrf: char_n must be at least 1");
    assert!(beta > 0.0, "chrf: beta must be positive");

    let beta2 = beta * beta;
    let mut seg_scores = Vec::with_capacity(hypotheses.len());
    for (hyp, rf) in hypotheses.iter().zip(references) {
        let h: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
        let r: Vec<char> = rf.chars().filter(|c| !c.is_whitespace()).collect();
        let mut prec_sum = 0.0;
        let mut rec_sum = 0.0;
        let mut orders = 0usize;
        for n in 1..=char_n {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            let h_total: usize = hc.values().sum();
            let r_total: usize = rc.values().sum();
            if h_total == 0 && r_total == 0 {
                continue;
            }
            let matches: usize = hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum();
            prec_sum += if h_total > 0 {
                matches as f64 / h_total as f64
            } else {
                0.0
            };
            rec_sum += if r_total > 0 {
                matches as f64 / r_total as f64
            } else {
                0.0
            };
            orders += 1;
        }
        let score = if orders == 0 {
            0.0
        } else {
            let p = prec_sum / orders as f64;
            let rcl = rec_sum / orders as f64;
            let den = beta2 * p + rcl;
            if den == 0.0 {
                0.0
            } else {
                (1.0 + beta2) * p * rcl / den
            }
        };
        seg_scores.push(score);
    }
    Ok(100.0 * seg_scores.iter().sum::<f64>() / seg_scores.len() as f64)
}

/// KL(p || q) = sum p_i ln(p_i / q_i), with 0 ln 0 = 0. Errors when q has
/// zero mass where p does not.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Metric(format!(
            "kl_divergence: length mismatch {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::Metric(format!(
                "kl_divergence: q[{i}] = {qi} has no mass where p[{i}] = {pi}"
            )));
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl)
}

/// Ordered (step, score) evaluation points with strictly increasing steps.
#[derive(Debug, Clone, Default)]
pub struct LearningCurve {
    points: Vec<(u64, f64)>,
}

impl LearningCurve {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_points(points: Vec<(u64, f64)>) -> Result<Self> {
        let mut c = Self::new();
        for (s, v) in points {
            c.push(s, v)?;
        }
        Ok(c)
    }

    pub fn push(&mut self, step: u64, score: f64) -> Result<()> {
        if let Some(&(last, _)) = self.points.last() {
            if step <= last {
                return Err(Error::Metric(format!(
                    "learning curve steps must increase: {step} after {last}"
                )));
            }
        }
        self.points.push((step, score));
        Ok(())
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Area under the learning curve by the composite trapezoidal rule,
/// normalized by the integration span so the result is in score units.
///
/// Integration runs from the first recorded point to `t_max`. A curve
/// crossing `t_max` is cut there with linear interpolation; a curve ending
/// before `t_max` is integrated up to its last point only, and the span
/// shrinks to match.
pub fn alc(curve: &LearningCurve, t_max: u64) -> Result<f64> {
    let pts = curve.points();
    let mut kept: Vec<(f64, f64)> = pts
        .iter()
        .filter(|&&(s, _)| s <= t_max)
        .map(|&(s, v)| (s as f64, v))
        .collect();
    if let Some(&(s_next, v_next)) = pts.iter().find(|&&(s, _)| s > t_max) {
        let &(s_prev, v_prev) = kept.last().ok_or_else(|| {
            Error::Metric(format!("alc: no curve points at or before t_max {t_max}"))
        })?;
        let w = (t_max as f64 - s_prev) / (s_next as f64 - s_prev);
        kept.push((t_max as f64, v_prev + w * (v_next - v_prev)));
    }
    if kept.len() < 2 {
        return Err(Error::Metric(format!(
            "alc: need at least 2 points at or before t_max {t_max}, have {}",
            kept.len()
        )));
    }
    let span = kept.last().unwrap().0 - kept[0].0;
    let mut area = 0.0;
    for w in kept.windows(2) {
        let (s0, v0) = w[0];
        let (s1, v1) = w[1];
        area += 0.5 * (v0 + v1) * (s1 - s0);
    }
    Ok(area / span)
}

/// One occupied frequency bin of a [`FrequencyBinReport`].
#[derive(Debug, Clone)]
pub struct FrequencyBin {
    pub lo: f64,
    pub hi: f64,
    pub mean_log_unigram: f64,
    pub mean_logprob: f64,
    pub std_err: f64,
    pub count: usize,
}

impl FrequencyBin {
    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Mean model log-probability of ground-truth tokens, bucketed by the
/// token's log-unigram probability into equal-width bins. Empty bins are
/// dropped; `include_bias` records whether the model's output bias was in
/// play when the samples were collected.
#[derive(Debug, Clone)]
pub struct FrequencyBinReport {
    pub bins: Vec<FrequencyBin>,
    pub include_bias: bool,
    pub total: usize,
}

impl FrequencyBinReport {
    /// Least-squares slope of mean log-probability against bin center.
    pub fn slope(&self) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .bins
            .iter()
            .map(|b| (b.center(), b.mean_logprob))
            .collect();
        least_squares_slope(&pts)
    }
}

/// Bins (log_unigram, log_prob) samples into `num_bins` equal-width
/// intervals over the observed log-unigram range.
pub fn frequency_binned_logprob(
    samples: &[(f64, f64)],
    num_bins: usize,
    include_bias: bool,
) -> Result<FrequencyBinReport> {
    if samples.is_empty() {
        return Err(Error::Metric(
            "frequency_binned_logprob: no samples".into(),
        ));
    }
    assert!(num_bins >= 1, "frequency_binned_logprob: num_bins must be >= 1");
    let lo = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let hi = samples.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut buckets: Vec<Vec<(f64, f64)>> = vec![Vec::new(); num_bins];
    for &(lu, lp) in samples {
        let idx = if range == 0.0 {
            0
        } else {
            (((lu - lo) / range) * num_bins as f64).min(num_bins as f64 - 1.0) as usize
        };
        buckets[idx].push((lu, lp));
    }
    let width = if range == 0.0 { 1.0 } else { range / num_bins as f64 };
    let mut bins = Vec::new();
    for (i, bucket) in buckets.iter().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        let lus: Vec<f64> = bucket.iter().map(|s| s.0).collect();
        let lps: Vec<f64> = bucket.iter().map(|s| s.1).collect();
        let (mean_lp, se) = mean_and_stderr(&lps);
        bins.push(FrequencyBin {
            lo: lo + i as f64 * width,
            hi: lo + (i + 1) as f64 * width,
            mean_log_unigram: lus.iter().sum::<f64>() / lus.len() as f64,
            mean_logprob: mean_lp,
            std_err: se,
            count: bucket.len(),
        });
    }
    Ok(FrequencyBinReport {
        bins,
        include_bias,
        total: samples.len(),
    })
}

/// Slope of the least-squares line through `points`. Zero for fewer than
/// two distinct x values.
pub fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 0.0;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return 0.0;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    sxy / sxx
}

/// Sample mean and standard error (sample std with n-1 over sqrt n).
/// A single sample has standard error 0.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    assert!(!xs.is_empty(), "mean_and_stderr: empty slice");
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt() / n.sqrt())
}
