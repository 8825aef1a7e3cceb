//! Phase timing arithmetic and the statistics behind every report.
//!
//! Everything in here is a pure function over immutable inputs. Standard
//! deviations are population deviations (divide by `n`), so a single
//! observation has a well-defined spread of zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::RunRecord;
use crate::exec::Execution;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("duration must be positive, got {0} ms")]
    NonPositiveDuration(f64),
    #[error("phase has no tokens")]
    EmptyPhase,
    #[error("timing has zero total duration")]
    DegenerateTiming,
    #[error("empty sample")]
    EmptySample,
    #[error("non-finite input value {0}")]
    NonFiniteInput(f64),
    #[error("mean is zero, coefficient of variation undefined{}", .0.as_ref().map(|b| format!(" (bucket {}, {:?})", b.0, b.1)).unwrap_or_default())]
    ZeroMeanCV(Option<(u32, Phase)>),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Measured prefill/decode split of one completion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub prompt_tokens: u64,
    pub prefill_ms: f64,
    pub generated_tokens: u64,
    pub decode_ms: f64,
    pub total_ms: f64,
}

impl PhaseTiming {
    /// Builds a timing with `total_ms` derived as `prefill_ms + decode_ms`.
    pub fn new(prompt_tokens: u64, prefill_ms: f64, generated_tokens: u64, decode_ms: f64) -> Self {
        PhaseTiming {
            prompt_tokens,
            prefill_ms,
            generated_tokens,
            decode_ms,
            total_ms: prefill_ms + decode_ms,
        }
    }

    pub fn prefill_ms_per_token(&self) -> Option<f64> {
        per_token_time(self.prefill_ms, self.prompt_tokens).ok()
    }

    pub fn decode_ms_per_token(&self) -> Option<f64> {
        per_token_time(self.decode_ms, self.generated_tokens).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

/// Tokens per second for each phase. A phase that cannot be measured (no
/// tokens, or zero duration) is `None` and is left out of aggregates rather
/// than counted as zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputSample {
    pub prefill_tps: Option<f64>,
    pub decode_tps: Option<f64>,
}

impl ThroughputSample {
    pub fn from_timing(t: &PhaseTiming) -> Self {
        let phase = |tokens: u64, ms: f64| {
            if tokens == 0 {
                None
            } else {
                throughput(tokens, ms).ok()
            }
        };
        ThroughputSample {
            prefill_tps: phase(t.prompt_tokens, t.prefill_ms),
            decode_tps: phase(t.generated_tokens, t.decode_ms),
        }
    }

    pub fn get(&self, phase: Phase) -> Option<f64> {
        match phase {
            Phase::Prefill => self.prefill_tps,
            Phase::Decode => self.decode_tps,
        }
    }
}

/// `tokens / seconds`.
pub fn throughput(tokens: u64, duration_ms: f64) -> Result<f64> {
    if !duration_ms.is_finite() || duration_ms <= 0.0 {
        return Err(MetricsError::NonPositiveDuration(duration_ms));
    }
    if tokens == 0 {
        return Err(MetricsError::EmptyPhase);
    }
    Ok(tokens as f64 / (duration_ms / 1000.0))
}

/// Average milliseconds per token of a phase.
pub fn per_token_time(duration_ms: f64, tokens: u64) -> Result<f64> {
    if tokens == 0 {
        return Err(MetricsError::EmptyPhase);
    }
    if !duration_ms.is_finite() {
        return Err(MetricsError::NonFiniteInput(duration_ms));
    }
    Ok(duration_ms / tokens as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseShare {
    pub prefill_fraction: f64,
    pub decode_fraction: f64,
}

/// Fraction of the total time spent in each phase.
pub fn phase_share(t: &PhaseTiming) -> Result<PhaseShare> {
    if t.total_ms.is_nan() || t.total_ms <= 0.0 {
        return Err(MetricsError::DegenerateTiming);
    }
    // Derive the smaller fraction by division and the larger as its
    // complement; the pair then sums to 1 within one ulp.
    let (prefill_fraction, decode_fraction) = if t.prefill_ms <= t.decode_ms {
        let p = t.prefill_ms / t.total_ms;
        (p, 1.0 - p)
    } else {
        let d = t.decode_ms / t.total_ms;
        (1.0 - d, d)
    };
    Ok(PhaseShare {
        prefill_fraction,
        decode_fraction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub n: u64,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl AggregateStats {
    /// Statistics of the concatenation of both underlying samples.
    pub fn merge(&self, other: &AggregateStats) -> AggregateStats {
        let mut m = Moments::from_stats(self);
        m.merge(&Moments::from_stats(other));
        m.finish().expect("merged sample is non-empty")
    }
}

/// Population statistics of a sample.
///
/// Values are sorted before summation, which makes the result independent of
/// input order bit for bit.
pub fn aggregate(values: &[f64]) -> Result<AggregateStats> {
    if values.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(MetricsError::NonFiniteInput(*bad));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let min = sorted[0];
    let max = sorted[n - 1];
    if min == max {
        return Ok(AggregateStats {
            n: n as u64,
            mean: min,
            std: 0.0,
            min,
            max,
        });
    }
    let mean = (compensated_sum(sorted.iter().copied()) / n as f64).clamp(min, max);
    let var = compensated_sum(sorted.iter().map(|x| (x - mean) * (x - mean))) / n as f64;
    Ok(AggregateStats {
        n: n as u64,
        mean,
        std: var.sqrt(),
        min,
        max,
    })
}

// Neumaier summation.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut c = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Streaming, mergeable first and second moments (Welford updates, Chan et
/// al. merge). Agrees with [`aggregate`] to rounding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
    min: f64,
    max: f64,
}

impl Default for Moments {
    fn default() -> Self {
        Moments {
            n: 0,
            mean: 0.0,
            m2: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
        self.min = self.min.min(x);
        self.max = self.max.max(x);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64 * other.n as f64 / n as f64);
        self.n = n;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
    }

    /// Rebuilds moments from finished population statistics.
    pub fn from_stats(s: &AggregateStats) -> Moments {
        Moments {
            n: s.n,
            mean: s.mean,
            m2: s.std * s.std * s.n as f64,
            min: s.min,
            max: s.max,
        }
    }

    pub fn finish(&self) -> Result<AggregateStats> {
        if self.n == 0 {
            return Err(MetricsError::EmptySample);
        }
        let std = if self.min == self.max {
            0.0
        } else {
            (self.m2.max(0.0) / self.n as f64).sqrt()
        };
        Ok(AggregateStats {
            n: self.n,
            mean: self.mean.clamp(self.min, self.max),
            std,
            min: self.min,
            max: self.max,
        })
    }
}

impl FromIterator<f64> for Moments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = Moments::default();
        for x in iter {
            m.push(x);
        }
        m
    }
}

/// Standard deviation over mean, as a dimensionless ratio.
pub fn coefficient_of_variation(stats: &AggregateStats) -> Result<f64> {
    if stats.mean == 0.0 {
        return Err(MetricsError::ZeroMeanCV(None));
    }
    Ok(stats.std / stats.mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvEntry {
    /// 1-based turn index, or 1-based prompt-size quartile in
    /// [`CvReport::by_prompt_quartile`].
    pub bucket: u32,
    pub phase: Phase,
    pub cv: f64,
    pub n: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub entries: Vec<CvEntry>,
    pub by_prompt_quartile: Vec<CvEntry>,
}

impl CvReport {
    pub fn get(&self, bucket: u32, phase: Phase) -> Option<&CvEntry> {
        self.entries
            .iter()
            .find(|e| e.bucket == bucket && e.phase == phase)
    }
}

/// Throughput CV per conversation turn, across conversations and
/// repetitions. Records that did not finish cleanly are skipped.
pub fn cv_by_turn(records: &[RunRecord]) -> Result<CvReport> {
    cv_by_turn_with(records, Execution::default())
}

pub fn cv_by_turn_with(records: &[RunRecord], exec: Execution) -> Result<CvReport> {
    let ok: Vec<&RunRecord> = records.iter().filter(|r| r.succeeded()).collect();

    let mut by_turn: BTreeMap<u32, Vec<&RunRecord>> = BTreeMap::new();
    for r in &ok {
        by_turn.entry(r.turn_index).or_default().push(r);
    }
    let entries = bucket_cvs(by_turn, exec)?;

    let by_prompt_quartile = if ok.is_empty() {
        Vec::new()
    } else {
        let cuts = quartile_cuts(ok.iter().map(|r| r.timing.prompt_tokens));
        let mut by_q: BTreeMap<u32, Vec<&RunRecord>> = BTreeMap::new();
        for r in &ok {
            let q = 1 + cuts.iter().filter(|c| **c < r.timing.prompt_tokens).count() as u32;
            by_q.entry(q).or_default().push(r);
        }
        bucket_cvs(by_q, exec)?
    };

    Ok(CvReport {
        entries,
        by_prompt_quartile,
    })
}

fn bucket_cvs(buckets: BTreeMap<u32, Vec<&RunRecord>>, exec: Execution) -> Result<Vec<CvEntry>> {
    let work: Vec<(u32, Phase, Vec<f64>)> = buckets
        .into_iter()
        .flat_map(|(bucket, recs)| {
            [Phase::Prefill, Phase::Decode].map(|phase| {
                let vals = recs.iter().filter_map(|r| r.throughput.get(phase)).collect();
                (bucket, phase, vals)
            })
        })
        .filter(|(_, _, v): &(u32, Phase, Vec<f64>)| !v.is_empty())
        .collect();

    exec.map(&work, |(bucket, phase, vals)| {
        let stats = aggregate(vals)?;
        let cv = coefficient_of_variation(&stats)
            .map_err(|_| MetricsError::ZeroMeanCV(Some((*bucket, *phase))))?;
        Ok(CvEntry {
            bucket: *bucket,
            phase: *phase,
            cv,
            n: stats.n,
        })
    })
    .into_iter()
    .collect()
}

/// Nearest-rank 25th/50th/75th percentile cut points.
fn quartile_cuts(values: impl Iterator<Item = u64>) -> [u64; 3] {
    let mut v: Vec<u64> = values.collect();
    v.sort_unstable();
    let n = v.len();
    let rank = |k: usize| v[((n * k).div_ceil(4)).max(1) - 1];
    [rank(1), rank(2), rank(3)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::test_record;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn throughput_examples() {
        assert_relative_eq!(throughput(1000, 13790.0).unwrap(), 72.516, epsilon = 1e-3);
        assert_eq!(throughput(1, 1000.0).unwrap(), 1.0);
        assert_eq!(throughput(500, 250.0).unwrap(), 2000.0);
        assert_eq!(throughput(5, 0.0), Err(MetricsError::NonPositiveDuration(0.0)));
        assert!(throughput(5, -1.0).is_err());
        assert_eq!(throughput(0, 10.0), Err(MetricsError::EmptyPhase));
    }

    #[test]
    fn per_token_examples() {
        assert_relative_eq!(per_token_time(1379.0, 100).unwrap(), 13.79, max_relative = 1e-15);
        assert_eq!(per_token_time(0.0, 5).unwrap(), 0.0);
        assert_eq!(per_token_time(10.0, 0), Err(MetricsError::EmptyPhase));
    }

    #[test]
    fn phase_share_examples() {
        let s = phase_share(&PhaseTiming::new(1, 82.02, 1, 238.93)).unwrap();
        assert!((s.prefill_fraction - 0.2556).abs() < 5e-4);
        assert!((s.decode_fraction - 0.7444).abs() < 5e-4);
        let s = phase_share(&PhaseTiming::new(1, 0.0, 1, 100.0)).unwrap();
        assert_eq!((s.prefill_fraction, s.decode_fraction), (0.0, 1.0));
        let s = phase_share(&PhaseTiming::new(1, 7.0, 1, 7.0)).unwrap();
        assert_eq!((s.prefill_fraction, s.decode_fraction), (0.5, 0.5));
        assert_eq!(
            phase_share(&PhaseTiming::new(1, 0.0, 0, 0.0)),
            Err(MetricsError::DegenerateTiming)
        );
    }

    #[test]
    fn aggregate_examples() {
        let s = aggregate(&[10.0, 10.0, 10.0]).unwrap();
        assert_eq!(
            s,
            AggregateStats { n: 3, mean: 10.0, std: 0.0, min: 10.0, max: 10.0 }
        );
        let s = aggregate(&[8.0, 12.0]).unwrap();
        assert_eq!(s, AggregateStats { n: 2, mean: 10.0, std: 2.0, min: 8.0, max: 12.0 });
        assert_eq!(aggregate(&[]), Err(MetricsError::EmptySample));
        assert!(matches!(aggregate(&[1.0, f64::NAN]), Err(MetricsError::NonFiniteInput(_))));
        assert!(matches!(aggregate(&[f64::INFINITY]), Err(MetricsError::NonFiniteInput(_))));
    }

    #[test]
    fn cv_examples() {
        let s = AggregateStats { n: 2, mean: 10.0, std: 2.0, min: 8.0, max: 12.0 };
        assert_eq!(coefficient_of_variation(&s).unwrap(), 0.2);
        let s = AggregateStats { n: 4, mean: -3.5, std: 0.0, min: -3.5, max: -3.5 };
        assert_eq!(coefficient_of_variation(&s).unwrap(), 0.0);
        let z = AggregateStats { n: 1, mean: 0.0, std: 0.0, min: 0.0, max: 0.0 };
        assert_eq!(coefficient_of_variation(&z), Err(MetricsError::ZeroMeanCV(None)));
        let a = coefficient_of_variation(&aggregate(&[8.0, 12.0]).unwrap()).unwrap();
        let b = coefficient_of_variation(&aggregate(&[80.0, 120.0]).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cv_by_turn_two_decode_rates() {
        let mut a = test_record("m", "c1", 1, 1, PhaseTiming::new(10, 100.0, 10, 200.0));
        let mut b = test_record("m", "c2", 1, 1, PhaseTiming::new(10, 100.0, 10, 100.0));
        a.throughput.decode_tps = Some(50.0);
        b.throughput.decode_tps = Some(100.0);
        let rep = cv_by_turn(&[a, b]).unwrap();
        let e = rep.get(1, Phase::Decode).unwrap();
        assert!((e.cv - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(e.n, 2);
        assert_eq!(rep.get(1, Phase::Prefill).unwrap().cv, 0.0);
    }

    #[test]
    fn cv_by_turn_single_record_bucket() {
        let r = test_record("m", "c1", 2, 1, PhaseTiming::new(4, 40.0, 2, 20.0));
        let rep = cv_by_turn(&[r]).unwrap();
        assert_eq!(rep.entries.len(), 2);
        assert!(rep.entries.iter().all(|e| e.n == 1 && e.cv == 0.0 && e.bucket == 2));
        assert_eq!(rep.by_prompt_quartile.len(), 2);
    }

    #[test]
    fn cv_by_turn_skips_empty_decode() {
        let r = test_record("m", "c1", 1, 1, PhaseTiming::new(4, 40.0, 0, 0.0));
        let rep = cv_by_turn(&[r]).unwrap();
        assert!(rep.get(1, Phase::Decode).is_none());
        assert!(rep.get(1, Phase::Prefill).is_some());
    }

    #[test]
    fn cv_by_turn_zero_mean_names_bucket() {
        let mut r = test_record("m", "c1", 3, 1, PhaseTiming::new(4, 40.0, 2, 20.0));
        r.throughput.decode_tps = Some(0.0);
        assert_eq!(
            cv_by_turn(&[r]),
            Err(MetricsError::ZeroMeanCV(Some((3, Phase::Decode))))
        );
    }

    #[test]
    fn quartile_cut_points() {
        assert_eq!(quartile_cuts([1, 2, 3, 4, 5, 6, 7, 8].into_iter()), [2, 4, 6]);
        assert_eq!(quartile_cuts([5].into_iter()), [5, 5, 5]);
    }

    fn naive(values: &[f64]) -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    proptest! {
        #[test]
        fn throughput_and_per_token_are_inverse(tokens in 1u64..100_000, ms in 1e-3f64..1e7) {
            let p = per_token_time(ms, tokens).unwrap() * throughput(tokens, ms).unwrap();
            prop_assert!((p - 1000.0).abs() <= 1000.0 * 1e-12);
        }

        #[test]
        fn aggregate_is_permutation_invariant(mut v in prop::collection::vec(-1e6f64..1e6, 1..200), seed in any::<u64>()) {
            let a = aggregate(&v).unwrap();
            let n = v.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                v.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(a, aggregate(&v).unwrap());
        }

        #[test]
        fn aggregate_matches_two_pass(v in prop::collection::vec(1e-3f64..1e6, 1..300)) {
            let s = aggregate(&v).unwrap();
            let (mean, std) = naive(&v);
            prop_assert!((s.mean - mean).abs() <= 1e-9 * mean.abs());
            prop_assert!((s.std - std).abs() <= 1e-9 * mean.abs());
            prop_assert!(s.min <= s.mean && s.mean <= s.max);
        }

        #[test]
        fn moments_merge_matches_aggregate(v in prop::collection::vec(1e-3f64..1e6, 2..300), split in 0usize..300) {
            let k = split % v.len();
            let mut left: Moments = v[..k].iter().copied().collect();
            let right: Moments = v[k..].iter().copied().collect();
            left.merge(&right);
            let merged = left.finish().unwrap();
            let direct = aggregate(&v).unwrap();
            prop_assert_eq!(merged.n, direct.n);
            prop_assert!((merged.mean - direct.mean).abs() <= 1e-9 * direct.mean.abs());
            prop_assert!((merged.std - direct.std).abs() <= 1e-9 * direct.mean.abs());
            prop_assert_eq!((merged.min, merged.max), (direct.min, direct.max));
        }

        #[test]
        fn cv_scale_invariant(v in prop::collection::vec(1e-2f64..1e4, 1..100), k in 1e-3f64..1e3) {
            let a = coefficient_of_variation(&aggregate(&v).unwrap()).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
            let b = coefficient_of_variation(&aggregate(&scaled).unwrap()).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-300) + 1e-12);
        }

        #[test]
        fn phase_share_sums_to_one(p in 0f64..1e6, d in 0f64..1e6) {
            prop_assume!(p + d > 0.0);
            let s = phase_share(&PhaseTiming::new(1, p, 1, d)).unwrap();
            let sum = s.prefill_fraction + s.decode_fraction;
            prop_assert!((sum - 1.0).abs() <= f64::EPSILON);
        }

        #[test]
        fn cv_by_turn_repetition_invariant(rates in prop::collection::vec((1u64..50, 1f64..500.0, 1u64..50, 1f64..500.0, 1u32..6), 1..40), k in 2usize..5) {
            let one: Vec<RunRecord> = rates.iter().enumerate()
                .map(|(i, (pt, pm, gt, gm, turn))| test_record("m", &format!("c{i}"), *turn, 1, PhaseTiming::new(*pt, *pm, *gt, *gm)))
                .collect();
            let many: Vec<RunRecord> = (0..k).flat_map(|_| one.clone()).collect();
            let a = cv_by_turn(&one).unwrap();
            let b = cv_by_turn(&many).unwrap();
            prop_assert_eq!(a.entries.len(), b.entries.len());
            for (x, y) in a.entries.iter().zip(&b.entries) {
                prop_assert_eq!((x.bucket, x.phase), (y.bucket, y.phase));
                prop_assert!((x.cv - y.cv).abs() <= 1e-9 * x.cv.max(1e-12));
            }
        }

        #[test]
        fn cv_by_turn_independent_of_partitioning(rates in prop::collection::vec((1u64..50, 1f64..500.0, 1u64..50, 1f64..500.0, 1u32..8), 1..60)) {
            let recs: Vec<RunRecord> = rates.iter().enumerate()
                .map(|(i, (pt, pm, gt, gm, turn))| test_record("m", &format!("c{i}"), *turn, 1, PhaseTiming::new(*pt, *pm, *gt, *gm)))
                .collect();
            prop_assert_eq!(
                cv_by_turn_with(&recs, Execution::Sequential).unwrap(),
                cv_by_turn_with(&recs, Execution::Parallel).unwrap()
            );
        }
    }
}
