//! Utility metrics: Jensen-Shannon divergence between binned feature
//! populations, its class- and feature-averaged form (AJS), and aggregation
//! of epistemic-precision scores.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cohort::{feature_vector, AchievementLabel, Cohort, N_FEATURES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinningSpec {
    /// Equal-width bins over the pooled range of both samples.
    pub bins: usize,
    /// Pseudo-mass added to every bin before normalizing.
    pub smoothing: f64,
}

impl Default for BinningSpec {
    fn default() -> Self {
        Self { bins: 20, smoothing: 1e-10 }
    }
}

impl BinningSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 bins, got {}", self.bins)));
        }
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "smoothing must be positive, got {}",
                self.smoothing
            )));
        }
        Ok(())
    }
}

fn histogram(samples: &[f64], lo: f64, hi: f64, spec: &BinningSpec) -> Vec<f64> {
    let mut counts = vec![0usize; spec.bins];
    let width = hi - lo;
    for &x in samples {
        let bin = if width > 0.0 { (((x - lo) / width) * spec.bins as f64).floor() as usize } else { 0 };
        counts[bin.min(spec.bins - 1)] += 1;
    }
    let total = samples.len() as f64;
    let norm = 1.0 + spec.bins as f64 * spec.smoothing;
    counts.into_iter().map(|c| (c as f64 / total + spec.smoothing) / norm).collect()
}

/// Base-2 Jensen-Shannon divergence between two discrete distributions of
/// equal length. Entries are assumed positive and normalized.
pub fn js_of_distributions(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions must share a support");
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            kl_p += a * (a / m).log2();
        }
        if b > 0.0 {
            kl_q += b * (b / m).log2();
        }
    }
    (0.5 * (kl_p + kl_q)).clamp(0.0, 1.0)
}

/// JS divergence between the histograms of two samples over shared bins.
pub fn js_divergence(p_samples: &[f64], q_samples: &[f64], spec: &BinningSpec) -> Result<f64> {
    spec.validate()?;
    if p_samples.is_empty() || q_samples.is_empty() {
        return Err(Error::EmptyInput("js_divergence samples"));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &x in p_samples.iter().chain(q_samples) {
        if !x.is_finite() {
            return Err(Error::InvalidParameter(format!("non-finite sample {x}")));
        }
        lo = lo.min(x);
        hi = hi.max(x);
    }
    let p = histogram(p_samples, lo, hi, spec);
    let q = histogram(q_samples, lo, hi, spec);
    Ok(js_of_distributions(&p, &q))
}

fn class_features(cohort: &Cohort, label: AchievementLabel) -> Vec<[f64; N_FEATURES]> {
    cohort.with_label(label).map(|r| feature_vector(r).values).collect()
}

/// Per-class, per-feature JS values: `[label][feature]`.
pub fn ajs_breakdown(
    real: &Cohort,
    synthetic: &Cohort,
    spec: &BinningSpec,
) -> Result<[[f64; N_FEATURES]; 3]> {
    let mut out = [[0.0; N_FEATURES]; 3];
    for label in AchievementLabel::ALL {
        let r = class_features(real, label);
        let s = class_features(synthetic, label);
        if r.is_empty() {
            return Err(Error::EmptyClass(label_class_name(label, "real")));
        }
        if s.is_empty() {
            return Err(Error::EmptyClass(label_class_name(label, "synthetic")));
        }
        for d in 0..N_FEATURES {
            let rd: Vec<f64> = r.iter().map(|f| f[d]).collect();
            let sd: Vec<f64> = s.iter().map(|f| f[d]).collect();
            out[label.index()][d] = js_divergence(&rd, &sd, spec)?;
        }
    }
    Ok(out)
}

fn label_class_name(label: AchievementLabel, side: &str) -> &'static str {
    match (label, side) {
        (AchievementLabel::Low, "real") => "low class of the real cohort",
        (AchievementLabel::Average, "real") => "average class of the real cohort",
        (AchievementLabel::High, "real") => "high class of the real cohort",
        (AchievementLabel::Low, _) => "low class of the synthetic cohort",
        (AchievementLabel::Average, _) => "average class of the synthetic cohort",
        (AchievementLabel::High, _) => "high class of the synthetic cohort",
    }
}

/// Mean over the three classes of the mean JS across the 24 features.
pub fn ajs(real: &Cohort, synthetic: &Cohort, spec: &BinningSpec) -> Result<f64> {
    let table = ajs_breakdown(real, synthetic, spec)?;
    let per_class: f64 = table.iter().map(|row| row.iter().sum::<f64>() / N_FEATURES as f64).sum();
    Ok(per_class / 3.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AjsRow {
    pub dataset: String,
    pub method: String,
    pub ajs: f64,
}

pub fn write_ajs_csv<W: Write>(rows: &[AjsRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::External(format!("writing AJS csv: {e}")))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Epistemic precision

/// A validated finding scored 0, ½ or 1, kept as a count of half-points so
/// aggregation is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EprecScore(u8);

impl EprecScore {
    pub const NONE: EprecScore = EprecScore(0);
    pub const PARTIAL: EprecScore = EprecScore(1);
    pub const FULL: EprecScore = EprecScore(2);

    pub fn half_points(self) -> u64 {
        self.0 as u64
    }

    pub fn value(self) -> f64 {
        self.0 as f64 / 2.0
    }
}

impl TryFrom<f64> for EprecScore {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        if v == 0.0 {
            Ok(Self::NONE)
        } else if v == 0.5 {
            Ok(Self::PARTIAL)
        } else if v == 1.0 {
            Ok(Self::FULL)
        } else {
            Err(Error::InvalidParameter(format!("EPrec score {v} is not 0, 0.5 or 1")))
        }
    }
}

impl From<EprecScore> for f64 {
    fn from(s: EprecScore) -> f64 {
        s.value()
    }
}

impl Serialize for EprecScore {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for EprecScore {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        EprecScore::try_from(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EprecRecord {
    pub request_id: String,
    /// Grouping tag, typically the cohort year.
    pub dataset: String,
    pub score: EprecScore,
}

/// Sum of half-points over a count of requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EprecMean {
    pub half_points: u64,
    pub count: u64,
}

impl EprecMean {
    pub fn mean(&self) -> f64 {
        self.half_points as f64 / (2 * self.count) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EprecSummary {
    pub per_dataset: BTreeMap<String, EprecMean>,
    /// Request-weighted mean over all records.
    pub overall: EprecMean,
}

pub fn eprec_aggregate(records: &[EprecRecord]) -> Result<EprecSummary> {
    if records.is_empty() {
        return Err(Error::EmptyInput("EPrec records"));
    }
    let mut per_dataset: BTreeMap<String, EprecMean> = BTreeMap::new();
    let mut overall = EprecMean { half_points: 0, count: 0 };
    for r in records {
        let e = per_dataset.entry(r.dataset.clone()).or_insert(EprecMean { half_points: 0, count: 0 });
        e.half_points += r.score.half_points();
        e.count += 1;
        overall.half_points += r.score.half_points();
        overall.count += 1;
    }
    Ok(EprecSummary { per_dataset, overall })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{StudentRecord, N_WINDOWS, WEEKS};
    use approx::assert_abs_diff_eq;

    #[test]
    fn two_bin_example() {
        let spec = BinningSpec { bins: 2, smoothing: 1e-10 };
        let js = js_divergence(&[0.0, 1.0], &[0.0, 0.0], &spec).unwrap();
        // M = (3/4, 1/4): ½[½log2(2/3) + ½log2 2] + ½log2(4/3) = 3/2 − (3/4)log2 3
        let expected = 1.5 - 0.75 * 3f64.log2();
        assert_abs_diff_eq!(js, expected, epsilon = 1e-8);
    }

    #[test]
    fn identical_and_disjoint() {
        let spec = BinningSpec::default();
        let xs = [1.0, 2.0, 2.5, 7.0];
        assert_eq!(js_divergence(&xs, &xs, &spec).unwrap(), 0.0);
        let js = js_divergence(&[0.0; 10], &[5.0, 6.0, 7.0], &spec).unwrap();
        assert!((0.999..=1.0).contains(&js));
        assert!(js_divergence(&[], &xs, &spec).is_err());
    }

    #[test]
    fn constant_pooled_range_is_zero() {
        let spec = BinningSpec::default();
        assert_eq!(js_divergence(&[3.0; 4], &[3.0; 9], &spec).unwrap(), 0.0);
    }

    fn cohort(grids: Vec<(u32, AchievementLabel)>) -> Cohort {
        let recs = grids
            .into_iter()
            .enumerate()
            .map(|(i, (m, l))| {
                let mut g = [[0u32; WEEKS]; N_WINDOWS];
                for row in g.iter_mut() {
                    for (t, c) in row.iter_mut().enumerate() {
                        *c = if m == 0 { 0 } else { m + (t as u32 % 2) * 40 };
                    }
                }
                StudentRecord::new(format!("s{i}"), g, l).unwrap()
            })
            .collect();
        Cohort::new("t", recs).unwrap()
    }

    #[test]
    fn ajs_identical_zero_and_empty_class() {
        let c = cohort(AchievementLabel::ALL.iter().map(|&l| (30, l)).collect());
        assert_eq!(ajs(&c, &c, &BinningSpec::default()).unwrap(), 0.0);
        let missing = cohort(vec![(30, AchievementLabel::Low)]);
        assert!(matches!(ajs(&c, &missing, &BinningSpec::default()), Err(Error::EmptyClass(_))));
    }

    #[test]
    fn eprec_table() {
        let mut recs = Vec::new();
        let mut push = |ds: &str, counts: [usize; 3]| {
            for (k, &c) in counts.iter().enumerate() {
                for _ in 0..c {
                    recs.push(EprecRecord {
                        request_id: format!("{ds}-{}", recs.len()),
                        dataset: ds.into(),
                        score: EprecScore(k as u8),
                    });
                }
            }
        };
        push("2022", [3, 5, 1]);
        push("2023", [5, 6, 0]);
        push("2024", [0, 5, 0]);
        let s = eprec_aggregate(&recs).unwrap();
        assert_eq!(s.per_dataset["2022"], EprecMean { half_points: 7, count: 9 });
        assert_eq!(s.overall, EprecMean { half_points: 18, count: 25 });
        assert_eq!(s.overall.mean(), 0.36);
        assert!(eprec_aggregate(&[]).is_err());
    }

    #[test]
    fn score_parsing() {
        assert_eq!(EprecScore::try_from(0.5).unwrap(), EprecScore::PARTIAL);
        assert!(EprecScore::try_from(0.25).is_err());
        let r: EprecRecord = serde_json::from_str(r#"{"request_id":"a","dataset":"d","score":1.0}"#).unwrap();
        assert_eq!(r.score, EprecScore::FULL);
    }
}
