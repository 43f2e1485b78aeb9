//! Real-data validation: a typed catalog of analysis queries, statistical
//! disclosure control on their outputs, provenance logging, and the
//! synthetic-vs-real discrepancy report that feeds the next synthesis cycle.
//!
//! New query kinds are added by extending [`QueryKind`] with its output
//! dimension, contributing group sizes, and feedback coordinates.

use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cohort::{AchievementLabel, Cohort, Window, N_WINDOWS, WEEKS};
use crate::error::{Error, Result};
use crate::synth::{FeatureDelta, FeedbackNote, FeedbackStatistic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QueryKind {
    /// Per-week mean minutes of one window within one label class.
    WeeklyMeanCurve { label: AchievementLabel, window: Window },
    /// Mean weekly minutes per (label, window), label-major.
    WindowLabelMeans,
    /// Largest weekly minutes per (label, window), label-major.
    WindowLabelMaxima,
    /// Fraction of zero cells per window.
    ZeroProfile,
    /// Spearman correlation between total minutes and the ordinal label.
    TotalMinutesLabelCorrelation,
    /// Least squares of the label code on the four window totals;
    /// four coefficients then the intercept.
    OlsOutcomeOnWindowTotals,
    /// Data-independent output, used to calibrate the auditor.
    Constant { value: f64, dims: usize },
    /// Window total of the last record in the dataset. Discloses a single
    /// student and is only released when SDC is switched off.
    LastRecordWindowTotal { window: Window },
}

impl QueryKind {
    pub fn dimension(&self) -> usize {
        match self {
            QueryKind::WeeklyMeanCurve { .. } => WEEKS,
            QueryKind::WindowLabelMeans | QueryKind::WindowLabelMaxima => 3 * N_WINDOWS,
            QueryKind::ZeroProfile => N_WINDOWS,
            QueryKind::TotalMinutesLabelCorrelation => 1,
            QueryKind::OlsOutcomeOnWindowTotals => N_WINDOWS + 1,
            QueryKind::Constant { dims, .. } => *dims,
            QueryKind::LastRecordWindowTotal { .. } => 1,
        }
    }

    /// Whether the statistic is a per-group extremum (a single student's value).
    pub fn is_extremum(&self) -> bool {
        matches!(self, QueryKind::WindowLabelMaxima | QueryKind::LastRecordWindowTotal { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            QueryKind::WeeklyMeanCurve { .. } => "weekly_mean_curve",
            QueryKind::WindowLabelMeans => "window_label_means",
            QueryKind::WindowLabelMaxima => "window_label_maxima",
            QueryKind::ZeroProfile => "zero_profile",
            QueryKind::TotalMinutesLabelCorrelation => "total_minutes_label_correlation",
            QueryKind::OlsOutcomeOnWindowTotals => "ols_outcome_on_window_totals",
            QueryKind::Constant { .. } => "constant",
            QueryKind::LastRecordWindowTotal { .. } => "last_record_window_total",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let QueryKind::Constant { value, dims } = self {
            if *dims == 0 || !value.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "constant query needs dims >= 1 and a finite value, got {dims} x {value}"
                )));
            }
        }
        Ok(())
    }

    /// (label, window, statistic) of output dimension `i`.
    pub fn coordinate(&self, i: usize) -> (Option<AchievementLabel>, Option<Window>, FeedbackStatistic) {
        let label_major =
            |i: usize| (Some(AchievementLabel::ALL[i / N_WINDOWS]), Some(Window::ALL[i % N_WINDOWS]));
        match self {
            QueryKind::WeeklyMeanCurve { label, window } => {
                (Some(*label), Some(*window), FeedbackStatistic::Mean)
            }
            QueryKind::WindowLabelMeans => {
                let (l, w) = label_major(i);
                (l, w, FeedbackStatistic::Mean)
            }
            QueryKind::WindowLabelMaxima => {
                let (l, w) = label_major(i);
                (l, w, FeedbackStatistic::Max)
            }
            QueryKind::ZeroProfile => (None, Some(Window::ALL[i]), FeedbackStatistic::ZeroFraction),
            QueryKind::TotalMinutesLabelCorrelation => (None, None, FeedbackStatistic::Correlation),
            QueryKind::OlsOutcomeOnWindowTotals if i < N_WINDOWS => {
                (None, Some(Window::ALL[i]), FeedbackStatistic::OlsCoefficient)
            }
            QueryKind::OlsOutcomeOnWindowTotals => (None, None, FeedbackStatistic::Intercept),
            QueryKind::Constant { .. } => (None, None, FeedbackStatistic::Value),
            QueryKind::LastRecordWindowTotal { window } => (None, Some(*window), FeedbackStatistic::Value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRequest {
    pub id: String,
    #[serde(default)]
    pub requester: String,
    pub query: QueryKind,
    #[serde(default)]
    pub research_question: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetTag {
    Real,
    Synthetic,
    Shadow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdcPolicy {
    pub min_cell: usize,
    /// Decimal places kept in released values.
    pub rounding: u32,
    pub forbid_extrema: bool,
}

impl Default for SdcPolicy {
    fn default() -> Self {
        Self { min_cell: 5, rounding: 4, forbid_extrema: true }
    }
}

impl SdcPolicy {
    /// Releases everything. Only meaningful for demonstrating what SDC blocks.
    pub fn disabled() -> Self {
        Self { min_cell: 1, rounding: 4, forbid_extrema: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_cell < 1 {
            return Err(Error::InvalidParameter("min_cell must be at least 1".into()));
        }
        Ok(())
    }

    fn round(&self, v: f64) -> f64 {
        let scale = 10f64.powi(self.rounding as i32);
        let r = (v * scale).round() / scale;
        // normalise -0.0 so serialized outputs are stable
        if r == 0.0 {
            0.0
        } else {
            r
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum SdcVerdict {
    Accepted,
    Rejected { reasons: Vec<String> },
}

impl SdcVerdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, SdcVerdict::Accepted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutput {
    pub request_id: String,
    pub kind: QueryKind,
    pub dataset: DatasetTag,
    /// `None` when suppressed by SDC.
    pub values: Option<Vec<f64>>,
    pub sdc: SdcVerdict,
}

pub fn sdc_check(kind: &QueryKind, group_sizes: &[usize], policy: &SdcPolicy) -> SdcVerdict {
    let mut reasons = Vec::new();
    if let Some(&smallest) = group_sizes.iter().min() {
        if smallest < policy.min_cell {
            reasons.push(format!(
                "contributing group of size {smallest} is below the minimum cell size {}",
                policy.min_cell
            ));
        }
    }
    if policy.forbid_extrema && kind.is_extremum() {
        reasons.push(format!("{} releases a per-group extremum", kind.name()));
    }
    if reasons.is_empty() {
        SdcVerdict::Accepted
    } else {
        SdcVerdict::Rejected { reasons }
    }
}

fn label_means<F>(cohort: &Cohort, mut cell: F) -> (Vec<f64>, Vec<usize>)
where
    F: FnMut(&crate::cohort::StudentRecord, Window) -> f64,
{
    let counts = cohort.label_counts();
    let mut values = Vec::with_capacity(3 * N_WINDOWS);
    for label in AchievementLabel::ALL {
        for window in Window::ALL {
            let members: Vec<f64> = cohort.with_label(label).map(|r| cell(r, window)).collect();
            values.push(if members.is_empty() {
                0.0
            } else {
                members.iter().sum::<f64>() / members.len() as f64
            });
        }
    }
    (values, counts.to_vec())
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

fn ols(cohort: &Cohort) -> Vec<f64> {
    let n = cohort.n();
    let design = DMatrix::from_fn(n, N_WINDOWS + 1, |i, j| {
        if j < N_WINDOWS {
            cohort.records()[i].window_total(Window::ALL[j]) as f64
        } else {
            1.0
        }
    });
    let y = DVector::from_iterator(n, cohort.records().iter().map(|r| r.label().code()));
    // minimum-norm solution when a window total is constant
    let svd = design.svd(true, true);
    match svd.solve(&y, 1e-9) {
        Ok(beta) => beta.iter().copied().collect(),
        Err(_) => vec![0.0; N_WINDOWS + 1],
    }
}

/// Raw query values plus the sizes of the groups each value aggregates over.
pub(crate) fn compute_query(kind: &QueryKind, cohort: &Cohort) -> (Vec<f64>, Vec<usize>) {
    match kind {
        QueryKind::WeeklyMeanCurve { label, window } => {
            let members: Vec<_> = cohort.with_label(*label).collect();
            let values = (0..WEEKS)
                .map(|week| {
                    if members.is_empty() {
                        0.0
                    } else {
                        members.iter().map(|r| r.series(*window)[week] as f64).sum::<f64>()
                            / members.len() as f64
                    }
                })
                .collect();
            (values, vec![members.len()])
        }
        QueryKind::WindowLabelMeans => label_means(cohort, |r, w| r.window_total(w) as f64 / WEEKS as f64),
        QueryKind::WindowLabelMaxima => {
            let counts = cohort.label_counts();
            let mut values = Vec::with_capacity(3 * N_WINDOWS);
            for label in AchievementLabel::ALL {
                for window in Window::ALL {
                    let max = cohort
                        .with_label(label)
                        .flat_map(|r| r.series(window).iter().copied())
                        .max()
                        .unwrap_or(0);
                    values.push(max as f64);
                }
            }
            (values, counts.to_vec())
        }
        QueryKind::ZeroProfile => (crate::dp::zero_proportions(cohort).to_vec(), vec![cohort.n()]),
        QueryKind::TotalMinutesLabelCorrelation => {
            let totals: Vec<f64> = cohort.records().iter().map(|r| r.total() as f64).collect();
            let codes: Vec<f64> = cohort.records().iter().map(|r| r.label().code()).collect();
            let rho = pearson(&average_ranks(&totals), &average_ranks(&codes));
            (vec![rho], vec![cohort.n()])
        }
        QueryKind::OlsOutcomeOnWindowTotals => (ols(cohort), vec![cohort.n()]),
        QueryKind::Constant { value, dims } => (vec![*value; *dims], vec![cohort.n()]),
        QueryKind::LastRecordWindowTotal { window } => {
            let last = cohort.records().last().expect("cohorts are nonempty");
            (vec![last.window_total(*window) as f64], vec![1])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub sequence: usize,
    pub request_id: String,
    pub requester: String,
    pub query: String,
    pub dataset: DatasetTag,
    pub cohort: String,
    pub n: usize,
    pub policy: SdcPolicy,
    pub sdc: SdcVerdict,
}

/// Append-only log of executed requests, one JSON line per record.
#[derive(Debug, Default)]
pub struct ProvenanceLog {
    records: Mutex<Vec<ProvenanceRecord>>,
}

impl ProvenanceLog {
    pub fn new() -> Self {
        Self::default()
    }

    fn append(&self, mut record: ProvenanceRecord) {
        let mut records = self.records.lock().expect("provenance log poisoned");
        record.sequence = records.len();
        records.push(record);
    }

    pub fn records(&self) -> Vec<ProvenanceRecord> {
        self.records.lock().expect("provenance log poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("provenance log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in self.records() {
            out.push_str(&serde_json::to_string(&r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

pub fn run_request(
    request: &ValidationRequest,
    cohort: &Cohort,
    dataset: DatasetTag,
    policy: &SdcPolicy,
    log: Option<&ProvenanceLog>,
) -> Result<QueryOutput> {
    request.query.validate()?;
    policy.validate()?;
    let (raw, groups) = compute_query(&request.query, cohort);
    let sdc = sdc_check(&request.query, &groups, policy);
    let values = match sdc {
        SdcVerdict::Accepted => {
            if let Some(bad) = raw.iter().find(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "request {} produced non-finite value {bad}",
                    request.id
                )));
            }
            Some(raw.iter().map(|&v| policy.round(v)).collect())
        }
        SdcVerdict::Rejected { .. } => None,
    };
    if let Some(log) = log {
        log.append(ProvenanceRecord {
            sequence: 0,
            request_id: request.id.clone(),
            requester: request.requester.clone(),
            query: request.query.name().to_string(),
            dataset,
            cohort: cohort.year().to_string(),
            n: cohort.n(),
            policy: *policy,
            sdc: sdc.clone(),
        });
    }
    Ok(QueryOutput { request_id: request.id.clone(), kind: request.query.clone(), dataset, values, sdc })
}

/// Signed relative difference `(synthetic − real) / |real|`, saturating at ±10.
pub fn relative_delta(synthetic: f64, real: f64) -> f64 {
    const LIMIT: f64 = 10.0;
    if synthetic == real {
        return 0.0;
    }
    if real == 0.0 {
        return LIMIT.copysign(synthetic - real);
    }
    ((synthetic - real) / real.abs()).clamp(-LIMIT, LIMIT)
}

pub fn discrepancy_report(
    synthetic_out: &QueryOutput,
    real_out: &QueryOutput,
    cycle: usize,
) -> Result<FeedbackNote> {
    if synthetic_out.request_id != real_out.request_id || synthetic_out.kind != real_out.kind {
        return Err(Error::KindMismatch(format!(
            "{} ({}) vs {} ({})",
            synthetic_out.request_id,
            synthetic_out.kind.name(),
            real_out.request_id,
            real_out.kind.name()
        )));
    }
    let (syn, real) = match (&synthetic_out.values, &real_out.values) {
        (Some(s), Some(r)) => (s, r),
        _ => {
            return Err(Error::InvalidParameter(format!(
                "request {} was suppressed; nothing to compare",
                real_out.request_id
            )))
        }
    };
    if syn.len() != real.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} synthetic values vs {} real",
            syn.len(),
            real.len()
        )));
    }
    let deltas = syn
        .iter()
        .zip(real)
        .enumerate()
        .map(|(i, (&s, &r))| {
            let (label, window, statistic) = real_out.kind.coordinate(i);
            FeatureDelta {
                request_id: real_out.request_id.clone(),
                dimension: i,
                label,
                window,
                statistic,
                real: r,
                synthetic: s,
                delta: relative_delta(s, r),
            }
        })
        .collect();
    Ok(FeedbackNote::new(cycle, deltas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_ground_truth, GroundTruthConfig, StudentRecord};

    fn req(id: &str, query: QueryKind) -> ValidationRequest {
        ValidationRequest { id: id.into(), requester: "p1".into(), query, research_question: String::new() }
    }

    fn zero_cohort(n: usize) -> Cohort {
        let records = (0..n)
            .map(|i| {
                StudentRecord::new(format!("z{i}"), [[0; WEEKS]; N_WINDOWS], crate::cohort::even_label(i, n))
                    .unwrap()
            })
            .collect();
        Cohort::new("z", records).unwrap()
    }

    #[test]
    fn zero_profile_all_zero() {
        let out = run_request(
            &req("r", QueryKind::ZeroProfile),
            &zero_cohort(30),
            DatasetTag::Real,
            &SdcPolicy::default(),
            None,
        )
        .unwrap();
        assert_eq!(out.values.unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn weekly_curve_matches_brute_force() {
        let c = generate_ground_truth(&GroundTruthConfig::default(), 120, 5, "gt").unwrap();
        let q = QueryKind::WeeklyMeanCurve { label: AchievementLabel::High, window: Window::Evening };
        let out = run_request(&req("r", q), &c, DatasetTag::Real, &SdcPolicy::default(), None).unwrap();
        let values = out.values.unwrap();
        for (week, v) in values.iter().enumerate() {
            let mut sum = 0u64;
            let mut count = 0u64;
            for r in c.records() {
                if r.label() == AchievementLabel::High {
                    sum += r.minutes()[3][week] as u64;
                    count += 1;
                }
            }
            let expect = ((sum as f64 / count as f64) * 1e4).round() / 1e4;
            assert_eq!(*v, expect);
        }
    }

    #[test]
    fn small_class_is_suppressed() {
        // 9 students → 3 per class
        let q = QueryKind::WeeklyMeanCurve { label: AchievementLabel::Low, window: Window::Morning };
        let out = run_request(&req("r", q), &zero_cohort(9), DatasetTag::Real, &SdcPolicy::default(), None)
            .unwrap();
        assert!(out.values.is_none());
        assert!(!out.sdc.is_accepted());
    }

    #[test]
    fn sdc_rules() {
        let p = SdcPolicy::default();
        assert_eq!(sdc_check(&QueryKind::WindowLabelMeans, &[5, 6, 7], &p), SdcVerdict::Accepted);
        assert!(!sdc_check(&QueryKind::WindowLabelMeans, &[4, 6, 7], &p).is_accepted());
        assert!(!sdc_check(&QueryKind::WindowLabelMaxima, &[50, 60, 70], &p).is_accepted());
        let lax = SdcPolicy { forbid_extrema: false, ..p };
        assert!(sdc_check(&QueryKind::WindowLabelMaxima, &[50, 60, 70], &lax).is_accepted());
    }

    #[test]
    fn provenance_is_appended() {
        let log = ProvenanceLog::new();
        let c = zero_cohort(30);
        for i in 0..3 {
            run_request(
                &req(&format!("r{i}"), QueryKind::ZeroProfile),
                &c,
                DatasetTag::Real,
                &SdcPolicy::default(),
                Some(&log),
            )
            .unwrap();
        }
        let recs = log.records();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].sequence, 2);
        assert_eq!(log.to_jsonl().unwrap().lines().count(), 3);
    }

    #[test]
    fn spearman_and_ols_on_monotone_data() {
        // totals strictly increase with label → rho = +1 after averaging ties
        let records: Vec<_> = (0..30)
            .map(|i| {
                let label = crate::cohort::even_label(i, 30);
                let mut g = [[0u32; WEEKS]; N_WINDOWS];
                g[3][0] = (label.index() as u32 + 1) * 10;
                g[1][0] = (i % 7) as u32;
                StudentRecord::new(format!("m{i}"), g, label).unwrap()
            })
            .collect();
        let c = Cohort::new("m", records).unwrap();
        let (rho, _) = compute_query(&QueryKind::TotalMinutesLabelCorrelation, &c);
        assert!(rho[0] > 0.9);
        let (beta, _) = compute_query(&QueryKind::OlsOutcomeOnWindowTotals, &c);
        assert_eq!(beta.len(), 5);
        // label code = evening_total / 10 exactly
        assert!((beta[3] - 0.1).abs() < 1e-9, "{beta:?}");
        assert!(beta.iter().all(|b| b.is_finite()));
    }

    #[test]
    fn discrepancy_examples() {
        let c = generate_ground_truth(&GroundTruthConfig::default(), 60, 1, "gt").unwrap();
        let r = run_request(
            &req("a", QueryKind::WindowLabelMeans),
            &c,
            DatasetTag::Real,
            &SdcPolicy::default(),
            None,
        )
        .unwrap();
        let same = discrepancy_report(&r, &r, 1).unwrap();
        assert!(same.deltas.iter().all(|d| d.delta == 0.0));
        assert!(same.rendered_text.is_empty());

        let mut doubled = r.clone();
        doubled.dataset = DatasetTag::Synthetic;
        let vals: Vec<f64> = r
            .values
            .as_ref()
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, v)| if i % N_WINDOWS == 3 { v * 2.0 } else { *v })
            .collect();
        doubled.values = Some(vals);
        let note = discrepancy_report(&doubled, &r, 2).unwrap();
        for d in &note.deltas {
            if d.window == Some(Window::Evening) && d.real != 0.0 {
                assert!((d.delta - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(d.delta, 0.0);
            }
        }
        assert!(!note.rendered_text.is_empty());
        assert!(note.rendered_text.iter().all(|t| t.contains("evening")));

        let other =
            run_request(&req("b", QueryKind::ZeroProfile), &c, DatasetTag::Real, &SdcPolicy::default(), None)
                .unwrap();
        assert!(matches!(discrepancy_report(&other, &r, 1), Err(Error::KindMismatch(_))));
    }
}
