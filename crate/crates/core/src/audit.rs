//! Empirical privacy auditing by a shadow-dataset likelihood-ratio attack.
//!
//! For one target record the auditor builds datasets that do (IN) and do not
//! (OUT) contain the target, runs the audited releases on each, fits
//! per-dimension Gaussians to the two output populations, and scores every
//! shadow run by its log-likelihood ratio with its own output left out of the
//! fit. Sweeping a threshold over the scores gives an empirical trade-off
//! curve, to which a Gaussian trade-off `G_ν` is fitted.

use std::io::Write;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{feature_vector, AchievementLabel, Cohort, GroundTruthConfig, StudentRecord, N_FEATURES};
use crate::dp::{add_gaussian_noise, calibrate_gaussian, l2_sensitivity, zero_proportions, PrivacyBudget};
use crate::error::{Error, Result};
use crate::normal;
use crate::seed;
use crate::tradeoff::{compose_gdp, fit_gwmip, TradeoffCurve};
use crate::validate::{run_request, DatasetTag, SdcPolicy, ValidationRequest};

/// Where shadow records come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
#[allow(clippy::large_enum_variant)] // built once per audit
pub enum DataDistribution {
    /// Resampling a cohort with replacement.
    BootstrapOfCohort { cohort: Cohort },
    /// Fresh draws from the ground-truth generator, labels uniform.
    GroundTruthGenerator { config: GroundTruthConfig },
}

impl DataDistribution {
    fn sampler<'a>(&'a self, target: &StudentRecord) -> Result<Sampler<'a>> {
        match self {
            DataDistribution::BootstrapOfCohort { cohort } => {
                let pool: Vec<&StudentRecord> =
                    cohort.records().iter().filter(|r| r.id() != target.id()).collect();
                if pool.is_empty() {
                    return Err(Error::CannotExcludeTarget(target.id().to_string()));
                }
                Ok(Sampler::Pool(pool))
            }
            DataDistribution::GroundTruthGenerator { config } => {
                config.validate()?;
                Ok(Sampler::Generator(config))
            }
        }
    }
}

enum Sampler<'a> {
    Pool(Vec<&'a StudentRecord>),
    Generator(&'a GroundTruthConfig),
}

impl Sampler<'_> {
    /// One record with the given id; never the target itself.
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, id: String) -> StudentRecord {
        match self {
            Sampler::Pool(pool) => pool[rng.random_range(0..pool.len())].with_id(id),
            Sampler::Generator(config) => {
                let label = AchievementLabel::ALL[rng.random_range(0..3)];
                config.sample_record(rng, id, label)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShadowConfig {
    pub num_in: usize,
    pub num_out: usize,
    pub seed: u64,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        Self { num_in: 64, num_out: 64, seed: 0 }
    }
}

impl ShadowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_in < 2 || self.num_out < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 shadows per side, got {} IN and {} OUT",
                self.num_in, self.num_out
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    In,
    Out,
}

impl Side {
    fn key(self) -> &'static str {
        match self {
            Side::In => "in",
            Side::Out => "out",
        }
    }
}

fn shadow_key(target: &StudentRecord, side: Side, index: usize) -> String {
    format!("{}/{}/{index}", target.id(), side.key())
}

fn build_shadow(
    sampler: &Sampler<'_>,
    target: &StudentRecord,
    n: usize,
    side: Side,
    index: usize,
    config: &ShadowConfig,
) -> Result<Cohort> {
    let mut rng = seed::keyed_rng(config.seed, &format!("shadow/{}", shadow_key(target, side, index)));
    let mut records: Vec<StudentRecord> =
        (0..n - 1).map(|slot| sampler.draw(&mut rng, format!("shadow-{slot}"))).collect();
    // the target slot is always last
    records.push(match side {
        Side::In => target.clone(),
        Side::Out => sampler.draw(&mut rng, format!("shadow-{}", n - 1)),
    });
    Cohort::new(format!("shadow-{}-{index}", side.key()), records)
}

/// IN datasets hold `n − 1` draws plus the target; OUT datasets hold `n − 1`
/// draws plus one more non-target draw. The target (or its replacement)
/// occupies the last slot.
pub fn make_shadow_datasets(
    dist: &DataDistribution,
    target: &StudentRecord,
    n: usize,
    config: &ShadowConfig,
) -> Result<(Vec<Cohort>, Vec<Cohort>)> {
    config.validate()?;
    if n < 2 {
        return Err(Error::InvalidParameter(format!("shadow datasets need n >= 2, got {n}")));
    }
    let sampler = dist.sampler(target)?;
    let side = |s: Side, count: usize| -> Result<Vec<Cohort>> {
        (0..count).into_par_iter().map(|i| build_shadow(&sampler, target, n, s, i, config)).collect()
    };
    Ok((side(Side::In, config.num_in)?, side(Side::Out, config.num_out)?))
}

// ---------------------------------------------------------------------------
// Gaussian fits and likelihood ratios

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionFit {
    pub mu_in: f64,
    pub sigma_in: f64,
    pub mu_out: f64,
    pub sigma_out: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub dims: Vec<DimensionFit>,
}

fn sigma_floor(mu: f64) -> f64 {
    (1e-6 * mu.abs()).max(1e-8)
}

/// Population mean and floored standard deviation. A constant sample returns
/// its value exactly, so identical populations give identical fits.
fn fit_one<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> (f64, f64) {
    let mut it = values.clone();
    let first = *it.next().expect("at least one value");
    let (mut count, mut sum, mut constant) = (1usize, first, true);
    for &v in it {
        count += 1;
        sum += v;
        constant &= v == first;
    }
    if constant {
        return (first, sigma_floor(first));
    }
    let mu = sum / count as f64;
    let var = values.map(|&v| (v - mu) * (v - mu)).sum::<f64>() / count as f64;
    (mu, var.sqrt().max(sigma_floor(mu)))
}

fn check_dims(outputs: &[Vec<f64>], dims: usize) -> Result<()> {
    if let Some(bad) = outputs.iter().find(|o| o.len() != dims) {
        return Err(Error::DimensionMismatch(format!(
            "output of length {} among outputs of length {dims}",
            bad.len()
        )));
    }
    Ok(())
}

pub fn fit_output_gaussians(in_outputs: &[Vec<f64>], out_outputs: &[Vec<f64>]) -> Result<GaussianFit> {
    if in_outputs.len() < 2 || out_outputs.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 outputs per side, got {} and {}",
            in_outputs.len(),
            out_outputs.len()
        )));
    }
    let dims = in_outputs[0].len();
    check_dims(in_outputs, dims)?;
    check_dims(out_outputs, dims)?;
    let dims = (0..dims)
        .map(|d| {
            let (mu_in, sigma_in) = fit_one(in_outputs.iter().map(move |o| &o[d]));
            let (mu_out, sigma_out) = fit_one(out_outputs.iter().map(move |o| &o[d]));
            DimensionFit { mu_in, sigma_in, mu_out, sigma_out }
        })
        .collect();
    Ok(GaussianFit { dims })
}

fn gaussian_term(y: &[f64], fit: &GaussianFit) -> f64 {
    y.iter()
        .zip(&fit.dims)
        .map(|(&v, f)| normal::log_pdf(v, f.mu_in, f.sigma_in) - normal::log_pdf(v, f.mu_out, f.sigma_out))
        .sum()
}

/// `log Λ` of outputs `Y_1..Y_R`, summed over requests and dimensions.
pub fn log_likelihood_ratio(outputs: &[Vec<f64>], fits: &[GaussianFit]) -> Result<f64> {
    if outputs.len() != fits.len() {
        return Err(Error::DimensionMismatch(format!("{} outputs but {} fits", outputs.len(), fits.len())));
    }
    let mut total = 0.0;
    for (r, (y, fit)) in outputs.iter().zip(fits).enumerate() {
        if y.len() != fit.dims.len() {
            return Err(Error::DimensionMismatch(format!(
                "request {r}: output has {} dimensions, fit has {}",
                y.len(),
                fit.dims.len()
            )));
        }
        total += gaussian_term(y, fit);
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Audited releases and shadow runs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuditedQuery {
    /// A validation request answered under the given SDC policy.
    Validation(ValidationRequest),
    /// The stage-1 release of noised zero proportions.
    DpSummary { budget: PrivacyBudget },
}

impl AuditedQuery {
    fn run(&self, data: &Cohort, policy: &SdcPolicy, noise_seed: u64) -> Result<Option<Vec<f64>>> {
        match self {
            AuditedQuery::Validation(req) => {
                Ok(run_request(req, data, DatasetTag::Shadow, policy, None)?.values)
            }
            AuditedQuery::DpSummary { budget } => {
                let sigma = calibrate_gaussian(budget, l2_sensitivity(data.n()))?;
                let noised = add_gaussian_noise(zero_proportions(data), sigma, noise_seed);
                Ok(Some(noised.map(|v| v.clamp(0.0, 1.0)).to_vec()))
            }
        }
    }
}

/// Outputs of every audited query on every shadow dataset, indexed
/// `[request][shadow]`; `None` marks a suppressed output.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowOutputs {
    pub inside: Vec<Vec<Option<Vec<f64>>>>,
    pub outside: Vec<Vec<Option<Vec<f64>>>>,
}

fn transpose(runs: Vec<Vec<Option<Vec<f64>>>>, requests: usize) -> Vec<Vec<Option<Vec<f64>>>> {
    let mut out: Vec<Vec<Option<Vec<f64>>>> = (0..requests).map(|_| Vec::with_capacity(runs.len())).collect();
    for run in runs {
        for (r, o) in run.into_iter().enumerate() {
            out[r].push(o);
        }
    }
    out
}

pub fn run_shadows(
    queries: &[AuditedQuery],
    dist: &DataDistribution,
    target: &StudentRecord,
    n: usize,
    config: &ShadowConfig,
    policy: &SdcPolicy,
) -> Result<ShadowOutputs> {
    config.validate()?;
    if n < 2 {
        return Err(Error::InvalidParameter(format!("shadow datasets need n >= 2, got {n}")));
    }
    let sampler = dist.sampler(target)?;
    let side = |s: Side, count: usize| -> Result<Vec<Vec<Option<Vec<f64>>>>> {
        let runs = (0..count)
            .into_par_iter()
            .map(|i| {
                let data = build_shadow(&sampler, target, n, s, i, config)?;
                queries
                    .iter()
                    .enumerate()
                    .map(|(r, q)| {
                        let key = format!("noise/{}/{r}", shadow_key(target, s, i));
                        q.run(&data, policy, seed::derive(config.seed, &key))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(transpose(runs, queries.len()))
    };
    Ok(ShadowOutputs { inside: side(Side::In, config.num_in)?, outside: side(Side::Out, config.num_out)? })
}

/// Per-request score contributions of every IN and OUT shadow.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestScores {
    pub inside: Vec<f64>,
    pub outside: Vec<f64>,
}

fn released(outputs: &[Option<Vec<f64>>], skip: Option<usize>) -> Vec<&Vec<f64>> {
    outputs.iter().enumerate().filter(|(j, _)| Some(*j) != skip).filter_map(|(_, o)| o.as_ref()).collect()
}

fn fit_refs(in_vals: &[&Vec<f64>], out_vals: &[&Vec<f64>], dims: usize) -> GaussianFit {
    let dims = (0..dims)
        .map(|d| {
            let (mu_in, sigma_in) = fit_one(in_vals.iter().map(move |o| &o[d]));
            let (mu_out, sigma_out) = fit_one(out_vals.iter().map(move |o| &o[d]));
            DimensionFit { mu_in, sigma_in, mu_out, sigma_out }
        })
        .collect();
    GaussianFit { dims }
}

/// Smoothed log-probability of a release outcome among `total` fit runs of
/// which `suppressed` were suppressed.
fn release_log_prob(is_released: bool, suppressed: usize, total: usize) -> f64 {
    let hits = if is_released { total - suppressed } else { suppressed };
    ((hits as f64 + 0.5) / (total as f64 + 1.0)).ln()
}

/// Leave-one-out log-likelihood-ratio contributions of one request.
///
/// A shadow's own output never enters the fits used to score it. When SDC
/// suppresses the request on some shadows but not others, whether it was
/// released is itself scored as a Bernoulli outcome; Gaussian terms then
/// cover released outputs only.
pub fn request_scores(inside: &[Option<Vec<f64>>], outside: &[Option<Vec<f64>>]) -> Result<RequestScores> {
    let dims = inside.iter().chain(outside).flatten().map(Vec::len).next().unwrap_or(0);
    for o in inside.iter().chain(outside).flatten() {
        if o.len() != dims {
            return Err(Error::DimensionMismatch(format!(
                "shadow output of length {} among outputs of length {dims}",
                o.len()
            )));
        }
    }
    let sup_in = inside.iter().filter(|o| o.is_none()).count();
    let sup_out = outside.iter().filter(|o| o.is_none()).count();
    let all = inside.len() + outside.len();
    let mixed = sup_in + sup_out > 0 && sup_in + sup_out < all;

    let score = |own: &Option<Vec<f64>>, side: Side, j: usize| -> f64 {
        let (skip_in, skip_out) = match side {
            Side::In => (Some(j), None),
            Side::Out => (None, Some(j)),
        };
        let mut s = 0.0;
        if mixed {
            let own_sup = own.is_none() as usize;
            let (si, ni) = match side {
                Side::In => (sup_in - own_sup, inside.len() - 1),
                Side::Out => (sup_in, inside.len()),
            };
            let (so, no) = match side {
                Side::In => (sup_out, outside.len()),
                Side::Out => (sup_out - own_sup, outside.len() - 1),
            };
            s += release_log_prob(own.is_some(), si, ni) - release_log_prob(own.is_some(), so, no);
        }
        if let Some(y) = own {
            let vin = released(inside, skip_in);
            let vout = released(outside, skip_out);
            if vin.len() >= 2 && vout.len() >= 2 {
                s += gaussian_term(y, &fit_refs(&vin, &vout, dims));
            }
        }
        s
    };
    let inside_scores = inside.par_iter().enumerate().map(|(j, o)| score(o, Side::In, j)).collect();
    let outside_scores = outside.par_iter().enumerate().map(|(j, o)| score(o, Side::Out, j)).collect();
    Ok(RequestScores { inside: inside_scores, outside: outside_scores })
}

/// Total scores after each request prefix: element `r` holds the scores for
/// requests `1..=r+1`.
pub fn prefix_scores(per_request: &[RequestScores]) -> Vec<RequestScores> {
    let mut acc: Option<RequestScores> = None;
    per_request
        .iter()
        .map(|rs| {
            let next = match &acc {
                None => rs.clone(),
                Some(prev) => RequestScores {
                    inside: prev.inside.iter().zip(&rs.inside).map(|(a, b)| a + b).collect(),
                    outside: prev.outside.iter().zip(&rs.outside).map(|(a, b)| a + b).collect(),
                },
            };
            acc = Some(next.clone());
            next
        })
        .collect()
}

/// Trade-off curve of the attack over all given requests.
pub fn empirical_curve(
    target: &StudentRecord,
    queries: &[AuditedQuery],
    dist: &DataDistribution,
    n: usize,
    config: &ShadowConfig,
    policy: &SdcPolicy,
) -> Result<TradeoffCurve> {
    let outputs = run_shadows(queries, dist, target, n, config, policy)?;
    let mut totals = RequestScores { inside: vec![0.0; config.num_in], outside: vec![0.0; config.num_out] };
    for (i, o) in outputs.inside.iter().zip(&outputs.outside) {
        let s = request_scores(i, o)?;
        totals.inside.iter_mut().zip(&s.inside).for_each(|(a, b)| *a += b);
        totals.outside.iter_mut().zip(&s.outside).for_each(|(a, b)| *a += b);
    }
    TradeoffCurve::from_scores(&totals.inside, &totals.outside)
}

/// Largest `TPR − FPR` over the curve, never below 0.
pub fn advantage(curve: &TradeoffCurve) -> f64 {
    curve.points().iter().map(|p| 1.0 - p.fnr - p.fpr).fold(0.0, f64::max).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub nu_hat: f64,
    pub regret: f64,
    pub advantage: f64,
}

/// Fits `G_ν` to the curve after resampling it on the FPR grid `k / num_out`,
/// so curves with many tied scores still have enough points to fit.
pub fn summarize_curve(curve: &TradeoffCurve, config: &ShadowConfig) -> Result<CurveSummary> {
    let grid: Vec<f64> = (0..=config.num_out).map(|k| k as f64 / config.num_out as f64).collect();
    let fit = fit_gwmip(&curve.resample(&grid)?, config.num_in.min(config.num_out))?;
    Ok(CurveSummary { nu_hat: fit.nu, regret: fit.regret, advantage: advantage(curve) })
}

// ---------------------------------------------------------------------------
// Candidate targets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CandidateSelection {
    /// The `outliers` records farthest from their label centroid in
    /// standardized feature space, plus `random` others.
    OutliersPlusRandom {
        outliers: usize,
        random: usize,
    },
    Exhaustive,
}

impl Default for CandidateSelection {
    fn default() -> Self {
        CandidateSelection::OutliersPlusRandom { outliers: 8, random: 8 }
    }
}

/// Standardized distance of every record from its label centroid.
pub fn outlier_distances(cohort: &Cohort) -> Vec<f64> {
    let feats: Vec<[f64; N_FEATURES]> = cohort.records().iter().map(|r| feature_vector(r).values).collect();
    let n = feats.len() as f64;
    let mut mean = [0.0; N_FEATURES];
    let mut sd = [0.0; N_FEATURES];
    for d in 0..N_FEATURES {
        mean[d] = feats.iter().map(|f| f[d]).sum::<f64>() / n;
        sd[d] = (feats.iter().map(|f| (f[d] - mean[d]).powi(2)).sum::<f64>() / n).sqrt();
    }
    let z = |f: &[f64; N_FEATURES]| -> [f64; N_FEATURES] {
        std::array::from_fn(|d| if sd[d] > 0.0 { (f[d] - mean[d]) / sd[d] } else { 0.0 })
    };
    let zs: Vec<[f64; N_FEATURES]> = feats.iter().map(z).collect();
    let mut centroids = [[0.0; N_FEATURES]; 3];
    let counts = cohort.label_counts();
    for (r, zf) in cohort.records().iter().zip(&zs) {
        let c = &mut centroids[r.label().index()];
        for d in 0..N_FEATURES {
            c[d] += zf[d] / counts[r.label().index()] as f64;
        }
    }
    cohort
        .records()
        .iter()
        .zip(&zs)
        .map(|(r, zf)| {
            let c = &centroids[r.label().index()];
            zf.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        })
        .collect()
}

pub fn select_candidates(cohort: &Cohort, selection: &CandidateSelection, seed: u64) -> Vec<StudentRecord> {
    let (outliers, random) = match *selection {
        CandidateSelection::Exhaustive => return cohort.records().to_vec(),
        CandidateSelection::OutliersPlusRandom { outliers, random } => (outliers, random),
    };
    let dist = outlier_distances(cohort);
    let mut order: Vec<usize> = (0..cohort.n()).collect();
    order.sort_by(|&a, &b| {
        dist[b].total_cmp(&dist[a]).then_with(|| cohort.records()[a].id().cmp(cohort.records()[b].id()))
    });
    let (top, rest) = order.split_at(outliers.min(order.len()));
    let mut picked: Vec<usize> = top.to_vec();
    let mut rng = seed::keyed_rng(seed, "candidates");
    let mut extra: Vec<usize> =
        index::sample(&mut rng, rest.len(), random.min(rest.len())).into_iter().map(|i| rest[i]).collect();
    extra.sort_unstable();
    picked.extend(extra);
    picked.into_iter().map(|i| cohort.records()[i].clone()).collect()
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub request_index: usize,
    pub nu_hat: f64,
    pub regret: f64,
    pub advantage: f64,
    pub total_mu: f64,
    pub worst_target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRow {
    pub request_index: usize,
    pub nu_hat: f64,
    pub regret: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSeries {
    pub target_id: String,
    pub rows: Vec<TargetRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub stage1_mu: f64,
    /// One row per request prefix `1..=R`, for the worst target at that prefix.
    pub rows: Vec<AuditRow>,
    pub per_target: Vec<TargetSeries>,
    pub shadows: ShadowConfig,
}

impl AuditReport {
    /// Total μ after all requests; the stage-1 μ alone when there are none.
    pub fn total_mu(&self) -> f64 {
        self.rows.last().map_or(self.stage1_mu, |r| r.total_mu)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["request_index", "nu_hat", "regret", "advantage", "total_mu"])?;
        for r in &self.rows {
            w.write_record([
                r.request_index.to_string(),
                r.nu_hat.to_string(),
                r.regret.to_string(),
                r.advantage.to_string(),
                r.total_mu.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::External(format!("writing audit csv: {e}")))?;
        Ok(())
    }
}

/// Per-prefix curve summaries for one target.
pub fn audit_target(
    queries: &[AuditedQuery],
    dist: &DataDistribution,
    n: usize,
    target: &StudentRecord,
    config: &ShadowConfig,
    policy: &SdcPolicy,
) -> Result<TargetSeries> {
    let outputs = run_shadows(queries, dist, target, n, config, policy)?;
    let per_request = outputs
        .inside
        .iter()
        .zip(&outputs.outside)
        .map(|(i, o)| request_scores(i, o))
        .collect::<Result<Vec<_>>>()?;
    let rows = prefix_scores(&per_request)
        .iter()
        .enumerate()
        .map(|(r, s)| {
            let curve = TradeoffCurve::from_scores(&s.inside, &s.outside)?;
            let c = summarize_curve(&curve, config)?;
            Ok(TargetRow { request_index: r + 1, nu_hat: c.nu_hat, regret: c.regret, advantage: c.advantage })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TargetSeries { target_id: target.id().to_string(), rows })
}

/// Audits every request prefix over all targets. The worst target at each
/// prefix has the largest fitted ν (ties broken by advantage, then by
/// candidate order), and its ν is composed with the stage-1 μ.
pub fn audit_requests(
    queries: &[AuditedQuery],
    dist: &DataDistribution,
    n: usize,
    targets: &[StudentRecord],
    stage1_mu: f64,
    config: &ShadowConfig,
    policy: &SdcPolicy,
) -> Result<AuditReport> {
    if targets.is_empty() {
        return Err(Error::EmptyInput("audit targets"));
    }
    config.validate()?;
    let per_target = targets
        .par_iter()
        .map(|t| audit_target(queries, dist, n, t, config, policy))
        .collect::<Result<Vec<_>>>()?;
    let rows = (0..queries.len())
        .map(|r| {
            let (series, row) = per_target
                .iter()
                .map(|s| (s, &s.rows[r]))
                .reduce(|best, cand| {
                    let better = cand.1.nu_hat > best.1.nu_hat
                        || (cand.1.nu_hat == best.1.nu_hat && cand.1.advantage > best.1.advantage);
                    if better {
                        cand
                    } else {
                        best
                    }
                })
                .expect("targets are nonempty");
            AuditRow {
                request_index: r + 1,
                nu_hat: row.nu_hat,
                regret: row.regret,
                advantage: row.advantage,
                total_mu: compose_gdp(stage1_mu, row.nu_hat),
                worst_target: series.target_id.clone(),
            }
        })
        .collect();
    Ok(AuditReport { stage1_mu, rows, per_target, shadows: *config })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_ground_truth, Window, N_WINDOWS, WEEKS};
    use crate::tradeoff::g_mu_eval;
    use crate::validate::QueryKind;
    use approx::assert_abs_diff_eq;

    fn cohort(n: usize, seed: u64) -> Cohort {
        generate_ground_truth(&GroundTruthConfig::default(), n, seed, "t").unwrap()
    }

    fn request(id: &str, query: QueryKind) -> AuditedQuery {
        AuditedQuery::Validation(ValidationRequest {
            id: id.into(),
            requester: String::new(),
            query,
            research_question: String::new(),
        })
    }

    #[test]
    fn shadow_structure() {
        let c = cohort(10, 1);
        let target = c.records()[0].clone();
        let dist = DataDistribution::BootstrapOfCohort { cohort: c.clone() };
        let cfg = ShadowConfig { num_in: 2, num_out: 2, seed: 5 };
        let (ins, outs) = make_shadow_datasets(&dist, &target, 3, &cfg).unwrap();
        assert_eq!((ins.len(), outs.len()), (2, 2));
        for d in &ins {
            assert_eq!(d.n(), 3);
            assert_eq!(d.records().last().unwrap(), &target);
        }
        for d in &outs {
            assert_eq!(d.n(), 3);
            assert!(d.records().iter().all(|r| r.minutes() != target.minutes() || r.id() != target.id()));
            assert!(d.find(target.id()).is_none());
        }
        assert_eq!(make_shadow_datasets(&dist, &target, 3, &cfg).unwrap(), (ins, outs));
    }

    #[test]
    fn cannot_exclude_single_record() {
        let c = cohort(1, 1);
        let dist = DataDistribution::BootstrapOfCohort { cohort: c.clone() };
        let err = make_shadow_datasets(&dist, &c.records()[0], 3, &ShadowConfig::default());
        assert!(matches!(err, Err(Error::CannotExcludeTarget(_))));
    }

    #[test]
    fn gaussian_fit_examples() {
        let c = vec![vec![2.5]; 4];
        let f = fit_output_gaussians(&c, &c).unwrap();
        assert_eq!(f.dims[0].mu_in, 2.5);
        assert_eq!(f.dims[0].sigma_in, sigma_floor(2.5));
        let sym = vec![vec![-1.0], vec![1.0]];
        let f = fit_output_gaussians(&sym, &sym).unwrap();
        assert_eq!((f.dims[0].mu_in, f.dims[0].sigma_in), (0.0, 1.0));
        assert!(fit_output_gaussians(&sym[..1], &sym).is_err());
    }

    #[test]
    fn llr_examples() {
        let fit = GaussianFit {
            dims: vec![DimensionFit { mu_in: 1.0, sigma_in: 1.0, mu_out: 0.0, sigma_out: 1.0 }],
        };
        let one = log_likelihood_ratio(&[vec![1.0]], std::slice::from_ref(&fit)).unwrap();
        assert_abs_diff_eq!(one, 0.5, epsilon = 1e-15);
        let two = log_likelihood_ratio(&[vec![1.0], vec![3.0]], &[fit.clone(), fit.clone()]).unwrap();
        let second = log_likelihood_ratio(&[vec![3.0]], std::slice::from_ref(&fit)).unwrap();
        assert_abs_diff_eq!(two, one + second, epsilon = 1e-12);
        assert!(log_likelihood_ratio(&[vec![1.0, 2.0]], &[fit]).is_err());
        let same = fit_output_gaussians(&[vec![0.3], vec![0.9]], &[vec![0.3], vec![0.9]]).unwrap();
        assert_eq!(log_likelihood_ratio(&[vec![0.42]], &[same]).unwrap(), 0.0);
    }

    #[test]
    fn advantage_examples() {
        let perfect = TradeoffCurve::from_points([(0.0, 0.0)]).unwrap();
        assert_eq!(advantage(&perfect), 1.0);
        let null = TradeoffCurve::from_points([(0.5, 0.5)]).unwrap();
        assert_eq!(advantage(&null), 0.0);
        let g1 = TradeoffCurve::from_points((1..100_000).map(|i| {
            let a = i as f64 / 100_000.0;
            (a, g_mu_eval(1.0, a))
        }))
        .unwrap();
        let expected = 2.0 * normal::cdf(0.5) - 1.0;
        assert_abs_diff_eq!(advantage(&g1), expected, epsilon = 1e-6);
    }

    #[test]
    fn constant_request_is_null() {
        let c = cohort(30, 2);
        let dist = DataDistribution::BootstrapOfCohort { cohort: c.clone() };
        let q = [request("c", QueryKind::Constant { value: 0.1, dims: 3 })];
        let cfg = ShadowConfig { num_in: 16, num_out: 16, seed: 3 };
        let curve = empirical_curve(&c.records()[4], &q, &dist, 30, &cfg, &SdcPolicy::default()).unwrap();
        let s = summarize_curve(&curve, &cfg).unwrap();
        assert_eq!((s.nu_hat, s.advantage), (0.0, 0.0));
    }

    #[test]
    fn leak_of_outlier_is_detected() {
        let mut c = cohort(40, 4).records().to_vec();
        let mut grid = [[0u32; WEEKS]; N_WINDOWS];
        grid[Window::Evening.index()] = [400; WEEKS];
        let outlier = StudentRecord::new("outlier", grid, AchievementLabel::High).unwrap();
        c.push(outlier.clone());
        let c = Cohort::new("t", c).unwrap();
        let dist = DataDistribution::BootstrapOfCohort { cohort: c };
        let q = [request("leak", QueryKind::LastRecordWindowTotal { window: Window::Evening })];
        let cfg = ShadowConfig { num_in: 32, num_out: 32, seed: 9 };
        let curve = empirical_curve(&outlier, &q, &dist, 41, &cfg, &SdcPolicy::disabled()).unwrap();
        let s = summarize_curve(&curve, &cfg).unwrap();
        assert_eq!(s.advantage, 1.0);
        assert!(s.nu_hat >= 2.0, "{s:?}");
        // under default SDC it is suppressed everywhere: nothing to learn
        let curve = empirical_curve(&outlier, &q, &dist, 41, &cfg, &SdcPolicy::default()).unwrap();
        assert_eq!(summarize_curve(&curve, &cfg).unwrap().advantage, 0.0);
    }

    #[test]
    fn membership_dependent_suppression_is_scored() {
        // IN always released, OUT always suppressed
        let inside = vec![Some(vec![1.0]); 8];
        let outside = vec![None; 8];
        let s = request_scores(&inside, &outside).unwrap();
        let curve = TradeoffCurve::from_scores(&s.inside, &s.outside).unwrap();
        assert_eq!(advantage(&curve), 1.0);
    }

    #[test]
    fn no_requests_total_is_stage1() {
        let c = cohort(12, 1);
        let dist = DataDistribution::BootstrapOfCohort { cohort: c.clone() };
        let r = audit_requests(
            &[],
            &dist,
            12,
            &c.records()[..2],
            0.7,
            &ShadowConfig::default(),
            &SdcPolicy::default(),
        )
        .unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.total_mu(), 0.7);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1);
    }

    #[test]
    fn candidates_include_outlier() {
        let mut recs = cohort(30, 6).records().to_vec();
        let mut grid = [[0u32; WEEKS]; N_WINDOWS];
        grid[Window::Overnight.index()] = [300; WEEKS];
        recs.push(StudentRecord::new("far", grid, AchievementLabel::Low).unwrap());
        let c = Cohort::new("t", recs).unwrap();
        let picked = select_candidates(&c, &CandidateSelection::default(), 1);
        assert_eq!(picked.len(), 16);
        assert_eq!(picked[0].id(), "far");
        let ids: std::collections::HashSet<_> = picked.iter().map(|r| r.id().to_string()).collect();
        assert_eq!(ids.len(), 16);
        assert_eq!(select_candidates(&c, &CandidateSelection::Exhaustive, 1).len(), 31);
        assert_eq!(select_candidates(&c, &CandidateSelection::default(), 1), picked);
    }
}
