//! Trade-off functions: the Gaussian family `G_μ`, composition of Gaussian
//! guarantees, (ε, δ) duality, and fitting `G_ν` to empirical curves.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;

/// `G_μ(α) = Φ(Φ⁻¹(1−α) − μ)`.
pub fn g_mu_eval(mu: f64, alpha: f64) -> f64 {
    let alpha = alpha.clamp(0.0, 1.0);
    if mu == 0.0 {
        return 1.0 - alpha;
    }
    normal::cdf(normal::quantile(1.0 - alpha) - mu)
}

/// Gaussian composition: `√(μ² + ν²)`.
pub fn compose_gdp(mu: f64, nu: f64) -> f64 {
    mu.hypot(nu)
}

/// δ(ε) of a μ-GDP mechanism: `Φ(−ε/μ + μ/2) − e^ε Φ(−ε/μ − μ/2)`.
pub fn budget_of_gdp(mu: f64, epsilon: f64) -> f64 {
    if mu <= 0.0 {
        return 0.0;
    }
    let a = normal::cdf(-epsilon / mu + mu / 2.0);
    let b = normal::cdf(-epsilon / mu - mu / 2.0);
    (a - epsilon.exp() * b).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fpr: f64,
    pub fnr: f64,
}

/// A trade-off curve stored as (FPR, FNR) points sorted by FPR.
///
/// Construction replaces each FNR by the lower convex hull of the input
/// (with the trivial tests `(0, 1)` and `(1, 0)` always added), so the stored
/// curve is convex, nonincreasing, and below `1 − α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    points: Vec<CurvePoint>,
}

fn cross(o: CurvePoint, a: CurvePoint, b: CurvePoint) -> f64 {
    (a.fpr - o.fpr) * (b.fnr - o.fnr) - (a.fnr - o.fnr) * (b.fpr - o.fpr)
}

fn interpolate(a: CurvePoint, b: CurvePoint, x: f64) -> f64 {
    if b.fpr == a.fpr {
        return a.fnr.min(b.fnr);
    }
    a.fnr + (b.fnr - a.fnr) * (x - a.fpr) / (b.fpr - a.fpr)
}

impl TradeoffCurve {
    pub fn from_points<I>(points: I) -> Result<Self>
    where
        I: IntoIterator<Item = (f64, f64)>,
    {
        let mut pts = vec![CurvePoint { fpr: 0.0, fnr: 1.0 }, CurvePoint { fpr: 1.0, fnr: 0.0 }];
        for (fpr, fnr) in points {
            if !(0.0..=1.0).contains(&fpr) || !(0.0..=1.0).contains(&fnr) {
                return Err(Error::InvalidParameter(format!(
                    "curve point ({fpr}, {fnr}) outside the unit square"
                )));
            }
            pts.push(CurvePoint { fpr, fnr });
        }
        pts.sort_by(|a, b| a.fpr.total_cmp(&b.fpr).then(a.fnr.total_cmp(&b.fnr)));
        pts.dedup_by(|later, earlier| later.fpr == earlier.fpr);

        let mut hull: Vec<CurvePoint> = Vec::with_capacity(pts.len());
        for &p in &pts {
            while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }

        let mut seg = 0;
        let points = pts
            .iter()
            .map(|p| {
                while seg + 1 < hull.len() - 1 && hull[seg + 1].fpr <= p.fpr {
                    seg += 1;
                }
                let (a, b) = (hull[seg], hull[(seg + 1).min(hull.len() - 1)]);
                let fnr = if p.fpr == a.fpr {
                    a.fnr
                } else if p.fpr == b.fpr {
                    b.fnr
                } else {
                    interpolate(a, b, p.fpr)
                };
                CurvePoint { fpr: p.fpr, fnr: fnr.clamp(0.0, 1.0) }
            })
            .collect();
        Ok(Self { points })
    }

    /// Empirical curve of the test "declare IN when score ≥ γ", with γ swept
    /// over every achieved score and ±∞.
    pub fn from_scores(in_scores: &[f64], out_scores: &[f64]) -> Result<Self> {
        if in_scores.is_empty() || out_scores.is_empty() {
            return Err(Error::EmptyInput("scores on both sides are required"));
        }
        if in_scores.iter().chain(out_scores).any(|s| s.is_nan()) {
            return Err(Error::InvalidParameter("NaN attack score".into()));
        }
        let mut ins = in_scores.to_vec();
        let mut outs = out_scores.to_vec();
        ins.sort_by(f64::total_cmp);
        outs.sort_by(f64::total_cmp);
        let mut thresholds: Vec<f64> = ins.iter().chain(&outs).copied().collect();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();

        let (k, m) = (ins.len() as f64, outs.len() as f64);
        let mut pts = Vec::with_capacity(thresholds.len() + 2);
        pts.push((1.0, 0.0));
        for &g in &thresholds {
            let fp = outs.len() - outs.partition_point(|&s| s < g);
            let fn_ = ins.partition_point(|&s| s < g);
            pts.push((fp as f64 / m, fn_ as f64 / k));
        }
        pts.push((0.0, 1.0));
        Self::from_points(pts)
    }

    pub fn points(&self) -> &[CurvePoint] {
        &self.points
    }

    /// Piecewise-linear value at `alpha`.
    pub fn eval(&self, alpha: f64) -> f64 {
        let alpha = alpha.clamp(0.0, 1.0);
        let i = self.points.partition_point(|p| p.fpr < alpha);
        if i < self.points.len() && self.points[i].fpr == alpha {
            return self.points[i].fnr;
        }
        if i == 0 {
            return self.points[0].fnr;
        }
        if i == self.points.len() {
            return self.points[i - 1].fnr;
        }
        interpolate(self.points[i - 1], self.points[i], alpha)
    }

    /// The same curve evaluated on a new FPR grid.
    pub fn resample(&self, alphas: &[f64]) -> Result<Self> {
        Self::from_points(alphas.iter().map(|&a| (a.clamp(0.0, 1.0), self.eval(a))))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["alpha", "beta"])?;
        for p in &self.points {
            w.write_record([p.fpr.to_string(), p.fnr.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<curve csv>", e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegretMode {
    /// `max |G_ν̂(α) − β(α)|`.
    #[default]
    TwoSided,
    /// Only the part of the curve lying below the fit: `max (G_ν̂(α) − β(α))⁺`.
    OneSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GwmipFit {
    pub nu: f64,
    pub regret: f64,
    pub retained: usize,
}

pub fn fit_gwmip(curve: &TradeoffCurve, n_shadows: usize) -> Result<GwmipFit> {
    fit_gwmip_with(curve, n_shadows, RegretMode::TwoSided)
}

/// Fits `ν` pointwise on FPRs strictly inside `(2/n, 1 − 2/n)` and takes the
/// median. FNRs are clamped to `[1/(2n), 1 − 1/(2n)]` inside `Φ⁻¹` only;
/// regret is measured against the unclamped curve.
pub fn fit_gwmip_with(curve: &TradeoffCurve, n_shadows: usize, mode: RegretMode) -> Result<GwmipFit> {
    if n_shadows < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 shadows per side, got {n_shadows}")));
    }
    let n = n_shadows as f64;
    let (lo, hi) = (2.0 / n, 1.0 - 2.0 / n);
    let (floor, ceil) = (0.5 / n, 1.0 - 0.5 / n);
    let retained: Vec<CurvePoint> =
        curve.points().iter().copied().filter(|p| p.fpr > lo && p.fpr < hi).collect();
    if retained.len() < 3 {
        return Err(Error::TooFewPoints { retained: retained.len(), required: 3 });
    }
    let mut nus: Vec<f64> = retained
        .iter()
        .map(|p| normal::quantile(1.0 - p.fpr) - normal::quantile(p.fnr.clamp(floor, ceil)))
        .collect();
    nus.sort_by(f64::total_cmp);
    let mid = nus.len() / 2;
    let median = if nus.len() % 2 == 1 { nus[mid] } else { 0.5 * (nus[mid - 1] + nus[mid]) };
    let nu = median.max(0.0);
    let regret = retained
        .iter()
        .map(|p| {
            let gap = g_mu_eval(nu, p.fpr) - p.fnr;
            match mode {
                RegretMode::TwoSided => gap.abs(),
                RegretMode::OneSided => gap.max(0.0),
            }
        })
        .fold(0.0, f64::max);
    Ok(GwmipFit { nu, regret, retained: retained.len() })
}
