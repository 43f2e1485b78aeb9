use proptest::prelude::*;

use valsynth::audit::{request_scores, summarize_curve, ShadowConfig};
use valsynth::cohort::{
    bin_scores, feature_vector, load_cohort, save_cohort, AchievementLabel, Cohort, CohortFormat, MinuteGrid,
    Statistic, StudentRecord, Window, N_WINDOWS, WEEKS,
};
use valsynth::dp::{calibrate_gaussian, PrivacyBudget};
use valsynth::metrics::{ajs, js_divergence, BinningSpec};
use valsynth::tradeoff::{fit_gwmip, TradeoffCurve};
use valsynth::validate::{sdc_check, QueryKind, SdcPolicy};

fn grid_strategy() -> impl Strategy<Value = MinuteGrid> {
    prop::collection::vec(prop_oneof![Just(0u32), 1u32..=300], N_WINDOWS * WEEKS).prop_map(|v| {
        let mut g = [[0u32; WEEKS]; N_WINDOWS];
        for (i, m) in v.into_iter().enumerate() {
            g[i / WEEKS][i % WEEKS] = m;
        }
        g
    })
}

fn cohort_strategy(min: usize, max: usize) -> impl Strategy<Value = Cohort> {
    prop::collection::vec((grid_strategy(), 0usize..3), min..max).prop_map(|rows| {
        let records = rows
            .into_iter()
            .enumerate()
            .map(|(i, (g, l))| StudentRecord::new(format!("p{i}"), g, AchievementLabel::ALL[l]).unwrap())
            .collect();
        Cohort::new("prop", records).unwrap()
    })
}

/// Cohorts with every label present.
fn labelled_cohort() -> impl Strategy<Value = Cohort> {
    cohort_strategy(3, 12).prop_map(|c| {
        let records = c
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| StudentRecord::new(r.id(), *r.minutes(), AchievementLabel::ALL[i % 3]).unwrap())
            .collect();
        Cohort::new("prop", records).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bin_scores_invariant_under_monotone_maps(scores in prop::collection::vec(-1e3f64..1e3, 1..60)) {
        let base = bin_scores(&scores).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| 3.0 * s + 1.0).collect();
        let cubed: Vec<f64> = scores.iter().map(|s| s * s * s).collect();
        prop_assert_eq!(&bin_scores(&affine).unwrap(), &base);
        prop_assert_eq!(&bin_scores(&cubed).unwrap(), &base);
    }

    #[test]
    fn variance_is_squared_std(grid in grid_strategy()) {
        let r = StudentRecord::new("x", grid, AchievementLabel::Low).unwrap();
        let f = feature_vector(&r);
        for w in Window::ALL {
            let (sd, var) = (f.get(w, Statistic::Std), f.get(w, Statistic::Var));
            prop_assert!((sd * sd - var).abs() <= 1e-9 * var.max(1.0));
            prop_assert!(f.get(w, Statistic::Rms) + 1e-9 >= f.get(w, Statistic::Mean));
            prop_assert!(f.get(w, Statistic::Max) >= f.get(w, Statistic::Median));
        }
    }

    #[test]
    fn js_symmetric_and_bounded(
        p in prop::collection::vec(-50.0f64..50.0, 1..40),
        q in prop::collection::vec(-50.0f64..50.0, 1..40),
        bins in 2usize..30,
    ) {
        let spec = BinningSpec { bins, smoothing: 1e-10 };
        let a = js_divergence(&p, &q, &spec).unwrap();
        let b = js_divergence(&q, &p, &spec).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn ajs_ignores_record_order(c in labelled_cohort(), s in labelled_cohort()) {
        let spec = BinningSpec::default();
        let forward = ajs(&c, &s, &spec).unwrap();
        let rev = |x: &Cohort| Cohort::new("r", x.records().iter().rev().cloned().collect()).unwrap();
        prop_assert_eq!(forward, ajs(&rev(&c), &rev(&s), &spec).unwrap());
    }

    #[test]
    fn fit_ignores_duplicates_and_order(
        pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 3..30),
    ) {
        let curve = TradeoffCurve::from_points(pts.clone()).unwrap();
        let Ok(fit) = fit_gwmip(&curve, 20) else { return Ok(()) };
        let mut shuffled: Vec<(f64, f64)> = pts.iter().rev().copied().collect();
        shuffled.extend(pts.iter().copied());
        let again = fit_gwmip(&TradeoffCurve::from_points(shuffled).unwrap(), 20).unwrap();
        prop_assert_eq!(fit, again);
    }

    #[test]
    fn sdc_rejection_is_monotone_in_min_cell(
        groups in prop::collection::vec(0usize..20, 1..6),
        m in 1usize..15,
        extra in 0usize..10,
    ) {
        let kind = QueryKind::WindowLabelMeans;
        let loose = SdcPolicy { min_cell: m, ..SdcPolicy::default() };
        let strict = SdcPolicy { min_cell: m + extra, ..SdcPolicy::default() };
        if !sdc_check(&kind, &groups, &loose).is_accepted() {
            prop_assert!(!sdc_check(&kind, &groups, &strict).is_accepted());
        }
    }

    #[test]
    fn audit_scores_scale_invariant(
        ins in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 2), 8),
        outs in prop::collection::vec(prop::collection::vec(5.0f64..15.0, 2), 8),
        c in 0.01f64..100.0,
    ) {
        let wrap = |v: &[Vec<f64>], k: f64| -> Vec<Option<Vec<f64>>> {
            v.iter().map(|o| Some(o.iter().map(|x| x * k).collect())).collect()
        };
        let cfg = ShadowConfig { num_in: 8, num_out: 8, seed: 0 };
        let summary = |k: f64| {
            let s = request_scores(&wrap(&ins, k), &wrap(&outs, k)).unwrap();
            summarize_curve(&TradeoffCurve::from_scores(&s.inside, &s.outside).unwrap(), &cfg).unwrap()
        };
        let (a, b) = (summary(1.0), summary(c));
        prop_assert!((a.nu_hat - b.nu_hat).abs() <= 1e-9);
        prop_assert!((a.advantage - b.advantage).abs() <= 1e-12);
    }

    #[test]
    fn sigma_nonincreasing_in_budget(eps in 0.05f64..5.0, d1 in 1e-8f64..0.5, d2 in 1e-8f64..0.5) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let s_lo = calibrate_gaussian(&PrivacyBudget::new(eps, lo).unwrap(), 1.0).unwrap();
        let s_hi = calibrate_gaussian(&PrivacyBudget::new(eps, hi).unwrap(), 1.0).unwrap();
        prop_assert!(s_hi <= s_lo * (1.0 + 1e-12));
        let s_more_eps = calibrate_gaussian(&PrivacyBudget::new(eps * 2.0, lo).unwrap(), 1.0).unwrap();
        prop_assert!(s_more_eps <= s_lo * (1.0 + 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn cohort_round_trips_both_formats(c in cohort_strategy(1, 8)) {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("prop.csv");
        save_cohort(&c, &csv, CohortFormat::LongCsv).unwrap();
        prop_assert_eq!(&load_cohort(&csv, CohortFormat::LongCsv).unwrap(), &c);
        let json = dir.path().join("prop.json");
        save_cohort(&c, &json, CohortFormat::TensorJson).unwrap();
        prop_assert_eq!(&load_cohort(&json, CohortFormat::TensorJson).unwrap(), &c);
    }
}
