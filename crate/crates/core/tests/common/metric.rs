//! FB-Score properties, run under proptest with a caller-chosen case count.

use codebias_core::metrics::{factual_shares, fb_score, FactualShares, GenderProbe};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

/// A valid probe: both probabilities in [0, 1], summing to at most 1.
fn probe() -> impl Strategy<Value = (f64, f64)> {
    (0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(a, b)| (a, b * (1.0 - a)))
}

fn reference(p_he: f64, p_she: f64, f: f64) -> f64 {
    (p_he - (1.0 + f) / 2.0).abs() + (p_she - (1.0 - f) / 2.0).abs()
}

fn run<S: Strategy>(cases: u32, s: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&s, test).map_err(|e| e.to_string())
}

/// Every property, `cases` inputs each. Returns the first failure.
pub fn check_fb_properties(cases: u32) -> Result<(), String> {
    // agrees with the formula, stays in [0, 2]
    run(cases, (probe(), -1.0..=1.0f64), |((h, s), f)| {
        let shares = factual_shares(f).unwrap();
        let fb = fb_score(&GenderProbe::new(h, s).unwrap(), &shares);
        prop_assert!((0.0..=2.0).contains(&fb), "fb {fb}");
        prop_assert!((fb - reference(h, s, f)).abs() < 1e-15);
        Ok(())
    })
    .map_err(|e| format!("bounds: {e}"))?;

    // zero exactly when the probe matches the shares
    run(cases, (probe(), -1.0..=1.0f64), |((h, s), f)| {
        let shares = factual_shares(f).unwrap();
        let at = GenderProbe::new(shares.f_he, shares.f_she).unwrap();
        prop_assert_eq!(fb_score(&at, &shares), 0.0);
        let fb = fb_score(&GenderProbe::new(h, s).unwrap(), &shares);
        prop_assert_eq!(fb == 0.0, h == shares.f_he && s == shares.f_she);
        Ok(())
    })
    .map_err(|e| format!("zero: {e}"))?;

    // moving p_he toward f_he never raises the score; moving away raises it
    run(cases, (probe(), -1.0..=1.0f64, 0.0..=1.0f64), |((h, s), f, t)| {
        let shares = factual_shares(f).unwrap();
        let before = fb_score(&GenderProbe::new(h, s).unwrap(), &shares);
        let toward = h + t * (shares.f_he - h);
        if toward + s <= 1.0 {
            let after = fb_score(&GenderProbe::new(toward, s).unwrap(), &shares);
            prop_assert!(after <= before + 1e-15, "{after} > {before}");
        }
        let away = if h >= shares.f_he { h + t * (1.0 - s - h) } else { h * (1.0 - t) };
        if away != h && (away - shares.f_he).abs() > (h - shares.f_he).abs() {
            let after = fb_score(&GenderProbe::new(away, s).unwrap(), &shares);
            prop_assert!(after > before, "{after} <= {before}");
        }
        Ok(())
    })
    .map_err(|e| format!("monotonicity: {e}"))?;

    // shares sum to one and survive a round trip through the pair form
    run(cases, -1.0..=1.0f64, |f| {
        let s = factual_shares(f).unwrap();
        prop_assert!((s.f_he + s.f_she - 1.0).abs() < 1e-15);
        prop_assert!((s.f_he - s.f_she - f).abs() < 1e-15);
        let back = FactualShares::from_pair(s.f_he, s.f_she).unwrap();
        prop_assert!((back.f_score - f).abs() < 1e-15);
        prop_assert!((back.f_he - s.f_he).abs() < 1e-15 && (back.f_she - s.f_she).abs() < 1e-15);
        Ok(())
    })
    .map_err(|e| format!("shares: {e}"))?;

    let s = factual_shares(-0.1).map_err(|e| e.to_string())?;
    if (s.f_he, s.f_she) != (0.45, 0.55) {
        return Err(format!("shares of -0.1 are ({}, {})", s.f_he, s.f_she));
    }
    Ok(())
}
