use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Shannon entropy in bits of the empirical distribution of `symbols`.
/// Incomplete episodes should arrive as their own symbol.
pub fn behavioral_entropy<S: AsRef<str>>(symbols: &[S]) -> f64 {
    if symbols.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in symbols {
        *counts.entry(s.as_ref()).or_default() += 1;
    }
    let n = symbols.len() as f64;
    let h: f64 = counts
        .values()
        .map(|c| {
            let p = *c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

/// Mean squared difference between consecutive executed actions; zero for
/// fewer than two actions.
pub fn episode_jitter(actions: &[[f64; 2]]) -> f64 {
    if actions.len() < 2 {
        return 0.0;
    }
    let total: f64 = actions
        .windows(2)
        .map(|w| (w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2))
        .sum();
    total / (actions.len() - 1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// One-sided p-value for `mean(a − b) > 0`.
    pub p_value: f64,
}

/// Paired one-sided t-test of `a > b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> PairedTest {
    assert_eq!(a.len(), b.len(), "paired samples must have equal length");
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return PairedTest { n, mean_diff: mean, t: f64::NAN, p_value: 1.0 };
    }
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    if se == 0.0 {
        let p = if mean > 0.0 { 0.0 } else { 1.0 };
        let t = if mean > 0.0 { f64::INFINITY } else { f64::NAN };
        return PairedTest { n, mean_diff: mean, t, p_value: p };
    }
    let t = mean / se;
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    PairedTest { n, mean_diff: mean, t, p_value: 1.0 - dist.cdf(t) }
}
