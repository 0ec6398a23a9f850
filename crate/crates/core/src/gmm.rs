//! Closed-form mathematics of diagonal-covariance Gaussian mixtures.
//!
//! Densities are always formed in log space: component log-densities are
//! combined with log-sum-exp and normalized into responsibilities, and the
//! linear-space quantities (`p`, `∇p`, `∇²p`) are reconstructed from those by
//! a single exponentiation. Down-scaled variances push densities far outside
//! the range of `f64`, so nothing here ever sums raw densities.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on every standard deviation, in normalized action units.
pub const SIGMA_FLOOR: f64 = 1e-4;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// One conditional action distribution: `k` diagonal Gaussians in `m` dims.
///
/// Means and standard deviations are stored row-major, component by component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmSpec", into = "GmmSpec")]
pub struct GmmParams {
    k: usize,
    m: usize,
    weights: Vec<f64>,
    means: Vec<f64>,
    stddevs: Vec<f64>,
}

/// On-disk form: `{"weights":[...], "means":[[...]], "stddevs":[[...]]}`.
#[derive(Serialize, Deserialize)]
struct GmmSpec {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    stddevs: Vec<Vec<f64>>,
}

impl TryFrom<GmmSpec> for GmmParams {
    type Error = Error;

    fn try_from(spec: GmmSpec) -> Result<Self> {
        GmmParams::new(spec.weights, spec.means, spec.stddevs)
    }
}

impl From<GmmParams> for GmmSpec {
    fn from(g: GmmParams) -> Self {
        GmmSpec {
            means: (0..g.k).map(|i| g.mean(i).to_vec()).collect(),
            stddevs: (0..g.k).map(|i| g.stddev(i).to_vec()).collect(),
            weights: g.weights,
        }
    }
}

impl GmmParams {
    /// Validates and builds a mixture. Weights summing to one within `1e-9`
    /// are accepted and renormalized.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, stddevs: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidGmm("mixture needs at least one component".into()));
        }
        if means.len() != k || stddevs.len() != k {
            return Err(Error::InvalidGmm(format!(
                "{k} weights but {} means and {} stddev rows",
                means.len(),
                stddevs.len()
            )));
        }
        let m = means[0].len();
        if m == 0 {
            return Err(Error::InvalidGmm("action dimension must be at least 1".into()));
        }
        if means.iter().chain(stddevs.iter()).any(|row| row.len() != m) {
            return Err(Error::InvalidGmm("ragged means/stddevs".into()));
        }
        Self::from_flat(k, m, weights, means.concat(), stddevs.concat())
    }

    pub fn from_flat(
        k: usize,
        m: usize,
        mut weights: Vec<f64>,
        means: Vec<f64>,
        stddevs: Vec<f64>,
    ) -> Result<Self> {
        if k == 0 || m == 0 {
            return Err(Error::InvalidGmm("k and m must be at least 1".into()));
        }
        if weights.len() != k || means.len() != k * m || stddevs.len() != k * m {
            return Err(Error::InvalidGmm(format!(
                "flat buffers do not match k={k}, m={m}"
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidGmm("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidGmm(format!("weights sum to {total}, not 1")));
        }
        if total != 1.0 {
            weights.iter_mut().for_each(|w| *w /= total);
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGmm("non-finite mean".into()));
        }
        if let Some(s) = stddevs.iter().find(|s| !(s.is_finite() && **s >= SIGMA_FLOOR)) {
            return Err(Error::InvalidGmm(format!(
                "stddev {s} below floor {SIGMA_FLOOR}"
            )));
        }
        Ok(GmmParams { k, m, weights, means, stddevs })
    }

    pub fn n_components(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i * self.m..(i + 1) * self.m]
    }

    pub fn stddev(&self, i: usize) -> &[f64] {
        &self.stddevs[i * self.m..(i + 1) * self.m]
    }

    /// `ln πᵢ + ln N(x | μᵢ, σᵢ²)` for every component.
    pub fn joint_log_densities(&self, x: &[f64]) -> Vec<f64> {
        (0..self.k)
            .map(|i| self.weights[i].ln() + diag_normal_log_pdf(x, self.mean(i), self.stddev(i)))
            .collect()
    }

    /// Normalized responsibilities and the mixture log-density at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut joint = self.joint_log_densities(x);
        let lse = log_sum_exp(&joint);
        if lse.is_finite() {
            joint.iter_mut().for_each(|l| *l = (*l - lse).exp());
        } else {
            joint.iter_mut().for_each(|l| *l = 0.0);
        }
        (joint, lse)
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.joint_log_densities(x))
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }

    /// Index of the heaviest component (lowest index on ties).
    pub fn argmax_weight(&self) -> usize {
        let mut best = 0;
        for (i, w) in self.weights.iter().enumerate() {
            if *w > self.weights[best] {
                best = i;
            }
        }
        best
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.m {
            return Err(Error::Shape(format!("point has {} dims, mixture {}", x.len(), self.m)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("point is not finite".into()));
        }
        Ok(())
    }
}

pub fn diag_normal_log_pdf(x: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((xj, mj), sj) in x.iter().zip(mean).zip(std) {
        let z = (xj - mj) / sj;
        acc += z * z + LN_2PI + 2.0 * sj.ln();
    }
    -0.5 * acc
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Density, log-density and their first two derivatives at one point.
#[derive(Clone, Debug)]
pub struct GmmEval {
    pub density: f64,
    pub log_density: f64,
    pub grad_p: DVector<f64>,
    pub hess_p: DMatrix<f64>,
    pub grad_logp: DVector<f64>,
    pub hess_logp: DMatrix<f64>,
    /// `p(x)` underflowed to zero; the linear-space fields are zero while the
    /// log-space fields remain exact.
    pub underflow: bool,
}

/// Evaluates the mixture and its derivatives in a single responsibility pass.
pub fn evaluate(gmm: &GmmParams, x: &[f64]) -> Result<GmmEval> {
    gmm.check_point(x)?;
    let m = gmm.m;
    let (resp, log_density) = gmm.responsibilities(x);

    // grad log p = Σ rᵢ Λᵢ (μᵢ − x);  (∇²p)/p = Σ rᵢ (dᵢ dᵢᵀ − Λᵢ) with dᵢ = Λᵢ (μᵢ − x)
    let mut grad_logp = DVector::zeros(m);
    let mut hess_over_p = DMatrix::zeros(m, m);
    let mut d = vec![0.0; m];
    for (i, r) in resp.iter().enumerate() {
        if *r == 0.0 {
            continue;
        }
        let (mu, sd) = (gmm.mean(i), gmm.stddev(i));
        for j in 0..m {
            let prec = 1.0 / (sd[j] * sd[j]);
            d[j] = prec * (mu[j] - x[j]);
            grad_logp[j] += r * d[j];
            hess_over_p[(j, j)] -= r * prec;
        }
        for a in 0..m {
            for b in 0..m {
                hess_over_p[(a, b)] += r * d[a] * d[b];
            }
        }
    }
    let hess_logp = &hess_over_p - &grad_logp * grad_logp.transpose();
    let density = log_density.exp();
    Ok(GmmEval {
        density,
        log_density,
        grad_p: &grad_logp * density,
        hess_p: hess_over_p * density,
        grad_logp,
        hess_logp,
        underflow: density == 0.0,
    })
}

#[derive(Clone, Debug)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Mixture mean `Σ πᵢ μᵢ` and covariance
/// `Σ πᵢ (diag σᵢ² + (μᵢ − μ̄)(μᵢ − μ̄)ᵀ)`.
pub fn moments(gmm: &GmmParams) -> Moments {
    let m = gmm.m;
    let mut mean = DVector::zeros(m);
    for i in 0..gmm.k {
        mean += DVector::from_column_slice(gmm.mean(i)) * gmm.weights[i];
    }
    let mut cov = DMatrix::zeros(m, m);
    for i in 0..gmm.k {
        let w = gmm.weights[i];
        let diff = DVector::from_column_slice(gmm.mean(i)) - &mean;
        cov += &diff * diff.transpose() * w;
        for (j, s) in gmm.stddev(i).iter().enumerate() {
            cov[(j, j)] += w * s * s;
        }
    }
    Moments { mean, cov }
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let total: f64 = probs.iter().sum();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last_positive = i;
        }
        acc += p / total;
        if u < acc && *p > 0.0 {
            return i;
        }
    }
    last_positive
}

/// Draws one sample and reports which component produced it.
pub fn sample_component<R: Rng + ?Sized>(gmm: &GmmParams, rng: &mut R) -> (usize, Vec<f64>) {
    let i = sample_categorical(&gmm.weights, rng);
    let x = gmm
        .mean(i)
        .iter()
        .zip(gmm.stddev(i))
        .map(|(mu, s)| {
            let z: f64 = rng.sample(StandardNormal);
            mu + s * z
        })
        .collect();
    (i, x)
}

/// Categorical component index, then a draw from that Gaussian.
pub fn sample_vanilla<R: Rng + ?Sized>(gmm: &GmmParams, rng: &mut R, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| sample_component(gmm, rng).1).collect()
}

/// Replaces every variance `σ²` by `α σ²`, flooring the result at
/// [`SIGMA_FLOOR`]. Weights and means are untouched.
pub fn scale_variances(gmm: &GmmParams, alpha: f64) -> Result<GmmParams> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "variance scale must lie in (0, 1], got {alpha}"
        )));
    }
    let factor = alpha.sqrt();
    let mut out = gmm.clone();
    out.stddevs
        .iter_mut()
        .for_each(|s| *s = (*s * factor).max(SIGMA_FLOOR));
    Ok(out)
}

/// Number of components whose weight is at least `threshold`.
pub fn count_active_components(gmm: &GmmParams, threshold: f64) -> usize {
    gmm.weights.iter().filter(|w| **w >= threshold).count()
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of `softplus(x) + SIGMA_FLOOR` for `sigma > SIGMA_FLOOR`.
pub fn sigma_preactivation(sigma: f64) -> f64 {
    let s = sigma - SIGMA_FLOOR;
    // ln(eˢ − 1), stable for large s
    s + (-(-s).exp()).ln_1p()
}

/// Unconstrained head outputs for one position: `k` mixture logits, `k×m`
/// means and `k×m` standard-deviation pre-activations.
///
/// The flat layout used by the policy head is `[logits | means | sigma_pre]`,
/// `k·(1+2m)` numbers in total. Standard deviations (not variances) come out
/// of `softplus(pre) + SIGMA_FLOOR`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawHeadOutputs {
    pub k: usize,
    pub m: usize,
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    pub sigma_pre: Vec<f64>,
}

impl RawHeadOutputs {
    pub fn width(k: usize, m: usize) -> usize {
        k * (1 + 2 * m)
    }

    pub fn zeros(k: usize, m: usize) -> Self {
        RawHeadOutputs {
            k,
            m,
            logits: vec![0.0; k],
            means: vec![0.0; k * m],
            sigma_pre: vec![0.0; k * m],
        }
    }

    pub fn from_flat(k: usize, m: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != Self::width(k, m) {
            return Err(Error::Shape(format!(
                "head output has {} numbers, expected {}",
                flat.len(),
                Self::width(k, m)
            )));
        }
        Ok(RawHeadOutputs {
            k,
            m,
            logits: flat[..k].to_vec(),
            means: flat[k..k + k * m].to_vec(),
            sigma_pre: flat[k + k * m..].to_vec(),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::width(self.k, self.m));
        out.extend_from_slice(&self.logits);
        out.extend_from_slice(&self.means);
        out.extend_from_slice(&self.sigma_pre);
        out
    }

    fn log_weights(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.logits);
        self.logits.iter().map(|l| l - lse).collect()
    }

    fn stddevs(&self) -> Vec<f64> {
        self.sigma_pre.iter().map(|s| softplus(*s) + SIGMA_FLOOR).collect()
    }

    /// Softmax weights, identity means, softplus-with-floor deviations.
    pub fn to_gmm(&self) -> Result<GmmParams> {
        if self.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite head output".into()));
        }
        let weights: Vec<f64> = self.log_weights().iter().map(|l| l.exp()).collect();
        let total: f64 = weights.iter().sum();
        GmmParams::from_flat(
            self.k,
            self.m,
            weights.iter().map(|w| w / total).collect(),
            self.means.clone(),
            self.stddevs(),
        )
    }
}

#[derive(Clone, Debug)]
pub struct NllGrads {
    pub nll: f64,
    pub grads: RawHeadOutputs,
}

/// Negative log-likelihood of `x` under the mixture described by `raw`, and
/// its gradient with respect to every raw head output.
pub fn nll_param_grads(raw: &RawHeadOutputs, x: &[f64]) -> Result<NllGrads> {
    let (k, m) = (raw.k, raw.m);
    if x.len() != m {
        return Err(Error::Shape(format!("target has {} dims, head {}", x.len(), m)));
    }
    let log_w = raw.log_weights();
    let sigma = raw.stddevs();
    let joint: Vec<f64> = (0..k)
        .map(|i| log_w[i] + diag_normal_log_pdf(x, &raw.means[i * m..(i + 1) * m], &sigma[i * m..(i + 1) * m]))
        .collect();
    let lse = log_sum_exp(&joint);
    let mut grads = RawHeadOutputs::zeros(k, m);
    for i in 0..k {
        let r = (joint[i] - lse).exp();
        grads.logits[i] = log_w[i].exp() - r;
        for j in 0..m {
            let idx = i * m + j;
            let s = sigma[idx];
            let diff = x[j] - raw.means[idx];
            grads.means[idx] = -r * diff / (s * s);
            let dnll_dsigma = -r * (diff * diff / (s * s * s) - 1.0 / s);
            grads.sigma_pre[idx] = dnll_dsigma * sigmoid(raw.sigma_pre[idx]);
        }
    }
    Ok(NllGrads { nll: -lse, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gmm1(weights: &[f64], means: &[&[f64]], stds: &[&[f64]]) -> GmmParams {
        GmmParams::new(
            weights.to_vec(),
            means.iter().map(|r| r.to_vec()).collect(),
            stds.iter().map(|r| r.to_vec()).collect(),
        )
        .unwrap()
    }

    fn random_gmm(rng: &mut ChaCha8Rng, k: usize, m: usize) -> GmmParams {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        GmmParams::from_flat(
            k,
            m,
            raw.iter().map(|w| w / total).collect(),
            (0..k * m).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..k * m).map(|_| rng.random_range(0.4..1.5)).collect(),
        )
        .unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
    }

    // Central differences of log p: step h for the gradient, second
    // differences at step 1e-4 for the Hessian (the 1e-5 step loses too many
    // digits to cancellation in a second difference).
    fn fd_log_derivs(g: &GmmParams, x: &[f64], h: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
        let m = x.len();
        let f = |p: &[f64]| g.log_density(p);
        let grad = (0..m)
            .map(|i| {
                let (mut a, mut b) = (x.to_vec(), x.to_vec());
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect();
        let hh = 1e-4;
        let mut hess = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                let at = |di: f64, dj: f64| {
                    let mut p = x.to_vec();
                    p[i] += di;
                    p[j] += dj;
                    f(&p)
                };
                hess[i][j] = (at(hh, hh) - at(hh, -hh) - at(-hh, hh) + at(-hh, -hh)) / (4.0 * hh * hh);
            }
        }
        (grad, hess)
    }

    #[test]
    fn standard_normal_at_mean() {
        let g = gmm1(&[1.0], &[&[0.0]], &[&[1.0]]);
        let e = evaluate(&g, &[0.0]).unwrap();
        assert!((e.log_density + 0.5 * LN_2PI).abs() < 1e-15);
        assert!((e.log_density - (-0.918_938_533_204_672_7)).abs() < 1e-12);
        assert_eq!(e.grad_p[0], 0.0);
        assert!((e.hess_logp[(0, 0)] + 1.0).abs() < 1e-15);
        assert!(!e.underflow);
    }

    #[test]
    fn symmetric_pair_at_origin() {
        for a in [0.5, 1.0, 2.5] {
            let g = gmm1(&[0.5, 0.5], &[&[-a], &[a]], &[&[1.0], &[1.0]]);
            let e = evaluate(&g, &[0.0]).unwrap();
            let phi = (-0.5 * a * a).exp() / (2.0 * std::f64::consts::PI).sqrt();
            assert!((e.density - phi).abs() < 1e-15);
            assert!(e.grad_p[0].abs() < 1e-16);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let g = random_gmm(&mut rng, 4, 3);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e = evaluate(&g, &x).unwrap();
            let (fg, fh) = fd_log_derivs(&g, &x, 1e-5);
            for i in 0..3 {
                assert!(rel(e.grad_logp[i], fg[i]) < 1e-5, "grad {i}: {} vs {}", e.grad_logp[i], fg[i]);
                for j in 0..3 {
                    assert!(rel(e.hess_logp[(i, j)], fh[i][j]) < 1e-5);
                    assert!((e.hess_p[(i, j)] - e.hess_p[(j, i)]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn far_point_flags_underflow_without_nan() {
        let g = gmm1(&[1.0], &[&[0.0, 0.0]], &[&[1e-3, 1e-3]]);
        let e = evaluate(&g, &[5.0, 0.0]).unwrap();
        assert!(e.underflow);
        assert_eq!(e.density, 0.0);
        assert!(e.log_density.is_finite() && e.log_density < -1e6);
        assert!(e.grad_logp.iter().all(|v| v.is_finite()));
        assert!(e.hess_logp.iter().all(|v| v.is_finite()));
        assert!(evaluate(&g, &[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn moments_closed_forms() {
        let g = gmm1(&[0.5, 0.5], &[&[0.0, 0.0], &[2.0, 0.0]], &[&[1.0, 1.0], &[1.0, 1.0]]);
        let mo = moments(&g);
        assert_eq!(mo.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(mo.cov, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]));

        let g = gmm1(&[1.0], &[&[0.3, -0.2]], &[&[0.5, 2.0]]);
        let mo = moments(&g);
        assert_eq!(mo.mean.as_slice(), &[0.3, -0.2]);
        assert_eq!(mo.cov, DMatrix::from_row_slice(2, 2, &[0.25, 0.0, 0.0, 4.0]));
    }

    #[test]
    fn monte_carlo_covariance_within_three_standard_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_gmm(&mut rng, 3, 2);
        let mo = moments(&g);
        let n = 1_000_000;
        let xs = sample_vanilla(&g, &mut rng, n);
        let mean: Vec<f64> = (0..2).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n as f64).collect();
        for a in 0..2 {
            for b in 0..2 {
                let prods: Vec<f64> = xs.iter().map(|x| (x[a] - mean[a]) * (x[b] - mean[b])).collect();
                let c = prods.iter().sum::<f64>() / (n - 1) as f64;
                let var = prods.iter().map(|p| (p - c) * (p - c)).sum::<f64>() / (n - 1) as f64;
                let se = (var / n as f64).sqrt();
                assert!((c - mo.cov[(a, b)]).abs() < 3.0 * se, "cov[{a},{b}] {c} vs {}", mo.cov[(a, b)]);
            }
        }
    }

    #[test]
    fn degenerate_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = gmm1(&[1.0], &[&[0.4, -0.7]], &[&[SIGMA_FLOOR, SIGMA_FLOOR]]);
        for x in sample_vanilla(&g, &mut rng, 1000) {
            assert!((x[0] - 0.4).abs() < 6.0 * SIGMA_FLOOR && (x[1] + 0.7).abs() < 6.0 * SIGMA_FLOOR);
        }
        let g = gmm1(&[1.0, 0.0], &[&[0.0], &[5.0]], &[&[1.0], &[1.0]]);
        assert!((0..1000).all(|_| sample_component(&g, &mut rng).0 == 0));
    }

    #[test]
    fn component_frequencies_match_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = gmm1(&[0.5, 0.5], &[&[-1.0], &[1.0]], &[&[0.3], &[0.3]]);
        let n = 100_000;
        let ones = (0..n).filter(|_| sample_component(&g, &mut rng).0 == 1).count() as f64;
        let sd = (n as f64 * 0.25).sqrt();
        assert!((ones - 0.5 * n as f64).abs() < 3.0 * sd);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let g = gmm1(&[0.3, 0.7], &[&[-1.0], &[1.0]], &[&[0.3], &[0.5]]);
        let a = sample_vanilla(&g, &mut ChaCha8Rng::seed_from_u64(9), 50);
        let b = sample_vanilla(&g, &mut ChaCha8Rng::seed_from_u64(9), 50);
        assert_eq!(a, b);
    }

    #[test]
    fn variance_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_gmm(&mut rng, 3, 2);
        assert_eq!(scale_variances(&g, 1.0).unwrap(), g);
        let s = scale_variances(&g, 1e-6).unwrap();
        assert_eq!(s.weights(), g.weights());
        for i in 0..3 {
            assert_eq!(s.mean(i), g.mean(i));
            for (a, b) in s.stddev(i).iter().zip(g.stddev(i)) {
                assert!((a - (b * 1e-3).max(SIGMA_FLOOR)).abs() < 1e-18);
            }
        }
        for bad in [0.0, -0.5, 1.5, f64::NAN] {
            assert!(scale_variances(&g, bad).is_err());
        }
        let floored = gmm1(&[1.0], &[&[0.0]], &[&[2e-4]]);
        assert_eq!(scale_variances(&floored, 1e-6).unwrap().stddev(0)[0], SIGMA_FLOOR);
    }

    #[test]
    fn scaled_covariance_follows_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_gmm(&mut rng, 4, 3);
        let base = moments(&g);
        for alpha in [1.0, 0.3, 1e-2, 1e-6] {
            let scaled = moments(&scale_variances(&g, alpha).unwrap());
            let mut expected = DMatrix::zeros(3, 3);
            for i in 0..4 {
                let w = g.weights()[i];
                let d = DVector::from_column_slice(g.mean(i)) - &base.mean;
                expected += &d * d.transpose() * w;
                for j in 0..3 {
                    let s = (g.stddev(i)[j] * alpha.sqrt()).max(SIGMA_FLOOR);
                    expected[(j, j)] += w * s * s;
                }
            }
            assert!((scaled.cov - expected).abs().max() < 1e-14);
        }
    }

    #[test]
    fn active_component_counts() {
        let four = |w: [f64; 4]| gmm1(&w, &[&[0.0][..]; 4], &[&[1.0][..]; 4]);
        assert_eq!(count_active_components(&four([1.0, 0.0, 0.0, 0.0]), 0.1), 1);
        assert_eq!(count_active_components(&four([0.25; 4]), 0.1), 4);
        let two = gmm1(&[0.05, 0.95], &[&[0.0], &[1.0]], &[&[1.0], &[1.0]]);
        assert_eq!(count_active_components(&two, 0.1), 1);
    }

    #[test]
    fn nll_at_gaussian_mean() {
        let mut raw = RawHeadOutputs::zeros(1, 3);
        raw.means = vec![0.2, -0.4, 0.9];
        raw.sigma_pre = vec![sigma_preactivation(1.0); 3];
        let out = nll_param_grads(&raw, &[0.2, -0.4, 0.9]).unwrap();
        assert!((out.nll - 1.5 * LN_2PI).abs() < 1e-12);
        assert!(out.grads.means.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn identical_components_have_zero_logit_gradient() {
        let mut raw = RawHeadOutputs::zeros(2, 2);
        raw.logits = vec![0.7, 0.7];
        raw.means = vec![0.1, 0.2, 0.1, 0.2];
        raw.sigma_pre = vec![0.3, -0.2, 0.3, -0.2];
        let out = nll_param_grads(&raw, &[0.5, -0.5]).unwrap();
        assert!(out.grads.logits.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (k, m) = (4, 2);
        for _ in 0..20 {
            let flat: Vec<f64> = (0..RawHeadOutputs::width(k, m)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let raw = RawHeadOutputs::from_flat(k, m, &flat).unwrap();
            let x: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let analytic = nll_param_grads(&raw, &x).unwrap().grads.to_flat();
            let h = 1e-5;
            for idx in 0..flat.len() {
                let nll_at = |d: f64| {
                    let mut f = flat.clone();
                    f[idx] += d;
                    nll_param_grads(&RawHeadOutputs::from_flat(k, m, &f).unwrap(), &x).unwrap().nll
                };
                let fd = (nll_at(h) - nll_at(-h)) / (2.0 * h);
                assert!(rel(analytic[idx], fd) < 1e-4, "entry {idx}: {} vs {fd}", analytic[idx]);
            }
        }
    }

    #[test]
    fn spec_file_roundtrip_keeps_field_order() {
        let g = gmm1(&[0.25, 0.75], &[&[0.0, 1.0], &[2.0, 3.0]], &[&[1.0, 1.0], &[0.5, 0.5]]);
        let text = serde_json::to_string(&g).unwrap();
        assert!(text.starts_with("{\"weights\":"));
        assert!(text.find("means").unwrap() < text.find("stddevs").unwrap());
        assert_eq!(serde_json::from_str::<GmmParams>(&text).unwrap(), g);
        assert!(serde_json::from_str::<GmmParams>(r#"{"weights":[0.5,0.4],"means":[[0],[1]],"stddevs":[[1],[1]]}"#).is_err());
        assert!(serde_json::from_str::<GmmParams>(r#"{"weights":[1],"means":[[0]],"stddevs":[[0.0]]}"#).is_err());
    }

    fn trapezoid(values: &[f64], h: f64) -> f64 {
        h * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[values.len() - 1]))
    }

    #[test]
    fn density_integrates_to_one() {
        let g = gmm1(&[0.3, 0.7], &[&[-0.5], &[1.0]], &[&[0.4], &[0.8]]);
        let (lo, hi) = (-0.5 - 10.0 * 0.8, 1.0 + 10.0 * 0.8);
        let n = 20_001;
        let h = (hi - lo) / (n - 1) as f64;
        let vals: Vec<f64> = (0..n).map(|i| g.density(&[lo + i as f64 * h])).collect();
        assert!((trapezoid(&vals, h) - 1.0).abs() < 1e-4);

        let g = gmm1(&[0.5, 0.5], &[&[0.0, 0.0], &[1.0, -1.0]], &[&[0.5, 0.3], &[0.4, 0.6]]);
        let (lo, hi, n) = (-7.0, 7.0, 1401);
        let h = (hi - lo) / (n - 1) as f64;
        let rows: Vec<f64> = (0..n)
            .map(|i| {
                let x = lo + i as f64 * h;
                let row: Vec<f64> = (0..n).map(|j| g.density(&[x, lo + j as f64 * h])).collect();
                trapezoid(&row, h)
            })
            .collect();
        assert!((trapezoid(&rows, h) - 1.0).abs() < 1e-4);
    }

    fn gmm_strategy() -> impl Strategy<Value = (GmmParams, Vec<f64>)> {
        (1usize..=6, 1usize..=8).prop_flat_map(|(m, k)| {
            (
                prop::collection::vec(0.1f64..1.0, k),
                prop::collection::vec(-1.0f64..1.0, k * m),
                prop::collection::vec(0.4f64..1.5, k * m),
                prop::collection::vec(-1.0f64..1.0, m),
            )
                .prop_map(move |(w, mu, sd, x)| {
                    let t: f64 = w.iter().sum();
                    let w = w.iter().map(|v| v / t).collect();
                    (GmmParams::from_flat(k, m, w, mu, sd).unwrap(), x)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn log_derivatives_match_fd_across_family((g, x) in gmm_strategy()) {
            let e = evaluate(&g, &x).unwrap();
            let (fg, fh) = fd_log_derivs(&g, &x, 1e-5);
            for i in 0..x.len() {
                prop_assert!(rel(e.grad_logp[i], fg[i]) < 1e-5);
                for j in 0..x.len() {
                    prop_assert!(rel(e.hess_logp[(i, j)], fh[i][j]) < 1e-5);
                    prop_assert!((e.hess_logp[(i, j)] - e.hess_logp[(j, i)]).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn covariance_is_psd((g, _x) in gmm_strategy()) {
            let cov = moments(&g).cov;
            let eig = cov.symmetric_eigenvalues();
            prop_assert!(eig.iter().all(|v| *v >= -1e-10));
        }

        #[test]
        fn scaling_composes((g, _x) in gmm_strategy(), a in 1e-3f64..1.0, b in 1e-3f64..1.0) {
            let twice = scale_variances(&scale_variances(&g, a).unwrap(), b).unwrap();
            let once = scale_variances(&g, a * b).unwrap();
            prop_assert_eq!(twice.weights(), g.weights());
            for i in 0..g.n_components() {
                prop_assert_eq!(twice.mean(i), g.mean(i));
                for (s, t) in twice.stddev(i).iter().zip(once.stddev(i)) {
                    prop_assert!((s - t).abs() <= 1e-14 * t.max(1.0));
                }
            }
        }

        #[test]
        fn nll_equals_negative_log_density((g, x) in gmm_strategy(), shift in -3.0f64..3.0) {
            let (k, m) = (g.n_components(), g.dim());
            let mut raw = RawHeadOutputs::zeros(k, m);
            raw.logits = g.weights().iter().map(|w| w.ln() + shift).collect();
            raw.means = (0..k).flat_map(|i| g.mean(i).to_vec()).collect();
            raw.sigma_pre = (0..k).flat_map(|i| g.stddev(i).iter().map(|s| sigma_preactivation(*s)).collect::<Vec<_>>()).collect();
            let converted = raw.to_gmm().unwrap();
            for (a, b) in converted.weights().iter().zip(g.weights()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let nll = nll_param_grads(&raw, &x).unwrap().nll;
            let e = evaluate(&converted, &x).unwrap();
            prop_assert!((nll + e.log_density).abs() < 1e-12);
        }

        #[test]
        fn hessian_identity_at_critical_points(a in 0.1f64..3.0, s in 0.3f64..2.0) {
            // symmetric pairs are critical at the midpoint
            let g = GmmParams::from_flat(2, 1, vec![0.5, 0.5], vec![-a, a], vec![s, s]).unwrap();
            let e = evaluate(&g, &[0.0]).unwrap();
            prop_assert!(e.grad_p.norm() < 1e-10);
            let diff = &e.hess_logp - &e.hess_p / e.density;
            prop_assert!(diff.norm() < 1e-8);
        }
    }
}
