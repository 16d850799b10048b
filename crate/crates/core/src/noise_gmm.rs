//! Per-pair noise probabilities from a two-component Gaussian mixture fitted
//! to per-sample contrastive losses.
//!
//! Clean pairs are fitted early in training, so after warm-up their loss
//! sits in the low component; the posterior of the higher-mean component is
//! the noise probability `ε_i`, and `ω_i = min(λ·ε_i, ω_max)` is the
//! smoothing rate consumed by the noise-adaptive contrastive loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Means closer than this mark the fit as degenerate.
pub const DEGENERATE_GAP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Gmm2<T> {
    pub weight: [T; 2],
    pub mean: [T; 2],
    pub var: [T; 2],
    pub log_likelihood_trace: Vec<T>,
    pub degenerate: bool,
}

impl<T: Scalar> Gmm2<T> {
    /// Index of the component with the larger mean (component 1 on ties).
    pub fn noisy_component(&self) -> usize {
        if self.mean[0] > self.mean[1] {
            0
        } else {
            1
        }
    }

    fn log_joint(&self, x: T) -> [T; 2] {
        let half_log_2pi = T::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
        let mut out = [T::zero(); 2];
        for (k, o) in out.iter_mut().enumerate() {
            let d = x - self.mean[k];
            *o = self.weight[k].ln() - half_log_2pi - T::lit(0.5) * self.var[k].ln()
                - d * d / (T::lit(2.0) * self.var[k]);
        }
        out
    }

    /// Posterior responsibilities of both components at `x`.
    pub fn responsibilities(&self, x: T) -> [T; 2] {
        let lj = self.log_joint(x);
        // r_k = 1 / (1 + exp(lj_other − lj_k)), exact complement for the other
        let r0 = T::one() / (T::one() + (lj[1] - lj[0]).exp());
        if r0 <= T::lit(0.5) {
            [r0, T::one() - r0]
        } else {
            let r1 = T::one() / (T::one() + (lj[0] - lj[1]).exp());
            [T::one() - r1, r1]
        }
    }

    pub fn log_likelihood(&self, xs: &[T]) -> T {
        xs.iter().fold(T::zero(), |acc, &x| {
            let lj = self.log_joint(x);
            let m = lj[0].max(lj[1]);
            acc + m + ((lj[0] - m).exp() + (lj[1] - m).exp()).ln()
        })
    }
}

fn mean_var<T: Scalar>(xs: &[T]) -> (T, T) {
    let n = T::from_usize(xs.len()).unwrap();
    let mean = xs.iter().fold(T::zero(), |s, &v| s + v) / n;
    let var = xs.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
    (mean, var.max(T::lit(VARIANCE_FLOOR)))
}

/// Expectation–maximization for a 1-D two-component mixture.
///
/// Initialization is deterministic: component 0 takes the moments of the
/// lower half of the sorted losses, component 1 the upper half. Iteration
/// stops when the log-likelihood gain drops below `tol` or after `max_iter`
/// EM steps.
pub fn fit_gmm2<T: Scalar>(losses: &[T], tol: T, max_iter: usize) -> Result<Gmm2<T>> {
    if losses.len() < 4 {
        return Err(Error::TooFewSamples {
            need: 4,
            got: losses.len(),
        });
    }
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let half = sorted.len() / 2;
    let (m0, v0) = mean_var(&sorted[..half]);
    let (m1, v1) = mean_var(&sorted[half..]);
    let floor = T::lit(VARIANCE_FLOOR);
    let mut gmm = Gmm2 {
        weight: [T::lit(0.5); 2],
        mean: [m0, m1],
        var: [v0, v1],
        log_likelihood_trace: Vec::new(),
        degenerate: false,
    };
    let mut ll = gmm.log_likelihood(losses);
    gmm.log_likelihood_trace.push(ll);
    let n = T::from_usize(losses.len()).unwrap();
    let tiny = T::min_positive_value();
    for _ in 0..max_iter {
        let resp: Vec<[T; 2]> = losses.iter().map(|&x| gmm.responsibilities(x)).collect();
        let mut next = gmm.clone();
        for k in 0..2 {
            let nk = resp.iter().fold(T::zero(), |s, r| s + r[k]);
            if nk <= tiny {
                // empty component: keep its previous parameters
                next.weight[k] = tiny;
                continue;
            }
            let mean = resp
                .iter()
                .zip(losses)
                .fold(T::zero(), |s, (r, &x)| s + r[k] * x)
                / nk;
            let var = resp
                .iter()
                .zip(losses)
                .fold(T::zero(), |s, (r, &x)| s + r[k] * (x - mean) * (x - mean))
                / nk;
            next.weight[k] = nk / n;
            next.mean[k] = mean;
            next.var[k] = var.max(floor);
        }
        let wsum = next.weight[0] + next.weight[1];
        next.weight = [next.weight[0] / wsum, T::one() - next.weight[0] / wsum];
        let next_ll = next.log_likelihood(losses);
        gmm.weight = next.weight;
        gmm.mean = next.mean;
        gmm.var = next.var;
        gmm.log_likelihood_trace.push(next_ll);
        let gain = next_ll - ll;
        ll = next_ll;
        if gain < tol {
            break;
        }
    }
    gmm.degenerate = (gmm.mean[0] - gmm.mean[1]).abs() < T::lit(DEGENERATE_GAP);
    Ok(gmm)
}

/// `ε_i`: posterior of the higher-mean component; all zero for degenerate fits.
pub fn noise_posterior<T: Scalar>(gmm: &Gmm2<T>, losses: &[T]) -> Vec<T> {
    if gmm.degenerate {
        return vec![T::zero(); losses.len()];
    }
    let hi = gmm.noisy_component();
    losses.iter().map(|&x| gmm.responsibilities(x)[hi]).collect()
}

/// `ω_i = min(λ·ε_i, ω_max)`.
pub fn smoothing_rates<T: Scalar>(epsilon: &[T], lambda: T, omega_max: T) -> Result<Vec<T>> {
    if !(omega_max > T::zero() && omega_max < T::one()) {
        return Err(Error::Invalid(format!("omega_max {omega_max} outside (0, 1)")));
    }
    if lambda < T::zero() || !lambda.is_finite() {
        return Err(Error::Invalid(format!("lambda {lambda} must be non-negative")));
    }
    Ok(epsilon.iter().map(|&e| (lambda * e).min(omega_max)).collect())
}

/// Noise probabilities and smoothing rates for a dataset, keyed by sample id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    pub ids: Vec<u64>,
    pub epsilon: Vec<f64>,
    pub omega: Vec<f64>,
    pub lambda: f64,
    pub omega_max: f64,
}

impl NoiseEstimate {
    pub fn new(ids: Vec<u64>, epsilon: Vec<f64>, lambda: f64, omega_max: f64) -> Result<Self> {
        if ids.len() != epsilon.len() {
            return Err(Error::Shape("ids and epsilon lengths differ".into()));
        }
        let omega = smoothing_rates(&epsilon, lambda, omega_max)?;
        Ok(Self {
            ids,
            epsilon,
            omega,
            lambda,
            omega_max,
        })
    }

    /// JSON object `{ "<id>": {"epsilon": .., "omega": ..}, ... }`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for ((id, e), w) in self.ids.iter().zip(&self.epsilon).zip(&self.omega) {
            map.insert(
                id.to_string(),
                serde_json::json!({ "epsilon": e, "omega": w }),
            );
        }
        serde_json::Value::Object(map)
    }
}

/// Area under the ROC curve (Mann–Whitney U); tied scores count one half.
pub fn roc_auc<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores and labels lengths differ".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("roc_auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Walk tie groups in ascending order, counting negatives strictly below.
    let mut wins2: u64 = 0; // twice the U statistic
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let (mut p, mut q) = (0u64, 0u64);
        for &o in &order[i..j] {
            if labels[o] {
                p += 1;
            } else {
                q += 1;
            }
        }
        wins2 += p * (2 * neg_below + q);
        neg_below += q;
        i = j;
    }
    Ok(wins2 as f64 / (2.0 * pos as f64 * neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_clusters() -> Vec<f64> {
        let mut v = vec![0.1; 50];
        v.extend(vec![5.0; 50]);
        v
    }

    #[test]
    fn recovers_point_clusters() {
        let g = fit_gmm2(&two_clusters(), 1e-10, 200).unwrap();
        let (lo, hi) = (1 - g.noisy_component(), g.noisy_component());
        assert!((g.mean[lo] - 0.1).abs() < 1e-3);
        assert!((g.mean[hi] - 5.0).abs() < 1e-3);
        assert!((g.weight[0] - 0.5).abs() < 1e-2);
        assert!(!g.degenerate);
        let eps = noise_posterior(&g, &two_clusters());
        for (i, e) in eps.iter().enumerate() {
            let want = if i < 50 { 0.0 } else { 1.0 };
            assert!((e - want).abs() < 1e-6, "{i}: {e}");
        }
    }

    #[test]
    fn equal_losses_are_degenerate() {
        let g = fit_gmm2(&[0.7f64; 20], 1e-10, 100).unwrap();
        assert!(g.degenerate);
        assert!((g.mean[0] - g.mean[1]).abs() < 1e-6);
        assert!(noise_posterior(&g, &[0.7; 20]).iter().all(|&e| e == 0.0));
    }

    #[test]
    fn input_validation() {
        assert!(matches!(
            fit_gmm2(&[1.0, 2.0, 3.0], 1e-8, 10),
            Err(Error::TooFewSamples { .. })
        ));
        assert!(matches!(
            fit_gmm2(&[1.0, 2.0, f64::NAN, 3.0], 1e-8, 10),
            Err(Error::NonFinite)
        ));
    }

    #[test]
    fn smoothing_rate_examples() {
        assert_eq!(smoothing_rates(&[0.5], 0.4, 0.9).unwrap(), vec![0.2]);
        assert_eq!(smoothing_rates(&[1.0], 2.0, 0.9).unwrap(), vec![0.9]);
        assert_eq!(smoothing_rates(&[0.0], 0.5, 0.9).unwrap(), vec![0.0]);
        assert!(smoothing_rates(&[0.1], 0.5, 1.0).is_err());
        assert!(smoothing_rates(&[0.1], 0.5, 0.0).is_err());
    }

    #[test]
    fn noise_estimate_matches_rule() {
        let est = NoiseEstimate::new(vec![3, 9], vec![0.25, 1.0], 1.5, 0.9).unwrap();
        assert_eq!(est.omega, vec![(1.5f64 * 0.25).min(0.9), 0.9]);
        let js = est.to_json();
        assert_eq!(js["9"]["omega"], 0.9);
    }

    #[test]
    fn auc_edge_cases() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.1], &[false, true]).unwrap(), 0.0);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }
}
