//! Gaussian linear policy and the REINFORCE estimator.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::lti::Trajectory;

/// `u = theta y + w`, `w ~ N(0, sigma^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub theta: DMatrix<f64>,
    pub sigma: f64,
}

impl PolicyParams {
    pub fn zeros(m: usize, q: usize, sigma: f64) -> Self {
        PolicyParams {
            theta: DMatrix::zeros(m, q),
            sigma,
        }
    }
}

/// `sigma(e) = max(sigma_min, sigma0 * decay^e)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaSchedule {
    pub sigma0: f64,
    pub decay: f64,
    pub sigma_min: f64,
}

impl SigmaSchedule {
    pub fn new(sigma0: f64, decay: f64) -> Self {
        SigmaSchedule {
            sigma0,
            decay,
            sigma_min: 0.01,
        }
    }

    pub fn constant(sigma: f64) -> Self {
        SigmaSchedule {
            sigma0: sigma,
            decay: 1.0,
            sigma_min: sigma.min(0.01),
        }
    }

    pub fn at(&self, episode: usize) -> f64 {
        sigma_schedule_step(self, episode)
    }
}

pub fn sigma_schedule_step(schedule: &SigmaSchedule, episode: usize) -> f64 {
    let e = i32::try_from(episode).unwrap_or(i32::MAX);
    (schedule.sigma0 * schedule.decay.powi(e)).max(schedule.sigma_min)
}

/// `sum_k |y(k)|_1 + lambda |u(k)|_1`.
pub fn cost_l1(traj: &Trajectory, lambda: f64) -> f64 {
    traj.y_seq
        .iter()
        .zip(&traj.u_seq)
        .map(|(y, u)| y.lp_norm(1) + lambda * u.lp_norm(1))
        .sum()
}

/// `log N(u; theta y, sigma^2 I)`.
pub fn log_density(policy: &PolicyParams, y: &DVector<f64>, u: &DVector<f64>) -> f64 {
    let r = u - &policy.theta * y;
    let s2 = policy.sigma * policy.sigma;
    let m = u.len() as f64;
    -0.5 * r.norm_squared() / s2 - 0.5 * m * (2.0 * std::f64::consts::PI * s2).ln()
}

/// Gradient of [`log_density`] with respect to `theta`:
/// `(u - theta y) y^T / sigma^2`.
pub fn log_prob_grad(policy: &PolicyParams, y: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
    let r = u - &policy.theta * y;
    (r * y.transpose()) / (policy.sigma * policy.sigma)
}

/// `sum_k grad log pi(u(k) | y(k))` over one trajectory.
pub fn trajectory_score(policy: &PolicyParams, traj: &Trajectory) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(policy.theta.nrows(), policy.theta.ncols());
    for (y, u) in traj.y_seq.iter().zip(&traj.u_seq) {
        acc += log_prob_grad(policy, y, u);
    }
    acc
}

/// `(1/Q) sum_i (c(tau_i) - b) sum_k grad log pi`, with `b` the batch mean
/// cost when `baseline` is set and zero otherwise. Terms are summed in batch
/// order.
pub fn reinforce_gradient<F>(batch: &[Trajectory], policy: &PolicyParams, cost_fn: F, baseline: bool) -> DMatrix<f64>
where
    F: Fn(&Trajectory) -> f64 + Sync,
{
    let terms: Vec<(f64, DMatrix<f64>)> = batch
        .par_iter()
        .map(|tr| (cost_fn(tr), trajectory_score(policy, tr)))
        .collect();
    gradient_from_terms(&terms, policy, baseline)
}

pub(crate) fn gradient_from_terms(
    terms: &[(f64, DMatrix<f64>)],
    policy: &PolicyParams,
    baseline: bool,
) -> DMatrix<f64> {
    let mut grad = DMatrix::zeros(policy.theta.nrows(), policy.theta.ncols());
    if terms.is_empty() {
        return grad;
    }
    let q = terms.len() as f64;
    let b = if baseline {
        terms.iter().map(|(c, _)| c).sum::<f64>() / q
    } else {
        0.0
    };
    for (c, s) in terms {
        grad += s * (c - b);
    }
    grad / q
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(u: &[f64], y: &[f64]) -> Trajectory {
        Trajectory::new(vec![DVector::from_column_slice(u)], vec![DVector::from_column_slice(y)]).unwrap()
    }

    #[test]
    fn cost_examples() {
        assert_eq!(cost_l1(&Trajectory::zeros(5, 2, 3), 0.1), 0.0);
        let c = cost_l1(&traj(&[3.0], &[1.0, -2.0]), 0.1);
        assert!((c - 3.3).abs() < 1e-15);
    }

    #[test]
    fn scalar_gradient() {
        let p = PolicyParams {
            theta: DMatrix::from_element(1, 1, 1.0),
            sigma: 1.0,
        };
        let g = log_prob_grad(&p, &DVector::from_element(1, 2.0), &DVector::from_element(1, 3.0));
        assert_eq!(g[(0, 0)], 2.0);
        let at_mean = log_prob_grad(&p, &DVector::from_element(1, 2.0), &DVector::from_element(1, 2.0));
        assert_eq!(at_mean[(0, 0)], 0.0);
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(SigmaSchedule::new(0.7, 1.0).at(1000), 0.7);
        assert_eq!(SigmaSchedule::new(0.7, 0.5).at(10_000), 0.01);
        assert!((SigmaSchedule::new(0.5, 0.99).at(100) - 0.1830).abs() < 5e-5);
    }

    #[test]
    fn batch_averaging() {
        let p = PolicyParams::zeros(1, 2, 0.5);
        let t = traj(&[0.4], &[1.0, -1.0]);
        let one = reinforce_gradient(std::slice::from_ref(&t), &p, |tr| cost_l1(tr, 0.1), false);
        let many = reinforce_gradient(&vec![t.clone(); 7], &p, |tr| cost_l1(tr, 0.1), false);
        assert!((one - many).amax() < 1e-14);
        let zero = reinforce_gradient(&vec![t; 3], &p, |_| 0.0, false);
        assert_eq!(zero, DMatrix::zeros(1, 2));
    }
}
