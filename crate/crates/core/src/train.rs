//! Policy-gradient training against the plant or against generated data.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::hankel::{physical_samples, HankelMatrix};
use crate::lti::{LtiSystem, Trajectory};
use crate::output_gen::{build_g_theta_output_with, draw_output_inputs, generate_many_output, OutputSolveOptions};
use crate::policy::{cost_l1, gradient_from_terms, trajectory_score, PolicyParams, SigmaSchedule};
use crate::sampling::{ChiSampler, InitSampler, Perturbation};
use crate::state_gen::{build_g_theta_state_with, draw_state_inputs, generate_many_state};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Roll out every trajectory on the plant.
    Sample,
    /// Generate every trajectory from the Hankel matrix.
    Generate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feedback {
    State,
    Output { t0: usize },
}

#[derive(Debug, Clone)]
pub struct TrainingConfig {
    pub horizon_k: usize,
    pub batch_q: usize,
    pub episodes_e: usize,
    pub learning_rate: f64,
    pub cost_weight: f64,
    pub sigma: SigmaSchedule,
    pub mode: Mode,
    pub feedback: Feedback,
    pub seed: u64,
    pub baseline: bool,
    /// Abort when a batch mean cost exceeds this value.
    pub divergence_ceiling: f64,
    pub theta0: Option<DMatrix<f64>>,
    pub solve: OutputSolveOptions,
}

impl TrainingConfig {
    pub fn new(horizon_k: usize, batch_q: usize, episodes_e: usize, learning_rate: f64) -> Self {
        TrainingConfig {
            horizon_k,
            batch_q,
            episodes_e,
            learning_rate,
            cost_weight: 0.1,
            sigma: SigmaSchedule::new(1.0, 1.0),
            mode: Mode::Generate,
            feedback: Feedback::State,
            seed: 0,
            baseline: false,
            divergence_ceiling: 1e8,
            theta0: None,
            solve: OutputSolveOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon_k == 0 || self.batch_q == 0 {
            return Err(Error::Config("horizon_k and batch_q must be at least 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.sigma.sigma0 > 0.0 && self.sigma.sigma_min > 0.0) {
            return Err(Error::Config("sigma0 and sigma_min must be positive".into()));
        }
        Ok(())
    }

    /// Hankel depth needed in generate mode.
    pub fn depth(&self) -> usize {
        match self.feedback {
            Feedback::State => self.horizon_k,
            Feedback::Output { t0 } => self.horizon_k + t0 - 1,
        }
    }
}

/// Everything a training run may draw trajectories from. The plant is
/// required in sample mode; the Hankel matrix in generate mode.
#[derive(Debug, Clone)]
pub struct Environment {
    pub plant: Option<LtiSystem>,
    pub hankel: Option<HankelMatrix>,
    /// Samples spent collecting the Hankel data.
    pub data_samples: u64,
    pub init: InitSampler,
    pub chi: Option<ChiSampler>,
    pub m: usize,
    pub q: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub mean_cost: f64,
    pub sigma: f64,
    pub physical_samples: u64,
    pub generated_samples: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingLog {
    pub episodes: Vec<EpisodeRecord>,
    /// Gain in effect during each episode.
    pub thetas: Vec<DMatrix<f64>>,
    pub gradients: Vec<DMatrix<f64>>,
    pub final_theta: DMatrix<f64>,
    pub initial_physical_samples: u64,
    pub seed: u64,
}

impl TrainingLog {
    pub fn physical_samples(&self) -> u64 {
        self.episodes
            .last()
            .map_or(self.initial_physical_samples, |e| e.physical_samples)
    }
    pub fn generated_samples(&self) -> u64 {
        self.episodes.last().map_or(0, |e| e.generated_samples)
    }
    pub fn final_cost(&self) -> Option<f64> {
        self.episodes.last().map(|e| e.mean_cost)
    }
}

/// One batch under `policy` for episode `episode`; trajectory `i` always sees
/// the same random draws whichever mode produces it.
pub fn draw_batch(
    cfg: &TrainingConfig,
    env: &Environment,
    policy: &PolicyParams,
    episode: usize,
) -> Result<Vec<Trajectory>> {
    let noise = Perturbation { sigma: policy.sigma };
    let k = cfg.horizon_k;
    let ep = episode as u64;
    match (cfg.feedback, cfg.mode) {
        (Feedback::State, Mode::Sample) => {
            let plant = env
                .plant
                .as_ref()
                .ok_or_else(|| Error::Config("sample mode needs a plant".into()))?;
            (0..cfg.batch_q)
                .into_par_iter()
                .map(|i| {
                    let (x0, w) = draw_state_inputs(cfg.seed, ep, i as u64, &env.init, &noise, k, env.m);
                    plant.rollout(&x0, &policy.theta, &w)
                })
                .collect()
        }
        (Feedback::State, Mode::Generate) => {
            let h = hankel_for(cfg, env)?;
            let gen = build_g_theta_state_with(h, &policy.theta, cfg.solve.rank_tol)?;
            let draws: Vec<_> = (0..cfg.batch_q)
                .into_par_iter()
                .map(|i| draw_state_inputs(cfg.seed, ep, i as u64, &env.init, &noise, k, env.m))
                .collect();
            generate_many_state(h, &gen, &draws)
        }
        (Feedback::Output { t0 }, Mode::Sample) => {
            let plant = env
                .plant
                .as_ref()
                .ok_or_else(|| Error::Config("sample mode needs a plant".into()))?;
            let chi = env
                .chi
                .as_ref()
                .ok_or_else(|| Error::Config("output feedback needs a window sampler".into()))?;
            let observer = plant.window_observer(t0)?;
            (0..cfg.batch_q)
                .into_par_iter()
                .map(|i| {
                    let (chi0, w) = draw_output_inputs(cfg.seed, ep, i as u64, chi, &noise, k, env.m);
                    let x = observer.state(&chi0.y_window, &chi0.u_window)?;
                    plant.rollout(&x, &policy.theta, &w)
                })
                .collect()
        }
        (Feedback::Output { t0 }, Mode::Generate) => {
            let h = hankel_for(cfg, env)?;
            let chi = env
                .chi
                .as_ref()
                .ok_or_else(|| Error::Config("output feedback needs a window sampler".into()))?;
            let gen = build_g_theta_output_with(h, &policy.theta, t0, cfg.solve)?;
            let draws: Vec<_> = (0..cfg.batch_q)
                .into_par_iter()
                .map(|i| draw_output_inputs(cfg.seed, ep, i as u64, chi, &noise, k, env.m))
                .collect();
            generate_many_output(h, &gen, &draws)
        }
    }
}

fn hankel_for<'a>(cfg: &TrainingConfig, env: &'a Environment) -> Result<&'a HankelMatrix> {
    let h = env
        .hankel
        .as_ref()
        .ok_or_else(|| Error::Config("generate mode needs Hankel data".into()))?;
    if h.depth() != cfg.depth() {
        return Err(dim_err("Hankel depth", cfg.depth(), h.depth()));
    }
    Ok(h)
}

pub fn train(cfg: &TrainingConfig, env: &Environment) -> Result<TrainingLog> {
    cfg.validate()?;
    let mut theta = cfg.theta0.clone().unwrap_or_else(|| DMatrix::zeros(env.m, env.q));
    if theta.shape() != (env.m, env.q) {
        return Err(dim_err(
            "initial gain",
            format!("{}x{}", env.m, env.q),
            format!("{}x{}", theta.nrows(), theta.ncols()),
        ));
    }
    let initial_physical = match cfg.mode {
        Mode::Generate => env.data_samples,
        Mode::Sample => 0,
    };
    let mut log = TrainingLog {
        episodes: Vec::with_capacity(cfg.episodes_e),
        thetas: Vec::with_capacity(cfg.episodes_e),
        gradients: Vec::with_capacity(cfg.episodes_e),
        final_theta: theta.clone(),
        initial_physical_samples: initial_physical,
        seed: cfg.seed,
    };
    let per_batch = (cfg.batch_q * cfg.horizon_k) as u64;
    let (mut physical, mut generated) = (initial_physical, 0u64);
    for e in 0..cfg.episodes_e {
        let start = Instant::now();
        let policy = PolicyParams {
            theta: theta.clone(),
            sigma: cfg.sigma.at(e),
        };
        let batch = draw_batch(cfg, env, &policy, e)?;
        match cfg.mode {
            Mode::Sample => {
                physical += per_batch;
                physical_samples().add(per_batch);
            }
            Mode::Generate => generated += per_batch,
        }
        let terms: Vec<(f64, DMatrix<f64>)> = batch
            .par_iter()
            .map(|tr| (cost_l1(tr, cfg.cost_weight), trajectory_score(&policy, tr)))
            .collect();
        let mean_cost = terms.iter().map(|(c, _)| c).sum::<f64>() / terms.len() as f64;
        if !mean_cost.is_finite() || mean_cost > cfg.divergence_ceiling {
            return Err(Error::Diverged {
                episode: e,
                cost: mean_cost,
                ceiling: cfg.divergence_ceiling,
            });
        }
        let grad = gradient_from_terms(&terms, &policy, cfg.baseline);
        theta -= &grad * cfg.learning_rate;
        log.thetas.push(policy.theta);
        log.gradients.push(grad);
        log.episodes.push(EpisodeRecord {
            episode: e,
            mean_cost,
            sigma: policy.sigma,
            physical_samples: physical,
            generated_samples: generated,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    log.final_theta = theta;
    Ok(log)
}

/// Fixed set of test initial states, uniform in `[-half_width, half_width]^n`.
pub fn test_states(n: usize, count: usize, half_width: f64, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-half_width..=half_width)))
        .collect()
}

/// Mean noise-free cost of `theta` on the plant over the given initial states.
pub fn evaluate_test_cost(
    plant: &LtiSystem,
    theta: &DMatrix<f64>,
    states: &[DVector<f64>],
    horizon: usize,
    lambda: f64,
) -> Result<f64> {
    if states.is_empty() {
        return Ok(0.0);
    }
    let zeros = vec![DVector::zeros(plant.m()); horizon];
    let costs: Vec<f64> = states
        .par_iter()
        .map(|x0| plant.rollout(x0, theta, &zeros).map(|tr| cost_l1(&tr, lambda)))
        .collect::<Result<_>>()?;
    Ok(costs.iter().sum::<f64>() / costs.len() as f64)
}
