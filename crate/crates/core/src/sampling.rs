//! Random draws shared by the plant-sampling and generation paths.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Result};
use crate::hankel::DataRecord;
use crate::output_gen::ExtendedState;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for trajectory `index` of `episode`. Results do not
/// depend on which worker handles the trajectory.
pub fn stream_rng(seed: u64, episode: u64, index: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ episode) ^ index.rotate_left(32));
    ChaCha8Rng::seed_from_u64(key)
}

/// Zero-mean isotropic Gaussian exploration noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub sigma: f64,
}

impl Perturbation {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, m: usize) -> DVector<f64> {
        DVector::from_fn(m, |_, _| self.sigma * rng.sample::<f64, _>(StandardNormal))
    }

    pub fn sample_seq<R: Rng + ?Sized>(&self, rng: &mut R, len: usize, m: usize) -> Vec<DVector<f64>> {
        (0..len).map(|_| self.sample(rng, m)).collect()
    }
}

/// Source of initial states for state-feedback trajectories.
#[derive(Debug, Clone, PartialEq)]
pub enum InitSampler {
    /// Uniform choice among recorded states.
    Historic(Vec<DVector<f64>>),
    /// Uniform in `[-half_width, half_width]^n`.
    Box { n: usize, half_width: f64 },
}

impl InitSampler {
    /// Recorded outputs of a full-state record.
    pub fn historic(record: &DataRecord) -> Self {
        InitSampler::Historic(record.y_d.clone())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            InitSampler::Historic(states) => states[rng.random_range(0..states.len())].clone(),
            InitSampler::Box { n, half_width } => {
                DVector::from_fn(*n, |_, _| rng.random_range(-*half_width..=*half_width))
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitSampler::Historic(s) => s.first().map_or(0, |v| v.len()),
            InitSampler::Box { n, .. } => *n,
        }
    }
}

/// Source of extended initial conditions for output-feedback trajectories.
#[derive(Debug, Clone, PartialEq)]
pub enum ChiSampler {
    /// Uniform choice among sliding windows of the historic record.
    HistoricWindows(Vec<ExtendedState>),
    /// Every entry uniform in `[-half_width, half_width]`. Only feasible when
    /// every window is reachable, i.e. the order-t0 observability matrix is
    /// square and invertible.
    Box {
        t0: usize,
        m: usize,
        q: usize,
        half_width: f64,
    },
    Fixed(ExtendedState),
}

impl ChiSampler {
    pub fn historic(record: &DataRecord, t0: usize) -> Result<Self> {
        let len = record.sample_count();
        if t0 == 0 || len < t0 {
            return Err(dim_err("historic windows", format!(">= {t0} samples"), len));
        }
        let windows = (0..=len - t0)
            .map(|s| ExtendedState::new(record.y_d[s..s + t0].to_vec(), record.u_d[s..s + t0 - 1].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(ChiSampler::HistoricWindows(windows))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ExtendedState {
        match self {
            ChiSampler::HistoricWindows(w) => w[rng.random_range(0..w.len())].clone(),
            ChiSampler::Box { t0, m, q, half_width } => {
                let h = *half_width;
                let y = (0..*t0)
                    .map(|_| DVector::from_fn(*q, |_, _| rng.random_range(-h..=h)))
                    .collect();
                let u = (0..t0 - 1)
                    .map(|_| DVector::from_fn(*m, |_, _| rng.random_range(-h..=h)))
                    .collect();
                ExtendedState::new(y, u).expect("window lengths match")
            }
            ChiSampler::Fixed(chi) => chi.clone(),
        }
    }
}
