//! Output-feedback trajectory generation over extended states.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::hankel::{Channel, HankelMatrix};
use crate::linalg::{vstack, RankTolerance};
use crate::lti::Trajectory;
use crate::sampling::{stream_rng, ChiSampler, Perturbation};
use crate::state_gen::{split_stacked, GEMM_CHUNK};

/// Window `[y(k-t0); ...; y(k-1); u(k-t0); ...; u(k-2)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedState {
    pub y_window: Vec<DVector<f64>>,
    pub u_window: Vec<DVector<f64>>,
}

impl ExtendedState {
    pub fn new(y_window: Vec<DVector<f64>>, u_window: Vec<DVector<f64>>) -> Result<Self> {
        if y_window.is_empty() || u_window.len() + 1 != y_window.len() {
            return Err(dim_err(
                "extended state",
                "t0 outputs and t0 - 1 inputs",
                format!("{} outputs, {} inputs", y_window.len(), u_window.len()),
            ));
        }
        let q = y_window[0].len();
        if y_window.iter().any(|y| y.len() != q) {
            return Err(dim_err("extended state outputs", q, "mixed lengths"));
        }
        if let Some(m) = u_window.first().map(|u| u.len()) {
            if u_window.iter().any(|u| u.len() != m) {
                return Err(dim_err("extended state inputs", m, "mixed lengths"));
            }
        }
        Ok(ExtendedState { y_window, u_window })
    }

    /// Splits a flat vector laid out as in [`ExtendedState::flatten`].
    pub fn from_flat(v: &[f64], t0: usize, m: usize, q: usize) -> Result<Self> {
        let dim = t0 * q + t0.saturating_sub(1) * m;
        if t0 == 0 || v.len() != dim {
            return Err(dim_err("flat extended state", dim, v.len()));
        }
        let y = (0..t0)
            .map(|k| DVector::from_column_slice(&v[k * q..(k + 1) * q]))
            .collect();
        let u = (0..t0 - 1)
            .map(|k| DVector::from_column_slice(&v[t0 * q + k * m..t0 * q + (k + 1) * m]))
            .collect();
        ExtendedState::new(y, u)
    }

    pub fn t0(&self) -> usize {
        self.y_window.len()
    }

    pub fn dim(&self) -> usize {
        self.y_window.iter().chain(&self.u_window).map(|v| v.len()).sum()
    }

    pub fn flatten(&self) -> DVector<f64> {
        let data: Vec<f64> = self
            .y_window
            .iter()
            .chain(&self.u_window)
            .flat_map(|v| v.iter().copied())
            .collect();
        DVector::from_vec(data)
    }
}

pub fn extended_state_from_window(y_window: &[DVector<f64>], u_window: &[DVector<f64>]) -> Result<ExtendedState> {
    ExtendedState::new(y_window.to_vec(), u_window.to_vec())
}

/// Output-feedback `G_theta` with its retained singular triplets. The
/// eigenpairs of `G_theta G_theta^T` are `(sigma_i^2, u_i)`.
#[derive(Debug, Clone)]
pub struct OutputGeneratorState {
    g_theta: DMatrix<f64>,
    u_s: DMatrix<f64>,
    sigma: DVector<f64>,
    v_s: DMatrix<f64>,
    /// `[H_u^{t0-1:T-1}; H_y^{t0-1:T-1}] V Sigma^{-1}`, mapping `U^T R` to
    /// the generated window.
    window_map: DMatrix<f64>,
    theta: DMatrix<f64>,
    t0: usize,
    depth: usize,
    range_tol: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct OutputSolveOptions {
    /// Cutoff for singular values of `G_theta` counted as nonzero.
    pub rank_tol: RankTolerance,
    /// Largest accepted `|(I - P P^T) R| / |R|`.
    pub range_tol: f64,
}

impl Default for OutputSolveOptions {
    fn default() -> Self {
        OutputSolveOptions {
            rank_tol: RankTolerance::Auto,
            range_tol: 1e-6,
        }
    }
}

pub fn build_g_theta_output(h: &HankelMatrix, theta: &DMatrix<f64>, t0: usize) -> Result<OutputGeneratorState> {
    build_g_theta_output_with(h, theta, t0, OutputSolveOptions::default())
}

pub fn build_g_theta_output_with(
    h: &HankelMatrix,
    theta: &DMatrix<f64>,
    t0: usize,
    opts: OutputSolveOptions,
) -> Result<OutputGeneratorState> {
    let (m, q, t) = (h.m(), h.q(), h.depth());
    if t0 == 0 || t0 > t {
        return Err(Error::Config(format!(
            "window t0 = {t0} must satisfy 1 <= t0 <= T = {t}"
        )));
    }
    if theta.shape() != (m, q) {
        return Err(dim_err(
            "output gain",
            format!("{m}x{q}"),
            format!("{}x{}", theta.nrows(), theta.ncols()),
        ));
    }
    let k = t - t0 + 1;
    let rows = k * m + t0 * q + (t0 - 1) * m;
    let mut g = DMatrix::zeros(rows, h.cols());
    for i in 0..k {
        let blk = t0 - 1 + i;
        let hu = h.h_u.rows(blk * m, m);
        let hy = h.h_y.rows(blk * q, q);
        g.rows_mut(i * m, m).copy_from(&(hu - theta * hy));
    }
    g.rows_mut(k * m, t0 * q)
        .copy_from(&h.block_rows(Channel::Output, 0, t0 - 1)?);
    if t0 > 1 {
        g.rows_mut(k * m + t0 * q, (t0 - 1) * m)
            .copy_from(&h.block_rows(Channel::Input, 0, t0 - 2)?);
    }

    let svd = g.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let s = &svd.singular_values;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let cut = opts.rank_tol.cutoff(g.nrows(), g.ncols(), smax);
    let mut keep: Vec<usize> = (0..s.len()).filter(|&i| smax > 0.0 && s[i] > cut).collect();
    keep.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let u_s = DMatrix::from_fn(g.nrows(), keep.len(), |r, c| u[(r, keep[c])]);
    let v_s = DMatrix::from_fn(g.ncols(), keep.len(), |r, c| v_t[(keep[c], r)]);
    let sigma = DVector::from_iterator(keep.len(), keep.iter().map(|&i| s[i]));
    let mut scaled_v = v_s.clone();
    for (mut col, s) in scaled_v.column_iter_mut().zip(sigma.iter()) {
        col /= *s;
    }
    let window = vstack(&[
        &h.block_rows(Channel::Input, t0 - 1, t - 1)?,
        &h.block_rows(Channel::Output, t0 - 1, t - 1)?,
    ]);
    Ok(OutputGeneratorState {
        g_theta: g,
        u_s,
        sigma,
        v_s,
        window_map: window * scaled_v,
        theta: theta.clone(),
        t0,
        depth: t,
        range_tol: opts.range_tol,
    })
}

impl OutputGeneratorState {
    pub fn g_theta(&self) -> &DMatrix<f64> {
        &self.g_theta
    }
    pub fn theta(&self) -> &DMatrix<f64> {
        &self.theta
    }
    pub fn t0(&self) -> usize {
        self.t0
    }
    pub fn depth(&self) -> usize {
        self.depth
    }
    /// Number of usable steps `T - t0 + 1`.
    pub fn horizon(&self) -> usize {
        self.depth - self.t0 + 1
    }
    /// Number of retained eigenpairs.
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }
    /// Nonzero eigenvalues of `G_theta G_theta^T`, descending.
    pub fn eigenvalues(&self) -> DVector<f64> {
        self.sigma.map(|s| s * s)
    }
    /// Matching orthonormal eigenvectors as columns.
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.u_s
    }

    /// `[w(t0-1); ...; w(T-1); X(t0-1)]`.
    pub fn rhs(&self, w_seq: &[DVector<f64>], chi0: &ExtendedState) -> Result<DVector<f64>> {
        let m = self.theta.nrows();
        let q = self.theta.ncols();
        let k = self.horizon();
        if w_seq.len() != k {
            return Err(dim_err("perturbation count", k, w_seq.len()));
        }
        if chi0.t0() != self.t0 {
            return Err(dim_err("extended state window", self.t0, chi0.t0()));
        }
        let chi = chi0.flatten();
        let expect = self.t0 * q + (self.t0 - 1) * m;
        if chi.len() != expect {
            return Err(dim_err("extended state dimension", expect, chi.len()));
        }
        let mut r = DVector::zeros(k * m + chi.len());
        for (i, w) in w_seq.iter().enumerate() {
            if w.len() != m {
                return Err(dim_err("perturbation", m, w.len()));
            }
            r.rows_mut(i * m, m).copy_from(w);
        }
        r.rows_mut(k * m, chi.len()).copy_from(&chi);
        Ok(r)
    }

    /// `P^T R`, after checking that `R` lies in the range of `G_theta`.
    fn project(&self, r: &DVector<f64>) -> Result<DVector<f64>> {
        if r.len() != self.g_theta.nrows() {
            return Err(dim_err("right-hand side", self.g_theta.nrows(), r.len()));
        }
        let c = self.u_s.transpose() * r;
        let rn = r.norm();
        if rn > 0.0 {
            let residual = (r - &self.u_s * &c).norm() / rn;
            if residual > self.range_tol {
                return Err(Error::OutsideRange {
                    residual,
                    tolerance: self.range_tol,
                });
            }
        }
        Ok(c)
    }

    /// Generated windows for many right-hand sides at once, one stacked
    /// `[u; y]` column per column of `rhs`.
    pub fn generate_block(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rhs.nrows() != self.g_theta.nrows() {
            return Err(dim_err("right-hand side", self.g_theta.nrows(), rhs.nrows()));
        }
        let c = self.u_s.transpose() * rhs;
        let resid = rhs - &self.u_s * &c;
        for j in 0..rhs.ncols() {
            let rn = rhs.column(j).norm();
            if rn > 0.0 {
                let residual = resid.column(j).norm() / rn;
                if residual > self.range_tol {
                    return Err(Error::OutsideRange {
                        residual,
                        tolerance: self.range_tol,
                    });
                }
            }
        }
        Ok(&self.window_map * c)
    }

    /// `g = G^T P Lambda^{-1} P^T R`, evaluated as `V Sigma^{-1} U^T R`.
    /// Fails when `R` has a component outside the range of `G_theta`.
    pub fn solve(&self, r: &DVector<f64>) -> Result<DVector<f64>> {
        let c = self.project(r)?;
        Ok(&self.v_s * c.component_div(&self.sigma))
    }
}

pub fn eig_solve_coefficient(
    gen: &OutputGeneratorState,
    w_seq: &[DVector<f64>],
    chi0: &ExtendedState,
) -> Result<DVector<f64>> {
    gen.solve(&gen.rhs(w_seq, chi0)?)
}

/// The `T - t0 + 1` step window starting at the newest output of `chi0`.
pub fn generate_trajectory_output(
    h: &HankelMatrix,
    gen: &OutputGeneratorState,
    chi0: &ExtendedState,
    w_seq: &[DVector<f64>],
) -> Result<Trajectory> {
    if h.depth() != gen.depth() || h.cols() != gen.g_theta.ncols() {
        return Err(dim_err(
            "Hankel matrix",
            format!("depth {}", gen.depth()),
            format!("depth {}", h.depth()),
        ));
    }
    let c = gen.project(&gen.rhs(w_seq, chi0)?)?;
    let stacked = &gen.window_map * c;
    Ok(split_stacked(&stacked, gen.horizon(), h.m(), h.q()))
}

pub fn draw_output_inputs(
    seed: u64,
    episode: u64,
    index: u64,
    chi: &ChiSampler,
    noise: &Perturbation,
    len: usize,
    m: usize,
) -> (ExtendedState, Vec<DVector<f64>>) {
    let mut rng = stream_rng(seed, episode, index);
    let chi0 = chi.sample(&mut rng);
    let w = noise.sample_seq(&mut rng, len, m);
    (chi0, w)
}

pub fn generate_batch_output(
    h: &HankelMatrix,
    gen: &OutputGeneratorState,
    noise: &Perturbation,
    batch: usize,
    chi: &ChiSampler,
    seed: u64,
    episode: u64,
) -> Result<Vec<Trajectory>> {
    let draws: Vec<_> = (0..batch)
        .into_par_iter()
        .map(|i| draw_output_inputs(seed, episode, i as u64, chi, noise, gen.horizon(), h.m()))
        .collect();
    generate_many_output(h, gen, &draws)
}

/// Generates one trajectory per `(chi0, w)` pair, in order.
pub fn generate_many_output(
    h: &HankelMatrix,
    gen: &OutputGeneratorState,
    draws: &[(ExtendedState, Vec<DVector<f64>>)],
) -> Result<Vec<Trajectory>> {
    let chunks: Vec<Vec<Trajectory>> = draws
        .par_chunks(GEMM_CHUNK)
        .map(|chunk| {
            let mut rhs = DMatrix::zeros(gen.g_theta.nrows(), chunk.len());
            for (j, (chi0, w)) in chunk.iter().enumerate() {
                rhs.set_column(j, &gen.rhs(w, chi0)?);
            }
            let out = gen.generate_block(&rhs)?;
            Ok(out
                .column_iter()
                .map(|c| split_stacked(&c.into_owned(), gen.horizon(), h.m(), h.q()))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::reactor::{batch_reactor_system, Observation};
    use crate::hankel::{collect_certified, CollectionSettings};
    use crate::linalg::{max_relative_error, numerical_rank};
    use crate::lti::LtiSystem;
    use crate::state_gen::build_g_theta_state;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn partial() -> (LtiSystem, HankelMatrix, crate::hankel::DataRecord) {
        let sys = batch_reactor_system(Observation::Partial);
        let d = collect_certified(&sys, &CollectionSettings::new(96, 31), 21).unwrap();
        (sys, d.hankel, d.record)
    }

    #[test]
    fn extended_state_dims() {
        let y = vec![DVector::zeros(2); 3];
        let u = vec![DVector::zeros(2); 2];
        assert_eq!(ExtendedState::new(y, u).unwrap().dim(), 10);
        let only_y = ExtendedState::new(vec![DVector::from_element(3, 1.0)], vec![]).unwrap();
        assert_eq!(only_y.flatten().len(), 3);
        assert!(ExtendedState::new(vec![DVector::zeros(2); 2], vec![]).is_err());
        let chi = ExtendedState::new(
            vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![3.0, 4.0])],
            vec![DVector::from_vec(vec![5.0])],
        )
        .unwrap();
        assert_eq!(chi.flatten().as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(
            ExtendedState::from_flat(chi.flatten().as_slice(), 2, 1, 2).unwrap(),
            chi
        );
    }

    #[test]
    fn full_output_unit_window_matches_state_generator() {
        let sys = batch_reactor_system(Observation::Full);
        let d = collect_certified(&sys, &CollectionSettings::new(93, 30), 4).unwrap();
        let theta = DMatrix::from_fn(2, 4, |i, j| 0.01 * (i as f64 - j as f64));
        let a = build_g_theta_output(&d.hankel, &theta, 1).unwrap();
        let b = build_g_theta_state(&d.hankel, &theta).unwrap();
        assert_eq!(a.g_theta(), b.g_theta());
    }

    #[test]
    fn zero_gain_top_block_and_bad_window() {
        let (_, h, _) = partial();
        let gen = build_g_theta_output(&h, &DMatrix::zeros(2, 2), 2).unwrap();
        assert_eq!(gen.g_theta().rows(0, 60), h.block_rows(Channel::Input, 1, 30).unwrap());
        assert_eq!(gen.g_theta().nrows(), 31 * 2 + 2 * 2);
        assert!(build_g_theta_output(&h, &DMatrix::zeros(2, 2), 32).is_err());
    }

    #[test]
    fn eigen_formula_agrees_with_full_row_rank_formula() {
        let (_, h, _) = partial();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-0.1..0.1));
        let gen = build_g_theta_output(&h, &theta, 2).unwrap();
        assert_eq!(gen.rank(), 66);
        assert_eq!(numerical_rank(gen.g_theta(), RankTolerance::Auto), 66);
        let r = DVector::from_fn(66, |_, _| rng.random_range(-1.0..1.0));
        let g = gen.solve(&r).unwrap();
        let g_ref = gen.g_theta().clone().lu().solve(&r).unwrap();
        assert!((&g - &g_ref).amax() / g_ref.amax() < 1e-6);
        let lam = gen.eigenvalues();
        assert!(lam.iter().all(|&l| l > 0.0));
        assert!(lam.as_slice().windows(2).all(|p| p[0] >= p[1]));
        assert_eq!(gen.solve(&DVector::zeros(66)).unwrap(), DVector::zeros(66));
    }

    #[test]
    fn continuation_of_oracle_run() {
        let (sys, h, _) = partial();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let theta = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-0.1..0.1));
        let gen = build_g_theta_output(&h, &theta, 2).unwrap();
        let x0 = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let w: Vec<_> = (0..31)
            .map(|_| DVector::from_fn(2, |_, _| rng.random_range(-0.5..0.5)))
            .collect();
        let run = sys.rollout(&x0, &theta, &w).unwrap();
        let chi0 = ExtendedState::new(run.y_seq[..2].to_vec(), run.u_seq[..1].to_vec()).unwrap();
        let tr = generate_trajectory_output(&h, &gen, &chi0, &w[1..]).unwrap();
        let reference = Trajectory {
            u_seq: run.u_seq[1..].to_vec(),
            y_seq: run.y_seq[1..].to_vec(),
        };
        assert_eq!(tr.len(), 30);
        let err = max_relative_error(&tr.stacked(), &reference.stacked(), 1e-12);
        assert!(err < 1e-6, "{err}");
        let g = eig_solve_coefficient(&gen, &w[1..], &chi0).unwrap();
        let prefix = h.block_rows(Channel::Output, 0, 1).unwrap() * g;
        assert!((prefix.rows(0, 2) - &run.y_seq[0]).amax() < 1e-8 * run.y_seq[0].amax().max(1.0));
    }

    #[test]
    fn historic_windows_are_feasible() {
        let (_, h, rec) = partial();
        let chi = ChiSampler::historic(&rec, 2).unwrap();
        let gen = build_g_theta_output(&h, &DMatrix::zeros(2, 2), 2).unwrap();
        let noise = Perturbation { sigma: 1.0 };
        let batch = generate_batch_output(&h, &gen, &noise, 20, &chi, 1, 0).unwrap();
        assert_eq!(batch.len(), 20);
        assert!(batch.iter().all(|t| t.len() == 30));
    }

    #[test]
    fn infeasible_rhs_is_reported() {
        // Voltage-like case where the window space is larger than the state:
        // a random system with q*t0 > n makes most windows unreachable.
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let sys = LtiSystem::random(3, 1, 2, 0.9, &mut rng);
        let d = collect_certified(&sys, &CollectionSettings::new(60, 6), 3).unwrap();
        let gen = build_g_theta_output(&d.hankel, &DMatrix::zeros(1, 2), 3).unwrap();
        let chi = ExtendedState::from_flat(&[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0], 3, 1, 2).unwrap();
        let w = vec![DVector::zeros(1); 4];
        assert!(matches!(
            eig_solve_coefficient(&gen, &w, &chi),
            Err(Error::OutsideRange { .. })
        ));
    }

    #[test]
    fn zero_window_zero_trajectory() {
        let (_, h, _) = partial();
        let gen = build_g_theta_output(&h, &DMatrix::zeros(2, 2), 2).unwrap();
        let chi = ExtendedState::new(vec![DVector::zeros(2); 2], vec![DVector::zeros(2)]).unwrap();
        let tr = generate_trajectory_output(&h, &gen, &chi, &vec![DVector::zeros(2); 30]).unwrap();
        assert!(tr.stacked().iter().all(|v| *v == 0.0));
    }
}
