//! Ground-truth plant and the structural matrices used to certify generated
//! data. Nothing in the generators reads `A`, `B` or `C`; this module exists
//! for data collection, plant sampling and oracle checks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::linalg::{numerical_rank, RankTolerance};

/// A sampled vector signal, one entry per time step.
pub type Signal = Vec<DVector<f64>>;

/// Discrete-time plant `x(k+1) = A x(k) + B u(k)`, `y(k) = C x(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    tol: RankTolerance,
}

/// Length-T sequence of (u, y) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub u_seq: Vec<DVector<f64>>,
    pub y_seq: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(u_seq: Vec<DVector<f64>>, y_seq: Vec<DVector<f64>>) -> Result<Self> {
        if u_seq.len() != y_seq.len() {
            return Err(dim_err("trajectory", u_seq.len(), y_seq.len()));
        }
        Ok(Trajectory { u_seq, y_seq })
    }

    pub fn len(&self) -> usize {
        self.u_seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u_seq.is_empty()
    }

    /// Flattened `[u(0); ...; u(T-1); y(0); ...; y(T-1)]`.
    pub fn stacked(&self) -> Vec<f64> {
        self.u_seq
            .iter()
            .chain(self.y_seq.iter())
            .flat_map(|v| v.iter().copied())
            .collect()
    }

    pub fn zeros(len: usize, m: usize, q: usize) -> Self {
        Trajectory {
            u_seq: vec![DVector::zeros(m); len],
            y_seq: vec![DVector::zeros(q); len],
        }
    }
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        Self::with_tolerance(a, b, c, RankTolerance::Auto)
    }

    pub fn with_tolerance(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, tol: RankTolerance) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(dim_err(
                "A",
                "square n x n, n >= 1",
                format!("{}x{}", a.nrows(), a.ncols()),
            ));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(dim_err("B", format!("{n} x m"), format!("{}x{}", b.nrows(), b.ncols())));
        }
        if c.ncols() != n || c.nrows() == 0 {
            return Err(dim_err("C", format!("q x {n}"), format!("{}x{}", c.nrows(), c.ncols())));
        }
        let sys = LtiSystem { a, b, c, tol };
        let obs = sys.observability_matrix(n);
        let rank = numerical_rank(&obs, tol);
        if rank < n {
            return Err(Error::Unobservable { rank, n, order: n });
        }
        Ok(sys)
    }

    /// Random observable system with spectral radius scaled to `radius`.
    pub fn random<R: Rng + ?Sized>(n: usize, m: usize, q: usize, radius: f64, rng: &mut R) -> Self {
        loop {
            let mut a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let rho = a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
            if rho > 0.0 {
                a *= radius / rho;
            }
            let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
            let c = DMatrix::from_fn(q, n, |_, _| rng.random_range(-1.0..1.0));
            if let Ok(sys) = LtiSystem::new(a, b, c) {
                return sys;
            }
        }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn q(&self) -> usize {
        self.c.nrows()
    }
    pub fn tolerance(&self) -> RankTolerance {
        self.tol
    }

    /// One plant step. The output belongs to the current (pre-step) state.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        if x.len() != self.n() {
            return Err(dim_err("step state", self.n(), x.len()));
        }
        if u.len() != self.m() {
            return Err(dim_err("step input", self.m(), u.len()));
        }
        let y = &self.c * x;
        let x_next = &self.a * x + &self.b * u;
        Ok((x_next, y))
    }

    /// Closed-loop simulation with `u(k) = theta y(k) + w(k)`.
    pub fn rollout(&self, x0: &DVector<f64>, theta: &DMatrix<f64>, w_seq: &[DVector<f64>]) -> Result<Trajectory> {
        if theta.shape() != (self.m(), self.q()) {
            return Err(dim_err(
                "rollout gain",
                format!("{}x{}", self.m(), self.q()),
                format!("{}x{}", theta.nrows(), theta.ncols()),
            ));
        }
        if x0.len() != self.n() {
            return Err(dim_err("rollout x0", self.n(), x0.len()));
        }
        let mut x = x0.clone();
        let mut u_seq = Vec::with_capacity(w_seq.len());
        let mut y_seq = Vec::with_capacity(w_seq.len());
        for w in w_seq {
            if w.len() != self.m() {
                return Err(dim_err("rollout perturbation", self.m(), w.len()));
            }
            let y = &self.c * &x;
            let u = theta * &y + w;
            x = &self.a * &x + &self.b * &u;
            u_seq.push(u);
            y_seq.push(y);
        }
        Ok(Trajectory { u_seq, y_seq })
    }

    /// Open-loop run; returns the visited states `x(0..len)` and outputs.
    pub fn simulate(&self, x0: &DVector<f64>, u_seq: &[DVector<f64>]) -> Result<(Signal, Signal)> {
        if x0.len() != self.n() {
            return Err(dim_err("simulate x0", self.n(), x0.len()));
        }
        let mut x = x0.clone();
        let mut xs = Vec::with_capacity(u_seq.len());
        let mut ys = Vec::with_capacity(u_seq.len());
        for u in u_seq {
            let (next, y) = self.step(&x, u)?;
            xs.push(std::mem::replace(&mut x, next));
            ys.push(y);
        }
        Ok((xs, ys))
    }

    /// Stacked `C, CA, ..., CA^{order-1}`.
    pub fn observability_matrix(&self, order: usize) -> DMatrix<f64> {
        let (n, q) = (self.n(), self.q());
        let mut out = DMatrix::zeros(order * q, n);
        let mut block = self.c.clone();
        for i in 0..order {
            out.view_mut((i * q, 0), (q, n)).copy_from(&block);
            block = &block * &self.a;
        }
        out
    }

    /// Smallest window length from which the state is reconstructible.
    pub fn compute_lag(&self) -> Result<usize> {
        let n = self.n();
        let mut last = 0;
        for order in 1..=n {
            last = numerical_rank(&self.observability_matrix(order), self.tol);
            if last == n {
                return Ok(order);
            }
        }
        Err(Error::Unobservable {
            rank: last,
            n,
            order: n,
        })
    }

    /// Lower block-triangular Toeplitz matrix with block (i, j) = C A^{i-j-1} B
    /// for i > j; the first block row is zero.
    pub fn toeplitz_matrix(&self, order: usize) -> DMatrix<f64> {
        let (q, m) = (self.q(), self.m());
        let markov = self.markov_parameters(order);
        let mut out = DMatrix::zeros(order * q, order * m);
        for i in 0..order {
            for j in 0..i {
                out.view_mut((i * q, j * m), (q, m)).copy_from(&markov[i - j - 1]);
            }
        }
        out
    }

    /// `C A^k B` for k = 0..count.
    fn markov_parameters(&self, count: usize) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(count);
        let mut ak_b = self.b.clone();
        for _ in 0..count {
            out.push(&self.c * &ak_b);
            ak_b = &self.a * &ak_b;
        }
        out
    }

    /// Left inverse of the order-`t0` observability matrix, `(O^T O)^{-1} O^T`,
    /// computed from a QR factorization.
    pub fn observability_pinv(&self, t0: usize) -> Result<DMatrix<f64>> {
        let obs = self.observability_matrix(t0);
        let rank = numerical_rank(&obs, self.tol);
        if rank < self.n() {
            let lag = self.compute_lag()?;
            return Err(Error::WindowBelowLag { t0, lag });
        }
        let qr = obs.qr();
        let r = qr.r();
        let q_t = qr.q().transpose();
        r.solve_upper_triangular(&q_t)
            .ok_or(Error::WindowBelowLag { t0, lag: t0 + 1 })
    }

    /// Transition matrices of the extended state
    /// `X(k-1) = [y(k-t0); ...; y(k-1); u(k-t0); ...; u(k-2)]`, so that
    /// `X(k) = A_tilde X(k-1) + B_tilde u(k-1)`.
    pub fn extended_transition_matrices(&self, t0: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if t0 == 0 {
            return Err(dim_err("extended window", ">= 1", 0));
        }
        let lag = self.compute_lag()?;
        if t0 < lag {
            return Err(Error::WindowBelowLag { t0, lag });
        }
        let (n, m, q) = (self.n(), self.m(), self.q());
        let dim = t0 * q + (t0 - 1) * m;
        let obs_pinv = self.observability_pinv(t0)?;
        let mut a_pow = DMatrix::identity(n, n);
        for _ in 0..t0 {
            a_pow = &a_pow * &self.a;
        }
        let ca_t0_pinv = &self.c * &a_pow * &obs_pinv; // q x t0*q
                                                       // Toeplitz of order t0 without its last (all-zero) block column.
        let toep = self.toeplitz_matrix(t0).columns(0, (t0 - 1) * m).into_owned();
        // Direct input terms [C A^{t0-1} B, ..., C A B] acting on u(0..t0-2).
        let markov = self.markov_parameters(t0);
        let mut direct = DMatrix::zeros(q, (t0 - 1) * m);
        for j in 0..t0.saturating_sub(1) {
            direct.view_mut((0, j * m), (q, m)).copy_from(&markov[t0 - 1 - j]);
        }

        let mut a_t = DMatrix::zeros(dim, dim);
        let mut b_t = DMatrix::zeros(dim, m);
        for i in 0..t0 - 1 {
            a_t.view_mut((i * q, (i + 1) * q), (q, q))
                .copy_from(&DMatrix::identity(q, q));
        }
        let row = (t0 - 1) * q;
        a_t.view_mut((row, 0), (q, t0 * q)).copy_from(&ca_t0_pinv);
        if t0 > 1 {
            let u_part = direct - &ca_t0_pinv * &toep;
            a_t.view_mut((row, t0 * q), (q, (t0 - 1) * m)).copy_from(&u_part);
        }
        // u(k-1) reaches the newest output through C B.
        b_t.view_mut((row, 0), (q, m)).copy_from(&markov[0]);
        let u0 = t0 * q;
        for i in 0..t0.saturating_sub(2) {
            a_t.view_mut((u0 + i * m, u0 + (i + 1) * m), (m, m))
                .copy_from(&DMatrix::identity(m, m));
        }
        if t0 > 1 {
            b_t.view_mut((u0 + (t0 - 2) * m, 0), (m, m))
                .copy_from(&DMatrix::identity(m, m));
        }
        Ok((a_t, b_t))
    }

    /// Reconstructs plant states from `(y(0..t0), u(0..t0-1))` windows.
    /// Oracle-side helper for plant sampling from an extended initial
    /// condition.
    pub fn window_observer(&self, t0: usize) -> Result<WindowObserver> {
        if t0 == 0 {
            return Err(dim_err("window", ">= 1", 0));
        }
        let pinv = self.observability_pinv(t0)?;
        let toep = self.toeplitz_matrix(t0).columns(0, (t0 - 1) * self.m()).into_owned();
        Ok(WindowObserver {
            t0,
            pinv,
            toep,
            a: self.a.clone(),
            b: self.b.clone(),
        })
    }

    /// Plant state at the time of the newest output in the window.
    pub fn state_from_window(&self, y_window: &[DVector<f64>], u_window: &[DVector<f64>]) -> Result<DVector<f64>> {
        self.window_observer(y_window.len().max(1))?.state(y_window, u_window)
    }
}

#[derive(Debug, Clone)]
pub struct WindowObserver {
    t0: usize,
    pinv: DMatrix<f64>,
    toep: DMatrix<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl WindowObserver {
    /// `x(t0-1)` from `x(0) = O^+ (y - T u)` propagated through the inputs.
    pub fn state(&self, y_window: &[DVector<f64>], u_window: &[DVector<f64>]) -> Result<DVector<f64>> {
        let t0 = self.t0;
        if y_window.len() != t0 || u_window.len() + 1 != t0 {
            return Err(dim_err(
                "window",
                format!("{t0} outputs and {} inputs", t0 - 1),
                format!("{} / {}", y_window.len(), u_window.len()),
            ));
        }
        let q = self.pinv.ncols() / t0;
        let m = self.b.ncols();
        let mut ys = DVector::zeros(t0 * q);
        for (i, y) in y_window.iter().enumerate() {
            if y.len() != q {
                return Err(dim_err("window output", q, y.len()));
            }
            ys.rows_mut(i * q, q).copy_from(y);
        }
        let mut us = DVector::zeros((t0 - 1) * m);
        for (i, u) in u_window.iter().enumerate() {
            if u.len() != m {
                return Err(dim_err("window input", m, u.len()));
            }
            us.rows_mut(i * m, m).copy_from(u);
        }
        let mut x = &self.pinv * (ys - &self.toep * us);
        for u in u_window {
            x = &self.a * &x + &self.b * u;
        }
        Ok(x)
    }
}
