//! Python bindings. Matrices cross the boundary as lists of rows and signal
//! sequences as lists of per-step vectors.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use trajgen::bench::experiment::{build_plant, prepare, Experiment, ExperimentSettings};
use trajgen::config::ConfigMap;
use trajgen::hankel::{self, HankelMatrix};
use trajgen::lti::Trajectory;
use trajgen::output_gen::{self, ExtendedState};
use trajgen::sampling::{InitSampler, Perturbation};
use trajgen::state_gen;
use trajgen::train::{self, Mode};

type Rows = Vec<Vec<f64>>;

fn to_py(e: trajgen::Error) -> PyErr {
    match e {
        trajgen::Error::Config(_)
        | trajgen::Error::MissingKey(_)
        | trajgen::Error::Dimension { .. }
        | trajgen::Error::Parse { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn matrix(rows: &Rows) -> PyResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn seq(v: &Rows) -> Vec<DVector<f64>> {
    v.iter().map(|x| DVector::from_column_slice(x)).collect()
}

fn unseq(v: &[DVector<f64>]) -> Rows {
    v.iter().map(|x| x.iter().copied().collect()).collect()
}

fn traj(t: &Trajectory) -> (Rows, Rows) {
    (unseq(&t.u_seq), unseq(&t.y_seq))
}

#[pyclass(name = "LtiSystem", module = "trajgen")]
struct PyLtiSystem {
    inner: trajgen::lti::LtiSystem,
}

#[pymethods]
impl PyLtiSystem {
    #[new]
    fn new(a: Rows, b: Rows, c: Rows) -> PyResult<Self> {
        let inner = trajgen::lti::LtiSystem::new(matrix(&a)?, matrix(&b)?, matrix(&c)?).map_err(to_py)?;
        Ok(PyLtiSystem { inner })
    }

    /// One of reactor_state, reactor_partial, voltage_state, voltage_partial.
    #[staticmethod]
    fn builtin(name: &str) -> PyResult<Self> {
        let exp = Experiment::from_str(name).map_err(to_py)?;
        let inner = build_plant(&ExperimentSettings::defaults(exp)).map_err(to_py)?;
        Ok(PyLtiSystem { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }
    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }
    #[getter]
    fn q(&self) -> usize {
        self.inner.q()
    }

    fn matrices(&self) -> (Rows, Rows, Rows) {
        (rows(self.inner.a()), rows(self.inner.b()), rows(self.inner.c()))
    }

    /// Closed loop `u = theta y + w`; returns `(u, y)`.
    fn rollout(&self, x0: Vec<f64>, theta: Rows, w: Rows) -> PyResult<(Rows, Rows)> {
        let t = self
            .inner
            .rollout(&DVector::from_vec(x0), &matrix(&theta)?, &seq(&w))
            .map_err(to_py)?;
        Ok(traj(&t))
    }

    fn observability_matrix(&self, order: usize) -> Rows {
        rows(&self.inner.observability_matrix(order))
    }

    /// State at the last sample of an output/input window.
    fn state_from_window(&self, y_window: Rows, u_window: Rows) -> PyResult<Vec<f64>> {
        let x = self
            .inner
            .state_from_window(&seq(&y_window), &seq(&u_window))
            .map_err(to_py)?;
        Ok(x.iter().copied().collect())
    }

    fn compute_lag(&self) -> PyResult<usize> {
        self.inner.compute_lag().map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "LtiSystem(n={}, m={}, q={})",
            self.inner.n(),
            self.inner.m(),
            self.inner.q()
        )
    }
}

#[pyclass(name = "DataRecord", module = "trajgen")]
struct PyDataRecord {
    inner: hankel::DataRecord,
}

#[pymethods]
impl PyDataRecord {
    #[new]
    fn new(u: Rows, y: Rows) -> PyResult<Self> {
        let m = u.first().map_or(0, Vec::len);
        let q = y.first().map_or(0, Vec::len);
        let inner = hankel::DataRecord::new(seq(&u), seq(&y), m, q).map_err(to_py)?;
        Ok(PyDataRecord { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyDataRecord {
            inner: trajgen::io::read_record(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        trajgen::io::write_record(path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn u(&self) -> Rows {
        unseq(&self.inner.u_d)
    }
    #[getter]
    fn y(&self) -> Rows {
        unseq(&self.inner.y_d)
    }

    fn __len__(&self) -> usize {
        self.inner.sample_count()
    }
}

/// Records `length` samples of the plant under uniform excitation.
#[pyfunction]
#[pyo3(signature = (system, length, seed, scale = 1.0))]
fn collect(system: &PyLtiSystem, length: usize, seed: u64, scale: f64) -> PyResult<PyDataRecord> {
    let x0 = hankel::random_unit_state(system.inner.n(), seed);
    let inner = hankel::collect_excitation_data(&system.inner, &x0, scale, length, seed).map_err(to_py)?;
    Ok(PyDataRecord { inner })
}

/// Collects until the rank condition for `depth` holds.
#[pyfunction]
#[pyo3(signature = (system, length, depth, seed, scale = 1.0))]
fn collect_certified(
    system: &PyLtiSystem,
    length: usize,
    depth: usize,
    seed: u64,
    scale: f64,
) -> PyResult<PyDataRecord> {
    let mut settings = hankel::CollectionSettings::new(length, depth);
    settings.input_scale = scale;
    let data = hankel::collect_certified(&system.inner, &settings, seed).map_err(to_py)?;
    Ok(PyDataRecord { inner: data.record })
}

#[pyclass(name = "Hankel", module = "trajgen")]
struct PyHankel {
    inner: HankelMatrix,
    record: hankel::DataRecord,
}

#[pymethods]
impl PyHankel {
    #[new]
    fn new(record: &PyDataRecord, depth: usize, n: usize) -> PyResult<Self> {
        let inner = hankel::build_hankel(&record.inner, depth, n).map_err(to_py)?;
        Ok(PyHankel {
            inner,
            record: record.inner.clone(),
        })
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }
    #[getter]
    fn cols(&self) -> usize {
        self.inner.cols()
    }

    fn stacked(&self) -> Rows {
        rows(&self.inner.stacked())
    }

    /// `{"ok", "rank", "required", "margin"}`.
    fn rank_certificate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = hankel::rank_certificate(&self.inner, self.inner.n_hint());
        let d = PyDict::new(py);
        d.set_item("ok", c.ok)?;
        d.set_item("rank", c.rank)?;
        d.set_item("required", c.required)?;
        d.set_item("margin", c.margin)?;
        Ok(d)
    }
}

/// Generator for state feedback (the recorded output is the state).
#[pyclass(name = "StateGenerator", module = "trajgen")]
struct PyStateGenerator {
    gen: state_gen::GeneratorState,
    hankel: HankelMatrix,
    record: hankel::DataRecord,
}

#[pymethods]
impl PyStateGenerator {
    #[new]
    fn new(hankel: &PyHankel, theta: Rows) -> PyResult<Self> {
        let gen = state_gen::build_g_theta_state(&hankel.inner, &matrix(&theta)?).map_err(to_py)?;
        Ok(PyStateGenerator {
            gen,
            hankel: hankel.inner.clone(),
            record: hankel.record.clone(),
        })
    }

    /// Trajectory from `x0` under perturbations `w`; returns `(u, y)`.
    fn generate(&self, x0: Vec<f64>, w: Rows) -> PyResult<(Rows, Rows)> {
        let t = state_gen::generate_trajectory_state(&self.hankel, &self.gen, &DVector::from_vec(x0), &seq(&w))
            .map_err(to_py)?;
        Ok(traj(&t))
    }

    /// `count` trajectories with historic (or box, if `half_width` is given)
    /// initial states and Gaussian perturbations of scale `sigma`.
    #[pyo3(signature = (count, sigma, seed, episode = 0, half_width = None))]
    fn generate_batch(
        &self,
        count: usize,
        sigma: f64,
        seed: u64,
        episode: u64,
        half_width: Option<f64>,
    ) -> PyResult<Vec<(Rows, Rows)>> {
        let init = match half_width {
            Some(h) => InitSampler::Box {
                n: self.hankel.q(),
                half_width: h,
            },
            None => InitSampler::historic(&self.record),
        };
        let batch = state_gen::generate_batch_state(
            &self.hankel,
            &self.gen,
            &Perturbation { sigma },
            count,
            &init,
            seed,
            episode,
        )
        .map_err(to_py)?;
        Ok(batch.iter().map(traj).collect())
    }
}

/// Generator for output feedback from a window of `t0` outputs and `t0 - 1` inputs.
#[pyclass(name = "OutputGenerator", module = "trajgen")]
struct PyOutputGenerator {
    gen: output_gen::OutputGeneratorState,
    hankel: HankelMatrix,
}

#[pymethods]
impl PyOutputGenerator {
    #[new]
    fn new(hankel: &PyHankel, theta: Rows, t0: usize) -> PyResult<Self> {
        let gen = output_gen::build_g_theta_output(&hankel.inner, &matrix(&theta)?, t0).map_err(to_py)?;
        Ok(PyOutputGenerator {
            gen,
            hankel: hankel.inner.clone(),
        })
    }

    #[getter]
    fn rank(&self) -> usize {
        self.gen.rank()
    }

    /// Trajectory continuing the window; returns `(u, y)` from time `t0 - 1`.
    fn generate(&self, y_window: Rows, u_window: Rows, w: Rows) -> PyResult<(Rows, Rows)> {
        let chi = ExtendedState::new(seq(&y_window), seq(&u_window)).map_err(to_py)?;
        let t = output_gen::generate_trajectory_output(&self.hankel, &self.gen, &chi, &seq(&w)).map_err(to_py)?;
        Ok(traj(&t))
    }
}

/// Policy-gradient training on a builtin experiment. `overrides` takes the
/// same keys as the command-line config file.
#[pyfunction]
#[pyo3(signature = (experiment, mode = "generate", batch = None, overrides = None))]
fn train_experiment<'py>(
    py: Python<'py>,
    experiment: &str,
    mode: &str,
    batch: Option<usize>,
    overrides: Option<Vec<(String, String)>>,
) -> PyResult<Bound<'py, PyDict>> {
    let mode = match mode {
        "generate" => Mode::Generate,
        "sample" => Mode::Sample,
        other => return Err(PyValueError::new_err(format!("invalid mode '{other}'"))),
    };
    let mut settings = ExperimentSettings::defaults(Experiment::from_str(experiment).map_err(to_py)?);
    let mut cfg = ConfigMap::new();
    for (k, v) in overrides.unwrap_or_default() {
        cfg.set(&k, v);
    }
    settings.apply(&cfg).map_err(to_py)?;
    let batch = batch.unwrap_or(settings.gen_batch);

    let prepared = prepare(&settings).map_err(to_py)?;
    let log = train::train(&settings.training_config(mode, batch), &prepared.env).map_err(to_py)?;
    let tests = train::test_states(
        prepared.plant.n(),
        settings.test_count,
        settings.test_half_width,
        settings.test_seed,
    );
    let test_cost = train::evaluate_test_cost(
        &prepared.plant,
        &log.final_theta,
        &tests,
        settings.horizon_k,
        settings.cost_weight,
    )
    .map_err(to_py)?;

    let d = PyDict::new(py);
    d.set_item("costs", log.episodes.iter().map(|e| e.mean_cost).collect::<Vec<_>>())?;
    d.set_item("final_theta", rows(&log.final_theta))?;
    d.set_item("test_cost", test_cost)?;
    d.set_item("physical_samples", log.physical_samples())?;
    d.set_item("generated_samples", log.generated_samples())?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "trajgen")]
fn trajgen_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLtiSystem>()?;
    m.add_class::<PyDataRecord>()?;
    m.add_class::<PyHankel>()?;
    m.add_class::<PyStateGenerator>()?;
    m.add_class::<PyOutputGenerator>()?;
    m.add_function(wrap_pyfunction!(collect, m)?)?;
    m.add_function(wrap_pyfunction!(collect_certified, m)?)?;
    m.add_function(wrap_pyfunction!(train_experiment, m)?)?;
    Ok(())
}
