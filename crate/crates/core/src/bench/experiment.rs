//! PG-TrajectoryGen versus PG-Sample-Q comparisons on the bundled plants.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;

use crate::bench::network::{ieee33_feeder, lindistflow_system};
use crate::bench::reactor::{batch_reactor_system, Observation};
use crate::config::ConfigMap;
use crate::error::{Error, Result};
use crate::hankel::{collect_certified, min_data_length, CertifiedData, CollectionSettings};
use crate::io::training_log_to_csv;
use crate::lti::LtiSystem;
use crate::policy::SigmaSchedule;
use crate::sampling::{ChiSampler, InitSampler};
use crate::train::{evaluate_test_cost, test_states, train, Environment, Feedback, Mode, TrainingConfig, TrainingLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    ReactorState,
    ReactorPartial,
    VoltageState,
    VoltagePartial,
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reactor_state" => Ok(Experiment::ReactorState),
            "reactor_partial" => Ok(Experiment::ReactorPartial),
            "voltage_state" => Ok(Experiment::VoltageState),
            "voltage_partial" => Ok(Experiment::VoltagePartial),
            other => Err(Error::Config(format!(
                "unknown experiment '{other}' (reactor_state, reactor_partial, voltage_state, voltage_partial)"
            ))),
        }
    }
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::ReactorState => "reactor_state",
            Experiment::ReactorPartial => "reactor_partial",
            Experiment::VoltageState => "voltage_state",
            Experiment::VoltagePartial => "voltage_partial",
        }
    }

    pub fn all() -> [Experiment; 4] {
        [
            Experiment::ReactorState,
            Experiment::ReactorPartial,
            Experiment::VoltageState,
            Experiment::VoltagePartial,
        ]
    }
}

/// Batch size of a plant-sampling arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSpec {
    Fixed(usize),
    /// Same batch as the generation arm.
    Full,
}

impl FromStr for BatchSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(BatchSpec::Full),
            v => v
                .parse()
                .map(BatchSpec::Fixed)
                .map_err(|_| Error::Config(format!("invalid batch size '{v}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitChoice {
    /// Recorded states (state feedback) or recorded windows (output feedback).
    Historic,
    /// Uniform box of the given half width.
    Box(f64),
}

#[derive(Debug, Clone)]
pub struct ExperimentSettings {
    pub experiment: Experiment,
    pub horizon_k: usize,
    pub episodes_e: usize,
    pub gen_batch: usize,
    pub q_list: Vec<BatchSpec>,
    pub learning_rate: f64,
    pub sigma: SigmaSchedule,
    pub cost_weight: f64,
    /// Extended-state window for output feedback.
    pub t0: Option<usize>,
    /// Defaults to the minimum length `(m + 1) T - 1 + n`.
    pub data_length: Option<usize>,
    pub input_scale: f64,
    pub data_seed: u64,
    pub seed: u64,
    pub init: InitChoice,
    pub test_count: usize,
    pub test_half_width: f64,
    pub test_seed: u64,
    pub control_gain_dt: f64,
    pub droop_dt: f64,
    pub divergence_ceiling: f64,
    pub baseline: bool,
    pub sample_period_s: f64,
}

impl ExperimentSettings {
    pub fn defaults(experiment: Experiment) -> Self {
        let base = ExperimentSettings {
            experiment,
            horizon_k: 30,
            episodes_e: 400,
            gen_batch: 1200,
            q_list: vec![BatchSpec::Fixed(10), BatchSpec::Fixed(100), BatchSpec::Full],
            learning_rate: 7e-7,
            sigma: SigmaSchedule {
                sigma0: 2.0,
                decay: 0.997,
                sigma_min: 0.5,
            },
            cost_weight: 0.1,
            t0: None,
            data_length: None,
            input_scale: 1.0,
            data_seed: 1,
            seed: 7,
            init: InitChoice::Box(1.0),
            test_count: 800,
            test_half_width: 1.0,
            test_seed: 2024,
            control_gain_dt: 0.1,
            droop_dt: 0.1,
            divergence_ceiling: 1e8,
            baseline: false,
            sample_period_s: 0.1,
        };
        match experiment {
            Experiment::ReactorState => base,
            // Box windows map to plant states through an inverse observability
            // matrix with gain around 40, hence the narrow box.
            Experiment::ReactorPartial => ExperimentSettings {
                gen_batch: 1000,
                t0: Some(2),
                init: InitChoice::Box(0.05),
                ..base
            },
            Experiment::VoltageState => ExperimentSettings {
                horizon_k: 20,
                episodes_e: 500,
                gen_batch: 1000,
                cost_weight: 0.3,
                learning_rate: 3e-5,
                sigma: SigmaSchedule::constant(0.1),
                init: InitChoice::Historic,
                sample_period_s: 1.0,
                ..base
            },
            Experiment::VoltagePartial => ExperimentSettings {
                horizon_k: 20,
                episodes_e: 500,
                gen_batch: 1000,
                cost_weight: 0.3,
                learning_rate: 3e-5,
                sigma: SigmaSchedule::constant(0.1),
                t0: Some(3),
                init: InitChoice::Historic,
                sample_period_s: 1.0,
                ..base
            },
        }
    }

    /// Overrides from config keys; unknown keys are rejected.
    pub fn apply(&mut self, cfg: &ConfigMap) -> Result<()> {
        const KNOWN: &[&str] = &[
            "experiment",
            "horizon_k",
            "episodes",
            "gen_batch",
            "q_list",
            "learning_rate",
            "sigma0",
            "sigma_decay",
            "sigma_min",
            "cost_weight",
            "t0",
            "data_length",
            "input_scale",
            "data_seed",
            "seed",
            "init",
            "test_count",
            "test_half_width",
            "test_seed",
            "control_gain_dt",
            "droop_dt",
            "divergence_ceiling",
            "baseline",
            "sample_period",
        ];
        if let Some(k) = cfg.keys().find(|k| !KNOWN.contains(k)) {
            return Err(Error::Config(format!("unknown key {k}")));
        }
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = cfg.get($key)? {
                    $field = v;
                }
            };
        }
        set!("horizon_k", self.horizon_k);
        set!("episodes", self.episodes_e);
        set!("gen_batch", self.gen_batch);
        set!("learning_rate", self.learning_rate);
        set!("sigma0", self.sigma.sigma0);
        set!("sigma_decay", self.sigma.decay);
        set!("sigma_min", self.sigma.sigma_min);
        set!("cost_weight", self.cost_weight);
        set!("input_scale", self.input_scale);
        set!("data_seed", self.data_seed);
        set!("seed", self.seed);
        set!("test_count", self.test_count);
        set!("test_half_width", self.test_half_width);
        set!("test_seed", self.test_seed);
        set!("control_gain_dt", self.control_gain_dt);
        set!("droop_dt", self.droop_dt);
        set!("divergence_ceiling", self.divergence_ceiling);
        set!("baseline", self.baseline);
        set!("sample_period", self.sample_period_s);
        if let Some(t0) = cfg.get::<usize>("t0")? {
            if self.t0.is_none() {
                return Err(Error::Config(format!(
                    "t0 does not apply to {}",
                    self.experiment.name()
                )));
            }
            self.t0 = Some(t0);
        }
        if let Some(l) = cfg.get("data_length")? {
            self.data_length = Some(l);
        }
        if let Some(list) = cfg.get_list::<BatchSpec>("q_list")? {
            self.q_list = list;
        }
        if let Some(init) = cfg.get_str("init") {
            self.init = match init {
                "historic" => InitChoice::Historic,
                other => match other.strip_prefix("box") {
                    Some("") => InitChoice::Box(1.0),
                    Some(rest) => match rest.strip_prefix(':').and_then(|h| h.parse().ok()) {
                        Some(h) if h > 0.0 => InitChoice::Box(h),
                        _ => {
                            return Err(Error::Config(format!(
                                "invalid init '{other}' (historic, box, box:<half width>)"
                            )))
                        }
                    },
                    None => {
                        return Err(Error::Config(format!(
                            "invalid init '{other}' (historic, box, box:<half width>)"
                        )))
                    }
                },
            };
        }
        Ok(())
    }

    pub fn feedback(&self) -> Feedback {
        match self.t0 {
            None => Feedback::State,
            Some(t0) => Feedback::Output { t0 },
        }
    }

    pub fn depth(&self) -> usize {
        self.horizon_k + self.t0.map_or(0, |t0| t0 - 1)
    }

    pub fn training_config(&self, mode: Mode, batch: usize) -> TrainingConfig {
        let mut cfg = TrainingConfig::new(self.horizon_k, batch, self.episodes_e, self.learning_rate);
        cfg.cost_weight = self.cost_weight;
        cfg.sigma = self.sigma;
        cfg.mode = mode;
        cfg.feedback = self.feedback();
        cfg.seed = self.seed;
        cfg.baseline = self.baseline;
        cfg.divergence_ceiling = self.divergence_ceiling;
        cfg
    }
}

/// Plant for one of the builtin experiments.
pub fn build_plant(s: &ExperimentSettings) -> Result<LtiSystem> {
    match s.experiment {
        Experiment::ReactorState => Ok(batch_reactor_system(Observation::Full)),
        Experiment::ReactorPartial => Ok(batch_reactor_system(Observation::Partial)),
        Experiment::VoltageState => lindistflow_system(&ieee33_feeder(), s.control_gain_dt, s.droop_dt),
        Experiment::VoltagePartial => lindistflow_system(
            &ieee33_feeder().with_spread_selection(20)?,
            s.control_gain_dt,
            s.droop_dt,
        ),
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub plant: LtiSystem,
    pub data: CertifiedData,
    pub env: Environment,
}

/// Collects certified data and assembles the training environment.
pub fn prepare(s: &ExperimentSettings) -> Result<Prepared> {
    let plant = build_plant(s)?;
    prepare_with_plant(s, plant)
}

pub fn prepare_with_plant(s: &ExperimentSettings, plant: LtiSystem) -> Result<Prepared> {
    let depth = s.depth();
    let length = s
        .data_length
        .unwrap_or_else(|| min_data_length(plant.n(), plant.m(), depth));
    let mut coll = CollectionSettings::new(length, depth);
    coll.input_scale = s.input_scale;
    let data = collect_certified(&plant, &coll, s.data_seed)?;
    let (init, chi) = match (s.t0, s.init) {
        (None, InitChoice::Historic) => (InitSampler::historic(&data.record), None),
        (None, InitChoice::Box(h)) => (
            InitSampler::Box {
                n: plant.n(),
                half_width: h,
            },
            None,
        ),
        (Some(t0), InitChoice::Historic) => (
            InitSampler::Box {
                n: plant.n(),
                half_width: 1.0,
            },
            Some(ChiSampler::historic(&data.record, t0)?),
        ),
        (Some(t0), InitChoice::Box(h)) => (
            InitSampler::Box {
                n: plant.n(),
                half_width: h,
            },
            Some(ChiSampler::Box {
                t0,
                m: plant.m(),
                q: plant.q(),
                half_width: h,
            }),
        ),
    };
    let env = Environment {
        plant: Some(plant.clone()),
        hankel: Some(data.hankel.clone()),
        data_samples: length as u64,
        init,
        chi,
        m: plant.m(),
        q: plant.q(),
    };
    Ok(Prepared { plant, data, env })
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub label: String,
    pub mode: Mode,
    pub batch_q: usize,
    pub final_train_cost: Option<f64>,
    pub final_test_cost: Option<f64>,
    pub physical_samples: u64,
    pub wall_ms: f64,
    pub error: Option<String>,
    pub log: Option<TrainingLog>,
}

#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub experiment: Experiment,
    pub data_length: usize,
    pub collection_time_s: f64,
    pub initial_test_cost: f64,
    pub methods: Vec<MethodResult>,
    pub wall_ms: f64,
}

impl ComparisonReport {
    pub fn method(&self, label: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,mode,batch_q,final_train_cost,final_test_cost,physical_samples,status\n");
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.10e}"));
        for m in &self.methods {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                m.label,
                match m.mode {
                    Mode::Generate => "generate",
                    Mode::Sample => "sample",
                },
                m.batch_q,
                opt(m.final_train_cost),
                opt(m.final_test_cost),
                m.physical_samples,
                m.error
                    .as_deref()
                    .map_or("ok".to_string(), |e| format!("\"{}\"", e.replace('"', "'")))
            );
        }
        out
    }

    /// Whitespace-separated loss curves, one column per method.
    pub fn loss_curves(&self) -> String {
        let mut out = String::from("# episode");
        for m in &self.methods {
            let _ = write!(out, " {}", m.label);
        }
        out.push('\n');
        let rows = self
            .methods
            .iter()
            .filter_map(|m| m.log.as_ref().map(|l| l.episodes.len()))
            .max()
            .unwrap_or(0);
        for e in 0..rows {
            let _ = write!(out, "{e}");
            for m in &self.methods {
                match m.log.as_ref().and_then(|l| l.episodes.get(e)) {
                    Some(rec) => {
                        let _ = write!(out, " {:.8e}", rec.mean_cost);
                    }
                    None => out.push_str(" nan"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Writes `report.csv`, `curves.dat` and one `log_<method>.csv` per arm.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), self.to_csv())?;
        std::fs::write(dir.join("curves.dat"), self.loss_curves())?;
        for m in &self.methods {
            if let Some(log) = &m.log {
                std::fs::write(dir.join(format!("log_{}.csv", m.label)), training_log_to_csv(log))?;
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut out = format!(
            "experiment {}: L = {} ({:.1} s of data), initial test cost {:.4}\n",
            self.experiment.name(),
            self.data_length,
            self.collection_time_s,
            self.initial_test_cost
        );
        let _ = writeln!(
            out,
            "{:<22} {:>8} {:>14} {:>14} {:>12} {:>10}",
            "method", "Q", "train cost", "test cost", "samples", "wall s"
        );
        for m in &self.methods {
            let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            let _ = writeln!(
                out,
                "{:<22} {:>8} {:>14} {:>14} {:>12} {:>10.2}{}",
                m.label,
                m.batch_q,
                f(m.final_train_cost),
                f(m.final_test_cost),
                m.physical_samples,
                m.wall_ms / 1e3,
                m.error.as_ref().map_or(String::new(), |e| format!("  [{e}]"))
            );
        }
        out
    }
}

/// Largest per-episode relative difference of mean batch cost between two
/// logs, and the relative difference of two final test costs.
pub fn mode_parity(a: &TrainingLog, b: &TrainingLog) -> f64 {
    a.episodes
        .iter()
        .zip(&b.episodes)
        .map(|(x, y)| (x.mean_cost - y.mean_cost).abs() / y.mean_cost.abs().max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

fn run_arm(
    s: &ExperimentSettings,
    p: &Prepared,
    tests: &[DVector<f64>],
    mode: Mode,
    batch: usize,
    label: String,
) -> MethodResult {
    let start = Instant::now();
    let cfg = s.training_config(mode, batch);
    let outcome = train(&cfg, &p.env).and_then(|log| {
        let test = evaluate_test_cost(&p.plant, &log.final_theta, tests, s.horizon_k, s.cost_weight)?;
        Ok((log, test))
    });
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    match outcome {
        Ok((log, test)) => MethodResult {
            label,
            mode,
            batch_q: batch,
            final_train_cost: log.final_cost(),
            final_test_cost: Some(test),
            physical_samples: log.physical_samples(),
            wall_ms,
            error: None,
            log: Some(log),
        },
        Err(e) => MethodResult {
            label,
            mode,
            batch_q: batch,
            final_train_cost: None,
            final_test_cost: None,
            physical_samples: match mode {
                Mode::Generate => p.env.data_samples,
                Mode::Sample => 0,
            },
            wall_ms,
            error: Some(e.to_string()),
            log: None,
        },
    }
}

/// Runs the generation arm and one sampling arm per entry of `q_list`. All
/// arms share the trajectory seed, so the `full` sampling arm draws exactly
/// the same initial conditions and perturbations as the generation arm.
pub fn run_comparison(s: &ExperimentSettings) -> Result<ComparisonReport> {
    let start = Instant::now();
    let p = prepare(s)?;
    let tests = test_states(p.plant.n(), s.test_count, s.test_half_width, s.test_seed);
    let theta0 = nalgebra::DMatrix::zeros(p.plant.m(), p.plant.q());
    let initial_test_cost = evaluate_test_cost(&p.plant, &theta0, &tests, s.horizon_k, s.cost_weight)?;
    let mut methods = vec![run_arm(
        s,
        &p,
        &tests,
        Mode::Generate,
        s.gen_batch,
        "PG-TrajectoryGen".into(),
    )];
    for spec in &s.q_list {
        let q = match spec {
            BatchSpec::Fixed(q) => *q,
            BatchSpec::Full => s.gen_batch,
        };
        methods.push(run_arm(s, &p, &tests, Mode::Sample, q, format!("PG-Sample-{q}")));
    }
    let data_length = p.data.record.sample_count();
    Ok(ComparisonReport {
        experiment: s.experiment,
        data_length,
        collection_time_s: data_length as f64 * s.sample_period_s,
        initial_test_cost,
        methods,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
