use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use trajgen::bench::experiment::{prepare, run_comparison, Experiment, ExperimentSettings};
use trajgen::config::ConfigMap;
use trajgen::hankel::{
    build_hankel, collect_certified, collect_excitation_data, min_data_length, random_unit_state, rank_certificate,
    CollectionSettings,
};
use trajgen::io::{matrix_from_csv, read_record, training_log_to_csv, write_record, write_trajectories};
use trajgen::linalg::max_relative_error;
use trajgen::lti::{LtiSystem, Trajectory};
use trajgen::output_gen::{build_g_theta_output, generate_batch_output, generate_trajectory_output, ExtendedState};
use trajgen::sampling::{stream_rng, ChiSampler, InitSampler, Perturbation};
use trajgen::state_gen::{build_g_theta_state, generate_batch_state, generate_trajectory_state};
use trajgen::train::{evaluate_test_cost, test_states, train as run_training, Mode};
use trajgen::{Error, Result};

use crate::registry::resolve_system;
use crate::{CertifyArgs, CollectArgs, CompareArgs, ExperimentArgs, GenerateArgs, Status, TrainArgs, VerifyArgs};

const DEFAULT_SEED: u64 = 1;

pub struct Context {
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
}

impl Context {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    fn output(&self, explicit: &Option<PathBuf>, default: &str) -> Result<PathBuf> {
        let path = explicit.clone().unwrap_or_else(|| self.out_dir.join(default));
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        Ok(path)
    }
}

enum Gain {
    Fixed(DMatrix<f64>),
    Random(f64),
}

impl Gain {
    fn parse(spec: &str, m: usize, q: usize) -> Result<Gain> {
        if spec == "zero" {
            return Ok(Gain::Fixed(DMatrix::zeros(m, q)));
        }
        if let Some(rest) = spec.strip_prefix("random") {
            let h = match rest.strip_prefix(':') {
                None if rest.is_empty() => 0.1,
                Some(h) => h
                    .parse()
                    .map_err(|_| Error::Config(format!("invalid gain spec '{spec}'")))?,
                None => return Err(Error::Config(format!("invalid gain spec '{spec}'"))),
            };
            return Ok(Gain::Random(h));
        }
        let path = Path::new(spec);
        let theta = matrix_from_csv(&std::fs::read_to_string(path)?, spec)?;
        if theta.shape() != (m, q) {
            return Err(Error::Dimension {
                context: "gain file",
                expected: format!("{m}x{q}"),
                actual: format!("{}x{}", theta.nrows(), theta.ncols()),
            });
        }
        Ok(Gain::Fixed(theta))
    }

    fn draw(&self, rng: &mut ChaCha8Rng, m: usize, q: usize) -> DMatrix<f64> {
        match self {
            Gain::Fixed(t) => t.clone(),
            Gain::Random(h) => DMatrix::from_fn(m, q, |_, _| rng.random_range(-*h..=*h)),
        }
    }
}

/// `historic`, `box` or `box:<half width>`; `None` means historic.
fn parse_init(spec: &str) -> Result<Option<f64>> {
    let bad = || Error::Config(format!("invalid init '{spec}' (historic, box, box:<half width>)"));
    match spec {
        "historic" => Ok(None),
        "box" => Ok(Some(1.0)),
        s => {
            let h: f64 = s.strip_prefix("box:").ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if h > 0.0 {
                Ok(Some(h))
            } else {
                Err(bad())
            }
        }
    }
}

fn describe(theta: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for r in theta.row_iter() {
        let cells: Vec<String> = r.iter().map(|v| format!("{v:>13.6e}")).collect();
        let _ = writeln!(out, "  [{}]", cells.join(" "));
    }
    out
}

pub fn collect(ctx: &Context, a: &CollectArgs) -> Result<Status> {
    let named = resolve_system(&a.system)?;
    let sys = &named.system;
    let seed = ctx.seed();
    let record = match a.depth {
        Some(depth) => {
            let mut settings = CollectionSettings::new(a.length, depth);
            settings.input_scale = a.scale;
            settings.retries = a.retries;
            let c = collect_certified(sys, &settings, seed)?;
            println!(
                "rank={}/{} attempts={}",
                c.certificate.rank, c.certificate.required, c.attempts
            );
            c.record
        }
        None => collect_excitation_data(sys, &random_unit_state(sys.n(), seed), a.scale, a.length, seed)?,
    };
    let period = a.sample_period.unwrap_or(named.sample_period_s);
    let out = ctx.output(&a.out, "data.csv")?;
    write_record(&out, &record)?;
    println!("samples={}", record.sample_count());
    println!("simulated_time_s={}", record.sample_count() as f64 * period);
    println!("wrote {}", out.display());
    Ok(Status::Ok)
}

pub fn certify(_ctx: &Context, a: &CertifyArgs) -> Result<Status> {
    let record = read_record(&a.data)?;
    let n = a.n.unwrap_or(record.q());
    let h = build_hankel(&record, a.depth, n)?;
    let cert = rank_certificate(&h, n);
    println!(
        "samples={} depth={} columns={} rank={} required={} margin={:.3e}",
        record.sample_count(),
        a.depth,
        h.cols(),
        cert.rank,
        cert.required,
        cert.margin
    );
    if let Some(r) = cert.lemma_rank {
        println!("input_block_rank={r}");
    }
    println!("{}", if cert.ok { "PASS" } else { "FAIL" });
    Ok(if cert.ok { Status::Ok } else { Status::Failed })
}

pub fn generate(ctx: &Context, a: &GenerateArgs) -> Result<Status> {
    let record = read_record(&a.data)?;
    let (m, q) = (record.m(), record.q());
    let n = a.n.unwrap_or(q);
    let h = build_hankel(&record, a.depth, n)?;
    if a.t0.is_none() || a.n.is_some() {
        let cert = rank_certificate(&h, n);
        if !cert.ok {
            eprintln!(
                "record fails the rank condition: rank {} < {}",
                cert.rank, cert.required
            );
            return Ok(Status::Failed);
        }
    }
    let seed = ctx.seed();
    let theta = Gain::parse(&a.theta, m, q)?.draw(&mut stream_rng(seed, u64::MAX, 0), m, q);
    let noise = Perturbation { sigma: a.sigma };
    let init = parse_init(&a.init)?;
    let trajs = match a.t0 {
        None => {
            let sampler = match init {
                None => InitSampler::historic(&record),
                Some(hw) => InitSampler::Box { n: q, half_width: hw },
            };
            let gen = build_g_theta_state(&h, &theta)?;
            generate_batch_state(&h, &gen, &noise, a.count, &sampler, seed, a.episode)?
        }
        Some(t0) => {
            let sampler = match init {
                None => ChiSampler::historic(&record, t0)?,
                Some(hw) => ChiSampler::Box {
                    t0,
                    m,
                    q,
                    half_width: hw,
                },
            };
            let gen = build_g_theta_output(&h, &theta, t0)?;
            generate_batch_output(&h, &gen, &noise, a.count, &sampler, seed, a.episode)?
        }
    };
    let out = ctx.output(&a.out, "trajectories.csv")?;
    write_trajectories(&out, &trajs, m, q)?;
    println!(
        "trajectories={} length={}",
        trajs.len(),
        trajs.first().map_or(0, Trajectory::len)
    );
    println!("wrote {}", out.display());
    Ok(Status::Ok)
}

fn is_full_state(sys: &LtiSystem) -> bool {
    sys.q() == sys.n() && *sys.c() == DMatrix::identity(sys.n(), sys.n())
}

struct Trial {
    index: usize,
    error: f64,
    generated: Trajectory,
    oracle: Trajectory,
}

fn worst_offender_csv(t: &Trial, m: usize, q: usize) -> (String, String) {
    let mut out = String::from("k,signal,generated,oracle,abs_err\n");
    let mut peak = (0.0f64, String::new());
    for k in 0..t.generated.len() {
        let pairs = (0..m)
            .map(|i| (format!("u_{i}"), t.generated.u_seq[k][i], t.oracle.u_seq[k][i]))
            .chain((0..q).map(|j| (format!("y_{j}"), t.generated.y_seq[k][j], t.oracle.y_seq[k][j])));
        for (name, g, o) in pairs {
            let err = (g - o).abs();
            let _ = writeln!(out, "{k},{name},{g:.16e},{o:.16e},{err:.6e}");
            if err > peak.0 || peak.1.is_empty() {
                peak = (err, format!("k={k} {name}: generated {g:.6e}, oracle {o:.6e}"));
            }
        }
    }
    (out, peak.1)
}

pub fn verify(ctx: &Context, a: &VerifyArgs) -> Result<Status> {
    let named = resolve_system(&a.system)?;
    let sys = &named.system;
    let (n, m, q) = (sys.n(), sys.m(), sys.q());
    let seed = ctx.seed();
    let record = match &a.data {
        Some(path) => {
            let r = read_record(path)?;
            if (r.m(), r.q()) != (m, q) {
                return Err(Error::Dimension {
                    context: "data record against system",
                    expected: format!("m={m}, q={q}"),
                    actual: format!("m={}, q={}", r.m(), r.q()),
                });
            }
            r
        }
        None => {
            let length = a.length.unwrap_or_else(|| min_data_length(n, m, a.depth));
            collect_certified(sys, &CollectionSettings::new(length, a.depth), seed)?.record
        }
    };
    let t0 = match a.t0 {
        Some(t0) => Some(t0),
        None if is_full_state(sys) => None,
        None => Some(sys.compute_lag()?),
    };
    let h = build_hankel(&record, a.depth, n)?;
    let cert = rank_certificate(&h, n);
    let gain = Gain::parse(&a.theta, m, q)?;
    println!(
        "system n={n} m={m} q={q}, L={}, depth={}, {}, rank {}/{}",
        record.sample_count(),
        a.depth,
        t0.map_or("state feedback".to_string(), |t| format!("output feedback t0={t}")),
        cert.rank,
        cert.required
    );

    let mut worst: Option<Trial> = None;
    let mut failures = Vec::new();
    for i in 0..a.trials {
        let mut rng = stream_rng(seed, 1, i as u64);
        let theta = gain.draw(&mut rng, m, q);
        let outcome = match t0 {
            None => {
                let x0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
                let w = gauss_seq(&mut rng, a.depth, m);
                build_g_theta_state(&h, &theta)
                    .and_then(|gen| generate_trajectory_state(&h, &gen, &x0, &w))
                    .and_then(|g| Ok((g, sys.rollout(&x0, &theta, &w)?)))
            }
            Some(t0) => {
                let chi = reachable_window(sys, t0, &mut rng);
                let w = gauss_seq(&mut rng, a.depth.saturating_sub(t0) + 1, m);
                build_g_theta_output(&h, &theta, t0)
                    .and_then(|gen| generate_trajectory_output(&h, &gen, &chi, &w))
                    .and_then(|g| {
                        let x = sys.state_from_window(&chi.y_window, &chi.u_window)?;
                        Ok((g, sys.rollout(&x, &theta, &w)?))
                    })
            }
        };
        match outcome {
            Ok((generated, oracle)) => {
                let error = max_relative_error(&generated.stacked(), &oracle.stacked(), 1e-12);
                if worst.as_ref().is_none_or(|w| error > w.error) {
                    worst = Some(Trial {
                        index: i,
                        error,
                        generated,
                        oracle,
                    });
                }
            }
            Err(e) => failures.push(format!("trial {i}: {e}")),
        }
    }

    let max_err = worst.as_ref().map_or(0.0, |w| w.error);
    let pass = failures.is_empty() && max_err <= a.tol;
    println!(
        "trials={} max_rel_err={:.3e} tol={:.1e} {}",
        a.trials,
        max_err,
        a.tol,
        if pass { "PASS" } else { "FAIL" }
    );
    if pass {
        return Ok(Status::Ok);
    }
    for f in &failures {
        println!("{f}");
    }
    if let Some(w) = worst.filter(|w| w.error > a.tol) {
        let (csv, peak) = worst_offender_csv(&w, m, q);
        let out = ctx.output(&a.out, "verify_worst.csv")?;
        std::fs::write(&out, csv)?;
        println!(
            "worst trial {} (rel err {:.3e}), largest deviation at {peak}",
            w.index, w.error
        );
        println!("wrote {}", out.display());
    }
    Ok(Status::Failed)
}

fn gauss_seq(rng: &mut ChaCha8Rng, len: usize, m: usize) -> Vec<DVector<f64>> {
    (0..len)
        .map(|_| DVector::from_fn(m, |_, _| rng.sample(StandardNormal)))
        .collect()
}

/// Window of an open-loop run from a random state, so it is reachable.
fn reachable_window(sys: &LtiSystem, t0: usize, rng: &mut ChaCha8Rng) -> ExtendedState {
    let x0 = DVector::from_fn(sys.n(), |_, _| rng.random_range(-1.0..=1.0));
    let us = gauss_seq(rng, t0, sys.m());
    let (_, ys) = sys.simulate(&x0, &us).expect("dimensions match by construction");
    ExtendedState {
        y_window: ys,
        u_window: us[..t0 - 1].to_vec(),
    }
}

fn experiment_config(ctx: &Context, a: &ExperimentArgs) -> Result<ConfigMap> {
    let mut cfg = match &a.config {
        Some(path) => ConfigMap::load(path)?,
        None => ConfigMap::new(),
    };
    if let Some(v) = &a.experiment {
        cfg.set("experiment", v);
    }
    if let Some(v) = a.episodes {
        cfg.set("episodes", v);
    }
    if let Some(v) = a.horizon {
        cfg.set("horizon_k", v);
    }
    if let Some(v) = a.learning_rate {
        cfg.set("learning_rate", v);
    }
    if let Some(v) = a.t0 {
        cfg.set("t0", v);
    }
    if let Some(v) = ctx.seed {
        cfg.set("seed", v);
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim());
    }
    Ok(cfg)
}

fn settings_from(cfg: &ConfigMap) -> Result<ExperimentSettings> {
    let exp: Experiment = Experiment::from_str(&cfg.require::<String>("experiment")?)?;
    let mut settings = ExperimentSettings::defaults(exp);
    settings.apply(cfg)?;
    Ok(settings)
}

pub fn train(ctx: &Context, a: &TrainArgs) -> Result<Status> {
    let mut cfg = experiment_config(ctx, &a.common)?;
    if let Some(v) = &a.mode {
        cfg.set("mode", v);
    }
    if let Some(v) = a.batch {
        cfg.set("batch", v);
    }
    let mode = match cfg.remove("mode").as_deref() {
        None | Some("generate") => Mode::Generate,
        Some("sample") => Mode::Sample,
        Some(other) => return Err(Error::Config(format!("invalid mode '{other}' (generate, sample)"))),
    };
    let batch = cfg.get::<usize>("batch")?;
    cfg.remove("batch");
    let settings = settings_from(&cfg)?;
    let batch = batch.unwrap_or(settings.gen_batch);

    let prepared = prepare(&settings)?;
    let tcfg = settings.training_config(mode, batch);
    let log = run_training(&tcfg, &prepared.env)?;
    let plant = &prepared.plant;
    let tests = test_states(
        plant.n(),
        settings.test_count,
        settings.test_half_width,
        settings.test_seed,
    );
    let theta0 = DMatrix::zeros(plant.m(), plant.q());
    let initial = evaluate_test_cost(plant, &theta0, &tests, settings.horizon_k, settings.cost_weight)?;
    let fin = evaluate_test_cost(
        plant,
        &log.final_theta,
        &tests,
        settings.horizon_k,
        settings.cost_weight,
    )?;

    let out = ctx.output(&a.out, "train_log.csv")?;
    std::fs::write(&out, training_log_to_csv(&log))?;

    println!(
        "experiment {} mode {} Q={} K={} E={}",
        settings.experiment.name(),
        match mode {
            Mode::Generate => "generate",
            Mode::Sample => "sample",
        },
        batch,
        settings.horizon_k,
        settings.episodes_e
    );
    println!("{:<28} {}", "episodes run", log.episodes.len());
    if let Some(c) = log.final_cost() {
        println!("{:<28} {c:.6}", "final mean batch cost");
    }
    println!("{:<28} {initial:.6}", "test cost at initial gain");
    println!("{:<28} {fin:.6}", "test cost at final gain");
    println!("{:<28} {}", "generated samples", log.generated_samples());
    print!("final theta:\n{}", describe(&log.final_theta));
    println!("wrote {}", out.display());
    println!("physical_samples={}", log.physical_samples());
    Ok(Status::Ok)
}

pub fn compare(ctx: &Context, a: &CompareArgs) -> Result<Status> {
    let mut cfg = experiment_config(ctx, &a.common)?;
    if let Some(v) = a.gen_batch {
        cfg.set("gen_batch", v);
    }
    if let Some(v) = &a.q_list {
        cfg.set("q_list", v);
    }
    let settings = settings_from(&cfg)?;
    let report = run_comparison(&settings)?;
    let dir = ctx.out_dir.join(settings.experiment.name());
    report.write_to(&dir)?;
    print!("{}", report.summary());
    println!("wrote {}", dir.display());
    let failed: Vec<_> = report.methods.iter().filter(|m| m.error.is_some()).collect();
    if failed.is_empty() {
        Ok(Status::Ok)
    } else {
        eprintln!("{} arm(s) failed", failed.len());
        Ok(Status::Failed)
    }
}
