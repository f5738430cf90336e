use std::path::Path;
use std::str::FromStr;

use trajgen::bench::experiment::{build_plant, Experiment, ExperimentSettings};
use trajgen::bench::network::{lindistflow_system, load_network};
use trajgen::io::read_system;
use trajgen::lti::LtiSystem;
use trajgen::{Error, Result};

/// A plant together with its sampling period in seconds.
pub struct NamedSystem {
    pub system: LtiSystem,
    pub sample_period_s: f64,
}

pub const BUILTINS: &str = "reactor_state, reactor_partial, voltage_state, voltage_partial";

/// Builtin name, a `.csv` radial network file, or a system text file.
pub fn resolve_system(spec: &str) -> Result<NamedSystem> {
    let alias = match spec {
        "reactor" => "reactor_state",
        "voltage" => "voltage_state",
        s => s,
    };
    if let Ok(exp) = Experiment::from_str(alias) {
        let settings = ExperimentSettings::defaults(exp);
        return Ok(NamedSystem {
            system: build_plant(&settings)?,
            sample_period_s: settings.sample_period_s,
        });
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(Error::Config(format!(
            "unknown system '{spec}' (builtins: {BUILTINS}; or a system/network file)"
        )));
    }
    let system = if path.extension().is_some_and(|e| e == "csv") {
        let defaults = ExperimentSettings::defaults(Experiment::VoltageState);
        lindistflow_system(&load_network(path)?, defaults.control_gain_dt, defaults.droop_dt)?
    } else {
        read_system(path)?
    };
    Ok(NamedSystem {
        system,
        sample_period_s: 1.0,
    })
}
