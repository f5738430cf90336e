//! Radial distribution feeders and their linearized voltage dynamics.

use std::collections::{HashSet, VecDeque};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::lti::LtiSystem;

const IEEE33: &str = include_str!("../../data/ieee33.csv");

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r_pu: f64,
    pub x_pu: f64,
}

/// Feeder topology plus the buses that are measured (rows of C) and
/// controlled (columns of B). Bus numbers are 1-based as in the file.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkData {
    pub bus_count: usize,
    pub reference: usize,
    pub branches: Vec<Branch>,
    pub measured_buses: Vec<usize>,
    pub controlled_buses: Vec<usize>,
}

impl NetworkData {
    /// Non-reference buses in ascending order; index i is state i.
    pub fn state_buses(&self) -> Vec<usize> {
        (1..=self.bus_count).filter(|&b| b != self.reference).collect()
    }

    /// Measures and controls the same `count` buses: the first non-reference
    /// buses whose number is not a multiple of three.
    pub fn with_spread_selection(mut self, count: usize) -> Result<Self> {
        let pick: Vec<usize> = self
            .state_buses()
            .into_iter()
            .filter(|b| b % 3 != 0)
            .take(count)
            .collect();
        if pick.len() < count {
            return Err(Error::Config(format!(
                "cannot select {count} buses from a {}-bus feeder",
                self.bus_count
            )));
        }
        self.measured_buses = pick.clone();
        self.controlled_buses = pick;
        Ok(self)
    }

    pub fn with_buses(mut self, measured: Vec<usize>, controlled: Vec<usize>) -> Result<Self> {
        let valid: HashSet<usize> = self.state_buses().into_iter().collect();
        for b in measured.iter().chain(&controlled) {
            if !valid.contains(b) {
                return Err(Error::Config(format!("bus {b} is not a non-reference bus")));
            }
        }
        self.measured_buses = measured;
        self.controlled_buses = controlled;
        Ok(self)
    }

    /// `X[i, j] = 2 * sum of reactances on the common part of the paths from
    /// the reference bus to buses i and j`, over non-reference buses.
    pub fn reactance_sensitivity(&self) -> DMatrix<f64> {
        let paths = self.root_paths();
        let buses = self.state_buses();
        let n = buses.len();
        DMatrix::from_fn(n, n, |i, j| {
            let pj: HashSet<usize> = paths[buses[j]].iter().copied().collect();
            2.0 * paths[buses[i]]
                .iter()
                .filter(|b| pj.contains(b))
                .map(|&b| self.branches[b].x_pu)
                .sum::<f64>()
        })
    }

    /// Branch indices on the path from the reference to each bus (index by
    /// bus number).
    fn root_paths(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.bus_count + 1];
        for (k, br) in self.branches.iter().enumerate() {
            adj[br.from].push((br.to, k));
            adj[br.to].push((br.from, k));
        }
        let mut paths: Vec<Option<Vec<usize>>> = vec![None; self.bus_count + 1];
        paths[self.reference] = Some(Vec::new());
        let mut queue = VecDeque::from([self.reference]);
        while let Some(b) = queue.pop_front() {
            let base = paths[b].clone().unwrap_or_default();
            for &(nb, k) in &adj[b] {
                if paths[nb].is_none() {
                    let mut p = base.clone();
                    p.push(k);
                    paths[nb] = Some(p);
                    queue.push_back(nb);
                }
            }
        }
        paths.into_iter().map(Option::unwrap_or_default).collect()
    }
}

pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkData> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_network(&text, &path.display().to_string())
}

/// Bundled 33-bus feeder with every non-reference bus measured and
/// controlled.
pub fn ieee33_feeder() -> NetworkData {
    parse_network(IEEE33, "ieee33.csv").expect("bundled feeder is valid")
}

/// Bundled 33-bus feeder with 20 measured and controlled buses.
pub fn ieee33_network() -> NetworkData {
    ieee33_feeder()
        .with_spread_selection(20)
        .expect("feeder has enough buses")
}

/// Parses `buses=<N>,ref=<bus>` followed by `from,to,r_pu,x_pu` rows. All
/// non-reference buses start out measured and controlled.
pub fn parse_network(text: &str, label: &str) -> Result<NetworkData> {
    let err = |line: usize, message: String| Error::Parse {
        path: label.to_string(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines.next().ok_or_else(|| err(1, "empty network file".into()))?;
    let mut bus_count = None;
    let mut reference = None;
    for field in header.split(',') {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| err(hline, format!("expected key=value in header, got '{field}'")))?;
        let v: usize = v
            .trim()
            .parse()
            .map_err(|_| err(hline, format!("bad integer '{}'", v.trim())))?;
        match k.trim() {
            "buses" => bus_count = Some(v),
            "ref" => reference = Some(v),
            other => return Err(err(hline, format!("unknown header key '{other}'"))),
        }
    }
    let bus_count = bus_count.ok_or_else(|| err(hline, "header lacks buses=".into()))?;
    let reference = reference.ok_or_else(|| err(hline, "header lacks ref=".into()))?;
    if bus_count < 2 || reference == 0 || reference > bus_count {
        return Err(err(hline, format!("invalid buses={bus_count}, ref={reference}")));
    }

    let mut parent: Vec<usize> = (0..=bus_count).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut seen = HashSet::new();
    let mut branches = Vec::new();
    for (ln, line) in lines {
        if line.starts_with("from") {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 4 {
            return Err(err(ln, format!("expected 4 columns, found {}", cols.len())));
        }
        let bus = |s: &str| -> Result<usize> {
            let b: usize = s.parse().map_err(|_| err(ln, format!("bad bus number '{s}'")))?;
            if b == 0 || b > bus_count {
                return Err(err(ln, format!("bus {b} outside 1..={bus_count}")));
            }
            Ok(b)
        };
        let val = |s: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| err(ln, format!("bad number '{s}'")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(err(ln, format!("impedance must be finite and non-negative, got {v}")));
            }
            Ok(v)
        };
        let (from, to) = (bus(cols[0])?, bus(cols[1])?);
        if from == to {
            return Err(err(ln, format!("self-loop at bus {from}")));
        }
        if !seen.insert((from.min(to), from.max(to))) {
            return Err(err(ln, format!("duplicate branch {from}-{to}")));
        }
        let (ra, rb) = (find(&mut parent, from), find(&mut parent, to));
        if ra == rb {
            return Err(Error::Topology(format!(
                "{label}:{ln}: branch {from}-{to} closes a cycle"
            )));
        }
        parent[ra] = rb;
        branches.push(Branch {
            from,
            to,
            r_pu: val(cols[2])?,
            x_pu: val(cols[3])?,
        });
    }
    if branches.len() != bus_count - 1 {
        return Err(Error::Topology(format!(
            "{label}: {} branches do not span {bus_count} buses",
            branches.len()
        )));
    }
    let all: Vec<usize> = (1..=bus_count).filter(|&b| b != reference).collect();
    Ok(NetworkData {
        bus_count,
        reference,
        branches,
        measured_buses: all.clone(),
        controlled_buses: all,
    })
}

/// Voltage-deviation dynamics
/// `x(k+1) = (I - droop_dt X) x(k) + control_gain_dt X S_c^T u(k)`, `y = S_m x`.
/// `droop_dt = 0` gives the pure integrator, which is unobservable unless
/// every bus is measured.
pub fn lindistflow_system(net: &NetworkData, control_gain_dt: f64, droop_dt: f64) -> Result<LtiSystem> {
    let x = net.reactance_sensitivity();
    let buses = net.state_buses();
    let n = buses.len();
    let index = |b: usize| buses.iter().position(|&s| s == b).expect("validated bus");
    let mut sc = DMatrix::zeros(net.controlled_buses.len(), n);
    for (i, &b) in net.controlled_buses.iter().enumerate() {
        sc[(i, index(b))] = 1.0;
    }
    let mut sm = DMatrix::zeros(net.measured_buses.len(), n);
    for (i, &b) in net.measured_buses.iter().enumerate() {
        sm[(i, index(b))] = 1.0;
    }
    let a = DMatrix::identity(n, n) - &x * droop_dt;
    let b = &x * sc.transpose() * control_gain_dt;
    LtiSystem::new(a, b, sm)
}
