//! Plain-text file formats: data records, trajectories, system matrices,
//! extended states, gain matrices and training logs.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hankel::DataRecord;
use crate::lti::{LtiSystem, Trajectory};
use crate::output_gen::ExtendedState;
use crate::train::TrainingLog;

/// 17 significant digits round-trip every finite f64 exactly.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_err(label: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: label.to_string(),
        line,
        message: message.into(),
    }
}

fn parse_row(line: &str, label: &str, ln: usize) -> Result<Vec<f64>> {
    line.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<f64>()
                .map_err(|_| parse_err(label, ln, format!("bad number '{s}'")))
        })
        .collect()
}

fn header_names(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (0..count).map(move |i| format!("{prefix}_{i}"))
}

fn count_prefixed(cols: &[&str], prefix: &str) -> usize {
    cols.iter().filter(|c| c.starts_with(prefix)).count()
}

pub fn record_to_csv(rec: &DataRecord) -> String {
    let mut out = String::new();
    let header: Vec<String> = std::iter::once("k".to_string())
        .chain(header_names("u", rec.m()))
        .chain(header_names("y", rec.q()))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for (k, (u, y)) in rec.u_d.iter().zip(&rec.y_d).enumerate() {
        let _ = write!(out, "{k}");
        for v in u.iter().chain(y.iter()) {
            let _ = write!(out, ",{}", num(*v));
        }
        out.push('\n');
    }
    out
}

pub fn record_from_csv(text: &str, label: &str) -> Result<DataRecord> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(label, 1, "missing header"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"k") {
        return Err(parse_err(label, 1, "header must start with k"));
    }
    let m = count_prefixed(&cols, "u_");
    let q = count_prefixed(&cols, "y_");
    if m + q + 1 != cols.len() {
        return Err(parse_err(label, 1, "header columns must be k, u_*, y_*"));
    }
    let (mut u_d, mut y_d) = (Vec::new(), Vec::new());
    for (i, line) in lines {
        let row = parse_row(line, label, i + 1)?;
        if row.len() != cols.len() {
            return Err(parse_err(
                label,
                i + 1,
                format!("expected {} columns, found {}", cols.len(), row.len()),
            ));
        }
        if row[0] as usize != u_d.len() {
            return Err(parse_err(label, i + 1, format!("expected k = {}", u_d.len())));
        }
        u_d.push(DVector::from_column_slice(&row[1..1 + m]));
        y_d.push(DVector::from_column_slice(&row[1 + m..]));
    }
    DataRecord::new(u_d, y_d, m, q)
}

pub fn write_record(path: impl AsRef<Path>, rec: &DataRecord) -> Result<()> {
    Ok(std::fs::write(path, record_to_csv(rec))?)
}

pub fn read_record(path: impl AsRef<Path>) -> Result<DataRecord> {
    let p = path.as_ref();
    record_from_csv(&std::fs::read_to_string(p)?, &p.display().to_string())
}

/// `traj,k,u_0..,y_0..`, one row per step.
pub fn trajectories_to_csv(trajs: &[Trajectory], m: usize, q: usize) -> String {
    let mut out = String::new();
    let header: Vec<String> = ["traj".to_string(), "k".to_string()]
        .into_iter()
        .chain(header_names("u", m))
        .chain(header_names("y", q))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, tr) in trajs.iter().enumerate() {
        for (k, (u, y)) in tr.u_seq.iter().zip(&tr.y_seq).enumerate() {
            let _ = write!(out, "{i},{k}");
            for v in u.iter().chain(y.iter()) {
                let _ = write!(out, ",{}", num(*v));
            }
            out.push('\n');
        }
    }
    out
}

pub fn trajectories_from_csv(text: &str, label: &str) -> Result<Vec<Trajectory>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(label, 1, "missing header"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 || cols[0] != "traj" || cols[1] != "k" {
        return Err(parse_err(label, 1, "header must start with traj,k"));
    }
    let m = count_prefixed(&cols, "u_");
    let q = count_prefixed(&cols, "y_");
    let mut out: Vec<Trajectory> = Vec::new();
    for (i, line) in lines {
        let row = parse_row(line, label, i + 1)?;
        if row.len() != cols.len() {
            return Err(parse_err(label, i + 1, format!("expected {} columns", cols.len())));
        }
        let idx = row[0] as usize;
        if idx == out.len() {
            out.push(Trajectory::zeros(0, m, q));
        } else if idx + 1 != out.len() {
            return Err(parse_err(label, i + 1, "trajectory rows out of order"));
        }
        let tr = out.last_mut().expect("pushed above");
        if row[1] as usize != tr.len() {
            return Err(parse_err(label, i + 1, "step index out of order"));
        }
        tr.u_seq.push(DVector::from_column_slice(&row[2..2 + m]));
        tr.y_seq.push(DVector::from_column_slice(&row[2 + m..]));
    }
    Ok(out)
}

pub fn write_trajectories(path: impl AsRef<Path>, trajs: &[Trajectory], m: usize, q: usize) -> Result<()> {
    Ok(std::fs::write(path, trajectories_to_csv(trajs, m, q))?)
}

pub fn read_trajectories(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let p = path.as_ref();
    trajectories_from_csv(&std::fs::read_to_string(p)?, &p.display().to_string())
}

fn matrix_rows(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| num(m[(r, c)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Header `n=..,m=..,q=..` followed by `[A]`, `[B]`, `[C]` blocks of CSV rows.
pub fn system_to_text(sys: &LtiSystem) -> String {
    format!(
        "n={},m={},q={}\n[A]\n{}[B]\n{}[C]\n{}",
        sys.n(),
        sys.m(),
        sys.q(),
        matrix_rows(sys.a()),
        matrix_rows(sys.b()),
        matrix_rows(sys.c())
    )
}

pub fn system_from_text(text: &str, label: &str) -> Result<LtiSystem> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hl, header) = lines.next().ok_or_else(|| parse_err(label, 1, "missing header"))?;
    let mut dims = [None; 3];
    for field in header.split(',') {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| parse_err(label, hl, format!("expected key=value, got '{field}'")))?;
        let v: usize = v
            .trim()
            .parse()
            .map_err(|_| parse_err(label, hl, format!("bad integer '{v}'")))?;
        match k.trim() {
            "n" => dims[0] = Some(v),
            "m" => dims[1] = Some(v),
            "q" => dims[2] = Some(v),
            other => return Err(parse_err(label, hl, format!("unknown key '{other}'"))),
        }
    }
    let [n, m, q] = dims.map(|d| d.ok_or_else(|| parse_err(label, hl, "header needs n, m and q")));
    let (n, m, q) = (n?, m?, q?);
    let shapes = [("[A]", n, n), ("[B]", n, m), ("[C]", q, n)];
    let mut mats = Vec::new();
    let mut current: Option<(usize, usize, usize, Vec<f64>)> = None;
    let finish =
        |cur: Option<(usize, usize, usize, Vec<f64>)>, ln: usize, mats: &mut Vec<DMatrix<f64>>| -> Result<()> {
            if let Some((idx, r, c, data)) = cur {
                if data.len() != r * c {
                    return Err(parse_err(
                        label,
                        ln,
                        format!("block {} needs {r} rows of {c}", shapes[idx].0),
                    ));
                }
                mats.push(DMatrix::from_row_slice(r, c, &data));
            }
            Ok(())
        };
    let mut last_line = hl;
    for (ln, line) in lines {
        last_line = ln;
        if line.starts_with('[') {
            finish(current.take(), ln, &mut mats)?;
            let idx = mats.len();
            if idx >= 3 || line != shapes[idx].0 {
                return Err(parse_err(label, ln, format!("unexpected block {line}")));
            }
            current = Some((idx, shapes[idx].1, shapes[idx].2, Vec::new()));
            continue;
        }
        let (_, _, c, data) = current
            .as_mut()
            .ok_or_else(|| parse_err(label, ln, "row outside a matrix block"))?;
        let row = parse_row(line, label, ln)?;
        if row.len() != *c {
            return Err(parse_err(
                label,
                ln,
                format!("expected {c} columns, found {}", row.len()),
            ));
        }
        data.extend(row);
    }
    finish(current.take(), last_line, &mut mats)?;
    if mats.len() != 3 {
        return Err(parse_err(label, last_line, "expected [A], [B] and [C] blocks"));
    }
    let c = mats.pop().expect("three blocks");
    let b = mats.pop().expect("three blocks");
    let a = mats.pop().expect("three blocks");
    LtiSystem::new(a, b, c)
}

pub fn read_system(path: impl AsRef<Path>) -> Result<LtiSystem> {
    let p = path.as_ref();
    system_from_text(&std::fs::read_to_string(p)?, &p.display().to_string())
}

pub fn write_system(path: impl AsRef<Path>, sys: &LtiSystem) -> Result<()> {
    Ok(std::fs::write(path, system_to_text(sys))?)
}

/// Plain CSV matrix, one row per line.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    matrix_rows(m)
}

pub fn matrix_from_csv(text: &str, label: &str) -> Result<DMatrix<f64>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        rows.push(parse_row(line, label, i + 1)?);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if let Some(pos) = rows.iter().position(|r| r.len() != cols) {
        return Err(parse_err(label, pos + 1, "ragged matrix rows"));
    }
    let data: Vec<f64> = rows.concat();
    Ok(DMatrix::from_row_slice(rows.len(), cols, &data))
}

/// Header `t0=..,m=..,q=..`, then one flattened state per line.
pub fn extended_states_to_text(states: &[ExtendedState], t0: usize, m: usize, q: usize) -> String {
    let mut out = format!("t0={t0},m={m},q={q}\n");
    for s in states {
        let row: Vec<String> = s.flatten().iter().map(|v| num(*v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn extended_states_from_text(text: &str, label: &str) -> Result<Vec<ExtendedState>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(label, 1, "missing header"))?;
    let mut dims = [0usize; 3];
    for field in header.split(',') {
        let (k, v) = field.split_once('=').ok_or_else(|| parse_err(label, 1, "bad header"))?;
        let v: usize = v.trim().parse().map_err(|_| parse_err(label, 1, "bad header value"))?;
        match k.trim() {
            "t0" => dims[0] = v,
            "m" => dims[1] = v,
            "q" => dims[2] = v,
            other => return Err(parse_err(label, 1, format!("unknown key '{other}'"))),
        }
    }
    lines
        .map(|(i, l)| {
            let row = parse_row(l, label, i + 1)?;
            ExtendedState::from_flat(&row, dims[0], dims[1], dims[2])
                .map_err(|e| parse_err(label, i + 1, e.to_string()))
        })
        .collect()
}

pub fn training_log_to_csv(log: &TrainingLog) -> String {
    // No timings, so repeated runs with one seed give identical files.
    let mut out = String::from("episode,mean_cost,sigma,physical_samples,generated_samples\n");
    for e in &log.episodes {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            e.episode,
            num(e.mean_cost),
            num(e.sigma),
            e.physical_samples,
            e.generated_samples
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::reactor::{batch_reactor_system, Observation};
    use crate::hankel::collect_excitation_data;

    #[test]
    fn record_round_trip_is_bit_exact() {
        let sys = batch_reactor_system(Observation::Full);
        let rec = collect_excitation_data(&sys, &DVector::from_element(4, 0.3), 1.0, 50, 4).unwrap();
        let back = record_from_csv(&record_to_csv(&rec), "mem").unwrap();
        assert_eq!(back, rec);
        let empty = collect_excitation_data(&sys, &DVector::zeros(4), 1.0, 0, 4).unwrap();
        let back = record_from_csv(&record_to_csv(&empty), "mem").unwrap();
        assert_eq!(back.sample_count(), 0);
        assert_eq!((back.m(), back.q()), (2, 4));
    }

    #[test]
    fn record_errors_have_lines() {
        let text = "k,u_0,y_0\n0,1.0,2.0\n1,abc,2.0\n";
        assert!(matches!(record_from_csv(text, "t"), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn trajectory_round_trip() {
        let sys = batch_reactor_system(Observation::Partial);
        let w = vec![DVector::from_vec(vec![0.1, -0.7]); 6];
        let trs = vec![
            sys.rollout(&DVector::from_element(4, 1.0), &DMatrix::zeros(2, 2), &w)
                .unwrap(),
            sys.rollout(&DVector::from_element(4, -0.5), &DMatrix::from_element(2, 2, 0.1), &w)
                .unwrap(),
        ];
        assert_eq!(
            trajectories_from_csv(&trajectories_to_csv(&trs, 2, 2), "t").unwrap(),
            trs
        );
    }

    #[test]
    fn system_round_trip_and_errors() {
        let sys = batch_reactor_system(Observation::Partial);
        let back = system_from_text(&system_to_text(&sys), "t").unwrap();
        assert_eq!(back.a(), sys.a());
        assert_eq!(back.c(), sys.c());
        assert!(system_from_text("n=2,m=1,q=1\n[A]\n1,0\n0,1\n[B]\n1\n", "t").is_err());
        assert!(matches!(
            system_from_text("n=1,m=1,q=1\n[A]\n1,2\n", "t"),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn extended_states_round_trip() {
        let chi = ExtendedState::from_flat(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 2, 2).unwrap();
        let text = extended_states_to_text(std::slice::from_ref(&chi), 2, 2, 2);
        assert!(text.starts_with("t0=2,m=2,q=2\n"));
        assert_eq!(extended_states_from_text(&text, "t").unwrap(), vec![chi]);
    }

    #[test]
    fn matrix_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, -2.5, 3.0, 0.1, 1e-300, -7.0]);
        assert_eq!(matrix_from_csv(&matrix_to_csv(&m), "t").unwrap(), m);
    }
}
