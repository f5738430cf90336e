//! Historical data collection and block-Hankel stacking.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::linalg::{normalize_columns, numerical_rank, singular_values, vstack, RankTolerance};
use crate::lti::LtiSystem;

/// Monotone counter of samples drawn from the physical plant.
#[derive(Debug, Default)]
pub struct SampleCounter(AtomicU64);

impl SampleCounter {
    pub const fn new() -> Self {
        SampleCounter(AtomicU64::new(0))
    }
    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }
    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

static PHYSICAL_SAMPLES: SampleCounter = SampleCounter::new();

/// Process-wide count of plant samples consumed by data collection.
pub fn physical_samples() -> &'static SampleCounter {
    &PHYSICAL_SAMPLES
}

/// Historical input/output record of length L.
#[derive(Debug, Clone, PartialEq)]
pub struct DataRecord {
    pub u_d: Vec<DVector<f64>>,
    pub y_d: Vec<DVector<f64>>,
    m: usize,
    q: usize,
}

impl DataRecord {
    pub fn new(u_d: Vec<DVector<f64>>, y_d: Vec<DVector<f64>>, m: usize, q: usize) -> Result<Self> {
        if u_d.len() != y_d.len() {
            return Err(dim_err("data record", u_d.len(), y_d.len()));
        }
        if let Some(u) = u_d.iter().find(|u| u.len() != m) {
            return Err(dim_err("data record input", m, u.len()));
        }
        if let Some(y) = y_d.iter().find(|y| y.len() != q) {
            return Err(dim_err("data record output", q, y.len()));
        }
        Ok(DataRecord { u_d, y_d, m, q })
    }

    pub fn sample_count(&self) -> usize {
        self.u_d.len()
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn q(&self) -> usize {
        self.q
    }

    /// Multiplies every sample by `factor`.
    pub fn scaled(&self, factor: f64) -> DataRecord {
        DataRecord {
            u_d: self.u_d.iter().map(|v| v * factor).collect(),
            y_d: self.y_d.iter().map(|v| v * factor).collect(),
            m: self.m,
            q: self.q,
        }
    }
}

/// `(m + 1) t - 1 + n`: shortest record whose depth-t Hankel matrix can have
/// rank `n + t m`.
pub fn min_data_length(n: usize, m: usize, t: usize) -> usize {
    (m + 1) * t + n - 1
}

/// Open-loop run of the plant with i.i.d. uniform inputs in
/// `[-input_scale, input_scale]`.
pub fn collect_excitation_data(
    sys: &LtiSystem,
    x0: &DVector<f64>,
    input_scale: f64,
    length: usize,
    seed: u64,
) -> Result<DataRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = sys.m();
    let inputs: Vec<DVector<f64>> = (0..length)
        .map(|_| DVector::from_fn(m, |_, _| rng.random_range(-input_scale..=input_scale)))
        .collect();
    let (_, outputs) = sys.simulate(x0, &inputs)?;
    physical_samples().add(length as u64);
    DataRecord::new(inputs, outputs, m, sys.q())
}

/// Random unit-norm initial state drawn from `seed`.
pub fn random_unit_state(n: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_1a7e);
    loop {
        let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let nrm = v.norm();
        if nrm > 1e-3 {
            return v / nrm;
        }
    }
}

#[derive(Debug, Clone)]
pub struct CollectionSettings {
    pub input_scale: f64,
    pub length: usize,
    pub depth: usize,
    pub retries: usize,
    /// Smallest accepted `sigma_{n+Tm} / sigma_max` of the column-normalized
    /// Hankel matrix. Zero accepts any record that passes the rank test.
    pub min_margin: f64,
    pub tol: RankTolerance,
}

impl CollectionSettings {
    pub fn new(length: usize, depth: usize) -> Self {
        CollectionSettings {
            input_scale: 1.0,
            length,
            depth,
            retries: 5,
            min_margin: 1e-12,
            tol: RankTolerance::Auto,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CertifiedData {
    pub record: DataRecord,
    pub hankel: HankelMatrix,
    pub certificate: RankCertificate,
    pub seed: u64,
    pub attempts: usize,
}

/// Collects data until the Hankel rank condition holds, re-seeding on failure.
pub fn collect_certified(sys: &LtiSystem, settings: &CollectionSettings, seed: u64) -> Result<CertifiedData> {
    let n = sys.n();
    let mut last = (0, n + settings.depth * sys.m());
    for attempt in 0..=settings.retries {
        let s = seed.wrapping_add((attempt as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let x0 = random_unit_state(n, s);
        let record = collect_excitation_data(sys, &x0, settings.input_scale, settings.length, s)?;
        let hankel = build_hankel(&record, settings.depth, n)?;
        let cert = rank_certificate_with(&hankel, n, settings.tol);
        last = (cert.rank, cert.required);
        if cert.ok && cert.margin >= settings.min_margin {
            return Ok(CertifiedData {
                record,
                hankel,
                certificate: cert,
                seed: s,
                attempts: attempt + 1,
            });
        }
    }
    Err(Error::ExcitationFailed {
        attempts: settings.retries + 1,
        rank: last.0,
        required: last.1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Input,
    Output,
}

/// Depth-T block-Hankel matrices of a record; column j holds the window that
/// starts at sample j.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelMatrix {
    pub h_u: DMatrix<f64>,
    pub h_y: DMatrix<f64>,
    depth: usize,
    n_hint: usize,
    m: usize,
    q: usize,
}

pub fn build_hankel(data: &DataRecord, depth: usize, n_hint: usize) -> Result<HankelMatrix> {
    let len = data.sample_count();
    if depth == 0 || len < depth {
        return Err(Error::RecordTooShort { len, depth });
    }
    let cols = len - depth + 1;
    let stack = |seq: &[DVector<f64>], d: usize| {
        let mut h = DMatrix::zeros(depth * d, cols);
        for k in 0..depth {
            for j in 0..cols {
                h.view_mut((k * d, j), (d, 1)).copy_from(&seq[k + j]);
            }
        }
        h
    };
    Ok(HankelMatrix {
        h_u: stack(&data.u_d, data.m()),
        h_y: stack(&data.y_d, data.q()),
        depth,
        n_hint,
        m: data.m(),
        q: data.q(),
    })
}

impl HankelMatrix {
    pub fn depth(&self) -> usize {
        self.depth
    }
    pub fn n_hint(&self) -> usize {
        self.n_hint
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn q(&self) -> usize {
        self.q
    }
    pub fn cols(&self) -> usize {
        self.h_u.ncols()
    }

    /// `[h_u; h_y]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        vstack(&[&self.h_u, &self.h_y])
    }

    /// Rows of block indices `k1..=k2` of one channel.
    pub fn block_rows(&self, channel: Channel, k1: usize, k2: usize) -> Result<DMatrix<f64>> {
        if k1 > k2 || k2 >= self.depth {
            return Err(Error::BlockRange {
                k1,
                k2,
                depth: self.depth,
            });
        }
        let (h, d) = match channel {
            Channel::Input => (&self.h_u, self.m),
            Channel::Output => (&self.h_y, self.q),
        };
        Ok(h.rows(k1 * d, (k2 - k1 + 1) * d).into_owned())
    }

    /// Column `j` split into per-step input and output vectors.
    pub fn column_trajectory(&self, j: usize) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let u = (0..self.depth)
            .map(|k| self.h_u.view((k * self.m, j), (self.m, 1)).column(0).into_owned())
            .collect();
        let y = (0..self.depth)
            .map(|k| self.h_y.view((k * self.q, j), (self.q, 1)).column(0).into_owned())
            .collect();
        (u, y)
    }
}

/// Result of the rank test `rank [h_u; h_y] = n + T m`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankCertificate {
    pub ok: bool,
    pub rank: usize,
    pub required: usize,
    /// Rank of `[h_u; first output block row]`, reported when outputs are
    /// full states.
    pub lemma_rank: Option<usize>,
    /// `sigma_required / sigma_max` of the column-normalized matrix, or zero
    /// when the rank is short.
    pub margin: f64,
}

pub fn rank_certificate(h: &HankelMatrix, n: usize) -> RankCertificate {
    rank_certificate_with(h, n, RankTolerance::Auto)
}

/// Rank is taken on the column-normalized stack, which leaves the exact rank
/// unchanged and makes the test independent of the record's scale.
pub fn rank_certificate_with(h: &HankelMatrix, n: usize, tol: RankTolerance) -> RankCertificate {
    let required = n + h.depth * h.m;
    let stacked = normalize_columns(&h.stacked());
    let s = singular_values(&stacked);
    let (rank, margin) = if s.is_empty() || s[0] == 0.0 {
        (0, 0.0)
    } else {
        let cut = tol.cutoff(stacked.nrows(), stacked.ncols(), s[0]);
        let rank = s.iter().filter(|&&v| v > cut).count();
        let margin = if rank >= required && required > 0 {
            s[required - 1] / s[0]
        } else {
            0.0
        };
        (rank, margin)
    };
    let lemma_rank = (h.q == n).then(|| {
        let first = h.h_y.rows(0, h.q).into_owned();
        numerical_rank(&normalize_columns(&vstack(&[&h.h_u, &first])), tol)
    });
    RankCertificate {
        ok: rank == required,
        rank,
        required,
        lemma_rank,
        margin,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::reactor::{batch_reactor_system, Observation};

    fn scalar_record(vals: &[f64]) -> DataRecord {
        let u = vals.iter().map(|v| DVector::from_element(1, *v)).collect();
        let y = vals.iter().map(|v| DVector::from_element(1, 10.0 * v)).collect();
        DataRecord::new(u, y, 1, 1).unwrap()
    }

    #[test]
    fn min_length_formula() {
        assert_eq!(min_data_length(4, 2, 30), 93);
        assert_eq!(min_data_length(32, 20, 22), 493);
        assert_eq!(min_data_length(4, 2, 31), 96);
        assert_eq!(min_data_length(1, 1, 1), 2);
    }

    #[test]
    fn scalar_hankel_layout() {
        let h = build_hankel(&scalar_record(&[1.0, 2.0, 3.0, 4.0]), 2, 1).unwrap();
        assert_eq!(h.h_u, DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 3.0, 4.0]));
        assert_eq!(h.cols(), 3);
    }

    #[test]
    fn depth_equal_to_length_gives_single_column() {
        let h = build_hankel(&scalar_record(&[1.0, 2.0, 3.0]), 3, 1).unwrap();
        assert_eq!(h.h_u.as_slice(), &[1.0, 2.0, 3.0]);
        assert!(matches!(
            build_hankel(&scalar_record(&[1.0]), 2, 1),
            Err(Error::RecordTooShort { len: 1, depth: 2 })
        ));
    }

    #[test]
    fn block_rows_ranges() {
        let h = build_hankel(&scalar_record(&[1.0, 2.0, 3.0, 4.0, 5.0]), 3, 1).unwrap();
        assert_eq!(
            h.block_rows(Channel::Output, 0, 0).unwrap(),
            h.h_y.rows(0, 1).into_owned()
        );
        assert_eq!(h.block_rows(Channel::Input, 0, 2).unwrap(), h.h_u);
        let b = h.block_rows(Channel::Input, 1, 1).unwrap();
        for j in 0..h.cols() {
            assert_eq!(b[(0, j)], (1 + j + 1) as f64);
        }
        assert!(h.block_rows(Channel::Input, 2, 3).is_err());
        assert!(h.block_rows(Channel::Input, 2, 1).is_err());
    }

    #[test]
    fn empty_collection() {
        let sys = batch_reactor_system(Observation::Full);
        let rec = collect_excitation_data(&sys, &DVector::zeros(4), 1.0, 0, 1).unwrap();
        assert_eq!(rec.sample_count(), 0);
    }

    #[test]
    fn zero_data_fails_certificate() {
        let rec = DataRecord::new(vec![DVector::zeros(2); 10], vec![DVector::zeros(4); 10], 2, 4).unwrap();
        let h = build_hankel(&rec, 3, 4).unwrap();
        let c = rank_certificate(&h, 4);
        assert_eq!(c.rank, 0);
        assert!(!c.ok);
    }

    #[test]
    fn too_few_columns_fail_certificate() {
        let sys = batch_reactor_system(Observation::Full);
        let x0 = random_unit_state(4, 9);
        let rec = collect_excitation_data(&sys, &x0, 1.0, 80, 9).unwrap();
        let h = build_hankel(&rec, 30, 4).unwrap();
        let c = rank_certificate(&h, 4);
        assert!(c.rank <= h.cols());
        assert!(!c.ok);
    }

    #[test]
    fn reactor_record_certifies() {
        let sys = batch_reactor_system(Observation::Full);
        let data = collect_certified(&sys, &CollectionSettings::new(93, 30), 7).unwrap();
        assert_eq!(data.hankel.h_u.shape(), (60, 64));
        assert_eq!(data.hankel.h_y.shape(), (120, 64));
        assert_eq!(data.certificate.rank, 64);
        assert_eq!(data.certificate.lemma_rank, Some(64));
        assert!(data.certificate.ok);
    }

    #[test]
    fn counter_has_no_lost_updates() {
        let counter = SampleCounter::new();
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    for _ in 0..1000 {
                        counter.add(1);
                    }
                });
            }
        });
        assert_eq!(counter.get(), 8000);
    }
}
