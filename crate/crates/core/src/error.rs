use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("pair (A, C) is not observable: observability rank {rank} < n = {n} at order {order}")]
    Unobservable { rank: usize, n: usize, order: usize },

    #[error("window length t0 = {t0} is below the system lag {lag}")]
    WindowBelowLag { t0: usize, lag: usize },

    #[error("record of length {len} is shorter than Hankel depth {depth}")]
    RecordTooShort { len: usize, depth: usize },

    #[error("block range {k1}..={k2} outside depth {depth}")]
    BlockRange { k1: usize, k2: usize, depth: usize },

    #[error("G_theta is rank deficient: numerical rank {rank}, required {required}")]
    RankDeficient { rank: usize, required: usize },

    #[error("rank condition not met after {attempts} collection attempts (rank {rank}, required {required})")]
    ExcitationFailed {
        attempts: usize,
        rank: usize,
        required: usize,
    },

    #[error("RHS outside range of G_theta: relative residual {residual:.3e} exceeds {tolerance:.1e}")]
    OutsideRange { residual: f64, tolerance: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing config key: {0}")]
    MissingKey(String),

    #[error("training diverged at episode {episode}: mean batch cost {cost:e} above ceiling {ceiling:e}")]
    Diverged { episode: usize, cost: f64, ceiling: f64 },

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("network topology: {0}")]
    Topology(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(context: &'static str, expected: impl ToString, actual: impl ToString) -> Error {
    Error::Dimension {
        context,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
