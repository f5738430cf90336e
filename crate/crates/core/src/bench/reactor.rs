//! Discretized unstable batch reactor (4 states, 2 inputs).

use nalgebra::DMatrix;

use crate::lti::LtiSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observation {
    /// `C = I4`.
    Full,
    /// `C = [I2 0]`.
    Partial,
}

pub const SAMPLE_PERIOD_S: f64 = 0.1;

pub fn reactor_a() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[
            1.178, 0.001, 0.511, -0.403, //
            -0.051, 0.661, -0.011, 0.061, //
            0.076, 0.335, 0.560, 0.382, //
            0.0, 0.335, 0.089, 0.849,
        ],
    )
}

pub fn reactor_b() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        2,
        &[
            0.004, -0.087, //
            0.467, 0.001, //
            0.213, -0.235, //
            0.213, -0.016,
        ],
    )
}

pub fn batch_reactor_system(obs: Observation) -> LtiSystem {
    let c = match obs {
        Observation::Full => DMatrix::identity(4, 4),
        Observation::Partial => DMatrix::identity(2, 4),
    };
    LtiSystem::new(reactor_a(), reactor_b(), c).expect("reactor is observable")
}
