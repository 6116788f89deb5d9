//! Discrete-time error dynamics of a following CAV.
//!
//! The follower state tracks gap errors and speed differences with respect to
//! both the platoon leader and the immediate predecessor, plus the ego
//! acceleration, which follows the command through a first-order lag:
//!
//! ```text
//! x(k+1) = A x(k) + B u(k) + C w(k),   w = [a_leader, a_pred]
//! ```

use nalgebra::{Matrix5, Matrix5x2, Vector2, Vector5};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 5;
pub const DISTURBANCE_DIM: usize = 2;
/// Row of the predecessor gap error inside [`State`] (0-based).
pub const GAP_ERR_PRED_INDEX: usize = 2;

/// Follower error state. Field order is fixed and matches the vector layout.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    /// Desired minus actual headway to the leader (m).
    pub gap_err_leader: f64,
    /// Leader speed minus ego speed (m/s).
    pub dv_leader: f64,
    /// Desired minus actual headway to the predecessor (m).
    pub gap_err_pred: f64,
    /// Predecessor speed minus ego speed (m/s).
    pub dv_pred: f64,
    /// Ego acceleration (m/s²).
    pub accel: f64,
}

impl State {
    pub const ZERO: State = State {
        gap_err_leader: 0.0,
        dv_leader: 0.0,
        gap_err_pred: 0.0,
        dv_pred: 0.0,
        accel: 0.0,
    };

    pub fn to_vector(&self) -> Vector5<f64> {
        Vector5::new(
            self.gap_err_leader,
            self.dv_leader,
            self.gap_err_pred,
            self.dv_pred,
            self.accel,
        )
    }

    pub fn from_vector(v: &Vector5<f64>) -> Self {
        State {
            gap_err_leader: v[0],
            dv_leader: v[1],
            gap_err_pred: v[2],
            dv_pred: v[3],
            accel: v[4],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }
}

/// Commanded acceleration (m/s²).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub u_a: f64,
}

/// Additive disturbance: leader and predecessor accelerations (m/s²).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Disturbance {
    pub a_leader: f64,
    pub a_pred: f64,
}

impl Disturbance {
    pub fn new(a_leader: f64, a_pred: f64) -> Self {
        Disturbance { a_leader, a_pred }
    }

    pub fn to_vector(&self) -> Vector2<f64> {
        Vector2::new(self.a_leader, self.a_pred)
    }
}

/// Which input matrix to use for the ego command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMatrixForm {
    /// Command enters only through the actuation lag.
    #[default]
    LagOnly,
    /// Also feeds the command directly into the predecessor speed difference.
    /// Kept for comparison runs only.
    LiteralPrinted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelMatrices {
    pub a: Matrix5<f64>,
    pub b: Vector5<f64>,
    pub c: Matrix5x2<f64>,
    pub dt: f64,
    pub tau_a: f64,
}

impl ModelMatrices {
    pub fn new(dt: f64, tau_a: f64) -> Result<Self> {
        Self::with_input_form(dt, tau_a, InputMatrixForm::LagOnly)
    }

    pub fn with_input_form(dt: f64, tau_a: f64, form: InputMatrixForm) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::param("dt", format!("must be positive, got {dt}")));
        }
        if !(tau_a > 0.0 && tau_a.is_finite()) {
            return Err(Error::param("tau_a", format!("must be positive, got {tau_a}")));
        }

        let mut jac = Matrix5::<f64>::zeros();
        jac[(0, 1)] = -1.0;
        jac[(1, 4)] = -1.0;
        jac[(2, 3)] = -1.0;
        jac[(3, 4)] = -1.0;
        jac[(4, 4)] = -1.0 / tau_a;
        let a = Matrix5::identity() + jac * dt;

        let mut b = Vector5::zeros();
        b[4] = dt / tau_a;
        if form == InputMatrixForm::LiteralPrinted {
            b[3] = dt;
        }

        let mut c = Matrix5x2::zeros();
        c[(1, 0)] = dt;
        c[(3, 1)] = dt;

        Ok(ModelMatrices { a, b, c, dt, tau_a })
    }

    /// One step of the linear model. No saturation is applied here.
    pub fn step(&self, x: &State, u: ControlInput, w: Disturbance) -> State {
        let next = self.a * x.to_vector() + self.b * u.u_a + self.c * w.to_vector();
        State::from_vector(&next)
    }
}

pub fn build_matrices(dt: f64, tau_a: f64) -> Result<ModelMatrices> {
    ModelMatrices::new(dt, tau_a)
}
