//! Equations of motion for n quadcopters carrying a rigid payload on taut,
//! massless cables attached at each quadcopter's centre of mass.
//!
//! Coordinates live on ℝ³ × SO(3) × (S² × SO(3))ⁿ. Quadcopter positions are
//! derived: `x_i = x0 + R0 ρ_i − l_i q_i`. The translational part is solved as
//! one block-coupled linear system in (ẍ0, Ω̇0, q̈_1 … q̈_n); each quadcopter's
//! attitude then evolves independently under its commanded body moment.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::DynamicsError;
use crate::manifold::{e3, hat, RotationMatrix, UnitVector};

/// Smallest accepted |pivot| ratio in the coupled solve.
const PIVOT_RATIO_MIN: f64 = 1e-13;

/// Default quadcopter inertia (kg·m²) for a 13 cm, 52 g frame.
pub fn default_quad_inertia() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(3e-5, 3e-5, 5e-5))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadParams {
    /// kg
    pub mass: f64,
    /// kg·m², body frame
    #[serde(with = "crate::serde_rows")]
    pub inertia: Matrix3<f64>,
    /// m
    pub cable_length: f64,
    /// Cable attachment on the payload, payload body frame (m).
    pub attachment: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    pub payload_mass: f64,
    #[serde(with = "crate::serde_rows")]
    pub payload_inertia: Matrix3<f64>,
    pub quads: Vec<QuadParams>,
    pub gravity: f64,
}

fn is_spd(m: &Matrix3<f64>) -> bool {
    (m - m.transpose()).abs().max() <= 1e-12 * m.abs().max().max(1e-300) && m.cholesky().is_some()
}

impl SystemParams {
    pub fn n(&self) -> usize {
        self.quads.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.payload_mass + self.quads.iter().map(|q| q.mass).sum::<f64>()
    }

    /// Quadcopter masses must be positive; the payload mass may be zero
    /// (payload-free limit) as long as its inertia stays positive definite.
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |msg: String| Err(DynamicsError::InvalidParams(msg));
        if self.quads.is_empty() {
            return bad("at least one quadcopter is required".into());
        }
        if !(self.payload_mass >= 0.0 && self.payload_mass.is_finite()) {
            return bad(format!("payload mass {} must be ≥ 0", self.payload_mass));
        }
        if !is_spd(&self.payload_inertia) {
            return bad("payload inertia must be symmetric positive definite".into());
        }
        if !(self.gravity.is_finite() && self.gravity >= 0.0) {
            return bad(format!("gravity {} must be finite and ≥ 0", self.gravity));
        }
        for (i, q) in self.quads.iter().enumerate() {
            if !(q.mass > 0.0 && q.mass.is_finite()) {
                return bad(format!("quad {i}: mass {} must be > 0", q.mass));
            }
            if !(q.cable_length > 0.0 && q.cable_length.is_finite()) {
                return bad(format!("quad {i}: cable length {} must be > 0", q.cable_length));
            }
            if !is_spd(&q.inertia) {
                return bad(format!("quad {i}: inertia must be symmetric positive definite"));
            }
            if !q.attachment.iter().all(|x| x.is_finite()) {
                return bad(format!("quad {i}: attachment must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CableState {
    pub q: UnitVector,
    /// Cable angular velocity, kept perpendicular to `q`.
    pub omega: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadState {
    pub r: RotationMatrix,
    /// Body-frame angular velocity.
    pub omega: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub x0: Vector3<f64>,
    pub v0: Vector3<f64>,
    pub r0: RotationMatrix,
    /// Payload body-frame angular velocity.
    pub omega0: Vector3<f64>,
    pub cables: Vec<CableState>,
    pub quads: Vec<QuadState>,
}

impl SystemState {
    /// Everything at rest: level quads, given payload pose and cable directions.
    pub fn at_rest(x0: Vector3<f64>, r0: RotationMatrix, cable_dirs: &[UnitVector]) -> Self {
        Self {
            x0,
            v0: Vector3::zeros(),
            r0,
            omega0: Vector3::zeros(),
            cables: cable_dirs
                .iter()
                .map(|&q| CableState { q, omega: Vector3::zeros() })
                .collect(),
            quads: cable_dirs
                .iter()
                .map(|_| QuadState { r: RotationMatrix::identity(), omega: Vector3::zeros() })
                .collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.cables.len()
    }

    pub fn validate(&self, params: &SystemParams) -> Result<(), DynamicsError> {
        let n = params.n();
        if self.cables.len() != n || self.quads.len() != n {
            return Err(DynamicsError::InvalidState(format!(
                "state has {} cables / {} quads, params have {n}",
                self.cables.len(),
                self.quads.len()
            )));
        }
        for (i, c) in self.cables.iter().enumerate() {
            if c.omega.dot(&c.q).abs() > 1e-8 {
                return Err(DynamicsError::InvalidState(format!(
                    "cable {i}: ω·q = {:e} (must be ⟂)",
                    c.omega.dot(&c.q)
                )));
            }
        }
        let finite = self.x0.iter().chain(self.v0.iter()).chain(self.omega0.iter()).all(|x| x.is_finite())
            && self.cables.iter().all(|c| c.omega.iter().all(|x| x.is_finite()))
            && self.quads.iter().all(|q| q.omega.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(DynamicsError::InvalidState("non-finite component".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadInput {
    /// Collective thrust along the body third axis (N), never negative.
    pub thrust: f64,
    /// Body moment (N·m).
    pub moment: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActuationCommand {
    /// Fictitious 3-vector thrust per quadcopter (world frame, N); quadcopter
    /// attitude dynamics are frozen.
    Reduced(Vec<Vector3<f64>>),
    /// Scalar thrust along b₃ plus body moment per quadcopter.
    Full(Vec<QuadInput>),
}

impl ActuationCommand {
    pub fn zero_reduced(n: usize) -> Self {
        Self::Reduced(vec![Vector3::zeros(); n])
    }

    fn check(&self, n: usize) -> Result<(), DynamicsError> {
        let len = match self {
            Self::Reduced(u) => u.len(),
            Self::Full(f) => f.len(),
        };
        if len != n {
            return Err(DynamicsError::InvalidCommand(format!("{len} inputs for {n} quadcopters")));
        }
        if let Self::Full(f) = self {
            for (i, qi) in f.iter().enumerate() {
                if !(qi.thrust >= 0.0 && qi.thrust.is_finite()) || !qi.moment.iter().all(|x| x.is_finite()) {
                    return Err(DynamicsError::InvalidCommand(format!(
                        "quad {i}: thrust {} must be finite and ≥ 0",
                        qi.thrust
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CableDerivative {
    pub q_dot: Vector3<f64>,
    pub q_ddot: Vector3<f64>,
    pub omega_dot: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadDerivative {
    pub r_dot: Matrix3<f64>,
    pub omega_dot: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives {
    pub x0_dot: Vector3<f64>,
    pub x0_ddot: Vector3<f64>,
    pub r0_dot: Matrix3<f64>,
    pub omega0_dot: Vector3<f64>,
    pub cables: Vec<CableDerivative>,
    pub quads: Vec<QuadDerivative>,
    /// Cable tension (N); negative means the taut-cable assumption is violated.
    pub tensions: Vec<f64>,
    /// World-frame thrust vector applied at each quadcopter.
    pub thrust_vectors: Vec<Vector3<f64>>,
}

/// Position of quadcopter `i`: x0 + R0 ρ_i − l_i q_i.
pub fn quad_position(state: &SystemState, params: &SystemParams, i: usize) -> Vector3<f64> {
    let qp = &params.quads[i];
    state.x0 + *state.r0 * qp.attachment - *state.cables[i].q * qp.cable_length
}

pub fn quad_velocity(state: &SystemState, params: &SystemParams, i: usize) -> Vector3<f64> {
    let qp = &params.quads[i];
    let c = &state.cables[i];
    let q_dot = c.omega.cross(&c.q);
    state.v0 + *state.r0 * state.omega0.cross(&qp.attachment) - q_dot * qp.cable_length
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Energy {
    pub kinetic: f64,
    pub potential: f64,
}

impl Energy {
    pub fn total(&self) -> f64 {
        self.kinetic + self.potential
    }
}

pub fn energy(state: &SystemState, params: &SystemParams) -> Energy {
    let g = params.gravity;
    let mut kinetic = 0.5 * params.payload_mass * state.v0.norm_squared()
        + 0.5 * state.omega0.dot(&(params.payload_inertia * state.omega0));
    let mut potential = params.payload_mass * g * state.x0.z;
    for (i, qp) in params.quads.iter().enumerate() {
        let v = quad_velocity(state, params, i);
        let om = &state.quads[i].omega;
        kinetic += 0.5 * qp.mass * v.norm_squared() + 0.5 * om.dot(&(qp.inertia * om));
        potential += qp.mass * g * quad_position(state, params, i).z;
    }
    Energy { kinetic, potential }
}

/// m0 v0 + Σ m_i ẋ_i
pub fn linear_momentum(state: &SystemState, params: &SystemParams) -> Vector3<f64> {
    (0..params.n()).fold(state.v0 * params.payload_mass, |acc, i| {
        acc + quad_velocity(state, params, i) * params.quads[i].mass
    })
}

/// Unconstrained representation used inside the integrator stages, where
/// unit-norm and orthogonality only hold approximately.
#[derive(Debug, Clone)]
struct RawState {
    x0: Vector3<f64>,
    v0: Vector3<f64>,
    r0: Matrix3<f64>,
    omega0: Vector3<f64>,
    q: Vec<Vector3<f64>>,
    w: Vec<Vector3<f64>>,
    r: Vec<Matrix3<f64>>,
    om: Vec<Vector3<f64>>,
}

impl RawState {
    fn from_state(s: &SystemState) -> Self {
        Self {
            x0: s.x0,
            v0: s.v0,
            r0: *s.r0,
            omega0: s.omega0,
            q: s.cables.iter().map(|c| *c.q).collect(),
            w: s.cables.iter().map(|c| c.omega).collect(),
            r: s.quads.iter().map(|q| *q.r).collect(),
            om: s.quads.iter().map(|q| q.omega).collect(),
        }
    }

    fn dim(n: usize) -> usize {
        18 + 18 * n
    }

    fn pack(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::dim(self.q.len()));
        out.extend_from_slice(self.x0.as_slice());
        out.extend_from_slice(self.v0.as_slice());
        out.extend_from_slice(self.r0.as_slice());
        out.extend_from_slice(self.omega0.as_slice());
        for i in 0..self.q.len() {
            out.extend_from_slice(self.q[i].as_slice());
            out.extend_from_slice(self.w[i].as_slice());
        }
        for i in 0..self.r.len() {
            out.extend_from_slice(self.r[i].as_slice());
            out.extend_from_slice(self.om[i].as_slice());
        }
        out
    }

    fn unpack(n: usize, y: &[f64]) -> Self {
        let v3 = |k: usize| Vector3::from_column_slice(&y[k..k + 3]);
        let m3 = |k: usize| Matrix3::from_column_slice(&y[k..k + 9]);
        let cable = |i: usize| 18 + 6 * i;
        let quad = |i: usize| 18 + 6 * n + 12 * i;
        Self {
            x0: v3(0),
            v0: v3(3),
            r0: m3(6),
            omega0: v3(15),
            q: (0..n).map(|i| v3(cable(i))).collect(),
            w: (0..n).map(|i| v3(cable(i) + 3)).collect(),
            r: (0..n).map(|i| m3(quad(i))).collect(),
            om: (0..n).map(|i| v3(quad(i) + 9)).collect(),
        }
    }
}

/// Solution of the coupled translational/payload system.
pub(crate) struct CoupledSolution {
    pub x0_ddot: Vector3<f64>,
    pub omega0_dot: Vector3<f64>,
    pub q_ddot: Vec<Vector3<f64>>,
    pub tensions: Vec<f64>,
}

/// Assembles and solves the (6 + 3n)-dimensional linear system for
/// (ẍ0, Ω̇0, q̈_i) given world-frame thrust vectors `u`.
pub(crate) fn solve_coupled(
    params: &SystemParams,
    r0: &Matrix3<f64>,
    omega0: &Vector3<f64>,
    q: &[Vector3<f64>],
    w: &[Vector3<f64>],
    u: &[Vector3<f64>],
) -> Result<CoupledSolution, DynamicsError> {
    let n = params.n();
    let dim = 6 + 3 * n;
    let g = params.gravity;
    let j0 = &params.payload_inertia;
    let ge3 = e3() * g;
    let om_hat = hat(omega0);
    let om_hat2 = om_hat * om_hat;

    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DVector::<f64>::zeros(dim);

    let mut trans_rhs = -ge3 * params.total_mass();
    let mut rot_rhs = -omega0.cross(&(j0 * omega0));
    let a_tt = Matrix3::identity() * params.total_mass();
    let mut a_tr = Matrix3::zeros();
    let mut a_rt = Matrix3::zeros();
    let mut a_rr = *j0;

    for i in 0..n {
        let qp = &params.quads[i];
        let (mi, li) = (qp.mass, qp.cable_length);
        let rho = &qp.attachment;
        let rho_hat = hat(rho);
        let qi = &q[i];
        let q_hat = hat(qi);
        let q_hat2 = q_hat * q_hat;
        let q_dot = w[i].cross(qi);
        let centripetal = r0 * om_hat2 * rho;
        let r0_rho_hat = r0 * rho_hat;
        let col = 6 + 3 * i;

        a_tr -= r0_rho_hat * mi;
        trans_rhs += u[i] - centripetal * mi;
        a.fixed_view_mut::<3, 3>(0, col).copy_from(&(Matrix3::identity() * (-mi * li)));

        a_rt += rho_hat * r0.transpose() * mi;
        a_rr -= rho_hat * rho_hat * mi;
        rot_rhs += rho_hat * r0.transpose() * (u[i] - ge3 * mi) - rho_hat * om_hat2 * rho * mi;
        a.fixed_view_mut::<3, 3>(3, col)
            .copy_from(&(rho_hat * r0.transpose() * (-mi * li)));

        a.fixed_view_mut::<3, 3>(col, 0).copy_from(&(q_hat2 * mi));
        a.fixed_view_mut::<3, 3>(col, 3).copy_from(&(-q_hat2 * r0_rho_hat * mi));
        a.fixed_view_mut::<3, 3>(col, col)
            .copy_from(&(Matrix3::identity() * (mi * li)));
        let rhs = q_hat2 * (u[i] - centripetal * mi - ge3 * mi) - qi * (mi * li * q_dot.norm_squared());
        b.fixed_rows_mut::<3>(col).copy_from(&rhs);
    }
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&a_tt);
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&a_tr);
    a.fixed_view_mut::<3, 3>(3, 0).copy_from(&a_rt);
    a.fixed_view_mut::<3, 3>(3, 3).copy_from(&a_rr);
    b.fixed_rows_mut::<3>(0).copy_from(&trans_rhs);
    b.fixed_rows_mut::<3>(3).copy_from(&rot_rhs);

    let lu = a.clone().full_piv_lu();
    let diag = lu.u().diagonal();
    let max = diag.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let min = diag.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    let ratio = if max > 0.0 { min / max } else { 0.0 };
    if !(ratio >= PIVOT_RATIO_MIN) {
        return Err(DynamicsError::SingularMassMatrix { ratio });
    }
    let x = lu
        .solve(&b)
        .ok_or(DynamicsError::SingularMassMatrix { ratio })?;

    let x0_ddot = x.fixed_rows::<3>(0).into_owned();
    let omega0_dot = x.fixed_rows::<3>(3).into_owned();
    let q_ddot: Vec<Vector3<f64>> = (0..n).map(|i| x.fixed_rows::<3>(6 + 3 * i).into_owned()).collect();
    let tensions = (0..n)
        .map(|i| {
            let qp = &params.quads[i];
            let xi_ddot = x0_ddot - r0 * hat(&qp.attachment) * omega0_dot + r0 * om_hat2 * qp.attachment
                - q_ddot[i] * qp.cable_length;
            q[i].dot(&(xi_ddot * qp.mass - u[i] + ge3 * qp.mass)) / q[i].norm_squared()
        })
        .collect();
    Ok(CoupledSolution { x0_ddot, omega0_dot, q_ddot, tensions })
}

fn raw_derivatives(raw: &RawState, cmd: &ActuationCommand, params: &SystemParams) -> Result<Derivatives, DynamicsError> {
    let n = params.n();
    let thrust_vectors: Vec<Vector3<f64>> = match cmd {
        ActuationCommand::Reduced(u) => u.clone(),
        ActuationCommand::Full(f) => (0..n).map(|i| raw.r[i] * e3() * f[i].thrust).collect(),
    };
    let sol = solve_coupled(params, &raw.r0, &raw.omega0, &raw.q, &raw.w, &thrust_vectors)?;
    let cables = (0..n)
        .map(|i| CableDerivative {
            q_dot: raw.w[i].cross(&raw.q[i]),
            q_ddot: sol.q_ddot[i],
            omega_dot: raw.q[i].cross(&sol.q_ddot[i]),
        })
        .collect();
    let quads = (0..n)
        .map(|i| match cmd {
            ActuationCommand::Reduced(_) => QuadDerivative { r_dot: Matrix3::zeros(), omega_dot: Vector3::zeros() },
            ActuationCommand::Full(f) => {
                let j = &params.quads[i].inertia;
                let om = &raw.om[i];
                let rhs = f[i].moment - om.cross(&(j * om));
                QuadDerivative {
                    r_dot: raw.r[i] * hat(om),
                    omega_dot: j.cholesky().expect("validated SPD inertia").solve(&rhs),
                }
            }
        })
        .collect();
    Ok(Derivatives {
        x0_dot: raw.v0,
        x0_ddot: sol.x0_ddot,
        r0_dot: raw.r0 * hat(&raw.omega0),
        omega0_dot: sol.omega0_dot,
        cables,
        quads,
        tensions: sol.tensions,
        thrust_vectors,
    })
}

/// Right-hand side of the equations of motion at `state`.
pub fn accelerations(state: &SystemState, cmd: &ActuationCommand, params: &SystemParams) -> Result<Derivatives, DynamicsError> {
    cmd.check(params.n())?;
    if state.n() != params.n() || state.quads.len() != params.n() {
        return Err(DynamicsError::InvalidState(format!(
            "state has {} cables, params have {}",
            state.n(),
            params.n()
        )));
    }
    raw_derivatives(&RawState::from_state(state), cmd, params)
}

fn pack_derivatives(d: &Derivatives) -> Vec<f64> {
    let n = d.cables.len();
    let mut out = Vec::with_capacity(RawState::dim(n));
    out.extend_from_slice(d.x0_dot.as_slice());
    out.extend_from_slice(d.x0_ddot.as_slice());
    out.extend_from_slice(d.r0_dot.as_slice());
    out.extend_from_slice(d.omega0_dot.as_slice());
    for c in &d.cables {
        out.extend_from_slice(c.q_dot.as_slice());
        out.extend_from_slice(c.omega_dot.as_slice());
    }
    for q in &d.quads {
        out.extend_from_slice(q.r_dot.as_slice());
        out.extend_from_slice(q.omega_dot.as_slice());
    }
    out
}

/// Maps a raw integrator state back onto the manifold.
fn project(raw: &RawState) -> Result<SystemState, DynamicsError> {
    let cables = raw
        .q
        .iter()
        .zip(&raw.w)
        .map(|(q, w)| {
            let q = UnitVector::new_normalize(*q)?;
            let omega = w - *q * w.dot(&q);
            Ok(CableState { q, omega })
        })
        .collect::<Result<Vec<_>, DynamicsError>>()?;
    let quads = raw
        .r
        .iter()
        .zip(&raw.om)
        .map(|(r, om)| Ok(QuadState { r: RotationMatrix::from_polar(*r)?, omega: *om }))
        .collect::<Result<Vec<_>, DynamicsError>>()?;
    Ok(SystemState {
        x0: raw.x0,
        v0: raw.v0,
        r0: RotationMatrix::from_polar(raw.r0)?,
        omega0: raw.omega0,
        cables,
        quads,
    })
}

pub const MAX_STEP: f64 = 0.01;

/// One fixed RK4 step with the command held constant, followed by projection
/// of every cable direction, cable rate and rotation back onto its manifold.
pub fn step(state: &SystemState, cmd: &ActuationCommand, params: &SystemParams, dt: f64) -> Result<SystemState, DynamicsError> {
    if !(dt > 0.0 && dt <= MAX_STEP) {
        return Err(DynamicsError::InvalidStep(dt));
    }
    cmd.check(params.n())?;
    let n = params.n();
    let raw = RawState::from_state(state);
    let y0 = raw.pack();
    let f = |y: &[f64]| -> Result<Vec<f64>, DynamicsError> {
        let d = raw_derivatives(&RawState::unpack(n, y), cmd, params)?;
        Ok(pack_derivatives(&d))
    };
    let axpy = |y: &[f64], h: f64, k: &[f64]| -> Vec<f64> { y.iter().zip(k).map(|(a, b)| a + h * b).collect() };
    let k1 = f(&y0)?;
    let k2 = f(&axpy(&y0, 0.5 * dt, &k1))?;
    let k3 = f(&axpy(&y0, 0.5 * dt, &k2))?;
    let k4 = f(&axpy(&y0, dt, &k3))?;
    let y1: Vec<f64> = (0..y0.len())
        .map(|j| y0[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]))
        .collect();
    if !y1.iter().all(|x| x.is_finite()) {
        return Err(DynamicsError::NonFinite { dump: format!("{state:?}") });
    }
    project(&RawState::unpack(n, &y1))
}
