//! Leader–follower control stack: payload attitude (PAC) and cable attitude
//! (CAC) feedback for followers, small-angle thrust allocation, the onboard
//! PID attitude loop, and a point-to-point PD policy for the leader.
//!
//! Quadcopter 0 is the leader; followers are 1..n.

use nalgebra::{DMatrix, Matrix3, Matrix3x2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{quad_position, quad_velocity, SystemParams, SystemState};
use crate::error::ControlError;
use crate::linearization::{full_to_reduced, HoverEquilibrium, ReducedState};
use crate::manifold::{e3, RotationMatrix};

/// Default small-angle bound on commanded roll and pitch (rad).
pub const DEFAULT_MAX_TILT: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FollowerGains {
    /// Quadcopter index (≥ 1).
    pub quad: usize,
    #[serde(with = "crate::serde_rows")]
    pub k_eta: Matrix3<f64>,
    #[serde(with = "crate::serde_rows")]
    pub k_eta_dot: Matrix3<f64>,
    #[serde(with = "crate::serde_rows")]
    pub k_xi: Matrix3x2<f64>,
    #[serde(with = "crate::serde_rows")]
    pub k_xi_dot: Matrix3x2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidAxis {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Bound on |k_i ∫e dt| (N·m).
    pub integral_limit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttitudePidGains {
    pub roll: PidAxis,
    pub pitch: PidAxis,
    pub yaw: PidAxis,
}

impl Default for AttitudePidGains {
    /// Tuned for the 52 g quadcopter with J = diag(3e−5, 3e−5, 5e−5) to settle
    /// roll and pitch in about 0.15 s.
    fn default() -> Self {
        let tilt = PidAxis { kp: 0.033, ki: 0.005, kd: 0.0016, integral_limit: 0.002 };
        Self { roll: tilt, pitch: tilt, yaw: PidAxis { kp: 0.05, ki: 0.0, kd: 0.003, integral_limit: 0.002 } }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderPdGains {
    pub kp_xy: f64,
    pub kd_xy: f64,
    pub kp_z: f64,
    pub kd_z: f64,
}

impl Default for LeaderPdGains {
    fn default() -> Self {
        Self { kp_xy: 0.12, kd_xy: 0.14, kp_z: 0.6, kd_z: 0.4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlGains {
    pub followers: Vec<FollowerGains>,
    #[serde(default)]
    pub pid: AttitudePidGains,
    #[serde(default)]
    pub leader: LeaderPdGains,
    #[serde(default = "default_max_tilt")]
    pub max_tilt: f64,
    /// Optional human-model gain k_h (3 × 2(6+2n), row-major), used only by
    /// closed-loop analysis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_gain: Option<Vec<Vec<f64>>>,
}

fn default_max_tilt() -> f64 {
    DEFAULT_MAX_TILT
}

impl ControlGains {
    pub fn follower(&self, quad: usize) -> Option<&FollowerGains> {
        self.followers.iter().find(|f| f.quad == quad)
    }

    pub fn validate(&self, n: usize) -> Result<(), ControlError> {
        let bad = |m: String| Err(ControlError::InvalidGains(m));
        for f in &self.followers {
            if f.quad == 0 {
                return Err(ControlError::LeaderIndex(0));
            }
            if f.quad >= n {
                return Err(ControlError::Index { index: f.quad, n });
            }
            if self.followers.iter().filter(|g| g.quad == f.quad).count() > 1 {
                return bad(format!("duplicate gains for quad {}", f.quad));
            }
            let finite = f.k_eta.iter().chain(f.k_eta_dot.iter()).chain(f.k_xi.iter()).chain(f.k_xi_dot.iter()).all(|v| v.is_finite());
            if !finite {
                return bad(format!("non-finite gain for quad {}", f.quad));
            }
        }
        for (name, a) in [("roll", self.pid.roll), ("pitch", self.pid.pitch), ("yaw", self.pid.yaw)] {
            let v = [a.kp, a.ki, a.kd, a.integral_limit];
            if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return bad(format!("{name} PID gains must be finite and non-negative"));
            }
        }
        let l = self.leader;
        if [l.kp_xy, l.kd_xy, l.kp_z, l.kd_z].iter().any(|x| !x.is_finite() || *x < 0.0) {
            return bad("leader PD gains must be finite and non-negative".into());
        }
        if !(self.max_tilt > 0.0 && self.max_tilt < std::f64::consts::FRAC_PI_2) {
            return bad(format!("max_tilt {} outside (0, π/2)", self.max_tilt));
        }
        if let Some(kh) = &self.human_gain {
            let cols = ReducedState::dim(n);
            if kh.len() != 3 || kh.iter().any(|r| r.len() != cols || r.iter().any(|v| !v.is_finite())) {
                return bad(format!("human_gain must be 3×{cols} and finite"));
            }
        }
        Ok(())
    }

    /// Stacked feedback K (3n × 2(6+2n)) with δu = −K z. The leader rows are
    /// k_h when present, zero otherwise.
    pub fn stacked(&self, n: usize) -> DMatrix<f64> {
        let c = ReducedState::config_dim(n);
        let mut k = DMatrix::zeros(3 * n, 2 * c);
        if let Some(kh) = &self.human_gain {
            for (r, row) in kh.iter().enumerate() {
                for (col, v) in row.iter().enumerate() {
                    k[(r, col)] = *v;
                }
            }
        }
        for f in self.followers.iter().filter(|f| f.quad < n) {
            let r = 3 * f.quad;
            k.fixed_view_mut::<3, 3>(r, 3).copy_from(&f.k_eta);
            k.fixed_view_mut::<3, 3>(r, c + 3).copy_from(&f.k_eta_dot);
            k.fixed_view_mut::<3, 2>(r, 6 + 2 * f.quad).copy_from(&f.k_xi);
            k.fixed_view_mut::<3, 2>(r, c + 6 + 2 * f.quad).copy_from(&f.k_xi_dot);
        }
        k
    }

    /// Same gains with every follower matrix multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut g = self.clone();
        for f in &mut g.followers {
            f.k_eta *= s;
            f.k_eta_dot *= s;
            f.k_xi *= s;
            f.k_xi_dot *= s;
        }
        g
    }
}

/// Payload attitude feedback: −(K_η0 η0 + K_η̇0 η̇0).
pub fn pac(eta: &Vector3<f64>, eta_dot: &Vector3<f64>, gains: &FollowerGains) -> Vector3<f64> {
    -(gains.k_eta * eta + gains.k_eta_dot * eta_dot)
}

/// Cable attitude feedback: −(K_ξ Cᵀξ + K_ξ̇ Cᵀξ̇) for ξ ⊥ e₃.
pub fn cac(xi: &Vector3<f64>, xi_dot: &Vector3<f64>, gains: &FollowerGains) -> Vector3<f64> {
    let ct = |v: &Vector3<f64>| Vector2::new(v.x, v.y);
    -(gains.k_xi * ct(xi) + gains.k_xi_dot * ct(xi_dot))
}

/// PAC and CAC contributions for follower `i`, before adding u_e.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FollowerTerms {
    pub pac: Vector3<f64>,
    pub cac: Vector3<f64>,
}

pub fn follower_terms(state: &SystemState, eq: &HoverEquilibrium, gains: &ControlGains, i: usize) -> Result<FollowerTerms, ControlError> {
    let n = eq.n();
    if i == 0 {
        return Err(ControlError::LeaderIndex(i));
    }
    if i >= n {
        return Err(ControlError::Index { index: i, n });
    }
    let g = gains.follower(i).ok_or_else(|| ControlError::InvalidGains(format!("no gains for follower {i}")))?;
    let z = full_to_reduced(state, eq)?;
    let lift = |v: Vector2<f64>| Vector3::new(v.x, v.y, 0.0);
    Ok(FollowerTerms { pac: pac(&z.eta0(), &z.eta0_dot(), g), cac: cac(&lift(z.xi(i)), &lift(z.xi_dot(i)), g) })
}

/// Desired thrust vector u_d = u_e + δu_PAC + δu_CAC for follower `i`.
pub fn follower_outer_loop(state: &SystemState, eq: &HoverEquilibrium, gains: &ControlGains, i: usize) -> Result<Vector3<f64>, ControlError> {
    let t = follower_terms(state, eq, gains, i)?;
    Ok(eq.u[i] + t.pac + t.cac)
}

/// Attitude and thrust set-point for a follower's onboard loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FollowerCommand {
    pub theta: f64,
    pub phi: f64,
    pub thrust: f64,
    pub psi: f64,
}

/// The human (or scripted) channel for the leader.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeaderInput {
    pub phi: f64,
    pub theta: f64,
    pub thrust: f64,
}

impl LeaderInput {
    pub fn hover(thrust: f64) -> Self {
        Self { phi: 0.0, theta: 0.0, thrust }
    }

    pub fn as_command(&self) -> FollowerCommand {
        FollowerCommand { theta: self.theta, phi: self.phi, thrust: self.thrust, psi: 0.0 }
    }
}

/// Small-angle map from a desired thrust vector to (θ, φ, f) with ψ = 0.
///
/// Attitudes use the Z-Y-X convention R = R_z(ψ)R_y(θ)R_x(φ), for which
/// R e₃ ≈ (θ, −φ, 1): positive pitch pushes along +e₁ and negative roll
/// along +e₂. Returns the command and whether any channel was clamped.
pub fn allocate(u_d: &Vector3<f64>, mass: f64, gravity: f64, max_tilt: f64) -> (FollowerCommand, bool) {
    let mg = mass * gravity;
    let theta = u_d.x / mg;
    let phi = -u_d.y / mg;
    let clamp = |a: f64| a.clamp(-max_tilt, max_tilt);
    let thrust = u_d.z.max(0.0);
    let cmd = FollowerCommand { theta: clamp(theta), phi: clamp(phi), thrust, psi: 0.0 };
    let saturated = cmd.theta != theta || cmd.phi != phi || thrust != u_d.z;
    (cmd, saturated)
}

/// Z-Y-X Euler angles (φ, θ, ψ) of `r`.
pub fn euler_zyx(r: &RotationMatrix) -> Vector3<f64> {
    let m = &**r;
    let theta = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
    let phi = m[(2, 1)].atan2(m[(2, 2)]);
    let psi = m[(1, 0)].atan2(m[(0, 0)]);
    Vector3::new(phi, theta, psi)
}

/// Rotation from Z-Y-X Euler angles (φ, θ, ψ).
pub fn rotation_from_euler(phi: f64, theta: f64, psi: f64) -> RotationMatrix {
    let rz = RotationMatrix::about_axis(&Vector3::z(), psi);
    let ry = RotationMatrix::about_axis(&Vector3::y(), theta);
    let rx = RotationMatrix::about_axis(&Vector3::x(), phi);
    RotationMatrix::new(*rz * *ry * *rx).expect("product of rotations")
}

/// Euler-angle rates from body angular velocity.
pub fn euler_rates(angles: &Vector3<f64>, omega: &Vector3<f64>) -> Vector3<f64> {
    let (sp, cp) = angles.x.sin_cos();
    let (st, ct) = angles.y.sin_cos();
    let ct = if ct.abs() < 1e-6 { 1e-6_f64.copysign(ct) } else { ct };
    let (p, q, r) = (omega.x, omega.y, omega.z);
    Vector3::new(p + (q * sp + r * cp) * st / ct, q * cp - r * sp, (q * sp + r * cp) / ct)
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
    if w == -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        w
    }
}

/// Onboard PID attitude loop; holds only its integrator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttitudePid {
    integral: Vector3<f64>,
}

impl AttitudePid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.integral = Vector3::zeros();
    }

    /// Current integral contribution k_i ∫e dt per axis (N·m).
    pub fn integral_term(&self, gains: &AttitudePidGains) -> Vector3<f64> {
        let axes = [gains.roll, gains.pitch, gains.yaw];
        Vector3::from_fn(|k, _| axes[k].ki * self.integral[k])
    }

    /// Body moment from attitude error; the derivative acts on the measured
    /// Euler rates (desired rates are zero). The integral is clamped so that
    /// |k_i ∫e| never exceeds the axis limit.
    pub fn update(&mut self, r: &RotationMatrix, omega: &Vector3<f64>, cmd: &FollowerCommand, gains: &AttitudePidGains, dt: f64) -> Vector3<f64> {
        let angles = euler_zyx(r);
        let rates = euler_rates(&angles, omega);
        let err = Vector3::new(cmd.phi - angles.x, cmd.theta - angles.y, wrap_angle(cmd.psi - angles.z));
        let axes = [gains.roll, gains.pitch, gains.yaw];
        Vector3::from_fn(|k, _| {
            let a = axes[k];
            let mut i = self.integral[k] + err[k] * dt;
            if a.ki > 0.0 {
                let bound = a.integral_limit / a.ki;
                i = i.clamp(-bound, bound);
            } else {
                i = 0.0;
            }
            self.integral[k] = i;
            a.kp * err[k] + a.ki * i - a.kd * rates[k]
        })
    }
}

/// Point-to-point PD for the leader quadcopter toward `target`, mapped
/// through the same small-angle allocation as the followers.
pub fn leader_pd(
    state: &SystemState,
    params: &SystemParams,
    eq: &HoverEquilibrium,
    target: &Vector3<f64>,
    gains: &ControlGains,
) -> (LeaderInput, bool) {
    let x = quad_position(state, params, 0);
    let v = quad_velocity(state, params, 0);
    let e = target - x;
    let l = gains.leader;
    let du = Vector3::new(l.kp_xy * e.x - l.kd_xy * v.x, l.kp_xy * e.y - l.kd_xy * v.y, l.kp_z * e.z - l.kd_z * v.z);
    let u_d = eq.u[0] + du;
    let (cmd, sat) = allocate(&u_d, params.quads[0].mass, params.gravity, gains.max_tilt);
    (LeaderInput { phi: cmd.phi, theta: cmd.theta, thrust: cmd.thrust }, sat)
}

/// Thrust vector realised by a quadcopter with attitude `r` and thrust `f`.
pub fn thrust_vector(r: &RotationMatrix, f: f64) -> Vector3<f64> {
    **r * e3() * f
}
