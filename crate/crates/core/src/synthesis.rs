//! Default PAC/CAC gains from a quadratic regulator on the reduced model.

use nalgebra::{DMatrix, Matrix3, Matrix3x2};

use crate::controllers::{AttitudePidGains, ControlGains, FollowerGains, LeaderPdGains, DEFAULT_MAX_TILT};
use crate::dynamics::SystemParams;
use crate::error::{ControlError, LinearizationError};
use crate::linearization::{
    closed_loop, controllable_basis, linearize, translation_indices, ClosedLoopAnalysis, HoverEquilibrium, LinearModel,
    ReducedState, KRYLOV_TOL,
};

/// Diagonal weights of the regulator problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqrWeights {
    /// Payload and cable attitude errors.
    pub attitude: f64,
    /// Their rates.
    pub rate: f64,
    /// Input weight (R = input·I).
    pub input: f64,
    /// Required decay rate: after truncation to the PAC/CAC structure the
    /// gains are refined until every controlled eigenvalue has real part
    /// below −decay.
    pub decay: f64,
}

impl Default for LqrWeights {
    fn default() -> Self {
        Self { attitude: 10.0, rate: 1.0, input: 1.0, decay: 0.12 }
    }
}

fn riccati_err(msg: impl Into<String>) -> LinearizationError {
    LinearizationError::Riccati(msg.into())
}

/// Matrix sign function by scaled Newton iteration.
fn matrix_sign(h: &DMatrix<f64>) -> Result<DMatrix<f64>, LinearizationError> {
    let dim = h.nrows();
    let mut z = h.clone();
    for _ in 0..200 {
        let lu = z.clone().lu();
        let log_det: f64 = lu.u().diagonal().iter().map(|d| d.abs().ln()).sum();
        let inv = lu.try_inverse().ok_or_else(|| riccati_err("Hamiltonian has eigenvalues on the imaginary axis"))?;
        let c = (log_det / dim as f64).exp();
        let next = (&z / c + inv * c) * 0.5;
        let change = (&next - &z).norm();
        z = next;
        if !z.iter().all(|v| v.is_finite()) {
            return Err(riccati_err("sign iteration diverged"));
        }
        if change <= 1e-13 * z.norm() {
            return Ok(z);
        }
    }
    Err(riccati_err("sign iteration did not converge"))
}

/// Stabilising solution P of AᵀP + PA − PBR⁻¹BᵀP + Q = 0.
pub fn care(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>, LinearizationError> {
    let m = a.nrows();
    if a.ncols() != m || b.nrows() != m || q.shape() != (m, m) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(LinearizationError::Dimension("inconsistent CARE operands".into()));
    }
    let r_inv = r.clone().try_inverse().ok_or_else(|| riccati_err("R is singular"))?;
    let g = b * &r_inv * b.transpose();
    let mut h = DMatrix::zeros(2 * m, 2 * m);
    h.view_mut((0, 0), (m, m)).copy_from(a);
    h.view_mut((0, m), (m, m)).copy_from(&(-&g));
    h.view_mut((m, 0), (m, m)).copy_from(&(-q));
    h.view_mut((m, m), (m, m)).copy_from(&(-a.transpose()));
    let w = matrix_sign(&h)?;
    let eye = DMatrix::<f64>::identity(m, m);
    let mut lhs = DMatrix::zeros(2 * m, m);
    lhs.view_mut((0, 0), (m, m)).copy_from(&w.view((0, m), (m, m)));
    lhs.view_mut((m, 0), (m, m)).copy_from(&(w.view((m, m), (m, m)) + &eye));
    let mut rhs = DMatrix::zeros(2 * m, m);
    rhs.view_mut((0, 0), (m, m)).copy_from(&(-(w.view((0, 0), (m, m)) + &eye)));
    rhs.view_mut((m, 0), (m, m)).copy_from(&(-w.view((m, 0), (m, m))));
    let p = lhs.svd(true, true).solve(&rhs, 1e-14).map_err(riccati_err)?;
    let p = (&p + p.transpose()) * 0.5;

    let residual = a.transpose() * &p + &p * a - &p * &g * &p + q;
    let scale = q.norm() + (a.transpose() * &p).norm() + 1.0;
    if residual.norm() > 1e-8 * scale {
        return Err(riccati_err(format!("residual {:e} too large", residual.norm() / scale)));
    }
    Ok(p)
}

/// Regulator gain K = R⁻¹BᵀP.
pub fn lqr(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>, LinearizationError> {
    let p = care(a, b, q, r)?;
    let r_inv = r.clone().try_inverse().ok_or_else(|| riccati_err("R is singular"))?;
    Ok(r_inv * b.transpose() * p)
}

fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max)
}

/// Solves FᵀP + PF + W = 0 for Hurwitz F by the scaled sign-function
/// iteration: F_k → −I while W_k → 2P.
fn lyapunov(f: &DMatrix<f64>, w: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let m = f.nrows();
    let mut a = f.clone();
    let mut q = w.clone();
    for _ in 0..100 {
        let lu = a.clone().lu();
        let log_det: f64 = lu.u().diagonal().iter().map(|d| d.abs().ln()).sum();
        let inv = lu.try_inverse()?;
        let c = (-log_det / m as f64).exp();
        let next = (&a * c + &inv / c) * 0.5;
        q = (&q * c + inv.transpose() * &q * &inv / c) * 0.5;
        let change = (&next - &a).norm();
        a = next;
        if !a.iter().all(|v| v.is_finite()) {
            return None;
        }
        if change <= 1e-12 * a.norm() {
            let p = &q * 0.5;
            return Some((&p + p.transpose()) * 0.5);
        }
    }
    None
}

/// Quadratic cost tr(P) of the structured gain `k` (in the coordinates of
/// `v`'s rows) on the shifted controlled model, with its masked gradient.
fn structured_cost(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    v: &DMatrix<f64>,
    mask: &DMatrix<f64>,
    k: &DMatrix<f64>,
    alpha: f64,
) -> Option<(f64, DMatrix<f64>)> {
    let m = a.nrows();
    let eye = DMatrix::<f64>::identity(m, m);
    let kc = k * v;
    let f = a + &eye * alpha - b * &kc;
    if spectral_abscissa(&f) >= 0.0 {
        return None;
    }
    let p = lyapunov(&f, &(q + kc.transpose() * r * &kc))?;
    let l = lyapunov(&f.transpose(), &eye)?;
    let grad_c = (r * &kc - b.transpose() * &p) * l * 2.0;
    Some((p.trace(), (grad_c * v.transpose()).component_mul(mask)))
}

/// Moves a structured stabilising gain until the controlled spectrum lies
/// left of −decay, by descending the quadratic cost of A + αI − BK while α
/// tracks the current decay rate (the cost blows up at the α boundary, so
/// each pass pushes the slowest modes left).
fn refine_structured(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    v: &DMatrix<f64>,
    mask: &DMatrix<f64>,
    k0: DMatrix<f64>,
    decay: f64,
    also: &dyn Fn(&DMatrix<f64>) -> f64,
) -> Result<DMatrix<f64>, LinearizationError> {
    let abscissa = |k: &DMatrix<f64>| spectral_abscissa(&(a - b * (k * v)));
    // Armijo descent of the shifted cost; `accept` vets every trial gain
    let descend = |mut k: DMatrix<f64>, alpha: f64, iters: usize, accept: &dyn Fn(&DMatrix<f64>) -> bool| {
        let (mut cost, mut grad) = structured_cost(a, b, q, r, v, mask, &k, alpha)?;
        for _ in 0..iters {
            let gnorm = grad.norm();
            if gnorm < 1e-12 {
                break;
            }
            let mut step = 0.5 * k.norm().max(1.0) / gnorm;
            let mut moved = false;
            while step * gnorm > 1e-10 {
                let trial = &k - &grad * step;
                if let Some((c, g)) = structured_cost(a, b, q, r, v, mask, &trial, alpha) {
                    if c < cost - 1e-4 * step * gnorm * gnorm && accept(&trial) {
                        moved = cost - c > 1e-9 * cost;
                        k = trial;
                        cost = c;
                        grad = g;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }
        Some(k)
    };
    let mut k = k0;
    let start = abscissa(&k);
    if start >= 0.0 {
        return Err(riccati_err(format!("truncated regulator gain is not stabilising (abscissa {start})")));
    }
    for _ in 0..200 {
        let current = abscissa(&k);
        if current.max(also(&k)) <= -decay {
            // settle on the cheapest structured gain that keeps the decay rate
            let keeps = |t: &DMatrix<f64>| also(t) <= -decay;
            return Ok(descend(k.clone(), decay, POLISH_STEPS, &keeps).unwrap_or(k));
        }
        let alpha = (-current * 0.5 + decay * 0.5).min(-current * 0.98);
        k = descend(k, alpha, 40, &|_| true).ok_or_else(|| riccati_err("structured refinement lost stability"))?;
    }
    let reached = abscissa(&k).max(also(&k));
    Err(riccati_err(format!("structured gains reach decay rate {} of the required {decay}", -reached)))
}

/// Descent steps spent lowering the cost once the decay rate is met.
const POLISH_STEPS: usize = 200;

/// Octaves of attitude-loop speed covered by the gain continuation.
const CONTINUATION_OCTAVES: i32 = 6;

/// A model restricted to its controllable subspace, with the map from that
/// subspace to the measured (non-translation) coordinates.
struct Plant {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    out: DMatrix<f64>,
}

impl Plant {
    /// The first `measured` coordinates of `a` are fed back; the rest are
    /// internal states.
    fn new(a: DMatrix<f64>, b: DMatrix<f64>, q: &DMatrix<f64>, measured: usize) -> Self {
        let v = controllable_basis(&a, &b, KRYLOV_TOL);
        Self::with_basis(&a, &b, q, v, measured)
    }

    fn with_basis(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, v: DMatrix<f64>, measured: usize) -> Self {
        let out = v.rows(0, measured).into_owned();
        Self { a: v.transpose() * a * &v, b: v.transpose() * b, q: v.transpose() * q * &v, out }
    }

    fn abscissa(&self, k: &DMatrix<f64>) -> f64 {
        spectral_abscissa(&(&self.a - &self.b * (k * &self.out)))
    }

    fn refine(
        &self,
        r: &DMatrix<f64>,
        mask: &DMatrix<f64>,
        k: DMatrix<f64>,
        decay: f64,
        also: &dyn Fn(&DMatrix<f64>) -> f64,
    ) -> Result<DMatrix<f64>, LinearizationError> {
        refine_structured(&self.a, &self.b, &self.q, r, &self.out, mask, k, decay, also)
    }
}

/// Attitude PID with its natural frequency multiplied by `speed` at the same damping.
fn pid_faster(pid: &AttitudePidGains, speed: f64) -> AttitudePidGains {
    let axis = |a: crate::controllers::PidAxis| crate::controllers::PidAxis { kp: a.kp * speed * speed, kd: a.kd * speed, ..a };
    AttitudePidGains { roll: axis(pid.roll), pitch: axis(pid.pitch), yaw: axis(pid.yaw) }
}

/// Result of gain synthesis.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub followers: Vec<FollowerGains>,
    /// Unstructured regulator gain on the non-translation coordinates,
    /// one block row per follower.
    pub full_gain: DMatrix<f64>,
    /// Closed-loop analysis of the structured gains on the reduced model.
    pub analysis: ClosedLoopAnalysis,
    /// Largest real part of the controlled spectrum with the attitude loops
    /// in series.
    pub inner_loop_abscissa: f64,
    pub model: LinearModel,
}

/// Reduced model (on the coordinates kept in `a`, `b`) with each follower's
/// attitude loop in series with its horizontal thrust. Appends (φ, θ, φ̇, θ̇)
/// per follower; the realised horizontal thrust is f_e(θ, −φ) and the PD part
/// of the attitude PID drives (φ, θ) toward the allocated set-points.
/// `b` holds the follower inputs, three columns per follower.
fn with_attitude_loops(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    params: &SystemParams,
    eq: &HoverEquilibrium,
    pid: &AttitudePidGains,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = a.nrows();
    let followers = b.ncols() / 3;
    let dim = d + 4 * followers;
    let mut ax = DMatrix::zeros(dim, dim);
    let mut bx = DMatrix::zeros(dim, b.ncols());
    ax.view_mut((0, 0), (d, d)).copy_from(a);
    for j in 0..followers {
        let i = j + 1;
        let qp = &params.quads[i];
        let (f_e, mg) = (eq.thrust[i], qp.mass * params.gravity);
        let (jx, jy) = (qp.inertia[(0, 0)], qp.inertia[(1, 1)]);
        let s = d + 4 * j;
        ax.view_mut((0, s), (d, 1)).copy_from(&(b.column(3 * j + 1) * -f_e));
        ax.view_mut((0, s + 1), (d, 1)).copy_from(&(b.column(3 * j) * f_e));
        bx.view_mut((0, 3 * j + 2), (d, 1)).copy_from(&b.column(3 * j + 2));
        ax[(s, s + 2)] = 1.0;
        ax[(s + 1, s + 3)] = 1.0;
        ax[(s + 2, s)] = -pid.roll.kp / jx;
        ax[(s + 2, s + 2)] = -pid.roll.kd / jx;
        ax[(s + 3, s + 1)] = -pid.pitch.kp / jy;
        ax[(s + 3, s + 3)] = -pid.pitch.kd / jy;
        // φ_d = −u_y/(mg), θ_d = u_x/(mg)
        bx[(s + 2, 3 * j + 1)] = -pid.roll.kp / (jx * mg);
        bx[(s + 3, 3 * j)] = pid.pitch.kp / (jy * mg);
    }
    (ax, bx)
}

/// Follower gains with the PAC/CAC structure (payload attitude and the
/// follower's own cable). The regulator is designed on the reduced model
/// with the followers' attitude loops (gains `pid`) in series, truncated to
/// the structure and refined until both the reduced and the series closed
/// loops decay faster than `weights.decay`.
pub fn synthesize(
    params: &SystemParams,
    eq: &HoverEquilibrium,
    weights: LqrWeights,
    pid: &AttitudePidGains,
) -> Result<Synthesis, ControlError> {
    let n = params.n();
    let model = linearize(params, eq)?;
    let c = ReducedState::config_dim(n);
    let dim = 2 * c;
    let trans = translation_indices(n);
    let keep: Vec<usize> = (0..dim).filter(|j| !trans.contains(j)).collect();
    let follower_inputs: Vec<usize> = (3..3 * n).collect();
    if follower_inputs.is_empty() {
        let k = DMatrix::zeros(3 * n, dim);
        let analysis = closed_loop(&model, &k)?;
        let inner_loop_abscissa = analysis.max_real;
        return Ok(Synthesis {
            followers: Vec::new(),
            full_gain: DMatrix::zeros(0, keep.len()),
            analysis,
            inner_loop_abscissa,
            model,
        });
    }

    let a_y = model.a0.select_rows(&keep).select_columns(&keep);
    let b_y = model.b0.select_rows(&keep).select_columns(&follower_inputs);
    let q_y = DMatrix::from_fn(keep.len(), keep.len(), |i, j| {
        if i != j {
            0.0
        } else if keep[i] < c {
            weights.attitude
        } else {
            weights.rate
        }
    });
    let r = DMatrix::<f64>::identity(b_y.ncols(), b_y.ncols()) * weights.input;
    let d = keep.len();
    let plain = Plant::new(a_y.clone(), b_y.clone(), &q_y, d);
    let k_c = lqr(&plain.a, &plain.b, &plain.q, &r)?;
    let full_gain = k_c * plain.out.transpose();

    let at = |z: usize| keep.iter().position(|&k| k == z).expect("non-translation index");
    let mask = DMatrix::from_fn(full_gain.nrows(), full_gain.ncols(), |row, col| {
        let i = row / 3 + 1;
        let z = keep[col];
        let own = |z0: usize, len: usize| z >= z0 && z < z0 + len;
        let on = own(3, 3) || own(c + 3, 3) || own(6 + 2 * i, 2) || own(c + 6 + 2 * i, 2);
        if on {
            1.0
        } else {
            0.0
        }
    });
    let reduced = |k: &DMatrix<f64>| plain.abscissa(k);
    let none = |_: &DMatrix<f64>| f64::NEG_INFINITY;
    let structured = full_gain.component_mul(&mask);
    let mut refined = plain.refine(&r, &mask, structured, weights.decay, &none)?;

    // Continuation from an attitude loop 2^CONTINUATION_OCTAVES times faster
    // than `pid` (nearly the ideal thrust model) down to `pid` itself.
    let series = |speed: f64| {
        let (a, b) = with_attitude_loops(&a_y, &b_y, params, eq, &pid_faster(pid, speed));
        let q = DMatrix::from_fn(a.nrows(), a.nrows(), |i, j| if i == j && i < d { q_y[(i, i)] } else { 0.0 });
        // the attitude states are all reachable and only filter the inputs, so
        // the reachable space is the reduced one plus the attitude states
        let extra = a.nrows() - d;
        let mut v = DMatrix::zeros(a.nrows(), plain.out.ncols() + extra);
        v.view_mut((0, 0), (d, plain.out.ncols())).copy_from(&plain.out);
        v.view_mut((d, plain.out.ncols()), (extra, extra)).fill_with_identity();
        Plant::with_basis(&a, &b, &q, v, d)
    };
    let mut speed = 2f64.powi(CONTINUATION_OCTAVES);
    let mut plant = series(speed);
    if plant.abscissa(&refined) >= 0.0 {
        return Err(riccati_err("gains for the ideal thrust model do not tolerate a fast attitude loop").into());
    }
    refined = plant.refine(&r, &mask, refined, weights.decay, &reduced)?;
    while speed > 1.0 {
        let mut next = (speed / 2.0).max(1.0);
        let mut candidate = series(next);
        while candidate.abscissa(&refined) >= -0.5 * weights.decay {
            next = (next * speed).sqrt();
            if speed / next < 1.0 + 1e-3 {
                return Err(riccati_err(format!("continuation stalled at attitude-loop speed ×{speed}")).into());
            }
            candidate = series(next);
        }
        refined = candidate.refine(&r, &mask, refined, weights.decay, &reduced)?;
        speed = next;
        plant = candidate;
    }
    let inner_loop_abscissa = plant.abscissa(&refined);
    let followers: Vec<FollowerGains> = (1..n)
        .map(|i| {
            let row = 3 * (i - 1);
            let pick3 = |z0: usize| Matrix3::from_fn(|r, k| refined[(row + r, at(z0 + k))]);
            let pick2 = |z0: usize| Matrix3x2::from_fn(|r, k| refined[(row + r, at(z0 + k))]);
            FollowerGains {
                quad: i,
                k_eta: pick3(3),
                k_eta_dot: pick3(c + 3),
                k_xi: pick2(6 + 2 * i),
                k_xi_dot: pick2(c + 6 + 2 * i),
            }
        })
        .collect();

    let gains = ControlGains {
        followers: followers.clone(),
        pid: *pid,
        leader: LeaderPdGains::default(),
        max_tilt: DEFAULT_MAX_TILT,
        human_gain: None,
    };
    let analysis = closed_loop(&model, &gains.stacked(n))?;
    Ok(Synthesis { followers, full_gain, analysis, inner_loop_abscissa, model })
}

/// Default gain set: synthesised follower gains with default PID, leader
/// PD and tilt bound.
pub fn default_gains(params: &SystemParams, eq: &HoverEquilibrium) -> Result<ControlGains, ControlError> {
    let pid = AttitudePidGains::default();
    let s = synthesize(params, eq, LqrWeights::default(), &pid)?;
    Ok(ControlGains {
        followers: s.followers,
        pid,
        leader: LeaderPdGains::default(),
        max_tilt: DEFAULT_MAX_TILT,
        human_gain: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    #[test]
    fn scalar_care_matches_closed_form() {
        for (a, q) in [(1.0, 2.0), (-0.5, 3.0), (0.0, 1.0)] {
            let p = care(
                &DMatrix::from_element(1, 1, a),
                &DMatrix::from_element(1, 1, 1.0),
                &DMatrix::from_element(1, 1, q),
                &DMatrix::from_element(1, 1, 1.0),
            )
            .unwrap();
            assert_relative_eq!(p[(0, 0)], a + (a * a + q).sqrt(), epsilon = 1e-12);
        }
    }

    #[test]
    fn double_integrator_lqr() {
        // known solution for ẍ = u, Q = I, R = 1: K = [1, √3]
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let k = lqr(&a, &b, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1)).unwrap();
        assert_relative_eq!(k[(0, 0)], 1.0, epsilon = 1e-10);
        assert_relative_eq!(k[(0, 1)], 3f64.sqrt(), epsilon = 1e-10);
    }

    #[test]
    fn lyapunov_matches_kronecker_solution() {
        let f = DMatrix::from_row_slice(3, 3, &[-1.0, 2.0, 0.0, -0.5, -0.3, 1.0, 0.2, 0.0, -2.0]);
        let w = DMatrix::from_row_slice(3, 3, &[2.0, 0.1, 0.0, 0.1, 1.0, 0.3, 0.0, 0.3, 1.5]);
        let p = lyapunov(&f, &w).unwrap();
        let eye = DMatrix::<f64>::identity(3, 3);
        let op = eye.kronecker(&f.transpose()) + f.transpose().kronecker(&eye);
        let x = op.lu().solve(&DVector::from_column_slice((-&w).as_slice())).unwrap();
        let expected = DMatrix::from_column_slice(3, 3, x.as_slice());
        assert!((&p - &expected).amax() <= 1e-10, "{p}\n{expected}");
    }

    #[test]
    fn uncontrollable_unstable_mode_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        assert!(care(&a, &b, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1)).is_err());
    }
}
