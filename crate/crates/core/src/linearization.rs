//! Hover equilibrium, the reduced perturbation chart, numerical
//! linearization and closed-loop spectra.
//!
//! Reduced coordinates are `z = [δx0, η0, Cᵀξ_1 … Cᵀξ_n, δẋ0, η̇0, Cᵀξ̇_1 … Cᵀξ̇_n]`
//! with R0 = exp(η0) and ξ_i = e₃ × q_i, so that Cᵀξ_i = (−q_y, q_x).

use nalgebra::{Complex, DMatrix, DVector, Matrix3, Matrix3x2, Vector2, Vector3};
use std::fmt::Write as _;

use crate::dynamics::{solve_coupled, CableState, QuadState, SystemParams, SystemState};
use crate::error::{LinearizationError, ManifoldError};
use crate::manifold::{
    e3, exp_so3, log_so3, right_jacobian, right_jacobian_inv, right_jacobian_inv_dot, RotationMatrix, UnitVector,
};

/// Default central-difference step on the reduced chart.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative deviation of the one-sided difference
/// quotients from the central one.
pub const FD_ASYMMETRY_LIMIT: f64 = 1e-4;
/// Largest net payload moment (N·m) accepted for the equal-share hover.
pub const EQUILIBRIUM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct HoverEquilibrium {
    pub state: SystemState,
    /// World-frame thrust vectors u_{i,e}.
    pub u: Vec<Vector3<f64>>,
    /// Scalar thrusts f_{i,e}.
    pub thrust: Vec<f64>,
}

impl HoverEquilibrium {
    pub fn n(&self) -> usize {
        self.u.len()
    }

    pub fn x0(&self) -> Vector3<f64> {
        self.state.x0
    }
}

/// Level payload, vertical cables, level quads at rest, each quad lifting
/// its own weight plus an equal share of the payload.
///
/// The equal split only balances the payload moment when the attachment
/// points are centred on the payload's centre of mass in the horizontal
/// plane; otherwise this returns an error carrying the residual.
pub fn build_equilibrium(params: &SystemParams, x0_e: Vector3<f64>) -> Result<HoverEquilibrium, LinearizationError> {
    params.validate()?;
    let n = params.n();
    let down = UnitVector::new(-e3())?;
    let state = SystemState::at_rest(x0_e, RotationMatrix::identity(), &vec![down; n]);
    let thrust: Vec<f64> = params
        .quads
        .iter()
        .map(|q| (q.mass + params.payload_mass / n as f64) * params.gravity)
        .collect();
    let u: Vec<Vector3<f64>> = thrust.iter().map(|f| e3() * *f).collect();
    // net cable moment on the level payload from equal tensions m0·g/n
    let share = params.payload_mass * params.gravity / n as f64;
    let moment: Vector3<f64> = params.quads.iter().map(|q| q.attachment.cross(&(e3() * share))).sum();
    let residual = moment.norm();
    if residual > EQUILIBRIUM_TOL {
        return Err(LinearizationError::NotEquilibrium { residual });
    }
    Ok(HoverEquilibrium { state, u, thrust })
}

/// Norm of all accelerations at the equilibrium under u_e.
pub fn equilibrium_residual(params: &SystemParams, eq: &HoverEquilibrium) -> Result<f64, LinearizationError> {
    let s = &eq.state;
    let q: Vec<Vector3<f64>> = s.cables.iter().map(|c| *c.q).collect();
    let w: Vec<Vector3<f64>> = s.cables.iter().map(|c| c.omega).collect();
    let sol = solve_coupled(params, &s.r0, &s.omega0, &q, &w, &eq.u)?;
    let mut sum = sol.x0_ddot.norm_squared() + sol.omega0_dot.norm_squared();
    for a in &sol.q_ddot {
        sum += a.norm_squared();
    }
    Ok(sum.sqrt())
}

/// Point in the reduced perturbation chart.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedState {
    n: usize,
    pub z: DVector<f64>,
}

impl ReducedState {
    pub fn config_dim(n: usize) -> usize {
        6 + 2 * n
    }

    pub fn dim(n: usize) -> usize {
        2 * Self::config_dim(n)
    }

    pub fn zeros(n: usize) -> Self {
        Self { n, z: DVector::zeros(Self::dim(n)) }
    }

    pub fn from_vector(n: usize, z: DVector<f64>) -> Result<Self, LinearizationError> {
        if z.len() != Self::dim(n) {
            return Err(LinearizationError::Dimension(format!(
                "reduced state for n={n} has {} entries, got {}",
                Self::dim(n),
                z.len()
            )));
        }
        Ok(Self { n, z })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn v3(&self, k: usize) -> Vector3<f64> {
        self.z.fixed_rows::<3>(k).into_owned()
    }

    fn v2(&self, k: usize) -> Vector2<f64> {
        self.z.fixed_rows::<2>(k).into_owned()
    }

    pub fn delta_x0(&self) -> Vector3<f64> {
        self.v3(0)
    }

    pub fn eta0(&self) -> Vector3<f64> {
        self.v3(3)
    }

    /// Cᵀξ_i.
    pub fn xi(&self, i: usize) -> Vector2<f64> {
        self.v2(6 + 2 * i)
    }

    pub fn delta_v0(&self) -> Vector3<f64> {
        self.v3(Self::config_dim(self.n))
    }

    pub fn eta0_dot(&self) -> Vector3<f64> {
        self.v3(Self::config_dim(self.n) + 3)
    }

    pub fn xi_dot(&self, i: usize) -> Vector2<f64> {
        self.v2(Self::config_dim(self.n) + 6 + 2 * i)
    }
}

fn chart_xi(v: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(-v.y, v.x)
}

/// Map a full state into the reduced chart around `eq`. Quadcopter
/// attitudes are not part of the reduced state.
pub fn full_to_reduced(state: &SystemState, eq: &HoverEquilibrium) -> Result<ReducedState, LinearizationError> {
    let n = eq.n();
    if state.n() != n {
        return Err(LinearizationError::Dimension(format!("state has {} cables, equilibrium {n}", state.n())));
    }
    let eta = log_so3(&state.r0).map_err(|e| match e {
        ManifoldError::LogBranch { angle } => {
            LinearizationError::ChartBoundary(format!("payload rotation angle {angle} at the log branch cut"))
        }
        other => other.into(),
    })?;
    let eta_dot = right_jacobian_inv(&eta) * state.omega0;
    let mut r = ReducedState::zeros(n);
    let c = ReducedState::config_dim(n);
    r.z.fixed_rows_mut::<3>(0).copy_from(&(state.x0 - eq.x0()));
    r.z.fixed_rows_mut::<3>(3).copy_from(&eta);
    r.z.fixed_rows_mut::<3>(c).copy_from(&state.v0);
    r.z.fixed_rows_mut::<3>(c + 3).copy_from(&eta_dot);
    for (i, cable) in state.cables.iter().enumerate() {
        let q = *cable.q;
        if q.z >= 0.0 {
            return Err(LinearizationError::ChartBoundary(format!("cable {i} is not below its quadcopter (q_z = {})", q.z)));
        }
        let q_dot = cable.omega.cross(&q);
        r.z.fixed_rows_mut::<2>(6 + 2 * i).copy_from(&chart_xi(&q));
        r.z.fixed_rows_mut::<2>(c + 6 + 2 * i).copy_from(&chart_xi(&q_dot));
    }
    Ok(r)
}

/// Cable direction and rate for chart coordinates (a, b) = Cᵀξ and their rates.
fn lift_cable(xi: &Vector2<f64>, xi_dot: &Vector2<f64>) -> Result<(Vector3<f64>, Vector3<f64>), LinearizationError> {
    let (a, b) = (xi.x, xi.y);
    let s = 1.0 - a * a - b * b;
    if s <= 0.0 {
        return Err(LinearizationError::ChartBoundary(format!("|Cᵀξ| = {} reaches the equator", (a * a + b * b).sqrt())));
    }
    let q = Vector3::new(b, -a, -s.sqrt());
    let (qx_dot, qy_dot) = (xi_dot.y, -xi_dot.x);
    let qz_dot = -(q.x * qx_dot + q.y * qy_dot) / q.z;
    Ok((q, Vector3::new(qx_dot, qy_dot, qz_dot)))
}

/// Inverse of [`full_to_reduced`]; quadcopters are placed level and at rest.
pub fn reduced_to_full(z: &ReducedState, eq: &HoverEquilibrium) -> Result<SystemState, LinearizationError> {
    let n = z.n();
    let eta = z.eta0();
    let mut cables = Vec::with_capacity(n);
    for i in 0..n {
        let (q, q_dot) = lift_cable(&z.xi(i), &z.xi_dot(i))?;
        cables.push(CableState { q: UnitVector::new_normalize(q)?, omega: q.cross(&q_dot) });
    }
    Ok(SystemState {
        x0: eq.x0() + z.delta_x0(),
        v0: z.delta_v0(),
        r0: exp_so3(&eta),
        omega0: right_jacobian(&eta) * z.eta0_dot(),
        cables,
        quads: vec![QuadState { r: RotationMatrix::identity(), omega: Vector3::zeros() }; n],
    })
}

/// ż in reduced coordinates under thrust vectors u_e + δu (reduced mode).
pub fn reduced_dynamics(
    params: &SystemParams,
    eq: &HoverEquilibrium,
    z: &ReducedState,
    du: &[Vector3<f64>],
) -> Result<DVector<f64>, LinearizationError> {
    let n = z.n();
    if du.len() != n || eq.n() != n || params.n() != n {
        return Err(LinearizationError::Dimension(format!("δu has {} entries for n = {n}", du.len())));
    }
    let eta = z.eta0();
    let eta_dot = z.eta0_dot();
    let r0 = exp_so3(&eta);
    let omega0 = right_jacobian(&eta) * eta_dot;
    let mut q = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for i in 0..n {
        let (qi, qi_dot) = lift_cable(&z.xi(i), &z.xi_dot(i))?;
        w.push(qi.cross(&qi_dot));
        q.push(qi);
    }
    let u: Vec<Vector3<f64>> = eq.u.iter().zip(du).map(|(a, b)| a + b).collect();
    let sol = solve_coupled(params, &r0, &omega0, &q, &w, &u)?;

    let c = ReducedState::config_dim(n);
    let mut zd = DVector::zeros(2 * c);
    zd.rows_mut(0, c).copy_from(&z.z.rows(c, c));
    zd.fixed_rows_mut::<3>(c).copy_from(&sol.x0_ddot);
    let eta_ddot = right_jacobian_inv_dot(&eta, &eta_dot) * omega0 + right_jacobian_inv(&eta) * sol.omega0_dot;
    zd.fixed_rows_mut::<3>(c + 3).copy_from(&eta_ddot);
    for i in 0..n {
        zd.fixed_rows_mut::<2>(c + 6 + 2 * i).copy_from(&chart_xi(&sol.q_ddot[i]));
    }
    Ok(zd)
}

/// M ẍ + G x = B δu together with its first-order form ż = A0 z + B0 δu.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub n: usize,
    pub m: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub a0: DMatrix<f64>,
    pub b0: DMatrix<f64>,
}

pub fn linearize(params: &SystemParams, eq: &HoverEquilibrium) -> Result<LinearModel, LinearizationError> {
    linearize_with_step(params, eq, FD_STEP)
}

/// Central-difference linearization with step `h`, also checking that the
/// one-sided quotients agree (a large gap means `h` is outside the range
/// where the dynamics look linear).
pub fn linearize_with_step(params: &SystemParams, eq: &HoverEquilibrium, h: f64) -> Result<LinearModel, LinearizationError> {
    let n = eq.n();
    let c = ReducedState::config_dim(n);
    let dim = 2 * c;
    let zero_du = vec![Vector3::zeros(); n];
    let z0 = ReducedState::zeros(n);
    let f0 = reduced_dynamics(params, eq, &z0, &zero_du)?;

    let column = |col: usize, plus: DVector<f64>, minus: DVector<f64>| -> Result<DVector<f64>, LinearizationError> {
        let lower = |v: &DVector<f64>| v.rows(c, c).into_owned();
        let (fp, fm, f) = (lower(&plus), lower(&minus), lower(&f0));
        let central = (&fp - &fm) / (2.0 * h);
        // each one-sided quotient differs from the central one by this much
        let asym = (&fp + &fm - &f * 2.0).amax() / (2.0 * h);
        let rel = asym / central.amax().max(1.0);
        if rel > FD_ASYMMETRY_LIMIT {
            return Err(LinearizationError::FiniteDifference { column: col, asym: rel, limit: FD_ASYMMETRY_LIMIT });
        }
        Ok(central)
    };

    let mut a0 = DMatrix::zeros(dim, dim);
    a0.view_mut((0, c), (c, c)).fill_with_identity();
    for j in 0..dim {
        let mut zp = z0.clone();
        zp.z[j] = h;
        let mut zm = z0.clone();
        zm.z[j] = -h;
        let plus = reduced_dynamics(params, eq, &zp, &zero_du)?;
        let minus = reduced_dynamics(params, eq, &zm, &zero_du)?;
        let col = column(j, plus, minus)?;
        a0.view_mut((c, j), (c, 1)).copy_from(&col);
    }

    let mut b0 = DMatrix::zeros(dim, 3 * n);
    for j in 0..3 * n {
        let mut dp = zero_du.clone();
        dp[j / 3][j % 3] = h;
        let mut dm = zero_du.clone();
        dm[j / 3][j % 3] = -h;
        let plus = reduced_dynamics(params, eq, &z0, &dp)?;
        let minus = reduced_dynamics(params, eq, &z0, &dm)?;
        let col = column(dim + j, plus, minus)?;
        b0.view_mut((c, j), (c, 1)).copy_from(&col);
    }

    let m = mass_matrix(params);
    let g = -(&m * a0.view((c, 0), (c, c)));
    let b = &m * b0.view((c, 0), (c, 3 * n));
    Ok(LinearModel { n, m, g, b, a0, b0 })
}

/// Kinetic-energy Hessian at the hover equilibrium in reduced velocities.
pub fn mass_matrix(params: &SystemParams) -> DMatrix<f64> {
    let n = params.n();
    let c = ReducedState::config_dim(n);
    let mut m = DMatrix::zeros(c, c);
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * params.payload_mass));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&params.payload_inertia);
    // q̇ = P Cᵀξ̇ at q = −e₃
    let p = Matrix3x2::new(0.0, 1.0, -1.0, 0.0, 0.0, 0.0);
    for (i, qp) in params.quads.iter().enumerate() {
        // ẋ_i = J_i ṡ
        let mut jac = DMatrix::zeros(3, c);
        jac.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
        jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-crate::manifold::hat(&qp.attachment)));
        jac.fixed_view_mut::<3, 2>(0, 6 + 2 * i).copy_from(&(p * -qp.cable_length));
        m += jac.transpose() * jac * qp.mass;
    }
    m
}

impl LinearModel {
    pub fn config_dim(&self) -> usize {
        ReducedState::config_dim(self.n)
    }

    /// Plain-text export: a header line, then each matrix as
    /// `<name> <rows> <cols>` followed by its rows, one per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("tetherlift-linear-model 1\nn {}\n", self.n);
        for (name, mat) in self.named() {
            let _ = writeln!(out, "{name} {} {}", mat.nrows(), mat.ncols());
            for r in 0..mat.nrows() {
                let row: Vec<String> = (0..mat.ncols()).map(|k| format!("{:.17e}", mat[(r, k)])).collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
        out
    }

    fn named(&self) -> [(&'static str, &DMatrix<f64>); 5] {
        [("A0", &self.a0), ("B0", &self.b0), ("M", &self.m), ("G", &self.g), ("B", &self.b)]
    }

    pub fn from_text(text: &str) -> Result<Self, LinearizationError> {
        let mut lines = text.lines().enumerate().map(|(k, l)| (k + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        let perr = |line: usize, msg: &str| LinearizationError::Parse { line, msg: msg.to_string() };
        let (ln, header) = lines.next().ok_or_else(|| perr(1, "empty input"))?;
        if header != "tetherlift-linear-model 1" {
            return Err(perr(ln, "missing header `tetherlift-linear-model 1`"));
        }
        let (ln, nline) = lines.next().ok_or_else(|| perr(ln + 1, "missing `n` line"))?;
        let n: usize = nline
            .strip_prefix("n ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| perr(ln, "expected `n <count>`"))?;
        let c = ReducedState::config_dim(n);
        let expected = [("A0", 2 * c, 2 * c), ("B0", 2 * c, 3 * n), ("M", c, c), ("G", c, c), ("B", c, 3 * n)];
        let mut mats = Vec::with_capacity(5);
        for (name, rows, cols) in expected {
            let (ln, head) = lines.next().ok_or_else(|| perr(0, &format!("missing matrix {name}")))?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            if parts.len() != 3 || parts[0] != name {
                return Err(perr(ln, &format!("expected `{name} <rows> <cols>`")));
            }
            let dims: (usize, usize) = match (parts[1].parse(), parts[2].parse()) {
                (Ok(r), Ok(k)) => (r, k),
                _ => return Err(perr(ln, "bad dimensions")),
            };
            if dims != (rows, cols) {
                return Err(perr(ln, &format!("{name} must be {rows}×{cols} for n = {n}")));
            }
            let mut mat = DMatrix::zeros(rows, cols);
            for r in 0..rows {
                let (ln, row) = lines.next().ok_or_else(|| perr(0, &format!("{name} truncated")))?;
                let vals: Result<Vec<f64>, _> = row.split_whitespace().map(str::parse::<f64>).collect();
                let vals = vals.map_err(|e| perr(ln, &e.to_string()))?;
                if vals.len() != cols {
                    return Err(perr(ln, &format!("expected {cols} values, found {}", vals.len())));
                }
                for (k, v) in vals.into_iter().enumerate() {
                    mat[(r, k)] = v;
                }
            }
            mats.push(mat);
        }
        if let Some((ln, _)) = lines.next() {
            return Err(perr(ln, "trailing content"));
        }
        let mut it = mats.into_iter();
        let mut next = || it.next().expect("five matrices parsed");
        Ok(LinearModel { n, a0: next(), b0: next(), m: next(), g: next(), b: next() })
    }
}

/// Closed-loop spectrum of A0 − B0K.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopAnalysis {
    /// All eigenvalues of A0 − B0K.
    pub eigenvalues: Vec<Complex<f64>>,
    /// Eigenvalues restricted to the controlled subspace.
    pub controlled: Vec<Complex<f64>>,
    pub controlled_dim: usize,
    /// Largest real part on the controlled subspace.
    pub max_real: f64,
    pub hurwitz: bool,
}

/// Rank tolerance used when growing the controllable subspace.
pub const KRYLOV_TOL: f64 = 1e-6;

/// Orthonormal basis of the controllable subspace of (A, B) by block Arnoldi
/// with full re-orthogonalisation.
pub fn controllable_basis(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let dim = a.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let scale_b = b.amax().max(f64::MIN_POSITIVE);
    let push = |v: DVector<f64>, basis: &mut Vec<DVector<f64>>, scale: f64| -> Option<DVector<f64>> {
        let mut v = v;
        for _ in 0..2 {
            for e in basis.iter() {
                let p = e.dot(&v);
                v -= e * p;
            }
        }
        let norm = v.norm();
        if norm > tol * scale {
            let e = v / norm;
            basis.push(e.clone());
            Some(e)
        } else {
            None
        }
    };
    let mut frontier: Vec<DVector<f64>> = Vec::new();
    for j in 0..b.ncols() {
        if let Some(e) = push(b.column(j).into_owned(), &mut basis, scale_b) {
            frontier.push(e);
        }
    }
    let scale_a = a.amax().max(1.0);
    while !frontier.is_empty() && basis.len() < dim {
        let mut next = Vec::new();
        for v in &frontier {
            if let Some(e) = push(a * v, &mut basis, scale_a) {
                next.push(e);
            }
        }
        frontier = next;
    }
    let mut out = DMatrix::zeros(dim, basis.len());
    for (k, e) in basis.iter().enumerate() {
        out.set_column(k, e);
    }
    out
}

/// Translation coordinates (δx0, δẋ0) inside z.
pub fn translation_indices(n: usize) -> Vec<usize> {
    let c = ReducedState::config_dim(n);
    (0..3).chain(c..c + 3).collect()
}

/// Spectrum of A0 − B0K.
///
/// Payload translation has no restoring force and belongs to the human
/// leader, so when K has no position feedback the (δx0, δẋ0) block is
/// deflated. The Hurwitz flag is then evaluated on the subspace reachable
/// from the inputs that K actually drives (all inputs if K = 0); modes that
/// no input can reach are reported in `eigenvalues` only.
pub fn closed_loop(model: &LinearModel, k: &DMatrix<f64>) -> Result<ClosedLoopAnalysis, LinearizationError> {
    let n = model.n;
    let dim = model.a0.nrows();
    if k.nrows() != 3 * n || k.ncols() != dim {
        return Err(LinearizationError::Dimension(format!(
            "K must be {}×{dim}, got {}×{}",
            3 * n,
            k.nrows(),
            k.ncols()
        )));
    }
    let acl = &model.a0 - &model.b0 * k;
    let eigenvalues: Vec<Complex<f64>> = acl.complex_eigenvalues().iter().copied().collect();

    let trans = translation_indices(n);
    let a_scale = model.a0.amax().max(1.0);
    let deflate = trans.iter().all(|&j| {
        let col_a = model.a0.column(j);
        let a_part = (0..dim).filter(|r| !trans.contains(r)).all(|r| col_a[r].abs() <= 1e-9 * a_scale);
        a_part && k.column(j).iter().all(|v| *v == 0.0)
    });
    let keep: Vec<usize> = if deflate { (0..dim).filter(|j| !trans.contains(j)).collect() } else { (0..dim).collect() };
    let a_y = model.a0.select_rows(&keep).select_columns(&keep);
    let b_y = model.b0.select_rows(&keep);
    let k_y = k.select_columns(&keep);

    let active: Vec<usize> = (0..3 * n).filter(|&r| k.row(r).iter().any(|v| *v != 0.0)).collect();
    let inputs: Vec<usize> = if active.is_empty() { (0..3 * n).collect() } else { active };
    let v = controllable_basis(&a_y, &b_y.select_columns(&inputs), KRYLOV_TOL);
    let reduced = v.transpose() * (&a_y - &b_y * &k_y) * &v;
    let controlled: Vec<Complex<f64>> = reduced.complex_eigenvalues().iter().copied().collect();
    let max_real = controlled.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    let mag = controlled.iter().map(|l| l.norm()).fold(1.0, f64::max);
    let hurwitz = !controlled.is_empty() && max_real < -1e-8 * mag;
    Ok(ClosedLoopAnalysis { eigenvalues, controlled, controlled_dim: v.ncols(), max_real, hurwitz })
}
