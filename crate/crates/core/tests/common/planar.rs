//! Planar quadcopter–pendulum oracle integrated from its own Lagrangian.

use nalgebra::Vector3;
use tetherlift_core::{step, ActuationCommand, RotationMatrix, SystemParams, SystemState, UnitVector};

/// Planar quad–pendulum: payload at (X, Z), cable angle θ with
/// q = (sin θ, 0, −cos θ), quadcopter at (X − l sin θ, Z + l cos θ) pushing
/// with constant vertical force F.
struct PlanarPendulum {
    m0: f64,
    m1: f64,
    l: f64,
    g: f64,
    f: f64,
}

impl PlanarPendulum {
    fn rhs(&self, y: &[f64; 6]) -> [f64; 6] {
        let [_, _, th, xd, zd, thd] = *y;
        let mt = self.m0 + self.m1;
        let (s, c) = th.sin_cos();
        let ml = self.m1 * self.l;
        // unknowns (Ẍ, Z̈, θ̈)
        let a = nalgebra::Matrix3::new(mt, 0.0, -ml * c, 0.0, mt, -ml * s, -ml * c, -ml * s, ml * self.l);
        let b = Vector3::new(
            -ml * s * thd * thd,
            self.f - mt * self.g + ml * c * thd * thd,
            -self.f * self.l * s + self.m1 * self.g * self.l * s,
        );
        let acc = a.lu().solve(&b).unwrap();
        [xd, zd, thd, acc.x, acc.y, acc.z]
    }

    fn integrate(&self, mut y: [f64; 6], dt: f64, steps: usize) -> Vec<[f64; 6]> {
        let mut out = vec![y];
        let add = |y: &[f64; 6], h: f64, k: &[f64; 6]| -> [f64; 6] { std::array::from_fn(|j| y[j] + h * k[j]) };
        for _ in 0..steps {
            let k1 = self.rhs(&y);
            let k2 = self.rhs(&add(&y, 0.5 * dt, &k1));
            let k3 = self.rhs(&add(&y, 0.5 * dt, &k2));
            let k4 = self.rhs(&add(&y, dt, &k3));
            y = std::array::from_fn(|j| y[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]));
            out.push(y);
        }
        out
    }
}

/// Returns the worst deviation over 2 s between the crate's integrator and
/// the planar oracle for one initial condition.
/// `params` must describe one quadcopter attached at the payload's centre.
pub fn deviation(params: &SystemParams, f: f64, y0: [f64; 6]) -> f64 {
    let quad = &params.quads[0];
    let oracle = PlanarPendulum { m0: params.payload_mass, m1: quad.mass, l: quad.cable_length, g: params.gravity, f };
    let fine = oracle.integrate(y0, 1e-4, 20_000);
    let [x, z, th, xd, zd, thd] = y0;
    let q = Vector3::new(th.sin(), 0.0, -th.cos());
    let q_dot = Vector3::new(th.cos() * thd, 0.0, th.sin() * thd);
    let mut state = SystemState::at_rest(Vector3::new(x, 0.0, z), RotationMatrix::identity(), &[UnitVector::new(q).unwrap()]);
    state.v0 = Vector3::new(xd, 0.0, zd);
    state.cables[0].omega = q.cross(&q_dot);
    let cmd = ActuationCommand::Reduced(vec![Vector3::new(0.0, 0.0, f)]);
    let mut worst: f64 = 0.0;
    for k in 1..=2000 {
        state = step(&state, &cmd, params, 1e-3).unwrap();
        let o = fine[10 * k];
        let q = *state.cables[0].q;
        let th = q.x.atan2(-q.z);
        let dev = (state.x0.x - o[0]).abs().max((state.x0.z - o[1]).abs()).max((th - o[2]).abs()).max(state.x0.y.abs());
        worst = worst.max(dev);
    }
    worst
}

