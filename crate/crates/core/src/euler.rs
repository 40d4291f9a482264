//! 2D Euler in vorticity form: `omega_t + u . grad omega = 0`, `u = K[omega]`, on the
//! full plane (open grid) or a torus (periodic grid).

use serde::Serialize;

use crate::advect::{departure_points, transport};
use crate::biot_savart::{BiotSavart, PeriodicBiotSavart};
use crate::fields::{
    d_dx, d_dy, grad_magnitude, poisson_freespace_unchecked, poisson_periodic, Boundary, Grid, ScalarField, VectorField,
};
use crate::{Error, Real, Result};

/// Largest admissible CFL number `dt |u|_inf / h`.
pub const CFL: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct EulerState<T> {
    pub time: T,
    pub omega: ScalarField<T>,
    /// `K[omega]`, refreshed after every step.
    pub u: VectorField<T>,
    /// Velocity one step earlier, used to extrapolate over the next step.
    u_prev: Option<VectorField<T>>,
}

impl<T: Real> EulerState<T> {
    /// `(||omega||_1, ||omega||_2, ||omega||_inf)`.
    pub fn vorticity_norms(&self) -> Result<[T; 3]> {
        Ok([
            self.omega.lp_norm(T::one(), None)?,
            self.omega.lp_norm(T::of(2.0), None)?,
            self.omega.max_abs(),
        ])
    }

    /// `||grad u||_inf`, Frobenius norm pointwise.
    pub fn grad_sup(&self) -> T {
        grad_magnitude(&self.u).max_abs()
    }
}

enum Kernel<T: Real> {
    Free(BiotSavart<T>),
    Periodic(PeriodicBiotSavart<T>),
}

/// Semi-Lagrangian solver with a cached Biot-Savart kernel: the full plane on an
/// open grid, the torus on a periodic one.
pub struct EulerSolver<T: Real> {
    bs: Kernel<T>,
    /// Limit interpolated values to the local range (no new extrema).
    pub clip: bool,
}

impl<T: Real> EulerSolver<T> {
    pub fn new(grid: Grid<T>) -> Result<Self> {
        let bs = match grid.boundary {
            Boundary::Open => Kernel::Free(BiotSavart::new(grid)),
            Boundary::Periodic => Kernel::Periodic(PeriodicBiotSavart::new(grid)?),
        };
        Ok(Self { bs, clip: true })
    }

    pub fn grid(&self) -> &Grid<T> {
        match &self.bs {
            Kernel::Free(k) => k.grid(),
            Kernel::Periodic(k) => k.grid(),
        }
    }

    fn velocity(&self, omega: &ScalarField<T>, checked: bool) -> Result<VectorField<T>> {
        match &self.bs {
            Kernel::Free(k) if checked => k.velocity(omega),
            Kernel::Free(k) => k.velocity_unchecked(omega),
            Kernel::Periodic(k) => k.velocity(omega),
        }
    }

    pub fn initial_state(&self, omega: ScalarField<T>) -> Result<EulerState<T>> {
        let u = self.velocity(&omega, true)?;
        Ok(EulerState { time: T::zero(), omega, u, u_prev: None })
    }

    /// `CFL h / |u|_inf`.
    pub fn dt_limit(&self, state: &EulerState<T>) -> T {
        let m = state.u.max_abs();
        if m == T::zero() {
            T::infinity()
        } else {
            T::of(CFL) * self.grid().h / m
        }
    }

    pub fn step(&self, state: &EulerState<T>, dt: T) -> Result<EulerState<T>> {
        let limit = self.dt_limit(state);
        if !(dt > T::zero()) || dt > limit * (T::one() + T::of(1e-12)) {
            return Err(Error::Stability { dt: dt.to_f(), limit: limit.to_f() });
        }
        let g = *self.grid();
        let prev = state.u_prev.as_ref().unwrap_or(&state.u);
        let deps = departure_points(&state.u, prev, dt);
        let data = transport(&state.omega.data, &g, &deps, self.clip);
        let omega = ScalarField { grid: g, data };
        // the support grows only by transport; it stays checked at snapshot level
        let u = self.velocity(&omega, false)?;
        Ok(EulerState { time: state.time + dt, omega, u, u_prev: Some(state.u.clone()) })
    }

    /// Advances to `t_end` with `dt = fraction * limit` (clamped to land on `t_end`),
    /// calling `observe` on the initial state and then every `every` time units.
    pub fn run(
        &self,
        mut state: EulerState<T>,
        t_end: T,
        fraction: T,
        every: T,
        mut observe: impl FnMut(&EulerState<T>) -> Result<()>,
    ) -> Result<EulerState<T>> {
        observe(&state)?;
        let mut next = state.time + every;
        let tiny = T::of(1e-12) * every.max(T::one());
        while state.time < t_end - tiny {
            let mut dt = (fraction * self.dt_limit(&state)).min(t_end - state.time).min(next - state.time);
            if dt <= tiny {
                dt = (fraction * self.dt_limit(&state)).min(t_end - state.time);
            }
            state = self.step(&state, dt)?;
            if state.time >= next - tiny {
                observe(&state)?;
                next = next + every;
            }
        }
        Ok(state)
    }
}

pub fn euler_step<T: Real>(solver: &EulerSolver<T>, state: &EulerState<T>, dt: T) -> Result<EulerState<T>> {
    solver.step(state, dt)
}

/// Pressure of the Euler flow: `lap p = -tr(grad u grad u)`, mean zero on `B(0, 2)`
/// (open grid) or on the box (periodic grid).
pub fn pressure<T: Real>(u: &VectorField<T>) -> Result<ScalarField<T>> {
    let g = u.grid;
    let (ax, ay, bx, by) = (d_dx(&u.x, &g), d_dy(&u.x, &g), d_dx(&u.y, &g), d_dy(&u.y, &g));
    let mut rhs = ScalarField {
        grid: g,
        data: (0..g.len()).map(|k| -(ax[k] * ax[k] + T::of(2.0) * ay[k] * bx[k] + by[k] * by[k])).collect(),
    };
    if g.boundary == Boundary::Periodic {
        // a divergence on the torus; only rounding and truncation leave a mean
        let m = rhs.mean();
        rhs.data.iter_mut().for_each(|v| *v = *v - m);
        return poisson_periodic(&rhs);
    }
    let mut p = poisson_freespace_unchecked(&rhs);
    let four = T::of(4.0);
    let (mut s, mut n) = (T::zero(), 0usize);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let x = g.point(i, j);
            if x[0] * x[0] + x[1] * x[1] < four {
                s = s + p.get(i, j);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let m = s / T::of_usize(n);
    p.data.iter_mut().for_each(|v| *v = *v - m);
    Ok(p)
}

/// `||grad u^E(t)||_inf` series with the smallest `C0` such that `C0 e^(C0 t)` dominates it.
#[derive(Clone, Debug, Serialize)]
pub struct YudovichReport<T> {
    pub times: Vec<T>,
    pub grad_sup: Vec<T>,
    pub c0: T,
}

pub fn yudovich_report<T: Real>(series: &[(T, T)]) -> YudovichReport<T> {
    let times: Vec<T> = series.iter().map(|s| s.0).collect();
    let grad_sup: Vec<T> = series.iter().map(|s| s.1).collect();
    let mut c0 = T::zero();
    for &(t, g) in series {
        if !(g > T::zero()) {
            continue;
        }
        // C e^(C t) = g is increasing in C > 0
        let (mut lo, mut hi) = (T::zero(), g.max(T::one()));
        while hi * (hi * t).exp() < g {
            hi = hi * T::of(2.0);
        }
        for _ in 0..200 {
            let mid = (lo + hi) * T::of(0.5);
            if mid * (mid * t).exp() < g {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        c0 = c0.max(hi);
    }
    YudovichReport { times, grad_sup, c0 }
}
