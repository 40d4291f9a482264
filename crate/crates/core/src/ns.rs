//! Navier-Stokes on a periodic box with Brinkman penalization of the obstacles.
//!
//! One step is a fractional-step projection scheme: semi-Lagrangian advection of
//! the velocity, exact spectral diffusion, pointwise implicit penalization
//! `u / (1 + dt/eta)` on the solid mask, and a Fourier projection whose symbol is
//! that of the centered difference, so the discrete divergence vanishes to rounding.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use serde::Serialize;

use crate::advect::{departure_points, transport};
use crate::fft::{freq, Fft2};
use crate::fields::{Boundary, Grid, VectorField};
use crate::geometry::RegionMask;
use crate::{Error, Real, Result};

/// Relative excess above which a ledger step is flagged.
pub const LEDGER_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct SimParams<T> {
    pub nu: T,
    pub dt: T,
    pub t_final: T,
    pub grid: Grid<T>,
    pub eta: T,
    pub snapshot_every: T,
}

impl<T: Real> SimParams<T> {
    /// `eta = h^2`, the largest admissible step, fifty snapshots.
    pub fn for_grid(grid: Grid<T>, nu: T, t_final: T) -> Self {
        let h2 = grid.h * grid.h;
        let dt = if nu > T::zero() { h2.min(T::of(0.25) * h2 / nu) } else { h2 };
        Self { nu, dt, t_final, grid, eta: h2, snapshot_every: t_final / T::of(50.0) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.grid.boundary != Boundary::Periodic {
            return bad("the Navier-Stokes solver runs on a periodic grid".into());
        }
        if !(self.nu >= T::zero()) || !(self.dt > T::zero()) || !(self.eta > T::zero()) {
            return bad(format!("need nu >= 0, dt > 0, eta > 0 (got {}, {}, {})", self.nu, self.dt, self.eta));
        }
        if !(self.t_final >= T::zero()) || !(self.snapshot_every > T::zero()) {
            return bad("need t_final >= 0 and a positive snapshot cadence".into());
        }
        let slack = T::one() + T::of(1e-9);
        let h2 = self.grid.h * self.grid.h;
        if self.eta > h2 * slack {
            return bad(format!("eta {} exceeds h^2 = {}", self.eta, h2));
        }
        let mut limit = self.eta;
        if self.nu > T::zero() {
            limit = limit.min(T::of(0.25) * h2 / self.nu);
        }
        if self.dt > limit * slack {
            return Err(Error::Stability { dt: self.dt.to_f(), limit: limit.to_f() });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct NsState<T> {
    pub time: T,
    pub u: VectorField<T>,
    /// Pressure of the last projection (`phi / dt`); zero initially.
    pub p: crate::fields::ScalarField<T>,
    u_prev: Option<VectorField<T>>,
    /// `(nu |grad u*|^2, |u**|^2_solid / eta)` on the intermediate fields of the
    /// step that produced this state: after diffusion and after penalization.
    dissipation: Option<(T, T)>,
}

/// One step of the discrete energy balance
/// `E(n+1) - E(n) + dt (nu |grad u|^2 + |u|^2_solid / eta) <= 0`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LedgerEntry<T> {
    pub time: T,
    pub dt: T,
    pub energy: T,
    pub viscous: T,
    pub penalization: T,
    /// `E(n+1) - E(n) + dt (viscous + penalization)`.
    pub balance: T,
    /// `balance / E(n)` when positive, else zero.
    pub excess: T,
}

impl<T: Real> LedgerEntry<T> {
    pub fn violated(&self) -> bool {
        self.excess > T::of(LEDGER_TOL)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EnergyLedger<T> {
    pub entries: Vec<LedgerEntry<T>>,
    pub violations: usize,
    pub max_excess: T,
}

impl<T: Real> EnergyLedger<T> {
    pub fn from_entries(entries: Vec<LedgerEntry<T>>) -> Self {
        let violations = entries.iter().filter(|e| e.violated()).count();
        let max_excess = entries.iter().map(|e| e.excess).fold(T::zero(), T::max);
        Self { entries, violations, max_excess }
    }

    pub fn energy_nonincreasing(&self) -> bool {
        self.entries.windows(2).all(|w| w[1].energy <= w[0].energy * (T::one() + T::of(LEDGER_TOL)))
    }
}

pub struct NsSolver<T: Real> {
    params: SimParams<T>,
    solid: Option<Vec<bool>>,
    fft: Fft2<T>,
    /// Continuous wavenumbers per axis (diffusion and the ledger gradient).
    kx: Vec<T>,
    ky: Vec<T>,
    /// Centered-difference symbols `sin(k h) / h` per axis (projection).
    sx: Vec<T>,
    sy: Vec<T>,
    /// Interpolated velocities are limited to the local range.
    pub clip: bool,
}

impl<T: Real> NsSolver<T> {
    pub fn new(params: SimParams<T>, solid: Option<&RegionMask<T>>) -> Result<Self> {
        params.validate()?;
        let g = params.grid;
        if let Some(m) = solid {
            if m.grid != g {
                return Err(Error::InvalidConfig("solid mask lives on another grid".into()));
            }
        }
        let wave = |n: usize| -> Vec<T> {
            let len = g.h * T::of_usize(n);
            (0..n).map(|k| T::of(2.0) * T::PI() * T::of(freq(k, n) as f64) / len).collect()
        };
        let kx = wave(g.nx);
        let ky = wave(g.ny);
        let sym = |k: &[T]| -> Vec<T> { k.iter().map(|&w| (w * g.h).sin() / g.h).collect() };
        Ok(Self {
            params,
            solid: solid.map(|m| m.cells.clone()).filter(|c| c.iter().any(|&s| s)),
            fft: Fft2::new(g.nx, g.ny),
            sx: sym(&kx),
            sy: sym(&ky),
            kx,
            ky,
            clip: false,
        })
    }

    pub fn params(&self) -> &SimParams<T> {
        &self.params
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.params.grid
    }

    /// Projects `u` onto discretely divergence-free fields and starts the clock.
    pub fn initial_state(&self, u: VectorField<T>) -> Result<NsState<T>> {
        if u.grid != self.params.grid {
            return Err(Error::InvalidConfig("initial velocity lives on another grid".into()));
        }
        let (mut a, mut b) = self.to_spectral(&u);
        self.project(&mut a, &mut b, T::one());
        let u = self.to_physical(&mut a, &mut b);
        Ok(NsState { time: T::zero(), u, p: crate::fields::ScalarField::zeros(self.params.grid), u_prev: None, dissipation: None })
    }

    /// `0.5 h / |u|_inf`.
    pub fn cfl_limit(&self, state: &NsState<T>) -> T {
        let m = state.u.max_abs();
        if m == T::zero() {
            T::infinity()
        } else {
            T::of(0.5) * self.params.grid.h / m
        }
    }

    pub fn step(&self, state: &NsState<T>) -> Result<NsState<T>> {
        self.step_by(state, self.params.dt)
    }

    /// One step of length `dt <= params.dt`.
    pub fn step_by(&self, state: &NsState<T>, dt: T) -> Result<NsState<T>> {
        let slack = T::one() + T::of(1e-12);
        let limit = self.cfl_limit(state).min(self.params.dt);
        if !(dt > T::zero()) || dt > limit * slack {
            return Err(Error::Stability { dt: dt.to_f(), limit: limit.to_f() });
        }
        let g = self.params.grid;
        let prev = state.u_prev.as_ref().unwrap_or(&state.u);
        let deps = departure_points(&state.u, prev, dt);
        let adv = VectorField {
            grid: g,
            x: transport(&state.u.x, &g, &deps, self.clip),
            y: transport(&state.u.y, &g, &deps, self.clip),
        };

        let (mut a, mut b) = self.to_spectral(&adv);
        let nu = self.params.nu;
        if nu > T::zero() {
            for j in 0..g.ny {
                for i in 0..g.nx {
                    let k = g.idx(i, j);
                    let f = (-nu * (self.kx[i] * self.kx[i] + self.ky[j] * self.ky[j]) * dt).exp();
                    a[k] = a[k] * f;
                    b[k] = b[k] * f;
                }
            }
        }
        let viscous = if nu > T::zero() { nu * self.spectral_grad_energy(&a, &b) } else { T::zero() };
        let mut u = self.to_physical(&mut a, &mut b);

        if let Some(solid) = &self.solid {
            let damp = T::one() / (T::one() + dt / self.params.eta);
            for (k, _) in solid.iter().enumerate().filter(|(_, &s)| s) {
                u.x[k] = u.x[k] * damp;
                u.y[k] = u.y[k] * damp;
            }
        }

        let penalization = self.solid_energy(&u) / self.params.eta;

        let (mut a, mut b) = self.to_spectral(&u);
        let phi = self.project(&mut a, &mut b, dt);
        let u = self.to_physical(&mut a, &mut b);
        if !u.all_finite() {
            return Err(Error::Stability { dt: dt.to_f(), limit: limit.to_f() });
        }
        Ok(NsState {
            time: state.time + dt,
            u,
            p: phi,
            u_prev: Some(state.u.clone()),
            dissipation: Some((viscous, penalization)),
        })
    }

    /// Runs to `params.t_final` calling `observe` at every snapshot time (and at
    /// the start). Returns the final state with the per-step energy ledger.
    pub fn run(
        &self,
        mut state: NsState<T>,
        mut observe: impl FnMut(&NsState<T>) -> Result<()>,
    ) -> Result<(NsState<T>, EnergyLedger<T>)> {
        let every = self.params.snapshot_every;
        let end = self.params.t_final;
        let tiny = T::of(1e-9) * self.params.dt;
        observe(&state)?;
        let mut next = state.time + every;
        let mut entries = Vec::new();
        while state.time < end - tiny {
            let cfl = self.cfl_limit(&state);
            let mut dt = self.params.dt.min(cfl).min(end - state.time);
            if next - state.time > tiny {
                dt = dt.min(next - state.time);
            }
            let new = self.step_by(&state, dt)?;
            entries.push(self.ledger_entry(&state, &new));
            state = new;
            if state.time >= next - tiny {
                observe(&state)?;
                while next <= state.time + tiny {
                    next = next + every;
                }
            }
        }
        Ok((state, EnergyLedger::from_entries(entries)))
    }

    /// `0.5 |u|^2`.
    pub fn energy(&self, u: &VectorField<T>) -> T {
        T::of(0.5) * u.inner(u, None)
    }

    /// `|grad u|^2` with the spectral symbol used for diffusion.
    pub fn grad_energy(&self, u: &VectorField<T>) -> T {
        let (a, b) = self.to_spectral(u);
        self.spectral_grad_energy(&a, &b)
    }

    fn spectral_grad_energy(&self, a: &[Complex<T>], b: &[Complex<T>]) -> T {
        let g = self.params.grid;
        let mut s = T::zero();
        for j in 0..g.ny {
            for i in 0..g.nx {
                let k = g.idx(i, j);
                let k2 = self.kx[i] * self.kx[i] + self.ky[j] * self.ky[j];
                s = s + k2 * (a[k].norm_sqr() + b[k].norm_sqr());
            }
        }
        s * g.cell_area() / T::of_usize(g.len())
    }

    /// `|u|^2` over the solid mask.
    pub fn solid_energy(&self, u: &VectorField<T>) -> T {
        match &self.solid {
            None => T::zero(),
            Some(m) => {
                let s: T = m.iter().enumerate().filter(|(_, &s)| s).map(|(k, _)| u.x[k] * u.x[k] + u.y[k] * u.y[k]).sum();
                s * self.params.grid.cell_area()
            }
        }
    }

    /// `max |u|` over the solid mask (zero without obstacles).
    pub fn solid_max(&self, u: &VectorField<T>) -> T {
        match &self.solid {
            None => T::zero(),
            Some(m) => m
                .iter()
                .enumerate()
                .filter(|(_, &s)| s)
                .map(|(k, _)| u.x[k].hypot(u.y[k]))
                .fold(T::zero(), T::max),
        }
    }

    pub fn ledger_entry(&self, before: &NsState<T>, after: &NsState<T>) -> LedgerEntry<T> {
        let dt = after.time - before.time;
        let e0 = self.energy(&before.u);
        let e1 = self.energy(&after.u);
        let (viscous, penalization) = after.dissipation.unwrap_or_else(|| {
            let v = if self.params.nu > T::zero() { self.params.nu * self.grad_energy(&after.u) } else { T::zero() };
            (v, self.solid_energy(&after.u) / self.params.eta)
        });
        let balance = e1 - e0 + dt * (viscous + penalization);
        let excess = if balance > T::zero() && e0 > T::zero() { balance / e0 } else { T::zero() };
        LedgerEntry { time: after.time, dt, energy: e1, viscous, penalization, balance, excess }
    }

    fn to_spectral(&self, u: &VectorField<T>) -> (Vec<Complex<T>>, Vec<Complex<T>>) {
        let lift = |v: &[T]| -> Vec<Complex<T>> {
            let mut c: Vec<Complex<T>> = v.iter().map(|&x| Complex::new(x, T::zero())).collect();
            self.fft.forward(&mut c);
            c
        };
        let (a, b) = rayon::join(|| lift(&u.x), || lift(&u.y));
        (a, b)
    }

    fn to_physical(&self, a: &mut [Complex<T>], b: &mut [Complex<T>]) -> VectorField<T> {
        rayon::join(|| self.fft.inverse(a), || self.fft.inverse(b));
        VectorField {
            grid: self.params.grid,
            x: a.par_iter().map(|c| c.re).collect(),
            y: b.par_iter().map(|c| c.re).collect(),
        }
    }

    /// Removes the centered-gradient part in place; returns `phi / dt` where
    /// `u_old - grad phi = u_new`.
    fn project(&self, a: &mut [Complex<T>], b: &mut [Complex<T>], dt: T) -> crate::fields::ScalarField<T> {
        let g = self.params.grid;
        let zero = Complex::new(T::zero(), T::zero());
        let mut p = vec![zero; g.len()];
        let tiny = T::epsilon() / (g.h * g.h);
        for j in 0..g.ny {
            for i in 0..g.nx {
                let k = g.idx(i, j);
                let (sx, sy) = (self.sx[i], self.sy[j]);
                let s2 = sx * sx + sy * sy;
                if s2 <= tiny {
                    continue;
                }
                let d = (a[k] * sx + b[k] * sy) / s2;
                a[k] = a[k] - d * sx;
                b[k] = b[k] - d * sy;
                // grad phi has symbol i s, so phi = -i d
                p[k] = Complex::new(d.im, -d.re) / dt;
            }
        }
        self.fft.inverse(&mut p);
        crate::fields::ScalarField { grid: g, data: p.iter().map(|c| c.re).collect() }
    }
}

pub fn ns_step<T: Real>(solver: &NsSolver<T>, state: &NsState<T>) -> Result<NsState<T>> {
    solver.step(state)
}

/// Ledger over consecutive states of a trajectory.
pub fn energy_ledger<T: Real>(solver: &NsSolver<T>, trajectory: &[NsState<T>]) -> EnergyLedger<T> {
    EnergyLedger::from_entries(trajectory.windows(2).map(|w| solver.ledger_entry(&w[0], &w[1])).collect())
}

/// Taylor-Green vortex `(sin kx cos ky, -cos kx sin ky)` on `[0, 2 pi)^2`.
pub fn taylor_green<T: Real>(grid: Grid<T>, k: T) -> VectorField<T> {
    VectorField::from_fn(grid, |x| [(k * x[0]).sin() * (k * x[1]).cos(), -(k * x[0]).cos() * (k * x[1]).sin()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{div, grad_norm};
    use crate::geometry::Region;

    fn tg_grid(n: usize) -> Grid<f64> {
        Grid::periodic([0.0, 0.0], 2.0 * std::f64::consts::PI, n).unwrap()
    }

    #[test]
    fn params_enforce_penalization_and_step_bounds() {
        let g = tg_grid(32);
        let mut p = SimParams::for_grid(g, 0.1, 1.0);
        assert!(p.validate().is_ok());
        p.eta = 2.0 * g.h * g.h;
        assert!(p.validate().is_err());
        p.eta = g.h * g.h;
        p.dt = 1.5 * p.eta;
        assert!(matches!(p.validate(), Err(Error::Stability { .. })));
        let open = Grid::new([0.0, 0.0], g.h, 32, 32, Boundary::Open).unwrap();
        assert!(SimParams::for_grid(open, 0.1, 1.0).validate().is_err());
    }

    #[test]
    fn zero_data_stays_zero() {
        let g = tg_grid(32);
        let s = NsSolver::new(SimParams::for_grid(g, 0.1, 0.05), None).unwrap();
        let st = s.initial_state(VectorField::zeros(g)).unwrap();
        let (end, ledger) = s.run(st, |_| Ok(())).unwrap();
        assert_eq!(end.u.max_abs(), 0.0);
        assert_eq!(ledger.violations, 0);
    }

    #[test]
    fn taylor_green_decays_at_the_viscous_rate() {
        let g = tg_grid(128);
        let nu = 0.05;
        let s = NsSolver::new(SimParams::for_grid(g, nu, 1.0), None).unwrap();
        let st = s.initial_state(taylor_green(g, 1.0)).unwrap();
        let a0 = st.u.max_abs();
        let (end, ledger) = s.run(st, |_| Ok(())).unwrap();
        let rate = -(end.u.max_abs() / a0).ln() / end.time;
        assert!((rate / (2.0 * nu) - 1.0).abs() < 0.01, "{rate}");
        assert_eq!(ledger.violations, 0);
        let d = div(&end.u).lp_norm(2.0, None).unwrap() / grad_norm(&end.u, 2.0, None).unwrap();
        assert!(d < 1e-8, "{d}");
    }

    #[test]
    fn solid_velocity_is_damped() {
        let g = Grid::<f64>::periodic([-1.0, -1.0], 2.0, 64).unwrap();
        let nu = 1.0;
        let params = SimParams::for_grid(g, nu, 0.02);
        let solid = RegionMask::from_fn(g, Region::Solid, |i, j| {
            let x = g.point(i, j);
            x[0].hypot(x[1]) <= 0.3
        });
        let s = NsSolver::new(params, Some(&solid)).unwrap();
        let st = s.initial_state(VectorField::from_fn(g, |x| {
            let q = std::f64::consts::PI;
            [(q * x[1]).sin(), (q * x[0]).sin()]
        }))
        .unwrap();
        let (end, ledger) = s.run(st, |_| Ok(())).unwrap();
        let bound = 10.0 * (nu * params.eta).sqrt();
        assert!(s.solid_max(&end.u) < bound, "{} vs {}", s.solid_max(&end.u), bound);
        assert_eq!(ledger.violations, 0, "{}", ledger.max_excess);
    }
}
