//! Vanishing-viscosity rate study: paired Euler / penalized Navier-Stokes runs
//! over a sweep of `(nu, eps, d_eps, mu)` tied by the compatibility constraint.

use std::sync::mpsc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biot_savart::{biot_savart_fft, sample_blobs, VorticityBlob};
use crate::corrector::{assemble_h_epsilon, estimate_constants, Assembly, CellSolver};
use crate::cutoff::{lattice_cutoff_with_grad, CutoffProfile, LatticeCutoff};
use crate::euler::{pressure, yudovich_report, EulerSolver, YudovichReport};
use crate::fields::{d_dx, d_dy, Boundary, Grid, ScalarField, VectorField};
use crate::geometry::{lattice_centers, rasterize_all, DRule, Geometry, LatticeConfig, ObstacleShape, RegionMask};
use crate::initial_data::{corrected_velocity_disk, u0_eps_grid};
use crate::ns::{NsSolver, SimParams};
use crate::{Error, Real, Result};

/// Safety factor applied to the calibrated `A`.
pub const CALIBRATION_SAFETY: f64 = 0.9;

/// `eps / d^((1+mu)/2) <= A nu / M0`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CompatibilityRule<T> {
    pub a: T,
    pub m0: T,
}

impl<T: Real> CompatibilityRule<T> {
    pub fn new(a: T, m0: T) -> Self {
        Self { a, m0 }
    }

    /// `||omega||_{L^1} + ||omega||_{L^inf}`.
    pub fn m0_of(omega: &ScalarField<T>) -> Result<T> {
        Ok(omega.lp_norm(T::one(), None)? + omega.max_abs())
    }

    pub fn limit(&self, nu: T) -> T {
        self.a * nu / self.m0
    }

    /// Closed inequality; a few ulps of slack absorb the rounding of both sides.
    pub fn admissible(&self, cfg: &LatticeConfig<T>, nu: T) -> bool {
        cfg.density_ratio() <= self.limit(nu) * (T::one() + T::of(8.0) * T::epsilon())
    }

    /// The `eps` that puts `(nu, eps, d_rule(eps))` on the constraint boundary.
    pub fn tied_epsilon(&self, nu: T, d_rule: &DRule<T>, mu: T) -> Result<T> {
        let target = self.limit(nu);
        let ratio = |e: T| e / d_rule.d_for(e).powf((T::one() + mu) / T::of(2.0));
        let (mut lo, mut hi) = (T::of(1e-9), T::one());
        if !(ratio(hi) > ratio(lo)) {
            return Err(Error::InvalidConfig(
                "this d-rule makes eps / d^((1+mu)/2) independent of eps; the constraint cannot tie eps".into(),
            ));
        }
        if target < ratio(lo) || target > ratio(hi) {
            return Err(Error::InvalidConfig(format!("no eps in (0, 1] meets the constraint at nu = {nu}")));
        }
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            if ratio(mid) <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(lo)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BoxSpec<T> {
    pub lo: [T; 2],
    pub length: T,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GridSpec<T> {
    pub n: usize,
    #[serde(rename = "box")]
    pub bbox: BoxSpec<T>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSpec<T> {
    pub nu: Vec<T>,
    pub d_rule: DRule<T>,
    #[serde(rename = "T")]
    pub t_final: T,
}

fn default_snapshots() -> usize {
    50
}

/// JSON study description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudyConfig<T> {
    pub omega0: Vec<VorticityBlob<T>>,
    pub shape: ObstacleShape<T>,
    pub mu: T,
    pub sweep: SweepSpec<T>,
    pub grid: GridSpec<T>,
    /// Constraint constant; calibrated when absent.
    #[serde(rename = "A", default)]
    pub a: Option<T>,
    #[serde(default = "default_snapshots")]
    pub snapshots: usize,
    #[serde(default)]
    pub cell_resolution: Option<usize>,
    /// Also run every `nu` without obstacles.
    #[serde(default)]
    pub control: bool,
}

impl<T: Real> StudyConfig<T> {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.omega0.is_empty() {
            return bad("omega0 lists no vorticity blob");
        }
        if self.sweep.nu.is_empty() || self.sweep.nu.iter().any(|&v| !(v > T::zero())) {
            return bad("sweep.nu must list positive viscosities");
        }
        if !(self.sweep.t_final > T::zero()) {
            return bad("sweep.T must be positive");
        }
        if self.snapshots == 0 {
            return bad("snapshots must be positive");
        }
        if !(self.grid.bbox.length > T::zero()) {
            return bad("grid box length must be positive");
        }
        self.shape.validate()
    }

    pub fn ns_grid(&self) -> Result<Grid<T>> {
        Grid::periodic(self.grid.bbox.lo, self.grid.bbox.length, self.grid.n)
    }
}

/// The open-grid twin of a periodic grid (same nodes).
pub fn euler_grid<T: Real>(g: &Grid<T>) -> Result<Grid<T>> {
    Grid::new(g.origin, g.h, g.nx, g.ny, Boundary::Open)
}

fn on_grid<T: Real>(u: &VectorField<T>, g: Grid<T>) -> VectorField<T> {
    VectorField { grid: g, x: u.x.clone(), y: u.y.clone() }
}

/// Euler solution from `omega0` sampled every `T / snapshots`.
#[derive(Clone, Debug)]
pub struct EulerReference<T> {
    pub times: Vec<T>,
    pub u: Vec<VectorField<T>>,
    pub vorticity_norms: Vec<[T; 3]>,
    pub yudovich: YudovichReport<T>,
}

impl<T: Real> EulerReference<T> {
    pub fn compute(omega0: &[VorticityBlob<T>], grid: &Grid<T>, t_final: T, snapshots: usize) -> Result<Self> {
        let solver = EulerSolver::new(*grid)?;
        let state = solver.initial_state(sample_blobs(omega0, grid))?;
        let every = t_final / T::of_usize(snapshots);
        let (mut times, mut u, mut norms, mut series) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        solver.run(state, t_final, T::of(0.9), every, |s| {
            times.push(s.time);
            u.push(s.u.clone());
            norms.push(s.vorticity_norms()?);
            series.push((s.time, s.grad_sup()));
            Ok(())
        })?;
        Ok(Self { times, u, vorticity_norms: norms, yudovich: yudovich_report(&series) })
    }

    /// Index of the snapshot at time `t`.
    pub fn index_of(&self, t: T) -> Option<usize> {
        let tol = T::of(1e-9) * (T::one() + t.abs());
        self.times.iter().position(|&s| (s - t).abs() <= tol)
    }
}

/// Everything a sweep shares: grids, the Euler reference, the cell solver and `K2`.
pub struct StudySetup<T: Real> {
    pub omega0: Vec<VorticityBlob<T>>,
    pub shape: ObstacleShape<T>,
    pub mu: T,
    /// Periodic grid shared by both solvers. The full-plane initial data are
    /// built on its open twin.
    pub grid: Grid<T>,
    pub t_final: T,
    pub snapshots: usize,
    pub m0: T,
    pub cells: CellSolver<T>,
    /// `||u||_{L^4} <= K2 eps^(1/2) ||grad u||_{L^2}` on a cell.
    pub k2: T,
    pub reference: EulerReference<T>,
}

impl<T: Real> StudySetup<T> {
    pub fn new(
        omega0: Vec<VorticityBlob<T>>,
        shape: ObstacleShape<T>,
        mu: T,
        grid: Grid<T>,
        t_final: T,
        snapshots: usize,
        cell_resolution: Option<usize>,
    ) -> Result<Self> {
        if grid.boundary != Boundary::Periodic {
            return Err(Error::InvalidConfig("the study grid must be periodic".into()));
        }
        let open = euler_grid(&grid)?;
        let m0 = CompatibilityRule::m0_of(&sample_blobs(&omega0, &open))?;
        let cells = match cell_resolution {
            Some(n) => CellSolver::with_resolution(shape, n)?,
            None => CellSolver::new(shape)?,
        };
        let k2 = estimate_constants(&cells, T::of(4.0), 20, 7)?.k2;
        let reference = EulerReference::compute(&omega0, &grid, t_final, snapshots)?;
        Ok(Self { omega0, shape, mu, grid, t_final, snapshots, m0, cells, k2, reference })
    }

    pub fn from_config(c: &StudyConfig<T>) -> Result<Self> {
        Self::new(c.omega0.clone(), c.shape, c.mu, c.ns_grid()?, c.sweep.t_final, c.snapshots, c.cell_resolution)
    }

    /// Lattice for `eps` with `d = d_rule(eps)`.
    pub fn geometry(&self, epsilon: T, d_rule: &DRule<T>) -> Result<Geometry<T>> {
        lattice_centers(LatticeConfig::new(epsilon, d_rule.d_for(epsilon), self.mu, self.shape))
    }

    fn reference_u(&self, k: usize) -> VectorField<T> {
        self.reference.u[k].clone()
    }
}

/// `||u^E||_{L^inf(A_eps)} ||grad phi^eps||_{L^2} + ||grad h^eps||_{L^2}`: the factor
/// of `K2^2 eps` in the coefficient of `||grad W||^2`.
fn coupling<T: Real>(ue: &VectorField<T>, sleeve: &RegionMask<T>, grad_phi_l2: T, h: &Assembly<T>) -> T {
    let sup = (0..ue.grid.len())
        .filter(|&k| sleeve.cells[k])
        .map(|k| ue.x[k].hypot(ue.y[k]))
        .fold(T::zero(), T::max);
    sup * grad_phi_l2 + h.grad_lp_norm(T::of(2.0))
}

/// `sup_t` of [`coupling`] over every `stride`-th snapshot.
pub fn coupling_sup<T: Real>(setup: &StudySetup<T>, geometry: &Geometry<T>, stride: usize) -> Result<T> {
    if geometry.is_empty() {
        return Ok(T::zero());
    }
    let masks = rasterize_all(geometry, &setup.grid)?;
    let cut = lattice_cutoff_with_grad(geometry, &setup.grid, &CutoffProfile::Smoothstep)?;
    let gp = cut.grad.lp_norm(T::of(2.0), None)?;
    let mut sup = T::zero();
    for k in (0..setup.reference.u.len()).step_by(stride.max(1)) {
        let ue = setup.reference_u(k);
        let h = assemble_h_epsilon(&setup.cells, geometry, &ue)?;
        sup = sup.max(coupling(&ue, &masks.sleeve, gp, &h));
    }
    Ok(sup)
}

#[derive(Clone, Debug, Serialize)]
pub struct Calibration<T> {
    pub a: T,
    pub iterations: usize,
    /// `(eps, sup_t coupling)` per sweep point at the final iterate.
    pub points: Vec<(T, T)>,
}

/// Largest `A` (times the safety factor) for which every tied point of the sweep
/// passes `3 nu / 4 + K2^2 eps sup_t coupling < nu`. Fixed-point iteration, since
/// the tied `eps` moves with `A`; `stride` thins the snapshots (pilot run).
pub fn calibrate<T: Real>(setup: &StudySetup<T>, nus: &[T], d_rule: &DRule<T>, stride: usize) -> Result<Calibration<T>> {
    let q = (T::one() + setup.mu) / T::of(2.0);
    let k2 = setup.k2 * setup.k2;
    // start with the smallest-nu point just above the resolution limit eps = 8h
    let nu_min = nus.iter().copied().fold(T::infinity(), T::min);
    let e0 = T::of(9.6) * setup.grid.h;
    let mut a = setup.m0 * e0 / (d_rule.d_for(e0).powf(q) * nu_min);
    let mut points = Vec::new();
    for it in 1..=8 {
        let rule = CompatibilityRule::new(a, setup.m0);
        let mut best = T::infinity();
        points.clear();
        for &nu in nus {
            let eps = rule.tied_epsilon(nu, d_rule, setup.mu)?;
            let geo = setup.geometry(eps, d_rule)?;
            let g = coupling_sup(setup, &geo, stride)?;
            points.push((eps, g));
            if g > T::zero() {
                let d = geo.config.d_epsilon;
                best = best.min(setup.m0 / (T::of(4.0) * k2 * d.powf(q) * g));
            }
        }
        if !best.is_finite() {
            return Err(Error::InvalidConfig("the flow does not reach the obstacles; nothing to calibrate".into()));
        }
        let next = T::of(CALIBRATION_SAFETY) * best;
        let done = ((next - a) / next).abs() < T::of(0.02);
        a = next;
        if done {
            return Ok(Calibration { a, iterations: it, points });
        }
    }
    Ok(Calibration { a, iterations: 8, points })
}

/// Ledger groups of the `W = u^{nu,eps} - u^eps` energy identity at one snapshot.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct DiagnosticEnergy<T> {
    pub time: T,
    /// `||u^{nu,eps} - u^E||_{L^2(fluid)}`.
    pub error: T,
    pub w_l2: T,
    /// `||u^eps - u^E||_{L^2(fluid)}`.
    pub corrector_gap: T,
    pub triangle_ok: bool,
    pub grad_w_sq: T,
    pub i1: T,
    pub i2: T,
    pub i3: T,
    pub j: T,
    pub h1: T,
    pub h2: T,
    /// `d/dt 0.5 ||W||^2 + nu ||grad W||^2 - (I + J + H1 + H2)`, backward difference.
    pub closure: T,
    pub coupling: T,
}

#[derive(Clone, Debug, Serialize)]
pub struct StudyRecord<T> {
    pub nu: T,
    pub epsilon: T,
    pub d_epsilon: T,
    pub mu: T,
    pub obstacles: usize,
    pub admissible: bool,
    pub skipped: Option<String>,
    pub failure: Option<String>,
    pub sup_error: T,
    /// `sqrt(nu) / d^((1+mu)/2)`.
    pub bound_shape: T,
    pub initial_error: T,
    pub wall_seconds: f64,
    pub k2: T,
    pub c0: T,
    pub ledger_violations: usize,
    pub solid_max: T,
    pub series: Vec<DiagnosticEnergy<T>>,
}

impl<T: Real> StudyRecord<T> {
    fn blank(nu: T, geometry: &Geometry<T>, k2: T, c0: T) -> Self {
        let cfg = &geometry.config;
        Self {
            nu,
            epsilon: cfg.epsilon,
            d_epsilon: cfg.d_epsilon,
            mu: cfg.mu,
            obstacles: geometry.len(),
            admissible: true,
            skipped: None,
            failure: None,
            sup_error: T::nan(),
            bound_shape: nu.sqrt() / cfg.d_epsilon.powf((T::one() + cfg.mu) / T::of(2.0)),
            initial_error: T::nan(),
            wall_seconds: 0.0,
            k2,
            c0,
            ledger_violations: 0,
            solid_max: T::nan(),
            series: Vec::new(),
        }
    }

    pub fn completed(&self) -> bool {
        self.skipped.is_none() && self.failure.is_none() && self.sup_error.is_finite()
    }
}

/// One sweep point: viscosity and obstacle lattice (empty for a control run).
#[derive(Clone, Debug)]
pub struct PointSpec<T> {
    pub nu: T,
    pub geometry: Geometry<T>,
}

/// Runs one point. Inadmissible points are skipped and solver failures recorded;
/// neither aborts the sweep.
pub fn run_point<T: Real>(setup: &StudySetup<T>, rule: Option<&CompatibilityRule<T>>, spec: &PointSpec<T>) -> StudyRecord<T> {
    let start = Instant::now();
    let mut rec = StudyRecord::blank(spec.nu, &spec.geometry, setup.k2, setup.reference.yudovich.c0);
    if !spec.geometry.is_empty() {
        if let Some(r) = rule {
            if !r.admissible(&spec.geometry.config, spec.nu) {
                rec.admissible = false;
                rec.skipped = Some(format!(
                    "eps / d^((1+mu)/2) = {} exceeds A nu / M0 = {}",
                    spec.geometry.config.density_ratio(),
                    r.limit(spec.nu)
                ));
                return rec;
            }
        }
    }
    if let Err(e) = simulate(setup, spec, &mut rec) {
        rec.failure = Some(e.to_string());
        rec.sup_error = T::nan();
    }
    rec.wall_seconds = start.elapsed().as_secs_f64();
    rec
}

struct Fields<T> {
    fluid: RegionMask<T>,
    sleeve: RegionMask<T>,
    solid: RegionMask<T>,
    cut: LatticeCutoff<T>,
    grad_phi_l2: T,
}

fn simulate<T: Real>(setup: &StudySetup<T>, spec: &PointSpec<T>, rec: &mut StudyRecord<T>) -> Result<()> {
    let g = setup.grid;
    let open = euler_grid(&g)?;
    let geo = &spec.geometry;
    let masks = rasterize_all(geo, &g)?;
    let cut = lattice_cutoff_with_grad(geo, &g, &CutoffProfile::Smoothstep)?;
    let f = Fields {
        grad_phi_l2: cut.grad.lp_norm(T::of(2.0), None)?,
        fluid: masks.fluid,
        sleeve: masks.sleeve,
        solid: masks.solid,
        cut,
    };

    // v^eps = u0 + (full-plane correction), carried onto the torus
    let u0 = &setup.reference.u[0];
    let mut v0 = u0.clone();
    if !geo.is_empty() {
        let free = biot_savart_fft(&sample_blobs(&setup.omega0, &open))?;
        let v = if geo.config.shape.is_disk() {
            corrected_velocity_disk(geo, &setup.omega0, &open)?
        } else {
            u0_eps_grid(geo, &setup.omega0, &open)?
        };
        v0.axpy(T::one(), &on_grid(&v.sub(&free), g));
        v0.zero_on(&f.solid);
    }
    rec.initial_error = v0.sub(u0).lp_norm(T::of(2.0), Some(&f.fluid))?;

    let mut params = SimParams::for_grid(g, spec.nu, setup.t_final);
    params.snapshot_every = setup.t_final / T::of_usize(setup.snapshots);
    let solid = if geo.is_empty() { None } else { Some(&f.solid) };
    let ns = NsSolver::new(params, solid)?;
    let state = ns.initial_state(v0)?;

    let mut prev: Option<(T, Assembly<T>, T)> = None;
    let mut series = Vec::new();
    let (end, ledger) = ns.run(state, |s| {
        let k = setup
            .reference
            .index_of(s.time)
            .ok_or_else(|| Error::InvalidConfig(format!("no Euler snapshot at t = {}", s.time)))?;
        let d = snapshot_terms(setup, geo, &f, k, &s.u, spec.nu, &mut prev)?;
        series.push(d);
        Ok(())
    })?;
    rec.sup_error = series.iter().map(|d| d.error).fold(T::zero(), T::max);
    rec.ledger_violations = ledger.violations;
    rec.solid_max = ns.solid_max(&end.u);
    rec.series = series;
    Ok(())
}

fn snapshot_terms<T: Real>(
    setup: &StudySetup<T>,
    geo: &Geometry<T>,
    f: &Fields<T>,
    k: usize,
    un: &VectorField<T>,
    nu: T,
    prev: &mut Option<(T, Assembly<T>, T)>,
) -> Result<DiagnosticEnergy<T>> {
    let g = setup.grid;
    let t = setup.reference.times[k];
    let ue = setup.reference_u(k);
    let h = assemble_h_epsilon(&setup.cells, geo, &ue)?;
    let mut ueps = ue.weighted(&f.cut.phi);
    ueps.axpy(-T::one(), &h.h);
    let pe = pressure(&ue)?;

    let two = T::of(2.0);
    let fl = Some(&f.fluid);
    let w = un.sub(&ueps);
    let error = un.sub(&ue).lp_norm(two, fl)?;
    let w_l2 = w.lp_norm(two, fl)?;
    let corrector_gap = ueps.sub(&ue).lp_norm(two, fl)?;
    let triangle_ok = error <= (w_l2 + corrector_gap) * (T::one() + T::of(1e-12));

    let grads = |u: &VectorField<T>| [d_dx(&u.x, &g), d_dy(&u.x, &g), d_dx(&u.y, &g), d_dy(&u.y, &g)];
    let gw = grads(&w);
    let gs = grads(&ueps);
    let gu = grads(&ue);
    let px = d_dx(&pe.data, &g);
    let py = d_dy(&pe.data, &g);
    let h_t = prev.as_ref().map(|(tp, a, _)| {
        let mut d = h.h.sub(&a.h);
        d.scale(T::one() / (t - *tp));
        d
    });

    let (mut i1, mut i2, mut i3, mut j, mut h1, mut h2, mut gw2) =
        (T::zero(), T::zero(), T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
    for n in (0..g.len()).filter(|&n| f.fluid.cells[n]) {
        let wv = [w.x[n], w.y[n]];
        // (a . grad) b_i = a_x d_x b_i + a_y d_y b_i with gradient rows [dxb0, dyb0, dxb1, dyb1]
        let dir = |a: [T; 2], gb: &[Vec<T>; 4]| [a[0] * gb[0][n] + a[1] * gb[1][n], a[0] * gb[2][n] + a[1] * gb[3][n]];
        let dot = |a: [T; 2], b: [T; 2]| a[0] * b[0] + a[1] * b[1];
        i1 = i1 - dot(wv, dir(wv, &gs));
        let gap = [ueps.x[n] - ue.x[n], ueps.y[n] - ue.y[n]];
        i2 = i2 + dot(gap, dir([ueps.x[n], ueps.y[n]], &gw));
        i3 = i3 + dot(wv, dir([h.h.x[n], h.h.y[n]], &gu));
        j = j - nu * (0..4).map(|c| gw[c][n] * gs[c][n]).sum::<T>();
        h1 = h1 + f.cut.phi.data[n] * dot(wv, [px[n], py[n]]);
        if let Some(ht) = &h_t {
            h2 = h2 - dot(wv, [ht.x[n], ht.y[n]]);
        }
        gw2 = gw2 + (0..4).map(|c| gw[c][n] * gw[c][n]).sum::<T>();
    }
    let a = g.cell_area();
    let (i1, i2, i3, j, h1, h2, gw2) = (i1 * a, i2 * a, i3 * a, j * a, h1 * a, h2 * a, gw2 * a);
    let closure = match prev.as_ref() {
        Some((tp, _, wp)) => T::of(0.5) * (w_l2 * w_l2 - *wp * *wp) / (t - *tp) + nu * gw2 - (i1 + i2 + i3 + j + h1 + h2),
        None => T::zero(),
    };
    let cpl = if geo.is_empty() { T::zero() } else { coupling(&ue, &f.sleeve, f.grad_phi_l2, &h) };
    *prev = Some((t, h, w_l2));
    Ok(DiagnosticEnergy {
        time: t,
        error,
        w_l2,
        corrector_gap,
        triangle_ok,
        grad_w_sq: gw2,
        i1,
        i2,
        i3,
        j,
        h1,
        h2,
        closure,
        coupling: cpl,
    })
}

/// Ledger groups against their bound shapes, with fitted constants.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LedgerReport<T> {
    /// `3 nu / 4 + K2^2 eps sup_t coupling`; must stay below `nu`.
    pub coefficient: T,
    pub coefficient_ok: bool,
    pub k3: T,
    pub k4: T,
    pub k5: T,
    pub k7: T,
    pub k8: T,
    pub k9: T,
    pub all_finite: bool,
    pub triangle_ok: bool,
    /// `max |closure| / max(d/dt 0.5|W|^2 + nu |grad W|^2 scale)`.
    pub closure: T,
}

pub fn ledger_report<T: Real>(rec: &StudyRecord<T>) -> LedgerReport<T> {
    let nu = rec.nu;
    let e = rec.epsilon;
    let q = (T::one() + rec.mu) / T::of(2.0);
    let dq = rec.d_epsilon.powf(q);
    let d2q = dq * dq;
    let eighth = nu / T::of(8.0);
    let sup = |f: &dyn Fn(&DiagnosticEnergy<T>) -> T| rec.series.iter().map(f).fold(T::zero(), T::max);
    let coupling = sup(&|d| d.coupling);
    let coefficient = T::of(0.75) * nu + rec.k2 * rec.k2 * e * coupling;
    let c0 = rec.c0;
    let fit = |v: T, shape: T| if shape > T::zero() { v.max(T::zero()) / shape } else { T::zero() };
    let k3 = sup(&|d| fit(d.i1.abs() - c0 * (c0 * d.time).exp() * d.w_l2 * d.w_l2, e / dq * d.grad_w_sq));
    let k4 = sup(&|d| fit(d.i2.abs() - eighth * d.grad_w_sq, e * e / (nu * d2q)));
    let k5 = sup(&|d| fit(d.i3.abs() - eighth * d.grad_w_sq, e * e / (nu * dq)));
    let k7 = sup(&|d| fit(d.j.abs() - nu / T::of(4.0) * d.grad_w_sq, nu / d2q));
    let k8 = sup(&|d| fit(d.h1.abs() - eighth * d.grad_w_sq, e * e / (nu * d2q)));
    let k9 = sup(&|d| fit(d.h2.abs() - eighth * d.grad_w_sq, e * e * e / (nu * dq)));
    let all_finite = rec.series.iter().all(|d| {
        [d.i1, d.i2, d.i3, d.j, d.h1, d.h2, d.closure, d.grad_w_sq].iter().all(|v| v.is_finite())
    });
    let scale = sup(&|d| (nu * d.grad_w_sq).abs() + (d.i1 + d.i2 + d.i3 + d.j + d.h1 + d.h2).abs());
    let closure = if scale > T::zero() { sup(&|d| d.closure.abs()) / scale } else { T::zero() };
    LedgerReport {
        coefficient,
        coefficient_ok: coefficient < nu,
        k3,
        k4,
        k5,
        k7,
        k8,
        k9,
        all_finite,
        triangle_ok: rec.series.iter().all(|d| d.triangle_ok),
        closure,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RateFit<T> {
    /// Least-squares slope of `log sup_error` against `log bound_shape`.
    pub slope: T,
    pub intercept: T,
    /// `max sup_error / (bound_shape + initial_error)`.
    pub b_t: T,
    pub ratios: Vec<T>,
    pub residuals: Vec<T>,
    /// Errors nonincreasing (10% noise) as `nu` decreases.
    pub monotone: bool,
}

pub fn rate_fit<T: Real>(records: &[StudyRecord<T>]) -> Result<RateFit<T>> {
    let mut pts: Vec<&StudyRecord<T>> = records.iter().filter(|r| r.admissible && r.completed()).collect();
    if pts.len() < 3 {
        return Err(Error::InvalidConfig(format!("rate fit needs 3 completed admissible points, got {}", pts.len())));
    }
    pts.sort_by(|a, b| b.nu.partial_cmp(&a.nu).unwrap_or(std::cmp::Ordering::Equal));
    let xs: Vec<T> = pts.iter().map(|r| r.bound_shape.ln()).collect();
    let ys: Vec<T> = pts.iter().map(|r| r.sup_error.ln()).collect();
    if ys.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("rate fit needs positive errors".into()));
    }
    let n = T::of_usize(pts.len());
    let mx = xs.iter().copied().sum::<T>() / n;
    let my = ys.iter().copied().sum::<T>() / n;
    let sxx: T = xs.iter().map(|&x| (x - mx) * (x - mx)).sum();
    if !(sxx > T::of(1e-12)) {
        return Err(Error::InvalidConfig("degenerate sweep: all bound shapes coincide".into()));
    }
    let sxy: T = xs.iter().zip(&ys).map(|(&x, &y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals = xs.iter().zip(&ys).map(|(&x, &y)| y - (intercept + slope * x)).collect();
    let ratios: Vec<T> = pts.iter().map(|r| r.sup_error / (r.bound_shape + r.initial_error)).collect();
    let b_t = ratios.iter().copied().fold(T::zero(), T::max);
    let monotone = pts.windows(2).all(|w| w[1].sup_error <= w[0].sup_error * T::of(1.1));
    Ok(RateFit { slope, intercept, b_t, ratios, residuals, monotone })
}

/// Runs the points in parallel; finished records go through a single-writer
/// channel to `sink` in completion order. Returns records in input order.
pub fn run_sweep<T: Real>(
    setup: &StudySetup<T>,
    rule: Option<&CompatibilityRule<T>>,
    specs: &[PointSpec<T>],
    mut sink: impl FnMut(&StudyRecord<T>),
) -> Vec<StudyRecord<T>> {
    let (tx, rx) = mpsc::channel::<(usize, StudyRecord<T>)>();
    let mut out: Vec<Option<StudyRecord<T>>> = (0..specs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        scope.spawn(move || {
            specs.par_iter().enumerate().for_each_with(tx, |tx, (i, s)| {
                // the receiver outlives every sender
                let _ = tx.send((i, run_point(setup, rule, s)));
            });
        });
        for (i, r) in rx {
            sink(&r);
            out[i] = Some(r);
        }
    });
    out.into_iter().map(|r| r.expect("every point reports")).collect()
}

pub const CSV_HEADER: &str = "nu,epsilon,d_epsilon,mu,admissible,sup_error,bound_shape,initial_error,fitted_BT,wall_seconds";

pub fn csv_row<T: Real>(r: &StudyRecord<T>, b_t: Option<T>) -> String {
    let bt = b_t.map_or_else(|| "nan".to_string(), |v| format!("{:e}", v.to_f()));
    format!(
        "{:e},{:e},{:e},{},{},{:e},{:e},{:e},{},{:.3}",
        r.nu.to_f(),
        r.epsilon.to_f(),
        r.d_epsilon.to_f(),
        r.mu.to_f(),
        r.admissible,
        r.sup_error.to_f(),
        r.bound_shape.to_f(),
        r.initial_error.to_f(),
        bt,
        r.wall_seconds
    )
}

/// Outcome of [`run_study`].
#[derive(Clone, Debug, Serialize)]
pub struct StudyOutcome<T> {
    pub a: T,
    pub calibration: Option<Calibration<T>>,
    pub m0: T,
    pub k2: T,
    pub records: Vec<StudyRecord<T>>,
    pub controls: Vec<StudyRecord<T>>,
    pub fit: Option<RateFit<T>>,
    pub fit_error: Option<String>,
    pub ledgers: Vec<LedgerReport<T>>,
}

impl<T: Real> StudyOutcome<T> {
    pub fn csv(&self) -> String {
        let bt = self.fit.as_ref().map(|f| f.b_t);
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in self.records.iter().chain(&self.controls) {
            s.push_str(&csv_row(r, bt));
            s.push('\n');
        }
        s
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from("# Rate study\n\n");
        s.push_str(&format!("- A = {:e}{}\n", self.a.to_f(), if self.calibration.is_some() { " (calibrated)" } else { "" }));
        s.push_str(&format!("- M0 = {:e}, K2 = {:.4}\n", self.m0.to_f(), self.k2.to_f()));
        match (&self.fit, &self.fit_error) {
            (Some(f), _) => s.push_str(&format!(
                "- slope = {:.3}, B_T = {:.4e}, monotone in nu: {}\n",
                f.slope.to_f(),
                f.b_t.to_f(),
                f.monotone
            )),
            (None, Some(e)) => s.push_str(&format!("- rate fit unavailable: {e}\n")),
            _ => {}
        }
        s.push_str("\n| nu | eps | d | sup error | bound shape | initial error | coefficient / nu | K3 | status |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for (r, l) in self.records.iter().zip(&self.ledgers) {
            let status = r.skipped.clone().or_else(|| r.failure.clone()).unwrap_or_else(|| "ok".into());
            s.push_str(&format!(
                "| {:e} | {:.4} | {:.4} | {:.4e} | {:.4e} | {:.4e} | {:.3} | {:.3e} | {} |\n",
                r.nu.to_f(),
                r.epsilon.to_f(),
                r.d_epsilon.to_f(),
                r.sup_error.to_f(),
                r.bound_shape.to_f(),
                r.initial_error.to_f(),
                (l.coefficient / r.nu).to_f(),
                l.k3.to_f(),
                status
            ));
        }
        for r in &self.controls {
            s.push_str(&format!("\ncontrol (no obstacles), nu = {:e}: sup error {:.4e}\n", r.nu.to_f(), r.sup_error.to_f()));
        }
        s
    }
}

/// Full study: calibrate `A` if needed, tie `eps` to each `nu`, run, fit.
pub fn run_study<T: Real>(
    config: &StudyConfig<T>,
    setup: &StudySetup<T>,
    sink: impl FnMut(&StudyRecord<T>),
) -> Result<StudyOutcome<T>> {
    let calibration = match config.a {
        Some(_) => None,
        None => Some(calibrate(setup, &config.sweep.nu, &config.sweep.d_rule, 5)?),
    };
    let a = config.a.or(calibration.as_ref().map(|c| c.a)).expect("A given or calibrated");
    let rule = CompatibilityRule::new(a, setup.m0);
    let mut specs = Vec::new();
    for &nu in &config.sweep.nu {
        let eps = rule.tied_epsilon(nu, &config.sweep.d_rule, setup.mu)?;
        specs.push(PointSpec { nu, geometry: setup.geometry(eps, &config.sweep.d_rule)? });
    }
    let n_main = specs.len();
    if config.control {
        for &nu in &config.sweep.nu {
            let cfg = specs[0].geometry.config;
            specs.push(PointSpec { nu, geometry: Geometry::empty(cfg) });
        }
    }
    let mut all = run_sweep(setup, Some(&rule), &specs, sink);
    let controls = all.split_off(n_main);
    let (fit, fit_error) = match rate_fit(&all) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let ledgers = all.iter().map(ledger_report).collect();
    Ok(StudyOutcome { a, calibration, m0: setup.m0, k2: setup.k2, records: all, controls, fit, fit_error, ledgers })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn admissibility_is_the_closed_inequality() {
        let rule = CompatibilityRule::new(0.05f64, 1.0);
        let cfg = LatticeConfig::new(1e-3f64, 0.04, 1.0, ObstacleShape::Disk);
        assert!((cfg.density_ratio() - 0.025).abs() < 1e-15);
        assert!(rule.admissible(&cfg, 0.5));
        assert!(!rule.admissible(&cfg, 0.5 * (1.0 - 1e-9)));
        let inside = LatticeConfig::new(0.9e-3, 0.04, 1.0, ObstacleShape::Disk);
        assert!(rule.admissible(&inside, 0.5));
    }

    #[test]
    fn doubling_vorticity_halves_the_tied_epsilon() {
        let d = DRule::Fixed { d: 0.5f64 };
        let r1 = CompatibilityRule::new(2.0, 1.0);
        let r2 = CompatibilityRule::new(2.0, 2.0);
        let e1 = r1.tied_epsilon(1e-2, &d, 1.0).unwrap();
        let e2 = r2.tied_epsilon(1e-2, &d, 1.0).unwrap();
        assert!((e1 / e2 - 2.0).abs() < 1e-9);
        assert!((e1 - 2.0 * 1e-2 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn tied_epsilon_solves_power_rules() {
        let rule = CompatibilityRule::new(1.0f64, 1.0);
        let d = DRule::Power { alpha: 0.5 };
        let e = rule.tied_epsilon(0.1, &d, 0.0).unwrap();
        // eps / eps^(1/4) = 0.1
        assert!((e.powf(0.75) - 0.1).abs() < 1e-9);
        assert!(rule.tied_epsilon(0.1, &DRule::Equal, 1.0).is_err());
    }

    fn rec(nu: f64, err: f64, init: f64) -> StudyRecord<f64> {
        let geo = lattice_centers(LatticeConfig::new(0.1, 0.5, 1.0, ObstacleShape::Disk)).unwrap();
        let mut r = StudyRecord::blank(nu, &geo, 0.5, 1.0);
        r.sup_error = err;
        r.initial_error = init;
        r
    }

    #[test]
    fn rate_fit_recovers_a_power_law() {
        let recs: Vec<_> = [4e-3, 2e-3, 1e-3].iter().map(|&nu| rec(nu, 3.0 * (nu / 0.5f64).sqrt().powf(0.7), 0.0)).collect();
        let f = rate_fit(&recs).unwrap();
        assert!((f.slope - 0.7).abs() < 1e-9);
        assert!(f.monotone);
        for (r, q) in recs.iter().zip(&f.ratios) {
            assert!(r.sup_error <= f.b_t * (r.bound_shape + r.initial_error) * (1.0 + 1e-12));
            assert!(*q <= f.b_t);
        }
        assert!(f.residuals.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn rate_fit_rejects_degenerate_sweeps() {
        let two = vec![rec(4e-3, 1.0, 0.0), rec(2e-3, 0.5, 0.0)];
        assert!(rate_fit(&two).is_err());
        let flat = vec![rec(1e-3, 1.0, 0.0), rec(1e-3, 0.9, 0.0), rec(1e-3, 0.8, 0.0)];
        assert!(rate_fit(&flat).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let json = r#"{
            "omega0": [{"kind": "bump", "center": [0.0, 1.1], "radius": 0.1, "amplitude": 1.0}],
            "shape": {"kind": "disk"},
            "mu": 1.0,
            "sweep": {"nu": [0.004, 0.002, 0.001], "d_rule": {"rule": "fixed", "d": 0.5}, "T": 1.0},
            "grid": {"n": 256, "box": {"lo": [-1.0, -1.0], "length": 3.0}}
        }"#;
        let c = StudyConfig::<f64>::from_json(json).unwrap();
        assert!(c.a.is_none());
        assert_eq!(c.snapshots, 50);
        assert_eq!(c.ns_grid().unwrap().nx, 256);
        let back = StudyConfig::<f64>::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back.sweep.nu, c.sweep.nu);
    }
}
