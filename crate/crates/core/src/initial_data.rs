//! Corrected initial velocity in the perforated plane.
//!
//! For disk obstacles the correction is the classical image system: near obstacle
//! `k` the stream function of a vortex at `y` gains `(1/2pi) ln(|xi| / |xi - eta*|)`,
//! `xi = (x - z_k)/eps`, `eta = (y - z_k)/eps`, `eta* = eta/|eta|^2`, blended in by the
//! per-obstacle cutoff. General shapes go through a masked grid solve instead.

use std::f64::consts::PI;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{MatMut, Side};
use rayon::prelude::*;
use serde::Serialize;

use crate::biot_savart::{sample_blobs, BiotSavart, VorticityBlob};
use crate::cutoff::{base_cutoff, base_cutoff_grad, CutoffProfile};
use crate::fields::{perp_grad, poisson_freespace, Boundary, Grid, ScalarField, VectorField};
use crate::geometry::{lattice_centers, rasterize, DRule, Geometry, LatticeConfig, ObstacleShape, Region};
use crate::{Error, Real, Result};

/// Exterior map data for `K` the closed unit disk: `T = Id`, `beta = 1`, and
/// `T_ij(x) = (x - z_ij)/eps`.
#[derive(Clone, Copy, Debug)]
pub struct ConformalMapDisk<'a, T> {
    pub geometry: &'a Geometry<T>,
}

impl<'a, T: Real> ConformalMapDisk<'a, T> {
    pub fn new(geometry: &'a Geometry<T>) -> Result<Self> {
        if !geometry.config.shape.is_disk() {
            return Err(Error::Unsupported("image system needs disk obstacles".into()));
        }
        Ok(Self { geometry })
    }

    pub fn beta(&self) -> T {
        T::one()
    }

    pub fn map(&self, k: usize, x: [T; 2]) -> [T; 2] {
        self.geometry.to_reference(k, x)
    }

    /// Reflection across the unit circle.
    pub fn conjugate(y: [T; 2]) -> [T; 2] {
        let r2 = y[0] * y[0] + y[1] * y[1];
        [y[0] / r2, y[1] / r2]
    }
}

/// Midpoint quadrature of `omega_0`: node positions and `omega h^2` weights.
#[derive(Clone, Debug, Default)]
pub struct VorticitySource<T> {
    pub points: Vec<[T; 2]>,
    pub weights: Vec<T>,
}

impl<T: Real> VorticitySource<T> {
    /// Nonzero nodes of a sampled vorticity.
    pub fn from_field(omega: &ScalarField<T>) -> Self {
        let g = omega.grid;
        let w = g.cell_area();
        let mut s = Self::default();
        for j in 0..g.ny {
            for i in 0..g.nx {
                let v = omega.get(i, j);
                if v != T::zero() {
                    s.points.push(g.point(i, j));
                    s.weights.push(v * w);
                }
            }
        }
        s
    }

    /// Blobs sampled on the lattice `h Z^2` over the union of their support boxes.
    pub fn from_blobs(blobs: &[VorticityBlob<T>], h: T) -> Self {
        let mut s = Self::default();
        if blobs.is_empty() {
            return s;
        }
        let (mut lo, mut hi) = ([T::infinity(); 2], [T::neg_infinity(); 2]);
        for b in blobs {
            let r = b.support_radius();
            for a in 0..2 {
                lo[a] = lo[a].min(b.center[a] - r);
                hi[a] = hi[a].max(b.center[a] + r);
            }
        }
        let i0 = (lo[0] / h).floor().to_i64().unwrap_or(0);
        let i1 = (hi[0] / h).ceil().to_i64().unwrap_or(0);
        let j0 = (lo[1] / h).floor().to_i64().unwrap_or(0);
        let j1 = (hi[1] / h).ceil().to_i64().unwrap_or(0);
        for j in j0..=j1 {
            for i in i0..=i1 {
                let x = [h * T::of(i as f64), h * T::of(j as f64)];
                let v: T = blobs.iter().map(|b| b.value(x)).sum();
                if v != T::zero() {
                    s.points.push(x);
                    s.weights.push(v * h * h);
                }
            }
        }
        s
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn circulation(&self) -> T {
        self.weights.iter().copied().sum()
    }

    pub fn scaled(&self, a: T) -> Self {
        Self { points: self.points.clone(), weights: self.weights.iter().map(|&w| w * a).collect() }
    }

    /// Free-space velocity at `x` by direct summation.
    pub fn velocity(&self, x: [T; 2]) -> [T; 2] {
        let mut u = [T::zero(), T::zero()];
        for (y, &w) in self.points.iter().zip(&self.weights) {
            let (dx, dy) = (x[0] - y[0], x[1] - y[1]);
            let r2 = dx * dx + dy * dy;
            if r2 > T::zero() {
                u[0] = u[0] - w * dy / r2;
                u[1] = u[1] + w * dx / r2;
            }
        }
        let c = T::one() / (T::of(2.0) * T::PI());
        [u[0] * c, u[1] * c]
    }
}

fn check_clear<T: Real>(geometry: &Geometry<T>, source: &VorticitySource<T>) -> Result<()> {
    match source.points.iter().find(|&&y| geometry.in_solid(y)) {
        Some(y) => Err(Error::InvalidConfig(format!(
            "vorticity support reaches an obstacle at ({}, {})",
            y[0].to_f(),
            y[1].to_f()
        ))),
        None => Ok(()),
    }
}

/// Image potential `I` of obstacle `k` at reference point `xi` and its reference gradient.
pub fn image_terms<T: Real>(geometry: &Geometry<T>, source: &VorticitySource<T>, k: usize, xi: [T; 2]) -> (T, [T; 2]) {
    let mut pot = T::zero();
    let mut g = [T::zero(), T::zero()];
    let xr2 = xi[0] * xi[0] + xi[1] * xi[1];
    for (y, &w) in source.points.iter().zip(&source.weights) {
        let eta = geometry.to_reference(k, *y);
        let s = ConformalMapDisk::conjugate(eta);
        let d = [xi[0] - s[0], xi[1] - s[1]];
        let dr2 = d[0] * d[0] + d[1] * d[1];
        pot = pot + w * (xr2 / dr2).ln();
        g[0] = g[0] + w * (xi[0] / xr2 - d[0] / dr2);
        g[1] = g[1] + w * (xi[1] / xr2 - d[1] / dr2);
    }
    let c = T::one() / (T::of(2.0) * T::PI());
    (pot * c * T::of(0.5), [g[0] * c, g[1] * c])
}

/// The two nonzero pieces of `u_0 - v^eps` at one point of obstacle `k`'s sleeve.
fn w_pieces<T: Real>(geometry: &Geometry<T>, source: &VorticitySource<T>, k: usize, x: [T; 2]) -> ([T; 2], [T; 2]) {
    let e = geometry.config.epsilon;
    let xi = geometry.to_reference(k, x);
    let prof = CutoffProfile::Smoothstep;
    let phi = base_cutoff(xi, &prof);
    if phi == T::zero() {
        return ([T::zero(); 2], [T::zero(); 2]);
    }
    let gphi = base_cutoff_grad(xi, &prof);
    let (pot, gi) = image_terms(geometry, source, k, xi);
    // w2 = -I grad^perp phi_k, w4 = -phi_k grad^perp I, with grad_x = grad_xi / eps
    let w2 = [pot * gphi[1] / e, -pot * gphi[0] / e];
    let w4 = [phi * gi[1] / e, -phi * gi[0] / e];
    (w2, w4)
}

/// Corrected velocity `v^eps` at arbitrary points, with `u_0` by direct summation.
pub fn corrected_velocity_at<T: Real>(
    geometry: &Geometry<T>,
    source: &VorticitySource<T>,
    points: &[[T; 2]],
) -> Result<Vec<[T; 2]>> {
    ConformalMapDisk::new(geometry)?;
    check_clear(geometry, source)?;
    let two_e = T::of(2.0) * geometry.config.epsilon;
    Ok(points
        .par_iter()
        .map(|&x| {
            let mut v = source.velocity(x);
            for (k, z) in geometry.centers.iter().enumerate() {
                if (x[0] - z[0]).abs() < two_e && (x[1] - z[1]).abs() < two_e {
                    let (w2, w4) = w_pieces(geometry, source, k, x);
                    v[0] = v[0] - w2[0] - w4[0];
                    v[1] = v[1] - w2[1] - w4[1];
                }
            }
            v
        })
        .collect())
}

/// Per-node `w2`, `w4` on the sleeve part of `grid`.
fn w_fields<T: Real>(geometry: &Geometry<T>, source: &VorticitySource<T>, grid: &Grid<T>) -> (VectorField<T>, VectorField<T>) {
    let two_e = T::of(2.0) * geometry.config.epsilon;
    let patches: Vec<Vec<(usize, [T; 2], [T; 2])>> = geometry
        .centers
        .par_iter()
        .enumerate()
        .map(|(k, z)| {
            let (ilo, ihi) = grid.x_range(z[0] - two_e, z[0] + two_e);
            let (jlo, jhi) = grid.y_range(z[1] - two_e, z[1] + two_e);
            let mut out = Vec::new();
            for j in jlo..jhi {
                for i in ilo..ihi {
                    let x = grid.point(i, j);
                    if (x[0] - z[0]).abs() < two_e && (x[1] - z[1]).abs() < two_e {
                        let (w2, w4) = w_pieces(geometry, source, k, x);
                        out.push((grid.idx(i, j), w2, w4));
                    }
                }
            }
            out
        })
        .collect();
    let mut w2 = VectorField::zeros(*grid);
    let mut w4 = VectorField::zeros(*grid);
    for (id, a, b) in patches.into_iter().flatten() {
        w2.x[id] = a[0];
        w2.y[id] = a[1];
        w4.x[id] = b[0];
        w4.y[id] = b[1];
    }
    (w2, w4)
}

/// `v^eps = grad^perp psi^eps` on `grid` for disk obstacles, zero on the solid nodes.
/// The vorticity is sampled on `grid` and must sit in its inner half.
pub fn corrected_velocity_disk<T: Real>(
    geometry: &Geometry<T>,
    omega0: &[VorticityBlob<T>],
    grid: &Grid<T>,
) -> Result<VectorField<T>> {
    Ok(decompose(geometry, omega0, grid)?.v_eps)
}

/// Pieces of `u_0 - v^eps = w1 + w2 + w3 + w4` (disk: `w1 = w3 = 0`).
#[derive(Clone, Debug)]
pub struct WDecomposition<T> {
    pub u0: VectorField<T>,
    pub v_eps: VectorField<T>,
    pub w1: VectorField<T>,
    pub w2: VectorField<T>,
    pub w3: VectorField<T>,
    pub w4: VectorField<T>,
    /// `L^2(Omega^eps)` norms of `w1..w4`.
    pub norms: [T; 4],
    /// `||(u_0 - v^eps) - (w1 + w2 + w3 + w4)||_{L^2(Omega^eps)}`.
    pub residual: T,
}

fn decompose<T: Real>(geometry: &Geometry<T>, omega0: &[VorticityBlob<T>], grid: &Grid<T>) -> Result<WDecomposition<T>> {
    ConformalMapDisk::new(geometry)?;
    let omega = sample_blobs(omega0, grid);
    let source = VorticitySource::from_field(&omega);
    check_clear(geometry, &source)?;
    let u0 = BiotSavart::new(*grid).velocity(&omega)?;
    let (w2, w4) = w_fields(geometry, &source, grid);
    let solid = rasterize(geometry, grid, Region::Solid)?;
    let fluid = rasterize(geometry, grid, Region::Fluid)?;
    let mut v_eps = u0.sub(&w2);
    v_eps.axpy(-T::one(), &w4);
    v_eps.zero_on(&solid);
    let zero = VectorField::zeros(*grid);
    let two = T::of(2.0);
    let mut gap = u0.sub(&v_eps);
    gap.axpy(-T::one(), &w2);
    gap.axpy(-T::one(), &w4);
    let norms = [T::zero(), w2.lp_norm(two, Some(&fluid))?, T::zero(), w4.lp_norm(two, Some(&fluid))?];
    let residual = gap.lp_norm(two, Some(&fluid))?;
    Ok(WDecomposition { u0, v_eps, w1: zero.clone(), w2, w3: zero, w4, norms, residual })
}

/// Evaluates the four pieces of the initial-data defect on `grid` (disk obstacles).
pub fn w_decomposition<T: Real>(
    geometry: &Geometry<T>,
    omega0: &[VorticityBlob<T>],
    grid: &Grid<T>,
) -> Result<WDecomposition<T>> {
    decompose(geometry, omega0, grid)
}

/// `L^2` norms of `w2`, `w4` and `w2 + w4 = u_0 - v^eps` over the sleeve.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SleeveNorms<T> {
    pub w2: T,
    pub w4: T,
    pub total: T,
}

/// Sleeve norms by midpoint quadrature with `per_eps` nodes per `eps` on each
/// obstacle's cell. `u_0 - v^eps` vanishes off the sleeve, so these are the full
/// `L^2(Omega^eps)` norms.
pub fn sleeve_norms<T: Real>(geometry: &Geometry<T>, source: &VorticitySource<T>, per_eps: usize) -> Result<SleeveNorms<T>> {
    ConformalMapDisk::new(geometry)?;
    check_clear(geometry, source)?;
    let m = 4 * per_eps.max(2);
    let e = geometry.config.epsilon;
    let hr = T::of(4.0) / T::of_usize(m);
    let weight = (e * hr) * (e * hr);
    let shape = geometry.config.shape;
    let sums: Vec<[T; 3]> = (0..geometry.len())
        .into_par_iter()
        .map(|k| {
            let z = geometry.centers[k];
            let mut acc = [T::zero(); 3];
            for b in 0..m {
                for a in 0..m {
                    let xi = [T::of(-2.0) + (T::of_usize(a) + T::of(0.5)) * hr, T::of(-2.0) + (T::of_usize(b) + T::of(0.5)) * hr];
                    if shape.contains(xi) {
                        continue;
                    }
                    let x = [z[0] + e * xi[0], z[1] + e * xi[1]];
                    let (w2, w4) = w_pieces(geometry, source, k, x);
                    acc[0] = acc[0] + w2[0] * w2[0] + w2[1] * w2[1];
                    acc[1] = acc[1] + w4[0] * w4[0] + w4[1] * w4[1];
                    let (sx, sy) = (w2[0] + w4[0], w2[1] + w4[1]);
                    acc[2] = acc[2] + sx * sx + sy * sy;
                }
            }
            acc
        })
        .collect();
    let mut t = [T::zero(); 3];
    for s in sums {
        for c in 0..3 {
            t[c] = t[c] + s[c];
        }
    }
    Ok(SleeveNorms { w2: (t[0] * weight).sqrt(), w4: (t[1] * weight).sqrt(), total: (t[2] * weight).sqrt() })
}

/// `u_0^eps`: `lap psi = omega_0` off the obstacles, `psi = c_k` on obstacle `k`, the
/// constants fixed by zero circulation, `psi -> psi_0` on the edge of the box.
/// Returns `grad^perp psi`, zero on the solid nodes.
pub fn u0_eps_grid<T: Real>(geometry: &Geometry<T>, omega0: &[VorticityBlob<T>], grid: &Grid<T>) -> Result<VectorField<T>> {
    if grid.boundary != Boundary::Open {
        return Err(Error::InvalidConfig("u0_eps_grid needs an open grid".into()));
    }
    let omega = sample_blobs(omega0, grid);
    check_clear(geometry, &VorticitySource::from_field(&omega))?;
    let psi0 = poisson_freespace(&omega)?;
    if geometry.is_empty() {
        return Ok(perp_grad(&psi0));
    }
    let solid = rasterize(geometry, grid, Region::Solid)?;
    let (nx, ny) = (grid.nx, grid.ny);
    // owner[k]: obstacle index for solid nodes
    const FREE: usize = usize::MAX;
    let mut owner = vec![FREE; grid.len()];
    let two_e = T::of(2.0) * geometry.config.epsilon;
    for (k, z) in geometry.centers.iter().enumerate() {
        let (ilo, ihi) = grid.x_range(z[0] - two_e, z[0] + two_e);
        let (jlo, jhi) = grid.y_range(z[1] - two_e, z[1] + two_e);
        for j in jlo..jhi {
            for i in ilo..ihi {
                let id = grid.idx(i, j);
                if solid.cells[id] {
                    if i == 0 || j == 0 || i + 1 == nx || j + 1 == ny {
                        return Err(Error::InvalidConfig("obstacle touches the edge of the grid".into()));
                    }
                    owner[id] = k;
                }
            }
        }
    }
    let mut unknown = vec![FREE; grid.len()];
    let mut n = 0;
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            let id = grid.idx(i, j);
            if owner[id] == FREE {
                unknown[id] = n;
                n += 1;
            }
        }
    }
    let mut trip = Vec::with_capacity(5 * n);
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            let id = grid.idx(i, j);
            let r = unknown[id];
            if r == FREE {
                continue;
            }
            trip.push(Triplet::new(r, r, 4.0));
            for nb in [id - 1, id + 1, id - nx, id + nx] {
                if unknown[nb] != FREE {
                    trip.push(Triplet::new(r, unknown[nb], -1.0));
                }
            }
        }
    }
    let a = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip).map_err(|e| Error::Factorization(format!("{e:?}")))?;
    let llt = a.sp_cholesky(Side::Lower).map_err(|e| Error::Factorization(format!("{e:?}")))?;
    // harmonic chi with Dirichlet data `g` on the solid nodes (zero on the outer ring)
    let harmonic = |g: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut b = vec![0.0; n];
        for j in 1..ny - 1 {
            for i in 1..nx - 1 {
                let id = grid.idx(i, j);
                if unknown[id] == FREE {
                    continue;
                }
                for nb in [id - 1, id + 1, id - nx, id + nx] {
                    if owner[nb] != FREE {
                        b[unknown[id]] += g(nb);
                    }
                }
            }
        }
        llt.solve_in_place(MatMut::from_column_major_slice_mut(&mut b, n, 1));
        b
    };
    let nobs = geometry.len();
    let base = harmonic(&|id| -psi0.data[id].to_f());
    let basis: Vec<Vec<f64>> = (0..nobs).into_par_iter().map(|k| harmonic(&|id| if owner[id] == k { 1.0 } else { 0.0 })).collect();
    // discrete flux of psi out of obstacle k over its solid-fluid links vanishes
    let mut links: Vec<Vec<usize>> = vec![Vec::new(); nobs];
    for (id, &k) in owner.iter().enumerate() {
        if k == FREE {
            continue;
        }
        for nb in [id - 1, id + 1, id - nx, id + nx] {
            if owner[nb] == FREE {
                links[k].push(nb);
            }
        }
    }
    let at = |v: &[f64], id: usize| if unknown[id] == FREE { 0.0 } else { v[unknown[id]] };
    let m = faer::Mat::<f64>::from_fn(nobs, nobs, |k, q| {
        let s: f64 = links[k].iter().map(|&f| at(&basis[q], f)).sum();
        if k == q {
            s - links[k].len() as f64
        } else {
            s
        }
    });
    let rhs = faer::Mat::<f64>::from_fn(nobs, 1, |k, _| -links[k].iter().map(|&f| psi0.data[f].to_f() + at(&base, f)).sum::<f64>());
    let c = m.partial_piv_lu().solve(&rhs);
    let consts: Vec<f64> = (0..nobs).map(|k| c[(k, 0)]).collect();
    let resid = (&m * &c - &rhs).norm_l2();
    if consts.iter().any(|v| !v.is_finite()) || resid > 1e-8 * rhs.norm_l2().max(1e-300) {
        return Err(Error::Singular);
    }
    let mut psi = psi0.clone();
    for id in 0..grid.len() {
        if owner[id] != FREE {
            psi.data[id] = T::of(consts[owner[id]]);
        } else if unknown[id] != FREE {
            let r = unknown[id];
            let chi = base[r] + consts.iter().zip(&basis).map(|(c, b)| c * b[r]).sum::<f64>();
            psi.data[id] = psi.data[id] + T::of(chi);
        }
    }
    let mut u = perp_grad(&psi);
    u.zero_on(&solid);
    Ok(u)
}

/// Options of [`measure_initial_rate`].
#[derive(Clone, Copy, Debug)]
pub struct InitialRateOptions<T> {
    /// Sleeve quadrature nodes per `eps`.
    pub per_eps: usize,
    /// Spacing of the vorticity quadrature.
    pub source_h: T,
    /// Also solve for `u_0^eps` on a grid of this spacing (capped at `eps/8`).
    pub grid_h: Option<T>,
}

impl<T: Real> Default for InitialRateOptions<T> {
    fn default() -> Self {
        Self { per_eps: 16, source_h: T::of(0.01), grid_h: None }
    }
}

/// One point of the initial-data sweep.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct InitialRateRecord<T> {
    pub epsilon: T,
    pub d_epsilon: T,
    pub mu: T,
    /// `||v^eps - u_0||_{L^2(Omega^eps)}`.
    pub l2_error: T,
    pub w2_l2: T,
    pub w4_l2: T,
    /// `eps |ln eps| / d^((1+mu)/2)`.
    pub bound_shape: T,
    pub ratio: T,
    /// `||u_0^eps - u_0||_{L^2(Omega^eps)}` when the grid solve ran.
    pub grid_error: Option<T>,
}

/// Sweeps `eps` at fixed `omega_0`, shape and `mu`.
pub fn measure_initial_rate<T: Real>(
    omega0: &[VorticityBlob<T>],
    shape: ObstacleShape<T>,
    mu: T,
    epsilons: &[T],
    rule: DRule<T>,
    opts: InitialRateOptions<T>,
) -> Result<Vec<InitialRateRecord<T>>> {
    let source = VorticitySource::from_blobs(omega0, opts.source_h);
    epsilons
        .iter()
        .map(|&e| {
            let cfg = LatticeConfig::new(e, rule.d_for(e), mu, shape);
            cfg.validate()?;
            let geometry = lattice_centers(cfg)?;
            let norms = sleeve_norms(&geometry, &source, opts.per_eps)?;
            let bound_shape = e * e.ln().abs() / cfg.d_epsilon.powf((T::one() + mu) / T::of(2.0));
            let grid_error = match opts.grid_h {
                Some(h) => Some(grid_gap(&geometry, omega0, h.min(e / T::of(8.0)))?),
                None => None,
            };
            Ok(InitialRateRecord {
                epsilon: e,
                d_epsilon: cfg.d_epsilon,
                mu,
                l2_error: norms.total,
                w2_l2: norms.w2,
                w4_l2: norms.w4,
                bound_shape,
                ratio: norms.total / bound_shape,
                grid_error,
            })
        })
        .collect()
}

/// `||u_0^eps - u_0||` on a box holding the lattice and the vorticity in its inner half.
fn grid_gap<T: Real>(geometry: &Geometry<T>, omega0: &[VorticityBlob<T>], h: T) -> Result<T> {
    let two_e = T::of(2.0) * geometry.config.epsilon;
    let (mut lo, mut hi) = ([T::infinity(); 2], [T::neg_infinity(); 2]);
    for z in &geometry.centers {
        for a in 0..2 {
            lo[a] = lo[a].min(z[a] - two_e);
            hi[a] = hi[a].max(z[a] + two_e);
        }
    }
    for b in omega0 {
        let r = b.support_radius();
        for a in 0..2 {
            lo[a] = lo[a].min(b.center[a] - r);
            hi[a] = hi[a].max(b.center[a] + r);
        }
    }
    let half = T::of(0.5);
    let c = [(lo[0] + hi[0]) * half, (lo[1] + hi[1]) * half];
    let w = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let grid = Grid::covering([c[0] - w, c[1] - w], [c[0] + w, c[1] + w], h, Boundary::Open)?;
    let u0e = u0_eps_grid(geometry, omega0, &grid)?;
    let u0 = BiotSavart::new(grid).velocity(&sample_blobs(omega0, &grid))?;
    let fluid = rasterize(geometry, &grid, Region::Fluid)?;
    u0e.sub(&u0).lp_norm(T::of(2.0), Some(&fluid))
}

/// Circulation `oint v . tau ds` of `v^eps` around obstacle `k` on the circle of
/// radius `rho eps` (trapezoidal rule, `m` points).
pub fn circulation_around<T: Real>(geometry: &Geometry<T>, source: &VorticitySource<T>, k: usize, rho: T, m: usize) -> Result<T> {
    let z = geometry.centers[k];
    let r = rho * geometry.config.epsilon;
    let pts: Vec<[T; 2]> = (0..m)
        .map(|i| {
            let t = T::of(2.0 * PI * i as f64 / m as f64);
            [z[0] + r * t.cos(), z[1] + r * t.sin()]
        })
        .collect();
    let v = corrected_velocity_at(geometry, source, &pts)?;
    let ds = T::of(2.0 * PI / m as f64) * r;
    Ok(pts
        .iter()
        .zip(&v)
        .map(|(p, v)| {
            let (tx, ty) = (-(p[1] - z[1]) / r, (p[0] - z[0]) / r);
            v[0] * tx + v[1] * ty
        })
        .sum::<T>()
        * ds)
}
