//! Divergence correctors on the reference cell and their assembly on the lattice.
//!
//! The cell problem `div h = f` in `U = (-2,2)^2 \ K`, `h = 0` on the boundary, is
//! solved for the minimal-energy `h` on a staggered (MAC) grid: face unknowns,
//! cell-centred divergence. The velocity block is factorized once by sparse
//! Cholesky and the Schur complement is inverted by conjugate gradients.

use std::marker::PhantomData;

use faer::linalg::solvers::SolveCore;
use faer::sparse::linalg::solvers::Llt;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Conj, MatMut, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cutoff::{base_cutoff_grad, CutoffProfile};
use crate::fields::{ScalarField, VectorField};
use crate::geometry::{Geometry, ObstacleShape};
use crate::{Error, Real, Result};

/// Cells per side of the reference-cell grid.
pub const CELL_RESOLUTION: usize = 128;
/// Required relative divergence residual of a cell solve.
pub const RESIDUAL_TOL: f64 = 1e-8;
/// Largest `|mean f| / mean |f|` accepted (and removed) before solving.
pub const MEAN_TOL: f64 = 1e-3;

const CG_TOL: f64 = 1e-11;
const CG_MAX_ITER: usize = 4000;
const NONE: usize = usize::MAX;

/// Right-hand side on the fluid cells of a [`CellSolver`] grid.
#[derive(Clone, Debug)]
pub struct CellProblem<T> {
    pub rhs: Vec<T>,
    /// Relative residual at which the iteration stops.
    pub tolerance: T,
}

impl<T: Real> CellProblem<T> {
    pub fn new(rhs: Vec<T>) -> Self {
        Self { rhs, tolerance: T::of(CG_TOL) }
    }
}

/// Factorized discretization of the reference cell for one obstacle shape.
pub struct CellSolver<T> {
    shape: ObstacleShape<T>,
    n: usize,
    hc: f64,
    fluid_index: Vec<usize>,
    fluid_cells: Vec<usize>,
    xface: Vec<usize>,
    yface: Vec<usize>,
    unknowns: usize,
    matrix: Vec<(usize, usize, f64)>,
    llt: Llt<usize, f64>,
    _scalar: PhantomData<T>,
}

impl<T: Real> std::fmt::Debug for CellSolver<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CellSolver")
            .field("shape", &self.shape)
            .field("n", &self.n)
            .field("fluid_cells", &self.fluid_cells.len())
            .field("unknowns", &self.unknowns)
            .finish()
    }
}

impl<T: Real> CellSolver<T> {
    pub fn new(shape: ObstacleShape<T>) -> Result<Self> {
        Self::with_resolution(shape, CELL_RESOLUTION)
    }

    pub fn with_resolution(shape: ObstacleShape<T>, n: usize) -> Result<Self> {
        shape.validate()?;
        if n < 16 || !n.is_multiple_of(4) {
            return Err(Error::InvalidConfig(format!("cell resolution {n} must be a multiple of 4, at least 16")));
        }
        let hc = 4.0 / n as f64;
        let mut fluid_index = vec![NONE; n * n];
        let mut fluid_cells = Vec::new();
        for b in 0..n {
            for a in 0..n {
                let c = [T::of(-2.0 + (a as f64 + 0.5) * hc), T::of(-2.0 + (b as f64 + 0.5) * hc)];
                if !shape.contains(c) {
                    fluid_index[a + n * b] = fluid_cells.len();
                    fluid_cells.push(a + n * b);
                }
            }
        }
        let fluid = |a: usize, b: usize| fluid_index[a + n * b] != NONE;
        let mut unknowns = 0;
        let mut xface = vec![NONE; (n + 1) * n];
        for b in 0..n {
            for a in 1..n {
                if fluid(a - 1, b) && fluid(a, b) {
                    xface[a + (n + 1) * b] = unknowns;
                    unknowns += 1;
                }
            }
        }
        let mut yface = vec![NONE; n * (n + 1)];
        for b in 1..n {
            for a in 0..n {
                if fluid(a, b - 1) && fluid(a, b) {
                    yface[a + n * b] = unknowns;
                    unknowns += 1;
                }
            }
        }
        // graph Laplacian of each velocity component with homogeneous Dirichlet data
        let mut matrix = Vec::with_capacity(5 * unknowns);
        let mut push_block = |ids: &[usize], w: usize, h: usize| {
            for b in 0..h {
                for a in 0..w {
                    let me = ids[a + w * b];
                    if me == NONE {
                        continue;
                    }
                    matrix.push((me, me, 4.0));
                    let mut link = |aa: isize, bb: isize| {
                        if aa >= 0 && bb >= 0 && (aa as usize) < w && (bb as usize) < h {
                            let other = ids[aa as usize + w * bb as usize];
                            if other != NONE {
                                matrix.push((me, other, -1.0));
                            }
                        }
                    };
                    let (ai, bi) = (a as isize, b as isize);
                    link(ai - 1, bi);
                    link(ai + 1, bi);
                    link(ai, bi - 1);
                    link(ai, bi + 1);
                }
            }
        };
        push_block(&xface, n + 1, n);
        push_block(&yface, n, n + 1);
        let triplets: Vec<Triplet<usize, usize, f64>> =
            matrix.iter().map(|&(r, c, v)| Triplet::new(r, c, v)).collect();
        let a = SparseColMat::<usize, f64>::try_new_from_triplets(unknowns, unknowns, &triplets)
            .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        let llt = a.sp_cholesky(Side::Lower).map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Ok(Self {
            shape,
            n,
            hc,
            fluid_index,
            fluid_cells,
            xface,
            yface,
            unknowns,
            matrix,
            llt,
            _scalar: PhantomData,
        })
    }

    pub fn shape(&self) -> &ObstacleShape<T> {
        &self.shape
    }

    pub fn resolution(&self) -> usize {
        self.n
    }

    /// Cell width in reference units.
    pub fn cell_width(&self) -> T {
        T::of(self.hc)
    }

    pub fn fluid_count(&self) -> usize {
        self.fluid_cells.len()
    }

    pub fn unknown_count(&self) -> usize {
        self.unknowns
    }

    /// Centres of the fluid cells, in the order used by right-hand sides.
    pub fn fluid_centers(&self) -> Vec<[T; 2]> {
        self.fluid_cells.iter().map(|&c| self.cell_center(c % self.n, c / self.n)).collect()
    }

    pub fn cell_center(&self, a: usize, b: usize) -> [T; 2] {
        [T::of(-2.0 + (a as f64 + 0.5) * self.hc), T::of(-2.0 + (b as f64 + 0.5) * self.hc)]
    }

    pub fn is_fluid(&self, a: usize, b: usize) -> bool {
        self.fluid_index[a + self.n * b] != NONE
    }

    /// Samples `f` at the fluid cell centres.
    pub fn sample_rhs(&self, f: impl Fn([T; 2]) -> T) -> Vec<T> {
        self.fluid_centers().into_iter().map(f).collect()
    }

    /// Quadrature integral of a fluid-cell function over `U`.
    pub fn integrate(&self, f: &[T]) -> T {
        f.iter().copied().sum::<T>() * T::of(self.hc * self.hc)
    }

    /// `L^p` norm over `U` of a fluid-cell function.
    pub fn rhs_norm(&self, f: &[T], p: T) -> T {
        let w = T::of(self.hc * self.hc);
        if p.is_infinite() {
            return f.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        }
        (f.iter().map(|v| v.abs().powf(p)).sum::<T>() * w).powf(p.recip())
    }

    #[inline]
    fn xf(&self, a: usize, b: usize) -> usize {
        self.xface[a + (self.n + 1) * b]
    }

    #[inline]
    fn yf(&self, a: usize, b: usize) -> usize {
        self.yface[a + self.n * b]
    }

    /// Discrete divergence of face values, per fluid cell.
    fn div_faces(&self, faces: &[f64]) -> Vec<f64> {
        let at = |id: usize| if id == NONE { 0.0 } else { faces[id] };
        self.fluid_cells
            .iter()
            .map(|&c| {
                let (a, b) = (c % self.n, c / self.n);
                (at(self.xf(a + 1, b)) - at(self.xf(a, b)) + at(self.yf(a, b + 1)) - at(self.yf(a, b))) / self.hc
            })
            .collect()
    }

    /// Adjoint of [`Self::div_faces`].
    fn div_adjoint(&self, p: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; self.unknowns];
        let cell = |a: usize, b: usize| p[self.fluid_index[a + n * b]];
        for b in 0..n {
            for a in 1..n {
                let id = self.xf(a, b);
                if id != NONE {
                    out[id] = (cell(a - 1, b) - cell(a, b)) / self.hc;
                }
            }
        }
        for b in 1..n {
            for a in 0..n {
                let id = self.yf(a, b);
                if id != NONE {
                    out[id] = (cell(a, b - 1) - cell(a, b)) / self.hc;
                }
            }
        }
        out
    }

    fn velocity_solve(&self, rhs: &mut [f64]) {
        let m = MatMut::from_column_major_slice_mut(rhs, self.unknowns, 1);
        self.llt.solve_in_place_with_conj(Conj::No, m);
    }

    fn schur(&self, p: &[f64]) -> Vec<f64> {
        let mut v = self.div_adjoint(p);
        self.velocity_solve(&mut v);
        self.div_faces(&v)
    }

    /// Dirichlet energy `faces^T A faces` of a face field.
    pub fn energy(&self, faces: &[f64]) -> f64 {
        self.matrix.iter().map(|&(r, c, v)| faces[r] * v * faces[c]).sum()
    }

    /// Samples a vector field on the unknown faces (x-faces take the first
    /// component, y-faces the second).
    pub fn faces_from_fn(&self, g: impl Fn([T; 2]) -> [T; 2]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; self.unknowns];
        for b in 0..n {
            for a in 0..=n {
                let id = self.xf(a, b);
                if id != NONE {
                    let x = [T::of(-2.0 + a as f64 * self.hc), T::of(-2.0 + (b as f64 + 0.5) * self.hc)];
                    out[id] = g(x)[0].to_f();
                }
            }
        }
        for b in 0..=n {
            for a in 0..n {
                let id = self.yf(a, b);
                if id != NONE {
                    let x = [T::of(-2.0 + (a as f64 + 0.5) * self.hc), T::of(-2.0 + b as f64 * self.hc)];
                    out[id] = g(x)[1].to_f();
                }
            }
        }
        out
    }

    /// Divergence of face values as a fluid-cell function.
    pub fn divergence(&self, faces: &[f64]) -> Vec<T> {
        self.div_faces(faces).into_iter().map(T::of).collect()
    }

    /// Minimal-energy solution of the discrete `div h = f`, `h = 0` on the boundary.
    pub fn solve(&self, problem: &CellProblem<T>) -> Result<CellSolution<T>> {
        let m = self.fluid_cells.len();
        if problem.rhs.len() != m {
            return Err(Error::InvalidConfig(format!("{} rhs values for {} fluid cells", problem.rhs.len(), m)));
        }
        let f: Vec<f64> = problem.rhs.iter().map(|v| v.to_f()).collect();
        let mean = f.iter().sum::<f64>() / m as f64;
        let scale = f.iter().map(|v| v.abs()).sum::<f64>() / m as f64;
        if mean.abs() > MEAN_TOL * scale {
            return Err(Error::NonZeroMean { mean: mean * m as f64 * self.hc * self.hc });
        }
        let f: Vec<f64> = f.iter().map(|v| v - mean).collect();
        let fnorm = dot(&f, &f).sqrt();
        if fnorm == 0.0 {
            return Ok(self.solution_from_faces(vec![0.0; self.unknowns], 0, 0.0, mean));
        }
        // S p = -f on the mean-free subspace, then h = -A^{-1} D^T p
        let tol = problem.tolerance.to_f().max(1e-15);
        let mut p = vec![0.0; m];
        let mut r: Vec<f64> = f.iter().map(|v| -v).collect();
        let mut d = r.clone();
        let mut rr = dot(&r, &r);
        let mut it = 0;
        while rr.sqrt() > tol * fnorm {
            if it == CG_MAX_ITER {
                return Err(Error::NoConvergence { iterations: it, residual: rr.sqrt() / fnorm });
            }
            let q = self.schur(&d);
            let alpha = rr / dot(&d, &q);
            for k in 0..m {
                p[k] += alpha * d[k];
                r[k] -= alpha * q[k];
            }
            remove_mean(&mut r);
            let rr_new = dot(&r, &r);
            let beta = rr_new / rr;
            for k in 0..m {
                d[k] = r[k] + beta * d[k];
            }
            rr = rr_new;
            it += 1;
        }
        let mut faces = self.div_adjoint(&p);
        self.velocity_solve(&mut faces);
        faces.iter_mut().for_each(|v| *v = -*v);
        let div = self.div_faces(&faces);
        let res = div.iter().zip(&f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / fnorm;
        if res > RESIDUAL_TOL {
            return Err(Error::NoConvergence { iterations: it, residual: res });
        }
        Ok(self.solution_from_faces(faces, it, res, mean))
    }

    fn solution_from_faces(&self, faces: Vec<f64>, iterations: usize, residual: f64, mean_removed: f64) -> CellSolution<T> {
        let n = self.n;
        let at = |id: usize| if id == NONE { 0.0 } else { faces[id] };
        let mut cx = vec![T::zero(); (n + 1) * (n + 1)];
        let mut cy = vec![T::zero(); (n + 1) * (n + 1)];
        for b in 0..=n {
            for a in 0..=n {
                let wet = a > 0 && b > 0 && a < n && b < n
                    && self.is_fluid(a - 1, b - 1)
                    && self.is_fluid(a, b - 1)
                    && self.is_fluid(a - 1, b)
                    && self.is_fluid(a, b);
                if !wet {
                    continue;
                }
                let k = a + (n + 1) * b;
                cx[k] = T::of(0.5 * (at(self.xf(a, b - 1)) + at(self.xf(a, b))));
                cy[k] = T::of(0.5 * (at(self.yf(a - 1, b)) + at(self.yf(a, b))));
            }
        }
        CellSolution { n, hc: self.hc, shape: self.shape, corners_x: cx, corners_y: cy, faces, iterations, residual, mean_removed }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn remove_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Solves one cell problem.
pub fn solve_cell_divergence<T: Real>(solver: &CellSolver<T>, problem: &CellProblem<T>) -> Result<CellSolution<T>> {
    solver.solve(problem)
}

/// A cell corrector: face values plus a nodal (corner) representation that is
/// exactly zero on the cell boundary and on every corner touching a solid cell.
#[derive(Clone, Debug)]
pub struct CellSolution<T> {
    n: usize,
    hc: f64,
    shape: ObstacleShape<T>,
    corners_x: Vec<T>,
    corners_y: Vec<T>,
    pub faces: Vec<f64>,
    pub iterations: usize,
    /// Relative residual `||div h - f|| / ||f||` of the mean-free right-hand side.
    pub residual: f64,
    /// Mean of the right-hand side removed before solving.
    pub mean_removed: f64,
}

impl<T: Real> CellSolution<T> {
    pub fn corner(&self, a: usize, b: usize) -> [T; 2] {
        let k = a + (self.n + 1) * b;
        [self.corners_x[k], self.corners_y[k]]
    }

    /// Largest corner magnitude on the outer square.
    pub fn outer_boundary_max(&self) -> T {
        let n = self.n;
        let mut m = T::zero();
        for k in 0..=n {
            for (a, b) in [(k, 0), (k, n), (0, k), (n, k)] {
                let c = self.corner(a, b);
                m = m.max(c[0].abs()).max(c[1].abs());
            }
        }
        m
    }

    /// Bilinear interpolation of the corner values at reference point `xi`; zero
    /// outside the cell and on the obstacle.
    pub fn eval(&self, xi: [T; 2]) -> [T; 2] {
        let two = T::of(2.0);
        if !(xi[0].abs() <= two && xi[1].abs() <= two) || self.shape.contains(xi) {
            return [T::zero(), T::zero()];
        }
        let hc = T::of(self.hc);
        let n = self.n;
        let loc = |s: T| -> (usize, T) {
            let u = (s + two) / hc;
            let f = u.floor().min(T::of_usize(n - 1)).max(T::zero());
            (f.to_usize().unwrap_or(0), u - f)
        };
        let (a, tx) = loc(xi[0]);
        let (b, ty) = loc(xi[1]);
        let w = [
            ((a, b), (T::one() - tx) * (T::one() - ty)),
            ((a + 1, b), tx * (T::one() - ty)),
            ((a, b + 1), (T::one() - tx) * ty),
            ((a + 1, b + 1), tx * ty),
        ];
        let mut out = [T::zero(), T::zero()];
        for ((i, j), c) in w {
            let v = self.corner(i, j);
            out[0] = out[0] + v[0] * c;
            out[1] = out[1] + v[1] * c;
        }
        out
    }

    /// Cell-centre values and gradients (Frobenius) at physical scale `s`
    /// (reference coordinates multiplied by `s`).
    fn cell_samples(&self, s: T) -> impl Iterator<Item = (T, T)> + '_ {
        let n = self.n;
        let h = T::of(self.hc) * s;
        let half = T::of(0.5);
        let quarter = T::of(0.25);
        (0..n * n).map(move |k| {
            let (a, b) = (k % n, k / n);
            let c00 = self.corner(a, b);
            let c10 = self.corner(a + 1, b);
            let c01 = self.corner(a, b + 1);
            let c11 = self.corner(a + 1, b + 1);
            let mut val = T::zero();
            let mut g2 = T::zero();
            for m in 0..2 {
                let v = quarter * (c00[m] + c10[m] + c01[m] + c11[m]);
                let dx = half * (c10[m] + c11[m] - c00[m] - c01[m]) / h;
                let dy = half * (c01[m] + c11[m] - c00[m] - c10[m]) / h;
                val = val + v * v;
                g2 = g2 + dx * dx + dy * dy;
            }
            (val.sqrt(), g2.sqrt())
        })
    }

    fn power_sums(&self, p: T, s: T) -> (T, T) {
        let w = (T::of(self.hc) * s).powi(2);
        let (mut a, mut b) = (T::zero(), T::zero());
        for (v, g) in self.cell_samples(s) {
            a = a + v.powf(p);
            b = b + g.powf(p);
        }
        (a * w, b * w)
    }

    /// `||h||_{L^p(U)}`.
    pub fn lp_norm(&self, p: T) -> T {
        self.power_sums(p, T::one()).0.powf(p.recip())
    }

    /// `||grad h||_{L^p(U)}`.
    pub fn grad_lp_norm(&self, p: T) -> T {
        self.power_sums(p, T::one()).1.powf(p.recip())
    }

    /// `(||h||_p^p + ||grad h||_p^p)^(1/p)` on `U`.
    pub fn w1p_norm(&self, p: T) -> T {
        let (a, b) = self.power_sums(p, T::one());
        (a + b).powf(p.recip())
    }

    /// Difference of two solutions on the same cell grid.
    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for k in 0..out.corners_x.len() {
            out.corners_x[k] = out.corners_x[k] - other.corners_x[k];
            out.corners_y[k] = out.corners_y[k] - other.corners_y[k];
        }
        for (a, b) in out.faces.iter_mut().zip(&other.faces) {
            *a -= b;
        }
        out
    }
}

/// The `epsilon`-weighted Sobolev norm `(eps^-p ||f||_p^p + ||grad f||_p^p)^(1/p)` on the sleeve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaledSobolevNorm<T> {
    pub epsilon: T,
    pub p: T,
}

impl<T: Real> ScaledSobolevNorm<T> {
    /// Evaluated from reference-cell norms: `(sum eps^(2-p) ||h_ij||^p_{W^{1,p}(U)})^(1/p)`.
    pub fn from_reference(&self, cells: &[CellSolution<T>]) -> T {
        let (e, p) = (self.epsilon, self.p);
        let s: T = cells.iter().map(|c| c.w1p_norm(p).powf(p)).sum();
        (e.powf(T::of(2.0) - p) * s).powf(p.recip())
    }

    /// Evaluated in physical units: each cell is laid out with spacing `eps * hc`.
    pub fn physical(&self, cells: &[CellSolution<T>]) -> T {
        let (e, p) = (self.epsilon, self.p);
        let mut total = T::zero();
        for c in cells {
            let (a, b) = c.power_sums(p, e);
            total = total + a / e.powf(p) + b;
        }
        total.powf(p.recip())
    }
}

/// Corrector `h^eps` assembled on a physical grid, with the per-cell solutions.
#[derive(Clone, Debug)]
pub struct Assembly<T> {
    pub h: VectorField<T>,
    pub cells: Vec<CellSolution<T>>,
    pub epsilon: T,
}

impl<T: Real> Assembly<T> {
    /// `||h^eps||_{L^p}` from the cell solutions (exact change of variables).
    pub fn lp_norm(&self, p: T) -> T {
        let e2 = self.epsilon * self.epsilon;
        let s: T = self.cells.iter().map(|c| c.lp_norm(p).powf(p)).sum();
        (e2 * s).powf(p.recip())
    }

    /// `||grad h^eps||_{L^p}` from the cell solutions.
    pub fn grad_lp_norm(&self, p: T) -> T {
        let w = self.epsilon.powf(T::of(2.0) - p);
        let s: T = self.cells.iter().map(|c| c.grad_lp_norm(p).powf(p)).sum();
        (w * s).powf(p.recip())
    }

    pub fn scaled_norm(&self, p: T) -> T {
        ScaledSobolevNorm { epsilon: self.epsilon, p }.from_reference(&self.cells)
    }

    /// Cellwise difference `self - other` (same geometry and grids).
    pub fn sub(&self, other: &Self) -> Self {
        Self {
            h: self.h.sub(&other.h),
            cells: self.cells.iter().zip(&other.cells).map(|(a, b)| a.sub(b)).collect(),
            epsilon: self.epsilon,
        }
    }
}

/// Cell right-hand side `f_ij(xi) = eps (grad phi^eps . u)(z + eps xi) = -grad phi(xi) . u(z + eps xi)`.
pub fn cell_rhs<T: Real>(solver: &CellSolver<T>, geometry: &Geometry<T>, k: usize, u: &VectorField<T>) -> Vec<T> {
    let z = geometry.centers[k];
    let e = geometry.config.epsilon;
    let prof = CutoffProfile::Smoothstep;
    solver.sample_rhs(|xi| {
        let g = base_cutoff_grad(xi, &prof);
        if g[0] == T::zero() && g[1] == T::zero() {
            return T::zero();
        }
        let v = u.sample([z[0] + e * xi[0], z[1] + e * xi[1]]);
        -(g[0] * v[0] + g[1] * v[1])
    })
}

/// Solves every cell problem for `u` and assembles `h^eps` on the grid of `u`.
pub fn assemble_h_epsilon<T: Real>(solver: &CellSolver<T>, geometry: &Geometry<T>, u: &VectorField<T>) -> Result<Assembly<T>> {
    if solver.shape() != &geometry.config.shape {
        return Err(Error::InvalidConfig("cell solver and geometry use different obstacle shapes".into()));
    }
    let cells: Vec<CellSolution<T>> = (0..geometry.len())
        .into_par_iter()
        .map(|k| {
            let rhs = cell_rhs(solver, geometry, k, u);
            solver.solve(&CellProblem::new(rhs)).map_err(|e| {
                let (i, j) = geometry.index_of(k);
                Error::Cell { i, j, source: Box::new(e) }
            })
        })
        .collect::<Result<_>>()?;
    let grid = u.grid;
    let mut h = VectorField::zeros(grid);
    let e = geometry.config.epsilon;
    let two_e = T::of(2.0) * e;
    for (k, z) in geometry.centers.iter().enumerate() {
        let (ilo, ihi) = grid.x_range(z[0] - two_e, z[0] + two_e);
        let (jlo, jhi) = grid.y_range(z[1] - two_e, z[1] + two_e);
        for j in jlo..jhi {
            for i in ilo..ihi {
                let v = cells[k].eval(geometry.to_reference(k, grid.point(i, j)));
                let id = grid.idx(i, j);
                h.x[id] = v[0];
                h.y[id] = v[1];
            }
        }
    }
    Ok(Assembly { h, cells, epsilon: e })
}

/// `u^eps = phi^eps u^E - h^eps`, divergence free and zero on the obstacles.
#[derive(Clone, Debug)]
pub struct Corrector<T> {
    pub u_eps: VectorField<T>,
    pub assembly: Assembly<T>,
}

pub fn euler_corrector<T: Real>(
    solver: &CellSolver<T>,
    geometry: &Geometry<T>,
    u_e: &VectorField<T>,
    phi_eps: &ScalarField<T>,
) -> Result<Corrector<T>> {
    let assembly = assemble_h_epsilon(solver, geometry, u_e)?;
    let mut u_eps = u_e.weighted(phi_eps);
    u_eps.axpy(-T::one(), &assembly.h);
    Ok(Corrector { u_eps, assembly })
}

/// Empirical constants of the reference cell.
#[derive(Clone, Debug, Serialize)]
pub struct Constants<T> {
    pub shape: ObstacleShape<T>,
    pub p: T,
    /// Largest `||h||_{W^{1,p}(U)} / ||f||_{L^p(U)}` over the ensemble.
    pub c_tilde: T,
    pub c_tilde_samples: Vec<T>,
    /// Largest `||u||_2 / (s ||grad u||_2)` over fields vanishing on the obstacle.
    pub k1: T,
    /// Largest `||u||_4 / (s^(1/2) ||grad u||_2)`.
    pub k2: T,
    pub ensemble_size: usize,
    pub max_residual: f64,
}

/// Random smooth function on the reference square: a few low cosine modes.
fn random_smooth<T: Real>(rng: &mut ChaCha8Rng) -> impl Fn([T; 2]) -> T {
    let mut modes = Vec::new();
    for k in 0..4 {
        for l in 0..4 {
            let c: f64 = rng.gen_range(-1.0..1.0) / (1.0 + (k * k + l * l) as f64);
            let ph: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let pv: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            modes.push((k as f64, l as f64, c, ph, pv));
        }
    }
    move |x: [T; 2]| {
        let (a, b) = (x[0].to_f() + 2.0, x[1].to_f() + 2.0);
        let q = std::f64::consts::FRAC_PI_4;
        T::of(modes.iter().map(|&(k, l, c, ph, pv)| c * (k * q * a + ph).cos() * (l * q * b + pv).cos()).sum())
    }
}

/// Random divergence-free velocity `grad^perp psi`, `psi` a sum of cosine modes of
/// wavenumber up to 2.5.
pub fn random_solenoidal<T: Real>(rng: &mut impl Rng) -> impl Fn([T; 2]) -> [T; 2] {
    let mut modes = Vec::new();
    for k in 0..6 {
        for l in 0..6 {
            let c: f64 = rng.gen_range(-1.0..1.0);
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let b: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            modes.push((0.5 * k as f64, 0.5 * l as f64, c, a, b));
        }
    }
    move |x: [T; 2]| {
        let (x0, x1) = (x[0].to_f(), x[1].to_f());
        let (mut ux, mut uy) = (0.0, 0.0);
        for &(k, l, c, a, b) in &modes {
            let (sx, cx) = (k * x0 + a).sin_cos();
            let (sy, cy) = (l * x1 + b).sin_cos();
            ux += c * cx * l * sy;
            uy -= c * k * sx * cy;
        }
        [T::of(ux), T::of(uy)]
    }
}

/// Cell right-hand sides `-grad phi . u` for `n` random divergence-free `u`: the
/// family met when correcting a solenoidal field, mean-free by the divergence theorem.
pub fn random_rhs_ensemble<T: Real>(solver: &CellSolver<T>, n: usize, seed: u64) -> Vec<Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prof = CutoffProfile::Smoothstep;
    (0..n)
        .map(|_| {
            let u = random_solenoidal::<T>(&mut rng);
            solver.sample_rhs(|x| {
                let g = base_cutoff_grad(x, &prof);
                if g[0] == T::zero() && g[1] == T::zero() {
                    return T::zero();
                }
                let v = u(x);
                -(g[0] * v[0] + g[1] * v[1])
            })
        })
        .collect()
}

/// Estimates the cell constants from `ensemble` random samples at unit scale.
pub fn estimate_constants<T: Real>(solver: &CellSolver<T>, p: T, ensemble: usize, seed: u64) -> Result<Constants<T>> {
    estimate_constants_at(solver, p, ensemble, seed, T::one())
}

/// As [`estimate_constants`], with the Poincare and embedding ratios measured on
/// the cell scaled by `scale`.
pub fn estimate_constants_at<T: Real>(
    solver: &CellSolver<T>,
    p: T,
    ensemble: usize,
    seed: u64,
    scale: T,
) -> Result<Constants<T>> {
    if ensemble < 20 {
        return Err(Error::InvalidConfig(format!("ensemble of {ensemble} < 20 samples")));
    }
    let ensemble_rhs = random_rhs_ensemble(solver, ensemble, seed);
    let results: Vec<(T, f64)> = ensemble_rhs
        .par_iter()
        .map(|f| {
            let sol = solver.solve(&CellProblem::new(f.clone()))?;
            Ok((sol.w1p_norm(p) / solver.rhs_norm(f, p), sol.residual))
        })
        .collect::<Result<_>>()?;
    let c_tilde_samples: Vec<T> = results.iter().map(|r| r.0).collect();
    let c_tilde = c_tilde_samples.iter().copied().fold(T::zero(), T::max);
    let max_residual = results.iter().map(|r| r.1).fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let (mut k1, mut k2) = (T::zero(), T::zero());
    for _ in 0..ensemble {
        let ga = random_smooth::<T>(&mut rng);
        let gb = random_smooth::<T>(&mut rng);
        let lift = T::of(rng.gen_range(-1.0..1.0));
        let width = T::of(rng.gen_range(0.1..2.0));
        let shape = solver.shape;
        let field = move |x: [T; 2]| {
            let w = (shape.exterior_distance(x) / width).min(T::one());
            [(ga(x) + lift) * w, gb(x) * w]
        };
        let (r1, r2) = poincare_ratios(solver, &field, scale);
        k1 = k1.max(r1);
        k2 = k2.max(r2);
    }
    Ok(Constants { shape: solver.shape, p, c_tilde, c_tilde_samples, k1, k2, ensemble_size: ensemble, max_residual })
}

/// `(||u||_2 / (s ||grad u||_2), ||u||_4 / (s^(1/2) ||grad u||_2))` for `u` sampled on the
/// corner grid of the cell scaled by `s`.
pub fn poincare_ratios<T: Real>(solver: &CellSolver<T>, field: &dyn Fn([T; 2]) -> [T; 2], s: T) -> (T, T) {
    let n = solver.n;
    let hc = solver.hc;
    let mut cx = vec![T::zero(); (n + 1) * (n + 1)];
    let mut cy = vec![T::zero(); (n + 1) * (n + 1)];
    for b in 0..=n {
        for a in 0..=n {
            let v = field([T::of(-2.0 + a as f64 * hc), T::of(-2.0 + b as f64 * hc)]);
            cx[a + (n + 1) * b] = v[0];
            cy[a + (n + 1) * b] = v[1];
        }
    }
    let sol = CellSolution::<T> { n, hc, shape: solver.shape, corners_x: cx, corners_y: cy, faces: Vec::new(), iterations: 0, residual: 0.0, mean_removed: 0.0 };
    let two = T::of(2.0);
    let (a2, g2) = sol.power_sums(two, s);
    let (a4, _) = sol.power_sums(T::of(4.0), s);
    let grad = g2.sqrt();
    (a2.sqrt() / (s * grad), a4.powf(T::of(0.25)) / (s.sqrt() * grad))
}

/// Norms of the Euler corrector compared with their predicted shapes.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CorrectorNorms<T> {
    pub h_l4: T,
    pub grad_h_l2: T,
    pub dt_h_l2: Option<T>,
    pub defect_l4: T,
    /// `eps^(1/2) / d^((1+mu)/4)`.
    pub small_shape: T,
    /// `1 / d^((1+mu)/2)`.
    pub gradient_shape: T,
}

/// Measures the corrector norms; `previous` is an assembly at an earlier time `dt` before.
pub fn corrector_norms<T: Real>(
    geometry: &Geometry<T>,
    u_e: &VectorField<T>,
    corrector: &Corrector<T>,
    previous: Option<(&Assembly<T>, T)>,
) -> Result<CorrectorNorms<T>> {
    let four = T::of(4.0);
    let two = T::of(2.0);
    let a = &corrector.assembly;
    let cfg = &geometry.config;
    let dt_h_l2 = previous.map(|(prev, dt)| a.sub(prev).lp_norm(two) / dt);
    Ok(CorrectorNorms {
        h_l4: a.lp_norm(four),
        grad_h_l2: a.grad_lp_norm(two),
        dt_h_l2,
        defect_l4: u_e.sub(&corrector.u_eps).lp_norm(four, None)?,
        small_shape: cfg.epsilon.sqrt() / cfg.d_epsilon.powf((T::one() + cfg.mu) / four),
        gradient_shape: T::one() / cfg.d_epsilon.powf((T::one() + cfg.mu) / two),
    })
}
