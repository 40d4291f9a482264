//! Uniform-grid fields, discrete calculus, masked norms and Poisson solvers.

use rustfft::num_complex::Complex;

use crate::fft::{freq, Fft2};
use crate::geometry::RegionMask;
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Periodic,
    Open,
}

/// Nodes at `origin + h (i, j)` for `i < nx`, `j < ny`, stored row-major (x fastest).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid<T> {
    pub origin: [T; 2],
    pub h: T,
    pub nx: usize,
    pub ny: usize,
    pub boundary: Boundary,
}

impl<T: Real> Grid<T> {
    pub fn new(origin: [T; 2], h: T, nx: usize, ny: usize, boundary: Boundary) -> Result<Self> {
        if !(h > T::zero()) || !h.is_finite() {
            return Err(Error::InvalidConfig(format!("grid spacing {h} must be positive")));
        }
        if nx < 8 || ny < 8 {
            return Err(Error::InvalidConfig(format!("grid {nx}x{ny} smaller than 8x8")));
        }
        Ok(Self { origin, h, nx, ny, boundary })
    }

    /// Square periodic box `[lo, lo + length)^2` with `n` nodes per side.
    pub fn periodic(lo: [T; 2], length: T, n: usize) -> Result<Self> {
        Self::new(lo, length / T::of_usize(n), n, n, Boundary::Periodic)
    }

    /// Smallest grid with spacing `h` whose nodes span `[lo, hi]`.
    pub fn covering(lo: [T; 2], hi: [T; 2], h: T, boundary: Boundary) -> Result<Self> {
        let count = |a: T, b: T| -> usize {
            let r = (b - a) / h;
            let n = (r - T::of(1e-9)).ceil().to_usize().unwrap_or(0);
            match boundary {
                Boundary::Open => n + 1,
                Boundary::Periodic => n.max(1),
            }
        };
        Self::new(lo, h, count(lo[0], hi[0]), count(lo[1], hi[1]), boundary)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn x(&self, i: usize) -> T {
        self.origin[0] + self.h * T::of_usize(i)
    }

    #[inline]
    pub fn y(&self, j: usize) -> T {
        self.origin[1] + self.h * T::of_usize(j)
    }

    #[inline]
    pub fn point(&self, i: usize, j: usize) -> [T; 2] {
        [self.x(i), self.y(j)]
    }

    pub fn cell_area(&self) -> T {
        self.h * self.h
    }

    /// Side lengths; for a periodic grid this is the period.
    pub fn extent(&self) -> [T; 2] {
        match self.boundary {
            Boundary::Periodic => [self.h * T::of_usize(self.nx), self.h * T::of_usize(self.ny)],
            Boundary::Open => [self.h * T::of_usize(self.nx - 1), self.h * T::of_usize(self.ny - 1)],
        }
    }

    /// Center of the node box.
    pub fn center(&self) -> [T; 2] {
        let half = T::of(0.5);
        [
            self.origin[0] + half * self.h * T::of_usize(self.nx - 1),
            self.origin[1] + half * self.h * T::of_usize(self.ny - 1),
        ]
    }

    fn range(origin: T, h: T, n: usize, lo: T, hi: T) -> (usize, usize) {
        let a = ((lo - origin) / h).ceil().max(T::zero());
        let b = ((hi - origin) / h).floor() + T::one();
        let a = a.to_usize().unwrap_or(0).min(n);
        let b = if b <= T::zero() { 0 } else { b.to_usize().unwrap_or(n).min(n) };
        (a, b.max(a))
    }

    /// Half-open index range of nodes with `lo <= x <= hi`.
    pub fn x_range(&self, lo: T, hi: T) -> (usize, usize) {
        Self::range(self.origin[0], self.h, self.nx, lo, hi)
    }

    pub fn y_range(&self, lo: T, hi: T) -> (usize, usize) {
        Self::range(self.origin[1], self.h, self.ny, lo, hi)
    }

    /// Node indices of the central half `[n/4, 3n/4)` in each direction.
    pub fn inner_half(&self) -> ((usize, usize), (usize, usize)) {
        ((self.nx / 4, self.nx - self.nx / 4), (self.ny / 4, self.ny - self.ny / 4))
    }

    /// Locates `x` for bilinear interpolation: lower node indices and weights.
    #[inline]
    pub fn locate(&self, x: [T; 2]) -> (usize, usize, usize, usize, T, T) {
        let (i0, i1, tx) = self.locate_axis((x[0] - self.origin[0]) / self.h, self.nx);
        let (j0, j1, ty) = self.locate_axis((x[1] - self.origin[1]) / self.h, self.ny);
        (i0, i1, j0, j1, tx, ty)
    }

    fn locate_axis(&self, s: T, n: usize) -> (usize, usize, T) {
        match self.boundary {
            Boundary::Periodic => {
                let len = T::of_usize(n);
                let s = s - (s / len).floor() * len;
                let f = s.floor();
                let i = f.to_usize().unwrap_or(0).min(n - 1);
                (i, (i + 1) % n, s - f)
            }
            Boundary::Open => {
                let top = T::of_usize(n - 1);
                let s = s.max(T::zero()).min(top);
                let f = s.floor().min(T::of_usize(n - 2));
                let i = f.to_usize().unwrap_or(0);
                (i, i + 1, s - f)
            }
        }
    }

    pub fn same_shape(&self, other: &Grid<T>) -> bool {
        self.nx == other.nx && self.ny == other.ny
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField<T> {
    pub grid: Grid<T>,
    pub data: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorField<T> {
    pub grid: Grid<T>,
    pub x: Vec<T>,
    pub y: Vec<T>,
}

impl<T: Real> ScalarField<T> {
    pub fn zeros(grid: Grid<T>) -> Self {
        Self { grid, data: vec![T::zero(); grid.len()] }
    }

    pub fn from_vec(grid: Grid<T>, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidConfig(format!(
                "{} samples for a {}x{} grid",
                data.len(),
                grid.nx,
                grid.ny
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn from_fn(grid: Grid<T>, f: impl Fn([T; 2]) -> T) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                data.push(f(grid.point(i, j)));
            }
        }
        Self { grid, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[self.grid.idx(i, j)]
    }

    /// Bilinear interpolation (clamped at open edges, wrapped on periodic grids).
    pub fn sample(&self, x: [T; 2]) -> T {
        let g = &self.grid;
        let (i0, i1, j0, j1, tx, ty) = g.locate(x);
        let a = self.data[g.idx(i0, j0)] * (T::one() - tx) + self.data[g.idx(i1, j0)] * tx;
        let b = self.data[g.idx(i0, j1)] * (T::one() - tx) + self.data[g.idx(i1, j1)] * tx;
        a * (T::one() - ty) + b * ty
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { grid: self.grid, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&mut self, a: T) {
        self.data.iter_mut().for_each(|v| *v = *v * a);
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: T, other: &Self) {
        for (v, &w) in self.data.iter_mut().zip(&other.data) {
            *v = *v + a * w;
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-T::one(), other);
        out
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Midpoint-rule integral over the whole grid.
    pub fn integral(&self) -> T {
        self.data.iter().copied().sum::<T>() * self.grid.cell_area()
    }

    pub fn mean(&self) -> T {
        self.data.iter().copied().sum::<T>() / T::of_usize(self.data.len())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Discrete `L^p` norm `(sum |f|^p h^2)^(1/p)` over masked nodes; `p = inf` gives the max.
    pub fn lp_norm(&self, p: T, mask: Option<&RegionMask<T>>) -> Result<T> {
        lp_of(&self.grid, self.data.iter().map(|v| v.abs()), p, mask)
    }
}

impl<T: Real> VectorField<T> {
    pub fn zeros(grid: Grid<T>) -> Self {
        Self { grid, x: vec![T::zero(); grid.len()], y: vec![T::zero(); grid.len()] }
    }

    pub fn from_components(a: ScalarField<T>, b: ScalarField<T>) -> Self {
        debug_assert!(a.grid.same_shape(&b.grid));
        Self { grid: a.grid, x: a.data, y: b.data }
    }

    pub fn from_fn(grid: Grid<T>, f: impl Fn([T; 2]) -> [T; 2]) -> Self {
        let mut out = Self::zeros(grid);
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let k = grid.idx(i, j);
                let v = f(grid.point(i, j));
                out.x[k] = v[0];
                out.y[k] = v[1];
            }
        }
        out
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> [T; 2] {
        let k = self.grid.idx(i, j);
        [self.x[k], self.y[k]]
    }

    pub fn sample(&self, x: [T; 2]) -> [T; 2] {
        let g = &self.grid;
        let (i0, i1, j0, j1, tx, ty) = g.locate(x);
        let w = [
            (g.idx(i0, j0), (T::one() - tx) * (T::one() - ty)),
            (g.idx(i1, j0), tx * (T::one() - ty)),
            (g.idx(i0, j1), (T::one() - tx) * ty),
            (g.idx(i1, j1), tx * ty),
        ];
        let mut out = [T::zero(), T::zero()];
        for (k, c) in w {
            out[0] = out[0] + self.x[k] * c;
            out[1] = out[1] + self.y[k] * c;
        }
        out
    }

    pub fn component(&self, c: usize) -> ScalarField<T> {
        let data = if c == 0 { self.x.clone() } else { self.y.clone() };
        ScalarField { grid: self.grid, data }
    }

    pub fn magnitude(&self) -> ScalarField<T> {
        let data = self.x.iter().zip(&self.y).map(|(&a, &b)| a.hypot(b)).collect();
        ScalarField { grid: self.grid, data }
    }

    pub fn scale(&mut self, a: T) {
        self.x.iter_mut().chain(self.y.iter_mut()).for_each(|v| *v = *v * a);
    }

    pub fn axpy(&mut self, a: T, other: &Self) {
        for (v, &w) in self.x.iter_mut().zip(&other.x) {
            *v = *v + a * w;
        }
        for (v, &w) in self.y.iter_mut().zip(&other.y) {
            *v = *v + a * w;
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-T::one(), other);
        out
    }

    /// Multiplies every node by `w` (e.g. a cutoff or a mask indicator).
    pub fn weighted(&self, w: &ScalarField<T>) -> Self {
        let mut out = self.clone();
        for k in 0..w.data.len() {
            out.x[k] = out.x[k] * w.data[k];
            out.y[k] = out.y[k] * w.data[k];
        }
        out
    }

    /// Zeroes every node selected by `mask`.
    pub fn zero_on(&mut self, mask: &RegionMask<T>) {
        for (k, &m) in mask.cells.iter().enumerate() {
            if m {
                self.x[k] = T::zero();
                self.y[k] = T::zero();
            }
        }
    }

    pub fn max_abs(&self) -> T {
        self.x.iter().zip(&self.y).fold(T::zero(), |m, (&a, &b)| m.max(a.hypot(b)))
    }

    /// `sum u.v h^2` over masked nodes.
    pub fn inner(&self, other: &Self, mask: Option<&RegionMask<T>>) -> T {
        let mut s = T::zero();
        for k in 0..self.x.len() {
            if mask.is_none_or(|m| m.cells[k]) {
                s = s + self.x[k] * other.x[k] + self.y[k] * other.y[k];
            }
        }
        s * self.grid.cell_area()
    }

    /// `L^p` norm of the pointwise Euclidean magnitude.
    pub fn lp_norm(&self, p: T, mask: Option<&RegionMask<T>>) -> Result<T> {
        lp_of(&self.grid, self.x.iter().zip(&self.y).map(|(&a, &b)| a.hypot(b)), p, mask)
    }

    pub fn all_finite(&self) -> bool {
        self.x.iter().chain(&self.y).all(|v| v.is_finite())
    }
}

fn lp_of<T: Real>(
    grid: &Grid<T>,
    values: impl Iterator<Item = T>,
    p: T,
    mask: Option<&RegionMask<T>>,
) -> Result<T> {
    if !(p >= T::one()) {
        return Err(Error::InvalidConfig(format!("norm exponent {p} < 1")));
    }
    if let Some(m) = mask {
        if m.cells.len() != grid.len() {
            return Err(Error::InvalidConfig("mask and field grids differ".into()));
        }
        if m.is_empty() {
            return Err(Error::EmptyMask);
        }
    }
    let selected = values.enumerate().filter(|(k, _)| mask.is_none_or(|m| m.cells[*k])).map(|(_, v)| v);
    if p.is_infinite() {
        return Ok(selected.fold(T::zero(), T::max));
    }
    let two = T::of(2.0);
    let s: T = if p == two {
        selected.map(|v| v * v).sum()
    } else {
        selected.map(|v| v.powf(p)).sum()
    };
    Ok((s * grid.cell_area()).powf(p.recip()))
}

/// `L^p` norm of the Frobenius magnitude of the discrete velocity gradient.
pub fn grad_norm<T: Real>(u: &VectorField<T>, p: T, mask: Option<&RegionMask<T>>) -> Result<T> {
    let g = grad_magnitude(u);
    g.lp_norm(p, mask)
}

/// Pointwise `|grad u|` (Frobenius).
pub fn grad_magnitude<T: Real>(u: &VectorField<T>) -> ScalarField<T> {
    let g = &u.grid;
    let ax = d_dx(&u.x, g);
    let ay = d_dy(&u.x, g);
    let bx = d_dx(&u.y, g);
    let by = d_dy(&u.y, g);
    let data = (0..g.len())
        .map(|k| (ax[k] * ax[k] + ay[k] * ay[k] + bx[k] * bx[k] + by[k] * by[k]).sqrt())
        .collect();
    ScalarField { grid: *g, data }
}

/// Centered x-derivative; periodic wrap or second-order one-sided at open edges.
pub(crate) fn d_dx<T: Real>(f: &[T], g: &Grid<T>) -> Vec<T> {
    let mut out = vec![T::zero(); f.len()];
    for j in 0..g.ny {
        let row = &f[j * g.nx..(j + 1) * g.nx];
        diff_line(row, g.h, g.boundary, |i, v| out[j * g.nx + i] = v);
    }
    out
}

pub(crate) fn d_dy<T: Real>(f: &[T], g: &Grid<T>) -> Vec<T> {
    let mut out = vec![T::zero(); f.len()];
    let mut col = vec![T::zero(); g.ny];
    for i in 0..g.nx {
        for j in 0..g.ny {
            col[j] = f[j * g.nx + i];
        }
        diff_line(&col, g.h, g.boundary, |j, v| out[j * g.nx + i] = v);
    }
    out
}

fn diff_line<T: Real>(v: &[T], h: T, boundary: Boundary, mut put: impl FnMut(usize, T)) {
    let n = v.len();
    let inv = T::one() / (T::of(2.0) * h);
    for i in 1..n - 1 {
        put(i, (v[i + 1] - v[i - 1]) * inv);
    }
    match boundary {
        Boundary::Periodic => {
            put(0, (v[1] - v[n - 1]) * inv);
            put(n - 1, (v[0] - v[n - 2]) * inv);
        }
        Boundary::Open => {
            let three = T::of(3.0);
            let four = T::of(4.0);
            put(0, (-three * v[0] + four * v[1] - v[2]) * inv);
            put(n - 1, (three * v[n - 1] - four * v[n - 2] + v[n - 3]) * inv);
        }
    }
}

pub fn grad<T: Real>(f: &ScalarField<T>) -> VectorField<T> {
    VectorField { grid: f.grid, x: d_dx(&f.data, &f.grid), y: d_dy(&f.data, &f.grid) }
}

/// `(-d2 f, d1 f)`.
pub fn perp_grad<T: Real>(f: &ScalarField<T>) -> VectorField<T> {
    let mut x = d_dy(&f.data, &f.grid);
    x.iter_mut().for_each(|v| *v = -*v);
    VectorField { grid: f.grid, x, y: d_dx(&f.data, &f.grid) }
}

pub fn div<T: Real>(u: &VectorField<T>) -> ScalarField<T> {
    let a = d_dx(&u.x, &u.grid);
    let b = d_dy(&u.y, &u.grid);
    ScalarField { grid: u.grid, data: a.iter().zip(&b).map(|(&p, &q)| p + q).collect() }
}

/// `d1 u2 - d2 u1`.
pub fn curl<T: Real>(u: &VectorField<T>) -> ScalarField<T> {
    let a = d_dx(&u.y, &u.grid);
    let b = d_dy(&u.x, &u.grid);
    ScalarField { grid: u.grid, data: a.iter().zip(&b).map(|(&p, &q)| p - q).collect() }
}

/// Five-point Laplacian; at open edges the boundary ring is left at zero.
pub fn laplacian<T: Real>(f: &ScalarField<T>) -> ScalarField<T> {
    let g = f.grid;
    let inv = T::one() / (g.h * g.h);
    let four = T::of(4.0);
    let mut out = ScalarField::zeros(g);
    let periodic = g.boundary == Boundary::Periodic;
    for j in 0..g.ny {
        for i in 0..g.nx {
            let edge = i == 0 || j == 0 || i == g.nx - 1 || j == g.ny - 1;
            if edge && !periodic {
                continue;
            }
            let ip = (i + 1) % g.nx;
            let im = (i + g.nx - 1) % g.nx;
            let jp = (j + 1) % g.ny;
            let jm = (j + g.ny - 1) % g.ny;
            let c = f.get(i, j);
            out.data[g.idx(i, j)] =
                (f.get(ip, j) + f.get(im, j) + f.get(i, jp) + f.get(i, jm) - four * c) * inv;
        }
    }
    out
}

/// Relative mean below which a periodic right-hand side counts as mean-free.
const MEAN_TOL: f64 = 1e-9;

/// Solves the five-point `lap phi = rhs` on a periodic grid by exact inversion of
/// its Fourier symbol; the solution has zero mean.
pub fn poisson_periodic<T: Real>(rhs: &ScalarField<T>) -> Result<ScalarField<T>> {
    let g = rhs.grid;
    if g.boundary != Boundary::Periodic {
        return Err(Error::InvalidConfig("periodic Poisson solve on an open grid".into()));
    }
    let mean = rhs.mean();
    let scale = rhs.max_abs();
    let tol = T::of(MEAN_TOL).max(T::of(16.0) * T::epsilon());
    if mean.abs() > tol * scale {
        return Err(Error::NonZeroMean { mean: mean.to_f() });
    }
    let fft = Fft2::new(g.nx, g.ny);
    let mut buf: Vec<Complex<T>> = rhs.data.iter().map(|&v| Complex::new(v, T::zero())).collect();
    fft.forward(&mut buf);
    let sx = symbol_line(g.nx, g.h);
    let sy = symbol_line(g.ny, g.h);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let k = g.idx(i, j);
            let lam = sx[i] + sy[j];
            buf[k] = if i == 0 && j == 0 { Complex::new(T::zero(), T::zero()) } else { buf[k] / lam };
        }
    }
    fft.inverse(&mut buf);
    Ok(ScalarField { grid: g, data: buf.iter().map(|c| c.re).collect() })
}

/// Eigenvalues `(2 cos(2 pi k / n) - 2) / h^2` of the 1D periodic second difference.
fn symbol_line<T: Real>(n: usize, h: T) -> Vec<T> {
    let two = T::of(2.0);
    (0..n)
        .map(|k| {
            let th = two * T::PI() * T::of(freq(k, n) as f64) / T::of_usize(n);
            (two * th.cos() - two) / (h * h)
        })
        .collect()
}

/// Fraction of the `L^1` mass of `rhs` that lies outside the inner half of its grid.
pub fn mass_outside_inner_half<T: Real>(rhs: &ScalarField<T>) -> T {
    let g = rhs.grid;
    let ((i0, i1), (j0, j1)) = g.inner_half();
    let mut total = T::zero();
    let mut outside = T::zero();
    for j in 0..g.ny {
        for i in 0..g.nx {
            let a = rhs.get(i, j).abs();
            total = total + a;
            if i < i0 || i >= i1 || j < j0 || j >= j1 {
                outside = outside + a;
            }
        }
    }
    if total == T::zero() {
        T::zero()
    } else {
        outside / total
    }
}

/// Largest mass fraction outside the inner half still accepted as "supported inside".
pub const SUPPORT_TOL: f64 = 1e-6;

pub(crate) fn check_support<T: Real>(rhs: &ScalarField<T>) -> Result<()> {
    let frac = mass_outside_inner_half(rhs);
    if frac > T::of(SUPPORT_TOL) {
        return Err(Error::SupportViolation { fraction: frac.to_f() });
    }
    Ok(())
}

/// Cell average of `ln|x|` over the `h x h` square centered at the origin.
pub fn log_self_cell<T: Real>(h: T) -> T {
    let half = T::of(0.5);
    (h * half).ln() + (T::LN_2() - T::of(3.0) + T::FRAC_PI_2()) * half
}

/// Free-space Green function of the Laplacian sampled on grid offsets, with the
/// cell average at the origin.
pub fn green_log<T: Real>(h: T, di: isize, dj: isize) -> T {
    let c = T::one() / (T::of(2.0) * T::PI());
    if di == 0 && dj == 0 {
        return c * log_self_cell(h);
    }
    let r2 = h * h * T::of((di * di + dj * dj) as f64);
    c * half_ln(r2)
}

#[inline]
fn half_ln<T: Real>(r2: T) -> T {
    T::of(0.5) * r2.ln()
}

/// Aperiodic convolution with fixed kernels over an open grid, via zero padding
/// to a doubled periodic lattice.
pub(crate) struct Convolver<T: Real> {
    nx: usize,
    ny: usize,
    fft: Fft2<T>,
    spectra: Vec<Vec<Complex<T>>>,
}

impl<T: Real> Convolver<T> {
    /// `kernels[m](di, dj)` is the weight coupling nodes at index offset `(di, dj)`.
    pub fn new(nx: usize, ny: usize, kernels: &[&dyn Fn(isize, isize) -> T]) -> Self {
        let (mx, my) = (2 * nx, 2 * ny);
        let fft = Fft2::new(mx, my);
        let spectra = kernels
            .iter()
            .map(|k| {
                let mut buf = vec![Complex::new(T::zero(), T::zero()); mx * my];
                for b in 0..my {
                    let dj = if b < ny { b as isize } else if b == ny { continue } else { b as isize - my as isize };
                    for a in 0..mx {
                        let di = if a < nx { a as isize } else if a == nx { continue } else { a as isize - mx as isize };
                        buf[b * mx + a] = Complex::new(k(di, dj), T::zero());
                    }
                }
                fft.forward(&mut buf);
                buf
            })
            .collect();
        Self { nx, ny, fft, spectra }
    }

    /// Convolves `src` with every kernel, scaling by `weight`.
    pub fn apply_all(&self, src: &[T], weight: T) -> Vec<Vec<T>> {
        let (mx, nx, ny) = (2 * self.nx, self.nx, self.ny);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.fft.len()];
        for j in 0..ny {
            for i in 0..nx {
                buf[j * mx + i] = Complex::new(src[j * nx + i] * weight, T::zero());
            }
        }
        self.fft.forward(&mut buf);
        self.spectra
            .iter()
            .map(|s| {
                let mut w: Vec<Complex<T>> = buf.iter().zip(s).map(|(a, b)| a * b).collect();
                self.fft.inverse(&mut w);
                let mut out = vec![T::zero(); nx * ny];
                for j in 0..ny {
                    for i in 0..nx {
                        out[j * nx + i] = w[j * mx + i].re;
                    }
                }
                out
            })
            .collect()
    }
}

/// Free-space solution `phi = G * rhs` of `lap phi = rhs` with `G = ln|x| / 2pi`.
/// The right-hand side must be supported in the inner half of the grid.
pub fn poisson_freespace<T: Real>(rhs: &ScalarField<T>) -> Result<ScalarField<T>> {
    check_support(rhs)?;
    Ok(poisson_freespace_unchecked(rhs))
}

pub(crate) fn poisson_freespace_unchecked<T: Real>(rhs: &ScalarField<T>) -> ScalarField<T> {
    let g = rhs.grid;
    let h = g.h;
    let kernel = move |di: isize, dj: isize| green_log(h, di, dj);
    let conv = Convolver::new(g.nx, g.ny, &[&kernel]);
    let mut out = conv.apply_all(&rhs.data, g.cell_area());
    ScalarField { grid: g, data: out.swap_remove(0) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Region;
    use proptest::prelude::*;

    fn unit_open(n: usize) -> Grid<f64> {
        Grid::new([0.0, 0.0], 1.0 / (n - 1) as f64, n, n, Boundary::Open).unwrap()
    }

    #[test]
    fn constant_norm_on_unit_box() {
        let g = unit_open(65);
        let f = ScalarField::from_fn(g, |_| 1.0);
        let n = f.lp_norm(2.0, None).unwrap();
        assert!((n - 1.0).abs() < 3.0 * g.h, "{n}");
        assert_eq!(f.lp_norm(f64::INFINITY, None).unwrap(), 1.0);
    }

    #[test]
    fn half_box_indicator() {
        let g = Grid::<f64>::periodic([0.0, 0.0], 1.0, 64).unwrap();
        let f = ScalarField::from_fn(g, |p| if p[0] < 0.5 { 1.0 } else { 0.0 });
        assert!((f.lp_norm(1.0, None).unwrap() - 0.5).abs() < g.h);
    }

    #[test]
    fn empty_mask_and_bad_exponent_rejected() {
        let g = unit_open(16);
        let f = ScalarField::from_fn(g, |_| 1.0);
        let m = RegionMask::from_fn(g, Region::Fluid, |_, _| false);
        assert!(matches!(f.lp_norm(2.0, Some(&m)), Err(Error::EmptyMask)));
        assert!(f.lp_norm(0.5, None).is_err());
    }

    #[test]
    fn linear_fields_are_exact() {
        let g = unit_open(17);
        let f = ScalarField::from_fn(g, |p| p[0]);
        let d = grad(&f);
        for k in 0..g.len() {
            assert!((d.x[k] - 1.0).abs() < 1e-12 && d.y[k].abs() < 1e-12);
        }
        let u = VectorField::from_fn(g, |p| [-p[1], p[0]]);
        let c = curl(&u);
        assert!(c.data.iter().all(|v| (v - 2.0).abs() < 1e-12));
        assert!(div(&u).max_abs() < 1e-12);
    }

    #[test]
    fn bilinear_sampling_is_exact_on_bilinear_data() {
        for boundary in [Boundary::Open, Boundary::Periodic] {
            let g = Grid::<f64>::new([-1.0, 0.5], 0.1, 20, 12, boundary).unwrap();
            let f = ScalarField::from_fn(g, |p| 2.0 + p[0] - 3.0 * p[1] + 0.5 * p[0] * p[1]);
            for &x in &[[-0.93, 0.61], [0.44, 1.12], [0.0, 0.5]] {
                let exact = 2.0 + x[0] - 3.0 * x[1] + 0.5 * x[0] * x[1];
                assert!((f.sample(x) - exact).abs() < 1e-12);
            }
        }
        let g = Grid::<f64>::periodic([0.0, 0.0], 1.0, 10).unwrap();
        let f = ScalarField::from_fn(g, |p| p[0]);
        assert!((f.sample([0.95, 0.3]) - 0.45).abs() < 1e-12);
        assert!((f.sample([1.05, 0.3]) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn div_perp_grad_vanishes() {
        for boundary in [Boundary::Periodic, Boundary::Open] {
            let g = Grid::<f64>::new([0.0, 0.0], 0.05, 24, 20, boundary).unwrap();
            let f = ScalarField::from_fn(g, |p| (3.0 * p[0]).sin() * (p[1] * p[1] + p[0]).cos() + p[0] * p[1] * p[1]);
            let d = div(&perp_grad(&f));
            assert!(d.max_abs() < 1e-11, "{:?}: {}", boundary, d.max_abs());
        }
    }

    #[test]
    fn gradient_is_second_order() {
        let err = |n: usize| {
            let g = Grid::periodic([0.0, 0.0], 1.0, n).unwrap();
            let tau = std::f64::consts::TAU;
            let f = ScalarField::from_fn(g, |p| (tau * p[0]).sin() * (tau * p[1]).cos());
            let d = grad(&f);
            let ex = VectorField::from_fn(g, |p| {
                [tau * (tau * p[0]).cos() * (tau * p[1]).cos(), -tau * (tau * p[0]).sin() * (tau * p[1]).sin()]
            });
            d.sub(&ex).max_abs()
        };
        let (e1, e2, e4) = (err(128), err(64), err(32));
        assert!(e2 / e1 > 3.6 && e4 / e2 > 3.6, "{e1} {e2} {e4}");
    }

    #[test]
    fn open_edges_are_second_order() {
        let err = |n: usize| {
            let g = unit_open(n);
            let f = ScalarField::from_fn(g, |p| (2.0 * p[0]).exp() + p[1].sin());
            let d = grad(&f);
            let mut e: f64 = 0.0;
            for k in 0..g.len() {
                let i = k % g.nx;
                let j = k / g.nx;
                let p = g.point(i, j);
                e = e.max((d.x[k] - 2.0 * (2.0 * p[0]).exp()).abs()).max((d.y[k] - p[1].cos()).abs());
            }
            e
        };
        assert!(err(33) / err(65) > 3.5);
    }

    #[test]
    fn periodic_poisson_recovers_sine_mode() {
        let g = Grid::periodic([0.0, 0.0], 1.0, 64).unwrap();
        let tau = std::f64::consts::TAU;
        let phi = ScalarField::from_fn(g, |p| (tau * p[0]).sin() * (tau * p[1]).sin());
        let rhs = laplacian(&phi);
        let sol = poisson_periodic(&rhs).unwrap();
        assert!(sol.sub(&phi).max_abs() < 1e-12);
        let res = laplacian(&sol).sub(&rhs).lp_norm(2.0, None).unwrap() / rhs.lp_norm(2.0, None).unwrap();
        assert!(res < 1e-10);
    }

    #[test]
    fn periodic_poisson_zero_and_mean() {
        let g = Grid::periodic([0.0, 0.0], 1.0, 16).unwrap();
        let z = poisson_periodic(&ScalarField::zeros(g)).unwrap();
        assert_eq!(z.max_abs(), 0.0);
        let bad = ScalarField::from_fn(g, |_| 1.0);
        assert!(matches!(poisson_periodic(&bad), Err(Error::NonZeroMean { .. })));
    }

    #[test]
    fn self_cell_average_matches_quadrature() {
        // fine midpoint sum of ln|x| over [-1/2,1/2]^2 with an even number of sub-cells
        let m = 2000;
        let s = 1.0 / m as f64;
        let mut acc = 0.0;
        for a in 0..m {
            for b in 0..m {
                let x = -0.5 + (a as f64 + 0.5) * s;
                let y = -0.5 + (b as f64 + 0.5) * s;
                acc += 0.5 * (x * x + y * y).ln();
            }
        }
        acc *= s * s;
        assert!((acc - log_self_cell(1.0)).abs() < 1e-5, "{acc} vs {}", log_self_cell(1.0));
        assert!((log_self_cell(0.1_f64) - log_self_cell(1.0) - 0.1_f64.ln()).abs() < 1e-14);
    }

    fn gaussian_rhs(n: usize) -> ScalarField<f64> {
        let g = Grid::new([-1.0, -1.0], 2.0 / n as f64, n, n, Boundary::Open).unwrap();
        ScalarField::from_fn(g, |p| (-(p[0] * p[0] + p[1] * p[1]) / 0.01).exp() - 0.3 * (-((p[0] - 0.1).powi(2) + p[1].powi(2)) / 0.005).exp())
    }

    #[test]
    fn freespace_matches_direct_quadrature() {
        let rhs = gaussian_rhs(128);
        let sol = poisson_freespace(&rhs).unwrap();
        let g = rhs.grid;
        let mut worst: f64 = 0.0;
        for &(i, j) in &[(64, 64), (10, 100), (0, 0), (127, 3), (70, 50)] {
            let mut s = 0.0;
            for b in 0..g.ny {
                for a in 0..g.nx {
                    s += green_log(g.h, i as isize - a as isize, j as isize - b as isize) * rhs.get(a, b);
                }
            }
            s *= g.cell_area();
            worst = worst.max((s - sol.get(i, j)).abs() / s.abs());
        }
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn freespace_gradient_matches_radial_solution() {
        // lap phi = exp(-r^2/s2) has phi'(r) = s2 (1 - exp(-r^2/s2)) / (2r)
        let s2 = 0.01;
        let err = |n: usize| {
            let g = Grid::new([-1.0, -1.0], 2.0 / n as f64, n, n, Boundary::Open).unwrap();
            let rhs = ScalarField::from_fn(g, |p| (-(p[0] * p[0] + p[1] * p[1]) / s2).exp());
            let d = grad(&poisson_freespace(&rhs).unwrap());
            let mut e: f64 = 0.0;
            for j in n / 4..3 * n / 4 {
                for i in n / 4..3 * n / 4 {
                    let p = g.point(i, j);
                    let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                    if r < 1e-9 {
                        continue;
                    }
                    let dr = s2 * (1.0 - (-r * r / s2).exp()) / (2.0 * r);
                    let k = g.idx(i, j);
                    e = e.max((d.x[k] - dr * p[0] / r).abs()).max((d.y[k] - dr * p[1] / r).abs());
                }
            }
            e
        };
        let (e1, e2) = (err(128), err(256));
        assert!(e1 / e2 > 3.0, "{e1} {e2}");
    }

    #[test]
    fn freespace_rejects_wide_support() {
        let g = unit_open(32);
        let rhs = ScalarField::from_fn(g, |_| 1.0);
        assert!(matches!(poisson_freespace(&rhs), Err(Error::SupportViolation { .. })));
        let z = poisson_freespace(&ScalarField::zeros(g)).unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn f32_fields_work() {
        let g = Grid::<f32>::periodic([0.0, 0.0], 1.0, 32).unwrap();
        let f = ScalarField::from_fn(g, |p| (std::f32::consts::TAU * p[0]).sin());
        let sol = poisson_periodic(&laplacian(&f)).unwrap();
        assert!(sol.sub(&f).max_abs() < 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lp_norm_homogeneous_and_subadditive(
            a in prop::collection::vec(-5.0f64..5.0, 64),
            b in prop::collection::vec(-5.0f64..5.0, 64),
            s in -4.0f64..4.0,
            p in prop_oneof![Just(1.0), Just(2.0), Just(4.0), 1.0f64..6.0, Just(f64::INFINITY)],
        ) {
            let g = Grid::new([0.0, 0.0], 0.125, 8, 8, Boundary::Periodic).unwrap();
            let fa = ScalarField::from_vec(g, a).unwrap();
            let fb = ScalarField::from_vec(g, b).unwrap();
            let na = fa.lp_norm(p, None).unwrap();
            let nb = fb.lp_norm(p, None).unwrap();
            let mut sa = fa.clone();
            sa.scale(s);
            prop_assert!((sa.lp_norm(p, None).unwrap() - s.abs() * na).abs() <= 1e-10 * (1.0 + na));
            let mut sum = fa.clone();
            sum.axpy(1.0, &fb);
            prop_assert!(sum.lp_norm(p, None).unwrap() <= na + nb + 1e-10);
        }

        #[test]
        fn differential_operators_are_linear(
            a in prop::collection::vec(-1.0f64..1.0, 100),
            b in prop::collection::vec(-1.0f64..1.0, 100),
            s in -3.0f64..3.0,
        ) {
            let g = Grid::new([0.0, 0.0], 0.1, 10, 10, Boundary::Open).unwrap();
            let fa = ScalarField::from_vec(g, a).unwrap();
            let fb = ScalarField::from_vec(g, b).unwrap();
            let mut comb = fa.clone();
            comb.scale(s);
            comb.axpy(1.0, &fb);
            let mut expect = grad(&fa);
            expect.scale(s);
            expect.axpy(1.0, &grad(&fb));
            prop_assert!(grad(&comb).sub(&expect).max_abs() < 1e-10);
            let u = VectorField::from_components(fa.clone(), fb.clone());
            let v = VectorField::from_components(fb, fa);
            let mut w = u.clone();
            w.axpy(s, &v);
            let mut dexp = div(&u);
            dexp.axpy(s, &div(&v));
            prop_assert!(div(&w).sub(&dexp).max_abs() < 1e-10);
            let mut cexp = curl(&u);
            cexp.axpy(s, &curl(&v));
            prop_assert!(curl(&w).sub(&cexp).max_abs() < 1e-10);
        }
    }
}
