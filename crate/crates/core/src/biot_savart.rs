//! Full-plane Biot-Savart law: velocity from vorticity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rustfft::num_complex::Complex;

use crate::fft::{freq, Fft2};
use crate::fields::{check_support, grad_norm, Boundary, Convolver, Grid, ScalarField, VectorField};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobKind {
    /// `amplitude * exp(-r^2 / radius^2)`, cut off at `8 radius`.
    Gaussian,
    /// `amplitude * exp(1 - 1 / (1 - (r/radius)^2))` inside `radius`, zero outside.
    Bump,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VorticityBlob<T> {
    pub kind: BlobKind,
    pub center: [T; 2],
    pub radius: T,
    pub amplitude: T,
}

impl<T: Real> VorticityBlob<T> {
    pub fn gaussian(center: [T; 2], radius: T, amplitude: T) -> Self {
        Self { kind: BlobKind::Gaussian, center, radius, amplitude }
    }

    pub fn bump(center: [T; 2], radius: T, amplitude: T) -> Self {
        Self { kind: BlobKind::Bump, center, radius, amplitude }
    }

    pub fn support_radius(&self) -> T {
        match self.kind {
            BlobKind::Gaussian => T::of(8.0) * self.radius,
            BlobKind::Bump => self.radius,
        }
    }

    /// Profile as a function of the distance to the center.
    pub fn radial(&self, r: T) -> T {
        let q = r / self.radius;
        match self.kind {
            BlobKind::Gaussian if q < T::of(8.0) => self.amplitude * (-q * q).exp(),
            BlobKind::Bump if q < T::one() => {
                self.amplitude * (T::one() - T::one() / (T::one() - q * q)).exp()
            }
            _ => T::zero(),
        }
    }

    pub fn value(&self, x: [T; 2]) -> T {
        self.radial((x[0] - self.center[0]).hypot(x[1] - self.center[1]))
    }

    /// Total circulation `int omega`.
    pub fn circulation(&self) -> T {
        match self.kind {
            BlobKind::Gaussian => self.amplitude * T::PI() * self.radius * self.radius,
            BlobKind::Bump => {
                let n = 4000;
                let dr = self.radius / T::of_usize(n);
                let s: T = (0..n)
                    .map(|k| {
                        let r = (T::of_usize(k) + T::of(0.5)) * dr;
                        r * self.radial(r)
                    })
                    .sum();
                T::of(2.0) * T::PI() * s * dr
            }
        }
    }
}

/// Samples a superposition of blobs on a grid.
pub fn sample_blobs<T: Real>(blobs: &[VorticityBlob<T>], grid: &Grid<T>) -> ScalarField<T> {
    ScalarField::from_fn(*grid, |x| blobs.iter().map(|b| b.value(x)).sum())
}

/// Kernel `(x - y)^perp / (2 pi |x - y|^2)` at a grid offset; zero at the origin.
fn kernel<T: Real>(h: T, di: isize, dj: isize) -> [T; 2] {
    if di == 0 && dj == 0 {
        return [T::zero(), T::zero()];
    }
    let dx = h * T::of(di as f64);
    let dy = h * T::of(dj as f64);
    let c = T::one() / (T::of(2.0) * T::PI() * (dx * dx + dy * dy));
    [-dy * c, dx * c]
}

/// Cached FFT convolution with the sampled Biot-Savart kernel for one grid.
pub struct BiotSavart<T: Real> {
    grid: Grid<T>,
    conv: Convolver<T>,
}

impl<T: Real> BiotSavart<T> {
    pub fn new(grid: Grid<T>) -> Self {
        let h = grid.h;
        let kx = move |a: isize, b: isize| kernel(h, a, b)[0];
        let ky = move |a: isize, b: isize| kernel(h, a, b)[1];
        Self { grid, conv: Convolver::new(grid.nx, grid.ny, &[&kx, &ky]) }
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    /// Velocity of `omega`, which must live on this grid and in its inner half.
    pub fn velocity(&self, omega: &ScalarField<T>) -> Result<VectorField<T>> {
        check_support(omega)?;
        self.velocity_unchecked(omega)
    }

    pub(crate) fn velocity_unchecked(&self, omega: &ScalarField<T>) -> Result<VectorField<T>> {
        if !omega.grid.same_shape(&self.grid) {
            return Err(Error::InvalidConfig("vorticity grid differs from the kernel grid".into()));
        }
        let mut out = self.conv.apply_all(&omega.data, self.grid.cell_area());
        let y = out.pop().unwrap();
        let x = out.pop().unwrap();
        Ok(VectorField { grid: omega.grid, x, y })
    }
}

/// Biot-Savart law on a periodic box: `u = grad^perp psi`, `lap psi = omega - mean(omega)`,
/// with spectral derivatives.
pub struct PeriodicBiotSavart<T: Real> {
    grid: Grid<T>,
    fft: Fft2<T>,
    kx: Vec<T>,
    ky: Vec<T>,
}

impl<T: Real> PeriodicBiotSavart<T> {
    pub fn new(grid: Grid<T>) -> Result<Self> {
        if grid.boundary != Boundary::Periodic {
            return Err(Error::InvalidConfig("periodic Biot-Savart law on an open grid".into()));
        }
        let wave = |n: usize| -> Vec<T> {
            let len = grid.h * T::of_usize(n);
            (0..n)
                .map(|k| if 2 * k == n { T::zero() } else { T::of(2.0) * T::PI() * T::of(freq(k, n) as f64) / len })
                .collect()
        };
        Ok(Self { fft: Fft2::new(grid.nx, grid.ny), kx: wave(grid.nx), ky: wave(grid.ny), grid })
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    /// The mean of `omega` (net circulation) is dropped.
    pub fn velocity(&self, omega: &ScalarField<T>) -> Result<VectorField<T>> {
        if !omega.grid.same_shape(&self.grid) {
            return Err(Error::InvalidConfig("vorticity grid differs from the kernel grid".into()));
        }
        let g = self.grid;
        let mut a: Vec<Complex<T>> = omega.data.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.fft.forward(&mut a);
        let mut b = a.clone();
        for j in 0..g.ny {
            for i in 0..g.nx {
                let k = g.idx(i, j);
                let k2 = self.kx[i] * self.kx[i] + self.ky[j] * self.ky[j];
                if k2 == T::zero() {
                    a[k] = Complex::new(T::zero(), T::zero());
                    b[k] = a[k];
                    continue;
                }
                // psi = -omega / k^2; u = (-d_y psi, d_x psi)
                let psi = -a[k] / k2;
                a[k] = -psi * Complex::new(T::zero(), self.ky[j]);
                b[k] = psi * Complex::new(T::zero(), self.kx[i]);
            }
        }
        rayon::join(|| self.fft.inverse(&mut a), || self.fft.inverse(&mut b));
        Ok(VectorField { grid: omega.grid, x: a.iter().map(|c| c.re).collect(), y: b.iter().map(|c| c.re).collect() })
    }
}

/// `u = K[omega]` on the grid of `omega`, by zero-padded FFT convolution.
pub fn biot_savart_fft<T: Real>(omega: &ScalarField<T>) -> Result<VectorField<T>> {
    BiotSavart::new(omega.grid).velocity(omega)
}

/// Midpoint quadrature of the kernel at arbitrary points; a source node that
/// coincides with an evaluation point is skipped.
pub fn biot_savart_direct<T: Real>(omega: &ScalarField<T>, points: &[[T; 2]]) -> Vec<[T; 2]> {
    let g = omega.grid;
    let sources: Vec<([T; 2], T)> = (0..g.ny)
        .flat_map(|j| (0..g.nx).map(move |i| (i, j)))
        .filter_map(|(i, j)| {
            let w = omega.get(i, j);
            (w != T::zero()).then(|| (g.point(i, j), w))
        })
        .collect();
    let tiny = g.h * T::of(1e-9);
    let c = g.cell_area() / (T::of(2.0) * T::PI());
    points
        .par_iter()
        .map(|x| {
            let mut u = [T::zero(), T::zero()];
            for (y, w) in &sources {
                let dx = x[0] - y[0];
                let dy = x[1] - y[1];
                let r2 = dx * dx + dy * dy;
                if r2 <= tiny * tiny {
                    continue;
                }
                u[0] = u[0] - dy * *w / r2;
                u[1] = u[1] + dx * *w / r2;
            }
            [u[0] * c, u[1] * c]
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VelocityBoundsReport<T> {
    /// `||u||_inf / (||omega||_inf ||omega||_1)^(1/2)`.
    pub sup_ratio: T,
    /// `||grad u||_p / ||omega||_p`.
    pub gradient_ratio: T,
    pub p: T,
    pub exceeded: bool,
}

/// Compares `u` with the a-priori sup bound and the Calderon-Zygmund bound.
pub fn check_velocity_bounds<T: Real>(
    omega: &ScalarField<T>,
    u: &VectorField<T>,
    p: T,
    ceiling: T,
) -> Result<VelocityBoundsReport<T>> {
    let w_inf = omega.lp_norm(T::infinity(), None)?;
    let w_1 = omega.lp_norm(T::one(), None)?;
    let w_p = omega.lp_norm(p, None)?;
    let sup_ratio = if w_inf == T::zero() { T::zero() } else { u.max_abs() / (w_inf * w_1).sqrt() };
    let gradient_ratio = if w_p == T::zero() { T::zero() } else { grad_norm(u, p, None)? / w_p };
    Ok(VelocityBoundsReport { sup_ratio, gradient_ratio, p, exceeded: sup_ratio > ceiling || gradient_ratio > ceiling })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{curl, div, Boundary};

    fn box_grid(n: usize, half: f64) -> Grid<f64> {
        Grid::new([-half, -half], 2.0 * half / n as f64, n, n, Boundary::Open).unwrap()
    }

    #[test]
    fn periodic_law_recovers_taylor_green() {
        let g = Grid::<f64>::periodic([0.0, 0.0], 2.0 * std::f64::consts::PI, 32).unwrap();
        let omega = ScalarField::from_fn(g, |x| 2.0 * x[0].sin() * x[1].sin() + 0.3);
        let u = PeriodicBiotSavart::new(g).unwrap().velocity(&omega).unwrap();
        let tg = crate::ns::taylor_green(g, 1.0);
        assert!(u.sub(&tg).max_abs() < 1e-12);
        assert!(PeriodicBiotSavart::new(Grid::new([0.0, 0.0], 0.1, 8, 8, Boundary::Open).unwrap()).is_err());
    }

    #[test]
    fn zero_vorticity_gives_zero_velocity() {
        let g = box_grid(32, 1.0);
        let u = biot_savart_fft(&ScalarField::zeros(g)).unwrap();
        assert_eq!(u.max_abs(), 0.0);
    }

    #[test]
    fn single_cell_orientation() {
        // a positive point circulation spins counter-clockwise
        let g = box_grid(32, 1.0);
        let mut w = ScalarField::zeros(g);
        let c = g.idx(16, 16);
        w.data[c] = 1.0 / g.cell_area();
        let x0 = g.point(16, 16);
        let r = 0.3;
        let v = biot_savart_direct(&w, &[[x0[0] + r, x0[1]]])[0];
        assert!(v[0].abs() < 1e-14);
        assert!((v[1] - 1.0 / (std::f64::consts::TAU * r)).abs() < 1e-12);
    }

    #[test]
    fn direct_is_odd_for_even_vorticity() {
        let g = box_grid(40, 1.0);
        let blob = VorticityBlob::gaussian([g.center()[0], g.center()[1]], 0.1, 1.0);
        let w = sample_blobs(&[blob], &g);
        let c = g.center();
        let p = [c[0] + 0.33, c[1] - 0.21];
        let q = [c[0] - 0.33, c[1] + 0.21];
        let v = biot_savart_direct(&w, &[p, q]);
        assert!((v[0][0] + v[1][0]).abs() < 1e-12 && (v[0][1] + v[1][1]).abs() < 1e-12);
    }

    #[test]
    fn radial_profile_far_field() {
        let g = box_grid(256, 1.0);
        let c = g.center();
        let blob = VorticityBlob::gaussian(c, 0.05, 2.0);
        let w = sample_blobs(&[blob], &g);
        let u = biot_savart_fft(&w).unwrap();
        let gamma = blob.circulation();
        let mut worst: f64 = 0.0;
        for j in 0..g.ny {
            for i in 0..g.nx {
                let x = g.point(i, j);
                let r = (x[0] - c[0]).hypot(x[1] - c[1]);
                if r > 0.45 {
                    let expect = gamma / (std::f64::consts::TAU * r);
                    let v = u.get(i, j);
                    worst = worst.max((v[0].hypot(v[1]) - expect).abs() / expect);
                }
            }
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn velocity_is_solenoidal_with_matching_curl() {
        let err = |n: usize| {
            let g = box_grid(n, 1.0);
            let blob = VorticityBlob::gaussian([0.05, -0.02], 0.12, 1.0);
            let w = sample_blobs(&[blob], &g);
            let u = biot_savart_fft(&w).unwrap();
            let ((i0, i1), (j0, j1)) = g.inner_half();
            let (dv, cv) = (div(&u), curl(&u));
            let mut e = (0.0f64, 0.0f64);
            for j in j0..j1 {
                for i in i0..i1 {
                    e.0 = e.0.max(dv.get(i, j).abs());
                    e.1 = e.1.max((cv.get(i, j) - w.get(i, j)).abs());
                }
            }
            e
        };
        let (a, b) = (err(64), err(128));
        assert!(a.0 < 1e-2 && a.1 < 0.1, "{a:?}");
        assert!(a.1 / b.1 > 3.0, "curl error not second order: {a:?} {b:?}");
    }

    #[test]
    fn support_violation_rejected() {
        let g = box_grid(32, 1.0);
        let w = ScalarField::from_fn(g, |_| 1.0);
        assert!(matches!(biot_savart_fft(&w), Err(Error::SupportViolation { .. })));
    }

    #[test]
    fn bounds_report_is_homogeneous() {
        let g = box_grid(64, 1.0);
        let w = sample_blobs(&[VorticityBlob::bump([0.0, 0.1], 0.3, 1.0)], &g);
        let u = biot_savart_fft(&w).unwrap();
        let r1 = check_velocity_bounds(&w, &u, 2.0, 10.0).unwrap();
        let mut w2 = w.clone();
        w2.scale(2.0);
        let mut u2 = u.clone();
        u2.scale(2.0);
        let r2 = check_velocity_bounds(&w2, &u2, 2.0, 10.0).unwrap();
        assert!((r1.sup_ratio - r2.sup_ratio).abs() < 1e-12 && (r1.gradient_ratio - r2.gradient_ratio).abs() < 1e-12);
        assert!(!r1.exceeded && r1.sup_ratio > 0.0);
        let z = check_velocity_bounds(&ScalarField::zeros(g), &VectorField::zeros(g), 2.0, 1.0).unwrap();
        assert_eq!((z.sup_ratio, z.gradient_ratio), (0.0, 0.0));
    }

    #[test]
    fn bump_circulation_quadrature() {
        let b = VorticityBlob::bump([0.0, 0.0], 0.5, 1.0);
        let g = box_grid(400, 1.0);
        let w = sample_blobs(&[b], &g);
        assert!((w.integral() - b.circulation()).abs() < 1e-6);
    }
}
