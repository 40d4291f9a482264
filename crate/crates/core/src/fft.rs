use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::Real;

/// Planned 2D transform over a row-major `nx * ny` buffer (x fastest).
pub(crate) struct Fft2<T: Real> {
    nx: usize,
    ny: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Real> Fft2<T> {
    pub fn new(nx: usize, ny: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            nx,
            ny,
            row_fwd: planner.plan_fft_forward(nx),
            row_inv: planner.plan_fft_inverse(nx),
            col_fwd: planner.plan_fft_forward(ny),
            col_inv: planner.plan_fft_inverse(ny),
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn forward(&self, data: &mut [Complex<T>]) {
        self.run(data, &self.row_fwd, &self.col_fwd);
    }

    /// Inverse transform, normalized so that `inverse(forward(x)) == x`.
    pub fn inverse(&self, data: &mut [Complex<T>]) {
        self.run(data, &self.row_inv, &self.col_inv);
        let scale = T::one() / T::of_usize(self.len());
        for v in data.iter_mut() {
            *v = *v * scale;
        }
    }

    fn run(&self, data: &mut [Complex<T>], rows: &Arc<dyn Fft<T>>, cols: &Arc<dyn Fft<T>>) {
        assert_eq!(data.len(), self.len());
        rows.process(data);
        let mut t = vec![Complex::new(T::zero(), T::zero()); self.len()];
        transpose(data, &mut t, self.nx, self.ny);
        cols.process(&mut t);
        transpose(&t, data, self.ny, self.nx);
    }
}

/// Transposes `src` (`h` rows of length `w`) into `dst` (`w` rows of length `h`).
fn transpose<C: Copy>(src: &[C], dst: &mut [C], w: usize, h: usize) {
    const B: usize = 32;
    for jb in (0..h).step_by(B) {
        for ib in (0..w).step_by(B) {
            for j in jb..(jb + B).min(h) {
                for i in ib..(ib + B).min(w) {
                    dst[i * h + j] = src[j * w + i];
                }
            }
        }
    }
}

/// Signed integer frequency of index `k` on an `n`-point transform.
#[inline]
pub(crate) fn freq(k: usize, n: usize) -> isize {
    if k <= n / 2 {
        k as isize
    } else {
        k as isize - n as isize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_non_square() {
        let (nx, ny) = (12, 8);
        let f = Fft2::<f64>::new(nx, ny);
        let orig: Vec<Complex<f64>> = (0..nx * ny)
            .map(|k| Complex::new((k as f64 * 0.37).sin(), (k as f64 * 0.11).cos()))
            .collect();
        let mut d = orig.clone();
        f.forward(&mut d);
        f.inverse(&mut d);
        for (a, b) in orig.iter().zip(&d) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn single_mode_lands_in_one_bin() {
        let (nx, ny) = (16, 8);
        let f = Fft2::<f64>::new(nx, ny);
        let mut d: Vec<Complex<f64>> = (0..nx * ny)
            .map(|k| {
                let (i, j) = (k % nx, k / nx);
                let ph = 2.0 * std::f64::consts::PI * (3.0 * i as f64 / nx as f64 + 2.0 * j as f64 / ny as f64);
                Complex::new(ph.cos(), ph.sin())
            })
            .collect();
        f.forward(&mut d);
        for (k, v) in d.iter().enumerate() {
            let expect = if k == 2 * nx + 3 { (nx * ny) as f64 } else { 0.0 };
            assert!((v.re - expect).abs() < 1e-9 && v.im.abs() < 1e-9, "bin {k}: {v}");
        }
    }
}
