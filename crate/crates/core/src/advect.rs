//! Semi-Lagrangian transport shared by the Euler and Navier-Stokes solvers.

use rayon::prelude::*;

use crate::fields::{Boundary, Grid, VectorField};
use crate::Real;

/// `i mod n` without a division for the usual case of a few periods off.
#[inline]
fn wrap(mut i: i64, n: i64) -> i64 {
    if (0..n).contains(&i) {
        return i;
    }
    if i.abs() > 4 * n {
        return i.rem_euclid(n);
    }
    while i < 0 {
        i += n;
    }
    while i >= n {
        i -= n;
    }
    i
}

#[inline]
fn lagrange4<T: Real>(t: T) -> [T; 4] {
    let one = T::one();
    let two = T::of(2.0);
    let half = T::of(0.5);
    let sixth = T::of(1.0 / 6.0);
    [
        -t * (t - one) * (t - two) * sixth,
        (t + one) * (t - one) * (t - two) * half,
        -(t + one) * t * (t - two) * half,
        (t + one) * t * (t - one) * sixth,
    ]
}

/// Bicubic Lagrange interpolation at `x`. Open grids read zero outside; with `clip`
/// the result is limited to the range of the enclosing cell's corners.
pub(crate) fn cubic_sample<T: Real>(data: &[T], g: &Grid<T>, x: [T; 2], clip: bool) -> T {
    let fx = (x[0] - g.origin[0]) / g.h;
    let fy = (x[1] - g.origin[1]) / g.h;
    let (i0, j0) = (fx.floor(), fy.floor());
    let (tx, ty) = (fx - i0, fy - j0);
    let (i0, j0) = (i0.to_i64().unwrap_or(i64::MIN / 4), j0.to_i64().unwrap_or(i64::MIN / 4));
    let (nx, ny) = (g.nx as i64, g.ny as i64);
    let periodic = g.boundary == Boundary::Periodic;
    let at = |i: i64, j: i64| -> T {
        if periodic {
            data[(wrap(i, nx) + nx * wrap(j, ny)) as usize]
        } else if i < 0 || j < 0 || i >= nx || j >= ny {
            T::zero()
        } else {
            data[(i + nx * j) as usize]
        }
    };
    let wx = lagrange4(tx);
    let wy = lagrange4(ty);
    let mut v = T::zero();
    for (b, wyb) in wy.iter().enumerate() {
        let j = j0 - 1 + b as i64;
        let mut row = T::zero();
        for (a, wxa) in wx.iter().enumerate() {
            row = row + *wxa * at(i0 - 1 + a as i64, j);
        }
        v = v + *wyb * row;
    }
    if clip {
        let c = [at(i0, j0), at(i0 + 1, j0), at(i0, j0 + 1), at(i0 + 1, j0 + 1)];
        let lo = c.iter().copied().fold(T::infinity(), T::min);
        let hi = c.iter().copied().fold(T::neg_infinity(), T::max);
        v = v.max(lo).min(hi);
    }
    v
}

/// Departure points of the characteristics arriving at every node after `dt`,
/// traced backwards by the three-stage SSP Runge-Kutta scheme. The velocity over
/// the step is extrapolated linearly from `u_prev` (one step earlier) and `u`.
pub(crate) fn departure_points<T: Real>(u: &VectorField<T>, u_prev: &VectorField<T>, dt: T) -> Vec<[T; 2]> {
    let g = u.grid;
    let periodic = g.boundary == Boundary::Periodic;
    let inv_h = T::one() / g.h;
    let axis = |s: T, n: usize| -> (usize, usize, T) {
        let n_i = n as i64;
        let (f, t) = if periodic {
            let f = s.floor();
            (wrap(f.to_i64().unwrap_or(0), n_i), s - f)
        } else {
            let s = s.max(T::zero()).min(T::of_usize(n - 1));
            let f = s.floor().min(T::of_usize(n - 2));
            (f.to_i64().unwrap_or(0), s - f)
        };
        let i = f as usize;
        (i, if periodic && i + 1 == n { 0 } else { i + 1 }, t)
    };
    let vel = |x: [T; 2], tau: T| -> [T; 2] {
        // tau in [0, 1]: fraction of the step; extrapolated to t_n + tau dt
        let (i0, i1, tx) = axis((x[0] - g.origin[0]) * inv_h, g.nx);
        let (j0, j1, ty) = axis((x[1] - g.origin[1]) * inv_h, g.ny);
        let (r0, r1) = (j0 * g.nx, j1 * g.nx);
        let w = [
            (r0 + i0, (T::one() - tx) * (T::one() - ty)),
            (r0 + i1, tx * (T::one() - ty)),
            (r1 + i0, (T::one() - tx) * ty),
            (r1 + i1, tx * ty),
        ];
        let one = T::one() + tau;
        let mut v = [T::zero(), T::zero()];
        for (k, c) in w {
            v[0] = v[0] + c * (one * u.x[k] - tau * u_prev.x[k]);
            v[1] = v[1] + c * (one * u.y[k] - tau * u_prev.y[k]);
        }
        v
    };
    let (q3, q4, third, two3) = (T::of(0.75), T::of(0.25), T::of(1.0 / 3.0), T::of(2.0 / 3.0));
    (0..g.len())
        .into_par_iter()
        .map(|k| {
            let x = g.point(k % g.nx, k / g.nx);
            let k1 = vel(x, T::one());
            let x1 = [x[0] - dt * k1[0], x[1] - dt * k1[1]];
            let k2 = vel(x1, T::zero());
            let x2 = [q3 * x[0] + q4 * (x1[0] - dt * k2[0]), q3 * x[1] + q4 * (x1[1] - dt * k2[1])];
            let k3 = vel(x2, T::of(0.5));
            [third * x[0] + two3 * (x2[0] - dt * k3[0]), third * x[1] + two3 * (x2[1] - dt * k3[1])]
        })
        .collect()
}

/// Values of `data` carried along the characteristics ending at the nodes.
pub(crate) fn transport<T: Real>(data: &[T], g: &Grid<T>, departures: &[[T; 2]], clip: bool) -> Vec<T> {
    departures.par_iter().map(|&x| cubic_sample(data, g, x, clip)).collect()
}
