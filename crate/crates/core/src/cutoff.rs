//! Cutoff functions that switch the flow off near each obstacle.

use serde::{Deserialize, Serialize};

use crate::fields::{Grid, ScalarField, VectorField};
use crate::geometry::{Geometry, LatticeConfig};
use crate::{Error, Real, Result};

/// Per-obstacle bump in reference coordinates (obstacle scaled to size one).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CutoffProfile<T> {
    /// One on `|x|_inf <= 3/2`, zero on `|x|_inf >= 2`, quintic ramp between.
    Smoothstep,
    /// `ln(|x| / outer) / ln(1 / outer)` on the annulus `1 <= |x| <= outer`.
    Harmonic { outer: T },
}

impl<T: Real> CutoffProfile<T> {
    /// Harmonic profile whose annulus runs from `epsilon` to `d_epsilon`.
    pub fn harmonic_for(cfg: &LatticeConfig<T>) -> Result<Self> {
        let outer = cfg.d_epsilon / cfg.epsilon;
        if !(outer > T::one()) {
            return Err(Error::InvalidConfig(format!(
                "harmonic cutoff needs d_epsilon > epsilon (ratio {outer})"
            )));
        }
        Ok(CutoffProfile::Harmonic { outer })
    }

    /// Half-width of the square (reference units) outside which the bump vanishes.
    pub fn reach(&self) -> T {
        match *self {
            CutoffProfile::Smoothstep => T::of(2.0),
            CutoffProfile::Harmonic { outer } => outer,
        }
    }
}

#[inline]
fn smoothstep<T: Real>(t: T) -> T {
    let t2 = t * t;
    t2 * t * (T::of(10.0) + t * (T::of(-15.0) + T::of(6.0) * t))
}

#[inline]
fn smoothstep_slope<T: Real>(t: T) -> T {
    let u = t * (T::one() - t);
    T::of(30.0) * u * u
}

/// Bump value at reference point `x`.
pub fn base_cutoff<T: Real>(x: [T; 2], profile: &CutoffProfile<T>) -> T {
    match *profile {
        CutoffProfile::Smoothstep => {
            let s = x[0].abs().max(x[1].abs());
            let t = ((s - T::of(1.5)) * T::of(2.0)).max(T::zero()).min(T::one());
            (T::one() - smoothstep(t)).max(T::zero()).min(T::one())
        }
        CutoffProfile::Harmonic { outer } => {
            let r = x[0].hypot(x[1]);
            if r <= T::one() {
                T::one()
            } else if r >= outer {
                T::zero()
            } else {
                (outer / r).ln() / outer.ln()
            }
        }
    }
}

/// Analytic gradient of [`base_cutoff`].
pub fn base_cutoff_grad<T: Real>(x: [T; 2], profile: &CutoffProfile<T>) -> [T; 2] {
    let zero = [T::zero(), T::zero()];
    match *profile {
        CutoffProfile::Smoothstep => {
            let (ax, ay) = (x[0].abs(), x[1].abs());
            let s = ax.max(ay);
            if s <= T::of(1.5) || s >= T::of(2.0) {
                return zero;
            }
            let t = (s - T::of(1.5)) * T::of(2.0);
            let ds = -T::of(2.0) * smoothstep_slope(t);
            if ax == ay {
                // on the diagonal kink: mean of the one-sided gradients
                let half = ds * T::of(0.5);
                [half * x[0].signum(), half * x[1].signum()]
            } else if ax > ay {
                [ds * x[0].signum(), T::zero()]
            } else {
                [T::zero(), ds * x[1].signum()]
            }
        }
        CutoffProfile::Harmonic { outer } => {
            let r2 = x[0] * x[0] + x[1] * x[1];
            if r2 <= T::one() || r2 >= outer * outer {
                return zero;
            }
            let c = -T::one() / (outer.ln() * r2);
            [c * x[0], c * x[1]]
        }
    }
}

/// `phi^eps = 1 - sum phi((x - z)/eps)` and its analytic gradient.
#[derive(Clone, Debug)]
pub struct LatticeCutoff<T> {
    pub phi: ScalarField<T>,
    pub grad: VectorField<T>,
}

fn check_resolved<T: Real>(geometry: &Geometry<T>, grid: &Grid<T>) -> Result<()> {
    let eps = geometry.config.epsilon;
    if !geometry.is_empty() && grid.h > eps / T::of(8.0) * (T::one() + T::of(1e-9)) {
        return Err(Error::UnderResolved { h: grid.h.to_f(), epsilon: eps.to_f() });
    }
    Ok(())
}

pub fn lattice_cutoff_with_grad<T: Real>(
    geometry: &Geometry<T>,
    grid: &Grid<T>,
    profile: &CutoffProfile<T>,
) -> Result<LatticeCutoff<T>> {
    check_resolved(geometry, grid)?;
    let mut phi = ScalarField::from_fn(*grid, |_| T::one());
    let mut grad = VectorField::zeros(*grid);
    let e = geometry.config.epsilon;
    let reach = profile.reach() * e;
    for (k, z) in geometry.centers.iter().enumerate() {
        let (ilo, ihi) = grid.x_range(z[0] - reach, z[0] + reach);
        let (jlo, jhi) = grid.y_range(z[1] - reach, z[1] + reach);
        for j in jlo..jhi {
            for i in ilo..ihi {
                let xi = geometry.to_reference(k, grid.point(i, j));
                let id = grid.idx(i, j);
                phi.data[id] = phi.data[id] - base_cutoff(xi, profile);
                let g = base_cutoff_grad(xi, profile);
                grad.x[id] = grad.x[id] - g[0] / e;
                grad.y[id] = grad.y[id] - g[1] / e;
            }
        }
    }
    Ok(LatticeCutoff { phi, grad })
}

pub fn lattice_cutoff<T: Real>(
    geometry: &Geometry<T>,
    grid: &Grid<T>,
    profile: &CutoffProfile<T>,
) -> Result<ScalarField<T>> {
    Ok(lattice_cutoff_with_grad(geometry, grid, profile)?.phi)
}

/// Cutoff of the single obstacle `k`: `phi((x - z_k)/eps)`, with its gradient.
pub fn obstacle_cutoff<T: Real>(
    geometry: &Geometry<T>,
    k: usize,
    grid: &Grid<T>,
    profile: &CutoffProfile<T>,
) -> LatticeCutoff<T> {
    let mut phi = ScalarField::zeros(*grid);
    let mut grad = VectorField::zeros(*grid);
    let e = geometry.config.epsilon;
    let z = geometry.centers[k];
    let reach = profile.reach() * e;
    let (ilo, ihi) = grid.x_range(z[0] - reach, z[0] + reach);
    let (jlo, jhi) = grid.y_range(z[1] - reach, z[1] + reach);
    for j in jlo..jhi {
        for i in ilo..ihi {
            let xi = geometry.to_reference(k, grid.point(i, j));
            let id = grid.idx(i, j);
            phi.data[id] = base_cutoff(xi, profile);
            let g = base_cutoff_grad(xi, profile);
            grad.x[id] = g[0] / e;
            grad.y[id] = g[1] / e;
        }
    }
    LatticeCutoff { phi, grad }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CutoffNorms<T> {
    pub lhs: T,
    pub bound_shape: T,
    pub ratio: T,
}

/// Measures `||1 - phi^eps||_p + eps ||grad phi^eps||_p` against `eps^(2/p) / d^((1+mu)/p)`.
pub fn verify_cutoff_norms<T: Real>(geometry: &Geometry<T>, grid: &Grid<T>, p: T) -> Result<CutoffNorms<T>> {
    cutoff_norms_with(geometry, grid, p, &CutoffProfile::Smoothstep)
}

pub fn cutoff_norms_with<T: Real>(
    geometry: &Geometry<T>,
    grid: &Grid<T>,
    p: T,
    profile: &CutoffProfile<T>,
) -> Result<CutoffNorms<T>> {
    let cut = lattice_cutoff_with_grad(geometry, grid, profile)?;
    let defect = cut.phi.map(|v| T::one() - v);
    let e = geometry.config.epsilon;
    let lhs = defect.lp_norm(p, None)? + e * cut.grad.lp_norm(p, None)?;
    let bound_shape = if p.is_infinite() {
        T::one()
    } else {
        let cfg = &geometry.config;
        e.powf(T::of(2.0) / p) / cfg.d_epsilon.powf((T::one() + cfg.mu) / p)
    };
    Ok(CutoffNorms { lhs, bound_shape, ratio: lhs / bound_shape })
}
