//! Obstacle lattice: shape, placement, disjointness and rasterized regions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::fields::Grid;
use crate::{Error, Real, Result};

/// Reference obstacle `K`, contained in `[-1,1]^2` with the origin inside.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObstacleShape<T> {
    /// Closed unit disk.
    Disk,
    /// `[-1,1]^2` with corners rounded by circles of radius `corner_radius`.
    SmoothedSquare { corner_radius: T },
}

impl<T: Real> ObstacleShape<T> {
    pub fn validate(&self) -> Result<()> {
        if let ObstacleShape::SmoothedSquare { corner_radius } = *self {
            if !(corner_radius > T::zero() && corner_radius <= T::one()) {
                return Err(Error::InvalidConfig(format!(
                    "corner radius {corner_radius} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Closed membership test in reference coordinates.
    #[inline]
    pub fn contains(&self, p: [T; 2]) -> bool {
        match *self {
            ObstacleShape::Disk => p[0] * p[0] + p[1] * p[1] <= T::one(),
            ObstacleShape::SmoothedSquare { corner_radius: r } => {
                let a = T::one() - r;
                let qx = (p[0].abs() - a).max(T::zero());
                let qy = (p[1].abs() - a).max(T::zero());
                qx * qx + qy * qy <= r * r
            }
        }
    }

    /// Euclidean distance from `p` to the shape (zero inside).
    pub fn exterior_distance(&self, p: [T; 2]) -> T {
        let (a, r) = match *self {
            ObstacleShape::Disk => (T::zero(), T::one()),
            ObstacleShape::SmoothedSquare { corner_radius } => (T::one() - corner_radius, corner_radius),
        };
        let qx = (p[0].abs() - a).max(T::zero());
        let qy = (p[1].abs() - a).max(T::zero());
        (qx.hypot(qy) - r).max(T::zero())
    }

    pub fn area(&self) -> T {
        match *self {
            ObstacleShape::Disk => T::PI(),
            ObstacleShape::SmoothedSquare { corner_radius: r } => {
                T::of(4.0) - (T::of(4.0) - T::PI()) * r * r
            }
        }
    }

    pub fn is_disk(&self) -> bool {
        matches!(self, ObstacleShape::Disk)
            || matches!(self, ObstacleShape::SmoothedSquare { corner_radius } if *corner_radius == T::one())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeConfig<T> {
    pub epsilon: T,
    pub d_epsilon: T,
    pub mu: T,
    pub shape: ObstacleShape<T>,
}

impl<T: Real> LatticeConfig<T> {
    pub fn new(epsilon: T, d_epsilon: T, mu: T, shape: ObstacleShape<T>) -> Self {
        Self { epsilon, d_epsilon, mu, shape }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > T::zero()) {
            return Err(Error::InvalidConfig(format!("epsilon = {} must be positive", self.epsilon)));
        }
        if self.d_epsilon < self.epsilon {
            return Err(Error::InvalidConfig(format!(
                "d_epsilon = {} < epsilon = {}: only well-separated lattices are supported",
                self.d_epsilon, self.epsilon
            )));
        }
        if self.d_epsilon > T::one() {
            return Err(Error::InvalidConfig(format!("d_epsilon = {} exceeds 1", self.d_epsilon)));
        }
        if !(self.mu >= T::zero() && self.mu <= T::one()) {
            return Err(Error::InvalidConfig(format!("mu = {} outside [0, 1]", self.mu)));
        }
        self.shape.validate()
    }

    /// Obstacles per row, `[(1 + 2d) / (2(eps + d))]`.
    pub fn n1(&self) -> usize {
        let two = T::of(2.0);
        floor_count((T::one() + two * self.d_epsilon) / (two * (self.epsilon + self.d_epsilon)))
    }

    /// Number of rows, `[n1^mu]`.
    pub fn n2(&self) -> usize {
        let n1 = self.n1();
        if n1 == 0 {
            return 0;
        }
        floor_count(T::of_usize(n1).powf(self.mu))
    }

    /// `eps / d^((1+mu)/2)`, the quantity the compatibility constraint bounds.
    pub fn density_ratio(&self) -> T {
        self.epsilon / self.d_epsilon.powf((T::one() + self.mu) / T::of(2.0))
    }
}

/// How the separation `d_eps` follows `eps` along a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum DRule<T> {
    /// `d = eps`, the densest admissible lattice.
    Equal,
    /// `d = eps^alpha`, `alpha` in (0, 1].
    Power { alpha: T },
    Fixed { d: T },
}

impl<T: Real> DRule<T> {
    pub fn d_for(&self, epsilon: T) -> T {
        match *self {
            DRule::Equal => epsilon,
            DRule::Power { alpha } => epsilon.powf(alpha),
            DRule::Fixed { d } => d,
        }
    }
}

/// Integer part, tolerant to the last few ulps so that printed ratios such as
/// `1.2 / 0.4` land on the exact integer.
fn floor_count<T: Real>(x: T) -> usize {
    let bumped = x * (T::one() + T::of(64.0) * T::epsilon());
    bumped.floor().to_usize().unwrap_or(0)
}

/// A realized lattice of obstacles `z_ij + eps K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry<T> {
    #[serde(flatten)]
    pub config: LatticeConfig<T>,
    pub n1: usize,
    pub n2: usize,
    pub centers: Vec<[T; 2]>,
}

/// Builds the regular lattice `z_ij = (eps, eps) + 2(eps + d)(i-1, j-1)`.
pub fn lattice_centers<T: Real>(cfg: LatticeConfig<T>) -> Result<Geometry<T>> {
    cfg.validate()?;
    let n1 = cfg.n1();
    if n1 == 0 {
        return Err(Error::InvalidConfig(format!(
            "lattice with epsilon = {}, d_epsilon = {} holds no obstacle",
            cfg.epsilon, cfg.d_epsilon
        )));
    }
    let n2 = cfg.n2();
    let pitch = T::of(2.0) * (cfg.epsilon + cfg.d_epsilon);
    let mut centers = Vec::with_capacity(n1 * n2);
    for j in 0..n2 {
        for i in 0..n1 {
            centers.push([
                cfg.epsilon + pitch * T::of_usize(i),
                cfg.epsilon + pitch * T::of_usize(j),
            ]);
        }
    }
    Ok(Geometry { config: cfg, n1, n2, centers })
}

impl<T: Real> Geometry<T> {
    /// Obstacles at arbitrary centers (no lattice rule); `n1` is the count and `n2 = 1`.
    pub fn from_centers(config: LatticeConfig<T>, centers: Vec<[T; 2]>) -> Self {
        Self { config, n1: centers.len(), n2: 1, centers }
    }

    /// No obstacles at all: the fluid domain is the whole plane.
    pub fn empty(config: LatticeConfig<T>) -> Self {
        Self { config, n1: 0, n2: 0, centers: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn epsilon(&self) -> T {
        self.config.epsilon
    }

    /// Center of obstacle `(i, j)`, zero-based.
    pub fn center(&self, i: usize, j: usize) -> [T; 2] {
        self.centers[j * self.n1 + i]
    }

    /// Lattice index `(i, j)` of the k-th stored obstacle.
    pub fn index_of(&self, k: usize) -> (usize, usize) {
        if self.n1 == 0 {
            (k, 0)
        } else {
            (k % self.n1, k / self.n1)
        }
    }

    /// Maps a physical point to the reference coordinates of obstacle `k`.
    #[inline]
    pub fn to_reference(&self, k: usize, x: [T; 2]) -> [T; 2] {
        let z = self.centers[k];
        let e = self.config.epsilon;
        [(x[0] - z[0]) / e, (x[1] - z[1]) / e]
    }

    /// Whether `x` lies in some closed obstacle.
    pub fn in_solid(&self, x: [T; 2]) -> bool {
        let two = T::of(2.0);
        self.centers.iter().enumerate().any(|(k, z)| {
            let e = self.config.epsilon;
            (x[0] - z[0]).abs() <= two * e
                && (x[1] - z[1]).abs() <= two * e
                && self.config.shape.contains(self.to_reference(k, x))
        })
    }

    /// `n1 n2 <= 1 / d^(1+mu)`.
    pub fn count_bound_holds(&self) -> bool {
        let d = self.config.d_epsilon;
        T::of_usize(self.n1 * self.n2) <= T::one() / d.powf(T::one() + self.config.mu)
    }

    /// Measure of the sleeve `A_eps`, exact for the reference shape.
    pub fn sleeve_area(&self) -> T {
        let e2 = self.config.epsilon * self.config.epsilon;
        T::of_usize(self.len()) * e2 * (T::of(16.0) - self.config.shape.area())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// True iff the inflated cells `z_ij + eps(-2,2)^2` are pairwise disjoint.
pub fn check_disjoint<T: Real>(geometry: &Geometry<T>) -> bool {
    let w = T::of(4.0) * geometry.config.epsilon;
    // bucket size equals the cell width, so only neighbouring buckets can overlap
    let key = |z: &[T; 2]| -> (i64, i64) {
        ((z[0] / w).floor().to_i64().unwrap_or(0), (z[1] / w).floor().to_i64().unwrap_or(0))
    };
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (k, z) in geometry.centers.iter().enumerate() {
        buckets.entry(key(z)).or_default().push(k);
    }
    for (k, z) in geometry.centers.iter().enumerate() {
        let (bx, by) = key(z);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(list) = buckets.get(&(bx + dx, by + dy)) {
                    for &m in list {
                        if m <= k {
                            continue;
                        }
                        let q = geometry.centers[m];
                        if (q[0] - z[0]).abs() < w && (q[1] - z[1]).abs() < w {
                            return false;
                        }
                    }
                }
            }
        }
    }
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// Union of the closed obstacles.
    Solid,
    /// The perforated domain.
    Fluid,
    /// `A_eps`: punctured inflated cells around each obstacle.
    Sleeve,
    /// The reference cell `U = (-2,2)^2 \ K`.
    ReferenceCell,
}

/// Boolean node mask over a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask<T> {
    pub grid: Grid<T>,
    pub region: Region,
    pub cells: Vec<bool>,
}

impl<T: Real> RegionMask<T> {
    pub fn from_fn(grid: Grid<T>, region: Region, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut cells = Vec::with_capacity(grid.len());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                cells.push(f(i, j));
            }
        }
        Self { grid, region, cells }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    /// Area of the selected nodes (each node stands for one `h x h` cell).
    pub fn area(&self) -> T {
        T::of_usize(self.count()) * self.grid.h * self.grid.h
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[self.grid.idx(i, j)]
    }
}

/// The three physical regions on one grid.
#[derive(Clone, Debug)]
pub struct Masks<T> {
    pub solid: RegionMask<T>,
    pub fluid: RegionMask<T>,
    pub sleeve: RegionMask<T>,
}

fn check_resolution<T: Real>(geometry: &Geometry<T>, grid: &Grid<T>) -> Result<()> {
    let eps = geometry.config.epsilon;
    if !geometry.is_empty() && grid.h > eps / T::of(8.0) * (T::one() + T::of(1e-9)) {
        return Err(Error::UnderResolved { h: grid.h.to_f(), epsilon: eps.to_f() });
    }
    Ok(())
}

/// Rasterizes one region. A node belongs to an obstacle iff it lies inside the
/// closed scaled shape.
pub fn rasterize<T: Real>(geometry: &Geometry<T>, grid: &Grid<T>, region: Region) -> Result<RegionMask<T>> {
    match region {
        Region::ReferenceCell => Ok(reference_cell_mask(&geometry.config.shape, grid)),
        _ => {
            let all = rasterize_all(geometry, grid)?;
            Ok(match region {
                Region::Solid => all.solid,
                Region::Fluid => all.fluid,
                _ => all.sleeve,
            })
        }
    }
}

pub fn rasterize_all<T: Real>(geometry: &Geometry<T>, grid: &Grid<T>) -> Result<Masks<T>> {
    check_resolution(geometry, grid)?;
    let n = grid.len();
    let mut solid = vec![false; n];
    let mut sleeve = vec![false; n];
    let e = geometry.config.epsilon;
    let two_e = T::of(2.0) * e;
    for (k, z) in geometry.centers.iter().enumerate() {
        let (ilo, ihi) = grid.x_range(z[0] - two_e, z[0] + two_e);
        let (jlo, jhi) = grid.y_range(z[1] - two_e, z[1] + two_e);
        for j in jlo..jhi {
            for i in ilo..ihi {
                let x = grid.point(i, j);
                let in_box = (x[0] - z[0]).abs() < two_e && (x[1] - z[1]).abs() < two_e;
                let inside = geometry.config.shape.contains(geometry.to_reference(k, x));
                let id = grid.idx(i, j);
                if inside {
                    solid[id] = true;
                } else if in_box {
                    sleeve[id] = true;
                }
            }
        }
    }
    let fluid = solid.iter().map(|s| !s).collect();
    Ok(Masks {
        solid: RegionMask { grid: *grid, region: Region::Solid, cells: solid },
        fluid: RegionMask { grid: *grid, region: Region::Fluid, cells: fluid },
        sleeve: RegionMask { grid: *grid, region: Region::Sleeve, cells: sleeve },
    })
}

/// Nodes of `grid` lying in `(-2,2)^2 \ K` (reference coordinates).
pub fn reference_cell_mask<T: Real>(shape: &ObstacleShape<T>, grid: &Grid<T>) -> RegionMask<T> {
    let two = T::of(2.0);
    RegionMask::from_fn(*grid, Region::ReferenceCell, |i, j| {
        let p = grid.point(i, j);
        p[0].abs() < two && p[1].abs() < two && !shape.contains(p)
    })
}
