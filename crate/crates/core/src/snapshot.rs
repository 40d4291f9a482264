//! Binary field snapshots.
//!
//! Layout: magic `PFLOW1`, then little-endian `u32 nx, ny, ncomp`, `f64 origin_x,
//! origin_y, h`, then the samples as `f64`, one full row-major plane per component.

use std::io::{Read, Write};

use crate::fields::{Boundary, Grid, ScalarField, VectorField};
use crate::{Error, Real, Result};

pub const MAGIC: &[u8; 6] = b"PFLOW1";

/// Writes one or more same-grid component planes.
pub fn write_planes<T: Real, W: Write>(mut w: W, grid: &Grid<T>, planes: &[&[T]]) -> Result<()> {
    w.write_all(MAGIC)?;
    for n in [grid.nx, grid.ny, planes.len()] {
        let n = u32::try_from(n).map_err(|_| Error::Format(format!("dimension {n} exceeds u32")))?;
        w.write_all(&n.to_le_bytes())?;
    }
    for v in [grid.origin[0], grid.origin[1], grid.h] {
        w.write_all(&v.to_f().to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(grid.len() * 8);
    for p in planes {
        if p.len() != grid.len() {
            return Err(Error::Format(format!("plane of {} samples for {} nodes", p.len(), grid.len())));
        }
        buf.clear();
        for v in p.iter() {
            buf.extend_from_slice(&v.to_f().to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn write_scalar<T: Real, W: Write>(w: W, f: &ScalarField<T>) -> Result<()> {
    write_planes(w, &f.grid, &[&f.data])
}

pub fn write_vector<T: Real, W: Write>(w: W, u: &VectorField<T>) -> Result<()> {
    write_planes(w, &u.grid, &[&u.x, &u.y])
}

/// Reads a snapshot. The boundary kind is not stored; callers pass the one they expect.
pub fn read_planes<T: Real, R: Read>(mut r: R, boundary: Boundary) -> Result<(Grid<T>, Vec<Vec<T>>)> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("missing PFLOW1 magic".into()));
    }
    let mut u = [0u8; 4];
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        r.read_exact(&mut u)?;
        *d = u32::from_le_bytes(u) as usize;
    }
    let mut f = [0u8; 8];
    let mut head = [0f64; 3];
    for v in head.iter_mut() {
        r.read_exact(&mut f)?;
        *v = f64::from_le_bytes(f);
    }
    let [nx, ny, ncomp] = dims;
    let grid = Grid::new([T::of(head[0]), T::of(head[1])], T::of(head[2]), nx, ny, boundary)?;
    let mut bytes = vec![0u8; nx * ny * 8];
    let mut planes = Vec::with_capacity(ncomp);
    for _ in 0..ncomp {
        r.read_exact(&mut bytes)?;
        planes.push(bytes.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap()))).collect());
    }
    Ok((grid, planes))
}

pub fn read_scalar<T: Real, R: Read>(r: R, boundary: Boundary) -> Result<ScalarField<T>> {
    let (grid, mut planes) = read_planes(r, boundary)?;
    if planes.len() != 1 {
        return Err(Error::Format(format!("expected 1 component, found {}", planes.len())));
    }
    Ok(ScalarField { grid, data: planes.pop().unwrap() })
}

pub fn read_vector<T: Real, R: Read>(r: R, boundary: Boundary) -> Result<VectorField<T>> {
    let (grid, mut planes) = read_planes(r, boundary)?;
    if planes.len() != 2 {
        return Err(Error::Format(format!("expected 2 components, found {}", planes.len())));
    }
    let y = planes.pop().unwrap();
    let x = planes.pop().unwrap();
    Ok(VectorField { grid, x, y })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let g = Grid::new([-1.0, 2.0], 0.5, 8, 9, Boundary::Open).unwrap();
        let f = ScalarField::from_fn(g, |p| p[0] + 10.0 * p[1]);
        let mut bytes = Vec::new();
        write_scalar(&mut bytes, &f).unwrap();
        assert_eq!(&bytes[..6], b"PFLOW1");
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[10..14].try_into().unwrap()), 9);
        assert_eq!(u32::from_le_bytes(bytes[14..18].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(bytes[18..26].try_into().unwrap()), -1.0);
        assert_eq!(f64::from_le_bytes(bytes[34..42].try_into().unwrap()), 0.5);
        assert_eq!(bytes.len(), 42 + 72 * 8);
        assert_eq!(f64::from_le_bytes(bytes[50..58].try_into().unwrap()), f.data[1]);
    }

    #[test]
    fn vector_roundtrip() {
        let g = Grid::<f64>::new([0.0, 0.0], 0.25, 10, 8, Boundary::Periodic).unwrap();
        let u = VectorField::from_fn(g, |p| [p[0].sin(), p[1] * p[0]]);
        let mut bytes = Vec::new();
        write_vector(&mut bytes, &u).unwrap();
        let back: VectorField<f64> = read_vector(&bytes[..], Boundary::Periodic).unwrap();
        assert_eq!(back, u);
        assert!(read_scalar::<f64, _>(&bytes[..], Boundary::Periodic).is_err());
    }

    #[test]
    fn bad_magic() {
        let bytes = b"PFLOW2xxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxxx";
        assert!(matches!(read_planes::<f64, _>(&bytes[..], Boundary::Open), Err(Error::Format(_))));
    }
}
