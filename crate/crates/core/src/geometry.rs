//! Grid-index arithmetic shared by every stage of the pipeline.
//!
//! Cells are addressed either by a zero-based flat index `i = row * w + col`
//! or by a `(row, col)` pair. Displacements are integer offsets measured in
//! grid cells.

use std::fmt;
use std::ops::{Add, Neg, Sub};

use crate::error::{Error, Result};

/// Spatial extent of a grid: `h` rows by `w` columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridShape {
    h: usize,
    w: usize,
}

impl GridShape {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidShape { h, w });
        }
        Ok(Self { h, w })
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    /// Number of cells, `h * w`.
    #[inline]
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    /// Always false; a grid holds at least one cell.
    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn max_side(&self) -> usize {
        self.h.max(self.w)
    }

    pub fn flat_to_coord(&self, i: usize) -> Result<(usize, usize)> {
        if i >= self.len() {
            return Err(Error::IndexOutOfGrid {
                index: i,
                size: self.len(),
            });
        }
        Ok((i / self.w, i % self.w))
    }

    pub fn coord_to_flat(&self, row: usize, col: usize) -> Result<usize> {
        if row >= self.h || col >= self.w {
            return Err(Error::CoordOutOfGrid {
                row,
                col,
                h: self.h,
                w: self.w,
            });
        }
        Ok(row * self.w + col)
    }

    /// Flat index of `(row + d.dy, col + d.dx)`, or [`Lookup::OutOfGrid`].
    ///
    /// `i` must be in-grid; an out-of-range `i` also yields `OutOfGrid`.
    pub fn apply_displacement(&self, i: usize, d: Displacement) -> Lookup {
        self.displace_into(i, d, *self)
    }

    /// Like [`GridShape::apply_displacement`], but the displaced coordinate is
    /// looked up in a different grid `target` (source and target grids may
    /// differ in shape).
    pub fn displace_into(&self, i: usize, d: Displacement, target: GridShape) -> Lookup {
        if i >= self.len() {
            return Lookup::OutOfGrid;
        }
        let row = (i / self.w) as i64 + d.dy;
        let col = (i % self.w) as i64 + d.dx;
        if row < 0 || col < 0 || row >= target.h as i64 || col >= target.w as i64 {
            Lookup::OutOfGrid
        } else {
            Lookup::Inside(row as usize * target.w + col as usize)
        }
    }

    /// Offset from cell `from` of this grid to cell `to` of grid `target`.
    pub fn displacement_to(&self, from: usize, to: usize, target: GridShape) -> Displacement {
        debug_assert!(from < self.len() && to < target.len());
        Displacement {
            dy: (to / target.w) as i64 - (from / self.w) as i64,
            dx: (to % target.w) as i64 - (from % self.w) as i64,
        }
    }

    /// Offset that moves cell `from` onto cell `to`. Both must be in-grid.
    pub fn displacement_between(&self, from: usize, to: usize) -> Displacement {
        self.displacement_to(from, to, *self)
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

/// Convenience free-function forms of the index conversions.
pub fn flat_to_coord(i: usize, shape: GridShape) -> Result<(usize, usize)> {
    shape.flat_to_coord(i)
}

pub fn coord_to_flat(coord: (usize, usize), shape: GridShape) -> Result<usize> {
    shape.coord_to_flat(coord.0, coord.1)
}

pub fn apply_displacement(i: usize, d: Displacement, shape: GridShape) -> Lookup {
    shape.apply_displacement(i, d)
}

/// Integer offset in grid cells.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Displacement {
    pub dy: i64,
    pub dx: i64,
}

impl Displacement {
    pub const ZERO: Displacement = Displacement { dy: 0, dx: 0 };

    pub const fn new(dy: i64, dx: i64) -> Self {
        Self { dy, dx }
    }

    /// Squared Euclidean length in cells².
    #[inline]
    pub fn norm_sq(&self) -> i64 {
        self.dy * self.dy + self.dx * self.dx
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        (self.norm_sq() as f64).sqrt()
    }
}

impl Add for Displacement {
    type Output = Displacement;
    fn add(self, rhs: Self) -> Self {
        Displacement::new(self.dy + rhs.dy, self.dx + rhs.dx)
    }
}

impl Sub for Displacement {
    type Output = Displacement;
    fn sub(self, rhs: Self) -> Self {
        Displacement::new(self.dy - rhs.dy, self.dx - rhs.dx)
    }
}

impl Neg for Displacement {
    type Output = Displacement;
    fn neg(self) -> Self {
        Displacement::new(-self.dy, -self.dx)
    }
}

/// Result of looking up a displaced cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lookup {
    Inside(usize),
    OutOfGrid,
}

impl Lookup {
    pub fn inside(self) -> Option<usize> {
        match self {
            Lookup::Inside(i) => Some(i),
            Lookup::OutOfGrid => None,
        }
    }
}
