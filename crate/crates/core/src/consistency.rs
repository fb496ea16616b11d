//! Winner-take-all pseudo flows and the forward-backward confidence mask.
//!
//! A cell `i` is kept when the backward flow found at its forward match
//! approximately undoes the forward flow:
//!
//! ```text
//! |f(i) + b(t)|² < α₁ (|f(i)|² + |b(t)|²) + α₂,   t = i + f(i)
//! ```
//!
//! Norms are squared Euclidean distances in grid cells.

use std::io::Write;

use crate::cost_volume::{transpose, CostVolume, VolumeKind};
use crate::error::{Error, Result};
use crate::geometry::{Displacement, GridShape, Lookup};

/// Per-cell integer displacement from a "from" grid into a "to" grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowField {
    shape: GridShape,
    target: GridShape,
    vectors: Vec<Displacement>,
    source_kind: Option<VolumeKind>,
}

impl FlowField {
    /// Flow supplied from outside (ground truth, files); displacements are
    /// not required to land in-grid.
    pub fn new(shape: GridShape, target: GridShape, vectors: Vec<Displacement>) -> Result<Self> {
        if vectors.len() != shape.len() {
            return Err(Error::shape("flow vectors", shape.len(), vectors.len()));
        }
        Ok(Self {
            shape,
            target,
            vectors,
            source_kind: None,
        })
    }

    pub fn constant(shape: GridShape, d: Displacement) -> Self {
        Self {
            shape,
            target: shape,
            vectors: vec![d; shape.len()],
            source_kind: None,
        }
    }

    pub fn zeros(shape: GridShape) -> Self {
        Self::constant(shape, Displacement::ZERO)
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn target(&self) -> GridShape {
        self.target
    }

    pub fn vectors(&self) -> &[Displacement] {
        &self.vectors
    }

    /// Volume kind that produced this flow, if it came from [`wta_flow`].
    pub fn source_kind(&self) -> Option<VolumeKind> {
        self.source_kind
    }

    #[inline]
    pub fn get(&self, i: usize) -> Displacement {
        self.vectors[i]
    }

    /// Cell of the target grid that `i` points at.
    #[inline]
    pub fn lookup(&self, i: usize) -> Lookup {
        self.shape.displace_into(i, self.vectors[i], self.target)
    }

    /// CSV with header `i,dy,dx`, one cell per line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "i,dy,dx")?;
        for (i, d) in self.vectors.iter().enumerate() {
            writeln!(out, "{i},{},{}", d.dy, d.dx)?;
        }
        Ok(())
    }
}

/// One reliability bit per cell plus the popcount.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfidenceMask {
    shape: GridShape,
    bits: Vec<bool>,
    count: usize,
}

impl ConfidenceMask {
    pub fn from_bits(shape: GridShape, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != shape.len() {
            return Err(Error::shape("mask bits", shape.len(), bits.len()));
        }
        let count = bits.iter().filter(|&&b| b).count();
        Ok(Self { shape, bits, count })
    }

    pub fn full(shape: GridShape) -> Self {
        Self {
            shape,
            bits: vec![true; shape.len()],
            count: shape.len(),
        }
    }

    pub fn empty(shape: GridShape) -> Self {
        Self {
            shape,
            bits: vec![false; shape.len()],
            count: 0,
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    /// Number of set bits.
    pub fn count(&self) -> usize {
        self.count
    }

    /// Plain PGM (`P2`, maxval 1), one grid row per line.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "P2")?;
        writeln!(out, "{} {}", self.shape.w(), self.shape.h())?;
        writeln!(out, "1")?;
        for row in self.bits.chunks(self.shape.w()) {
            let line: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

/// Tolerances of the forward-backward check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyParams {
    /// Relative tolerance (dimensionless).
    pub alpha1: f64,
    /// Absolute tolerance in squared grid cells.
    pub alpha2: f64,
}

impl ConsistencyParams {
    pub fn new(alpha1: f64, alpha2: f64) -> Result<Self> {
        if !(alpha1.is_finite() && alpha2.is_finite() && alpha1 >= 0.0 && alpha2 >= 0.0) {
            return Err(Error::Config(format!(
                "consistency tolerances must be finite and nonnegative, got ({alpha1}, {alpha2})"
            )));
        }
        Ok(Self { alpha1, alpha2 })
    }
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        Self {
            alpha1: 0.1,
            alpha2: 0.05,
        }
    }
}

/// Index of the row maximum; ties go to the lowest index.
#[inline]
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = row[0];
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best = j;
            best_v = v;
        }
    }
    best
}

/// Winner-take-all flow: `coord(argmax_j C(i, j)) − coord(i)` for every row.
pub fn wta_flow(c: &CostVolume) -> FlowField {
    let (from, to) = (c.shape_s(), c.shape_t());
    let vectors = (0..c.rows())
        .map(|i| from.displacement_to(i, argmax(c.row(i)), to))
        .collect();
    FlowField {
        shape: from,
        target: to,
        vectors,
        source_kind: Some(c.kind()),
    }
}

/// Forward-backward check with strict inequality. Cells whose forward match
/// falls outside the target grid get bit 0.
pub fn consistency_mask(
    f_fwd: &FlowField,
    f_bwd: &FlowField,
    p: ConsistencyParams,
) -> Result<ConfidenceMask> {
    if f_bwd.shape != f_fwd.target || f_bwd.target != f_fwd.shape {
        return Err(Error::shape(
            "consistency_mask grids",
            format!("backward {} -> {}", f_fwd.target, f_fwd.shape),
            format!("backward {} -> {}", f_bwd.shape, f_bwd.target),
        ));
    }
    let bits = (0..f_fwd.shape.len())
        .map(|i| match f_fwd.lookup(i) {
            Lookup::OutOfGrid => false,
            Lookup::Inside(t) => {
                let fwd = f_fwd.vectors[i];
                let bwd = f_bwd.vectors[t];
                let lhs = (fwd + bwd).norm_sq() as f64;
                let rhs = p.alpha1 * (fwd.norm_sq() + bwd.norm_sq()) as f64 + p.alpha2;
                lhs < rhs
            }
        })
        .collect();
    ConfidenceMask::from_bits(f_fwd.shape, bits)
}

/// Forward flow, backward flow (from the transposed volume), and their mask.
pub fn mask_and_flows(
    c: &CostVolume,
    p: ConsistencyParams,
) -> Result<(FlowField, FlowField, ConfidenceMask)> {
    let fwd = wta_flow(c);
    let bwd = wta_flow(&transpose(c));
    let mask = consistency_mask(&fwd, &bwd, p)?;
    Ok((fwd, bwd, mask))
}
