//! Raw matching cost between two feature maps, stored as a
//! `(h_s·w_s) × (h_t·w_t)` matrix over flattened cell indices.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::geometry::GridShape;

/// Whether a volume came straight from feature correlation or through the
/// aggregation network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VolumeKind {
    Raw,
    Aggregated,
}

/// Pairwise similarity between every source cell `i` and target cell `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    shape_s: GridShape,
    shape_t: GridShape,
    values: Vec<f64>,
    kind: VolumeKind,
}

impl CostVolume {
    pub fn new(
        shape_s: GridShape,
        shape_t: GridShape,
        values: Vec<f64>,
        kind: VolumeKind,
    ) -> Result<Self> {
        let expected = shape_s.len() * shape_t.len();
        if values.len() != expected {
            return Err(Error::shape("cost volume values", expected, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost volume"));
        }
        Ok(Self {
            shape_s,
            shape_t,
            values,
            kind,
        })
    }

    pub fn shape_s(&self) -> GridShape {
        self.shape_s
    }

    pub fn shape_t(&self) -> GridShape {
        self.shape_t
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn rows(&self) -> usize {
        self.shape_s.len()
    }

    pub fn cols(&self) -> usize {
        self.shape_t.len()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn same_layout(&self, other: &CostVolume) -> bool {
        self.shape_s == other.shape_s && self.shape_t == other.shape_t
    }

    /// Row-major CSV dump, one source cell per line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut line = String::new();
        for i in 0..self.rows() {
            line.clear();
            for (j, v) in self.row(i).iter().enumerate() {
                if j > 0 {
                    line.push(',');
                }
                write!(line, "{v}").unwrap();
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// `C(i, j) = ds.row(i) · dt.row(j)`; a cosine score since both maps must be
/// L2-normalized.
pub fn correlate(ds: &FeatureMap, dt: &FeatureMap) -> Result<CostVolume> {
    if ds.dim() != dt.dim() {
        return Err(Error::shape("correlate dim", ds.dim(), dt.dim()));
    }
    if !ds.is_normalized() || !dt.is_normalized() {
        return Err(Error::NotNormalized);
    }
    CostVolume::new(
        ds.shape(),
        dt.shape(),
        dot_products(ds, dt),
        VolumeKind::Raw,
    )
}

/// All pairwise row dot products, without the normalization contract.
pub(crate) fn dot_products(ds: &FeatureMap, dt: &FeatureMap) -> Vec<f64> {
    let (n_s, n_t) = (ds.shape().len(), dt.shape().len());
    let mut values = vec![0.0; n_s * n_t];
    for (i, out) in values.chunks_exact_mut(n_t).enumerate() {
        let a = ds.row(i);
        for (j, o) in out.iter_mut().enumerate() {
            *o = dot(a, dt.row(j));
        }
    }
    values
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Reverse mode of [`correlate`]:
/// `grad_ds(i) = Σ_j G[i][j]·dt(j)`, `grad_dt(j) = Σ_i G[i][j]·ds(i)`.
pub fn correlate_backward(
    ds: &FeatureMap,
    dt: &FeatureMap,
    grad_c: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if ds.dim() != dt.dim() {
        return Err(Error::shape("correlate_backward dim", ds.dim(), dt.dim()));
    }
    let d = ds.dim();
    let (n_s, n_t) = (ds.shape().len(), dt.shape().len());
    if grad_c.len() != n_s * n_t {
        return Err(Error::shape(
            "correlate_backward grad",
            n_s * n_t,
            grad_c.len(),
        ));
    }
    let mut grad_ds = vec![0.0; n_s * d];
    let mut grad_dt = vec![0.0; n_t * d];
    for i in 0..n_s {
        let g_row = &grad_c[i * n_t..(i + 1) * n_t];
        let a = ds.row(i);
        let gs = &mut grad_ds[i * d..(i + 1) * d];
        for (j, &g) in g_row.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let b = dt.row(j);
            let gt = &mut grad_dt[j * d..(j + 1) * d];
            for k in 0..d {
                gs[k] += g * b[k];
                gt[k] += g * a[k];
            }
        }
    }
    Ok((grad_ds, grad_dt))
}

/// `values'[j][i] = values[i][j]`, with source and target shapes swapped.
pub fn transpose(c: &CostVolume) -> CostVolume {
    let (r, n) = (c.rows(), c.cols());
    let mut values = vec![0.0; r * n];
    for i in 0..r {
        for j in 0..n {
            values[j * r + i] = c.values[i * n + j];
        }
    }
    CostVolume {
        shape_s: c.shape_t,
        shape_t: c.shape_s,
        values,
        kind: c.kind,
    }
}
