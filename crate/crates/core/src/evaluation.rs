//! Dense PCK, endpoint error and grid warping against synthetic ground truth.

use crate::consistency::{ConfidenceMask, FlowField};
use crate::error::{Error, Result};
use crate::feature::ImageGrid;
use crate::geometry::Lookup;

/// Fraction of valid cells whose predicted displacement lies within
/// `alpha · max(h, w)` cells of the ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PckResult {
    pub alpha: f64,
    pub correct: usize,
    pub total: usize,
    pub pck: f64,
}

pub const EVAL_CSV_HEADER: &str = "alpha,correct,total,pck,mean_epe";

impl PckResult {
    /// One line of the evaluation CSV (`alpha,correct,total,pck,mean_epe`).
    pub fn csv_row(&self, mean_epe: f64) -> String {
        format!(
            "{},{},{},{},{}",
            self.alpha, self.correct, self.total, self.pck, mean_epe
        )
    }
}

fn check_layout(pred: &FlowField, gt: &FlowField, valid: &ConfidenceMask) -> Result<()> {
    if pred.shape() != gt.shape() || valid.shape() != gt.shape() {
        return Err(Error::shape(
            "evaluation grids",
            gt.shape(),
            format!("pred {} / valid {}", pred.shape(), valid.shape()),
        ));
    }
    if valid.count() == 0 {
        return Err(Error::NoEvaluableCells);
    }
    Ok(())
}

pub fn pck(
    pred: &FlowField,
    gt: &FlowField,
    valid: &ConfidenceMask,
    alpha: f64,
) -> Result<PckResult> {
    check_layout(pred, gt, valid)?;
    let threshold = alpha * pred.shape().max_side() as f64;
    let correct = (0..gt.shape().len())
        .filter(|&i| valid.get(i) && (pred.get(i) - gt.get(i)).norm() <= threshold)
        .count();
    let total = valid.count();
    Ok(PckResult {
        alpha,
        correct,
        total,
        pck: correct as f64 / total as f64,
    })
}

/// Mean Euclidean distance (grid cells) between predicted and true
/// displacements over valid cells.
pub fn endpoint_error(pred: &FlowField, gt: &FlowField, valid: &ConfidenceMask) -> Result<f64> {
    check_layout(pred, gt, valid)?;
    let sum: f64 = (0..gt.shape().len())
        .filter(|&i| valid.get(i))
        .map(|i| (pred.get(i) - gt.get(i)).norm())
        .sum();
    Ok(sum / valid.count() as f64)
}

/// Pulls `img` back along `flow`: `out(i) = img(i + flow(i))`, zero where
/// the lookup leaves the grid.
pub fn warp(img: &ImageGrid, flow: &FlowField) -> Result<ImageGrid> {
    if flow.shape() != img.shape() || flow.target() != img.shape() {
        return Err(Error::shape("warp grids", img.shape(), flow.shape()));
    }
    let mut out = ImageGrid::zeros(img.shape(), img.channels());
    for i in 0..img.shape().len() {
        if let Lookup::Inside(j) = flow.lookup(i) {
            out.pixel_mut(i).copy_from_slice(img.pixel(j));
        }
    }
    Ok(out)
}
