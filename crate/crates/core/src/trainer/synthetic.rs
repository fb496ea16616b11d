//! Synthetic image pairs with dense ground-truth flow.
//!
//! The source is a smooth random texture. The target is the source moved by
//! an integer affine displacement field with per-cell jitter, plus Gaussian
//! noise. Optionally a number of channels are redrawn independently for the
//! target, modelling appearance that differs between two instances of the
//! same scene, and a global exposure offset is added to the target.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::consistency::{ConfidenceMask, FlowField};
use crate::error::Result;
use crate::feature::ImageGrid;
use crate::geometry::{Displacement, GridShape, Lookup};

/// Knobs of the pair generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticParams {
    /// Noise standard deviation as a fraction of the `[0, 1]` value range.
    pub noise: f64,
    /// Translation components are drawn from `-max_shift..=max_shift`.
    pub max_shift: i64,
    /// Entries of the linear part are drawn from `[-affine, affine]`.
    pub affine: f64,
    /// Per-cell probability of a ±1 jitter on one axis.
    pub jitter: f64,
    /// Spacing (cells) between the texture's random control points.
    pub smoothness: usize,
    /// Trailing channels that are not transported but redrawn for the target.
    pub appearance_channels: usize,
    /// Half-width of a uniform offset added to every target value, modelling
    /// a global exposure change.
    pub brightness: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            noise: 0.05,
            max_shift: 2,
            affine: 0.1,
            jitter: 0.1,
            smoothness: 3,
            appearance_channels: 0,
            brightness: 0.5,
        }
    }
}

/// Source/target pair and the ground truth used for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub source: ImageGrid,
    pub target: ImageGrid,
    pub gt_flow: FlowField,
    /// Cells whose transported content actually lands in the target.
    pub valid: ConfidenceMask,
}

/// Bilinear upsampling of uniform random control points, values in `[0, 1]`.
pub fn smooth_texture<R: Rng + ?Sized>(
    rng: &mut R,
    shape: GridShape,
    channels: usize,
    spacing: usize,
) -> ImageGrid {
    let spacing = spacing.max(1);
    let ch = (shape.h() - 1) / spacing + 2;
    let cw = (shape.w() - 1) / spacing + 2;
    let mut img = ImageGrid::zeros(shape, channels);
    for c in 0..channels {
        let ctrl: Vec<f64> = (0..ch * cw).map(|_| rng.random::<f64>()).collect();
        for r in 0..shape.h() {
            let (r0, fr) = (r / spacing, (r % spacing) as f64 / spacing as f64);
            for q in 0..shape.w() {
                let (q0, fq) = (q / spacing, (q % spacing) as f64 / spacing as f64);
                let at = |y: usize, x: usize| ctrl[y * cw + x];
                let top = at(r0, q0) * (1.0 - fq) + at(r0, q0 + 1) * fq;
                let bottom = at(r0 + 1, q0) * (1.0 - fq) + at(r0 + 1, q0 + 1) * fq;
                img.pixel_mut(r * shape.w() + q)[c] = top * (1.0 - fr) + bottom * fr;
            }
        }
    }
    img
}

/// Integer affine field about the grid centre, plus sparse ±1 jitter.
pub fn random_displacement_field<R: Rng + ?Sized>(
    rng: &mut R,
    shape: GridShape,
    params: &SyntheticParams,
) -> FlowField {
    let s = params.max_shift;
    let (ty, tx) = (rng.random_range(-s..=s), rng.random_range(-s..=s));
    let a = params.affine;
    let mut lin = [0.0f64; 4];
    if a > 0.0 {
        lin.iter_mut().for_each(|v| *v = rng.random_range(-a..=a));
    }
    let cy = (shape.h() as f64 - 1.0) / 2.0;
    let cx = (shape.w() as f64 - 1.0) / 2.0;
    let vectors = (0..shape.len())
        .map(|i| {
            let y = (i / shape.w()) as f64 - cy;
            let x = (i % shape.w()) as f64 - cx;
            let mut d = Displacement::new(
                (lin[0] * y + lin[1] * x).round() as i64 + ty,
                (lin[2] * y + lin[3] * x).round() as i64 + tx,
            );
            if params.jitter > 0.0 && rng.random_bool(params.jitter.min(1.0)) {
                let step = if rng.random_bool(0.5) { 1 } else { -1 };
                if rng.random_bool(0.5) {
                    d.dy += step;
                } else {
                    d.dx += step;
                }
            }
            d
        })
        .collect();
    FlowField::new(shape, shape, vectors).expect("field covers the grid")
}

/// Moves every source cell along `field` into a fresh target.
///
/// Target cells nobody lands on are filled with uniform noise. When two
/// source cells land on the same target cell the first (lowest flat index)
/// keeps it and the later one is marked invalid, as are cells that leave
/// the grid. Gaussian noise of standard deviation `noise` is then added to
/// every target value.
pub fn transport<R: Rng + ?Sized>(
    rng: &mut R,
    source: &ImageGrid,
    field: &FlowField,
    noise: f64,
) -> Result<(ImageGrid, ConfidenceMask)> {
    let shape = source.shape();
    let channels = source.channels();
    let mut target = ImageGrid::zeros(shape, channels);
    let mut claimed = vec![false; shape.len()];
    let mut valid = vec![false; shape.len()];
    for (i, ok) in valid.iter_mut().enumerate() {
        if let Lookup::Inside(t) = field.lookup(i) {
            if !claimed[t] {
                claimed[t] = true;
                *ok = true;
                target.pixel_mut(t).copy_from_slice(source.pixel(i));
            }
        }
    }
    for (t, _) in claimed.iter().enumerate().filter(|(_, c)| !**c) {
        target
            .pixel_mut(t)
            .iter_mut()
            .for_each(|v| *v = rng.random::<f64>());
    }
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).expect("finite noise level");
        for t in 0..shape.len() {
            target
                .pixel_mut(t)
                .iter_mut()
                .for_each(|v| *v += normal.sample(rng));
        }
    }
    Ok((target, ConfidenceMask::from_bits(shape, valid)?))
}

/// Draws one pair. Identical RNG state gives an identical pair.
pub fn generate_pair<R: Rng + ?Sized>(
    rng: &mut R,
    shape: GridShape,
    channels: usize,
    params: &SyntheticParams,
) -> Result<SyntheticPair> {
    let source = smooth_texture(rng, shape, channels, params.smoothness);
    let gt_flow = random_displacement_field(rng, shape, params);
    let (mut target, valid) = transport(rng, &source, &gt_flow, params.noise)?;
    let extra = params.appearance_channels.min(channels);
    if extra > 0 {
        let fresh = smooth_texture(rng, shape, extra, params.smoothness);
        for t in 0..shape.len() {
            target.pixel_mut(t)[channels - extra..].copy_from_slice(fresh.pixel(t));
        }
    }
    if params.brightness > 0.0 {
        let b = params.brightness;
        let offset = rng.random_range(-b..=b);
        target.values_mut().iter_mut().for_each(|v| *v += offset);
    }
    Ok(SyntheticPair {
        source,
        target,
        gt_flow,
        valid,
    })
}
