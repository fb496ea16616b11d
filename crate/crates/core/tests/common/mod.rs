//! Naive reference implementations used by the integration tests. Each one
//! works on plain vectors and nested loops and shares no code with the
//! library beyond the input and output types.

#![allow(dead_code)]

use jointcorr::aggregation::Conv4dKernel;
use jointcorr::consistency::{ConfidenceMask, FlowField};
use jointcorr::cost_volume::{CostVolume, VolumeKind};
use jointcorr::geometry::{Displacement, GridShape};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn grid(h: usize, w: usize) -> GridShape {
    GridShape::new(h, w).unwrap()
}

/// Random grid with sides in `1..=4`.
pub fn small_grid(rng: &mut ChaCha8Rng) -> GridShape {
    grid(rng.random_range(1..=4), rng.random_range(1..=4))
}

pub fn random_volume(rng: &mut ChaCha8Rng, s: GridShape, t: GridShape) -> CostVolume {
    let n = s.len() * t.len();
    let v = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    CostVolume::new(s, t, v, VolumeKind::Raw).unwrap()
}

/// Volume whose entries come from a tiny alphabet, so row maxima tie often.
pub fn tied_volume(rng: &mut ChaCha8Rng, s: GridShape, t: GridShape) -> CostVolume {
    let n = s.len() * t.len();
    let v = (0..n)
        .map(|_| rng.random_range(0..3) as f64 * 0.5)
        .collect();
    CostVolume::new(s, t, v, VolumeKind::Raw).unwrap()
}

pub fn random_flow(rng: &mut ChaCha8Rng, s: GridShape, t: GridShape, reach: i64) -> FlowField {
    let v = (0..s.len())
        .map(|_| {
            Displacement::new(
                rng.random_range(-reach..=reach),
                rng.random_range(-reach..=reach),
            )
        })
        .collect();
    FlowField::new(s, t, v).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, s: GridShape, p: f64) -> ConfidenceMask {
    ConfidenceMask::from_bits(s, (0..s.len()).map(|_| rng.random_bool(p)).collect()).unwrap()
}

/// Row-wise first maximum, reported as `(dy, dx)` from the source cell.
pub fn wta(values: &[f64], s: GridShape, t: GridShape) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for i in 0..s.len() {
        let mut best = 0;
        for j in 1..t.len() {
            if values[i * t.len() + j] > values[i * t.len() + best] {
                best = j;
            }
        }
        let (iy, ix) = ((i / s.w()) as i64, (i % s.w()) as i64);
        let (jy, jx) = ((best / t.w()) as i64, (best % t.w()) as i64);
        out.push((jy - iy, jx - ix));
    }
    out
}

/// Forward-backward check spelled out with integer arithmetic.
pub fn mask(
    fwd: &[(i64, i64)],
    bwd: &[(i64, i64)],
    s: GridShape,
    t: GridShape,
    a1: f64,
    a2: f64,
) -> Vec<bool> {
    (0..s.len())
        .map(|i| {
            let (y, x) = ((i / s.w()) as i64 + fwd[i].0, (i % s.w()) as i64 + fwd[i].1);
            if y < 0 || x < 0 || y >= t.h() as i64 || x >= t.w() as i64 {
                return false;
            }
            let b = bwd[y as usize * t.w() + x as usize];
            let sum = (fwd[i].0 + b.0, fwd[i].1 + b.1);
            let lhs = (sum.0 * sum.0 + sum.1 * sum.1) as f64;
            let nf = (fwd[i].0 * fwd[i].0 + fwd[i].1 * fwd[i].1) as f64;
            let nb = (b.0 * b.0 + b.1 * b.1) as f64;
            lhs < a1 * (nf + nb) + a2
        })
        .collect()
}

/// Masked cross-entropy with an explicit log-sum-exp per row.
pub fn ccl(
    values: &[f64],
    s: GridShape,
    t: GridShape,
    labels: &[(i64, i64)],
    bits: &[bool],
    gamma: f64,
) -> (f64, Vec<f64>) {
    let m = t.len();
    let n = bits.iter().filter(|b| **b).count();
    let mut grad = vec![0.0; values.len()];
    if n == 0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    for i in 0..s.len() {
        if !bits[i] {
            continue;
        }
        let y = (i / s.w()) as i64 + labels[i].0;
        let x = (i % s.w()) as i64 + labels[i].1;
        let p = y as usize * t.w() + x as usize;
        let mut top = f64::NEG_INFINITY;
        for j in 0..m {
            top = top.max(values[i * m + j] / gamma);
        }
        let mut z = 0.0;
        for j in 0..m {
            z += (values[i * m + j] / gamma - top).exp();
        }
        let lse = top + z.ln();
        loss += lse - values[i * m + p] / gamma;
        for j in 0..m {
            let prob = (values[i * m + j] / gamma - lse).exp();
            let onehot = if j == p { 1.0 } else { 0.0 };
            grad[i * m + j] = (prob - onehot) / (gamma * n as f64);
        }
    }
    (loss / n as f64, grad)
}

/// Direct eight-loop 4D convolution with zero padding, then ReLU.
pub fn conv4d(values: &[f64], s: GridShape, t: GridShape, kernel: &Conv4dKernel) -> Vec<f64> {
    let k = kernel.size() as i64;
    let r = k / 2;
    let dims = [s.h() as i64, s.w() as i64, t.h() as i64, t.w() as i64];
    let at = |a: i64, b: i64, c: i64, d: i64| -> f64 {
        if a < 0
            || b < 0
            || c < 0
            || d < 0
            || a >= dims[0]
            || b >= dims[1]
            || c >= dims[2]
            || d >= dims[3]
        {
            return 0.0;
        }
        values[(((a * dims[1] + b) * dims[2] + c) * dims[3] + d) as usize]
    };
    let mut out = Vec::with_capacity(values.len());
    for a in 0..dims[0] {
        for b in 0..dims[1] {
            for c in 0..dims[2] {
                for d in 0..dims[3] {
                    let mut z = kernel.bias;
                    for p in 0..k {
                        for q in 0..k {
                            for u in 0..k {
                                for v in 0..k {
                                    let wt =
                                        kernel.weights[(((p * k + q) * k + u) * k + v) as usize];
                                    z += wt * at(a + p - r, b + q - r, c + u - r, d + v - r);
                                }
                            }
                        }
                    }
                    out.push(z.max(0.0));
                }
            }
        }
    }
    out
}

/// Fraction of valid cells whose predicted offset is within the threshold.
pub fn pck(
    pred: &[(i64, i64)],
    gt: &[(i64, i64)],
    valid: &[bool],
    alpha: f64,
    s: GridShape,
) -> Option<(usize, usize, f64)> {
    let thr = alpha * s.h().max(s.w()) as f64;
    let mut correct = 0;
    let mut total = 0;
    for i in 0..pred.len() {
        if valid[i] {
            total += 1;
            let dy = (pred[i].0 - gt[i].0) as f64;
            let dx = (pred[i].1 - gt[i].1) as f64;
            if (dy * dy + dx * dx).sqrt() <= thr {
                correct += 1;
            }
        }
    }
    (total > 0).then(|| (correct, total, correct as f64 / total as f64))
}

pub fn pairs(flow: &FlowField) -> Vec<(i64, i64)> {
    flow.vectors().iter().map(|d| (d.dy, d.dx)).collect()
}
