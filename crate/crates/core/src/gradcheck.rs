//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each check builds a seeded random instance, evaluates the analytic
//! gradient once, and compares every (or a sampled subset of) entries with
//! `(f(x + h) − f(x − h)) / 2h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{aggregate, aggregate_backward, Conv4dKernel};
use crate::consistency::{mask_and_flows, ConfidenceMask, ConsistencyParams};
use crate::cost_volume::{correlate_backward, dot_products, CostVolume, VolumeKind};
use crate::error::Result;
use crate::feature::{
    extract_features, extract_features_backward, l2_normalize, FeatureMap, ImageGrid,
    LinearProjector,
};
use crate::geometry::GridShape;
use crate::loss::{ccl_term, loss_with_labels, LossParams, LossTerms, PseudoLabels};
use crate::trainer::{Model, TrainConfig};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms. Below it the
/// difference quotient is dominated by rounding in the loss itself.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, MAGNITUDE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Central difference of `f` along coordinate `k` of `x`.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(
    x: &[f64],
    k: usize,
    step: f64,
    mut f: F,
) -> f64 {
    let mut probe = x.to_vec();
    probe[k] = x[k] + step;
    let up = f(&probe);
    probe[k] = x[k] - step;
    let down = f(&probe);
    (up - down) / (2.0 * step)
}

/// Largest relative error over the listed coordinates.
fn max_error<F: FnMut(&[f64]) -> f64>(
    x: &[f64],
    analytic: &[f64],
    coords: impl IntoIterator<Item = usize>,
    mut f: F,
) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut n = 0;
    for k in coords {
        let num = central_difference(x, k, STEP, &mut f);
        worst = worst.max(relative_error(analytic[k], num));
        n += 1;
    }
    (worst, n)
}

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// Tolerance this check is held to.
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn grid3() -> GridShape {
    GridShape::new(3, 3).expect("3x3 grid")
}

/// Masked contrastive term with respect to volume entries, at temperature `gamma`.
pub fn check_ccl(seed: u64, gamma: f64) -> Result<GradCheck> {
    let mut rng = rng_for(seed, 1);
    let s = grid3();
    let x = uniform(&mut rng, 81, -1.0, 1.0);
    let vol = CostVolume::new(s, s, x.clone(), VolumeKind::Raw)?;
    let (flow, _, _) = mask_and_flows(&vol, ConsistencyParams::default())?;
    let mut bits: Vec<bool> = (0..9).map(|_| rng.random_bool(0.7)).collect();
    bits[0] = true;
    let mask = ConfidenceMask::from_bits(s, bits)?;
    let analytic = ccl_term(&vol, &flow, &mask, gamma)?.grad;
    let (err, n) = max_error(&x, &analytic, 0..81, |p| {
        let v = CostVolume::new(s, s, p.to_vec(), VolumeKind::Raw).expect("finite probe");
        ccl_term(&v, &flow, &mask, gamma).expect("valid probe").loss
    });
    Ok(GradCheck {
        name: "ccl_term",
        max_rel_err: err,
        checked: n,
        tolerance: 1e-4,
    })
}

/// Correlation backward against a random linear probe of the volume.
pub fn check_correlate(seed: u64) -> Result<GradCheck> {
    let mut rng = rng_for(seed, 2);
    let s = grid3();
    let d = 4;
    let ds = l2_normalize(&FeatureMap::new(s, d, uniform(&mut rng, 9 * d, -1.0, 1.0))?);
    let dt = l2_normalize(&FeatureMap::new(s, d, uniform(&mut rng, 9 * d, -1.0, 1.0))?);
    let probe = uniform(&mut rng, 81, -1.0, 1.0);
    let (gs, gt) = correlate_backward(&ds, &dt, &probe)?;
    let score = |a: &[f64], b: &[f64]| -> f64 {
        let fa = FeatureMap::new(s, d, a.to_vec()).expect("finite");
        let fb = FeatureMap::new(s, d, b.to_vec()).expect("finite");
        dot_products(&fa, &fb)
            .iter()
            .zip(&probe)
            .map(|(c, r)| c * r)
            .sum()
    };
    let (e1, n1) = max_error(ds.values(), &gs, 0..9 * d, |p| score(p, dt.values()));
    let (e2, n2) = max_error(dt.values(), &gt, 0..9 * d, |p| score(ds.values(), p));
    Ok(GradCheck {
        name: "correlate",
        max_rel_err: e1.max(e2),
        checked: n1 + n2,
        tolerance: 1e-4,
    })
}

/// 4D convolution + ReLU backward: every kernel tap, the bias, and every
/// input entry, against a random linear probe of the output.
pub fn check_conv4d(seed: u64) -> Result<GradCheck> {
    let mut rng = rng_for(seed, 3);
    let s = grid3();
    let x = uniform(&mut rng, 81, -1.0, 1.0);
    let c = CostVolume::new(s, s, x.clone(), VolumeKind::Raw)?;
    let mut kernel = Conv4dKernel::new(3, uniform(&mut rng, 81, -0.5, 0.5), 0.3)?;
    let probe = uniform(&mut rng, 81, -1.0, 1.0);
    let grad_c = aggregate_backward(&c, &mut kernel, &probe)?;
    let score = |vol: &CostVolume, k: &Conv4dKernel| -> f64 {
        aggregate(vol, k)
            .values()
            .iter()
            .zip(&probe)
            .map(|(a, r)| a * r)
            .sum()
    };

    let (e_in, n_in) = max_error(&x, &grad_c, 0..81, |p| {
        score(
            &CostVolume::new(s, s, p.to_vec(), VolumeKind::Raw).expect("finite"),
            &kernel,
        )
    });
    let base = kernel.clone();
    let (e_w, n_w) = max_error(&base.weights, &base.weights_grad, 0..81, |p| {
        let k = Conv4dKernel::new(3, p.to_vec(), base.bias).expect("finite");
        score(&c, &k)
    });
    let (e_b, n_b) = max_error(&[base.bias], &[base.bias_grad], 0..1, |p| {
        let k = Conv4dKernel::new(3, base.weights.clone(), p[0]).expect("finite");
        score(&c, &k)
    });
    Ok(GradCheck {
        name: "conv4d",
        max_rel_err: e_in.max(e_w).max(e_b),
        checked: n_in + n_w + n_b,
        tolerance: 1e-4,
    })
}

/// Projector backward against a random linear probe of the features.
pub fn check_projector(seed: u64) -> Result<GradCheck> {
    let mut rng = rng_for(seed, 4);
    let s = grid3();
    let (c, d) = (3, 4);
    let img = ImageGrid::new(s, c, uniform(&mut rng, 9 * c, -1.0, 1.0))?;
    let mut proj = LinearProjector::new(
        c,
        d,
        uniform(&mut rng, c * d, -1.0, 1.0),
        uniform(&mut rng, d, -1.0, 1.0),
    )?;
    let probe = uniform(&mut rng, 9 * d, -1.0, 1.0);
    extract_features_backward(&img, &mut proj, &probe)?;
    let score = |w: &[f64], b: &[f64]| -> f64 {
        let p = LinearProjector::new(c, d, w.to_vec(), b.to_vec()).expect("finite");
        extract_features(&img, &p)
            .expect("shapes")
            .values()
            .iter()
            .zip(&probe)
            .map(|(f, r)| f * r)
            .sum()
    };
    let (e_w, n_w) = max_error(&proj.weight, &proj.weight_grad, 0..c * d, |p| {
        score(p, &proj.bias)
    });
    let (e_b, n_b) = max_error(&proj.bias, &proj.bias_grad, 0..d, |p| {
        score(&proj.weight, p)
    });
    Ok(GradCheck {
        name: "projector",
        max_rel_err: e_w.max(e_b),
        checked: n_w + n_b,
        tolerance: 1e-4,
    })
}

/// Whole pipeline (projector → normalize → correlate → aggregate → joint
/// loss) with respect to every projector and kernel parameter. Pseudo labels
/// are computed once at the unperturbed point and held fixed.
pub fn check_end_to_end(seed: u64) -> Result<GradCheck> {
    let mut rng = rng_for(seed, 5);
    let s = grid3();
    let cfg = TrainConfig {
        h: 3,
        w: 3,
        dim: 4,
        channels: 3,
        ..TrainConfig::default()
    };
    let src = ImageGrid::new(
        s,
        cfg.channels,
        uniform(&mut rng, 9 * cfg.channels, 0.0, 1.0),
    )?;
    let tgt = ImageGrid::new(
        s,
        cfg.channels,
        uniform(&mut rng, 9 * cfg.channels, 0.0, 1.0),
    )?;
    let mut model = Model {
        projector: LinearProjector::new(
            cfg.channels,
            cfg.dim,
            uniform(&mut rng, cfg.channels * cfg.dim, -1.0, 1.0),
            uniform(&mut rng, cfg.dim, -0.5, 0.5),
        )?,
        kernel: Conv4dKernel::near_identity(3, 0.1, &mut rng)?,
    };
    let params = LossParams::default();
    // loose tolerances so both masks are non-empty on a tiny grid
    let cons = ConsistencyParams::new(0.5, 2.0)?;
    let fwd = model.forward(&src, &tgt)?;
    let labels = PseudoLabels::from_volumes(&fwd.c_raw, &fwd.c_agg, cons)?;
    let loss = loss_with_labels(&fwd.c_raw, &fwd.c_agg, &labels, params, LossTerms::ALL)?;
    model.backward(&fwd, &src, &tgt, &loss.grad_raw, &loss.grad_agg)?;

    let objective = |m: &Model| -> f64 {
        let f = m.forward(&src, &tgt).expect("forward");
        loss_with_labels(&f.c_raw, &f.c_agg, &labels, params, LossTerms::ALL)
            .expect("loss")
            .report
            .total
    };
    let base = model.clone();
    let mut worst = 0.0f64;
    let mut n = 0;
    let mut run = |x: &[f64], g: &[f64], set: &dyn Fn(&mut Model, &[f64])| {
        let (e, k) = max_error(x, g, 0..x.len(), |p| {
            let mut m = base.clone();
            set(&mut m, p);
            objective(&m)
        });
        worst = worst.max(e);
        n += k;
    };
    run(
        &base.projector.weight,
        &base.projector.weight_grad,
        &|m, p| m.projector.weight.copy_from_slice(p),
    );
    run(&base.projector.bias, &base.projector.bias_grad, &|m, p| {
        m.projector.bias.copy_from_slice(p)
    });
    run(&base.kernel.weights, &base.kernel.weights_grad, &|m, p| {
        m.kernel.weights.copy_from_slice(p)
    });
    run(&[base.kernel.bias], &[base.kernel.bias_grad], &|m, p| {
        m.kernel.bias = p[0]
    });
    Ok(GradCheck {
        name: "end_to_end",
        max_rel_err: worst,
        checked: n,
        tolerance: 1e-3,
    })
}

/// The full suite on one seed.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for gamma in [0.07, 0.1, 1.0] {
        out.push(check_ccl(seed, gamma)?);
    }
    out.push(check_correlate(seed)?);
    out.push(check_conv4d(seed)?);
    out.push(check_projector(seed)?);
    out.push(check_end_to_end(seed)?);
    Ok(out)
}
