//! Confidence-aware contrastive loss over cost-volume rows, its cross
//! pseudo-label variants, and the weighted joint objective.
//!
//! Every term has the same form: a masked softmax cross-entropy at
//! temperature `γ`, where each reliable source cell's positive is the
//! target cell picked by a winner-take-all pseudo label. Labels and masks are
//! data; no gradient flows through the argmax or the mask.

use std::fmt;
use std::str::FromStr;

use crate::consistency::{mask_and_flows, ConfidenceMask, ConsistencyParams, FlowField};
use crate::cost_volume::CostVolume;
use crate::error::{Error, Result};
use crate::geometry::Lookup;

/// Temperature and the two module weights of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    pub gamma: f64,
    pub lambda_c: f64,
    pub lambda_a: f64,
}

impl LossParams {
    pub fn new(gamma: f64, lambda_c: f64, lambda_a: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {gamma}"
            )));
        }
        if !(lambda_c.is_finite() && lambda_a.is_finite() && lambda_c >= 0.0 && lambda_a >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative, got ({lambda_c}, {lambda_a})"
            )));
        }
        Ok(Self {
            gamma,
            lambda_c,
            lambda_a,
        })
    }
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            lambda_c: 0.5,
            lambda_a: 0.5,
        }
    }
}

/// Which of the four contrastive terms contribute to the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LossTerms {
    /// Raw cost, raw pseudo labels.
    pub cc: bool,
    /// Raw cost, aggregated pseudo labels.
    pub ac: bool,
    /// Aggregated cost, aggregated pseudo labels.
    pub aa: bool,
    /// Aggregated cost, raw pseudo labels.
    pub ca: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        cc: true,
        ac: true,
        aa: true,
        ca: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.cc || self.ac || self.aa || self.ca)
    }

    /// The four ablation rows: (a) `{aa}`, (b) `{aa, ca}`, (c) `{cc, aa}`,
    /// (d) all four.
    pub fn ablation_row(row: AblationRow) -> LossTerms {
        let none = LossTerms {
            cc: false,
            ac: false,
            aa: false,
            ca: false,
        };
        match row {
            AblationRow::A => LossTerms { aa: true, ..none },
            AblationRow::B => LossTerms {
                aa: true,
                ca: true,
                ..none
            },
            AblationRow::C => LossTerms {
                cc: true,
                aa: true,
                ..none
            },
            AblationRow::D => LossTerms::ALL,
        }
    }
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms::ALL
    }
}

/// Row selector of the loss-formulation ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationRow {
    A,
    B,
    C,
    D,
}

impl AblationRow {
    pub const ALL: [AblationRow; 4] = [
        AblationRow::A,
        AblationRow::B,
        AblationRow::C,
        AblationRow::D,
    ];

    pub fn terms(self) -> LossTerms {
        LossTerms::ablation_row(self)
    }
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            AblationRow::A => "a",
            AblationRow::B => "b",
            AblationRow::C => "c",
            AblationRow::D => "d",
        };
        f.write_str(c)
    }
}

impl FromStr for AblationRow {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "a" | "A" => Ok(AblationRow::A),
            "b" | "B" => Ok(AblationRow::B),
            "c" | "C" => Ok(AblationRow::C),
            "d" | "D" => Ok(AblationRow::D),
            other => Err(Error::Config(format!(
                "unknown loss config {other:?}, expected a-d"
            ))),
        }
    }
}

/// Scalar values of one evaluation of the joint objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_cc: f64,
    pub l_ac: f64,
    pub l_aa: f64,
    pub l_ca: f64,
    pub total: f64,
    pub n_c: usize,
    pub n_a: usize,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_cc,l_ac,l_aa,l_ca,total,n_c,n_a";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{},{}",
            self.l_cc, self.l_ac, self.l_aa, self.l_ca, self.total, self.n_c, self.n_a
        )
    }
}

/// Loss value and its gradient with respect to the volume entries.
#[derive(Clone, Debug, PartialEq)]
pub struct CclOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Writes `log softmax(row / γ)` into `out` using max-subtraction.
fn log_softmax_into(row: &[f64], gamma: f64, out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max) / gamma;
        sum += o.exp();
    }
    let lse = sum.ln();
    out.iter_mut().for_each(|o| *o -= lse);
}

/// Row-wise temperature softmax, computed the same way the loss does.
/// Exposed for checking normalization of the probabilities.
pub fn softmax_rows(vol: &CostVolume, gamma: f64) -> Vec<f64> {
    let n = vol.cols();
    let mut out = vec![0.0; vol.values().len()];
    for (i, o) in out.chunks_exact_mut(n).enumerate() {
        log_softmax_into(vol.row(i), gamma, o);
        o.iter_mut().for_each(|v| *v = v.exp());
    }
    out
}

/// Masked contrastive term:
/// `−(1/N) Σ_i M(i) log softmax_γ(vol[i])[p(i)]` with `p(i) = i + labels(i)`.
///
/// An empty mask gives zero loss and zero gradient.
pub fn ccl_term(
    vol: &CostVolume,
    labels: &FlowField,
    mask: &ConfidenceMask,
    gamma: f64,
) -> Result<CclOutput> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {gamma}"
        )));
    }
    if labels.shape() != vol.shape_s() || labels.target() != vol.shape_t() {
        return Err(Error::shape(
            "ccl_term labels",
            format!("{} -> {}", vol.shape_s(), vol.shape_t()),
            format!("{} -> {}", labels.shape(), labels.target()),
        ));
    }
    if mask.shape() != vol.shape_s() {
        return Err(Error::shape("ccl_term mask", vol.shape_s(), mask.shape()));
    }
    if vol.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ccl_term volume"));
    }
    let n = vol.cols();
    let mut grad = vec![0.0; vol.values().len()];
    let count = mask.count();
    if count == 0 {
        return Ok(CclOutput { loss: 0.0, grad });
    }
    let scale = 1.0 / count as f64;
    let mut loss = 0.0;
    for i in (0..vol.rows()).filter(|&i| mask.get(i)) {
        let pos = match labels.lookup(i) {
            Lookup::Inside(p) => p,
            Lookup::OutOfGrid => {
                return Err(Error::shape(
                    "ccl_term label target",
                    "in-grid label for masked cell",
                    format!("cell {i} points outside"),
                ))
            }
        };
        let g = &mut grad[i * n..(i + 1) * n];
        log_softmax_into(vol.row(i), gamma, g);
        loss -= g[pos];
        let k = scale / gamma;
        g.iter_mut().for_each(|v| *v = v.exp() * k);
        g[pos] -= k;
    }
    Ok(CclOutput {
        loss: loss * scale,
        grad,
    })
}

/// Pseudo flows and masks of both volumes, detached from the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub flow_c: FlowField,
    pub mask_c: ConfidenceMask,
    pub flow_a: FlowField,
    pub mask_a: ConfidenceMask,
}

impl PseudoLabels {
    pub fn from_volumes(
        c_raw: &CostVolume,
        c_agg: &CostVolume,
        params: ConsistencyParams,
    ) -> Result<Self> {
        let (flow_c, _, mask_c) = mask_and_flows(c_raw, params)?;
        let (flow_a, _, mask_a) = mask_and_flows(c_agg, params)?;
        Ok(Self {
            flow_c,
            mask_c,
            flow_a,
            mask_a,
        })
    }
}

/// Objective value plus gradients with respect to both volumes.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLoss {
    pub report: LossReport,
    pub grad_raw: Vec<f64>,
    pub grad_agg: Vec<f64>,
}

/// Weighted objective for fixed pseudo labels; unselected terms are
/// reported as zero and contribute no gradient.
pub fn loss_with_labels(
    c_raw: &CostVolume,
    c_agg: &CostVolume,
    labels: &PseudoLabels,
    params: LossParams,
    terms: LossTerms,
) -> Result<JointLoss> {
    if terms.is_empty() {
        return Err(Error::Config("loss configuration selects no terms".into()));
    }
    if !c_raw.same_layout(c_agg) {
        return Err(Error::shape(
            "joint loss volumes",
            format!("{} x {}", c_raw.shape_s(), c_raw.shape_t()),
            format!("{} x {}", c_agg.shape_s(), c_agg.shape_t()),
        ));
    }
    let gamma = params.gamma;
    let size = c_raw.values().len();
    let mut grad_raw = vec![0.0; size];
    let mut grad_agg = vec![0.0; size];
    let term = |on: bool,
                vol: &CostVolume,
                flow: &FlowField,
                mask: &ConfidenceMask,
                weight: f64,
                acc: &mut Vec<f64>|
     -> Result<f64> {
        if !on {
            return Ok(0.0);
        }
        let out = ccl_term(vol, flow, mask, gamma)?;
        for (a, g) in acc.iter_mut().zip(&out.grad) {
            *a += weight * g;
        }
        Ok(out.loss)
    };
    let (lc, la) = (params.lambda_c, params.lambda_a);
    let l_cc = term(
        terms.cc,
        c_raw,
        &labels.flow_c,
        &labels.mask_c,
        lc,
        &mut grad_raw,
    )?;
    let l_ac = term(
        terms.ac,
        c_raw,
        &labels.flow_a,
        &labels.mask_a,
        lc,
        &mut grad_raw,
    )?;
    let l_aa = term(
        terms.aa,
        c_agg,
        &labels.flow_a,
        &labels.mask_a,
        la,
        &mut grad_agg,
    )?;
    let l_ca = term(
        terms.ca,
        c_agg,
        &labels.flow_c,
        &labels.mask_c,
        la,
        &mut grad_agg,
    )?;
    let total = lc * (l_cc + l_ac) + la * (l_aa + l_ca);
    if !total.is_finite() {
        return Err(Error::Diverged(format!("non-finite loss {total}")));
    }
    Ok(JointLoss {
        report: LossReport {
            l_cc,
            l_ac,
            l_aa,
            l_ca,
            total,
            n_c: labels.mask_c.count(),
            n_a: labels.mask_a.count(),
        },
        grad_raw,
        grad_agg,
    })
}

/// Full objective: all four terms with pseudo labels recomputed from the
/// current volumes.
pub fn joint_loss(
    c_raw: &CostVolume,
    c_agg: &CostVolume,
    params_cons: ConsistencyParams,
    params_loss: LossParams,
) -> Result<JointLoss> {
    ablation_loss(LossTerms::ALL, c_raw, c_agg, params_cons, params_loss)
}

/// [`joint_loss`] restricted to the selected terms.
pub fn ablation_loss(
    terms: LossTerms,
    c_raw: &CostVolume,
    c_agg: &CostVolume,
    params_cons: ConsistencyParams,
    params_loss: LossParams,
) -> Result<JointLoss> {
    if terms.is_empty() {
        return Err(Error::Config("loss configuration selects no terms".into()));
    }
    if !c_raw.same_layout(c_agg) {
        return Err(Error::shape(
            "joint loss volumes",
            format!("{} x {}", c_raw.shape_s(), c_raw.shape_t()),
            format!("{} x {}", c_agg.shape_s(), c_agg.shape_t()),
        ));
    }
    let labels = PseudoLabels::from_volumes(c_raw, c_agg, params_cons)?;
    loss_with_labels(c_raw, c_agg, &labels, params_loss, terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_volume::VolumeKind;
    use crate::geometry::{Displacement, GridShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(h: usize, w: usize) -> GridShape {
        GridShape::new(h, w).unwrap()
    }

    fn random_volume(rng: &mut ChaCha8Rng, s: GridShape, kind: VolumeKind) -> CostVolume {
        let v = (0..s.len() * s.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        CostVolume::new(s, s, v, kind).unwrap()
    }

    /// Straight-line evaluation of one term, independent of `ccl_term`.
    fn naive_term(vol: &CostVolume, flow: &FlowField, mask: &ConfidenceMask, gamma: f64) -> f64 {
        let s = vol.shape_s();
        let mut acc = 0.0;
        let mut n = 0;
        for i in 0..vol.rows() {
            if !mask.get(i) {
                continue;
            }
            n += 1;
            let (r, c) = s.flat_to_coord(i).unwrap();
            let d = flow.get(i);
            let p = s
                .coord_to_flat((r as i64 + d.dy) as usize, (c as i64 + d.dx) as usize)
                .unwrap();
            let mut denom = 0.0;
            for j in 0..vol.cols() {
                denom += (vol.get(i, j) / gamma).exp();
            }
            acc += ((vol.get(i, p) / gamma).exp() / denom).ln();
        }
        if n == 0 {
            0.0
        } else {
            -acc / n as f64
        }
    }

    #[test]
    fn two_cell_worked_value() {
        let s = shape(1, 2);
        let vol = CostVolume::new(s, s, vec![1.0, 0.0, 0.0, 1.0], VolumeKind::Raw).unwrap();
        let out = ccl_term(&vol, &FlowField::zeros(s), &ConfidenceMask::full(s), 1.0).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((out.loss - expect).abs() < 1e-14);
        assert!((out.loss - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn empty_mask_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let s = shape(3, 3);
        let vol = random_volume(&mut rng, s, VolumeKind::Raw);
        let out = ccl_term(&vol, &FlowField::zeros(s), &ConfidenceMask::empty(s), 0.1).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn matches_naive_log_sum_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let s = shape(3, 3);
        let vol = random_volume(&mut rng, s, VolumeKind::Raw);
        let (flow, _, _) = mask_and_flows(&vol, ConsistencyParams::default()).unwrap();
        let bits = (0..9).map(|_| rng.random_bool(0.6)).collect();
        let mask = ConfidenceMask::from_bits(s, bits).unwrap();
        for gamma in [0.07, 0.1, 1.0] {
            let out = ccl_term(&vol, &flow, &mask, gamma).unwrap();
            assert!((out.loss - naive_term(&vol, &flow, &mask, gamma)).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = shape(2, 2);
        let vol = CostVolume::new(s, s, vec![0.0; 16], VolumeKind::Raw).unwrap();
        let m = ConfidenceMask::full(s);
        assert!(ccl_term(&vol, &FlowField::zeros(shape(1, 4)), &m, 0.1).is_err());
        assert!(ccl_term(
            &vol,
            &FlowField::zeros(s),
            &ConfidenceMask::full(shape(4, 1)),
            0.1
        )
        .is_err());
        assert!(ccl_term(&vol, &FlowField::zeros(s), &m, 0.0).is_err());
        let out_of_grid = FlowField::constant(s, Displacement::new(0, 5));
        assert!(ccl_term(&vol, &out_of_grid, &m, 0.1).is_err());
    }

    #[test]
    fn large_entries_do_not_overflow() {
        let s = shape(1, 3);
        let gamma = 0.1;
        let big = 1e6 / gamma;
        let vol = CostVolume::new(
            s,
            s,
            vec![big, -big, 0.0, -big, big, big, 0.0, 0.0, -big],
            VolumeKind::Raw,
        )
        .unwrap();
        let out = ccl_term(&vol, &FlowField::zeros(s), &ConfidenceMask::full(s), gamma).unwrap();
        assert!(out.loss.is_finite());
        assert!(out.grad.iter().all(|g| g.is_finite()));
        let p = softmax_rows(&vol, gamma);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn symmetric_degenerate_case() {
        let s = shape(2, 2);
        let mut v = vec![0.0; 16];
        for i in 0..4 {
            v[i * 4 + i] = 1.0;
        }
        let c = CostVolume::new(s, s, v.clone(), VolumeKind::Raw).unwrap();
        let a = CostVolume::new(s, s, v, VolumeKind::Aggregated).unwrap();
        let p = LossParams::default();
        let out = joint_loss(&c, &a, ConsistencyParams::default(), p).unwrap();
        let r = out.report;
        assert_eq!(r.l_cc, r.l_ac);
        assert_eq!(r.l_cc, r.l_aa);
        assert_eq!(r.l_cc, r.l_ca);
        assert!((r.total - (p.lambda_c + p.lambda_a) * 2.0 * r.l_cc).abs() < 1e-15);
        assert_eq!((r.n_c, r.n_a), (4, 4));
    }

    #[test]
    fn zero_aggregation_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let s = shape(3, 3);
        let c = random_volume(&mut rng, s, VolumeKind::Raw);
        let a = random_volume(&mut rng, s, VolumeKind::Aggregated);
        let p = LossParams::new(0.1, 0.5, 0.0).unwrap();
        let out = joint_loss(&c, &a, ConsistencyParams::default(), p).unwrap();
        assert!(out.grad_agg.iter().all(|&g| g == 0.0));
        assert_eq!(out.report.total, 0.5 * (out.report.l_cc + out.report.l_ac));
    }

    #[test]
    fn ablation_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let s = shape(3, 3);
        let c = random_volume(&mut rng, s, VolumeKind::Raw);
        let a = random_volume(&mut rng, s, VolumeKind::Aggregated);
        let (pc, pl) = (ConsistencyParams::default(), LossParams::default());

        let full = joint_loss(&c, &a, pc, pl).unwrap();
        assert_eq!(
            ablation_loss(AblationRow::D.terms(), &c, &a, pc, pl).unwrap(),
            full
        );

        let row_a = ablation_loss(AblationRow::A.terms(), &c, &a, pc, pl).unwrap();
        assert!(row_a.grad_raw.iter().all(|&g| g == 0.0));
        assert_eq!(row_a.report.l_cc, 0.0);

        let row_c = ablation_loss(AblationRow::C.terms(), &c, &a, pc, pl).unwrap();
        let (fc, _, mc) = mask_and_flows(&c, pc).unwrap();
        let (fa, _, ma) = mask_and_flows(&a, pc).unwrap();
        let expect = 0.5 * naive_term(&c, &fc, &mc, 0.1) + 0.5 * naive_term(&a, &fa, &ma, 0.1);
        assert!((row_c.report.total - expect).abs() < 1e-9);

        let none = LossTerms {
            cc: false,
            ac: false,
            aa: false,
            ca: false,
        };
        assert!(matches!(
            ablation_loss(none, &c, &a, pc, pl),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ablation_row_parsing() {
        assert_eq!("c".parse::<AblationRow>().unwrap(), AblationRow::C);
        assert_eq!(AblationRow::B.to_string(), "b");
        assert!("e".parse::<AblationRow>().is_err());
    }

    #[test]
    fn perfect_prediction_limit() {
        let s = shape(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let base = random_volume(&mut rng, s, VolumeKind::Raw);
        let flow = FlowField::zeros(s);
        let mask = ConfidenceMask::full(s);
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let mut v = base.values().to_vec();
            for i in 0..9 {
                v[i * 9 + i] += step as f64;
            }
            let vol = CostVolume::new(s, s, v, VolumeKind::Raw).unwrap();
            let l = ccl_term(&vol, &flow, &mask, 0.1).unwrap().loss;
            assert!(l < prev || (l == 0.0 && prev == 0.0));
            prev = l;
        }
        assert!(prev < 1e-30);
    }

    #[test]
    fn report_csv_row() {
        let r = LossReport {
            l_cc: 1.5,
            l_ac: 0.0,
            l_aa: 0.25,
            l_ca: 2.0,
            total: 1.875,
            n_c: 7,
            n_a: 3,
        };
        assert_eq!(r.csv_row(4), "4,1.5,0,0.25,2,1.875,7,3");
        assert_eq!(LossReport::CSV_HEADER.split(',').count(), 8);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_and_grad_row_identities(seed in 0u64..10_000, gamma in 0.05f64..2.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = shape(3, 3);
                let vol = random_volume(&mut rng, s, VolumeKind::Raw);
                let p = softmax_rows(&vol, gamma);
                for row in p.chunks(9) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                }
                let (flow, _, mask) = mask_and_flows(&vol, ConsistencyParams::new(0.5, 2.0).unwrap()).unwrap();
                let out = ccl_term(&vol, &flow, &mask, gamma).unwrap();
                prop_assert!(out.loss >= 0.0);
                for (i, row) in out.grad.chunks(9).enumerate() {
                    let sum: f64 = row.iter().sum();
                    if mask.get(i) {
                        prop_assert!(sum.abs() <= 1e-12);
                    } else {
                        prop_assert!(row.iter().all(|&g| g == 0.0));
                    }
                }
            }
        }
    }
}
