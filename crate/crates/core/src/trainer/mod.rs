//! End-to-end joint training: synthetic pairs, forward pipeline, joint
//! loss, hand-written backward pass, and AdamW with separate learning rates
//! for the feature projector and the aggregation kernel.

pub mod adamw;
pub mod config;
pub mod synthetic;

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{aggregate, aggregate_backward_with_output, Conv4dKernel};
use crate::consistency::{wta_flow, FlowField};
use crate::cost_volume::{correlate, correlate_backward, CostVolume};
use crate::error::{Error, Result};
use crate::evaluation::{endpoint_error, pck, PckResult};
use crate::feature::{
    extract_features, extract_features_backward, l2_normalize, l2_normalize_backward, FeatureMap,
    ImageGrid, LinearProjector,
};
use crate::loss::{loss_with_labels, AblationRow, JointLoss, LossReport, LossTerms, PseudoLabels};

pub use adamw::{AdamState, AdamW};
pub use config::TrainConfig;
pub use synthetic::{generate_pair, SyntheticPair, SyntheticParams};

/// The two trainable parts of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub projector: LinearProjector,
    pub kernel: Conv4dKernel,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub fs_raw: FeatureMap,
    pub ft_raw: FeatureMap,
    pub ds: FeatureMap,
    pub dt: FeatureMap,
    pub c_raw: CostVolume,
    pub c_agg: CostVolume,
}

impl Model {
    /// Random projector and near-identity kernel, drawn from `rng`.
    pub fn init(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let projector = LinearProjector::random(cfg.channels, cfg.dim, cfg.init_scale, rng);
        let kernel = Conv4dKernel::near_identity(cfg.kernel_size, cfg.kernel_noise, rng)?;
        Ok(Self { projector, kernel })
    }

    pub fn forward(&self, source: &ImageGrid, target: &ImageGrid) -> Result<Forward> {
        let fs_raw = extract_features(source, &self.projector)?;
        let ft_raw = extract_features(target, &self.projector)?;
        let ds = l2_normalize(&fs_raw);
        let dt = l2_normalize(&ft_raw);
        let c_raw = correlate(&ds, &dt)?;
        let c_agg = aggregate(&c_raw, &self.kernel);
        Ok(Forward {
            fs_raw,
            ft_raw,
            ds,
            dt,
            c_raw,
            c_agg,
        })
    }

    /// Accumulates parameter gradients given the loss gradients with respect
    /// to both cost volumes.
    pub fn backward(
        &mut self,
        fwd: &Forward,
        source: &ImageGrid,
        target: &ImageGrid,
        grad_raw: &[f64],
        grad_agg: &[f64],
    ) -> Result<()> {
        let mut grad_c =
            aggregate_backward_with_output(&fwd.c_raw, &mut self.kernel, &fwd.c_agg, grad_agg)?;
        for (g, r) in grad_c.iter_mut().zip(grad_raw) {
            *g += r;
        }
        let (g_ds, g_dt) = correlate_backward(&fwd.ds, &fwd.dt, &grad_c)?;
        let g_fs = l2_normalize_backward(&fwd.fs_raw, &g_ds)?;
        let g_ft = l2_normalize_backward(&fwd.ft_raw, &g_dt)?;
        extract_features_backward(source, &mut self.projector, &g_fs)?;
        extract_features_backward(target, &mut self.projector, &g_ft)?;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.projector.zero_grad();
        self.kernel.zero_grad();
    }

    /// Winner-take-all flows from the raw and the aggregated volume.
    pub fn predict(
        &self,
        source: &ImageGrid,
        target: &ImageGrid,
    ) -> Result<(FlowField, FlowField)> {
        let fwd = self.forward(source, target)?;
        Ok((wta_flow(&fwd.c_raw), wta_flow(&fwd.c_agg)))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.projector
            .write_to(BufWriter::new(fs::File::create(dir.join(PROJECTOR_FILE))?))?;
        self.kernel
            .write_to(BufWriter::new(fs::File::create(dir.join(KERNEL_FILE))?))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let projector = LinearProjector::read_from(fs::File::open(dir.join(PROJECTOR_FILE))?)?;
        let kernel = Conv4dKernel::read_from(fs::File::open(dir.join(KERNEL_FILE))?)?;
        Ok(Self { projector, kernel })
    }
}

pub const PROJECTOR_FILE: &str = "projector.bin";
pub const KERNEL_FILE: &str = "kernel.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const HELDOUT_FILE: &str = "heldout.csv";

/// Loss and pseudo labels of a single step.
pub fn forward_backward(
    model: &mut Model,
    pair: &SyntheticPair,
    cfg: &TrainConfig,
    terms: LossTerms,
) -> Result<JointLoss> {
    let fwd = model.forward(&pair.source, &pair.target)?;
    let labels = PseudoLabels::from_volumes(&fwd.c_raw, &fwd.c_agg, cfg.consistency_params()?)?;
    let loss = loss_with_labels(&fwd.c_raw, &fwd.c_agg, &labels, cfg.loss_params()?, terms)?;
    model.backward(
        &fwd,
        &pair.source,
        &pair.target,
        &loss.grad_raw,
        &loss.grad_agg,
    )?;
    Ok(loss)
}

/// Fixed evaluation pairs drawn from `seed + 1`.
pub fn heldout_set(cfg: &TrainConfig) -> Result<Vec<SyntheticPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let grid = cfg.grid()?;
    (0..cfg.eval_pairs)
        .map(|_| generate_pair(&mut rng, grid, cfg.channels, &cfg.synthetic))
        .collect()
}

/// PCK and endpoint error pooled over every valid cell of a pair set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowScore {
    pub pck: PckResult,
    pub mean_epe: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeldoutRecord {
    pub step: usize,
    /// WTA on the raw cost volume.
    pub raw: FlowScore,
    /// WTA on the aggregated cost volume (the model's prediction).
    pub agg: FlowScore,
}

impl HeldoutRecord {
    pub const CSV_HEADER: &'static str = "step,pck_raw,pck_agg,epe_raw,epe_agg";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.raw.pck.pck, self.agg.pck.pck, self.raw.mean_epe, self.agg.mean_epe
        )
    }
}

fn pool(results: &[(PckResult, f64)], alpha: f64) -> FlowScore {
    let correct = results.iter().map(|(p, _)| p.correct).sum::<usize>();
    let total = results.iter().map(|(p, _)| p.total).sum::<usize>();
    let epe = results.iter().map(|(p, e)| e * p.total as f64).sum::<f64>() / total as f64;
    FlowScore {
        pck: PckResult {
            alpha,
            correct,
            total,
            pck: correct as f64 / total as f64,
        },
        mean_epe: epe,
    }
}

/// Scores the model on `pairs` at threshold `alpha`, pooling all cells.
pub fn evaluate(
    model: &Model,
    pairs: &[SyntheticPair],
    alpha: f64,
) -> Result<(FlowScore, FlowScore)> {
    let mut raw = Vec::with_capacity(pairs.len());
    let mut agg = Vec::with_capacity(pairs.len());
    for p in pairs.iter().filter(|p| p.valid.count() > 0) {
        let (f_raw, f_agg) = model.predict(&p.source, &p.target)?;
        raw.push((
            pck(&f_raw, &p.gt_flow, &p.valid, alpha)?,
            endpoint_error(&f_raw, &p.gt_flow, &p.valid)?,
        ));
        agg.push((
            pck(&f_agg, &p.gt_flow, &p.valid, alpha)?,
            endpoint_error(&f_agg, &p.gt_flow, &p.valid)?,
        ));
    }
    if raw.is_empty() {
        return Err(Error::NoEvaluableCells);
    }
    Ok((pool(&raw, alpha), pool(&agg, alpha)))
}

/// Trained parameters plus everything logged along the way.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model,
    /// One report per step, computed before that step's update.
    pub log: Vec<LossReport>,
    pub heldout: Vec<HeldoutRecord>,
}

impl TrainOutput {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(LossReport::CSV_HEADER);
        s.push('\n');
        for (step, r) in self.log.iter().enumerate() {
            writeln!(s, "{}", r.csv_row(step)).unwrap();
        }
        s
    }

    pub fn heldout_csv(&self) -> String {
        let mut s = String::from(HeldoutRecord::CSV_HEADER);
        s.push('\n');
        for r in &self.heldout {
            writeln!(s, "{}", r.csv_row()).unwrap();
        }
        s
    }

    pub fn initial(&self) -> &HeldoutRecord {
        &self.heldout[0]
    }

    pub fn last(&self) -> &HeldoutRecord {
        self.heldout.last().expect("at least one evaluation")
    }

    /// Writes metrics, held-out scores and both checkpoints into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(METRICS_FILE), self.metrics_csv())?;
        fs::write(dir.join(HELDOUT_FILE), self.heldout_csv())?;
        self.model.save(dir)
    }

    /// Trailing moving average of the aggregated-mask count, ending at
    /// 1-based step `end`.
    pub fn n_a_moving_average(&self, end: usize, window: usize) -> f64 {
        let end = end.min(self.log.len());
        let start = end.saturating_sub(window);
        let slice = &self.log[start..end];
        slice.iter().map(|r| r.n_a as f64).sum::<f64>() / slice.len().max(1) as f64
    }
}

/// Runs the full training loop described by `cfg`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let terms = cfg.loss_config.terms();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(cfg, &mut rng)?;
    let heldout = heldout_set(cfg)?;

    let opt_f = cfg.feature_optimizer();
    let opt_a = cfg.aggregation_optimizer();
    let mut state_w = AdamState::new(model.projector.weight.len());
    let mut state_b = AdamState::new(model.projector.bias.len());
    let mut state_k = AdamState::new(model.kernel.weights.len());
    let mut state_kb = AdamState::new(1);

    let mut log = Vec::with_capacity(cfg.steps);
    let mut records = Vec::new();
    let mut record = |step: usize, model: &Model| -> Result<()> {
        let (raw, agg) = evaluate(model, &heldout, cfg.eval_alpha)?;
        records.push(HeldoutRecord { step, raw, agg });
        Ok(())
    };
    record(0, &model)?;

    for step in 0..cfg.steps {
        let pair = generate_pair(&mut rng, grid, cfg.channels, &cfg.synthetic)?;
        let diverged = |e: Error| match e {
            Error::Diverged(m) => Error::Diverged(format!("step {step}: {m}")),
            other => other,
        };
        model.zero_grad();
        let loss = forward_backward(&mut model, &pair, cfg, terms).map_err(diverged)?;
        log.push(loss.report);

        let p = &mut model.projector;
        opt_f
            .step(&mut p.weight, &p.weight_grad, &mut state_w)
            .map_err(diverged)?;
        opt_f
            .step(&mut p.bias, &p.bias_grad, &mut state_b)
            .map_err(diverged)?;
        let k = &mut model.kernel;
        opt_a
            .step(&mut k.weights, &k.weights_grad, &mut state_k)
            .map_err(diverged)?;
        let mut bias = [k.bias];
        opt_a
            .step(&mut bias, &[k.bias_grad], &mut state_kb)
            .map_err(diverged)?;
        k.bias = bias[0];

        let done = step + 1;
        if done == cfg.steps || (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            record(done, &model)?;
        }
    }
    model.zero_grad();
    Ok(TrainOutput {
        model,
        log,
        heldout: records,
    })
}

/// Final held-out PCK of one ablation row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationOutcome {
    pub row: AblationRow,
    pub seed: u64,
    pub initial: FlowScore,
    pub last: FlowScore,
}

/// Trains rows (a)–(d) from the same seed, initialization and pair stream.
pub fn ablate(base: &TrainConfig) -> Result<Vec<AblationOutcome>> {
    AblationRow::ALL
        .iter()
        .map(|&row| {
            let cfg = TrainConfig {
                loss_config: row,
                eval_every: 0,
                ..base.clone()
            };
            let out = train(&cfg)?;
            Ok(AblationOutcome {
                row,
                seed: cfg.seed,
                initial: out.initial().agg,
                last: out.last().agg,
            })
        })
        .collect()
}
