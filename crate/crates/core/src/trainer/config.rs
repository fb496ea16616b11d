//! Training configuration and its flat `key=value` file format.

use std::fmt::Write as _;
use std::path::Path;

use crate::consistency::ConsistencyParams;
use crate::error::{Error, Result};
use crate::geometry::GridShape;
use crate::loss::{AblationRow, LossParams};
use crate::trainer::adamw::AdamW;
use crate::trainer::synthetic::SyntheticParams;

/// Everything that determines a training run. Two runs with equal configs
/// produce identical logs and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    pub channels: usize,
    pub lr_feature: f64,
    pub lr_agg: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub lambda_c: f64,
    pub lambda_a: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub loss_config: AblationRow,
    pub kernel_size: usize,
    pub kernel_noise: f64,
    /// Projector weights start uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    /// Held-out evaluation period in steps; 0 evaluates only at the start
    /// and the end.
    pub eval_every: usize,
    pub eval_pairs: usize,
    pub eval_alpha: f64,
    pub synthetic: SyntheticParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            steps: 2000,
            h: 12,
            w: 12,
            dim: 16,
            channels: 8,
            lr_feature: 3e-5,
            lr_agg: 3e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            gamma: 0.1,
            lambda_c: 0.5,
            lambda_a: 0.5,
            alpha1: 0.1,
            alpha2: 0.05,
            loss_config: AblationRow::D,
            kernel_size: 3,
            kernel_noise: 0.01,
            init_scale: 0.05,
            eval_every: 100,
            eval_pairs: 32,
            eval_alpha: 0.1,
            synthetic: SyntheticParams::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))
}

impl TrainConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (key, value) = (key.trim(), value.trim());
        let syn = &mut self.synthetic;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "h" => self.h = parse(key, value)?,
            "w" => self.w = parse(key, value)?,
            "dim" | "d" => self.dim = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "lr_feature" => self.lr_feature = parse(key, value)?,
            "lr_agg" => self.lr_agg = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "lambda_c" => self.lambda_c = parse(key, value)?,
            "lambda_a" => self.lambda_a = parse(key, value)?,
            "alpha1" => self.alpha1 = parse(key, value)?,
            "alpha2" => self.alpha2 = parse(key, value)?,
            "loss_config" => self.loss_config = value.parse()?,
            "kernel_size" => self.kernel_size = parse(key, value)?,
            "kernel_noise" => self.kernel_noise = parse(key, value)?,
            "init_scale" => self.init_scale = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_pairs" => self.eval_pairs = parse(key, value)?,
            "eval_alpha" => self.eval_alpha = parse(key, value)?,
            "noise" => syn.noise = parse(key, value)?,
            "max_shift" => syn.max_shift = parse(key, value)?,
            "affine" => syn.affine = parse(key, value)?,
            "jitter" => syn.jitter = parse(key, value)?,
            "smoothness" => syn.smoothness = parse(key, value)?,
            "appearance_channels" => syn.appearance_channels = parse(key, value)?,
            "brightness" => syn.brightness = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` string (as given on the command line).
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k, v)
    }

    /// Parses the flat config format on top of the defaults: one
    /// `key=value` per line, `#` starts a comment, blank lines ignored.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.apply_override(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Serializes every key in the format [`TrainConfig::parse_str`] reads.
    pub fn to_config_string(&self) -> String {
        let s = &self.synthetic;
        let mut out = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| writeln!(out, "{k}={v}").unwrap();
        kv("seed", &self.seed);
        kv("steps", &self.steps);
        kv("h", &self.h);
        kv("w", &self.w);
        kv("dim", &self.dim);
        kv("channels", &self.channels);
        kv("lr_feature", &self.lr_feature);
        kv("lr_agg", &self.lr_agg);
        kv("beta1", &self.beta1);
        kv("beta2", &self.beta2);
        kv("eps", &self.eps);
        kv("weight_decay", &self.weight_decay);
        kv("gamma", &self.gamma);
        kv("lambda_c", &self.lambda_c);
        kv("lambda_a", &self.lambda_a);
        kv("alpha1", &self.alpha1);
        kv("alpha2", &self.alpha2);
        kv("loss_config", &self.loss_config);
        kv("kernel_size", &self.kernel_size);
        kv("kernel_noise", &self.kernel_noise);
        kv("init_scale", &self.init_scale);
        kv("eval_every", &self.eval_every);
        kv("eval_pairs", &self.eval_pairs);
        kv("eval_alpha", &self.eval_alpha);
        kv("noise", &s.noise);
        kv("max_shift", &s.max_shift);
        kv("affine", &s.affine);
        kv("jitter", &s.jitter);
        kv("smoothness", &s.smoothness);
        kv("appearance_channels", &s.appearance_channels);
        kv("brightness", &s.brightness);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.lr_feature.is_finite() && self.lr_feature >= 0.0)
            || !(self.lr_agg.is_finite() && self.lr_agg >= 0.0)
        {
            return bad(format!(
                "learning rates must be finite and nonnegative, got {} / {}",
                self.lr_feature, self.lr_agg
            ));
        }
        if self.dim == 0 || self.channels == 0 {
            return bad("dim and channels must be positive".into());
        }
        if self.eval_pairs == 0 {
            return bad("eval_pairs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if self.synthetic.appearance_channels > self.channels {
            return bad("appearance_channels exceeds channels".into());
        }
        self.grid()?;
        self.loss_params()?;
        self.consistency_params()?;
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridShape> {
        GridShape::new(self.h, self.w)
    }

    pub fn loss_params(&self) -> Result<LossParams> {
        LossParams::new(self.gamma, self.lambda_c, self.lambda_a)
    }

    pub fn consistency_params(&self) -> Result<ConsistencyParams> {
        ConsistencyParams::new(self.alpha1, self.alpha2)
    }

    fn optimizer(&self, lr: f64) -> AdamW {
        AdamW {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn feature_optimizer(&self) -> AdamW {
        self.optimizer(self.lr_feature)
    }

    pub fn aggregation_optimizer(&self) -> AdamW {
        self.optimizer(self.lr_agg)
    }
}
