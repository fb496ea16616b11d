//! Command-line front end: `jointcorr <verb> [flags]`.
//!
//! Exit codes: 0 on success, 1 on usage or input errors, 2 when training
//! diverges or a gradient check fails.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use jointcorr::consistency::mask_and_flows;
use jointcorr::evaluation::{endpoint_error, pck, warp, EVAL_CSV_HEADER};
use jointcorr::gradcheck::run_suite;
use jointcorr::trainer::{
    ablate, evaluate, generate_pair, heldout_set, train, Model, TrainConfig, HELDOUT_FILE,
    KERNEL_FILE, METRICS_FILE, PROJECTOR_FILE,
};
use jointcorr::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

/// Resolved configuration written next to the checkpoints by `train`.
pub const CONFIG_FILE: &str = "config.txt";
pub const EVAL_FILE: &str = "eval.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Thresholds reported by `eval`.
pub const EVAL_ALPHAS: [f64; 3] = [0.05, 0.1, 0.15];

#[derive(Debug, Parser)]
#[command(
    name = "jointcorr",
    version,
    about = "Joint feature and cost-aggregation learning for dense correspondence"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// Flat key=value config file; defaults are used for missing keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run directory for checkpoints and dumps.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed override, applied after the config file and every --set.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Config override, repeatable, applied in order after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Train both parts and write metrics and checkpoints to --out.
    Train,
    /// Score the checkpoints in --out on the held-out set.
    Eval,
    /// Dump volumes, flows and masks for one seeded pair into --out.
    Inspect,
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Train loss rows a to d from one seed and print their final PCK.
    Ablate,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Diverged(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
/// Normal output goes to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let shown = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let text = e.render().to_string();
            return if shown {
                let _ = out.write_all(text.as_bytes());
                EXIT_OK
            } else {
                let _ = err.write_all(text.as_bytes());
                EXIT_USAGE
            };
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    match cli.verb {
        Verb::Train => cmd_train(cli, out),
        Verb::Eval => cmd_eval(cli, out),
        Verb::Inspect => cmd_inspect(cli, out),
        Verb::Gradcheck => cmd_gradcheck(cli, out),
        Verb::Ablate => cmd_ablate(cli, out),
    }
}

/// Config file (or `fallback`, or defaults), then overrides, then --seed.
fn resolve_config(cli: &Cli, fallback: Option<&Path>) -> Result<TrainConfig, Failure> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(p), _) => {
            if !p.is_file() {
                return Err(usage(format!("config file {} not found", p.display())));
            }
            TrainConfig::from_file(p)?
        }
        (None, Some(p)) if p.is_file() => TrainConfig::from_file(p)?,
        _ => TrainConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<&Path, Failure> {
    cli.out
        .as_deref()
        .ok_or_else(|| usage("this command needs --out DIR"))
}

/// Writes every file or none: contents go to hidden temporaries first and
/// are renamed into place only once all writes succeeded.
fn commit_files(dir: &Path, files: &[(&str, Vec<u8>)]) -> CmdResult {
    let created = !dir.exists();
    fs::create_dir_all(dir)?;
    let tmp = |name: &str| dir.join(format!(".{name}.partial"));
    let cleanup = |upto: usize| {
        for (name, _) in &files[..upto] {
            let _ = fs::remove_file(tmp(name));
        }
        if created {
            let _ = fs::remove_dir(dir);
        }
    };
    for (k, (name, bytes)) in files.iter().enumerate() {
        if let Err(e) = fs::write(tmp(name), bytes) {
            cleanup(k + 1);
            return Err(e.into());
        }
    }
    for (name, _) in files {
        fs::rename(tmp(name), dir.join(name))?;
    }
    Ok(())
}

fn model_files(model: &Model) -> Result<Vec<(&'static str, Vec<u8>)>, Failure> {
    let mut projector = Vec::new();
    model.projector.write_to(&mut projector)?;
    let mut kernel = Vec::new();
    model.kernel.write_to(&mut kernel)?;
    Ok(vec![(PROJECTOR_FILE, projector), (KERNEL_FILE, kernel)])
}

fn cmd_train(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    let cfg = resolve_config(cli, None)?;
    let dir = out_dir(cli)?;
    let result = train(&cfg)?;
    let mut files = vec![
        (METRICS_FILE, result.metrics_csv().into_bytes()),
        (HELDOUT_FILE, result.heldout_csv().into_bytes()),
        (CONFIG_FILE, cfg.to_config_string().into_bytes()),
    ];
    files.extend(model_files(&result.model)?);
    commit_files(dir, &files)?;
    let (first, last) = (result.initial(), result.last());
    writeln!(
        out,
        "trained {} steps: PCK@{} raw {:.4} -> {:.4}, aggregated {:.4} -> {:.4}",
        cfg.steps,
        cfg.eval_alpha,
        first.raw.pck.pck,
        last.raw.pck.pck,
        first.agg.pck.pck,
        last.agg.pck.pck
    )?;
    Ok(())
}

fn cmd_eval(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    let dir = out_dir(cli)?;
    let cfg = resolve_config(cli, Some(&dir.join(CONFIG_FILE)))?;
    let model = Model::load(dir)?;
    let pairs = heldout_set(&cfg)?;
    let mut table = format!("{EVAL_CSV_HEADER}\n");
    for alpha in EVAL_ALPHAS {
        let (_, agg) = evaluate(&model, &pairs, alpha)?;
        table.push_str(&agg.pck.csv_row(agg.mean_epe));
        table.push('\n');
    }
    commit_files(dir, &[(EVAL_FILE, table.clone().into_bytes())])?;
    out.write_all(table.as_bytes())?;
    Ok(())
}

fn cmd_inspect(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    let dir = out_dir(cli)?;
    let cfg = resolve_config(cli, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let has_checkpoints = dir.join(PROJECTOR_FILE).is_file() && dir.join(KERNEL_FILE).is_file();
    let model = if has_checkpoints {
        Model::load(dir)?
    } else {
        Model::init(&cfg, &mut rng)?
    };
    let pair = generate_pair(&mut rng, cfg.grid()?, cfg.channels, &cfg.synthetic)?;
    let fwd = model.forward(&pair.source, &pair.target)?;
    let params = cfg.consistency_params()?;
    let (flow_c, _, mask_c) = mask_and_flows(&fwd.c_raw, params)?;
    let (flow_a, _, mask_a) = mask_and_flows(&fwd.c_agg, params)?;
    let warped = warp(&pair.target, &flow_a)?;

    let mut files: Vec<(&str, Vec<u8>)> = Vec::new();
    let mut put =
        |name: &'static str, f: &dyn Fn(&mut Vec<u8>) -> jointcorr::Result<()>| -> CmdResult {
            let mut buf = Vec::new();
            f(&mut buf)?;
            files.push((name, buf));
            Ok(())
        };
    put("source.csv", &|b| pair.source.write_csv(b))?;
    put("target.csv", &|b| pair.target.write_csv(b))?;
    put("cost_raw.csv", &|b| fwd.c_raw.write_csv(b))?;
    put("cost_agg.csv", &|b| fwd.c_agg.write_csv(b))?;
    put("flow_raw.csv", &|b| flow_c.write_csv(b))?;
    put("flow_agg.csv", &|b| flow_a.write_csv(b))?;
    put("flow_gt.csv", &|b| pair.gt_flow.write_csv(b))?;
    put("mask_raw.pgm", &|b| mask_c.write_pgm(b))?;
    put("mask_agg.pgm", &|b| mask_a.write_pgm(b))?;
    put("valid.pgm", &|b| pair.valid.write_pgm(b))?;
    put("warped.csv", &|b| warped.write_csv(b))?;
    commit_files(dir, &files)?;

    writeln!(
        out,
        "{} pair, seed {}, {} model",
        pair.source.shape(),
        cfg.seed,
        if has_checkpoints {
            "trained"
        } else {
            "initial"
        }
    )?;
    writeln!(
        out,
        "confident cells: raw {} aggregated {}",
        mask_c.count(),
        mask_a.count()
    )?;
    if pair.valid.count() > 0 {
        for (name, flow) in [("raw", &flow_c), ("aggregated", &flow_a)] {
            let p = pck(flow, &pair.gt_flow, &pair.valid, cfg.eval_alpha)?;
            let e = endpoint_error(flow, &pair.gt_flow, &pair.valid)?;
            writeln!(
                out,
                "{name}: PCK@{} {:.4} mean EPE {:.4}",
                cfg.eval_alpha, p.pck, e
            )?;
        }
    }
    Ok(())
}

fn cmd_gradcheck(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    let seed = cli.seed.unwrap_or(0);
    let checks = run_suite(seed)?;
    writeln!(out, "check,max_rel_err,tolerance,coords,status")?;
    for c in &checks {
        writeln!(
            out,
            "{},{:.3e},{:e},{},{}",
            c.name,
            c.max_rel_err,
            c.tolerance,
            c.checked,
            if c.passed() { "ok" } else { "FAIL" }
        )?;
    }
    match checks.iter().filter(|c| !c.passed()).count() {
        0 => Ok(()),
        n => Err(Failure {
            code: EXIT_NUMERIC,
            message: format!("{n} gradient check(s) above tolerance"),
        }),
    }
}

fn cmd_ablate(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    let cfg = resolve_config(cli, None)?;
    let outcomes = ablate(&cfg)?;
    let mut table = String::from("row,seed,pck_initial,pck_final\n");
    for o in &outcomes {
        table.push_str(&format!(
            "{},{},{},{}\n",
            o.row, o.seed, o.initial.pck.pck, o.last.pck.pck
        ));
    }
    if let Some(dir) = &cli.out {
        commit_files(dir, &[(ABLATION_FILE, table.clone().into_bytes())])?;
    }
    out.write_all(table.as_bytes())?;
    Ok(())
}
