//! `evmr`: data generation, training and the diagnostic experiments.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad flags, configs,
//! files or shapes), 2 on numerical failures (poles, non-finite losses,
//! failed gradient checks).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use evmr::checkpoint::Checkpoint;
use evmr::config::RunConfig;
use evmr::data::{read_dataset, split_iid_ood, write_dataset, DatasetSidecar, Sample, Splits};
use evmr::experiments::{
    calibrate, calibration_csv, check_split, evaluate, gradient_field_csv, noise_sweep, run_grad_check, GradCheckSetup,
};
use evmr::regularizers::RegularizerMode;
use evmr::train::{load_model, train, write_epoch_log};
use evmr::{Error, Result};

const CONFIG_FILE: &str = "config.json";
const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Parser, Debug)]
#[command(name = "evmr", version, about = "Evidential moment retrieval on synthetic data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat dotted-key JSON run config; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the run seed and the data seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitName {
    Train,
    TestIid,
    TestOod,
}

impl SplitName {
    fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::TestIid => "test_iid",
            SplitName::TestOod => "test_ood",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FieldMode {
    Vanilla,
    Geom,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long, value_enum, default_value = "test-iid")]
    split: SplitName,
    /// Directory written by `gen-data`; splits are regenerated from the
    /// config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the train, test_iid and test_ood splits.
    GenData,
    /// Two-stage training; writes the checkpoint, epoch log and test metrics.
    Train {
        /// Continue from a checkpoint written under the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Directory written by `gen-data`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Retrieval metrics of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Sampled minus-gradient of a regularizer over (error, evidence).
    GradField {
        #[arg(long, value_enum)]
        mode: FieldMode,
        #[arg(long, default_value_t = 11)]
        resolution: usize,
    },
    /// Epistemic uncertainty under visual and text noise ladders.
    NoiseSweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Error against uncertainty: rank correlations and scatter.
    Calibrate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long, default_value_t = 5)]
        bins: usize,
    },
    /// Finite-difference check of the assembled model under every mode.
    GradCheck {
        /// Perturb one analytic gradient; the check must then fail.
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::GenData => gen_data(common),
        Command::Train { resume, data } => cmd_train(common, resume.as_deref(), data.as_deref()),
        Command::Eval { checkpoint, split } => cmd_eval(common, checkpoint, split),
        Command::GradField { mode, resolution } => cmd_grad_field(common, *mode, *resolution),
        Command::NoiseSweep { checkpoint, split } => cmd_noise_sweep(common, checkpoint, split),
        Command::Calibrate { checkpoint, split, bins } => cmd_calibrate(common, checkpoint, split, *bins),
        Command::GradCheck { corrupt_gradient } => cmd_grad_check(common, *corrupt_gradient),
    }
}

/// Config from `--config`, else from the checkpoint's directory, else
/// defaults; then the `--seed` and `--out` overrides.
fn resolve_config(common: &Common, checkpoint: Option<&Path>) -> Result<(RunConfig, PathBuf)> {
    let beside = checkpoint
        .and_then(Path::parent)
        .map(|d| d.join(CONFIG_FILE))
        .filter(|p| p.is_file());
    let mut cfg = match (&common.config, beside) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(path)) => RunConfig::load(&path)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    let out = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn load_split(cfg: &RunConfig, name: SplitName, data: Option<&Path>) -> Result<Vec<Sample>> {
    match data {
        Some(dir) => read_dataset(&dir.join(format!("{}.bin", name.as_str()))),
        None => {
            let Splits {
                train,
                test_iid,
                test_ood,
            } = split_iid_ood(&cfg.synth, &cfg.bias, &cfg.split)?;
            Ok(match name {
                SplitName::Train => train,
                SplitName::TestIid => test_iid,
                SplitName::TestOod => test_ood,
            })
        }
    }
}

fn gen_data(common: &Common) -> Result<()> {
    let (cfg, out) = resolve_config(common, None)?;
    let splits = split_iid_ood(&cfg.synth, &cfg.bias, &cfg.split)?;
    for (name, samples) in [
        (SplitName::Train, &splits.train),
        (SplitName::TestIid, &splits.test_iid),
        (SplitName::TestOod, &splits.test_ood),
    ] {
        let path = out.join(format!("{}.bin", name.as_str()));
        let sidecar = DatasetSidecar {
            split: name.as_str().into(),
            synth: cfg.synth.clone(),
            bias: cfg.bias.clone(),
            n_samples: samples.len(),
        };
        write_dataset(&path, samples, &sidecar)?;
        eprintln!("wrote {} ({} samples)", path.display(), samples.len());
    }
    write_text(&out.join(CONFIG_FILE), &cfg.to_json()?)
}

fn cmd_train(common: &Common, resume: Option<&Path>, data: Option<&Path>) -> Result<()> {
    let (cfg, out) = resolve_config(common, None)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json()?)?;
    let train_set = load_split(&cfg, SplitName::Train, data)?;
    let test_set = load_split(&cfg, SplitName::TestIid, data)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let outcome = train(&cfg, &train_set, resume.as_ref(), Some(&ck_path))?;
    eprintln!("wrote {}", ck_path.display());
    let log_path = out.join("train_log.csv");
    write_epoch_log(&log_path, &outcome.log)?;
    eprintln!("wrote {}", log_path.display());
    check_split(&outcome.model, &test_set)?;
    let report = evaluate(&outcome.model, &test_set)?;
    write_json(
        &out.join("metrics.json"),
        &json!({ "split": SplitName::TestIid.as_str(), "config_hash": format!("{:016x}", cfg.hash()?), "report": report }),
    )
}

fn model_and_split(
    common: &Common,
    checkpoint: &Path,
    split: &SplitArgs,
) -> Result<(RunConfig, PathBuf, evmr::model::Model, Vec<Sample>)> {
    let (cfg, out) = resolve_config(common, Some(checkpoint))?;
    let model = load_model(&cfg, &Checkpoint::load(checkpoint)?)?;
    let samples = load_split(&cfg, split.split, split.data.as_deref())?;
    check_split(&model, &samples)?;
    Ok((cfg, out, model, samples))
}

fn cmd_eval(common: &Common, checkpoint: &Path, split: &SplitArgs) -> Result<()> {
    let (_, out, model, samples) = model_and_split(common, checkpoint, split)?;
    let report = evaluate(&model, &samples)?;
    let name = split.split.as_str();
    write_json(&out.join(format!("eval_{name}.json")), &json!({ "split": name, "report": report }))
}

fn cmd_grad_field(common: &Common, mode: FieldMode, resolution: usize) -> Result<()> {
    let (_, out) = resolve_config(common, None)?;
    let mode = match mode {
        FieldMode::Vanilla => RegularizerMode::Vanilla,
        FieldMode::Geom => RegularizerMode::Geom,
    };
    write_text(&out.join(format!("grad_field_{mode}.csv")), &gradient_field_csv(mode, resolution)?)
}

fn cmd_noise_sweep(common: &Common, checkpoint: &Path, split: &SplitArgs) -> Result<()> {
    let (cfg, out, model, samples) = model_and_split(common, checkpoint, split)?;
    let sweep = noise_sweep(&model, &samples, &cfg.noise, &cfg.synth, cfg.seed)?;
    write_text(&out.join("noise_sweep.csv"), &sweep.csv())?;
    write_json(
        &out.join("noise_sweep.json"),
        &json!({
            "split": split.split.as_str(),
            "visual_levels": cfg.noise.visual,
            "text_levels": cfg.noise.text,
            "visual_means": sweep.visual_means,
            "text_means": sweep.text_means,
            "var_vis": sweep.summary.var_vis,
            "var_text": sweep.summary.var_text,
            "delta_var": sweep.summary.delta_var,
        }),
    )
}

fn cmd_calibrate(common: &Common, checkpoint: &Path, split: &SplitArgs, bins: usize) -> Result<()> {
    let (_, out, model, samples) = model_and_split(common, checkpoint, split)?;
    if bins == 0 {
        return Err(Error::InvalidInput("--bins must be >= 1".into()));
    }
    let (report, evals) = calibrate(&model, &samples, bins)?;
    let name = split.split.as_str();
    write_text(&out.join(format!("calibration_{name}.csv")), &calibration_csv(&evals))?;
    write_json(&out.join(format!("calibration_{name}.json")), &json!({ "split": name, "report": report }))
}

fn cmd_grad_check(common: &Common, corrupt: bool) -> Result<()> {
    let (cfg, out) = resolve_config(common, None)?;
    let setup = GradCheckSetup::from_run(&cfg);
    let checks = run_grad_check(&setup, corrupt)?;
    write_json(&out.join("grad_check.json"), &checks)?;
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.report.passed)
        .map(|c| {
            let names: Vec<&str> = c.report.offenders().map(|p| p.name.as_str()).collect();
            format!("{}: {}", c.mode, names.join(", "))
        })
        .collect();
    for c in &checks {
        eprintln!(
            "{:>8}: max rel error {:.3e} ({})",
            c.mode.as_str(),
            c.report.max_rel_error,
            if c.report.passed { "pass" } else { "FAIL" }
        );
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("gradient check failed for {}", failed.join("; "))))
    }
}
