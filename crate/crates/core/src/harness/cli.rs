//! Command-line front end. Exit codes: 0 success, 1 usage or configuration
//! error, 2 runtime abort.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::config::{attach_params, load_spec};
use super::{
    calibration_csv, results_csv, roc_csv, run_experiment, run_roc, train_unfolded, training_csv, trials_csv,
    ExperimentSpec, Receiver,
};
use crate::dunfold::{save_params, Variant};
use crate::error::{Error, Result};
use crate::exec::with_threads;
use crate::scenario::{draw_trial, generate_pilots};

#[derive(Debug, Parser)]
#[command(name = "jacd", version, about = "Grant-free cell-free massive MIMO receiver simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration file (built-in desk setup when omitted).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Base seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 forces serial execution.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Receivers to run (repeatable); overrides the configuration.
    #[arg(long = "receiver", value_name = "NAME")]
    receivers: Vec<Receiver>,
    /// Trial count; overrides the configuration.
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte-Carlo evaluation of the selected receivers.
    Simulate(Common),
    /// Pooled ROC curves of the selected receivers.
    Roc(Common),
    /// Train unfolded receivers and write their parameter files.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override the number of training epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Monte-Carlo evaluation with trained parameter files.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Trained parameter file (repeatable).
        #[arg(long = "params", value_name = "FILE")]
        params: Vec<PathBuf>,
    },
    /// Write the geometry, activity and gains of one trial as CSV.
    DumpScenario {
        #[command(flatten)]
        common: Common,
        /// Trial index.
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
}

fn load(common: &Common) -> Result<ExperimentSpec> {
    let mut spec = match &common.config {
        Some(p) => load_spec(p)?,
        None => ExperimentSpec::desk(),
    };
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    if !common.receivers.is_empty() {
        spec.receivers = common.receivers.clone();
    }
    if let Some(t) = common.trials {
        spec.trials = t;
    }
    if common.threads == Some(0) {
        return Err(Error::config("--threads must be at least 1"));
    }
    spec.validate()?;
    Ok(spec)
}

fn write(dir: &Path, name: &str, contents: &str, log: &mut dyn Write) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    let _ = writeln!(log, "wrote {}", path.display());
    Ok(())
}

fn simulate(spec: &ExperimentSpec, common: &Common, log: &mut dyn Write) -> Result<()> {
    let out = with_threads(common.threads, |exec| run_experiment(spec, exec))?;
    write(&common.out, "results.csv", &results_csv(&out.rows), log)?;
    write(&common.out, "trials.csv", &trials_csv(&out.trials), log)?;
    write(&common.out, "calibration.csv", &calibration_csv(&out.calibration), log)?;
    let aborted: usize = out.rows.iter().map(|r| r.aborted).sum();
    if aborted > 0 {
        let _ = writeln!(log, "{aborted} receiver trials aborted; see trials.csv");
    }
    Ok(())
}

fn dispatch(cmd: Command, log: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Simulate(common) => simulate(&load(&common)?, &common, log),
        Command::Eval { common, params } => {
            let mut spec = load(&common)?;
            for p in &params {
                attach_params(&mut spec, p)?;
            }
            for rx in &spec.receivers {
                if let Some(v) = rx.kind.variant() {
                    if spec.settings.unfolded(v).is_none() {
                        return Err(Error::config(format!("receiver {rx} selected but no parameter file given")));
                    }
                }
            }
            simulate(&spec, &common, log)
        }
        Command::Roc(common) => {
            let spec = load(&common)?;
            let out = with_threads(common.threads, |exec| run_roc(&spec, exec))?;
            write(&common.out, "roc.csv", &roc_csv(&out.rows), log)?;
            write(&common.out, "calibration.csv", &calibration_csv(&out.calibration), log)
        }
        Command::Train { common, epochs } => {
            let mut spec = load(&common)?;
            if let Some(e) = epochs {
                spec.train.epochs = e;
            }
            let mut variants: Vec<Variant> = spec.receivers.iter().filter_map(|r| r.kind.variant()).collect();
            if variants.is_empty() {
                variants = vec![Variant::Abc, Variant::Poem];
            }
            variants.dedup();
            for v in variants {
                let report = with_threads(common.threads, |exec| train_unfolded(&spec, v, exec))?;
                let _ = writeln!(
                    log,
                    "du-{v}: validation loss {} -> {}{}",
                    report.initial_validation_loss,
                    report.best_validation_loss,
                    report.aborted_at.map(|e| format!(" (aborted at epoch {e})")).unwrap_or_default()
                );
                std::fs::create_dir_all(&common.out)?;
                let path = common.out.join(format!("du-{v}.params"));
                save_params(&report.params, &path)?;
                let _ = writeln!(log, "wrote {}", path.display());
                write(&common.out, &format!("du-{v}-training.csv"), &training_csv(&report), log)?;
            }
            Ok(())
        }
        Command::DumpScenario { common, trial } => {
            let spec = load(&common)?;
            let cfg = &spec.scenario;
            let pilots = generate_pilots(cfg, spec.seed)?;
            let t = draw_trial(cfg, &pilots, super::trial_seed(spec.seed, trial))?;
            let g = &t.channel.geometry;
            let mut aps = String::from("ap,x_m,y_m\n");
            for (i, p) in g.ap_positions.iter().enumerate() {
                aps.push_str(&format!("{i},{},{}\n", p[0], p[1]));
            }
            let gains = t.channel.effective_gain();
            let mut ues = String::from("ue,x_m,y_m,active,power_scale,effective_gain_db\n");
            for (i, p) in g.ue_positions.iter().enumerate() {
                ues.push_str(&format!(
                    "{i},{},{},{},{},{}\n",
                    p[0],
                    p[1],
                    u8::from(t.channel.xi[i]),
                    t.channel.power_scale[i],
                    10.0 * gains[i].log10()
                ));
            }
            write(&common.out, "scenario-aps.csv", &aps, log)?;
            write(&common.out, "scenario-ues.csv", &ues, log)
        }
    }
}

/// Exit code of an error: 1 for configuration problems, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

/// Runs the CLI on `args` (program name first), writing progress to `out`
/// and diagnostics to `err`. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
