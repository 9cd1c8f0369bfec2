//! Experiment configuration files: flat `key = value` lines grouped under
//! `[section]` headers, `#` comments. Unknown keys are rejected.
//!
//! ```text
//! [scenario]
//! preset = desk
//! alpha = 0.2
//!
//! [experiment]
//! receivers = b1, boxfbs, boxfbs@10
//! trials = 500
//! sweep = p
//! sweep_values = 10, 20, 30
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{uniform_grid, ExperimentSpec, Receiver, ReceiverKind, ReceiverSettings, Sweep};
use crate::baselines::BaselineConfig;
use crate::dunfold::{load_params, TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::kvfile::{Entry, KvDoc};
use crate::scenario::ScenarioConfig;
use crate::solvers::{NeRule, SolverParams, StepRule};

/// Desk-scale hyper-parameters of the classical receivers.
pub fn desk_settings() -> ReceiverSettings {
    ReceiverSettings {
        solver: SolverParams { mu_h: 8.0, mu_x: 0.5, lambda: 0.0, ..SolverParams::default() },
        baseline: BaselineConfig { mu_h: 10.0, ..BaselineConfig::default() },
        default_t_aud: 5.0,
        ..ReceiverSettings::default()
    }
}

impl ExperimentSpec {
    /// Desk scenario, all classical receivers, calibrated thresholds.
    pub fn desk() -> Self {
        ExperimentSpec {
            scenario: ScenarioConfig::desk(),
            receivers: [ReceiverKind::B1, ReceiverKind::B3, ReceiverKind::B5, ReceiverKind::BoxFbs, ReceiverKind::Pme]
                .into_iter()
                .map(Receiver::new)
                .collect(),
            trials: 100,
            seed: 1,
            sweep: Sweep::None,
            roc_thresholds: uniform_grid(101),
            settings: desk_settings(),
            calibration_trials: 200,
            train: TrainConfig::default(),
            du_layers: 10,
            record_wall_time: false,
        }
    }
}

fn parse<T: FromStr>(e: &Entry) -> Result<T> {
    e.value.parse().map_err(|_| {
        let sec = if e.section.is_empty() { String::new() } else { format!("[{}] ", e.section) };
        Error::config(format!("line {}: cannot parse `{}` for {sec}{}", e.line, e.value, e.key))
    })
}

fn parse_list<T: FromStr>(e: &Entry) -> Result<Vec<T>> {
    e.value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|v| v.parse().map_err(|_| Error::config(format!("line {}: bad list item `{v}` for {}", e.line, e.key))))
        .collect()
}

fn unknown(e: &Entry) -> Error {
    let sec = if e.section.is_empty() { "top level".to_string() } else { format!("[{}]", e.section) };
    Error::config(format!("line {}: unknown key `{}` in {sec}", e.line, e.key))
}

fn apply_scenario(cfg: &mut ScenarioConfig, e: &Entry) -> Result<()> {
    match e.key.as_str() {
        "preset" => {}
        "p" => cfg.p = parse(e)?,
        "m" => cfg.m = parse(e)?,
        "n" => cfg.n = parse(e)?,
        "alpha" => cfg.alpha = parse(e)?,
        "r_p" => cfg.r_p = parse(e)?,
        "r_d" => cfg.r_d = parse(e)?,
        "area_side_m" => cfg.area_side_m = parse(e)?,
        "h_ap_m" => cfg.h_ap_m = parse(e)?,
        "h_ue_m" => cfg.h_ue_m = parse(e)?,
        "sigma_sh_db" => cfg.sigma_sh_db = parse(e)?,
        "fc_mhz" => cfg.fc_mhz = parse(e)?,
        "bandwidth_hz" => cfg.bandwidth_hz = parse(e)?,
        "noise_figure_db" => cfg.noise_figure_db = parse(e)?,
        "noise_temp_k" => cfg.noise_temp_k = parse(e)?,
        "tx_power_w" => cfg.tx_power_w = parse(e)?,
        "power_ctrl_range_db" => cfg.power_ctrl_range_db = parse(e)?,
        "d0_km" => cfg.d0_km = parse(e)?,
        "d1_km" => cfg.d1_km = parse(e)?,
        _ => return Err(unknown(e)),
    }
    Ok(())
}

fn apply_step(step: &mut StepRule, e: &Entry) -> Result<()> {
    let (mut scale, mut iters, mut refresh) = match step {
        StepRule::Lipschitz { scale, power_iters, refresh } => (*scale, *power_iters, *refresh),
        _ => (0.9, 50, 10),
    };
    match e.key.as_str() {
        "step" => match e.value.as_str() {
            "lipschitz" => *step = StepRule::Lipschitz { scale, power_iters: iters, refresh },
            _ => *step = StepRule::Fixed(parse(e)?),
        },
        "step_scale" => {
            scale = parse(e)?;
            *step = StepRule::Lipschitz { scale, power_iters: iters, refresh };
        }
        "power_iters" => {
            iters = parse(e)?;
            *step = StepRule::Lipschitz { scale, power_iters: iters, refresh };
        }
        "refresh" => {
            refresh = parse(e)?;
            *step = StepRule::Lipschitz { scale, power_iters: iters, refresh };
        }
        _ => return Err(unknown(e)),
    }
    Ok(())
}

/// Parses a configuration. Relative parameter-file paths are resolved
/// against `base_dir`.
pub fn parse_spec(text: &str, base_dir: &Path) -> Result<ExperimentSpec> {
    let doc = KvDoc::parse(text)?;
    let mut spec = ExperimentSpec::desk();
    match doc.parse_value::<String>("scenario", "preset")?.as_deref() {
        None | Some("desk") => {}
        Some("full") => spec.scenario = ScenarioConfig::default(),
        Some(other) => return Err(Error::config(format!("unknown scenario preset `{other}` (desk or full)"))),
    }
    let mut sweep_kind = None;
    let mut sweep_values: Option<&Entry> = None;
    let mut params_paths: Vec<PathBuf> = Vec::new();
    for e in doc.entries() {
        let s = &mut spec.settings;
        match (e.section.as_str(), e.key.as_str()) {
            ("scenario", _) => apply_scenario(&mut spec.scenario, e)?,
            ("experiment", "receivers") => spec.receivers = parse_list(e)?,
            ("experiment", "trials") => spec.trials = parse(e)?,
            ("experiment", "seed") => spec.seed = parse(e)?,
            ("experiment", "sweep") => sweep_kind = Some(e),
            ("experiment", "sweep_values") => sweep_values = Some(e),
            ("experiment", "roc_points") => spec.roc_thresholds = uniform_grid(parse(e)?),
            ("experiment", "roc_thresholds") => spec.roc_thresholds = parse_list(e)?,
            ("experiment", "calibration_trials") => spec.calibration_trials = parse(e)?,
            ("experiment", "record_wall_time") => spec.record_wall_time = parse(e)?,
            ("solver", "mu_h") => s.solver.mu_h = parse(e)?,
            ("solver", "mu_x") => s.solver.mu_x = parse(e)?,
            ("solver", "lambda") => s.solver.lambda = parse(e)?,
            ("solver", "k_max") => s.solver.k_max = parse(e)?,
            ("solver", "tol") => s.solver.tol = parse(e)?,
            ("solver", _) => apply_step(&mut s.solver.step, e)?,
            ("baseline", "mu_h") => s.baseline.mu_h = parse(e)?,
            ("baseline", "k_iter") => s.baseline.k_iter = parse(e)?,
            ("baseline", "tol") => s.baseline.tol = parse(e)?,
            ("baseline", "prior_var") => s.baseline.prior_var = parse(e)?,
            ("baseline", "noise_var") => s.baseline.noise_var = parse(e)?,
            ("baseline", _) => apply_step(&mut s.baseline.step, e)?,
            ("aud", "t_aud") => s.default_t_aud = parse(e)?,
            ("aud", k) if k.starts_with("t_aud.") => {
                let rx: Receiver = k["t_aud.".len()..].parse()?;
                s.t_aud.insert(rx.to_string(), parse(e)?);
            }
            ("pme", "ne") => {
                s.ne = match e.value.as_str() {
                    "residual" => NeRule::Residual,
                    "residual_per_gain" => NeRule::ResidualPerGain,
                    _ => NeRule::Constant(parse(e)?),
                }
            }
            ("du", "layers") => spec.du_layers = parse(e)?,
            ("du", "params") => params_paths.extend(parse_list::<String>(e)?.into_iter().map(PathBuf::from)),
            ("train", "learning_rate") => spec.train.learning_rate = parse(e)?,
            ("train", "epochs") => spec.train.epochs = parse(e)?,
            ("train", "batch_size") => spec.train.batch_size = parse(e)?,
            ("train", "samples_per_epoch") => spec.train.samples_per_epoch = parse(e)?,
            ("train", "validation_size") => spec.train.validation_size = parse(e)?,
            _ => return Err(unknown(e)),
        }
    }
    spec.sweep = match (sweep_kind.map(|e| e.value.as_str()), sweep_values) {
        (None | Some("none"), None) => Sweep::None,
        (None | Some("none"), Some(v)) => {
            return Err(Error::config(format!("line {}: sweep_values given without a sweep variable", v.line)))
        }
        (Some("p"), Some(v)) => Sweep::P(parse_list(v)?),
        (Some("alpha"), Some(v)) => Sweep::Alpha(parse_list(v)?),
        (Some("p" | "alpha"), None) => return Err(Error::config("sweep set but sweep_values missing")),
        (Some(other), _) => return Err(Error::config(format!("unknown sweep variable `{other}` (p, alpha or none)"))),
    };
    for p in params_paths {
        let path = if p.is_absolute() { p } else { base_dir.join(p) };
        attach_params(&mut spec, &path)?;
    }
    spec.validate()?;
    Ok(spec)
}

/// Loads a trained-parameter file into the slot of its variant.
pub fn attach_params(spec: &mut ExperimentSpec, path: &Path) -> Result<()> {
    let p = load_params(path)?;
    if p.rd() != spec.scenario.r_d {
        return Err(Error::config(format!(
            "{} was trained for R_D = {}, scenario has {}",
            path.display(),
            p.rd(),
            spec.scenario.r_d
        )));
    }
    match p.variant {
        Variant::Abc => spec.settings.du_abc = Some(p),
        Variant::Poem => spec.settings.du_poem = Some(p),
    }
    Ok(())
}

pub fn load_spec(path: &Path) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    parse_spec(&text, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_sweeps() {
        let text = "[scenario]\np = 12\nalpha = 0.3\n[experiment]\nreceivers = b1, boxfbs@10\ntrials = 7\n\
                    sweep = alpha\nsweep_values = 0.1, 0.2\n[aud]\nt_aud.boxfbs@10 = 3.5\n[solver]\nstep_scale = 0.5\n";
        let s = parse_spec(text, Path::new(".")).unwrap();
        assert_eq!(s.scenario.p, 12);
        assert_eq!(s.trials, 7);
        assert_eq!(s.receivers[1], Receiver::capped(ReceiverKind::BoxFbs, 10));
        assert_eq!(s.sweep, Sweep::Alpha(vec![0.1, 0.2]));
        assert_eq!(s.settings.t_aud["boxfbs@10"], 3.5);
        assert!(matches!(s.settings.solver.step, StepRule::Lipschitz { scale, .. } if scale == 0.5));
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "[scenario]\nbogus = 1\n",
            "[experiment]\ntrials = 0\n",
            "[experiment]\nsweep = p\n",
            "[experiment]\nreceivers = amp\n",
            "[scenario]\nalpha = x\n",
            "[scenario]\npreset = huge\n",
        ] {
            assert!(matches!(parse_spec(bad, Path::new(".")), Err(Error::Config(_))), "{bad}");
        }
    }
}
