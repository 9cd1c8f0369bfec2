//! Uniform front end over every receiver the harness can run.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::baselines::{baseline5_jacd, ls_detect, mmse_detect, separate_receiver, BaselineConfig, BaselineVariant, SeparateOutput};
use crate::detection::{aud_from_scores, column_energies, mask_columns};
use crate::dunfold::{run_du, UnfoldedParams, Variant};
use crate::error::{Error, Result};
use crate::linalg::{hcat, CMat};
use crate::mathcore::Constellation;
use crate::solvers::{clamp_matrix, run_box_fbs, run_pme_jacd, FbsState, NeRule, SolverParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ReceiverKind {
    B1,
    B3,
    B5,
    BoxFbs,
    Pme,
    DuAbc,
    DuPoem,
}

impl ReceiverKind {
    pub const ALL: [ReceiverKind; 7] = [
        ReceiverKind::B1,
        ReceiverKind::B3,
        ReceiverKind::B5,
        ReceiverKind::BoxFbs,
        ReceiverKind::Pme,
        ReceiverKind::DuAbc,
        ReceiverKind::DuPoem,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReceiverKind::B1 => "b1",
            ReceiverKind::B3 => "b3",
            ReceiverKind::B5 => "b5",
            ReceiverKind::BoxFbs => "boxfbs",
            ReceiverKind::Pme => "pme",
            ReceiverKind::DuAbc => "du-abc",
            ReceiverKind::DuPoem => "du-poem",
        }
    }

    pub fn is_unfolded(self) -> bool {
        matches!(self, ReceiverKind::DuAbc | ReceiverKind::DuPoem)
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            ReceiverKind::DuAbc => Some(Variant::Abc),
            ReceiverKind::DuPoem => Some(Variant::Poem),
            _ => None,
        }
    }
}

/// A receiver with an optional iteration cap, written `name` or `name@K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Receiver {
    pub kind: ReceiverKind,
    pub k_max: Option<usize>,
}

impl Receiver {
    pub fn new(kind: ReceiverKind) -> Self {
        Receiver { kind, k_max: None }
    }

    pub fn capped(kind: ReceiverKind, k: usize) -> Self {
        Receiver { kind, k_max: Some(k) }
    }
}

impl fmt::Display for Receiver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.k_max {
            Some(k) => write!(f, "{}@{k}", self.kind.name()),
            None => f.write_str(self.kind.name()),
        }
    }
}

impl FromStr for Receiver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (name, cap) = match s.split_once('@') {
            Some((n, k)) => {
                let k: usize = k.parse().map_err(|_| Error::config(format!("bad iteration cap in `{s}`")))?;
                if k == 0 {
                    return Err(Error::config(format!("iteration cap must be positive in `{s}`")));
                }
                (n, Some(k))
            }
            None => (s, None),
        };
        let kind = ReceiverKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::config(format!("unknown receiver `{name}` (expected b1, b3, b5, boxfbs, pme, du-abc or du-poem)")))?;
        if cap.is_some() && kind.is_unfolded() {
            return Err(Error::config("unfolded receivers have a fixed layer count; drop the @K suffix"));
        }
        Ok(Receiver { kind, k_max: cap })
    }
}

/// Tunables shared by all receivers of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverSettings {
    /// Joint-solver parameters (box FBS, PME variant, Baseline 5).
    pub solver: SolverParams,
    /// Channel-estimation stage of Baselines 1 and 3.
    pub baseline: BaselineConfig,
    /// Energy threshold used when a receiver has no entry in `t_aud`.
    pub default_t_aud: f64,
    /// Per-receiver energy thresholds, keyed by receiver label.
    pub t_aud: BTreeMap<String, f64>,
    pub ne: NeRule,
    pub du_abc: Option<UnfoldedParams>,
    pub du_poem: Option<UnfoldedParams>,
}

impl Default for ReceiverSettings {
    fn default() -> Self {
        ReceiverSettings {
            solver: SolverParams::default(),
            baseline: BaselineConfig::default(),
            default_t_aud: 0.0,
            t_aud: BTreeMap::new(),
            ne: NeRule::ResidualPerGain,
            du_abc: None,
            du_poem: None,
        }
    }
}

impl ReceiverSettings {
    pub fn t_aud_for(&self, rx: Receiver) -> f64 {
        self.t_aud.get(&rx.to_string()).copied().unwrap_or(self.default_t_aud)
    }

    pub fn unfolded(&self, v: Variant) -> Option<&UnfoldedParams> {
        match v {
            Variant::Abc => self.du_abc.as_ref(),
            Variant::Poem => self.du_poem.as_ref(),
        }
    }

    fn b1_t_aud(&self) -> f64 {
        self.t_aud_for(Receiver::new(ReceiverKind::B1))
    }

    fn b1_config(&self, variant: BaselineVariant) -> BaselineConfig {
        BaselineConfig { variant, t_aud: self.b1_t_aud(), ..self.baseline.clone() }
    }
}

/// Observation handed to a receiver.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub y_p: &'a CMat,
    pub y_d: &'a CMat,
    pub x_p: &'a CMat,
    /// Antennas per AP.
    pub m: usize,
    pub alpha: f64,
    pub q: &'a Constellation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverOutput {
    pub h: CMat,
    /// Soft data estimate (before hard decisions).
    pub x_d: CMat,
    pub xi_hat: Vec<bool>,
    /// Activity scores in `[0, 1]`, increasing with confidence.
    pub scores: Vec<f64>,
    /// Column energies of the channel estimate before masking.
    pub energies: Vec<f64>,
    /// Decision threshold on `scores` equivalent to `xi_hat`.
    pub score_threshold: f64,
    pub iterations: usize,
    pub rank_deficient: bool,
}

/// Maps channel energy to `e / (e + T)`, a monotone score in `[0, 1)` whose
/// `0.5` level coincides with the energy threshold `T`.
pub fn energy_scores(energies: &[f64], t_aud: f64) -> Vec<f64> {
    energies
        .iter()
        .map(|&e| {
            if t_aud > 0.0 {
                e / (e + t_aud)
            } else if e > 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Starting point of the joint solvers: Baseline 1's masked channel and its
/// least-squares data estimate clamped to the box.
pub fn classical_init(b1: &SeparateOutput, half_width: f64) -> FbsState {
    FbsState::new(b1.h.clone(), clamp_matrix(&b1.x_d, half_width))
}

fn joint_output(state: FbsState, t_aud: f64) -> Result<ReceiverOutput> {
    let energies = column_energies(&state.h);
    let xi_hat: Vec<bool> = energies.iter().map(|&v| v >= t_aud).collect();
    let h = mask_columns(&state.h, &xi_hat)?;
    Ok(ReceiverOutput {
        h,
        x_d: state.x_d,
        xi_hat,
        scores: energy_scores(&energies, t_aud),
        energies,
        score_threshold: 0.5,
        iterations: state.iteration,
        rank_deficient: false,
    })
}

/// Baseline 1 with the configured channel-estimation settings; shared by
/// every receiver of a trial as the starting point.
pub fn baseline1(obs: &Observation<'_>, settings: &ReceiverSettings) -> Result<SeparateOutput> {
    separate_receiver(obs.y_p, obs.y_d, obs.x_p, obs.m, &settings.b1_config(BaselineVariant::B1))
}

/// Runs one receiver on one observation.
pub fn run_receiver(rx: Receiver, obs: &Observation<'_>, settings: &ReceiverSettings) -> Result<ReceiverOutput> {
    run_receiver_from(rx, obs, settings, &baseline1(obs, settings)?)
}

/// Like [`run_receiver`] with Baseline 1's output already computed.
pub fn run_receiver_from(
    rx: Receiver,
    obs: &Observation<'_>,
    settings: &ReceiverSettings,
    b1: &SeparateOutput,
) -> Result<ReceiverOutput> {
    let bw = obs.q.half_width();
    let y = || hcat(obs.y_p, obs.y_d);
    let mut solver = settings.solver.clone();
    if let Some(k) = rx.k_max {
        solver.k_max = k;
    }
    let t_aud = settings.t_aud_for(rx);
    match rx.kind {
        ReceiverKind::B1 | ReceiverKind::B3 => {
            let variant = if rx.kind == ReceiverKind::B3 { BaselineVariant::B3 } else { BaselineVariant::B1 };
            let cfg = BaselineConfig {
                variant,
                t_aud,
                k_iter: rx.k_max.unwrap_or(settings.baseline.k_iter),
                ..settings.baseline.clone()
            };
            let own;
            let b = if rx.k_max.is_none() && variant == BaselineVariant::B1 && t_aud == settings.b1_t_aud() {
                b1
            } else if rx.k_max.is_none() {
                // same channel estimate, different threshold or detector
                let xi_hat: Vec<bool> = column_energies(&b1.h_tmp).iter().map(|&e| e >= t_aud).collect();
                let h = mask_columns(&b1.h_tmp, &xi_hat)?;
                let (x_d, rank_deficient) = match variant {
                    BaselineVariant::B3 => (mmse_detect(obs.y_d, &h, &xi_hat, cfg.noise_var, cfg.prior_var)?, false),
                    _ => ls_detect(obs.y_d, &h, &xi_hat)?,
                };
                own = SeparateOutput { h_tmp: b1.h_tmp.clone(), xi_hat, h, x_d, rank_deficient, channel_iterations: b1.channel_iterations };
                &own
            } else {
                own = separate_receiver(obs.y_p, obs.y_d, obs.x_p, obs.m, &cfg)?;
                &own
            };
            let energies = column_energies(&b.h_tmp);
            Ok(ReceiverOutput {
                h: b.h.clone(),
                x_d: b.x_d.clone(),
                xi_hat: b.xi_hat.clone(),
                scores: energy_scores(&energies, t_aud),
                energies,
                score_threshold: 0.5,
                iterations: b.channel_iterations,
                rank_deficient: b.rank_deficient,
            })
        }
        ReceiverKind::B5 => {
            let init = FbsState::new(b1.h.clone(), b1.x_d.clone());
            joint_output(baseline5_jacd(&y(), obs.x_p, &solver, obs.m, init)?, t_aud)
        }
        ReceiverKind::BoxFbs => {
            let solver = SolverParams { half_width: bw, ..solver };
            joint_output(run_box_fbs(&y(), obs.x_p, &solver, obs.m, classical_init(b1, bw))?, t_aud)
        }
        ReceiverKind::Pme => {
            let st = run_pme_jacd(&y(), obs.x_p, &solver, obs.m, obs.q, obs.alpha, &settings.ne, classical_init(b1, bw))?;
            joint_output(st, t_aud)
        }
        ReceiverKind::DuAbc | ReceiverKind::DuPoem => {
            let variant = rx.kind.variant().expect("unfolded receiver");
            let params = settings
                .unfolded(variant)
                .ok_or_else(|| Error::config(format!("receiver {rx} needs trained parameters (see `train` and `eval`)")))?;
            let init = classical_init(b1, bw);
            let out = run_du(&y(), obs.x_p, params, obs.m, obs.q, &init.h, &init.x_d)?;
            let xi_hat = aud_from_scores(&out.scores, params.aud.l_bar);
            let h = mask_columns(&out.h, &xi_hat)?;
            Ok(ReceiverOutput {
                h,
                x_d: out.x_d,
                xi_hat,
                scores: out.scores,
                energies: column_energies(&out.h),
                score_threshold: params.aud.l_bar,
                iterations: params.layers.len(),
                rank_deficient: false,
            })
        }
    }
}
