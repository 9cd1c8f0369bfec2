//! Seeded Monte-Carlo experiments, ROC sweeps, threshold calibration,
//! training of the unfolded receivers and result serialisation.

pub mod cli;
pub mod config;
pub mod receivers;

use std::fmt::Write as _;
use std::time::Instant;

pub use receivers::{
    baseline1, classical_init, energy_scores, run_receiver, run_receiver_from, Observation, Receiver, ReceiverKind,
    ReceiverOutput, ReceiverSettings,
};

use crate::detection::{compute_metrics, DetectionResult, TrialMetrics, Truth};
use crate::dunfold::{self, InitSpec, Sample, TrainConfig, TrainReport, UnfoldedParams, Variant};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, pairwise_sum, Execution};
use crate::linalg::CMat;
use crate::rng::{indexed_seed, Stream};
use crate::scenario::{draw_trial, generate_pilots, ScenarioConfig, Trial};
use crate::solvers::{lipschitz_bound, residual, residual_per_gain_ne};

/// Variable swept by an experiment.
#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    None,
    P(Vec<usize>),
    Alpha(Vec<f64>),
}

impl Sweep {
    pub fn name(&self) -> &'static str {
        match self {
            Sweep::None => "none",
            Sweep::P(_) => "p",
            Sweep::Alpha(_) => "alpha",
        }
    }

    /// `(label, scenario)` for every sweep value.
    pub fn points(&self, base: &ScenarioConfig) -> Vec<(String, ScenarioConfig)> {
        match self {
            Sweep::None => vec![(String::new(), base.clone())],
            Sweep::P(v) => v.iter().map(|&p| (p.to_string(), ScenarioConfig { p, ..base.clone() })).collect(),
            Sweep::Alpha(v) => v.iter().map(|&a| (a.to_string(), ScenarioConfig { alpha: a, ..base.clone() })).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub scenario: ScenarioConfig,
    pub receivers: Vec<Receiver>,
    pub trials: usize,
    pub seed: u64,
    pub sweep: Sweep,
    /// Ascending thresholds on the `[0, 1]` activity scores.
    pub roc_thresholds: Vec<f64>,
    pub settings: ReceiverSettings,
    /// Trials used to pick activity thresholds; `0` keeps the configured ones.
    pub calibration_trials: usize,
    pub train: TrainConfig,
    pub du_layers: usize,
    /// Fill the `wall_s` column (makes the CSV timing-dependent).
    pub record_wall_time: bool,
}

/// Thresholds `0, 1/(n-1), ..., 1`.
pub fn uniform_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..points).map(|i| i as f64 / (points - 1) as f64).collect(),
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.trials == 0 {
            return Err(Error::config("trials must be at least 1"));
        }
        if self.receivers.is_empty() {
            return Err(Error::config("no receivers selected"));
        }
        match &self.sweep {
            Sweep::P(v) if v.is_empty() || v.contains(&0) => {
                return Err(Error::config("P sweep needs a non-empty list of positive values"))
            }
            Sweep::Alpha(v) if v.is_empty() || v.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) => {
                return Err(Error::config("alpha sweep needs a non-empty list of values in (0, 1]"))
            }
            _ => {}
        }
        if self.roc_thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::config("ROC thresholds must be sorted ascending"));
        }
        if self.du_layers == 0 {
            return Err(Error::config("unfolded receivers need at least one layer"));
        }
        self.settings.solver.validate().map_err(|e| Error::config(e.to_string()))?;
        for v in self.settings.t_aud.values().chain([&self.settings.default_t_aud]) {
            if !(*v >= 0.0) {
                return Err(Error::config("activity thresholds must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Seed of trial `index`.
pub fn trial_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

/// Observation view of a drawn trial.
pub fn observation<'a>(cfg: &'a ScenarioConfig, trial: &'a Trial) -> Observation<'a> {
    Observation {
        y_p: &trial.rx.y_p,
        y_d: &trial.rx.y_d,
        x_p: &trial.tx.x_p,
        m: cfg.m,
        alpha: cfg.alpha,
        q: &cfg.constellation,
    }
}

/// Metrics of one receiver output against the trial's ground truth.
pub fn score_output(cfg: &ScenarioConfig, trial: &Trial, out: &ReceiverOutput) -> Result<TrialMetrics> {
    let res = DetectionResult::new(out.xi_hat.clone(), out.scores.clone(), &out.x_d, &cfg.constellation)?;
    let truth = Truth { xi: &trial.channel.xi, h: &trial.channel.h, x_d: &trial.tx.x_d };
    compute_metrics(truth, &res, &out.h)
}

/// One trial of one receiver in the per-trial log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub sweep: String,
    pub receiver: String,
    pub trial: usize,
    pub seed: u64,
    /// `Err` holds the abort message.
    pub outcome: std::result::Result<(TrialMetrics, usize), String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub sweep: String,
    pub receiver: String,
    /// Trials that completed and enter the means.
    pub trials: usize,
    pub aborted: usize,
    pub uder: f64,
    pub uder_se: f64,
    pub nmse: f64,
    pub nmse_se: f64,
    pub aser: f64,
    pub aser_se: f64,
    pub wall_s: Option<f64>,
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`);
/// the error is 0 for a single value. Pairwise summation keeps the result
/// independent of how the values were produced.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Aggregates per-trial records of one sweep point and receiver.
pub fn aggregate(sweep: &str, receiver: &str, records: &[&TrialRecord], wall_s: Option<f64>) -> ResultRow {
    let ok: Vec<&TrialMetrics> = records.iter().filter_map(|r| r.outcome.as_ref().ok().map(|(m, _)| m)).collect();
    let col = |f: fn(&TrialMetrics) -> f64| mean_se(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
    let (uder, uder_se) = col(|m| m.uder);
    let (nmse, nmse_se) = col(|m| m.nmse);
    let (aser, aser_se) = col(|m| m.aser);
    ResultRow {
        sweep: sweep.to_string(),
        receiver: receiver.to_string(),
        trials: ok.len(),
        aborted: records.len() - ok.len(),
        uder,
        uder_se,
        nmse,
        nmse_se,
        aser,
        aser_se,
        wall_s,
    }
}

/// A threshold picked on the calibration set.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationEntry {
    pub sweep: String,
    pub receiver: String,
    /// `t_aud` for energy receivers, `l_bar` for unfolded ones.
    pub parameter: &'static str,
    pub value: f64,
    pub uder: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub trials: Vec<TrialRecord>,
    pub calibration: Vec<CalibrationEntry>,
}

/// Threshold minimising the number of activity errors when a UE is
/// declared active iff `value >= threshold`. Candidates are `lower`, the
/// midpoints between consecutive distinct values and `upper`; ties go to
/// the smallest candidate. Returns `(threshold, errors)`.
pub fn min_error_threshold(values: &[f64], truth: &[bool], lower: f64, upper: f64) -> (f64, usize) {
    let mut pairs: Vec<(f64, bool)> = values.iter().copied().zip(truth.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // threshold at `lower`: everything with value >= lower is active
    let mut errors: usize = pairs.iter().filter(|(v, a)| (*v >= lower) != *a).count();
    let mut best = (lower, errors);
    let mut i = 0;
    while i < pairs.len() {
        let v = pairs[i].0;
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == v {
            if v >= lower {
                // moving the threshold above v flips these to inactive
                errors = if pairs[j].1 { errors + 1 } else { errors - 1 };
            }
            j += 1;
        }
        let next = if j < pairs.len() { 0.5 * (v + pairs[j].0) } else { upper };
        if next > lower && errors < best.1 {
            best = (next, errors);
        }
        i = j;
    }
    best
}

struct PointContext {
    label: String,
    cfg: ScenarioConfig,
    settings: ReceiverSettings,
    pilots: CMat,
}

fn calibrate_point(
    spec: &ExperimentSpec,
    label: &str,
    cfg: &ScenarioConfig,
    pilots: &CMat,
    settings: &mut ReceiverSettings,
    exec: Execution,
) -> Result<Vec<CalibrationEntry>> {
    let n_cal = spec.calibration_trials;
    let trials: Vec<Trial> = map_indexed(n_cal, exec, |i| {
        draw_trial(cfg, pilots, indexed_seed(spec.seed, Stream::Calibration, i as u64))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let truth: Vec<bool> = trials.iter().flat_map(|t| t.channel.xi.iter().copied()).collect();
    let total = truth.len().max(1) as f64;
    let mut entries = Vec::new();

    // Baseline 1 first: every other receiver starts from its output.
    let b1_energy: Vec<f64> = map_indexed(n_cal, exec, |i| {
        crate::baselines::fbs_channel_estimate(
            &trials[i].rx.y_p,
            &trials[i].tx.x_p,
            settings.baseline.mu_h,
            cfg.m,
            settings.baseline.k_iter,
            settings.baseline.tol,
            &settings.baseline.step,
        )
        .map(|st| crate::detection::column_energies(&st.h))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?
    .concat();
    let upper = b1_energy.iter().cloned().fold(0.0, f64::max) * 2.0 + 1.0;
    let (t, err) = min_error_threshold(&b1_energy, &truth, 0.0, upper);
    settings.t_aud.insert("b1".into(), t);
    entries.push(CalibrationEntry { sweep: label.into(), receiver: "b1".into(), parameter: "t_aud", value: t, uder: err as f64 / total });

    for &rx in &spec.receivers {
        if rx == Receiver::new(ReceiverKind::B1) {
            continue;
        }
        let unfolded = rx.kind.variant();
        if let Some(v) = unfolded {
            if settings.unfolded(v).is_none() {
                continue;
            }
        }
        let values: Vec<f64> = map_indexed(n_cal, exec, |i| {
            let obs = observation(cfg, &trials[i]);
            let b1 = baseline1(&obs, settings)?;
            let out = run_receiver_from(rx, &obs, settings, &b1)?;
            Ok(match unfolded {
                Some(_) => out.scores,
                None => out.energies,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .concat();
        let (parameter, (t, err)) = if unfolded.is_some() {
            ("l_bar", min_error_threshold(&values, &truth, 0.0, 1.0))
        } else {
            let upper = values.iter().cloned().fold(0.0, f64::max) * 2.0 + 1.0;
            ("t_aud", min_error_threshold(&values, &truth, 0.0, upper))
        };
        match unfolded {
            Some(Variant::Abc) => settings.du_abc.as_mut().expect("checked").aud.l_bar = t,
            Some(Variant::Poem) => settings.du_poem.as_mut().expect("checked").aud.l_bar = t,
            None => {
                settings.t_aud.insert(rx.to_string(), t);
            }
        }
        entries.push(CalibrationEntry { sweep: label.into(), receiver: rx.to_string(), parameter, value: t, uder: err as f64 / total });
    }
    Ok(entries)
}

fn prepare_points(spec: &ExperimentSpec, exec: Execution) -> Result<(Vec<PointContext>, Vec<CalibrationEntry>)> {
    spec.validate()?;
    let mut points = Vec::new();
    let mut calibration = Vec::new();
    for (label, cfg) in spec.sweep.points(&spec.scenario) {
        cfg.validate()?;
        let pilots = generate_pilots(&cfg, spec.seed)?;
        let mut settings = spec.settings.clone();
        if spec.calibration_trials > 0 {
            calibration.extend(calibrate_point(spec, &label, &cfg, &pilots, &mut settings, exec)?);
        }
        points.push(PointContext { label, cfg, settings, pilots });
    }
    Ok((points, calibration))
}

/// Runs every receiver on `trials` seeded trials per sweep point.
pub fn run_experiment(spec: &ExperimentSpec, exec: Execution) -> Result<ExperimentOutput> {
    let (points, calibration) = prepare_points(spec, exec)?;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for pt in &points {
        let start = Instant::now();
        let per_trial: Vec<Vec<TrialRecord>> = map_indexed(spec.trials, exec, |i| {
            let seed = trial_seed(spec.seed, i);
            let rec = |rx: &Receiver, outcome| TrialRecord {
                sweep: pt.label.clone(),
                receiver: rx.to_string(),
                trial: i,
                seed,
                outcome,
            };
            let trial = match draw_trial(&pt.cfg, &pt.pilots, seed) {
                Ok(t) => t,
                Err(e) => return spec.receivers.iter().map(|rx| rec(rx, Err(e.to_string()))).collect(),
            };
            let obs = observation(&pt.cfg, &trial);
            let b1 = baseline1(&obs, &pt.settings);
            spec.receivers
                .iter()
                .map(|rx| {
                    let outcome = b1
                        .as_ref()
                        .map_err(|e| e.to_string())
                        .and_then(|b1| run_receiver_from(*rx, &obs, &pt.settings, b1).map_err(|e| e.to_string()))
                        .and_then(|out| {
                            score_output(&pt.cfg, &trial, &out).map(|m| (m, out.iterations)).map_err(|e| e.to_string())
                        });
                    rec(rx, outcome)
                })
                .collect()
        });
        let wall = spec.record_wall_time.then(|| start.elapsed().as_secs_f64());
        for rx in &spec.receivers {
            let name = rx.to_string();
            let mine: Vec<&TrialRecord> = per_trial.iter().flatten().filter(|r| r.receiver == name).collect();
            rows.push(aggregate(&pt.label, &name, &mine, wall));
        }
        records.extend(per_trial.into_iter().flatten());
    }
    Ok(ExperimentOutput { rows, trials: records, calibration })
}

/// Pooled ROC point of one receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct RocRow {
    pub sweep: String,
    pub receiver: String,
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub declared_active: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocOutput {
    pub rows: Vec<RocRow>,
    pub calibration: Vec<CalibrationEntry>,
    pub aborted: usize,
}

/// Scores and truth of one trial, as consumed by [`pool_roc`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub scores: Vec<f64>,
    pub xi: Vec<bool>,
}

/// Pools hit and false-alarm counts over trials, declaring a UE active iff
/// its score exceeds the threshold.
pub fn pool_roc(trials: &[ScoredTrial], thresholds: &[f64]) -> Vec<(f64, f64, f64, usize)> {
    let n_a: usize = trials.iter().map(|t| t.xi.iter().filter(|&&a| a).count()).sum();
    let n_i: usize = trials.iter().map(|t| t.xi.len()).sum::<usize>() - n_a;
    thresholds
        .iter()
        .map(|&th| {
            let (mut hits, mut fa) = (0usize, 0usize);
            for t in trials {
                for (&s, &a) in t.scores.iter().zip(&t.xi) {
                    if s > th {
                        if a {
                            hits += 1;
                        } else {
                            fa += 1;
                        }
                    }
                }
            }
            let rate = |k: usize, d: usize| if d > 0 { k as f64 / d as f64 } else { 0.0 };
            (th, rate(fa, n_i), rate(hits, n_a), hits + fa)
        })
        .collect()
}

/// Scores of every receiver on every trial of one sweep point.
fn collect_scores(spec: &ExperimentSpec, pt: &PointContext, exec: Execution) -> Vec<Vec<Option<ScoredTrial>>> {
    map_indexed(spec.trials, exec, |i| {
        let seed = trial_seed(spec.seed, i);
        let Ok(trial) = draw_trial(&pt.cfg, &pt.pilots, seed) else {
            return vec![None; spec.receivers.len()];
        };
        let obs = observation(&pt.cfg, &trial);
        let b1 = baseline1(&obs, &pt.settings).ok();
        spec.receivers
            .iter()
            .map(|rx| {
                let out = run_receiver_from(*rx, &obs, &pt.settings, b1.as_ref()?).ok()?;
                Some(ScoredTrial { scores: out.scores, xi: trial.channel.xi.clone() })
            })
            .collect()
    })
}

/// ROC sweep over the configured score thresholds, pooled over trials.
pub fn run_roc(spec: &ExperimentSpec, exec: Execution) -> Result<RocOutput> {
    let (points, calibration) = prepare_points(spec, exec)?;
    let mut rows = Vec::new();
    let mut aborted = 0;
    for pt in &points {
        let scored = collect_scores(spec, pt, exec);
        for (j, rx) in spec.receivers.iter().enumerate() {
            let ok: Vec<ScoredTrial> = scored.iter().filter_map(|t| t[j].clone()).collect();
            aborted += spec.trials - ok.len();
            for (threshold, fpr, tpr, declared_active) in pool_roc(&ok, &spec.roc_thresholds) {
                rows.push(RocRow { sweep: pt.label.clone(), receiver: rx.to_string(), threshold, fpr, tpr, declared_active });
            }
        }
    }
    Ok(RocOutput { rows, calibration, aborted })
}

/// Header of the aggregate results table.
pub const RESULTS_HEADER: &str = "sweep,receiver,trials,uder,uder_se,nmse,nmse_se,aser,aser_se,wall_s";

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from(RESULTS_HEADER);
    s.push('\n');
    for r in rows {
        let wall = r.wall_s.map(|w| w.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.sweep, r.receiver, r.trials, r.uder, r.uder_se, r.nmse, r.nmse_se, r.aser, r.aser_se, wall
        );
    }
    s
}

pub fn trials_csv(records: &[TrialRecord]) -> String {
    let mut s = String::from("sweep,receiver,trial,seed,status,uder,nmse,aser,tpr,fpr,iterations\n");
    for r in records {
        match &r.outcome {
            Ok((m, it)) => {
                let _ = writeln!(
                    s,
                    "{},{},{},{},ok,{},{},{},{},{},{}",
                    r.sweep, r.receiver, r.trial, r.seed, m.uder, m.nmse, m.aser, m.tpr, m.fpr, it
                );
            }
            Err(msg) => {
                let msg = msg.replace([',', '\n'], ";");
                let _ = writeln!(s, "{},{},{},{},aborted: {msg},,,,,,", r.sweep, r.receiver, r.trial, r.seed);
            }
        }
    }
    s
}

pub fn roc_csv(rows: &[RocRow]) -> String {
    let mut s = String::from("sweep,receiver,threshold,fpr,tpr,declared_active\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.sweep, r.receiver, r.threshold, r.fpr, r.tpr, r.declared_active);
    }
    s
}

pub fn calibration_csv(entries: &[CalibrationEntry]) -> String {
    let mut s = String::from("sweep,receiver,parameter,value,calibration_uder\n");
    for e in entries {
        let _ = writeln!(s, "{},{},{},{},{}", e.sweep, e.receiver, e.parameter, e.value, e.uder);
    }
    s
}

/// Draws a training sample: a trial plus Baseline 1's starting point.
pub fn make_sample(cfg: &ScenarioConfig, pilots: &CMat, settings: &ReceiverSettings, seed: u64) -> Result<Sample> {
    let trial = draw_trial(cfg, pilots, seed)?;
    let obs = observation(cfg, &trial);
    let init = classical_init(&baseline1(&obs, settings)?, cfg.b());
    Ok(Sample { y: trial.rx.y(), x_p: trial.tx.x_p, h0: init.h, x0: init.x_d, x_true: trial.tx.x_d })
}

/// Classical starting values of the unfolded parameters, measured on
/// `count` calibration samples: the mean Lipschitz step and the mean
/// residual error variance at the starting point. For the posterior-mean
/// variant the error variance is then scaled by the best of
/// [`NE_INIT_FACTORS`] on those samples; at the raw estimate the
/// denoiser is close to a hard decision and passes almost no gradient.
pub fn default_unfolded(
    spec: &ExperimentSpec,
    variant: Variant,
    pilots: &CMat,
    count: usize,
    exec: Execution,
) -> Result<UnfoldedParams> {
    let cfg = &spec.scenario;
    let settings = &spec.settings;
    let bw = cfg.b();
    let samples: Vec<Sample> = map_indexed(count.max(1), exec, |i| {
        make_sample(cfg, pilots, settings, indexed_seed(spec.seed, Stream::Calibration, i as u64))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let stats: Vec<(f64, f64)> = map_indexed(samples.len(), exec, |i| {
        let s = &samples[i];
        let l = lipschitz_bound(&s.h0, &s.x0, &s.y, &s.x_p, 0.0, bw, 50);
        let res = crate::linalg::frob_sq(&residual(&s.h0, &s.x0, &s.y, &s.x_p));
        (0.9 / l, residual_per_gain_ne(res, cfg.mp(), cfg.r(), &s.h0))
    });
    let tau = pairwise_sum(&stats.iter().map(|s| s.0).collect::<Vec<_>>()) / stats.len() as f64;
    let ne = pairwise_sum(&stats.iter().map(|s| s.1).collect::<Vec<_>>()) / stats.len() as f64;
    let t_aud = settings.t_aud_for(Receiver::new(ReceiverKind::BoxFbs));
    let aud = if t_aud > 0.0 {
        crate::detection::AudParams { omega_h: 5.0 / t_aud, omega_x: 0.0, t_th: 5.0, l_bar: 0.5, t_aud }
    } else {
        crate::detection::AudParams::default()
    };
    let init = InitSpec {
        tau,
        eta: 0.5,
        lambda: 0.01,
        mu_h: settings.solver.mu_h,
        mu_x: settings.solver.mu_x,
        ne,
        rho: 3.49,
        nu: 2.46,
        aud,
    };
    let mut params = UnfoldedParams::initial(variant, spec.du_layers, cfg.r_d, &init);
    if variant == Variant::Poem {
        let mut best = (f64::INFINITY, params.clone());
        for f in NE_INIT_FACTORS {
            let mut p = params.clone();
            for l in &mut p.layers {
                l.ne = ne * f;
            }
            let loss = dunfold::mean_loss(&samples, &p, cfg.m, &cfg.constellation, exec)?;
            if loss < best.0 {
                best = (loss, p);
            }
        }
        params = best.1;
    }
    Ok(params)
}

/// Multiples of the residual error variance tried when initialising the
/// posterior-mean variant.
pub const NE_INIT_FACTORS: [f64; 4] = [1.0, 3.0, 10.0, 30.0];

/// Number of scenarios used to measure the classical starting values.
pub const INIT_SAMPLES: usize = 20;

/// Trains one unfolded receiver on the spec's scenario. Starts from
/// [`default_unfolded`] and finishes by calibrating the decision threshold.
pub fn train_unfolded(spec: &ExperimentSpec, variant: Variant, exec: Execution) -> Result<TrainReport> {
    spec.validate()?;
    let cfg = &spec.scenario;
    let pilots = generate_pilots(cfg, spec.seed)?;
    let params0 = default_unfolded(spec, variant, &pilots, INIT_SAMPLES, exec)?;
    let train_cfg = TrainConfig { seed: spec.seed, ..spec.train.clone() };
    let settings = &spec.settings;
    let mut report = dunfold::train(&params0, &train_cfg, cfg.m, &cfg.constellation, exec, |seed| {
        make_sample(cfg, &pilots, settings, seed)
    })?;
    if spec.calibration_trials > 0 {
        let rx = Receiver::new(match variant {
            Variant::Abc => ReceiverKind::DuAbc,
            Variant::Poem => ReceiverKind::DuPoem,
        });
        let mut s = ExperimentSpec { receivers: vec![rx], ..spec.clone() };
        match variant {
            Variant::Abc => s.settings.du_abc = Some(report.params.clone()),
            Variant::Poem => s.settings.du_poem = Some(report.params.clone()),
        }
        let mut settings = s.settings.clone();
        calibrate_point(&s, "", cfg, &pilots, &mut settings, exec)?;
        if let Some(p) = settings.unfolded(variant) {
            report.params.aud.l_bar = p.aud.l_bar;
        }
    }
    Ok(report)
}

pub fn training_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,train_loss,validation_loss,accepted\n");
    let _ = writeln!(s, "0,,{},true", report.initial_validation_loss);
    for r in &report.history {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.validation_loss, r.accepted);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_standard_error_by_hand() {
        let (m, se) = mean_se(&[0.1, 0.3]);
        assert!((m - 0.2).abs() < 1e-15);
        // sample std sqrt(0.02) over sqrt(2)
        assert!((se - 0.1).abs() < 1e-15);
        assert_eq!(mean_se(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn threshold_search_examples() {
        let (t, e) = min_error_threshold(&[0.1, 0.2, 5.0, 6.0], &[false, false, true, true], 0.0, 20.0);
        assert_eq!(e, 0);
        assert!((t - 2.6).abs() < 1e-12);
        let (t, e) = min_error_threshold(&[1.0, 2.0], &[true, true], 0.0, 10.0);
        assert_eq!((t, e), (0.0, 0));
        let (t, e) = min_error_threshold(&[1.0, 2.0], &[false, false], 0.0, 10.0);
        assert_eq!((t, e), (10.0, 0));
    }

    #[test]
    fn pooled_roc_counts() {
        let trials = vec![
            ScoredTrial { scores: vec![0.9, 0.2, 0.6], xi: vec![true, false, false] },
            ScoredTrial { scores: vec![0.4, 0.1], xi: vec![true, false] },
        ];
        let roc = pool_roc(&trials, &[0.0, 0.5, 1.0]);
        assert_eq!(roc[0], (0.0, 1.0, 1.0, 5));
        assert_eq!(roc[1], (0.5, 1.0 / 3.0, 0.5, 2));
        assert_eq!(roc[2], (1.0, 0.0, 0.0, 0));
    }

    fn record(trial: usize, uder: f64, nmse: f64, aser: f64) -> TrialRecord {
        let m = TrialMetrics { uder, nmse, aser, tpr: 1.0, fpr: 0.0, no_active: false, all_active: false };
        TrialRecord { sweep: String::new(), receiver: "stub".into(), trial, seed: trial as u64, outcome: Ok((m, 1)) }
    }

    #[test]
    fn single_trial_aggregate_is_the_trial() {
        let r = record(0, 0.04, 0.12, 0.03);
        let row = aggregate("", "stub", &[&r], None);
        assert_eq!((row.trials, row.uder, row.nmse, row.aser), (1, 0.04, 0.12, 0.03));
        assert_eq!((row.uder_se, row.nmse_se, row.aser_se), (0.0, 0.0, 0.0));
    }

    #[test]
    fn two_trial_aggregate_by_hand() {
        let a = record(0, 0.02, 0.1, 0.0);
        let b = record(1, 0.06, 0.3, 0.1);
        let mut aborted = record(2, 1.0, 1.0, 1.0);
        aborted.outcome = Err("diverged".into());
        let row = aggregate("", "stub", &[&a, &b, &aborted], None);
        assert_eq!((row.trials, row.aborted), (2, 1));
        // |a - b| / 2 for two samples
        for (m, se, want_m, want_se) in [
            (row.uder, row.uder_se, 0.04, 0.02),
            (row.nmse, row.nmse_se, 0.2, 0.1),
            (row.aser, row.aser_se, 0.05, 0.05),
        ] {
            assert!((m - want_m).abs() < 1e-15 && (se - want_se).abs() < 1e-15);
        }
    }

    #[test]
    fn oracle_scores_reach_the_corner() {
        let trials: Vec<ScoredTrial> = (0..5)
            .map(|t| {
                let xi: Vec<bool> = (0..10).map(|n| (n + t) % 3 == 0).collect();
                ScoredTrial { scores: xi.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect(), xi }
            })
            .collect();
        let roc = pool_roc(&trials, &[0.5, f64::NEG_INFINITY]);
        assert_eq!((roc[0].1, roc[0].2), (0.0, 1.0));
        assert_eq!((roc[1].1, roc[1].2, roc[1].3), (1.0, 1.0, 50));
    }

    #[test]
    fn random_scores_follow_the_diagonal() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let trials: Vec<ScoredTrial> = (0..400)
            .map(|_| ScoredTrial {
                scores: (0..50).map(|_| rng.random::<f64>()).collect(),
                xi: (0..50).map(|_| rng.random::<f64>() < 0.2).collect(),
            })
            .collect();
        let n_a = trials.iter().flat_map(|t| &t.xi).filter(|&&a| a).count() as f64;
        let n_i = 400.0 * 50.0 - n_a;
        for (th, fpr, tpr, _) in pool_roc(&trials, &uniform_grid(11)) {
            let p = 1.0 - th;
            let band = |n: f64| 3.0 * (p * (1.0 - p) / n).sqrt() + 1e-12;
            assert!((tpr - p).abs() <= band(n_a), "tpr {tpr} at {th}");
            assert!((fpr - p).abs() <= band(n_i), "fpr {fpr} at {th}");
        }
    }
}
