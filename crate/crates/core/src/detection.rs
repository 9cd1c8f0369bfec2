//! Activity decisions, symbol decisions and evaluation metrics.

use crate::error::{Error, Result};
use crate::linalg::{frob_sq, CMat, ZERO};
use crate::mathcore::{sigmoid, Constellation};

/// Column energies `||h_n||^2`.
pub fn column_energies(h: &CMat) -> Vec<f64> {
    h.column_iter().map(|c| c.iter().map(|z| z.norm_sqr()).sum()).collect()
}

/// Row energies `||x_n||^2`.
pub fn row_energies(x: &CMat) -> Vec<f64> {
    x.row_iter().map(|r| r.iter().map(|z| z.norm_sqr()).sum()).collect()
}

/// Energy-threshold activity decision `||h_n||^2 >= T`.
pub fn aud_energy(h_est: &CMat, t_aud: f64) -> Result<Vec<bool>> {
    if !(t_aud >= 0.0) {
        return Err(Error::invalid(format!("activity threshold must be >= 0, got {t_aud}")));
    }
    Ok(column_energies(h_est).into_iter().map(|e| e >= t_aud).collect())
}

/// Weights of the soft activity detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AudParams {
    pub omega_h: f64,
    pub omega_x: f64,
    pub t_th: f64,
    /// Decision threshold applied to the soft scores.
    pub l_bar: f64,
    /// Energy threshold of the classical channel-energy rule.
    pub t_aud: f64,
}

impl Default for AudParams {
    fn default() -> Self {
        AudParams { omega_h: 1.0, omega_x: 0.0, t_th: 0.0, l_bar: 0.5, t_aud: 0.0 }
    }
}

/// Logit `omega_h ||h_n||^2 + omega_x ||x_n||^2 - T_th` of every UE.
pub fn aud_logits(h_est: &CMat, x_est: &CMat, ap: &AudParams) -> Vec<f64> {
    column_energies(h_est)
        .into_iter()
        .zip(row_energies(x_est))
        .map(|(eh, ex)| ap.omega_h * eh + ap.omega_x * ex - ap.t_th)
        .collect()
}

/// Soft activity scores in `[0, 1]`.
pub fn aud_soft(h_est: &CMat, x_est: &CMat, ap: &AudParams) -> Vec<f64> {
    aud_logits(h_est, x_est, ap).into_iter().map(sigmoid).collect()
}

/// Decision `L_n > l_bar` on soft scores.
pub fn aud_from_scores(scores: &[f64], l_bar: f64) -> Vec<bool> {
    scores.iter().map(|&l| l > l_bar).collect()
}

/// Entry-wise nearest constellation symbol.
pub fn hard_decide(x_est: &CMat, q: &Constellation) -> CMat {
    x_est.map(|z| q.nearest(z))
}

/// Zero the rows of inactive UEs.
pub fn mask_activity(x: &CMat, xi_hat: &[bool]) -> Result<CMat> {
    if xi_hat.len() != x.nrows() {
        return Err(Error::dims(format!("{} activity flags for {} rows", xi_hat.len(), x.nrows())));
    }
    let mut out = x.clone();
    for (n, &a) in xi_hat.iter().enumerate() {
        if !a {
            out.row_mut(n).fill(ZERO);
        }
    }
    Ok(out)
}

/// Zero the columns of inactive UEs.
pub fn mask_columns(h: &CMat, xi_hat: &[bool]) -> Result<CMat> {
    if xi_hat.len() != h.ncols() {
        return Err(Error::dims(format!("{} activity flags for {} columns", xi_hat.len(), h.ncols())));
    }
    let mut out = h.clone();
    for (n, &a) in xi_hat.iter().enumerate() {
        if !a {
            out.column_mut(n).fill(ZERO);
        }
    }
    Ok(out)
}

/// Decisions of one receiver on one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub xi_hat: Vec<bool>,
    /// Soft scores (or channel energies for energy-based receivers).
    pub scores: Vec<f64>,
    /// Nearest-symbol decisions before masking.
    pub xd_hard: CMat,
    /// Hard decisions with inactive rows zeroed.
    pub xd_masked: CMat,
}

impl DetectionResult {
    pub fn new(xi_hat: Vec<bool>, scores: Vec<f64>, xd_est: &CMat, q: &Constellation) -> Result<Self> {
        let xd_hard = hard_decide(xd_est, q);
        let xd_masked = mask_activity(&xd_hard, &xi_hat)?;
        Ok(DetectionResult { xi_hat, scores, xd_hard, xd_masked })
    }
}

/// Per-trial metrics. `tpr` is the detection rate among truly active UEs,
/// `fpr` the false-alarm rate among truly inactive UEs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrialMetrics {
    pub uder: f64,
    pub nmse: f64,
    pub aser: f64,
    pub tpr: f64,
    pub fpr: f64,
    /// No UE was active; ASER and TPR are reported as 0.
    pub no_active: bool,
    /// Every UE was active; FPR is reported as 0.
    pub all_active: bool,
}

/// Ground truth of one trial.
#[derive(Debug, Clone, Copy)]
pub struct Truth<'a> {
    pub xi: &'a [bool],
    pub h: &'a CMat,
    pub x_d: &'a CMat,
}

pub fn compute_metrics(truth: Truth<'_>, result: &DetectionResult, h_est: &CMat) -> Result<TrialMetrics> {
    let n = truth.xi.len();
    if result.xi_hat.len() != n || truth.x_d.shape() != result.xd_hard.shape() || truth.h.shape() != h_est.shape() {
        return Err(Error::dims("truth and estimates disagree in shape"));
    }
    let n_a = truth.xi.iter().filter(|&&a| a).count();
    let errors = truth.xi.iter().zip(&result.xi_hat).filter(|(a, b)| a != b).count();
    let hits = truth.xi.iter().zip(&result.xi_hat).filter(|(&a, &b)| a && b).count();
    let false_alarms = truth.xi.iter().zip(&result.xi_hat).filter(|(&a, &b)| !a && b).count();

    let h_energy = frob_sq(truth.h);
    let nmse = if h_energy > 0.0 {
        frob_sq(&(truth.h - h_est)) / h_energy
    } else if frob_sq(h_est) == 0.0 {
        0.0
    } else {
        1.0
    };

    let rd = truth.x_d.ncols();
    let mut wrong = 0usize;
    for i in (0..n).filter(|&i| truth.xi[i]) {
        for r in 0..rd {
            if truth.x_d[(i, r)] != result.xd_hard[(i, r)] {
                wrong += 1;
            }
        }
    }
    let aser = if n_a > 0 && rd > 0 { wrong as f64 / (rd * n_a) as f64 } else { 0.0 };
    Ok(TrialMetrics {
        uder: errors as f64 / n as f64,
        nmse,
        aser,
        tpr: if n_a > 0 { hits as f64 / n_a as f64 } else { 0.0 },
        fpr: if n_a < n { false_alarms as f64 / (n - n_a) as f64 } else { 0.0 },
        no_active: n_a == 0,
        all_active: n_a == n,
    })
}

/// How scores are compared with a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparison {
    /// `score > threshold` (soft scores).
    Greater,
    /// `score >= threshold` (channel energies).
    GreaterEq,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub declared_active: usize,
}

/// One operating point per threshold.
pub fn roc_sweep(scores: &[f64], xi: &[bool], thresholds: &[f64], cmp: Comparison) -> Result<Vec<RocPoint>> {
    if scores.len() != xi.len() {
        return Err(Error::dims("scores and truth differ in length"));
    }
    let n_a = xi.iter().filter(|&&a| a).count();
    let n_i = xi.len() - n_a;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let mut hits = 0;
            let mut fa = 0;
            for (&s, &a) in scores.iter().zip(xi) {
                let on = match cmp {
                    Comparison::Greater => s > t,
                    Comparison::GreaterEq => s >= t,
                };
                if on {
                    if a {
                        hits += 1;
                    } else {
                        fa += 1;
                    }
                }
            }
            RocPoint {
                threshold: t,
                tpr: if n_a > 0 { hits as f64 / n_a as f64 } else { 0.0 },
                fpr: if n_i > 0 { fa as f64 / n_i as f64 } else { 0.0 },
                declared_active: hits + fa,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::C64;

    #[test]
    fn energy_detector_examples() {
        let mut h = CMat::zeros(2, 2);
        h[(0, 0)] = C64::new(0.1f64.sqrt(), 0.0);
        h[(1, 1)] = C64::new(0.0, 5f64.sqrt());
        assert_eq!(aud_energy(&h, 1.0).unwrap(), vec![false, true]);
        assert_eq!(aud_energy(&h, 0.0).unwrap(), vec![true, true]);
        assert_eq!(aud_energy(&CMat::zeros(3, 2), 0.5).unwrap(), vec![false, false]);
        assert!(aud_energy(&h, -1.0).is_err());
    }

    #[test]
    fn soft_detector_examples() {
        let h = CMat::from_element(2, 3, C64::new(1.0, 0.0));
        let x = CMat::from_element(3, 2, C64::new(0.5, 0.5));
        let zero = AudParams { omega_h: 0.0, omega_x: 0.0, t_th: 0.0, ..Default::default() };
        assert!(aud_soft(&h, &x, &zero).iter().all(|&l| l == 0.5));
        // omega_h * 2 + omega_x * 1 - t_th = 0
        let ap = AudParams { omega_h: 1.0, omega_x: 1.0, t_th: 3.0, ..Default::default() };
        assert!(aud_soft(&h, &x, &ap).iter().all(|&l| l == 0.5));
        let big = AudParams { omega_h: 1e3, ..zero };
        assert!(aud_soft(&h, &x, &big).iter().all(|&l| l > 1.0 - 1e-12));
    }

    #[test]
    fn hard_decisions_and_masking() {
        let q = Constellation::qpsk();
        let b = q.half_width();
        let x = CMat::from_row_slice(2, 2, &[C64::new(b, -b), ZERO, C64::new(-0.1, 0.3), C64::new(2.0, 2.0)]);
        let d = hard_decide(&x, &q);
        assert_eq!(d[(0, 0)], C64::new(b, -b));
        assert_eq!(d[(0, 1)], C64::new(b, b));
        assert_eq!(d[(1, 0)], C64::new(-b, b));
        assert_eq!(hard_decide(&d, &q), d);
        assert_eq!(mask_activity(&d, &[true, true]).unwrap(), d);
        assert!(mask_activity(&d, &[false, false]).unwrap().iter().all(|z| *z == ZERO));
        let m = mask_activity(&d, &[false, true]).unwrap();
        assert!(m.row(0).iter().all(|z| *z == ZERO));
        assert_eq!(m.row(1), d.row(1));
    }

    #[test]
    fn hand_built_metrics() {
        let q = Constellation::qpsk();
        let p = q.points();
        let xi = [true, true, false, false];
        let h = CMat::from_element(2, 4, C64::new(1.0, 0.0));
        let mut x = CMat::zeros(4, 4);
        for r in 0..4 {
            x[(0, r)] = p[0];
            x[(1, r)] = p[1];
        }
        let mut est = x.clone();
        est[(0, 0)] = p[3];
        est[(1, 1)] = p[2];
        est[(1, 2)] = p[0];
        // UE 1 missed, UE 2 false alarm
        let det = DetectionResult::new(vec![true, false, true, false], vec![0.0; 4], &est, &q).unwrap();
        let m = compute_metrics(Truth { xi: &xi, h: &h, x_d: &x }, &det, &h).unwrap();
        assert_eq!(m.uder, 0.5);
        assert_eq!(m.aser, 3.0 / 8.0);
        assert_eq!(m.nmse, 0.0);
        assert_eq!(m.tpr, 0.5);
        assert_eq!(m.fpr, 0.5);
        let m0 = compute_metrics(Truth { xi: &xi, h: &h, x_d: &x }, &det, &CMat::zeros(2, 4)).unwrap();
        assert_eq!(m0.nmse, 1.0);
    }

    #[test]
    fn roc_extremes() {
        let xi = [true, false, true, false];
        let s = [1.0, 0.0, 1.0, 0.0];
        let pts = roc_sweep(&s, &xi, &[-1.0, 0.5, 2.0], Comparison::Greater).unwrap();
        assert_eq!((pts[0].tpr, pts[0].fpr), (1.0, 1.0));
        assert_eq!((pts[1].tpr, pts[1].fpr), (1.0, 0.0));
        assert_eq!((pts[2].tpr, pts[2].fpr), (0.0, 0.0));
    }
}
