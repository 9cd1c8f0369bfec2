//! Reference receivers: sparse channel estimation followed by least-squares
//! (Baseline 1) or linear MMSE (Baseline 3) detection, and unboxed joint FBS
//! (Baseline 5).

use crate::detection::{aud_energy, mask_columns};
use crate::error::{Error, Result};
use crate::linalg::{mul, mul_ah_b, pinv, CMat, C64};
use crate::solvers::{run_box_fbs, FbsState, SolverParams, StepRule};

/// Relative singular-value cut-off of the least-squares detector.
pub const PINV_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineVariant {
    B1,
    B3,
    B5,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub variant: BaselineVariant,
    /// Iteration cap of the inner FBS.
    pub k_iter: usize,
    pub tol: f64,
    pub mu_h: f64,
    pub step: StepRule,
    /// Energy threshold of the activity decision.
    pub t_aud: f64,
    /// Symbol prior variance of the MMSE detector.
    pub prior_var: f64,
    /// Noise variance seen by the MMSE detector.
    pub noise_var: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            variant: BaselineVariant::B1,
            k_iter: 200,
            tol: 1e-3,
            mu_h: 0.0,
            step: StepRule::default(),
            t_aud: 0.0,
            prior_var: 1.0,
            noise_var: 1.0,
        }
    }
}

/// FBS on `1/2 ||Y_P - H X_P||^2 + mu_h sum ||h_{n,p}||`, started from zero.
pub fn fbs_channel_estimate(
    y_p: &CMat,
    x_p: &CMat,
    mu_h: f64,
    m: usize,
    k_iter: usize,
    tol: f64,
    step: &StepRule,
) -> Result<FbsState> {
    let n = x_p.nrows();
    let params = SolverParams {
        mu_h,
        mu_x: 0.0,
        lambda: 0.0,
        step: step.clone(),
        k_max: k_iter,
        tol,
        half_width: f64::INFINITY,
        ..Default::default()
    };
    let init = FbsState::new(CMat::zeros(y_p.nrows(), n), CMat::zeros(n, 0));
    run_box_fbs(y_p, x_p, &params, m, init)
}

fn active_indices(xi_hat: &[bool]) -> Vec<usize> {
    xi_hat.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect()
}

fn active_submatrix(h: &CMat, idx: &[usize]) -> CMat {
    CMat::from_fn(h.nrows(), idx.len(), |i, j| h[(i, idx[j])])
}

fn scatter_rows(rows: &CMat, idx: &[usize], n: usize) -> CMat {
    let mut out = CMat::zeros(n, rows.ncols());
    for (j, &i) in idx.iter().enumerate() {
        out.set_row(i, &rows.row(j));
    }
    out
}

fn check(y_d: &CMat, h: &CMat, xi_hat: &[bool]) -> Result<()> {
    if y_d.nrows() != h.nrows() || xi_hat.len() != h.ncols() {
        return Err(Error::dims("Y_D, H and activity flags disagree"));
    }
    Ok(())
}

/// Least-squares data estimate on the detected-active columns; the flag
/// reports a rank-deficient active submatrix.
pub fn ls_detect(y_d: &CMat, h: &CMat, xi_hat: &[bool]) -> Result<(CMat, bool)> {
    check(y_d, h, xi_hat)?;
    let idx = active_indices(xi_hat);
    if idx.is_empty() {
        return Ok((CMat::zeros(h.ncols(), y_d.ncols()), false));
    }
    let a = active_submatrix(h, &idx);
    let (a_pinv, deficient) = pinv(&a, PINV_REL_TOL);
    Ok((scatter_rows(&mul(&a_pinv, y_d), &idx, h.ncols()), deficient))
}

/// Linear MMSE estimate `(A^H A + (noise/prior) I)^-1 A^H Y_D` on the
/// detected-active columns.
pub fn mmse_detect(y_d: &CMat, h: &CMat, xi_hat: &[bool], noise_var: f64, prior_var: f64) -> Result<CMat> {
    check(y_d, h, xi_hat)?;
    if !(noise_var >= 0.0 && prior_var >= 0.0) {
        return Err(Error::invalid("variances must be non-negative"));
    }
    let idx = active_indices(xi_hat);
    if idx.is_empty() || prior_var == 0.0 {
        return Ok(CMat::zeros(h.ncols(), y_d.ncols()));
    }
    let a = active_submatrix(h, &idx);
    let mut gram = mul_ah_b(&a, &a);
    let ridge = noise_var / prior_var;
    for i in 0..gram.nrows() {
        gram[(i, i)] += C64::from(ridge);
    }
    let rhs = mul_ah_b(&a, y_d);
    let sol = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => mul(&pinv(&gram, PINV_REL_TOL).0, &rhs),
    };
    Ok(scatter_rows(&sol, &idx, h.ncols()))
}

/// Output of Baselines 1 and 3.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparateOutput {
    /// Channel estimate before masking.
    pub h_tmp: CMat,
    pub xi_hat: Vec<bool>,
    /// Masked channel estimate.
    pub h: CMat,
    /// Soft data estimate.
    pub x_d: CMat,
    pub rank_deficient: bool,
    pub channel_iterations: usize,
}

/// Channel estimation on pilots, energy-based activity decision, column
/// masking, then LS (B1) or LMMSE (B3) detection.
pub fn separate_receiver(y_p: &CMat, y_d: &CMat, x_p: &CMat, m: usize, cfg: &BaselineConfig) -> Result<SeparateOutput> {
    let est = fbs_channel_estimate(y_p, x_p, cfg.mu_h, m, cfg.k_iter, cfg.tol, &cfg.step)?;
    let xi_hat = aud_energy(&est.h, cfg.t_aud)?;
    let h = mask_columns(&est.h, &xi_hat)?;
    let (x_d, rank_deficient) = match cfg.variant {
        BaselineVariant::B3 => (mmse_detect(y_d, &h, &xi_hat, cfg.noise_var, cfg.prior_var)?, false),
        _ => ls_detect(y_d, &h, &xi_hat)?,
    };
    Ok(SeparateOutput { h_tmp: est.h, xi_hat, h, x_d, rank_deficient, channel_iterations: est.iteration })
}

/// Joint FBS without the box and without the regularizer.
pub fn baseline5_jacd(y: &CMat, x_p: &CMat, params: &SolverParams, m: usize, init: FbsState) -> Result<FbsState> {
    let params = SolverParams { lambda: 0.0, half_width: f64::INFINITY, ..params.clone() };
    run_box_fbs(y, x_p, &params, m, init)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frob_sq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rmat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> CMat {
        CMat::from_fn(r, c, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn zero_pilots_observation_gives_zero_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x_p = rmat(3, 4, &mut rng);
        let est = fbs_channel_estimate(&CMat::zeros(8, 4), &x_p, 0.1, 4, 50, 1e-3, &StepRule::default()).unwrap();
        assert!(est.h.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn ls_exact_on_consistent_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = rmat(8, 3, &mut rng);
        let x = rmat(3, 5, &mut rng);
        let y = mul(&h, &x);
        let (est, def) = ls_detect(&y, &h, &[true; 3]).unwrap();
        assert!(!def);
        assert!(frob_sq(&(est - x)) < 1e-20);
        let (z, _) = ls_detect(&y, &h, &[false; 3]).unwrap();
        assert!(z.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn mmse_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = rmat(8, 3, &mut rng);
        let y = rmat(8, 5, &mut rng);
        let xi = [true, false, true];
        let (ls, _) = ls_detect(&y, &h, &xi).unwrap();
        let near = mmse_detect(&y, &h, &xi, 1e-12, 1.0).unwrap();
        assert!(frob_sq(&(&near - &ls)) < 1e-18);
        assert!(mmse_detect(&y, &h, &xi, 1.0, 0.0).unwrap().iter().all(|v| v.norm() == 0.0));
        let ridge = mmse_detect(&y, &h, &xi, 1.0, 1.0).unwrap();
        assert!(frob_sq(&ridge) <= frob_sq(&ls));
    }
}
