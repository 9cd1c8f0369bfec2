//! Classical joint estimators: box-constrained forward-backward splitting
//! and its posterior-mean-denoised variant.
//!
//! The iterate is `S = [H; X_D]`. Gradients use the real-gradient convention
//! (`d/dRe + i d/dIm`), so `S - tau * grad` is a descent step.

use crate::error::{Error, Result};
use crate::linalg::{frob_sq, mul, mul_a_bh, mul_ah_b, spectral_norm_sq, spectral_norm_sq_rows, CMat, C64};
use crate::mathcore::{clamp_scalar, prox_box_group, pme_decoupled, pme_exact, shrink_in_place, Constellation, NormMode};

/// Objective value beyond which a run is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Iterate of the classical solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct FbsState {
    /// `MP x N` channel estimate.
    pub h: CMat,
    /// `N x R_D` data estimate.
    pub x_d: CMat,
    /// Completed iterations.
    pub iteration: usize,
    /// Objective after each completed iteration (entry 0 is the start).
    pub objective_trace: Vec<f64>,
}

impl FbsState {
    pub fn new(h: CMat, x_d: CMat) -> Self {
        FbsState { h, x_d, iteration: 0, objective_trace: Vec::new() }
    }
}

/// Step-size rule for the forward step.
#[derive(Debug, Clone, PartialEq)]
pub enum StepRule {
    /// `scale / L` with `L` a local Lipschitz bound of the smooth part,
    /// re-estimated every `refresh` iterations.
    Lipschitz { scale: f64, power_iters: usize, refresh: usize },
    Fixed(f64),
    /// Per-iteration steps; the last one repeats.
    Schedule(Vec<f64>),
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule::Lipschitz { scale: 0.9, power_iters: 50, refresh: 10 }
    }
}

/// Penalty shaping `X_D` towards the constellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Regularizer {
    /// `C(X) = -||X o X* - B^2 1||_F^2`.
    #[default]
    Quartic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverParams {
    pub mu_h: f64,
    pub mu_x: f64,
    pub lambda: f64,
    pub step: StepRule,
    /// Maximum number of iterations.
    pub k_max: usize,
    /// Relative Frobenius change of `S` below which the run stops.
    pub tol: f64,
    /// Box half-width; `f64::INFINITY` removes the box.
    pub half_width: f64,
    pub regularizer: Regularizer,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            mu_h: 0.0,
            mu_x: 0.0,
            lambda: 0.0,
            step: StepRule::default(),
            k_max: 200,
            tol: 1e-3,
            half_width: 0.5f64.sqrt(),
            regularizer: Regularizer::Quartic,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_h >= 0.0 && self.mu_x >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::invalid("mu_h, mu_x and lambda must be non-negative"));
        }
        if !(self.half_width > 0.0) {
            return Err(Error::invalid("box half-width must be positive"));
        }
        if self.lambda > 0.0 && !self.half_width.is_finite() {
            return Err(Error::invalid("the regularizer needs a finite box"));
        }
        match &self.step {
            StepRule::Lipschitz { scale, refresh, .. } if !(*scale > 0.0) || *refresh == 0 => {
                Err(Error::invalid("Lipschitz step needs scale > 0 and refresh >= 1"))
            }
            StepRule::Fixed(t) if !(*t >= 0.0) => Err(Error::invalid("step size must be non-negative")),
            StepRule::Schedule(s) if s.is_empty() || s.iter().any(|t| !(*t >= 0.0)) => {
                Err(Error::invalid("step schedule must be non-empty and non-negative"))
            }
            _ => Ok(()),
        }
    }
}

fn check_dims(h: &CMat, x_d: &CMat, y: &CMat, x_p: &CMat) -> Result<()> {
    let (mp, n) = h.shape();
    if x_p.nrows() != n || x_d.nrows() != n {
        return Err(Error::dims(format!("H has {n} columns; X_P has {} rows, X_D {}", x_p.nrows(), x_d.nrows())));
    }
    if y.nrows() != mp || y.ncols() != x_p.ncols() + x_d.ncols() {
        return Err(Error::dims(format!(
            "Y is {}x{}, expected {mp}x{}",
            y.nrows(),
            y.ncols(),
            x_p.ncols() + x_d.ncols()
        )));
    }
    Ok(())
}

/// `X = [X_P, X_D]`.
pub(crate) fn stack_x(x_p: &CMat, x_d: &CMat) -> CMat {
    crate::linalg::hcat(x_p, x_d)
}

/// Residual `Y - H [X_P, X_D]`.
pub fn residual(h: &CMat, x_d: &CMat, y: &CMat, x_p: &CMat) -> CMat {
    y - mul(h, &stack_x(x_p, x_d))
}

/// Value of the quartic regularizer.
pub fn regularizer_value(x_d: &CMat, half_width: f64) -> f64 {
    let b2 = half_width * half_width;
    -x_d.iter().map(|z| (z.norm_sqr() - b2).powi(2)).sum::<f64>()
}

/// Real gradient of the quartic regularizer, `-4 X o (|X|^2 - B^2)`.
pub fn regularizer_gradient(x_d: &CMat, half_width: f64) -> CMat {
    let b2 = half_width * half_width;
    x_d.map(|z| z * (-4.0 * (z.norm_sqr() - b2)))
}

/// Smooth part `1/2 ||Y - H X||^2 + lambda C(X_D)`.
pub fn smooth_objective(h: &CMat, x_d: &CMat, y: &CMat, x_p: &CMat, lambda: f64, half_width: f64) -> f64 {
    let fid = 0.5 * frob_sq(&residual(h, x_d, y, x_p));
    if lambda == 0.0 {
        fid
    } else {
        fid + lambda * regularizer_value(x_d, half_width)
    }
}

/// Gradients of the smooth part with respect to `H` and `X_D`.
pub fn gradient_f(
    h: &CMat,
    x_d: &CMat,
    y: &CMat,
    x_p: &CMat,
    lambda: f64,
    half_width: f64,
) -> Result<(CMat, CMat)> {
    check_dims(h, x_d, y, x_p)?;
    let x = stack_x(x_p, x_d);
    let e = y - mul(h, &x);
    let grad_h = -mul_a_bh(&e, &x);
    let e_d = e.columns(x_p.ncols(), x_d.ncols()).into_owned();
    let mut grad_x = -mul_ah_b(h, &e_d);
    if lambda != 0.0 {
        grad_x += regularizer_gradient(x_d, half_width) * C64::from(lambda);
    }
    Ok((grad_h, grad_x))
}

/// Forward (gradient) step `S - tau grad f(S)`.
pub fn fbs_forward(
    h: &CMat,
    x_d: &CMat,
    y: &CMat,
    x_p: &CMat,
    tau: f64,
    lambda: f64,
    half_width: f64,
) -> Result<(CMat, CMat)> {
    let (gh, gx) = gradient_f(h, x_d, y, x_p, lambda, half_width)?;
    let t = C64::from(tau);
    Ok((h - gh * t, x_d - gx * t))
}

/// Blockwise group shrinkage of every `M`-long sub-column of `H`.
pub fn backward_h(h_hat: &CMat, kappa: f64, m: usize) -> Result<CMat> {
    backward_h_with(h_hat, kappa, m, NormMode::Exact)
}

pub fn backward_h_with(h_hat: &CMat, kappa: f64, m: usize, mode: NormMode) -> Result<CMat> {
    if !(kappa >= 0.0) {
        return Err(Error::invalid(format!("shrinkage threshold must be >= 0, got {kappa}")));
    }
    if m == 0 || h_hat.nrows() % m != 0 {
        return Err(Error::dims(format!("{} rows are not a multiple of block length {m}", h_hat.nrows())));
    }
    let mut h = h_hat.clone();
    for block in h.as_mut_slice().chunks_mut(m) {
        shrink_in_place(block, kappa, mode);
    }
    Ok(h)
}

fn row(x: &CMat, n: usize) -> Vec<C64> {
    x.row(n).iter().copied().collect()
}

/// Row-wise box-constrained group prox.
pub fn backward_xd_box(x_hat: &CMat, kappa: f64, half_width: f64) -> Result<CMat> {
    if !(kappa >= 0.0) {
        return Err(Error::invalid(format!("shrinkage threshold must be >= 0, got {kappa}")));
    }
    let mut out = CMat::zeros(x_hat.nrows(), x_hat.ncols());
    for n in 0..x_hat.nrows() {
        let r = if half_width.is_finite() {
            prox_box_group(&row(x_hat, n), kappa, half_width)
        } else {
            crate::mathcore::group_shrinkage(&row(x_hat, n), kappa)?
        };
        for (j, z) in r.into_iter().enumerate() {
            out[(n, j)] = z;
        }
    }
    Ok(out)
}

/// Row-wise posterior mean under the activity-mixed prior, via the
/// factorised form.
pub fn backward_xd_pme(x_hat: &CMat, q: &Constellation, alpha: f64, ne: f64) -> Result<CMat> {
    backward_rows(x_hat, |r| pme_decoupled(r, q, alpha, ne))
}

/// Row-wise posterior mean by direct enumeration (small `R_D` only).
pub fn backward_xd_pme_enumerated(x_hat: &CMat, q: &Constellation, alpha: f64, ne: f64) -> Result<CMat> {
    backward_rows(x_hat, |r| pme_exact(r, q, alpha, ne))
}

fn backward_rows(x_hat: &CMat, f: impl Fn(&[C64]) -> Result<Vec<C64>>) -> Result<CMat> {
    let mut out = CMat::zeros(x_hat.nrows(), x_hat.ncols());
    for n in 0..x_hat.nrows() {
        for (j, z) in f(&row(x_hat, n))?.into_iter().enumerate() {
            out[(n, j)] = z;
        }
    }
    Ok(out)
}

/// Sum of the Frobenius norms of all `M`-long blocks of the columns of `H`.
pub fn block_norm_sum(h: &CMat, m: usize) -> f64 {
    h.as_slice().chunks(m).map(|b| b.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()).sum()
}

/// Sum of the row norms of `X_D`.
pub fn row_norm_sum(x: &CMat) -> f64 {
    x.row_iter().map(|r| r.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()).sum()
}

/// Full objective: fidelity, group penalties and regularizer.
pub fn objective_p2(h: &CMat, x_d: &CMat, y: &CMat, x_p: &CMat, params: &SolverParams, m: usize) -> f64 {
    let mut v = smooth_objective(h, x_d, y, x_p, params.lambda, params.half_width);
    if params.mu_h != 0.0 {
        v += params.mu_h * block_norm_sum(h, m);
    }
    if params.mu_x != 0.0 {
        v += params.mu_x * row_norm_sum(x_d);
    }
    v
}

/// Local Lipschitz bound of the smooth gradient at `(H, X_D)`:
/// `||X||^2 + ||H||^2 + ||E_D||` plus the regularizer curvature bound
/// `20 lambda B^2` on the box.
pub fn lipschitz_bound(
    h: &CMat,
    x_d: &CMat,
    y: &CMat,
    x_p: &CMat,
    lambda: f64,
    half_width: f64,
    power_iters: usize,
) -> f64 {
    let x = stack_x(x_p, x_d);
    let e_d = residual(h, x_d, y, x_p).columns(x_p.ncols(), x_d.ncols()).into_owned();
    let mut l = spectral_norm_sq_rows(&x, power_iters)
        + spectral_norm_sq(h, power_iters)
        + spectral_norm_sq(&e_d, power_iters).sqrt();
    if lambda > 0.0 {
        l += 20.0 * lambda * half_width * half_width;
    }
    l
}

/// Supplies the step size of iteration `k` (0-based).
struct Stepper<'a> {
    rule: &'a StepRule,
    cached: f64,
}

impl<'a> Stepper<'a> {
    fn new(rule: &'a StepRule) -> Self {
        Stepper { rule, cached: 0.0 }
    }

    fn step(&mut self, k: usize, lip: impl FnOnce(usize) -> f64) -> f64 {
        match self.rule {
            StepRule::Fixed(t) => *t,
            StepRule::Schedule(s) => s[k.min(s.len() - 1)],
            StepRule::Lipschitz { scale, power_iters, refresh } => {
                if k % refresh == 0 {
                    let l = lip(*power_iters);
                    self.cached = if l > 0.0 && l.is_finite() { scale / l } else { 0.0 };
                }
                self.cached
            }
        }
    }
}

fn relative_change(h0: &CMat, x0: &CMat, h1: &CMat, x1: &CMat) -> f64 {
    let num = frob_sq(&(h1 - h0)) + frob_sq(&(x1 - x0));
    let den = frob_sq(h0) + frob_sq(x0);
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}

fn check_objective(v: f64, iteration: usize) -> Result<()> {
    if !v.is_finite() || v > DIVERGENCE_LIMIT {
        return Err(Error::Diverged { iteration, objective: v });
    }
    Ok(())
}

/// Generic FBS loop; `backward_x` maps `(X_hat, tau, k, residual energy,
/// current H)` to the new `X_D`.
fn run_fbs(
    y: &CMat,
    x_p: &CMat,
    params: &SolverParams,
    m: usize,
    init: FbsState,
    mut backward_x: impl FnMut(&CMat, f64, usize, f64, &CMat) -> Result<CMat>,
) -> Result<FbsState> {
    params.validate()?;
    check_dims(&init.h, &init.x_d, y, x_p)?;
    let mut state = init;
    state.iteration = 0;
    let f0 = objective_p2(&state.h, &state.x_d, y, x_p, params, m);
    check_objective(f0, 0)?;
    state.objective_trace = vec![f0];
    let mut stepper = Stepper::new(&params.step);
    let bw = params.half_width;
    for k in 0..params.k_max {
        let tau = stepper.step(k, |it| lipschitz_bound(&state.h, &state.x_d, y, x_p, params.lambda, bw, it));
        let (h_hat, x_hat) = fbs_forward(&state.h, &state.x_d, y, x_p, tau, params.lambda, bw)?;
        let h_next = backward_h(&h_hat, tau * params.mu_h, m)?;
        let res = frob_sq(&residual(&state.h, &state.x_d, y, x_p));
        let x_next = backward_x(&x_hat, tau, k, res, &state.h)?;
        let change = relative_change(&state.h, &state.x_d, &h_next, &x_next);
        state.h = h_next;
        state.x_d = x_next;
        state.iteration = k + 1;
        let f = objective_p2(&state.h, &state.x_d, y, x_p, params, m);
        check_objective(f, k + 1)?;
        state.objective_trace.push(f);
        if change < params.tol {
            break;
        }
    }
    Ok(state)
}

/// Box-constrained forward-backward splitting.
pub fn run_box_fbs(y: &CMat, x_p: &CMat, params: &SolverParams, m: usize, init: FbsState) -> Result<FbsState> {
    let bw = params.half_width;
    let mu_x = params.mu_x;
    run_fbs(y, x_p, params, m, init, |x_hat, tau, _, _, _| backward_xd_box(x_hat, tau * mu_x, bw))
}

/// Error-variance rule of the posterior-mean denoiser.
#[derive(Debug, Clone, PartialEq)]
pub enum NeRule {
    Constant(f64),
    /// Per-iteration values; the last one repeats.
    Schedule(Vec<f64>),
    /// `||Y - H X||^2 / (MP R)` at the current iterate.
    Residual,
    /// The residual estimate divided by the mean energy of the non-zero
    /// columns of `H`, i.e. the per-symbol error variance of a matched
    /// filter for a typical active UE.
    ResidualPerGain,
}

/// Floor applied to residual-based error variances.
pub const NE_FLOOR: f64 = 1e-6;

/// Residual-based estimate `||Y - H X||^2 / (MP R)`.
pub fn residual_ne(residual_energy: f64, mp: usize, r: usize) -> f64 {
    (residual_energy / (mp * r) as f64).max(NE_FLOOR)
}

/// [`residual_ne`] scaled by the inverse mean energy of the non-zero
/// columns of `h`; falls back to [`residual_ne`] when `h` is zero.
pub fn residual_per_gain_ne(residual_energy: f64, mp: usize, r: usize, h: &CMat) -> f64 {
    let energies: Vec<f64> = h.column_iter().map(|c| c.iter().map(|z| z.norm_sqr()).sum::<f64>()).filter(|&e| e > 0.0).collect();
    let base = residual_ne(residual_energy, mp, r);
    if energies.is_empty() {
        return base;
    }
    let mean = energies.iter().sum::<f64>() / energies.len() as f64;
    (base / mean).max(NE_FLOOR)
}

/// Forward-backward splitting with the posterior-mean denoiser in place of
/// the data prox. The regularizer is disabled.
pub fn run_pme_jacd(
    y: &CMat,
    x_p: &CMat,
    params: &SolverParams,
    m: usize,
    q: &Constellation,
    alpha: f64,
    ne: &NeRule,
    init: FbsState,
) -> Result<FbsState> {
    let params = SolverParams { lambda: 0.0, half_width: q.half_width(), ..params.clone() };
    let (mp, r) = (y.nrows(), y.ncols());
    run_fbs(y, x_p, &params, m, init, |x_hat, _, k, res, h| {
        let v = match ne {
            NeRule::Constant(v) => *v,
            NeRule::Schedule(s) if !s.is_empty() => s[k.min(s.len() - 1)],
            NeRule::Schedule(_) => return Err(Error::invalid("empty error-variance schedule")),
            NeRule::Residual => residual_ne(res, mp, r),
            NeRule::ResidualPerGain => residual_per_gain_ne(res, mp, r, h),
        };
        backward_xd_pme(x_hat, q, alpha, v)
    })
}

/// Element-wise clamp of a matrix to the box.
pub fn clamp_matrix(x: &CMat, half_width: f64) -> CMat {
    x.map(|z| clamp_scalar(z, -half_width, half_width))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ZERO;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rmat(r: usize, c: usize, s: f64, rng: &mut ChaCha8Rng) -> CMat {
        CMat::from_fn(r, c, |_, _| C64::new(rng.random_range(-s..s), rng.random_range(-s..s)))
    }

    struct Toy {
        h: CMat,
        x_p: CMat,
        x_d: CMat,
        y: CMat,
    }

    fn toy(seed: u64, noisy: bool) -> Toy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mp, n, rp, rd) = (6, 4, 5, 3);
        let h = rmat(mp, n, 1.0, &mut rng);
        let x_p = rmat(n, rp, 1.0, &mut rng);
        let x_d = rmat(n, rd, 0.6, &mut rng);
        let mut y = mul(&h, &stack_x(&x_p, &x_d));
        if noisy {
            y += rmat(mp, rp + rd, 0.5, &mut rng);
        }
        Toy { h, x_p, x_d, y }
    }

    #[test]
    fn gradients_vanish_at_consistent_point() {
        let t = toy(1, false);
        let (gh, gx) = gradient_f(&t.h, &t.x_d, &t.y, &t.x_p, 0.0, 0.7).unwrap();
        assert!(frob_sq(&gh) < 1e-24 && frob_sq(&gx) < 1e-24);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let t = toy(2, true);
        let lambda = 0.3;
        let bw = 0.7;
        let (gh, gx) = gradient_f(&t.h, &t.x_d, &t.y, &t.x_p, lambda, bw).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let dh = rmat(t.h.nrows(), t.h.ncols(), 1.0, &mut rng);
            let dx = rmat(t.x_d.nrows(), t.x_d.ncols(), 1.0, &mut rng);
            let eps = 1e-6;
            let f = |s: f64| {
                let h = &t.h + &dh * C64::from(s);
                let x = &t.x_d + &dx * C64::from(s);
                smooth_objective(&h, &x, &t.y, &t.x_p, lambda, bw)
            };
            let fd = (f(eps) - f(-eps)) / (2.0 * eps);
            let an = crate::linalg::re_inner(&gh, &dh) + crate::linalg::re_inner(&gx, &dx);
            assert_relative_eq!(fd, an, max_relative = 1e-5);
        }
    }

    #[test]
    fn constellation_corners_are_fixed_points_of_the_projected_step() {
        // The quartic regularizer gradient is -4 B^2 x at a corner (not zero),
        // but it points out of the box, so the clamp restores the corner.
        let q = Constellation::qpsk();
        let bw = q.half_width();
        let x_d = CMat::from_fn(3, 4, |i, j| q.points()[(i + j) % 4]);
        let g = regularizer_gradient(&x_d, bw);
        for (gi, xi) in g.iter().zip(x_d.iter()) {
            assert_relative_eq!((gi + xi * (4.0 * bw * bw)).norm(), 0.0, epsilon = 1e-15);
        }
        let stepped = &x_d - g * C64::from(0.1);
        assert_eq!(backward_xd_box(&stepped, 0.0, bw).unwrap(), x_d);
    }

    #[test]
    fn zero_step_is_identity() {
        let t = toy(3, true);
        let (h, x) = fbs_forward(&t.h, &t.x_d, &t.y, &t.x_p, 0.0, 0.1, 0.7).unwrap();
        assert_eq!(h, t.h);
        assert_eq!(x, t.x_d);
    }

    #[test]
    fn small_step_descends() {
        let t = toy(4, true);
        let h0 = CMat::zeros(t.h.nrows(), t.h.ncols());
        let x0 = clamp_matrix(&t.x_d.map(|z| z * 0.5), 0.7);
        let l = lipschitz_bound(&h0, &x0, &t.y, &t.x_p, 0.0, 0.7, 50);
        let (h1, x1) = fbs_forward(&h0, &x0, &t.y, &t.x_p, 0.5 / l, 0.0, 0.7).unwrap();
        let f0 = smooth_objective(&h0, &x0, &t.y, &t.x_p, 0.0, 0.7);
        let f1 = smooth_objective(&h1, &x1, &t.y, &t.x_p, 0.0, 0.7);
        assert!(f1 < f0);
    }

    #[test]
    fn backward_h_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = rmat(8, 3, 1.0, &mut rng);
        assert_eq!(backward_h(&h, 0.0, 4).unwrap(), h);
        let small = CMat::from_element(4, 1, C64::new(0.1, 0.0));
        assert!(backward_h(&small, 1.0, 4).unwrap().iter().all(|z| *z == ZERO));
        assert!(backward_h(&h, 0.1, 3).is_err());
    }

    #[test]
    fn objective_at_origin() {
        let t = toy(6, true);
        let params = SolverParams { lambda: 0.2, mu_h: 1.0, mu_x: 1.0, ..Default::default() };
        let bw = params.half_width;
        let h = CMat::zeros(t.h.nrows(), t.h.ncols());
        let x = CMat::zeros(t.x_d.nrows(), t.x_d.ncols());
        let v = objective_p2(&h, &x, &t.y, &t.x_p, &params, 3);
        let n_rd = (x.nrows() * x.ncols()) as f64;
        assert_relative_eq!(v, 0.5 * frob_sq(&t.y) - 0.2 * n_rd * bw.powi(4), max_relative = 1e-14);
    }

    #[test]
    fn zero_iterations_return_init() {
        let t = toy(7, true);
        let params = SolverParams { k_max: 0, ..Default::default() };
        let init = FbsState::new(t.h.clone(), clamp_matrix(&t.x_d, 0.7));
        let out = run_box_fbs(&t.y, &t.x_p, &params, 3, init.clone()).unwrap();
        assert_eq!(out.h, init.h);
        assert_eq!(out.x_d, init.x_d);
        let q = Constellation::qpsk();
        let out = run_pme_jacd(&t.y, &t.x_p, &params, 3, &q, 0.2, &NeRule::Residual, init.clone()).unwrap();
        assert_eq!(out.x_d, init.x_d);
    }

    #[test]
    fn box_fbs_keeps_iterates_in_box_and_descends() {
        let t = toy(8, true);
        let params = SolverParams {
            mu_h: 0.05,
            mu_x: 0.05,
            step: StepRule::Lipschitz { scale: 0.9, power_iters: 50, refresh: 1 },
            k_max: 60,
            tol: 0.0,
            half_width: 0.5,
            ..Default::default()
        };
        let init = FbsState::new(CMat::zeros(6, 4), CMat::zeros(4, 3));
        let out = run_box_fbs(&t.y, &t.x_p, &params, 3, init).unwrap();
        assert!(out.x_d.iter().all(|z| z.re.abs() <= 0.5 + 1e-12 && z.im.abs() <= 0.5 + 1e-12));
        for w in out.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} > {}", w[1], w[0]);
        }
    }

    #[test]
    fn divergence_is_reported() {
        let t = toy(9, true);
        let params = SolverParams { step: StepRule::Fixed(50.0), k_max: 100, tol: 0.0, ..Default::default() };
        let init = FbsState::new(t.h.clone(), clamp_matrix(&t.x_d, 0.7));
        let err = run_box_fbs(&t.y, &t.x_p, &params, 3, init).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn pme_backward_factorised_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q = Constellation::qpsk();
        let x = rmat(3, 4, 1.0, &mut rng);
        let a = backward_xd_pme(&x, &q, 0.2, 0.4).unwrap();
        let b = backward_xd_pme_enumerated(&x, &q, 0.2, 0.4).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).norm() <= 1e-9 * v.norm().max(1e-12));
        }
    }
}
