//! Proximal operators, shrinkage/clamp primitives and posterior-mean
//! estimators shared by all solvers.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{vec_norm_sq, C64, ZERO};

/// Smoothing constant for norms whose gradient is needed at the origin.
pub const NORM_EPS: f64 = 1e-40;

/// Evaluation mode of norms inside shrinkage-type operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormMode {
    #[default]
    Exact,
    /// `sqrt(||x||^2 + NORM_EPS)`, used on the training path.
    Smoothed,
}

impl NormMode {
    #[inline]
    pub fn norm(self, norm_sq: f64) -> f64 {
        match self {
            NormMode::Exact => norm_sq.sqrt(),
            NormMode::Smoothed => (norm_sq + NORM_EPS).sqrt(),
        }
    }
}

/// Finite symbol alphabet whose real and imaginary parts lie in `[-B, B]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    points: Vec<C64>,
    half_width: f64,
}

impl Constellation {
    /// QPSK with unit average energy, in the canonical order
    /// `+B+jB, +B-jB, -B+jB, -B-jB` that also fixes tie-breaking.
    pub fn qpsk() -> Self {
        let b = 0.5f64.sqrt();
        Constellation {
            points: vec![C64::new(b, b), C64::new(b, -b), C64::new(-b, b), C64::new(-b, -b)],
            half_width: b,
        }
    }

    pub fn new(points: Vec<C64>, half_width: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("empty constellation"));
        }
        if !(half_width > 0.0) {
            return Err(Error::invalid("box half-width must be positive"));
        }
        if points.iter().any(|p| p.re.abs() > half_width + 1e-12 || p.im.abs() > half_width + 1e-12) {
            return Err(Error::invalid("constellation point outside the box"));
        }
        Ok(Constellation { points, half_width })
    }

    pub fn points(&self) -> &[C64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Box half-width `B`.
    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    /// Index of the nearest symbol; the lowest index wins ties.
    pub fn nearest_index(&self, z: C64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (p - z).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn nearest(&self, z: C64) -> C64 {
        self.points[self.nearest_index(z)]
    }
}

/// Scale factor `max(||x|| - mu, 0) / ||x||` of the group shrinkage, given
/// `||x||^2`. Zero input maps to zero.
#[inline]
pub fn shrink_factor(norm_sq: f64, mu: f64, mode: NormMode) -> f64 {
    if norm_sq == 0.0 {
        return 0.0;
    }
    let n = mode.norm(norm_sq);
    (n - mu).max(0.0) / n
}

fn check_mu(mu: f64) -> Result<()> {
    if mu < 0.0 || mu.is_nan() {
        return Err(Error::invalid(format!("shrinkage threshold must be >= 0, got {mu}")));
    }
    Ok(())
}

/// Group (block soft-threshold) shrinkage of a complex vector.
pub fn group_shrinkage(x: &[C64], mu: f64) -> Result<Vec<C64>> {
    group_shrinkage_with(x, mu, NormMode::Exact)
}

pub fn group_shrinkage_with(x: &[C64], mu: f64, mode: NormMode) -> Result<Vec<C64>> {
    check_mu(mu)?;
    let g = shrink_factor(vec_norm_sq(x), mu, mode);
    Ok(x.iter().map(|z| z * g).collect())
}

/// In-place group shrinkage; returns the applied scale factor.
pub(crate) fn shrink_in_place(x: &mut [C64], mu: f64, mode: NormMode) -> f64 {
    let g = shrink_factor(vec_norm_sq(x), mu, mode);
    x.iter_mut().for_each(|z| *z *= g);
    g
}

#[inline]
pub(crate) fn clamp_scalar(z: C64, lo: f64, hi: f64) -> C64 {
    C64::new(z.re.max(lo).min(hi), z.im.max(lo).min(hi))
}

/// Element-wise clamp of real and imaginary parts to `[lo, hi]`.
pub fn clamp_box(x: &[C64], lo: f64, hi: f64) -> Result<Vec<C64>> {
    if lo > hi || lo.is_nan() || hi.is_nan() {
        return Err(Error::invalid(format!("clamp bounds out of order: [{lo}, {hi}]")));
    }
    Ok(x.iter().map(|&z| clamp_scalar(z, lo, hi)).collect())
}

/// Coefficients of the scalar equation that fixes the common scale `b` of the
/// unclipped entries in the box-constrained group prox.
///
/// With `c1 = sum of squares of the unclipped entries`, `c2 = number of
/// clipped entries`, `c3 = -2 kappa^2` and box half-width `B`:
///
/// `2 c1 b^4 - 4 c1 b^3 + (2 c1 + 2 B^2 c2 + c3) b^2 - 4 B^2 c2 b + 2 B^2 c2 = 0`.
///
/// For `B^2 = 1/2` (unit-energy QPSK) this is
/// `2 c1 b^4 - 4 c1 b^3 + (2 c1 + c2 + c3) b^2 - 2 c2 b + c2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuarticCoeffs {
    pub c1: f64,
    pub c2: usize,
    pub c3: f64,
    pub half_width_sq: f64,
}

impl QuarticCoeffs {
    /// Coefficients for the QPSK box (`B^2 = 1/2`).
    pub fn qpsk(c1: f64, c2: usize, c3: f64) -> Self {
        QuarticCoeffs { c1, c2, c3, half_width_sq: 0.5 }
    }

    pub fn from_parts(c1: f64, c2: usize, kappa: f64, half_width: f64) -> Self {
        QuarticCoeffs { c1, c2, c3: -2.0 * kappa * kappa, half_width_sq: half_width * half_width }
    }

    pub fn kappa(&self) -> f64 {
        (-0.5 * self.c3).max(0.0).sqrt()
    }

    /// `[a4, a3, a2, a1, a0]`.
    pub fn poly(&self) -> [f64; 5] {
        let c1 = self.c1;
        let c2b = self.half_width_sq * self.c2 as f64;
        [2.0 * c1, -4.0 * c1, 2.0 * c1 + 2.0 * c2b + self.c3, -4.0 * c2b, 2.0 * c2b]
    }

    pub fn eval(&self, b: f64) -> f64 {
        self.poly().iter().fold(0.0, |acc, a| acc * b + a)
    }

    fn eval_deriv(&self, b: f64) -> f64 {
        let p = self.poly();
        4.0 * p[0] * b.powi(3) + 3.0 * p[1] * b * b + 2.0 * p[2] * b + p[3]
    }

    /// `(1 - b) ||m(b)|| - kappa`, strictly decreasing on `(0, 1]`; its root
    /// is the root of the quartic in that interval.
    fn fixed_point_residual(&self, b: f64) -> f64 {
        let m = (self.c1 + self.c2 as f64 * self.half_width_sq / (b * b)).sqrt();
        (1.0 - b) * m - self.kappa()
    }

    /// Prox objective restricted to the free entries, up to a constant.
    fn objective(&self, b: f64) -> f64 {
        0.5 * (1.0 - b).powi(2) * self.c1
            + self.kappa() * (b * b * self.c1 + self.c2 as f64 * self.half_width_sq).sqrt()
    }
}

/// Real roots of `sum a_i x^(n-i)` from the eigenvalues of the companion
/// matrix. Leading coefficients that vanish relative to the largest one are
/// dropped first.
fn real_poly_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let first = match coeffs.iter().position(|a| a.abs() > 1e-14 * scale) {
        Some(i) => i,
        None => return Vec::new(),
    };
    let c = &coeffs[first..];
    let deg = c.len() - 1;
    if deg == 0 {
        return Vec::new();
    }
    let mut comp = DMatrix::<f64>::zeros(deg, deg);
    for j in 0..deg {
        comp[(0, j)] = -c[j + 1] / c[0];
    }
    for i in 1..deg {
        comp[(i, i - 1)] = 1.0;
    }
    comp.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| z.re)
        .collect()
}

/// Root of the prox quartic inside `(0, 1]`; `0` when none exists.
pub fn solve_prox_quartic(c: QuarticCoeffs) -> f64 {
    let kappa = c.kappa();
    if c.c2 == 0 {
        // b^2 (2 c1 b^2 - 4 c1 b + 2 c1 + c3): the nonzero roots are 1 +- kappa/sqrt(c1)
        if c.c1 <= 0.0 {
            return 0.0;
        }
        let b = 1.0 - kappa / c.c1.sqrt();
        return if b > 0.0 { b } else { 0.0 };
    }
    if kappa == 0.0 {
        return 1.0;
    }
    let mut candidates: Vec<f64> = real_poly_roots(&c.poly())
        .into_iter()
        .filter_map(|b| {
            if !(b > -1e-9 && b <= 1.0 + 1e-9) {
                return None;
            }
            let d = c.eval_deriv(b);
            let polished = if d != 0.0 { b - c.eval(b) / d } else { b };
            let b = polished.clamp(f64::MIN_POSITIVE, 1.0);
            let tol = 1e-8 * (1.0 + kappa);
            (c.fixed_point_residual(b).abs() <= tol).then_some(b)
        })
        .collect();
    if candidates.is_empty() {
        // g(0+) = +inf and g(1) = -kappa < 0, so a sign change is bracketed.
        candidates.push(bisect(|b| c.fixed_point_residual(b), 0.0, 1.0));
    }
    candidates
        .into_iter()
        .min_by(|a, b| c.objective(*a).total_cmp(&c.objective(*b)))
        .unwrap_or(0.0)
}

/// Bisection for a decreasing function with `f(lo+) > 0 > f(hi)`.
fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Intermediate quantities of [`prox_box_group`], exposed for verification.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxProxWork {
    /// Stacked `[Re; Im]` of the input.
    pub r_hat: Vec<f64>,
    /// Unconstrained shrinkage of `r_hat`.
    pub r_tmp: Vec<f64>,
    /// Entries pinned to `+B`.
    pub sp: Vec<usize>,
    /// Entries pinned to `-B`.
    pub sq: Vec<usize>,
    /// Common scale of the free entries.
    pub b: f64,
    /// Final real-stacked solution.
    pub r: Vec<f64>,
    /// Whether the clip set taken from `r_tmp` was already optimal.
    pub initial_set_optimal: bool,
}

impl BoxProxWork {
    pub fn to_complex(&self) -> Vec<C64> {
        let rd = self.r.len() / 2;
        (0..rd).map(|i| C64::new(self.r[i], self.r[rd + i])).collect()
    }
}

/// Exact minimiser of `1/2 ||x - x_hat||^2 + kappa ||x||` over the box
/// `|Re x_i|, |Im x_i| <= B`.
pub fn prox_box_group(x_hat: &[C64], kappa: f64, half_width: f64) -> Vec<C64> {
    prox_box_group_work(x_hat, kappa, half_width).to_complex()
}

pub fn prox_box_group_work(x_hat: &[C64], kappa: f64, half_width: f64) -> BoxProxWork {
    let rd = x_hat.len();
    let bw = half_width;
    let mut r_hat = Vec::with_capacity(2 * rd);
    r_hat.extend(x_hat.iter().map(|z| z.re));
    r_hat.extend(x_hat.iter().map(|z| z.im));
    let norm_sq: f64 = r_hat.iter().map(|v| v * v).sum();

    let g0 = shrink_factor(norm_sq, kappa, NormMode::Exact);
    let r_tmp: Vec<f64> = r_hat.iter().map(|v| v * g0).collect();
    let sp: Vec<usize> = (0..2 * rd).filter(|&d| r_tmp[d] > bw).collect();
    let sq: Vec<usize> = (0..2 * rd).filter(|&d| r_tmp[d] < -bw).collect();

    let mut work = BoxProxWork {
        r: vec![0.0; 2 * rd],
        r_hat,
        r_tmp,
        sp,
        sq,
        b: 0.0,
        initial_set_optimal: true,
    };
    if g0 == 0.0 {
        return work;
    }
    if kappa == 0.0 {
        work.b = 1.0;
        work.r = work.r_hat.iter().map(|v| v.clamp(-bw, bw)).collect();
        return work;
    }

    let mut clipped = vec![false; 2 * rd];
    for &d in work.sp.iter().chain(&work.sq) {
        clipped[d] = true;
    }
    let b = scale_for_clip_set(&work.r_hat, &clipped, kappa, bw);
    if clip_set_consistent(&work.r_hat, &clipped, b, bw) {
        work.b = b;
    } else {
        // Clipping lowers the common scale, so some entries flagged by the
        // unconstrained shrinkage may fall back inside the box. The optimal
        // clip set is a prefix of the entries sorted by magnitude.
        work.initial_set_optimal = false;
        let mut order: Vec<usize> = (0..2 * rd).collect();
        order.sort_by(|&a, &b| work.r_hat[b].abs().total_cmp(&work.r_hat[a].abs()));
        let start = work.sp.len() + work.sq.len();
        let mut best: Option<(f64, Vec<bool>, f64)> = None;
        for j in (0..start).rev() {
            let mut set = vec![false; 2 * rd];
            for &d in &order[..j] {
                set[d] = true;
            }
            let bj = scale_for_clip_set(&work.r_hat, &set, kappa, bw);
            if clip_set_consistent(&work.r_hat, &set, bj, bw) {
                best = Some((bj, set, 0.0));
                break;
            }
            let obj = full_objective(&work.r_hat, &assemble(&work.r_hat, &set, bj, bw), kappa);
            if best.as_ref().map_or(true, |(_, _, o)| obj < *o) {
                best = Some((bj, set, obj));
            }
        }
        let (bj, set, _) = best.expect("at least one clip set examined");
        work.b = bj;
        clipped = set;
        work.sp = (0..2 * rd).filter(|&d| clipped[d] && work.r_hat[d] > 0.0).collect();
        work.sq = (0..2 * rd).filter(|&d| clipped[d] && work.r_hat[d] < 0.0).collect();
    }
    work.r = assemble(&work.r_hat, &clipped, work.b, bw);
    work
}

fn scale_for_clip_set(r_hat: &[f64], clipped: &[bool], kappa: f64, bw: f64) -> f64 {
    let c1: f64 = r_hat.iter().zip(clipped).filter(|(_, &c)| !c).map(|(v, _)| v * v).sum();
    let c2 = clipped.iter().filter(|&&c| c).count();
    solve_prox_quartic(QuarticCoeffs::from_parts(c1, c2, kappa, bw))
}

fn clip_set_consistent(r_hat: &[f64], clipped: &[bool], b: f64, bw: f64) -> bool {
    let tol = 1e-12 * bw.max(1.0);
    r_hat.iter().zip(clipped).all(|(v, &c)| {
        if c {
            b * v.abs() >= bw - tol
        } else {
            b * v.abs() <= bw + tol
        }
    })
}

fn assemble(r_hat: &[f64], clipped: &[bool], b: f64, bw: f64) -> Vec<f64> {
    if b == 0.0 {
        return vec![0.0; r_hat.len()];
    }
    r_hat
        .iter()
        .zip(clipped)
        .map(|(&v, &c)| if c { bw * v.signum() } else { b * v })
        .collect()
}

fn full_objective(r_hat: &[f64], r: &[f64], kappa: f64) -> f64 {
    let fid: f64 = r.iter().zip(r_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    let nrm: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    0.5 * fid + kappa * nrm
}

fn check_ne(ne: f64) -> Result<()> {
    if !(ne > 0.0) || !ne.is_finite() {
        return Err(Error::invalid(format!("error variance must be positive and finite, got {ne}")));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("activity probability must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax weights of the per-symbol posterior `w_q ~ exp(-|q - x|^2 / ne)`.
pub(crate) fn symbol_posterior(x_hat: C64, q: &Constellation, ne: f64, w: &mut [f64]) {
    let mut m = f64::NEG_INFINITY;
    for (wi, p) in w.iter_mut().zip(q.points()) {
        *wi = -(p - x_hat).norm_sqr() / ne;
        m = m.max(*wi);
    }
    let mut s = 0.0;
    for wi in w.iter_mut() {
        *wi = (*wi - m).exp();
        s += *wi;
    }
    w.iter_mut().for_each(|wi| *wi /= s);
}

/// Posterior mean of one symbol under a uniform prior on `q` and Gaussian
/// error of variance `ne`.
pub fn pme_uniform_scalar(x_hat: C64, q: &Constellation, ne: f64) -> Result<C64> {
    check_ne(ne)?;
    let mut w = vec![0.0; q.len()];
    symbol_posterior(x_hat, q, ne, &mut w);
    Ok(w.iter().zip(q.points()).map(|(wi, p)| p * *wi).sum())
}

/// Log of `|S| CN(0; x, ne I) / sum_{s in S} CN(s; x, ne I)` for `S = Q^R`,
/// evaluated through the per-entry product factorisation.
fn log_zero_ratio(x_hat: &[C64], q: &Constellation, ne: f64) -> f64 {
    let lnq = (q.len() as f64).ln();
    x_hat
        .iter()
        .map(|&x| {
            let lse = log_sum_exp(q.points().iter().map(|p| -(p - x).norm_sqr() / ne));
            lnq - x.norm_sqr() / ne - lse
        })
        .sum()
}

/// Linear coefficient relating the posterior mean under the activity-mixed
/// prior to the posterior mean under the uniform prior on `Q^R`.
pub fn c_pme(x_hat: &[C64], q: &Constellation, alpha: f64, ne: f64) -> Result<f64> {
    check_alpha(alpha)?;
    check_ne(ne)?;
    if alpha == 1.0 {
        return Ok(1.0);
    }
    if alpha == 0.0 {
        return Ok(0.0);
    }
    let t = ((1.0 - alpha) / alpha).ln() + log_zero_ratio(x_hat, q, ne);
    Ok(sigmoid(-t))
}

#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Posterior mean under the activity-mixed prior computed as `c_pme` times
/// the per-symbol posterior means. Equal to [`pme_exact`] for every length.
pub fn pme_decoupled(x_hat: &[C64], q: &Constellation, alpha: f64, ne: f64) -> Result<Vec<C64>> {
    let c = c_pme(x_hat, q, alpha, ne)?;
    x_hat.iter().map(|&x| Ok(c * pme_uniform_scalar(x, q, ne)?)).collect()
}

/// Largest `|Q|^R` accepted by [`pme_exact`].
pub const MAX_ENUMERATION: usize = 1 << 20;

/// Posterior mean under the activity-mixed prior on `{Q^R, 0}` by direct
/// enumeration of all `|Q|^R` candidate vectors. Test-scale only.
pub fn pme_exact(x_hat: &[C64], q: &Constellation, alpha: f64, ne: f64) -> Result<Vec<C64>> {
    check_alpha(alpha)?;
    check_ne(ne)?;
    let rd = x_hat.len();
    let nq = q.len();
    let total = (nq as f64).powi(rd as i32);
    if total > MAX_ENUMERATION as f64 {
        return Err(Error::TooLarge(format!("{nq}^{rd} candidate vectors")));
    }
    let total = total as usize;
    let dist: Vec<Vec<f64>> =
        x_hat.iter().map(|&x| q.points().iter().map(|p| (p - x).norm_sqr() / ne).collect()).collect();
    let ln_prior = if alpha > 0.0 { alpha.ln() - rd as f64 * (nq as f64).ln() } else { f64::NEG_INFINITY };
    let ln_zero = (1.0 - alpha).ln() - vec_norm_sq(x_hat) / ne;

    let mut digits = vec![0usize; rd];
    let mut logw = Vec::with_capacity(total);
    for _ in 0..total {
        logw.push(ln_prior - digits.iter().enumerate().map(|(r, &i)| dist[r][i]).sum::<f64>());
        increment(&mut digits, nq);
    }
    let m = logw.iter().cloned().fold(ln_zero, f64::max);
    if m == f64::NEG_INFINITY {
        return Ok(vec![ZERO; rd]);
    }
    let mut denom = (ln_zero - m).exp();
    let mut num = vec![ZERO; rd];
    digits.iter_mut().for_each(|d| *d = 0);
    for lw in &logw {
        let w = (lw - m).exp();
        denom += w;
        for (r, &i) in digits.iter().enumerate() {
            num[r] += q.points()[i] * w;
        }
        increment(&mut digits, nq);
    }
    Ok(num.into_iter().map(|z| z / denom).collect())
}

fn increment(digits: &mut [usize], base: usize) {
    for d in digits.iter_mut() {
        *d += 1;
        if *d < base {
            return;
        }
        *d = 0;
    }
}

/// Clamped approximation `clamp(rho - nu / ||x||, 0, 1)` of [`c_pme`];
/// zero at the origin.
pub fn c_apme(x_hat: &[C64], rho: f64, nu: f64) -> f64 {
    c_apme_with(x_hat, rho, nu, NormMode::Exact)
}

pub fn c_apme_with(x_hat: &[C64], rho: f64, nu: f64, mode: NormMode) -> f64 {
    let nsq = vec_norm_sq(x_hat);
    if nsq == 0.0 {
        return 0.0;
    }
    (rho - nu / mode.norm(nsq)).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn shrinkage_examples() {
        assert_eq!(group_shrinkage(&[ZERO, ZERO], 1.0).unwrap(), vec![ZERO, ZERO]);
        assert_eq!(group_shrinkage(&[c(2.0, 0.0)], 0.5).unwrap(), vec![c(1.5, 0.0)]);
        assert_eq!(group_shrinkage(&[c(3.0, 4.0)], 5.0).unwrap(), vec![ZERO]);
        assert!(group_shrinkage(&[c(1.0, 0.0)], -0.1).is_err());
    }

    #[test]
    fn smoothed_shrinkage_at_origin_is_zero() {
        let y = group_shrinkage_with(&[ZERO; 3], 0.0, NormMode::Smoothed).unwrap();
        assert!(y.iter().all(|z| *z == ZERO));
    }

    #[test]
    fn clamp_examples() {
        let b = 0.7071;
        let inside = [c(0.1, -0.2), c(0.0, 0.7)];
        assert_eq!(clamp_box(&inside, -b, b).unwrap(), inside.to_vec());
        assert_eq!(clamp_box(&[c(1.7, -0.3)], -b, b).unwrap(), vec![c(b, -0.3)]);
        assert_eq!(clamp_box(&[c(-9.0, -9.0)], -b, b).unwrap(), vec![c(-b, -b)]);
        assert!(clamp_box(&[ZERO], 1.0, -1.0).is_err());
    }

    #[test]
    fn quartic_reduces_to_shrinkage_without_clipping() {
        let b = solve_prox_quartic(QuarticCoeffs::qpsk(4.0, 0, -2.0));
        assert_relative_eq!(b, 0.5, epsilon = 1e-15);
        // agrees with the group shrinkage of a vector of norm 2 at threshold 1
        let y = group_shrinkage(&[c(2.0, 0.0)], 1.0).unwrap();
        assert_relative_eq!(y[0].re / 2.0, b, epsilon = 1e-15);
    }

    #[test]
    fn quartic_without_root_returns_zero() {
        assert_eq!(solve_prox_quartic(QuarticCoeffs::qpsk(0.5, 0, -2.0)), 0.0);
    }

    #[test]
    fn quartic_root_satisfies_polynomial() {
        let qc = QuarticCoeffs::qpsk(1.3, 3, -2.0 * 0.4f64.powi(2));
        let b = solve_prox_quartic(qc);
        assert!(b > 0.0 && b <= 1.0);
        assert!(qc.eval(b).abs() < 1e-12);
    }

    #[test]
    fn prox_without_clipping_is_shrinkage() {
        let x = [c(0.1, 0.2), c(-0.3, 0.05)];
        let y = prox_box_group(&x, 0.1, 0.7071);
        let s = group_shrinkage(&x, 0.1).unwrap();
        for (a, b) in y.iter().zip(&s) {
            assert_relative_eq!(a.re, b.re, epsilon = 1e-14);
            assert_relative_eq!(a.im, b.im, epsilon = 1e-14);
        }
    }

    #[test]
    fn prox_with_zero_kappa_is_projection() {
        let x = [c(1.9, -0.2), c(-3.0, 0.4), c(0.1, 2.0)];
        let y = prox_box_group(&x, 0.0, 0.5);
        assert_eq!(y, clamp_box(&x, -0.5, 0.5).unwrap());
    }

    #[test]
    fn prox_zero_input() {
        assert_eq!(prox_box_group(&[ZERO; 4], 0.3, 0.7), vec![ZERO; 4]);
    }

    #[test]
    fn prox_output_in_box() {
        let x = [c(5.0, -4.0), c(0.2, 3.0), c(-0.1, 0.0)];
        let y = prox_box_group(&x, 0.5, 0.7);
        assert!(y.iter().all(|z| z.re.abs() <= 0.7 + 1e-15 && z.im.abs() <= 0.7 + 1e-15));
    }

    #[test]
    fn pme_scalar_qpsk_matches_tanh_form() {
        let q = Constellation::qpsk();
        let b = q.half_width();
        let x = c(0.3, 0.1);
        let ne = 0.5;
        let p = pme_uniform_scalar(x, &q, ne).unwrap();
        assert_relative_eq!(p.re, b * (2.0 * b * x.re / ne).tanh(), epsilon = 1e-14);
        assert_relative_eq!(p.im, b * (2.0 * b * x.im / ne).tanh(), epsilon = 1e-14);
        assert!((p.re - 0.488).abs() < 1e-3 && (p.im - 0.195).abs() < 1e-3);
        assert!(pme_uniform_scalar(ZERO, &q, 1.0).unwrap().norm() < 1e-15);
        assert!(pme_uniform_scalar(c(0.4, -0.9), &q, 1e12).unwrap().norm() < 1e-9);
        assert!(pme_uniform_scalar(x, &q, 0.0).is_err());
    }

    #[test]
    fn c_pme_examples() {
        let q = Constellation::qpsk();
        assert_eq!(c_pme(&[c(0.3, 0.3)], &q, 1.0, 0.7).unwrap(), 1.0);
        let v = c_pme(&[ZERO], &q, 0.2, 1.0).unwrap();
        assert_relative_eq!(v, 0.2 / (0.2 + 0.8 * 1f64.exp()), epsilon = 1e-14);
        assert!((v - 0.0842).abs() < 1e-4);
        assert!(c_pme(&[ZERO], &q, 1.2, 1.0).is_err());
        assert!(c_pme(&[ZERO], &q, 0.2, -1.0).is_err());
    }

    #[test]
    fn pme_exact_small_cases() {
        let q = Constellation::qpsk();
        assert!(pme_exact(&[ZERO], &q, 1.0, 0.3).unwrap()[0].norm() < 1e-15);
        // concentrating likelihood picks the nearest point of Q^R
        let x = [c(0.9, -0.4), c(-0.6, -0.8)];
        let p = pme_exact(&x, &q, 0.3, 1e-3).unwrap();
        for (pi, xi) in p.iter().zip(&x) {
            assert!((pi - q.nearest(*xi)).norm() < 1e-9);
        }
        assert!(pme_exact(&[ZERO; 11], &q, 0.3, 1.0).is_err());
    }

    #[test]
    fn c_apme_examples() {
        assert_eq!(c_apme(&[ZERO, ZERO], 3.49, 2.46), 0.0);
        let nu = 2.46;
        let rho = 3.49;
        let x = [c(nu / rho, 0.0)];
        assert!(c_apme(&x, rho, nu).abs() < 1e-15);
        assert_eq!(c_apme(&[c(1e9, 0.0)], rho, nu), 1.0);
    }

    #[test]
    fn nearest_tie_break_is_first_symbol() {
        let q = Constellation::qpsk();
        assert_eq!(q.nearest_index(ZERO), 0);
        assert_eq!(q.nearest(q.points()[3]), q.points()[3]);
    }
}
