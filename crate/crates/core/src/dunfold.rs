//! Deep-unfolded solvers: a fixed number of momentum forward steps and
//! approximate backward steps with per-layer trainable hyper-parameters, a
//! sigmoid activity head, a hand-written reverse pass and an Adam trainer.

use std::fmt;
use std::str::FromStr;

use crate::detection::{aud_logits, column_energies, row_energies, AudParams};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::kvfile::{KvDoc, KvWriter};
use crate::linalg::{frob_sq, hcat, mul, mul_a_bh, mul_ah_b, re_inner, CMat, C64, ZERO};
use crate::mathcore::{c_apme_with, sigmoid, symbol_posterior, Constellation, NormMode, NORM_EPS};
use crate::rng::{indexed_seed, Stream};
use crate::solvers::{backward_h_with, regularizer_gradient};

/// Which backward step the layers use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Shrinkage, affine map and clamp to the box.
    Abc,
    /// Approximate activity coefficient times per-symbol posterior means.
    Poem,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Abc => "abc",
            Variant::Poem => "poem",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abc" => Ok(Variant::Abc),
            "poem" => Ok(Variant::Poem),
            _ => Err(Error::config(format!("unknown unfolded variant `{s}`"))),
        }
    }
}

/// Hyper-parameters of one layer. Fields a variant does not use are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub tau_h: f64,
    pub eta_h: f64,
    pub tau_x: f64,
    pub eta_x: f64,
    pub lambda: f64,
    /// Channel shrinkage threshold (step size already folded in).
    pub mu_h: f64,
    /// Data shrinkage threshold (step size already folded in).
    pub mu_x: f64,
    pub omega: f64,
    /// Bias added to every data row before clamping.
    pub bias: Vec<C64>,
    /// Error variance of the per-symbol posterior mean.
    pub ne: f64,
    pub rho: f64,
    pub nu: f64,
}

impl LayerParams {
    fn zeros(rd: usize) -> Self {
        LayerParams {
            tau_h: 0.0,
            eta_h: 0.0,
            tau_x: 0.0,
            eta_x: 0.0,
            lambda: 0.0,
            mu_h: 0.0,
            mu_x: 0.0,
            omega: 0.0,
            bias: vec![ZERO; rd],
            ne: 0.0,
            rho: 0.0,
            nu: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedParams {
    pub variant: Variant,
    pub layers: Vec<LayerParams>,
    pub aud: AudParams,
}

/// Lower bound kept on the error variance after every update.
pub const NE_MIN: f64 = 1e-6;

/// Starting values derived from a classical configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    pub tau: f64,
    pub eta: f64,
    pub lambda: f64,
    pub mu_h: f64,
    pub mu_x: f64,
    pub ne: f64,
    pub rho: f64,
    pub nu: f64,
    pub aud: AudParams,
}

impl UnfoldedParams {
    /// Layers initialised from classical constants: equal step sizes,
    /// thresholds `tau * mu`, identity affine map.
    pub fn initial(variant: Variant, layers: usize, rd: usize, s: &InitSpec) -> Self {
        let lp = LayerParams {
            tau_h: s.tau,
            eta_h: s.eta,
            tau_x: s.tau,
            eta_x: s.eta,
            lambda: if variant == Variant::Abc { s.lambda } else { 0.0 },
            mu_h: s.tau * s.mu_h,
            mu_x: s.tau * s.mu_x,
            omega: 1.0,
            bias: vec![ZERO; rd],
            ne: s.ne,
            rho: s.rho,
            nu: s.nu,
        };
        UnfoldedParams { variant, layers: vec![lp; layers], aud: s.aud }
    }

    pub fn rd(&self) -> usize {
        self.layers.first().map_or(0, |l| l.bias.len())
    }

    pub fn validate(&self, rd: usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("at least one layer is required"));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.bias.len() != rd {
                return Err(Error::dims(format!("layer {k} bias has {} entries, expected {rd}", l.bias.len())));
            }
            if l.mu_h < 0.0 || l.mu_x < 0.0 {
                return Err(Error::invalid(format!("layer {k} has a negative threshold")));
            }
            if self.variant == Variant::Poem && !(l.ne > 0.0) {
                return Err(Error::invalid(format!("layer {k} error variance must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.aud.l_bar) {
            return Err(Error::invalid("decision threshold must lie in [0, 1]"));
        }
        Ok(())
    }

    /// A parameter set of the same shape with every value zero.
    pub fn zeros_like(&self) -> Self {
        UnfoldedParams {
            variant: self.variant,
            layers: self.layers.iter().map(|l| LayerParams::zeros(l.bias.len())).collect(),
            aud: AudParams { omega_h: 0.0, omega_x: 0.0, t_th: 0.0, l_bar: self.aud.l_bar, t_aud: self.aud.t_aud },
        }
    }

    fn visit(&self, mut f: impl FnMut(String, f64)) {
        for (k, l) in self.layers.iter().enumerate() {
            let mut put = |name: &str, v: f64| f(format!("layer{k}.{name}"), v);
            put("tau_h", l.tau_h);
            put("eta_h", l.eta_h);
            put("tau_x", l.tau_x);
            put("eta_x", l.eta_x);
            put("mu_h", l.mu_h);
            match self.variant {
                Variant::Abc => {
                    put("lambda", l.lambda);
                    put("mu_x", l.mu_x);
                    put("omega", l.omega);
                    for (r, b) in l.bias.iter().enumerate() {
                        put(&format!("bias{r}.re"), b.re);
                        put(&format!("bias{r}.im"), b.im);
                    }
                }
                Variant::Poem => {
                    put("ne", l.ne);
                    put("rho", l.rho);
                    put("nu", l.nu);
                }
            }
        }
        f("aud.omega_h".into(), self.aud.omega_h);
        f("aud.omega_x".into(), self.aud.omega_x);
        f("aud.t_th".into(), self.aud.t_th);
    }

    fn visit_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        let variant = self.variant;
        for l in self.layers.iter_mut() {
            f(&mut l.tau_h);
            f(&mut l.eta_h);
            f(&mut l.tau_x);
            f(&mut l.eta_x);
            f(&mut l.mu_h);
            match variant {
                Variant::Abc => {
                    f(&mut l.lambda);
                    f(&mut l.mu_x);
                    f(&mut l.omega);
                    for b in l.bias.iter_mut() {
                        f(&mut b.re);
                        f(&mut b.im);
                    }
                }
                Variant::Poem => {
                    f(&mut l.ne);
                    f(&mut l.rho);
                    f(&mut l.nu);
                }
            }
        }
        f(&mut self.aud.omega_h);
        f(&mut self.aud.omega_x);
        f(&mut self.aud.t_th);
    }

    /// Names of the trainable scalars, in [`Self::trainable`] order.
    pub fn coordinate_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        self.visit(|n, _| v.push(n));
        v
    }

    /// Flat vector of the trainable scalars of this variant.
    pub fn trainable(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.visit(|_, x| v.push(x));
        v
    }

    pub fn set_trainable(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.trainable().len();
        if values.len() != expected {
            return Err(Error::dims(format!("{} values for {expected} trainable scalars", values.len())));
        }
        let mut it = values.iter();
        self.visit_mut(|x| *x = *it.next().expect("length checked"));
        Ok(())
    }

    /// Enforce non-negative thresholds and a positive error variance.
    pub fn project(&mut self) {
        for l in self.layers.iter_mut() {
            l.mu_h = l.mu_h.max(0.0);
            l.mu_x = l.mu_x.max(0.0);
            if self.variant == Variant::Poem {
                l.ne = l.ne.max(NE_MIN);
            }
        }
    }
}

/// Momentum accumulators; zero before the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub d_h: CMat,
    pub d_x: CMat,
}

impl MomentumState {
    pub fn zeros(mp: usize, n: usize, rd: usize) -> Self {
        MomentumState { d_h: CMat::zeros(mp, n), d_x: CMat::zeros(n, rd) }
    }
}

const MODE: NormMode = NormMode::Smoothed;

struct ForwardParts {
    e: CMat,
    g_h: CMat,
    g_x: CMat,
}

fn forward_parts(h: &CMat, x_d: &CMat, y: &CMat, x_p: &CMat, lambda: f64, bw: f64) -> ForwardParts {
    let x = hcat(x_p, x_d);
    let e = y - mul(h, &x);
    let g_h = mul_a_bh(&e, &x);
    let e_d = e.columns(x_p.ncols(), x_d.ncols()).into_owned();
    let mut g_x = mul_ah_b(h, &e_d);
    if lambda != 0.0 {
        // descent direction of lambda C, i.e. minus its gradient
        g_x -= regularizer_gradient(x_d, bw) * C64::from(lambda);
    }
    ForwardParts { e, g_h, g_x }
}

fn check_shapes(h: &CMat, x_d: &CMat, y: &CMat, x_p: &CMat) -> Result<()> {
    let (mp, n) = h.shape();
    if x_p.nrows() != n || x_d.nrows() != n || y.nrows() != mp || y.ncols() != x_p.ncols() + x_d.ncols() {
        return Err(Error::dims("inconsistent shapes of Y, H, X_P and X_D"));
    }
    Ok(())
}

/// Momentum forward step; returns `(H_hat, X_hat, new momentum)`.
#[allow(clippy::too_many_arguments)]
pub fn du_forward(
    h: &CMat,
    x_d: &CMat,
    mom: &MomentumState,
    lp: &LayerParams,
    y: &CMat,
    x_p: &CMat,
    variant: Variant,
    half_width: f64,
) -> Result<(CMat, CMat, MomentumState)> {
    check_shapes(h, x_d, y, x_p)?;
    let lambda = if variant == Variant::Abc { lp.lambda } else { 0.0 };
    let parts = forward_parts(h, x_d, y, x_p, lambda, half_width);
    let d_h = parts.g_h * C64::from(lp.tau_h) + &mom.d_h * C64::from(lp.eta_h);
    let d_x = parts.g_x * C64::from(lp.tau_x) + &mom.d_x * C64::from(lp.eta_x);
    Ok((h + &d_h, x_d + &d_x, MomentumState { d_h, d_x }))
}

fn row_vec(x: &CMat, n: usize) -> Vec<C64> {
    x.row(n).iter().copied().collect()
}

fn abc_row(x_hat: &[C64], lp: &LayerParams, bw: f64) -> Vec<C64> {
    let g = crate::mathcore::shrink_factor(crate::linalg::vec_norm_sq(x_hat), lp.mu_x, MODE);
    x_hat
        .iter()
        .zip(&lp.bias)
        .map(|(z, b)| crate::mathcore::clamp_scalar(z * (lp.omega * g) + b, -bw, bw))
        .collect()
}

/// Channel shrinkage and data `clamp(omega shrink(x, mu_x) + b)`.
pub fn du_abc_backward(h_hat: &CMat, x_hat: &CMat, lp: &LayerParams, m: usize, half_width: f64) -> Result<(CMat, CMat)> {
    let h = backward_h_with(h_hat, lp.mu_h, m, MODE)?;
    let mut x = CMat::zeros(x_hat.nrows(), x_hat.ncols());
    for n in 0..x_hat.nrows() {
        for (r, z) in abc_row(&row_vec(x_hat, n), lp, half_width).into_iter().enumerate() {
            x[(n, r)] = z;
        }
    }
    Ok((h, x))
}

/// Channel shrinkage and data rows `c_apme(x) * [per-symbol PME]`.
pub fn du_poem_backward(
    h_hat: &CMat,
    x_hat: &CMat,
    lp: &LayerParams,
    m: usize,
    q: &Constellation,
) -> Result<(CMat, CMat)> {
    if !(lp.ne > 0.0) {
        return Err(Error::invalid(format!("error variance must be positive, got {}", lp.ne)));
    }
    let h = backward_h_with(h_hat, lp.mu_h, m, MODE)?;
    let mut x = CMat::zeros(x_hat.nrows(), x_hat.ncols());
    let mut w = vec![0.0; q.len()];
    for n in 0..x_hat.nrows() {
        let row = row_vec(x_hat, n);
        let c = c_apme_with(&row, lp.rho, lp.nu, MODE);
        for (r, &z) in row.iter().enumerate() {
            symbol_posterior(z, q, lp.ne, &mut w);
            let p: C64 = w.iter().zip(q.points()).map(|(wi, s)| s * *wi).sum();
            x[(n, r)] = p * c;
        }
    }
    Ok((h, x))
}

/// Final estimates and soft activity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct DuOutput {
    pub h: CMat,
    pub x_d: CMat,
    pub scores: Vec<f64>,
}

struct LayerTape {
    h: CMat,
    x: CMat,
    parts: ForwardParts,
    d_h_prev: CMat,
    d_x_prev: CMat,
    h_hat: CMat,
    x_hat: CMat,
}

fn forward_pass(
    y: &CMat,
    x_p: &CMat,
    params: &UnfoldedParams,
    m: usize,
    q: &Constellation,
    h0: &CMat,
    x0: &CMat,
    keep: bool,
) -> Result<(DuOutput, Vec<LayerTape>)> {
    check_shapes(h0, x0, y, x_p)?;
    params.validate(x0.ncols())?;
    let bw = q.half_width();
    let mut h = h0.clone();
    let mut x = x0.clone();
    let mut mom = MomentumState::zeros(h.nrows(), h.ncols(), x.ncols());
    let mut tapes = Vec::new();
    for lp in &params.layers {
        let lambda = if params.variant == Variant::Abc { lp.lambda } else { 0.0 };
        let parts = forward_parts(&h, &x, y, x_p, lambda, bw);
        let d_h = &parts.g_h * C64::from(lp.tau_h) + &mom.d_h * C64::from(lp.eta_h);
        let d_x = &parts.g_x * C64::from(lp.tau_x) + &mom.d_x * C64::from(lp.eta_x);
        let h_hat = &h + &d_h;
        let x_hat = &x + &d_x;
        let (h_next, x_next) = match params.variant {
            Variant::Abc => du_abc_backward(&h_hat, &x_hat, lp, m, bw)?,
            Variant::Poem => du_poem_backward(&h_hat, &x_hat, lp, m, q)?,
        };
        let prev = std::mem::replace(&mut mom, MomentumState { d_h, d_x });
        if keep {
            tapes.push(LayerTape { h, x, parts, d_h_prev: prev.d_h, d_x_prev: prev.d_x, h_hat, x_hat });
        }
        h = h_next;
        x = x_next;
    }
    let scores = aud_logits(&h, &x, &params.aud).into_iter().map(sigmoid).collect();
    Ok((DuOutput { h, x_d: x, scores }, tapes))
}

/// Run all layers from the initial estimates `(h0, x0)`.
pub fn run_du(
    y: &CMat,
    x_p: &CMat,
    params: &UnfoldedParams,
    m: usize,
    q: &Constellation,
    h0: &CMat,
    x0: &CMat,
) -> Result<DuOutput> {
    Ok(forward_pass(y, x_p, params, m, q, h0, x0, false)?.0)
}

/// `|| diag(L) X - X_true ||_F^2`.
pub fn du_loss(scores: &[f64], x_final: &CMat, x_true: &CMat) -> Result<f64> {
    if scores.len() != x_final.nrows() || x_final.shape() != x_true.shape() {
        return Err(Error::dims("scores, estimate and truth disagree in shape"));
    }
    let mut s = 0.0;
    for n in 0..x_final.nrows() {
        for r in 0..x_final.ncols() {
            s += (x_final[(n, r)] * scores[n] - x_true[(n, r)]).norm_sqr();
        }
    }
    Ok(s)
}

/// One training example: observation, initial estimates and true data.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub y: CMat,
    pub x_p: CMat,
    pub h0: CMat,
    pub x0: CMat,
    pub x_true: CMat,
}

/// Adjoint of `y = x max(n - mu, 0) / n` with `n` the smoothed norm.
/// Returns `(x_bar, mu_bar)`.
fn shrink_vjp(x: &[C64], mu: f64, y_bar: &[C64]) -> (Vec<C64>, f64) {
    let nsq = crate::linalg::vec_norm_sq(x);
    let n = (nsq + NORM_EPS).sqrt();
    if nsq == 0.0 || n <= mu {
        return (vec![ZERO; x.len()], 0.0);
    }
    let g = (n - mu) / n;
    let ip: f64 = y_bar.iter().zip(x).map(|(a, b)| (a.conj() * b).re).sum();
    let k = mu * ip / (n * n * n);
    (y_bar.iter().zip(x).map(|(yb, xi)| yb * g + xi * k).collect(), -ip / n)
}

fn shrink_blocks_vjp(h_hat: &CMat, mu: f64, m: usize, h_bar: &CMat) -> (CMat, f64) {
    let mut out = CMat::zeros(h_hat.nrows(), h_hat.ncols());
    let mut mu_bar = 0.0;
    for ((xb, yb), ob) in h_hat
        .as_slice()
        .chunks(m)
        .zip(h_bar.as_slice().chunks(m))
        .zip(out.as_mut_slice().chunks_mut(m))
    {
        let (g, mb) = shrink_vjp(xb, mu, yb);
        ob.copy_from_slice(&g);
        mu_bar += mb;
    }
    (out, mu_bar)
}

#[inline]
fn inside(v: f64, bw: f64) -> f64 {
    if v > -bw && v < bw {
        1.0
    } else {
        0.0
    }
}

fn abc_vjp(x_hat: &CMat, lp: &LayerParams, bw: f64, x_bar: &CMat, g: &mut LayerParams) -> CMat {
    let mut out = CMat::zeros(x_hat.nrows(), x_hat.ncols());
    for n in 0..x_hat.nrows() {
        let row = row_vec(x_hat, n);
        let gs = crate::mathcore::shrink_factor(crate::linalg::vec_norm_sq(&row), lp.mu_x, MODE);
        let mut s_bar = Vec::with_capacity(row.len());
        for (r, z) in row.iter().enumerate() {
            let s = z * gs;
            let u = s * lp.omega + lp.bias[r];
            let xb = x_bar[(n, r)];
            let u_bar = C64::new(xb.re * inside(u.re, bw), xb.im * inside(u.im, bw));
            g.omega += (u_bar.conj() * s).re;
            g.bias[r] += u_bar;
            s_bar.push(u_bar * lp.omega);
        }
        let (xr, mb) = shrink_vjp(&row, lp.mu_x, &s_bar);
        g.mu_x += mb;
        for (r, v) in xr.into_iter().enumerate() {
            out[(n, r)] = v;
        }
    }
    out
}

fn poem_vjp(x_hat: &CMat, lp: &LayerParams, q: &Constellation, x_bar: &CMat, g: &mut LayerParams) -> CMat {
    let mut out = CMat::zeros(x_hat.nrows(), x_hat.ncols());
    let mut w = vec![0.0; q.len()];
    let rd = x_hat.ncols();
    let mut p = vec![ZERO; rd];
    let mut ws = vec![vec![0.0; q.len()]; rd];
    for n in 0..x_hat.nrows() {
        let row = row_vec(x_hat, n);
        let c = c_apme_with(&row, lp.rho, lp.nu, MODE);
        for (r, &z) in row.iter().enumerate() {
            symbol_posterior(z, q, lp.ne, &mut w);
            p[r] = w.iter().zip(q.points()).map(|(wi, s)| s * *wi).sum();
            ws[r].copy_from_slice(&w);
        }
        let c_bar: f64 = (0..rd).map(|r| (x_bar[(n, r)].conj() * p[r]).re).sum();
        let nsq = crate::linalg::vec_norm_sq(&row);
        if nsq > 0.0 {
            let nn = (nsq + NORM_EPS).sqrt();
            let t = lp.rho - lp.nu / nn;
            if t > 0.0 && t < 1.0 {
                g.rho += c_bar;
                g.nu -= c_bar / nn;
                let k = c_bar * lp.nu / (nn * nn * nn);
                for (r, z) in row.iter().enumerate() {
                    out[(n, r)] += z * k;
                }
            }
        }
        for (r, &z) in row.iter().enumerate() {
            let p_bar = x_bar[(n, r)] * c;
            let w = &ws[r];
            let v: Vec<f64> = q.points().iter().map(|s| (p_bar.conj() * s).re).collect();
            let v_mean: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
            let mut acc = ZERO;
            for ((wi, vi), s) in w.iter().zip(&v).zip(q.points()) {
                let coef = wi * (vi - v_mean);
                acc += (s - z) * (2.0 * coef / lp.ne);
                g.ne += coef * (s - z).norm_sqr() / (lp.ne * lp.ne);
            }
            out[(n, r)] += acc;
        }
    }
    out
}

fn regularizer_vjp(x: &CMat, lambda: f64, bw: f64, g_bar: &CMat) -> (CMat, f64) {
    // forward term: +4 lambda x (|x|^2 - B^2)
    let b2 = bw * bw;
    let mut lambda_bar = 0.0;
    let out = CMat::from_fn(x.nrows(), x.ncols(), |i, j| {
        let z = x[(i, j)];
        let gb = g_bar[(i, j)];
        let a = z.norm_sqr();
        lambda_bar += (gb.conj() * z * (4.0 * (a - b2))).re;
        gb * (4.0 * lambda * (2.0 * a - b2)) + gb.conj() * (z * z) * (4.0 * lambda)
    });
    (out, lambda_bar)
}

/// Loss of one sample and its gradient with respect to every parameter.
pub fn loss_and_grad(
    s: &Sample,
    params: &UnfoldedParams,
    m: usize,
    q: &Constellation,
) -> Result<(f64, UnfoldedParams)> {
    let (out, tapes) = forward_pass(&s.y, &s.x_p, params, m, q, &s.h0, &s.x0, true)?;
    let loss = du_loss(&out.scores, &out.x_d, &s.x_true)?;
    let mut grad = params.zeros_like();
    let bw = q.half_width();
    let (n, rd) = out.x_d.shape();
    let rp = s.x_p.ncols();

    // loss and activity head
    let mut x_bar = CMat::zeros(n, rd);
    let mut h_bar = CMat::zeros(out.h.nrows(), n);
    let eh = column_energies(&out.h);
    let ex = row_energies(&out.x_d);
    let ap = &params.aud;
    for i in 0..n {
        let l = out.scores[i];
        let mut l_bar = 0.0;
        for r in 0..rd {
            let z = out.x_d[(i, r)] * l - s.x_true[(i, r)];
            x_bar[(i, r)] = z * (2.0 * l);
            l_bar += 2.0 * (z.conj() * out.x_d[(i, r)]).re;
        }
        let s_bar = l_bar * l * (1.0 - l);
        grad.aud.omega_h += s_bar * eh[i];
        grad.aud.omega_x += s_bar * ex[i];
        grad.aud.t_th -= s_bar;
        for r in 0..rd {
            x_bar[(i, r)] += out.x_d[(i, r)] * (2.0 * s_bar * ap.omega_x);
        }
        for j in 0..out.h.nrows() {
            h_bar[(j, i)] += out.h[(j, i)] * (2.0 * s_bar * ap.omega_h);
        }
    }

    let mut d_h_bar = CMat::zeros(out.h.nrows(), n);
    let mut d_x_bar = CMat::zeros(n, rd);
    for (k, t) in tapes.iter().enumerate().rev() {
        let lp = &params.layers[k];
        let g = &mut grad.layers[k];
        let (h_hat_bar, mu_h_bar) = shrink_blocks_vjp(&t.h_hat, lp.mu_h, m, &h_bar);
        g.mu_h += mu_h_bar;
        let x_hat_bar = match params.variant {
            Variant::Abc => abc_vjp(&t.x_hat, lp, bw, &x_bar, g),
            Variant::Poem => poem_vjp(&t.x_hat, lp, q, &x_bar, g),
        };
        let dh_tot = &h_hat_bar + &d_h_bar;
        let dx_tot = &x_hat_bar + &d_x_bar;
        g.tau_h += re_inner(&dh_tot, &t.parts.g_h);
        g.eta_h += re_inner(&dh_tot, &t.d_h_prev);
        g.tau_x += re_inner(&dx_tot, &t.parts.g_x);
        g.eta_x += re_inner(&dx_tot, &t.d_x_prev);
        d_h_bar = &dh_tot * C64::from(lp.eta_h);
        d_x_bar = &dx_tot * C64::from(lp.eta_x);
        let gh_bar = dh_tot * C64::from(lp.tau_h);
        let gx_bar = dx_tot * C64::from(lp.tau_x);

        let mut h_in_bar = h_hat_bar;
        let mut x_in_bar = x_hat_bar;
        // G_x = H^H E_D - lambda grad C(X_D)
        let e_d = t.parts.e.columns(rp, rd).into_owned();
        h_in_bar += mul_a_bh(&e_d, &gx_bar);
        let e_d_bar = mul(&t.h, &gx_bar);
        if params.variant == Variant::Abc {
            let (xb, lb) = regularizer_vjp(&t.x, lp.lambda, bw, &gx_bar);
            x_in_bar += xb;
            g.lambda += lb;
        }
        // G_h = E X^H
        let x_full = hcat(&s.x_p, &t.x);
        let mut e_bar = mul(&gh_bar, &x_full);
        e_bar.columns_mut(rp, rd).add_assign(&e_d_bar);
        let mut x_full_bar = mul_ah_b(&gh_bar, &t.parts.e);
        // E = Y - H X
        h_in_bar -= mul_a_bh(&e_bar, &x_full);
        x_full_bar -= mul_ah_b(&t.h, &e_bar);
        x_in_bar += x_full_bar.columns(rp, rd);
        h_bar = h_in_bar;
        x_bar = x_in_bar;
    }
    Ok((loss, grad))
}

trait AddAssignView {
    fn add_assign(&mut self, other: &CMat);
}

impl AddAssignView for nalgebra::DMatrixViewMut<'_, C64> {
    fn add_assign(&mut self, other: &CMat) {
        *self += other;
    }
}

/// Mean loss over a batch and the gradient of the mean.
pub fn grad_params(
    batch: &[Sample],
    params: &UnfoldedParams,
    m: usize,
    q: &Constellation,
    exec: Execution,
) -> Result<(f64, UnfoldedParams)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let parts = map_indexed(batch.len(), exec, |i| loss_and_grad(&batch[i], params, m, q));
    let mut loss = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(batch.len());
    for p in parts {
        let (l, g) = p?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0 });
        }
        loss.push(l);
        grads.push(g.trainable());
    }
    let inv = 1.0 / batch.len() as f64;
    let dim = grads[0].len();
    let mean: Vec<f64> = (0..dim)
        .map(|j| crate::exec::pairwise_sum(&grads.iter().map(|g| g[j]).collect::<Vec<_>>()) * inv)
        .collect();
    let mut out = params.zeros_like();
    out.set_trainable(&mean)?;
    Ok((crate::exec::pairwise_sum(&loss) * inv, out))
}

/// Mean loss of a set of samples without gradients.
pub fn mean_loss(samples: &[Sample], params: &UnfoldedParams, m: usize, q: &Constellation, exec: Execution) -> Result<f64> {
    let losses = map_indexed(samples.len(), exec, |i| {
        let s = &samples[i];
        let out = run_du(&s.y, &s.x_p, params, m, q, &s.h0, &s.x0)?;
        du_loss(&out.scores, &out.x_d, &s.x_true)
    });
    let v: Vec<f64> = losses.into_iter().collect::<Result<_>>()?;
    Ok(crate::exec::pairwise_sum(&v) / v.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fresh training samples drawn per epoch.
    pub samples_per_epoch: usize,
    /// Size of the fixed validation set.
    pub validation_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 8,
            samples_per_epoch: 160,
            validation_size: 40,
            seed: 1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Parameters with the lowest validation loss seen.
    pub params: UnfoldedParams,
    pub initial_validation_loss: f64,
    pub best_validation_loss: f64,
    pub history: Vec<EpochRecord>,
    /// Epoch at which a non-finite loss stopped training.
    pub aborted_at: Option<usize>,
}

/// Scale used to normalise a coordinate for the optimizer.
const ZERO_PARAM_SCALE: f64 = 0.05;

/// Adam on scale-normalised coordinates `p / |p0|`, with projection after
/// every step and accept-if-improved checkpointing on a fixed validation set.
/// `make_sample(seed)` draws one example.
pub fn train<F>(
    params0: &UnfoldedParams,
    cfg: &TrainConfig,
    m: usize,
    q: &Constellation,
    exec: Execution,
    make_sample: F,
) -> Result<TrainReport>
where
    F: Fn(u64) -> Result<Sample> + Sync,
{
    if cfg.batch_size == 0 || cfg.validation_size == 0 {
        return Err(Error::invalid("batch and validation sizes must be positive"));
    }
    if !(cfg.learning_rate >= 0.0) {
        return Err(Error::invalid("learning rate must be non-negative"));
    }
    let validation: Vec<Sample> = map_indexed(cfg.validation_size, exec, |i| {
        make_sample(indexed_seed(cfg.seed, Stream::Validation, i as u64))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let initial = mean_loss(&validation, params0, m, q, exec)?;
    if !initial.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0 });
    }
    let mut best = params0.clone();
    let mut best_loss = initial;
    let mut current = params0.clone();
    let scale: Vec<f64> =
        params0.trainable().iter().map(|p| if p.abs() > 0.0 { p.abs() } else { ZERO_PARAM_SCALE }).collect();
    let dim = scale.len();
    let mut m1 = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    let mut step = 0i32;
    let mut history = Vec::new();
    let mut aborted_at = None;

    'epochs: for epoch in 1..=cfg.epochs {
        let base = (epoch - 1) * cfg.samples_per_epoch;
        let data: Vec<Sample> = map_indexed(cfg.samples_per_epoch, exec, |i| {
            make_sample(indexed_seed(cfg.seed, Stream::Training, (base + i) as u64))
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let mut batch_losses = Vec::new();
        for batch in data.chunks(cfg.batch_size) {
            let (loss, grad) = match grad_params(batch, &current, m, q, exec) {
                Ok(v) => v,
                Err(Error::NonFiniteLoss { .. }) => {
                    aborted_at = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let g = grad.trainable();
            if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                aborted_at = Some(epoch);
                break 'epochs;
            }
            batch_losses.push(loss);
            step += 1;
            let mut theta = current.trainable();
            let c1 = 1.0 - cfg.beta1.powi(step);
            let c2 = 1.0 - cfg.beta2.powi(step);
            for j in 0..dim {
                let gj = g[j] * scale[j];
                m1[j] = cfg.beta1 * m1[j] + (1.0 - cfg.beta1) * gj;
                m2[j] = cfg.beta2 * m2[j] + (1.0 - cfg.beta2) * gj * gj;
                let upd = cfg.learning_rate * (m1[j] / c1) / ((m2[j] / c2).sqrt() + cfg.epsilon);
                theta[j] -= upd * scale[j];
            }
            current.set_trainable(&theta)?;
            current.project();
        }
        let val = mean_loss(&validation, &current, m, q, exec)?;
        if !val.is_finite() {
            aborted_at = Some(epoch);
            break;
        }
        let accepted = val < best_loss;
        if accepted {
            best_loss = val;
            best = current.clone();
        }
        let train_loss = crate::exec::pairwise_sum(&batch_losses) / batch_losses.len().max(1) as f64;
        history.push(EpochRecord { epoch, train_loss, validation_loss: val, accepted });
    }
    Ok(TrainReport {
        params: best,
        initial_validation_loss: initial,
        best_validation_loss: best_loss,
        history,
        aborted_at,
    })
}

/// Format tag of trained-parameter files.
pub const PARAM_FORMAT: &str = "jacd-unfolded";
pub const PARAM_VERSION: u32 = 1;

/// Serialise to the versioned key=value format.
pub fn params_to_string(p: &UnfoldedParams) -> String {
    let mut w = KvWriter::new();
    w.kv("format", PARAM_FORMAT)
        .kv("version", PARAM_VERSION)
        .kv("variant", p.variant)
        .kv("layers", p.layers.len())
        .kv("rd", p.rd());
    w.section("aud")
        .kv("omega_h", p.aud.omega_h)
        .kv("omega_x", p.aud.omega_x)
        .kv("t_th", p.aud.t_th)
        .kv("l_bar", p.aud.l_bar)
        .kv("t_aud", p.aud.t_aud);
    for (k, l) in p.layers.iter().enumerate() {
        w.section(&format!("layer{k}"))
            .kv("tau_h", l.tau_h)
            .kv("eta_h", l.eta_h)
            .kv("tau_x", l.tau_x)
            .kv("eta_x", l.eta_x)
            .kv("lambda", l.lambda)
            .kv("mu_h", l.mu_h)
            .kv("mu_x", l.mu_x)
            .kv("omega", l.omega)
            .kv("ne", l.ne)
            .kv("rho", l.rho)
            .kv("nu", l.nu);
        let bias: Vec<String> = l.bias.iter().flat_map(|b| [b.re.to_string(), b.im.to_string()]).collect();
        w.kv("bias", bias.join(","));
    }
    w.finish()
}

pub fn params_from_str(text: &str) -> Result<UnfoldedParams> {
    let doc = KvDoc::parse(text)?;
    let format: String = doc.require("", "format")?;
    if format != PARAM_FORMAT {
        return Err(Error::config(format!("not a trained-parameter file (format `{format}`)")));
    }
    let version: u32 = doc.require("", "version")?;
    if version != PARAM_VERSION {
        return Err(Error::config(format!("unsupported parameter file version {version}")));
    }
    let variant: Variant = doc.require::<String>("", "variant")?.parse()?;
    let layers: usize = doc.require("", "layers")?;
    let rd: usize = doc.require("", "rd")?;
    let aud = AudParams {
        omega_h: doc.require("aud", "omega_h")?,
        omega_x: doc.require("aud", "omega_x")?,
        t_th: doc.require("aud", "t_th")?,
        l_bar: doc.require("aud", "l_bar")?,
        t_aud: doc.require("aud", "t_aud")?,
    };
    let mut out = Vec::with_capacity(layers);
    for k in 0..layers {
        let s = format!("layer{k}");
        let raw: String = doc.require(&s, "bias")?;
        let vals: Vec<f64> = if raw.is_empty() {
            Vec::new()
        } else {
            raw.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::config(format!("bad bias value `{v}` in [{s}]"))))
                .collect::<Result<_>>()?
        };
        if vals.len() != 2 * rd {
            return Err(Error::config(format!("[{s}] bias has {} values, expected {}", vals.len(), 2 * rd)));
        }
        out.push(LayerParams {
            tau_h: doc.require(&s, "tau_h")?,
            eta_h: doc.require(&s, "eta_h")?,
            tau_x: doc.require(&s, "tau_x")?,
            eta_x: doc.require(&s, "eta_x")?,
            lambda: doc.require(&s, "lambda")?,
            mu_h: doc.require(&s, "mu_h")?,
            mu_x: doc.require(&s, "mu_x")?,
            omega: doc.require(&s, "omega")?,
            bias: vals.chunks(2).map(|c| C64::new(c[0], c[1])).collect(),
            ne: doc.require(&s, "ne")?,
            rho: doc.require(&s, "rho")?,
            nu: doc.require(&s, "nu")?,
        });
    }
    let p = UnfoldedParams { variant, layers: out, aud };
    p.validate(rd).map_err(|e| Error::config(e.to_string()))?;
    Ok(p)
}

pub fn save_params(p: &UnfoldedParams, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, params_to_string(p))?;
    Ok(())
}

pub fn load_params(path: &std::path::Path) -> Result<UnfoldedParams> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    params_from_str(&text)
}

/// `||X||_F^2` of the true data, the loss of an all-zero score vector.
pub fn zero_score_loss(x_true: &CMat) -> f64 {
    frob_sq(x_true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rmat(r: usize, c: usize, s: f64, rng: &mut ChaCha8Rng) -> CMat {
        CMat::from_fn(r, c, |_, _| C64::new(rng.random_range(-s..s), rng.random_range(-s..s)))
    }

    fn spec() -> InitSpec {
        InitSpec {
            tau: 0.05,
            eta: 0.5,
            lambda: 0.01,
            mu_h: 0.3,
            mu_x: 0.2,
            ne: 0.3,
            rho: 3.49,
            nu: 2.46,
            aud: AudParams { omega_h: 1.0, omega_x: 0.1, t_th: 2.0, l_bar: 0.5, t_aud: 2.0 },
        }
    }

    fn sample(seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mp, n, rp, rd) = (6, 4, 3, 4);
        let q = Constellation::qpsk();
        let h = rmat(mp, n, 1.0, &mut rng);
        let x_p = rmat(n, rp, 1.0, &mut rng);
        let x_true = CMat::from_fn(n, rd, |i, _| if i == 2 { ZERO } else { q.points()[rng.random_range(0..4)] });
        let y = mul(&h, &hcat(&x_p, &x_true)) + rmat(mp, rp + rd, 0.3, &mut rng);
        let h0 = &h + rmat(mp, n, 0.2, &mut rng);
        let x0 = crate::solvers::clamp_matrix(&(&x_true + rmat(n, rd, 0.3, &mut rng)), q.half_width());
        Sample { y, x_p, h0, x0, x_true }
    }

    #[test]
    fn momentum_free_layer_is_plain_forward_step() {
        let s = sample(1);
        let mut lp = UnfoldedParams::initial(Variant::Abc, 1, 4, &spec()).layers[0].clone();
        lp.eta_h = 0.0;
        lp.eta_x = 0.0;
        lp.lambda = 0.0;
        lp.tau_x = lp.tau_h;
        let mom = MomentumState { d_h: CMat::from_element(6, 4, C64::new(1.0, 1.0)), d_x: CMat::from_element(4, 4, C64::new(1.0, 0.0)) };
        let (h, x, _) = du_forward(&s.h0, &s.x0, &mom, &lp, &s.y, &s.x_p, Variant::Abc, 0.7).unwrap();
        let (h2, x2) = crate::solvers::fbs_forward(&s.h0, &s.x0, &s.y, &s.x_p, lp.tau_h, 0.0, 0.7).unwrap();
        assert!(frob_sq(&(h - h2)) < 1e-24 && frob_sq(&(x - x2)) < 1e-24);
    }

    #[test]
    fn momentum_accumulates_gradients() {
        let s = sample(2);
        let mut lp = UnfoldedParams::initial(Variant::Poem, 1, 4, &spec()).layers[0].clone();
        lp.eta_h = 1.0;
        lp.eta_x = 1.0;
        let mom0 = MomentumState::zeros(6, 4, 4);
        let (_, _, m1) = du_forward(&s.h0, &s.x0, &mom0, &lp, &s.y, &s.x_p, Variant::Poem, 0.7).unwrap();
        let (h1, x1) = (s.h0.map(|z| z * 0.9), s.x0.map(|z| z * 0.8));
        let (_, _, m2) = du_forward(&h1, &x1, &m1, &lp, &s.y, &s.x_p, Variant::Poem, 0.7).unwrap();
        let g0 = forward_parts(&s.h0, &s.x0, &s.y, &s.x_p, 0.0, 0.7);
        let g1 = forward_parts(&h1, &x1, &s.y, &s.x_p, 0.0, 0.7);
        let want = (g0.g_h + g1.g_h) * C64::from(lp.tau_h);
        assert!(frob_sq(&(m2.d_h - want)) < 1e-20);
    }

    #[test]
    fn abc_backward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bw = 0.7;
        let mut lp = UnfoldedParams::initial(Variant::Abc, 1, 3, &spec()).layers[0].clone();
        lp.mu_x = 0.05;
        let x = CMat::from_row_slice(1, 3, &[C64::new(0.2, 0.1), C64::new(-0.1, 0.3), C64::new(0.0, -0.2)]);
        let (_, y) = du_abc_backward(&CMat::zeros(4, 1), &x, &lp, 4, bw).unwrap();
        let s = crate::mathcore::group_shrinkage(&row_vec(&x, 0), 0.05).unwrap();
        for r in 0..3 {
            assert_relative_eq!((y[(0, r)] - s[r]).norm(), 0.0, epsilon = 1e-14);
        }
        lp.omega = 0.0;
        lp.bias = vec![C64::new(2.0, -0.1); 3];
        let (_, y) = du_abc_backward(&CMat::zeros(4, 1), &rmat(1, 3, 5.0, &mut rng), &lp, 4, bw).unwrap();
        assert!(y.iter().all(|z| *z == C64::new(bw, -0.1)));
    }

    #[test]
    fn poem_backward_examples() {
        let q = Constellation::qpsk();
        let mut lp = UnfoldedParams::initial(Variant::Poem, 1, 2, &spec()).layers[0].clone();
        let (_, y) = du_poem_backward(&CMat::zeros(4, 1), &CMat::zeros(1, 2), &lp, 4, &q).unwrap();
        assert!(y.iter().all(|z| *z == ZERO));
        lp.rho = 1e6;
        lp.nu = 0.0;
        let x = CMat::from_row_slice(1, 2, &[C64::new(0.3, 0.1), C64::new(-1.0, 0.4)]);
        let (_, y) = du_poem_backward(&CMat::zeros(4, 1), &x, &lp, 4, &q).unwrap();
        for r in 0..2 {
            let p = crate::mathcore::pme_uniform_scalar(x[(0, r)], &q, lp.ne).unwrap();
            assert_relative_eq!((y[(0, r)] - p).norm(), 0.0, epsilon = 1e-14);
        }
        lp.ne = 0.0;
        assert!(du_poem_backward(&CMat::zeros(4, 1), &x, &lp, 4, &q).is_err());
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rmat(3, 2, 1.0, &mut rng);
        assert_eq!(du_loss(&[1.0; 3], &x, &x).unwrap(), 0.0);
        assert_relative_eq!(du_loss(&[0.0; 3], &x, &x).unwrap(), frob_sq(&x), max_relative = 1e-15);
    }

    fn fd_check(variant: Variant, seed: u64) {
        let q = Constellation::qpsk();
        let s = sample(seed);
        let params = UnfoldedParams::initial(variant, 3, 4, &spec());
        let (_, g) = loss_and_grad(&s, &params, 3, &q).unwrap();
        let g = g.trainable();
        let theta = params.trainable();
        let names = params.coordinate_names();
        for j in 0..theta.len() {
            let h = 1e-6 * theta[j].abs().max(1e-2);
            let eval = |d: f64| {
                let mut p = params.clone();
                let mut t = theta.clone();
                t[j] += d;
                p.set_trainable(&t).unwrap();
                let out = run_du(&s.y, &s.x_p, &p, 3, &q, &s.h0, &s.x0).unwrap();
                du_loss(&out.scores, &out.x_d, &s.x_true).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-6);
            assert!(err < 1e-4, "{}: fd {fd} vs analytic {}", names[j], g[j]);
        }
    }

    #[test]
    fn abc_gradient_matches_finite_differences() {
        fd_check(Variant::Abc, 5);
    }

    #[test]
    fn poem_gradient_matches_finite_differences() {
        fd_check(Variant::Poem, 6);
    }

    #[test]
    fn first_layer_momentum_weight_has_zero_gradient() {
        let q = Constellation::qpsk();
        let params = UnfoldedParams::initial(Variant::Abc, 2, 4, &spec());
        let (_, g) = loss_and_grad(&sample(7), &params, 3, &q).unwrap();
        assert_eq!(g.layers[0].eta_h, 0.0);
        assert_eq!(g.layers[0].eta_x, 0.0);
    }

    #[test]
    fn duplicated_batch_gives_same_gradient() {
        let q = Constellation::qpsk();
        let params = UnfoldedParams::initial(Variant::Poem, 2, 4, &spec());
        let s = sample(8);
        let (l1, g1) = grad_params(std::slice::from_ref(&s), &params, 3, &q, Execution::Sequential).unwrap();
        let (l2, g2) = grad_params(&[s.clone(), s], &params, 3, &q, Execution::Sequential).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1.trainable(), g2.trainable());
    }

    #[test]
    fn parameter_file_round_trip() {
        let mut p = UnfoldedParams::initial(Variant::Abc, 2, 3, &spec());
        p.layers[1].bias[2] = C64::new(0.1, -1.0 / 3.0);
        let back = params_from_str(&params_to_string(&p)).unwrap();
        assert_eq!(back, p);
        assert!(params_from_str("format = other\n").is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let q = Constellation::qpsk();
        let params = UnfoldedParams::initial(Variant::Abc, 2, 4, &spec());
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 1, samples_per_epoch: 4, validation_size: 2, batch_size: 2, ..Default::default() };
        let rep = train(&params, &cfg, 3, &q, Execution::Sequential, |seed| Ok(sample(seed % 1000))).unwrap();
        assert_eq!(rep.params, params);
    }
}
