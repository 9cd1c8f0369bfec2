//! Random cell-free deployments: geometry, large- and small-scale fading,
//! user activity, pilots, payload and the received signal.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{hcat, mul, CMat, C64};
use crate::mathcore::Constellation;
use crate::rng::{stream_rng, Stream};

const BOLTZMANN: f64 = 1.380_649e-23;

/// Physical and system constants of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    /// Number of access points.
    pub p: usize,
    /// Antennas per access point.
    pub m: usize,
    /// Number of user equipments.
    pub n: usize,
    /// Activity probability.
    pub alpha: f64,
    pub r_p: usize,
    pub r_d: usize,
    pub area_side_m: f64,
    pub h_ap_m: f64,
    pub h_ue_m: f64,
    pub sigma_sh_db: f64,
    pub fc_mhz: f64,
    pub bandwidth_hz: f64,
    pub noise_figure_db: f64,
    pub noise_temp_k: f64,
    pub tx_power_w: f64,
    pub power_ctrl_range_db: f64,
    pub d0_km: f64,
    pub d1_km: f64,
    pub constellation: Constellation,
}

impl Default for ScenarioConfig {
    /// The full-size deployment: 60 APs with 4 antennas, 400 UEs.
    fn default() -> Self {
        ScenarioConfig {
            p: 60,
            m: 4,
            n: 400,
            alpha: 0.2,
            r_p: 50,
            r_d: 200,
            area_side_m: 500.0,
            h_ap_m: 15.0,
            h_ue_m: 1.65,
            sigma_sh_db: 8.0,
            fc_mhz: 1900.0,
            bandwidth_hz: 20e6,
            noise_figure_db: 9.0,
            noise_temp_k: 290.0,
            tx_power_w: 0.1,
            power_ctrl_range_db: 12.0,
            d0_km: 0.01,
            d1_km: 0.05,
            constellation: Constellation::qpsk(),
        }
    }
}

impl ScenarioConfig {
    /// Reduced deployment used for quick experiments and the test suite.
    pub fn desk() -> Self {
        ScenarioConfig { p: 10, m: 4, n: 50, r_p: 20, r_d: 40, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::config(msg.to_string()));
        if self.p == 0 || self.m == 0 || self.n == 0 || self.r_p == 0 || self.r_d == 0 {
            return bad("P, M, N, R_P and R_D must all be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(self.d0_km > 0.0 && self.d0_km < self.d1_km) {
            return bad("path-loss breakpoints need 0 < D0 < D1");
        }
        if !(self.area_side_m >= 0.0) || !(self.sigma_sh_db >= 0.0) || !(self.power_ctrl_range_db >= 0.0) {
            return bad("area side, shadowing std and power-control range must be non-negative");
        }
        if !(self.h_ap_m >= 0.0 && self.h_ue_m >= 0.0 && self.fc_mhz > 0.0 && self.bandwidth_hz > 0.0) {
            return bad("heights must be non-negative, carrier and bandwidth positive");
        }
        if !(self.noise_temp_k > 0.0 && self.tx_power_w > 0.0) {
            return bad("noise temperature and transmit power must be positive");
        }
        Ok(())
    }

    /// Box half-width of the constellation.
    pub fn b(&self) -> f64 {
        self.constellation.half_width()
    }

    /// Total block length `R_P + R_D`.
    pub fn r(&self) -> usize {
        self.r_p + self.r_d
    }

    /// Receive dimension `M P`.
    pub fn mp(&self) -> usize {
        self.m * self.p
    }

    /// Path-loss constant `L` in dB.
    pub fn path_loss_db(&self) -> f64 {
        let lf = self.fc_mhz.log10();
        45.5 + 35.46 * lf - 13.82 * self.h_ap_m.log10() - (1.1 * lf - 0.7) * self.h_ue_m
    }

    /// Thermal noise power in watts.
    pub fn noise_power_w(&self) -> f64 {
        BOLTZMANN * self.noise_temp_k * self.bandwidth_hz * 10f64.powf(self.noise_figure_db / 10.0)
    }

    /// Factor mapping a path gain to an SNR with unit noise variance.
    pub fn snr_scale(&self) -> f64 {
        self.tx_power_w / self.noise_power_w()
    }
}

/// AP and UE positions in meters and the `N x P` distance matrix in km.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub ap_positions: Vec<[f64; 2]>,
    pub ue_positions: Vec<[f64; 2]>,
    pub d_km: DMatrix<f64>,
}

pub fn sample_geometry(cfg: &ScenarioConfig, seed: u64) -> Result<Geometry> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, Stream::Geometry);
    let side = cfg.area_side_m;
    let mut draw = |count: usize| -> Vec<[f64; 2]> {
        (0..count).map(|_| [side * rng.random::<f64>(), side * rng.random::<f64>()]).collect()
    };
    let ap_positions = draw(cfg.p);
    let ue_positions = draw(cfg.n);
    let dh = cfg.h_ap_m - cfg.h_ue_m;
    let d_km = DMatrix::from_fn(cfg.n, cfg.p, |n, p| {
        let dx = ue_positions[n][0] - ap_positions[p][0];
        let dy = ue_positions[n][1] - ap_positions[p][1];
        (dx * dx + dy * dy + dh * dh).sqrt() / 1000.0
    });
    Ok(Geometry { ap_positions, ue_positions, d_km })
}

/// Three-slope path gain (linear); shadowing `z_db` enters only beyond `D1`.
pub fn large_scale_gain(d_km: f64, z_db: f64, cfg: &ScenarioConfig) -> Result<f64> {
    if !(d_km > 0.0) {
        return Err(Error::invalid(format!("distance must be positive, got {d_km}")));
    }
    let l = cfg.path_loss_db();
    let (d0, d1) = (cfg.d0_km, cfg.d1_km);
    let g = if d_km > d1 {
        10f64.powf((-l + z_db) / 10.0) * d_km.powf(-3.5)
    } else if d_km > d0 {
        10f64.powf(-l / 10.0) * d1.powf(-1.5) * d_km.powi(-2)
    } else {
        10f64.powf(-l / 10.0) * d1.powf(-1.5) * d0.powi(-2)
    };
    Ok(g)
}

/// One draw of activity and fading for a fixed geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub geometry: Geometry,
    /// Shadow fading in dB, `N x P`.
    pub z_db: DMatrix<f64>,
    /// Path gains normalised to unit noise variance, `N x P`.
    pub beta: DMatrix<f64>,
    /// Power-control scale per UE, in `(0, 1]`.
    pub power_scale: Vec<f64>,
    pub xi: Vec<bool>,
    /// `MP x N`; rows `p M .. (p + 1) M` belong to AP `p`.
    pub h: CMat,
}

impl ChannelRealization {
    pub fn active_count(&self) -> usize {
        self.xi.iter().filter(|&&a| a).count()
    }

    /// Received SNR sum `g_n sum_p beta_{n,p}` of every UE.
    pub fn effective_gain(&self) -> Vec<f64> {
        (0..self.beta.nrows()).map(|n| self.power_scale[n] * self.beta.row(n).sum()).collect()
    }
}

pub(crate) fn complex_normal(rng: &mut impl Rng) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Power-control scales `min(1, gamma_ref / gamma_n)` with `gamma_ref` set
/// `range_db` above the weakest UE, so the spread never exceeds `range_db`.
pub fn power_control(gamma: &[f64], range_db: f64) -> Vec<f64> {
    let min = gamma.iter().cloned().fold(f64::INFINITY, f64::min);
    let reference = min * 10f64.powf(range_db / 10.0);
    gamma.iter().map(|&g| (reference / g).min(1.0)).collect()
}

pub fn sample_channel(cfg: &ScenarioConfig, geometry: &Geometry, seed: u64) -> Result<ChannelRealization> {
    cfg.validate()?;
    if geometry.d_km.shape() != (cfg.n, cfg.p) {
        return Err(Error::dims("geometry does not match N x P"));
    }
    let shadow = Normal::new(0.0, cfg.sigma_sh_db).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = stream_rng(seed, Stream::Shadowing);
    let z_db = DMatrix::from_fn(cfg.n, cfg.p, |_, _| shadow.sample(&mut rng));
    let scale = cfg.snr_scale();
    let mut beta = DMatrix::zeros(cfg.n, cfg.p);
    for n in 0..cfg.n {
        for p in 0..cfg.p {
            beta[(n, p)] = scale * large_scale_gain(geometry.d_km[(n, p)], z_db[(n, p)], cfg)?;
        }
    }
    let gamma: Vec<f64> = (0..cfg.n).map(|n| beta.row(n).sum()).collect();
    let power_scale = power_control(&gamma, cfg.power_ctrl_range_db);

    let mut rng = stream_rng(seed, Stream::Activity);
    let xi: Vec<bool> = (0..cfg.n).map(|_| cfg.alpha >= 1.0 || rng.random::<f64>() < cfg.alpha).collect();

    let mut rng = stream_rng(seed, Stream::Fading);
    let mp = cfg.mp();
    let mut h = CMat::zeros(mp, cfg.n);
    for n in 0..cfg.n {
        for p in 0..cfg.p {
            let amp = (power_scale[n] * beta[(n, p)]).sqrt();
            for m in 0..cfg.m {
                // fading is drawn for every UE so activity does not shift the stream
                let w = complex_normal(&mut rng);
                if xi[n] {
                    h[(p * cfg.m + m, n)] = w * amp;
                }
            }
        }
    }
    Ok(ChannelRealization { geometry: geometry.clone(), z_db, beta, power_scale, xi, h })
}

/// Number of alternating-projection sweeps in the pilot construction.
pub const ETF_ITERATIONS: usize = 500;

/// Lower bound on the coherence of `n` unit vectors in `C^r`.
pub fn welch_bound(n: usize, r: usize) -> f64 {
    if n <= r || n < 2 {
        return 0.0;
    }
    (((n - r) as f64) / ((r * (n - 1)) as f64)).sqrt()
}

/// Largest normalised inner product between two distinct pilot rows.
pub fn pilot_coherence(x_p: &CMat) -> f64 {
    let gram = crate::linalg::mul_a_bh(x_p, x_p);
    let n = gram.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            let denom = (gram[(i, i)].re * gram[(j, j)].re).sqrt();
            if denom > 0.0 {
                worst = worst.max(gram[(i, j)].norm() / denom);
            }
        }
    }
    worst
}

fn normalize_rows(x: &mut CMat, energy: f64) {
    for mut row in x.row_iter_mut() {
        let e: f64 = row.iter().map(|z| z.norm_sqr()).sum();
        if e > 0.0 {
            row *= C64::from((energy / e).sqrt());
        }
    }
}

/// Low-coherence pilots (`N x R_P`, row energy `R_P`) from alternating
/// projections between Gram matrices with Welch-bound off-diagonals and
/// Gram matrices of tight frames. Falls back to normalised Gaussian pilots
/// when the projection does not improve on them.
pub fn generate_pilots(cfg: &ScenarioConfig, seed: u64) -> Result<CMat> {
    cfg.validate()?;
    let (n, r) = (cfg.n, cfg.r_p);
    let mut rng = stream_rng(seed, Stream::Pilots);
    let mut gauss = CMat::from_fn(n, r, |_, _| complex_normal(&mut rng));
    normalize_rows(&mut gauss, r as f64);
    if n == 1 {
        return Ok(gauss);
    }
    let etf = etf_projection(&gauss, ETF_ITERATIONS);
    match etf {
        Some(x) if pilot_coherence(&x) < pilot_coherence(&gauss) => Ok(x),
        _ => Ok(gauss),
    }
}

fn etf_projection(start: &CMat, iterations: usize) -> Option<CMat> {
    let (n, r) = (start.nrows(), start.ncols());
    let mu = welch_bound(n, r);
    let rank = r.min(n);
    let mut frame = start.clone();
    normalize_rows(&mut frame, 1.0);
    for _ in 0..iterations {
        // structural step on the Gram matrix
        let mut gram = crate::linalg::mul_a_bh(&frame, &frame);
        for i in 0..n {
            gram[(i, i)] = C64::from(1.0);
            for j in 0..n {
                if i != j {
                    let g = gram[(i, j)];
                    let a = g.norm();
                    gram[(i, j)] = if a > 0.0 { g * (mu / a) } else { C64::from(mu) };
                }
            }
        }
        // spectral step: keep the leading eigenspace, scaled to a tight frame
        let eig = gram.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let scale = C64::from((n as f64 / r as f64).sqrt());
        let mut next = CMat::zeros(n, r);
        for (k, &idx) in order.iter().take(rank).enumerate() {
            next.set_column(k, &(eig.eigenvectors.column(idx) * scale));
        }
        normalize_rows(&mut next, 1.0);
        if next.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return None;
        }
        frame = next;
    }
    normalize_rows(&mut frame, r as f64);
    Some(frame)
}

/// Pilots and payload of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct TxSignals {
    /// `N x R_P`.
    pub x_p: CMat,
    /// `N x R_D`; rows of inactive UEs are zero.
    pub x_d: CMat,
}

/// Uniform i.i.d. constellation symbols for active rows.
pub fn sample_payload(cfg: &ScenarioConfig, xi: &[bool], seed: u64) -> Result<CMat> {
    if xi.len() != cfg.n {
        return Err(Error::dims(format!("activity vector has {} entries, expected {}", xi.len(), cfg.n)));
    }
    let mut rng = stream_rng(seed, Stream::Payload);
    let pts = cfg.constellation.points();
    let mut x = CMat::zeros(cfg.n, cfg.r_d);
    for n in 0..cfg.n {
        for r in 0..cfg.r_d {
            let s = pts[rng.random_range(0..pts.len())];
            if xi[n] {
                x[(n, r)] = s;
            }
        }
    }
    Ok(x)
}

/// Received block with unit noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RxObservation {
    /// `MP x R_P`.
    pub y_p: CMat,
    /// `MP x R_D`.
    pub y_d: CMat,
}

impl RxObservation {
    pub const N0: f64 = 1.0;

    pub fn y(&self) -> CMat {
        hcat(&self.y_p, &self.y_d)
    }
}

pub fn synthesize_rx(channel: &ChannelRealization, tx: &TxSignals, seed: u64) -> Result<RxObservation> {
    synthesize_rx_scaled(channel, tx, 1.0, seed)
}

/// Like [`synthesize_rx`] with noise standard deviation scaled by
/// `noise_scale`; `0` gives the noiseless observation.
pub fn synthesize_rx_scaled(
    channel: &ChannelRealization,
    tx: &TxSignals,
    noise_scale: f64,
    seed: u64,
) -> Result<RxObservation> {
    let h = &channel.h;
    let n = h.ncols();
    if tx.x_p.nrows() != n || tx.x_d.nrows() != n {
        return Err(Error::dims(format!(
            "H has {n} columns but X_P has {} rows and X_D has {}",
            tx.x_p.nrows(),
            tx.x_d.nrows()
        )));
    }
    let mut y_p = mul(h, &tx.x_p);
    let mut y_d = mul(h, &tx.x_d);
    let mut rng = stream_rng(seed, Stream::Noise);
    for y in [&mut y_p, &mut y_d] {
        for z in y.iter_mut() {
            let w = complex_normal(&mut rng);
            *z += w * noise_scale;
        }
    }
    Ok(RxObservation { y_p, y_d })
}

/// Everything drawn for one Monte-Carlo trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub channel: ChannelRealization,
    pub tx: TxSignals,
    pub rx: RxObservation,
}

impl Trial {
    pub fn x_true(&self) -> CMat {
        hcat(&self.tx.x_p, &self.tx.x_d)
    }
}

/// Draw a trial with the given pilots; every stream is derived from `seed`.
pub fn draw_trial(cfg: &ScenarioConfig, pilots: &CMat, seed: u64) -> Result<Trial> {
    if pilots.shape() != (cfg.n, cfg.r_p) {
        return Err(Error::dims("pilot matrix must be N x R_P"));
    }
    let geometry = sample_geometry(cfg, seed)?;
    let channel = sample_channel(cfg, &geometry, seed)?;
    let x_d = sample_payload(cfg, &channel.xi, seed)?;
    let tx = TxSignals { x_p: pilots.clone(), x_d };
    let rx = synthesize_rx(&channel, &tx, seed)?;
    Ok(Trial { channel, tx, rx })
}

/// Matched-filter channel estimate `Y_P X_P^H / R_P` (used in tests and as a
/// crude reference).
pub fn matched_filter_channel(y_p: &CMat, x_p: &CMat) -> CMat {
    let r = x_p.ncols() as f64;
    crate::linalg::mul_a_bh(y_p, x_p) / C64::from(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ZERO;
    use approx::assert_relative_eq;

    #[test]
    fn path_loss_constant_at_defaults() {
        let l = ScenarioConfig::default().path_loss_db();
        assert!((l - 140.7).abs() < 0.05, "L = {l}");
    }

    #[test]
    fn degenerate_square_gives_vertical_distance() {
        let cfg = ScenarioConfig { area_side_m: 0.0, ..ScenarioConfig::desk() };
        let g = sample_geometry(&cfg, 4).unwrap();
        for d in g.d_km.iter() {
            assert_relative_eq!(*d, 0.01335, epsilon = 1e-12);
        }
    }

    #[test]
    fn near_branch_ignores_distance_and_shadowing() {
        let cfg = ScenarioConfig::default();
        let l = cfg.path_loss_db();
        let want = 10f64.powf(-l / 10.0) * 0.05f64.powf(-1.5) * 0.01f64.powi(-2);
        for (d, z) in [(0.001, 5.0), (0.01, -3.0), (0.005, 0.0)] {
            assert_relative_eq!(large_scale_gain(d, z, &cfg).unwrap(), want, max_relative = 1e-14);
        }
        assert!(large_scale_gain(0.0, 0.0, &cfg).is_err());
    }

    #[test]
    fn path_gain_continuous_at_breakpoints() {
        let cfg = ScenarioConfig::default();
        for d in [cfg.d0_km, cfg.d1_km] {
            let lo = large_scale_gain(d, 0.0, &cfg).unwrap();
            let hi = large_scale_gain(d * (1.0 + 1e-15), 0.0, &cfg).unwrap();
            assert_relative_eq!(lo, hi, max_relative = 1e-12);
        }
    }

    #[test]
    fn inactive_columns_are_zero() {
        let cfg = ScenarioConfig::desk();
        let g = sample_geometry(&cfg, 1).unwrap();
        let ch = sample_channel(&cfg, &g, 1).unwrap();
        for n in 0..cfg.n {
            let zero = ch.h.column(n).iter().all(|z| *z == ZERO);
            assert_eq!(zero, !ch.xi[n]);
        }
        assert!(ch.beta.iter().all(|b| *b > 0.0));
    }

    #[test]
    fn full_activity_gives_nonzero_columns() {
        let cfg = ScenarioConfig { alpha: 1.0, ..ScenarioConfig::desk() };
        let g = sample_geometry(&cfg, 2).unwrap();
        let ch = sample_channel(&cfg, &g, 2).unwrap();
        assert_eq!(ch.active_count(), cfg.n);
    }

    #[test]
    fn power_control_bounds_spread() {
        let gamma = [1.0, 30.0, 1e4, 2.0];
        let g = power_control(&gamma, 12.0);
        let eff: Vec<f64> = gamma.iter().zip(&g).map(|(a, b)| a * b).collect();
        let max = eff.iter().cloned().fold(0.0, f64::max);
        let min = eff.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max / min <= 10f64.powf(1.2) * (1.0 + 1e-12));
        assert_eq!(g[0], 1.0);
    }

    #[test]
    fn pilot_rows_have_energy_r_p() {
        let cfg = ScenarioConfig::desk();
        let x = generate_pilots(&cfg, 9).unwrap();
        for row in x.row_iter() {
            let e: f64 = row.iter().map(|z| z.norm_sqr()).sum();
            assert_relative_eq!(e, cfg.r_p as f64, max_relative = 1e-9);
        }
        assert_eq!(x, generate_pilots(&cfg, 9).unwrap());
    }

    #[test]
    fn square_pilots_are_near_orthogonal() {
        let cfg = ScenarioConfig { n: 16, r_p: 16, ..ScenarioConfig::desk() };
        let x = generate_pilots(&cfg, 3).unwrap();
        assert!(pilot_coherence(&x) < 0.2);
    }

    #[test]
    fn noiseless_observation_is_exact() {
        let cfg = ScenarioConfig::desk();
        let pilots = generate_pilots(&cfg, 0).unwrap();
        let g = sample_geometry(&cfg, 5).unwrap();
        let ch = sample_channel(&cfg, &g, 5).unwrap();
        let x_d = sample_payload(&cfg, &ch.xi, 5).unwrap();
        let tx = TxSignals { x_p: pilots, x_d };
        let rx = synthesize_rx_scaled(&ch, &tx, 0.0, 5).unwrap();
        assert_eq!(rx.y(), mul(&ch.h, &hcat(&tx.x_p, &tx.x_d)));
    }

    #[test]
    fn payload_rows_follow_activity() {
        let cfg = ScenarioConfig::desk();
        let xi: Vec<bool> = (0..cfg.n).map(|n| n % 3 == 0).collect();
        let x = sample_payload(&cfg, &xi, 8).unwrap();
        for n in 0..cfg.n {
            for r in 0..cfg.r_d {
                let z = x[(n, r)];
                if xi[n] {
                    assert!(cfg.constellation.points().contains(&z));
                } else {
                    assert_eq!(z, ZERO);
                }
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ScenarioConfig { d0_km: 0.1, d1_km: 0.05, ..ScenarioConfig::desk() };
        assert!(cfg.validate().is_err());
        let cfg = ScenarioConfig { n: 0, ..ScenarioConfig::desk() };
        assert!(sample_geometry(&cfg, 0).is_err());
    }
}
