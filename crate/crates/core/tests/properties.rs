//! Property tests of the numerical building blocks.

use jacd::detection::{compute_metrics, hard_decide, DetectionResult, Truth};
use jacd::dunfold::{du_abc_backward, du_poem_backward, LayerParams};
use jacd::linalg::{CMat, C64};
use jacd::mathcore::{c_apme, group_shrinkage, prox_box_group, Constellation};
use proptest::prelude::*;

fn cvec(len: usize, scale: f64) -> impl Strategy<Value = Vec<C64>> {
    prop::collection::vec((-scale..scale, -scale..scale).prop_map(|(a, b)| C64::new(a, b)), len)
}

fn dist(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt()
}

fn layer(rd: usize, mu: f64, omega: f64, bias: f64, ne: f64) -> LayerParams {
    LayerParams {
        tau_h: 0.1,
        eta_h: 0.0,
        tau_x: 0.1,
        eta_x: 0.0,
        lambda: 0.0,
        mu_h: mu,
        mu_x: mu,
        omega,
        bias: vec![C64::new(bias, -bias); rd],
        ne,
        rho: 3.49,
        nu: 2.46,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn shrinkage_is_non_expansive(a in cvec(5, 3.0), b in cvec(5, 3.0), mu in 0.0..4.0f64) {
        let sa = group_shrinkage(&a, mu).unwrap();
        let sb = group_shrinkage(&b, mu).unwrap();
        prop_assert!(dist(&sa, &sb) <= dist(&a, &b) + 1e-12);
    }

    #[test]
    fn box_prox_is_feasible_and_non_expansive(
        a in cvec(4, 3.0), b in cvec(4, 3.0), kappa in 0.0..3.0f64, bw in 0.1..2.0f64,
    ) {
        let pa = prox_box_group(&a, kappa, bw);
        let pb = prox_box_group(&b, kappa, bw);
        for z in pa.iter().chain(&pb) {
            prop_assert!(z.re.abs() <= bw + 1e-12 && z.im.abs() <= bw + 1e-12);
        }
        prop_assert!(dist(&pa, &pb) <= dist(&a, &b) + 1e-9);
    }

    #[test]
    fn hard_decisions_are_idempotent(idx in prop::collection::vec(0usize..4, 12), noise in cvec(12, 0.3)) {
        let q = Constellation::qpsk();
        let x = CMat::from_fn(3, 4, |i, j| q.points()[idx[i * 4 + j]] + noise[i * 4 + j]);
        let once = hard_decide(&x, &q);
        prop_assert_eq!(hard_decide(&once, &q), once.clone());
        prop_assert!(once.iter().all(|z| q.points().contains(z)));
    }

    #[test]
    fn metrics_stay_in_range(
        xi in prop::collection::vec(any::<bool>(), 6),
        xi_hat in prop::collection::vec(any::<bool>(), 6),
        est in cvec(18, 2.0),
        h_est in cvec(12, 2.0),
    ) {
        let q = Constellation::qpsk();
        let x_d = CMat::from_fn(6, 3, |i, j| if xi[i] { q.points()[(i + j) % 4] } else { C64::new(0.0, 0.0) });
        let h = CMat::from_fn(2, 6, |i, j| if xi[j] { C64::new(1.0 + i as f64, 0.5) } else { C64::new(0.0, 0.0) });
        let est = CMat::from_fn(6, 3, |i, j| est[i * 3 + j]);
        let h_est = CMat::from_fn(2, 6, |i, j| h_est[i * 6 + j]);
        let res = DetectionResult::new(xi_hat.clone(), vec![0.5; 6], &est, &q).unwrap();
        let m = compute_metrics(Truth { xi: &xi, h: &h, x_d: &x_d }, &res, &h_est).unwrap();
        for v in [m.uder, m.aser, m.tpr, m.fpr] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.nmse >= 0.0);
        // masking never changes the activity decisions
        let direct = xi.iter().zip(&xi_hat).filter(|(a, b)| a != b).count() as f64 / 6.0;
        prop_assert_eq!(m.uder, direct);
    }

    #[test]
    fn activity_coefficient_in_unit_interval(x in cvec(6, 3.0), rho in -2.0..6.0f64, nu in 0.0..5.0f64) {
        let c = c_apme(&x, rho, nu);
        prop_assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn unfolded_backward_outputs_are_bounded(
        x in cvec(12, 4.0), mu in 0.0..1.0f64, omega in -3.0..3.0f64, bias in -1.0..1.0f64, ne in 0.01..3.0f64,
    ) {
        let q = Constellation::qpsk();
        let bw = q.half_width();
        let x_hat = CMat::from_fn(3, 4, |i, j| x[i * 4 + j]);
        let h_hat = CMat::from_fn(4, 3, |i, j| x[i * 3 + j]);
        let lp = layer(4, mu, omega, bias, ne);
        let (_, abc) = du_abc_backward(&h_hat, &x_hat, &lp, 2, bw).unwrap();
        let (_, poem) = du_poem_backward(&h_hat, &x_hat, &lp, 2, &q).unwrap();
        for z in abc.iter().chain(poem.iter()) {
            prop_assert!(z.re.abs() <= bw + 1e-12 && z.im.abs() <= bw + 1e-12);
        }
    }
}
