mod common;

use polymhe::baselines::{Estimator, KalmanFilter, KalmanState, WindowEstimator, WindowModel};
use polymhe::harness::{run_estimator, EstimatorKind};
use polymhe::mhe::StageCostWeights;
use polymhe::scenarios::{self, Plant};
use polymhe::{Matrix, NonlinearPlant};
use rand::Rng;

#[test]
fn ekf_jacobian_matches_central_differences() {
    let mut rng = common::rng(31);
    let h = 1e-6;
    for _ in 0..100 {
        let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let (p1, p2) = (rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0));
        let jac = NonlinearPlant::<f64>::jacobian(&x, p1, p2);
        for j in 0..2 {
            let (mut xp, mut xm) = (x, x);
            xp[j] += h;
            xm[j] -= h;
            let fp = NonlinearPlant::<f64>::dynamics(&xp, p1, p2);
            let fm = NonlinearPlant::<f64>::dynamics(&xm, p1, p2);
            for i in 0..2 {
                assert!(((fp[i] - fm[i]) / (2.0 * h) - jac[(i, j)]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn full_information_equals_kalman_filter_with_matching_weights() {
    // Linear-Gaussian case: with weights equal to the inverse covariances the
    // growing-window estimate at the newest sample is the filtered estimate.
    let mut s = scenarios::example1();
    let Plant::Polytopic { true_alpha } = s.plant.clone() else {
        unreachable!()
    };
    s.steps = 40;
    let traj = s.simulate_trial(3).unwrap();
    let (a, c) = s.model.blend(&true_alpha).unwrap();
    let (sw, sv, p0) = (0.1, 0.05, 10.0);
    let kf_state = KalmanState::new(
        vec![0.0, 0.0],
        Matrix::identity(2).scale(p0),
        Matrix::identity(2).scale(sw * sw),
        Matrix::identity(1).scale(sv * sv),
    )
    .unwrap();
    let mut kf = KalmanFilter::new("kf", kf_state, a.clone(), c.clone());
    let weights = StageCostWeights::new(
        Matrix::identity(2).scale(1.0 / (sw * sw)),
        Matrix::identity(1).scale(1.0 / (sv * sv)),
        1,
    )
    .unwrap();
    let mut fie = WindowEstimator::new(
        "fie",
        WindowModel::Linear { a, c },
        weights,
        1000,
        1.0 / p0,
        vec![0.0, 0.0],
    )
    .unwrap();
    for (k, y) in traj.outputs.iter().enumerate() {
        let xk = kf.step(y).unwrap().x_hat;
        let xf = fie.step(y).unwrap().x_hat;
        for (p, q) in xk.iter().zip(&xf) {
            assert!((p - q).abs() < 1e-7 * (1.0 + p.abs()), "k={k}: {xk:?} vs {xf:?}");
        }
    }
}

#[test]
fn kalman_filter_converges_on_noiseless_data() {
    let mut s = scenarios::example1();
    s.set_noise_levels(0.0, 0.0).unwrap();
    let traj = s.simulate_trial(0).unwrap();
    let Plant::Polytopic { true_alpha } = &s.plant else {
        unreachable!()
    };
    let (a, c) = s.model.blend(true_alpha).unwrap();
    let state = KalmanState::new(
        s.x0_prior.clone(),
        Matrix::identity(2).scale(10.0),
        Matrix::identity(2).scale(1e-4),
        Matrix::identity(1).scale(1e-4),
    )
    .unwrap();
    let mut kf = KalmanFilter::new("kf", state, a, c);
    let mut last = f64::INFINITY;
    for (k, y) in traj.outputs.iter().enumerate() {
        let x = kf.step(y).unwrap().x_hat;
        last = x.iter().zip(&traj.states[k]).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    }
    assert!(last < 1e-6, "final error {last}");
}

#[test]
fn adaptive_mhe_matches_full_information_before_the_window_fills() {
    // With the mixing weights pinned at the truth, both estimators solve the
    // same problem until the first slide.
    let mut s = scenarios::example1();
    let Plant::Polytopic { true_alpha } = s.plant.clone() else {
        unreachable!()
    };
    s.alpha_prior = true_alpha;
    s.mhe.arrival_alpha.lambda0 = 1e-9;
    let traj = s.simulate_trial(5).unwrap();
    let mhe = run_estimator(EstimatorKind::MheAdaptive, &s, &traj, false).unwrap();
    let fie = run_estimator(EstimatorKind::Fie, &s, &traj, false).unwrap();
    for k in 0..s.mhe.horizon {
        for (p, q) in mhe.estimates[k].iter().zip(&fie.estimates[k]) {
            assert!((p - q).abs() < 1e-6, "k={k}");
        }
    }
}
