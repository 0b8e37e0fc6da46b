use approx::assert_relative_eq;
use proptest::prelude::*;

use polymhe::arrival::ArrivalCostState;
use polymhe::baselines::{kf_step, KalmanState};
use polymhe::mhe::StageCostWeights;
use polymhe::model::simulate;
use polymhe::solver::{self, project_simplex};
use polymhe::{Matrix, NoiseSpec, PolytopicModel, QuadraticProgram, SimplexWeights, SolverOptions};

fn mat(n: usize, m: usize) -> impl Strategy<Value = Matrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, n * m).prop_map(move |d| Matrix::from_row_slice(n, m, &d))
}

fn simplex(q: usize) -> impl Strategy<Value = SimplexWeights<f64>> {
    prop::collection::vec(0.01..1.0f64, q).prop_map(|v| {
        let s: f64 = v.iter().sum();
        SimplexWeights::new(v.iter().map(|x| x / s).collect()).unwrap()
    })
}

fn spd(n: usize) -> impl Strategy<Value = Matrix<f64>> {
    mat(n, n).prop_map(move |b| b.matmul(&b.transpose()).add(&Matrix::identity(n).scale(0.1)))
}

fn rotation(theta: f64) -> Matrix<f64> {
    let (s, c) = theta.sin_cos();
    Matrix::from_row_slice(2, 2, &[c, -s, s, c])
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn blend_is_affine_in_the_weights(
        a in prop::collection::vec(mat(2, 2), 3),
        c in prop::collection::vec(mat(1, 2), 3),
        x in simplex(3),
        y in simplex(3),
        t in 0.0..1.0f64,
    ) {
        let model = PolytopicModel::new(a, c).unwrap();
        let mixed = SimplexWeights::mix(&x, &y, t).unwrap();
        let (am, cm) = model.blend(&mixed).unwrap();
        let (ax, cx) = model.blend(&x).unwrap();
        let (ay, cy) = model.blend(&y).unwrap();
        let a_lin = ax.scale(t).add(&ay.scale(1.0 - t));
        let c_lin = cx.scale(t).add(&cy.scale(1.0 - t));
        prop_assert!(am.sub(&a_lin).max_abs() < 1e-12);
        prop_assert!(cm.sub(&c_lin).max_abs() < 1e-12);
    }

    #[test]
    fn arrival_update_commutes_with_rotations(
        p in spd(2),
        r in prop::collection::vec(-2.0..2.0f64, 2),
        e in 0.01..2.0f64,
        theta in 0.0..6.3f64,
    ) {
        let u = rotation(theta);
        let base = ArrivalCostState::with_weight(vec![0.0, 0.0], p.clone(), 1.0, 1e3).unwrap();
        let turned = ArrivalCostState::with_weight(
            vec![0.0, 0.0],
            u.matmul(&p).matmul(&u.transpose()),
            1.0,
            1e3,
        )
        .unwrap();
        let a = base.update_weight(&r, &[e]).unwrap();
        let b = turned.update_weight(&u.mul_vec(&r), &[e]).unwrap();
        let back = u.transpose().matmul(&b.p).matmul(&u);
        prop_assert!(back.sub(&a.p).max_abs() < 1e-10 * (1.0 + a.p.max_abs()));
    }

    #[test]
    fn arrival_trace_stays_bounded_and_positive_definite(
        lambda0 in 0.1..20.0f64,
        sigma in 1e-4..2.0f64,
        cap in 0.5..20.0f64,
        steps in prop::collection::vec((prop::collection::vec(-3.0..3.0f64, 3), 0.0..2.0f64), 1..40),
    ) {
        let mut s = ArrivalCostState::new(vec![0.0; 3], lambda0, sigma, cap).unwrap();
        let limit = (3.0 * lambda0).max(cap);
        for (r, e) in steps {
            s = s.update_weight(&r, &[e]).unwrap();
            prop_assert!(s.p.trace() <= limit * (1.0 + 1e-12));
            prop_assert!(s.p.min_eigenvalue() > 0.0);
        }
    }

    #[test]
    fn stage_cost_is_sandwiched_by_its_comparison_functions(
        q in spd(2),
        r in spd(1),
        w in prop::collection::vec(-3.0..3.0f64, 2),
        v in prop::collection::vec(-3.0..3.0f64, 1),
    ) {
        let weights = StageCostWeights::new(q, r, 1).unwrap();
        let (ql, qu, rl, ru) = weights.stage_bounds();
        let w2: f64 = w.iter().map(|x| x * x).sum();
        let v2: f64 = v.iter().map(|x| x * x).sum();
        let cost = weights.stage_cost(&w, &v);
        prop_assert!(cost >= ql * w2 + rl * v2 - 1e-12);
        prop_assert!(cost <= qu * w2 + ru * v2 + 1e-12);
    }

    #[test]
    fn qp_solution_is_invariant_to_objective_scaling(
        b in mat(4, 3),
        f in prop::collection::vec(-2.0..2.0f64, 3),
        scale in 0.01..100.0f64,
    ) {
        let h = b.transpose().matmul(&b).add(&Matrix::identity(3).scale(0.05));
        let qp = QuadraticProgram::new(h.clone(), f.clone()).with_simplex_block(0..3);
        let scaled = QuadraticProgram::new(h.scale(scale), f.iter().map(|v| v * scale).collect())
            .with_simplex_block(0..3);
        let opts = SolverOptions::default();
        let z1 = solver::solve(&qp, &opts).unwrap().z;
        let z2 = solver::solve(&scaled, &opts).unwrap().z;
        for (a, c) in z1.iter().zip(&z2) {
            prop_assert!((a - c).abs() < 1e-7);
        }
    }

    #[test]
    fn simplex_projection_satisfies_the_variational_inequality(
        v in prop::collection::vec(-3.0..3.0f64, 1..7),
        z in prop::collection::vec(0.0..1.0f64, 7),
    ) {
        let p = project_simplex(&v);
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        // Any other simplex point z: (v − p)·(z − p) ≤ 0.
        let z = &z[..v.len()];
        let zs: f64 = z.iter().sum::<f64>().max(1e-9);
        let inner: f64 = (0..v.len()).map(|i| (v[i] - p[i]) * (z[i] / zs - p[i])).sum();
        prop_assert!(inner <= 1e-12);
    }

    #[test]
    fn kalman_covariance_stays_symmetric_positive_semidefinite(
        a in mat(2, 2),
        c in mat(1, 2),
        ys in prop::collection::vec(-5.0..5.0f64, 1..30),
    ) {
        let mut s = KalmanState::new(
            vec![0.0, 0.0],
            Matrix::identity(2),
            Matrix::identity(2).scale(0.01),
            Matrix::identity(1).scale(0.01),
        )
        .unwrap();
        for y in ys {
            s = kf_step(&s, &a, &c, &[y]).unwrap();
            prop_assert!(s.p.is_symmetric(1e-12 * (1.0 + s.p.max_abs())));
            prop_assert!(s.p.min_eigenvalue() >= -1e-12 * (1.0 + s.p.max_abs()));
        }
    }

    #[test]
    fn constant_mixing_equals_a_path_of_copies(
        a in prop::collection::vec(mat(2, 2), 2),
        c in prop::collection::vec(mat(1, 2), 2),
        alpha in simplex(2),
        steps in 1..20usize,
        seed in 0..1000u64,
    ) {
        let model = PolytopicModel::new(
            a.into_iter().map(|m| m.scale(0.5)).collect(),
            c,
        )
        .unwrap();
        let noise = NoiseSpec::isotropic(2, 1, 0.1, 0.1, seed).unwrap();
        let one = simulate(&model, std::slice::from_ref(&alpha), &[1.0, -1.0], &noise, steps).unwrap();
        let many = simulate(&model, &vec![alpha.clone(); steps], &[1.0, -1.0], &noise, steps).unwrap();
        prop_assert_eq!(one.states, many.states);
        prop_assert_eq!(one.outputs, many.outputs);
    }
}

#[test]
fn uniform_weights_blend_to_the_vertex_mean() {
    let a1 = Matrix::from_row_slice(2, 2, &[0.0, 0.72, 1.0, 0.28]);
    let a2 = Matrix::from_row_slice(2, 2, &[0.0, -0.59, 1.0, 1.57]);
    let c1 = Matrix::from_row_slice(1, 2, &[-1.46, -1.29]);
    let c2 = Matrix::from_row_slice(1, 2, &[-4.84, -2.90]);
    let model = PolytopicModel::new(vec![a1, a2], vec![c1, c2]).unwrap();
    let (a, c) = model.blend(&SimplexWeights::uniform(2)).unwrap();
    assert_relative_eq!(a[(0, 1)], 0.065, epsilon = 1e-15);
    assert_relative_eq!(a[(1, 1)], 0.925, epsilon = 1e-15);
    assert_relative_eq!(c[(0, 0)], -3.15, epsilon = 1e-15);
}
