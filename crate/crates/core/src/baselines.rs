//! Reference estimators: Kalman and extended Kalman filters, MHE with a
//! static prior weight, and a growing-window full-information estimator.

use std::collections::VecDeque;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{sub, Matrix};
use crate::mhe::{
    self, AdaptiveMhe, Formulation, Prior, StageCostWeights, StepDiagnostics, WindowBounds, WindowDynamics,
};
use crate::model::NonlinearPlant;
use crate::scalar::Scalar;
use crate::solver::SolverOptions;

/// Added to a singular innovation covariance.
pub const INNOVATION_REGULARIZATION: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState<T> {
    pub x_hat: Vec<T>,
    pub p: Matrix<T>,
    pub q: Matrix<T>,
    pub r: Matrix<T>,
    /// Set once any update needed the innovation-covariance regularization.
    pub regularized: bool,
}

impl<T: Scalar> KalmanState<T> {
    pub fn new(x_hat: Vec<T>, p: Matrix<T>, q: Matrix<T>, r: Matrix<T>) -> Result<Self> {
        let n = x_hat.len();
        check_dim("covariance", n, p.rows())?;
        check_dim("process covariance", n, q.rows())?;
        check_dim("measurement covariance", r.rows(), r.cols())?;
        Ok(Self {
            x_hat,
            p,
            q,
            r,
            regularized: false,
        })
    }
}

/// `x⁺ = A x`, `P⁺ = A P Aᵀ + Q`.
pub fn kf_predict<T: Scalar>(state: &KalmanState<T>, a: &Matrix<T>) -> Result<KalmanState<T>> {
    check_dim("transition", state.x_hat.len(), a.cols())?;
    let p = a.matmul(&state.p).matmul(&a.transpose()).add(&state.q).symmetrized();
    Ok(KalmanState {
        x_hat: a.mul_vec(&state.x_hat),
        p,
        ..state.clone()
    })
}

/// Measurement update with the Joseph-form covariance.
pub fn kf_update<T: Scalar>(state: &KalmanState<T>, c: &Matrix<T>, y: &[T]) -> Result<KalmanState<T>> {
    let n = state.x_hat.len();
    check_dim("output matrix", n, c.cols())?;
    check_dim("measurement", c.rows(), y.len())?;
    check_dim("measurement covariance", c.rows(), state.r.rows())?;
    let pct = state.p.matmul(&c.transpose());
    let mut s = c.matmul(&pct).add(&state.r).symmetrized();
    let mut regularized = state.regularized;
    let chol = match s.cholesky() {
        Some(ch) => ch,
        None => {
            for i in 0..s.rows() {
                s[(i, i)] = s[(i, i)] + T::lit(INNOVATION_REGULARIZATION);
            }
            regularized = true;
            s.cholesky()
                .ok_or_else(|| Error::Internal("innovation covariance is not positive semidefinite".into()))?
        }
    };
    // K = P Cᵀ S⁻¹, built column-wise from Kᵀ = S⁻¹ C P.
    let s_inv = chol.inverse();
    let k = pct.matmul(&s_inv);
    let innovation = sub(y, &c.mul_vec(&state.x_hat));
    let mut x_hat = state.x_hat.clone();
    for (x, d) in x_hat.iter_mut().zip(k.mul_vec(&innovation)) {
        *x = *x + d;
    }
    let i_kc = Matrix::identity(n).sub(&k.matmul(c));
    let p = i_kc
        .matmul(&state.p)
        .matmul(&i_kc.transpose())
        .add(&k.matmul(&state.r).matmul(&k.transpose()))
        .symmetrized();
    Ok(KalmanState {
        x_hat,
        p,
        regularized,
        ..state.clone()
    })
}

pub fn kf_step<T: Scalar>(state: &KalmanState<T>, a: &Matrix<T>, c: &Matrix<T>, y: &[T]) -> Result<KalmanState<T>> {
    kf_update(&kf_predict(state, a)?, c, y)
}

/// Extended Kalman filter step: the mean goes through `f`, the covariance
/// through `jacobian` evaluated at the previous estimate.
pub fn ekf_step<T: Scalar>(
    state: &KalmanState<T>,
    f: impl Fn(&[T]) -> Vec<T>,
    jacobian: impl Fn(&[T]) -> Matrix<T>,
    c: &Matrix<T>,
    y: &[T],
) -> Result<KalmanState<T>> {
    let a = jacobian(&state.x_hat);
    let mut predicted = kf_predict(state, &a)?;
    predicted.x_hat = f(&state.x_hat);
    check_dim("propagated state", state.x_hat.len(), predicted.x_hat.len())?;
    kf_update(&predicted, c, y)
}

/// One estimator's answer at one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOutput<T> {
    /// `x̂_{k|k}`.
    pub x_hat: Vec<T>,
    pub alpha_hat: Option<Vec<T>>,
    pub diagnostics: Option<StepDiagnostics<T>>,
}

/// Sequential estimator consuming one measurement per call.
pub trait Estimator<T: Scalar>: Send {
    fn name(&self) -> &str;
    fn step(&mut self, y: &[T]) -> Result<EstimatorOutput<T>>;
}

impl<T: Scalar> Estimator<T> for AdaptiveMhe<T> {
    fn name(&self) -> &str {
        "mhe-adaptive"
    }

    fn step(&mut self, y: &[T]) -> Result<EstimatorOutput<T>> {
        let (est, _, diag) = AdaptiveMhe::step(self, y)?;
        Ok(EstimatorOutput {
            x_hat: est.current().to_vec(),
            alpha_hat: Some(est.alpha_hat.into_vec()),
            diagnostics: Some(diag),
        })
    }
}

/// Linear Kalman filter on a fixed model. The first sample is a pure
/// measurement update of the prior.
#[derive(Debug, Clone)]
pub struct KalmanFilter<T> {
    pub name: String,
    pub state: KalmanState<T>,
    pub a: Matrix<T>,
    pub c: Matrix<T>,
    started: bool,
}

impl<T: Scalar> KalmanFilter<T> {
    pub fn new(name: impl Into<String>, state: KalmanState<T>, a: Matrix<T>, c: Matrix<T>) -> Self {
        Self {
            name: name.into(),
            state,
            a,
            c,
            started: false,
        }
    }
}

impl<T: Scalar> Estimator<T> for KalmanFilter<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn step(&mut self, y: &[T]) -> Result<EstimatorOutput<T>> {
        self.state = if self.started {
            kf_step(&self.state, &self.a, &self.c, y)?
        } else {
            kf_update(&self.state, &self.c, y)?
        };
        self.started = true;
        Ok(EstimatorOutput {
            x_hat: self.state.x_hat.clone(),
            alpha_hat: None,
            diagnostics: None,
        })
    }
}

/// EKF for the nonlinear benchmark plant with a given `p_1` schedule.
#[derive(Debug, Clone)]
pub struct ExtendedKalmanFilter<T> {
    pub name: String,
    pub state: KalmanState<T>,
    /// `p_1(k)` per transition; the last entry is held beyond the end.
    pub p1: Vec<T>,
    pub p2: T,
    k: usize,
}

impl<T: Scalar> ExtendedKalmanFilter<T> {
    pub fn new(name: impl Into<String>, state: KalmanState<T>, p1: Vec<T>, p2: T) -> Result<Self> {
        if p1.is_empty() {
            return Err(Error::InvalidArgument("empty parameter schedule".into()));
        }
        Ok(Self {
            name: name.into(),
            state,
            p1,
            p2,
            k: 0,
        })
    }
}

impl<T: Scalar> Estimator<T> for ExtendedKalmanFilter<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn step(&mut self, y: &[T]) -> Result<EstimatorOutput<T>> {
        let c = NonlinearPlant::<T>::output_matrix();
        self.state = if self.k == 0 {
            kf_update(&self.state, &c, y)?
        } else {
            let p1 = self.p1[(self.k - 1).min(self.p1.len() - 1)];
            let p2 = self.p2;
            ekf_step(
                &self.state,
                |x| NonlinearPlant::dynamics(x, p1, p2),
                |x| NonlinearPlant::jacobian(x, p1, p2),
                &c,
                y,
            )?
        };
        self.k += 1;
        Ok(EstimatorOutput {
            x_hat: self.state.x_hat.clone(),
            alpha_hat: None,
            diagnostics: None,
        })
    }
}

/// Model used by a [`WindowEstimator`].
#[derive(Debug, Clone)]
pub enum WindowModel<T> {
    Linear { a: Matrix<T>, c: Matrix<T> },
    /// Nonlinear benchmark plant relinearized along the previous estimate at
    /// every sample, with `passes` Gauss-Newton refinements per window.
    Relinearized {
        p1: Vec<T>,
        p2: T,
        passes: usize,
    },
}

/// MHE with a static prior weight `L·I` whose mean is the previous
/// window's smoothed estimate. With a large horizon this is the
/// growing-window full-information estimator.
#[derive(Debug, Clone)]
pub struct WindowEstimator<T> {
    pub name: String,
    pub model: WindowModel<T>,
    pub weights: StageCostWeights<T>,
    pub horizon: usize,
    pub prior_weight: T,
    pub formulation: Formulation,
    pub solver: SolverOptions<T>,
    prior_mean: Vec<T>,
    measurements: VecDeque<Vec<T>>,
    start: usize,
    last: Option<Vec<Vec<T>>>,
}

impl<T: Scalar> WindowEstimator<T> {
    pub fn new(
        name: impl Into<String>,
        model: WindowModel<T>,
        weights: StageCostWeights<T>,
        horizon: usize,
        prior_weight: T,
        prior_mean: Vec<T>,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        if !(prior_weight > T::zero()) {
            return Err(Error::InvalidArgument("prior weight must be positive".into()));
        }
        check_dim("state prior", weights.n_x(), prior_mean.len())?;
        Ok(Self {
            name: name.into(),
            model,
            weights,
            horizon,
            prior_weight,
            formulation: Formulation::Auto,
            solver: SolverOptions::default(),
            prior_mean,
            measurements: VecDeque::new(),
            start: 0,
            last: None,
        })
    }

    fn dynamics(&self, lin: &[Vec<T>]) -> Result<WindowDynamics<T>> {
        let samples = self.measurements.len();
        match &self.model {
            WindowModel::Linear { a, c } => Ok(WindowDynamics::constant(a, c, samples)),
            WindowModel::Relinearized { p1, p2, .. } => {
                let c = NonlinearPlant::<T>::output_matrix();
                let mut out = WindowDynamics {
                    transitions: Vec::with_capacity(samples),
                    offsets: Vec::with_capacity(samples),
                    outputs: vec![c; samples],
                };
                for (j, x) in lin.iter().take(samples - 1).enumerate() {
                    let p = p1[(self.start + j).min(p1.len() - 1)];
                    let jac = NonlinearPlant::jacobian(x, p, *p2);
                    let fx = NonlinearPlant::dynamics(x, p, *p2);
                    out.offsets.push(sub(&fx, &jac.mul_vec(x)));
                    out.transitions.push(jac);
                }
                Ok(out)
            }
        }
    }

    /// Linearization points: the previous window's estimate shifted to the
    /// current start, extended by one model step.
    fn linearization_points(&self) -> Vec<Vec<T>> {
        let samples = self.measurements.len();
        let mut pts: Vec<Vec<T>> = match &self.last {
            Some(prev) => {
                let shift = prev.len() + 1 - samples;
                prev[shift..].to_vec()
            }
            None => vec![self.prior_mean.clone()],
        };
        if let WindowModel::Relinearized { p1, p2, .. } = &self.model {
            while pts.len() < samples {
                let t = self.start + pts.len() - 1;
                let p = p1[t.min(p1.len() - 1)];
                let next = NonlinearPlant::dynamics(pts.last().expect("non-empty"), p, *p2);
                pts.push(next);
            }
        }
        pts.resize(samples, self.prior_mean.clone());
        pts
    }
}

impl<T: Scalar> Estimator<T> for WindowEstimator<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn step(&mut self, y: &[T]) -> Result<EstimatorOutput<T>> {
        check_dim("measurement", self.weights.n_p(), y.len())?;
        if self.measurements.len() == self.horizon + 1 {
            let prev = self
                .last
                .as_ref()
                .ok_or_else(|| Error::Internal("full window without a previous solve".into()))?;
            self.prior_mean = prev[1].clone();
            self.measurements.pop_front();
            self.start += 1;
        }
        self.measurements.push_back(y.to_vec());
        let ys: Vec<Vec<T>> = self.measurements.iter().cloned().collect();
        let prior = Prior::isotropic(self.prior_mean.clone(), self.prior_weight);
        let passes = match &self.model {
            WindowModel::Linear { .. } => 1,
            WindowModel::Relinearized { passes, .. } => (*passes).max(1),
        };
        let mut lin = self.linearization_points();
        let mut states = Vec::new();
        for _ in 0..passes {
            let dynamics = self.dynamics(&lin)?;
            let sol = mhe::solve_state_window(
                &dynamics,
                &ys,
                &prior,
                &self.weights,
                &WindowBounds::default(),
                self.formulation,
                &self.solver,
            )?;
            states = sol.states;
            lin = states.clone();
        }
        let x_hat = states.last().expect("window holds a state").clone();
        self.last = Some(states);
        Ok(EstimatorOutput {
            x_hat,
            alpha_hat: None,
            diagnostics: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(p: f64, q: f64, r: f64) -> KalmanState<f64> {
        KalmanState::new(
            vec![0.0],
            Matrix::from_diag(&[p]),
            Matrix::from_diag(&[q]),
            Matrix::from_diag(&[r]),
        )
        .unwrap()
    }

    #[test]
    fn scalar_riccati_by_hand() {
        let s = scalar_state(1.0, 0.0, 1.0);
        let one = Matrix::identity(1);
        let next = kf_step(&s, &one, &one, &[2.0]).unwrap();
        // P⁻ = 1, K = 0.5, P = 0.5, x = 0.5·2.
        assert!((next.p[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((next.x_hat[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn huge_measurement_noise_is_pure_prediction() {
        let mut s = scalar_state(1.0, 0.1, 1e300);
        s.x_hat = vec![3.0];
        let a = Matrix::from_diag(&[0.5]);
        let next = kf_step(&s, &a, &Matrix::identity(1), &[100.0]).unwrap();
        assert!((next.x_hat[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn singular_innovation_is_regularized() {
        let s = scalar_state(0.0, 0.0, 0.0);
        let next = kf_step(&s, &Matrix::identity(1), &Matrix::identity(1), &[1.0]).unwrap();
        assert!(next.regularized);
        assert!(next.x_hat[0].is_finite());
    }

    #[test]
    fn ekf_on_linear_map_matches_kf() {
        let a = Matrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.7]);
        let c = Matrix::from_row_slice(1, 2, &[1.0, 0.5]);
        let s = KalmanState::new(
            vec![0.3f64, -0.2],
            Matrix::identity(2),
            Matrix::identity(2).scale(0.01),
            Matrix::identity(1).scale(0.1),
        )
        .unwrap();
        let kf = kf_step(&s, &a, &c, &[0.4]).unwrap();
        let ekf = ekf_step(&s, |x| a.mul_vec(x), |_| a.clone(), &c, &[0.4]).unwrap();
        for i in 0..2 {
            assert!((kf.x_hat[i] - ekf.x_hat[i]).abs() < 1e-15);
        }
        assert!(kf.p.sub(&ekf.p).max_abs() < 1e-15);
    }
}
