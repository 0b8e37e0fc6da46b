//! Adaptive arrival-cost parameters.
//!
//! The weight matrix `P` follows a recursive-least-squares recursion with a
//! data-driven forgetting factor `θ = 1 − 1/N`,
//! `N = (1 + rᵀPr)·σ/‖ε‖²`. The contracted matrix
//! `W = (I − P r rᵀ/(1 + rᵀPr))·P` is inflated to `W/θ` only while that keeps
//! `Tr(W)/θ ≤ c`, which keeps the sequence bounded. The prior mean is
//! replaced by the previous window's smoothed estimate.

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, norm_sq, outer, sub, Matrix};
use crate::scalar::Scalar;

/// Forgetting is skipped when `θ` does not exceed this.
pub const THETA_MIN: f64 = 1e-6;
/// Innovations with `‖ε‖` below this skip the forgetting computation.
pub const INNOVATION_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalCostState<T> {
    pub p: Matrix<T>,
    pub prior_mean: Vec<T>,
    pub sigma: T,
    pub cap: T,
    pub lambda0: T,
}

/// Which branch of the weight recursion produced `P⁺`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateBranch {
    /// `P⁺ = W/θ`.
    Forgetting,
    /// `P⁺ = W` because the trace cap (or the `θ` guard) rejected inflation.
    Contraction,
    /// `‖ε‖` under the floor; `P⁺ = W`.
    DegenerateInnovation,
}

impl UpdateBranch {
    pub fn as_str(self) -> &'static str {
        match self {
            UpdateBranch::Forgetting => "forgetting",
            UpdateBranch::Contraction => "contraction",
            UpdateBranch::DegenerateInnovation => "degenerate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRecord<T> {
    pub theta: Option<T>,
    pub trace: T,
    pub branch: UpdateBranch,
}

impl<T: Scalar> ArrivalCostState<T> {
    /// `P₀ = λ₀ I`.
    pub fn new(prior_mean: Vec<T>, lambda0: T, sigma: T, cap: T) -> Result<Self> {
        if !(lambda0 > T::zero() && sigma > T::zero() && cap > T::zero()) {
            return Err(Error::InvalidArgument(
                "arrival cost needs lambda0, sigma, c > 0".into(),
            ));
        }
        let n = prior_mean.len();
        Ok(Self {
            p: Matrix::identity(n).scale(lambda0),
            prior_mean,
            sigma,
            cap,
            lambda0,
        })
    }

    /// Arbitrary symmetric positive-definite starting weight.
    pub fn with_weight(prior_mean: Vec<T>, p: Matrix<T>, sigma: T, cap: T) -> Result<Self> {
        check_dim("arrival weight", prior_mean.len(), p.rows())?;
        if p.cholesky().is_none() {
            return Err(Error::InvalidArgument("arrival weight must be positive definite".into()));
        }
        let lambda0 = p.max_eigenvalue();
        Ok(Self {
            p,
            prior_mean,
            sigma,
            cap,
            lambda0,
        })
    }

    pub fn dim(&self) -> usize {
        self.prior_mean.len()
    }

    /// `P⁻¹`.
    pub fn inverse_weight(&self) -> Result<Matrix<T>> {
        self.p
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Internal("arrival weight lost positive definiteness".into()))
    }

    /// `(x − x̄)ᵀ P⁻¹ (x − x̄)`.
    pub fn prior_cost(&self, candidate: &[T]) -> Result<T> {
        check_dim("prior cost candidate", self.dim(), candidate.len())?;
        let chol = self
            .p
            .cholesky()
            .ok_or_else(|| Error::Internal("arrival weight lost positive definiteness".into()))?;
        let e = sub(candidate, &self.prior_mean);
        Ok(norm_sq(&chol.solve_lower(&e)))
    }

    pub fn update_weight(&self, regressor: &[T], innovation: &[T]) -> Result<Self> {
        self.update_weight_traced(regressor, innovation).map(|(s, _)| s)
    }

    /// Weight recursion, also returning `θ`, `Tr(P⁺)` and the branch taken.
    pub fn update_weight_traced(
        &self,
        regressor: &[T],
        innovation: &[T],
    ) -> Result<(Self, UpdateRecord<T>)> {
        check_dim("arrival regressor", self.dim(), regressor.len())?;
        let pr = self.p.mul_vec(regressor);
        let gain_den = T::one() + dot(regressor, &pr);
        // W = P − (P r)(P r)ᵀ / (1 + rᵀPr); equal to (I − P r rᵀ/(…))P for symmetric P.
        let mut w = self.p.clone();
        w.add_scaled_assign(-T::one() / gain_den, &outer(&pr, &pr));

        let eps_sq = norm_sq(innovation);
        let floor = T::lit(INNOVATION_FLOOR);
        let (theta, branch, next) = if eps_sq <= floor * floor {
            (None, UpdateBranch::DegenerateInnovation, w)
        } else {
            let big_n = gain_den * self.sigma / eps_sq;
            let theta = T::one() - T::one() / big_n;
            if theta > T::lit(THETA_MIN) && w.trace() / theta <= self.cap {
                (Some(theta), UpdateBranch::Forgetting, w.scale(T::one() / theta))
            } else {
                (Some(theta), UpdateBranch::Contraction, w)
            }
        };
        let next = next.symmetrized();
        if next.cholesky().is_none() {
            return Err(Error::Internal(format!(
                "arrival weight update produced a matrix that is not positive definite (trace {})",
                next.trace()
            )));
        }
        let record = UpdateRecord {
            theta,
            trace: next.trace(),
            branch,
        };
        Ok((
            Self {
                p: next,
                ..self.clone()
            },
            record,
        ))
    }

    /// Replaces the prior mean with the smoothed estimate; `P` is unchanged.
    pub fn update_prior_mean(&self, smoothed: &[T]) -> Result<Self> {
        check_dim("smoothed prior", self.dim(), smoothed.len())?;
        Ok(Self {
            prior_mean: smoothed.to_vec(),
            ..self.clone()
        })
    }
}
