//! Window problems and the dual state/mixing-weight iteration.
//!
//! At each sample the estimator alternates two convex subproblems over the
//! window `y_s..y_k`:
//!
//! * the state problem, with the model `A(α)`, `C(α)` frozen:
//!   `Ψ_x = Γ(x_s) + Σ wᵀQ⁻¹w + Σ vᵀR⁻¹v`;
//! * the mixing problem, with the state sequence frozen:
//!   `Ψ_α = Λ(α) + Σ dᵀD⁻¹d + Σ vᵀR⁻¹v (+ Σ w_αᵀQ_α⁻¹w_α)`.
//!
//! The loop stops on the iteration bound, a small relative decrease, or the
//! iteration cap. Iterates that would raise either cost are rejected.

use std::collections::VecDeque;

use crate::arrival::{ArrivalCostState, UpdateRecord};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{norm_inf, norm_sq, sub, Matrix};
use crate::model::{PolytopicModel, SimplexWeights};
use crate::scalar::Scalar;
use crate::solver::{self, QpStatus, QuadraticProgram, SolverOptions};

/// Windows with more samples than this use the banded state-space form
/// under [`Formulation::Auto`].
pub const CONDENSE_MAX_SAMPLES: usize = 25;
/// Default random-walk weight on per-step mixing increments.
pub const ALPHA_WALK_WEIGHT: f64 = 1e4;

/// Stage-cost weights `Q⁻¹`, `R⁻¹`, `Q_α⁻¹`, `D⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCostWeights<T> {
    pub q_inv: Matrix<T>,
    pub r_inv: Matrix<T>,
    pub q_alpha_inv: Matrix<T>,
    pub d_inv: Matrix<T>,
}

impl<T: Scalar> StageCostWeights<T> {
    /// `D⁻¹ = Q⁻¹` and `Q_α⁻¹ = 10⁴ I_q`.
    pub fn new(q_inv: Matrix<T>, r_inv: Matrix<T>, q: usize) -> Result<Self> {
        let w = Self {
            d_inv: q_inv.clone(),
            q_inv,
            r_inv,
            q_alpha_inv: Matrix::identity(q).scale(T::lit(ALPHA_WALK_WEIGHT)),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [
            ("Q⁻¹", &self.q_inv),
            ("R⁻¹", &self.r_inv),
            ("Q_α⁻¹", &self.q_alpha_inv),
            ("D⁻¹", &self.d_inv),
        ] {
            if !m.is_symmetric(T::tol(1e-12, 16.0) * (T::one() + m.max_abs()))
                || m.cholesky().is_none()
            {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be symmetric positive definite"
                )));
            }
        }
        check_dim("mismatch weight", self.q_inv.rows(), self.d_inv.rows())
    }

    pub fn n_x(&self) -> usize {
        self.q_inv.rows()
    }

    pub fn n_p(&self) -> usize {
        self.r_inv.rows()
    }

    /// `ℓ(w, v) = wᵀQ⁻¹w + vᵀR⁻¹v`.
    pub fn stage_cost(&self, w: &[T], v: &[T]) -> T {
        self.q_inv.quad_form(w) + self.r_inv.quad_form(v)
    }

    /// `(λ_min(Q⁻¹), λ_max(Q⁻¹), λ_min(R⁻¹), λ_max(R⁻¹))`, the quadratic
    /// lower and upper comparison functions of the stage cost.
    pub fn stage_bounds(&self) -> (T, T, T, T) {
        (
            self.q_inv.min_eigenvalue(),
            self.q_inv.max_eigenvalue(),
            self.r_inv.min_eigenvalue(),
            self.r_inv.max_eigenvalue(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> StageCostWeights<U> {
        StageCostWeights {
            q_inv: self.q_inv.cast(),
            r_inv: self.r_inv.cast(),
            q_alpha_inv: self.q_alpha_inv.cast(),
            d_inv: self.d_inv.cast(),
        }
    }
}

/// Quadratic prior `(z − mean)ᵀ W (z − mean)` with `W` the inverse weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior<T> {
    pub mean: Vec<T>,
    pub inv_weight: Matrix<T>,
}

impl<T: Scalar> Prior<T> {
    pub fn new(mean: Vec<T>, inv_weight: Matrix<T>) -> Result<Self> {
        check_dim("prior weight", mean.len(), inv_weight.rows())?;
        check_dim("prior weight", mean.len(), inv_weight.cols())?;
        Ok(Self { mean, inv_weight })
    }

    pub fn from_arrival(state: &ArrivalCostState<T>) -> Result<Self> {
        Self::new(state.prior_mean.clone(), state.inverse_weight()?)
    }

    /// Static weight `L·I`.
    pub fn isotropic(mean: Vec<T>, weight: T) -> Self {
        let n = mean.len();
        Self {
            mean,
            inv_weight: Matrix::identity(n).scale(weight),
        }
    }

    pub fn cost(&self, z: &[T]) -> T {
        self.inv_weight.quad_form(&sub(z, &self.mean))
    }
}

/// Per-transition dynamics `x_{j+1} = A_j x_j + b_j + w_j` and outputs
/// `y_j = C_j x_j + v_j` over one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowDynamics<T> {
    pub transitions: Vec<Matrix<T>>,
    pub offsets: Vec<Vec<T>>,
    pub outputs: Vec<Matrix<T>>,
}

impl<T: Scalar> WindowDynamics<T> {
    /// Time-invariant window of `samples` outputs.
    pub fn constant(a: &Matrix<T>, c: &Matrix<T>, samples: usize) -> Self {
        let m = samples.saturating_sub(1);
        Self {
            transitions: vec![a.clone(); m],
            offsets: vec![vec![T::zero(); a.rows()]; m],
            outputs: vec![c.clone(); samples],
        }
    }

    pub fn from_alpha(model: &PolytopicModel<T>, alpha: &SimplexWeights<T>, samples: usize) -> Result<Self> {
        let (a, c) = model.blend(alpha)?;
        Ok(Self::constant(&a, &c, samples))
    }

    /// `α_j` drives transition `j` and output `j`.
    pub fn from_alpha_path(model: &PolytopicModel<T>, path: &[SimplexWeights<T>]) -> Result<Self> {
        let mut out = Self {
            transitions: Vec::new(),
            offsets: Vec::new(),
            outputs: Vec::new(),
        };
        for (j, alpha) in path.iter().enumerate() {
            let (a, c) = model.blend(alpha)?;
            if j + 1 < path.len() {
                out.transitions.push(a);
                out.offsets.push(vec![T::zero(); model.n_x()]);
            }
            out.outputs.push(c);
        }
        Ok(out)
    }

    pub fn samples(&self) -> usize {
        self.outputs.len()
    }

    pub fn n_x(&self) -> usize {
        self.outputs[0].cols()
    }

    pub fn n_p(&self) -> usize {
        self.outputs[0].rows()
    }

    fn validate(&self, ys: &[Vec<T>]) -> Result<()> {
        if self.outputs.is_empty() {
            return Err(Error::InvalidArgument("empty estimation window".into()));
        }
        check_dim("window outputs", self.outputs.len(), ys.len())?;
        check_dim("window transitions", self.outputs.len() - 1, self.transitions.len())?;
        check_dim("window offsets", self.transitions.len(), self.offsets.len())?;
        let (n, p) = (self.n_x(), self.n_p());
        for a in &self.transitions {
            check_dim("transition matrix", n, a.rows())?;
            check_dim("transition matrix", n, a.cols())?;
        }
        for c in &self.outputs {
            check_dim("output matrix", p, c.rows())?;
            check_dim("output matrix", n, c.cols())?;
        }
        for y in ys {
            check_dim("measurement", p, y.len())?;
        }
        Ok(())
    }

    /// Forward simulation from `x0` with the given process noise.
    pub fn propagate(&self, x0: &[T], w: &[Vec<T>]) -> Vec<Vec<T>> {
        let mut states = vec![x0.to_vec()];
        for (j, a) in self.transitions.iter().enumerate() {
            let mut next = a.mul_vec(&states[j]);
            for ((x, b), e) in next.iter_mut().zip(&self.offsets[j]).zip(&w[j]) {
                *x = *x + *b + *e;
            }
            states.push(next);
        }
        states
    }
}

/// Componentwise box `lower ≤ z ≤ upper`; infinite entries are free.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet<T> {
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

impl<T: Scalar> BoxSet<T> {
    pub fn new(lower: Vec<T>, upper: Vec<T>) -> Result<Self> {
        check_dim("box bounds", lower.len(), upper.len())?;
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(Error::InvalidArgument("box has lower > upper".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn contains(&self, z: &[T], tol: T) -> bool {
        z.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&v, (&l, &u))| v >= l - tol && v <= u + tol)
    }
}

/// Optional constraint sets on states, process noise and measurement noise.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBounds<T> {
    pub state: Option<BoxSet<T>>,
    pub process: Option<BoxSet<T>>,
    pub measurement: Option<BoxSet<T>>,
}

impl<T> Default for WindowBounds<T> {
    fn default() -> Self {
        Self {
            state: None,
            process: None,
            measurement: None,
        }
    }
}

impl<T> WindowBounds<T> {
    pub fn is_unbounded(&self) -> bool {
        self.state.is_none() && self.process.is_none() && self.measurement.is_none()
    }
}

/// How the state window is posed to the solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Formulation {
    /// Condensed for short windows, banded state-space otherwise; falls back
    /// to whichever form can express the active bounds.
    #[default]
    Auto,
    /// Decision variables `(x_s, w_s..w_{k−1})`.
    Condensed,
    /// Decision variables `x_s..x_k`, noise eliminated.
    StateSpace,
    /// `x`, `w` and `v` all explicit, tied by equality constraints.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateWindowSolution<T> {
    pub states: Vec<Vec<T>>,
    pub w: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// `Ψ_x` at the optimum.
    pub cost: T,
    /// `Γ(x̂_s)` at the optimum.
    pub prior_cost: T,
}

/// Evaluates `Ψ_x` for a candidate state sequence, returning the implied
/// residuals and the prior term.
pub fn state_window_cost<T: Scalar>(
    dynamics: &WindowDynamics<T>,
    ys: &[Vec<T>],
    prior: &Prior<T>,
    weights: &StageCostWeights<T>,
    states: &[Vec<T>],
) -> (Vec<Vec<T>>, Vec<Vec<T>>, T, T) {
    let mut w = Vec::with_capacity(dynamics.transitions.len());
    for (j, a) in dynamics.transitions.iter().enumerate() {
        let pred = a.mul_vec(&states[j]);
        w.push(
            (0..pred.len())
                .map(|i| states[j + 1][i] - pred[i] - dynamics.offsets[j][i])
                .collect::<Vec<T>>(),
        );
    }
    let v: Vec<Vec<T>> = dynamics
        .outputs
        .iter()
        .zip(ys)
        .zip(states)
        .map(|((c, y), x)| sub(y, &c.mul_vec(x)))
        .collect();
    let prior_cost = prior.cost(&states[0]);
    let mut cost = prior_cost;
    for e in &w {
        cost = cost + weights.q_inv.quad_form(e);
    }
    for e in &v {
        cost = cost + weights.r_inv.quad_form(e);
    }
    (w, v, cost, prior_cost)
}

fn pick_formulation<T>(requested: Formulation, bounds: &WindowBounds<T>, samples: usize) -> Formulation {
    match requested {
        Formulation::Auto => {
            let (s, p, m) = (
                bounds.state.is_some(),
                bounds.process.is_some(),
                bounds.measurement.is_some(),
            );
            if m || (s && p) {
                Formulation::Full
            } else if s {
                Formulation::StateSpace
            } else if p || samples <= CONDENSE_MAX_SAMPLES {
                Formulation::Condensed
            } else {
                Formulation::StateSpace
            }
        }
        other => other,
    }
}

fn infeasible<T: Scalar>(qp: &QuadraticProgram<T>) -> Error {
    Error::WindowInfeasible {
        k: 0,
        dump: qp.to_text(),
    }
}

fn run_qp<T: Scalar>(qp: &QuadraticProgram<T>, opts: &SolverOptions<T>) -> Result<Vec<T>> {
    let sol = solver::solve(qp, opts)?;
    match sol.status {
        QpStatus::Infeasible => Err(infeasible(qp)),
        QpStatus::Optimal => Ok(sol.z),
        QpStatus::MaxIter => {
            log::warn!(
                "window QP stopped at the iteration cap (stationarity {})",
                sol.kkt.stationarity
            );
            Ok(sol.z)
        }
    }
}

fn repeat_bounds<T: Scalar>(set: &Option<BoxSet<T>>, dim: usize, count: usize) -> (Vec<T>, Vec<T>) {
    match set {
        Some(b) => (b.lower.repeat(count), b.upper.repeat(count)),
        None => (
            vec![T::neg_infinity(); dim * count],
            vec![T::infinity(); dim * count],
        ),
    }
}

/// Solves the state window for fixed dynamics.
pub fn solve_state_window<T: Scalar>(
    dynamics: &WindowDynamics<T>,
    ys: &[Vec<T>],
    prior: &Prior<T>,
    weights: &StageCostWeights<T>,
    bounds: &WindowBounds<T>,
    formulation: Formulation,
    opts: &SolverOptions<T>,
) -> Result<StateWindowSolution<T>> {
    dynamics.validate(ys)?;
    let n = dynamics.n_x();
    check_dim("state prior", n, prior.mean.len())?;
    check_dim("process weight", n, weights.q_inv.rows())?;
    check_dim("measurement weight", dynamics.n_p(), weights.r_inv.rows())?;
    for (set, dim) in [
        (&bounds.state, n),
        (&bounds.process, n),
        (&bounds.measurement, dynamics.n_p()),
    ] {
        if let Some(b) = set {
            check_dim("window bounds", dim, b.lower.len())?;
        }
    }

    let states = match pick_formulation(formulation, bounds, dynamics.samples()) {
        Formulation::Condensed => {
            if bounds.state.is_some() || bounds.measurement.is_some() {
                return Err(Error::InvalidArgument(
                    "condensed form only supports process-noise bounds".into(),
                ));
            }
            condensed(dynamics, ys, prior, weights, bounds, opts)?
        }
        Formulation::StateSpace => {
            if bounds.process.is_some() || bounds.measurement.is_some() {
                return Err(Error::InvalidArgument(
                    "state-space form only supports state bounds".into(),
                ));
            }
            state_space(dynamics, ys, prior, weights, bounds, opts)?
        }
        Formulation::Full | Formulation::Auto => full(dynamics, ys, prior, weights, bounds, opts)?,
    };
    let (w, v, cost, prior_cost) = state_window_cost(dynamics, ys, prior, weights, &states);
    Ok(StateWindowSolution {
        states,
        w,
        v,
        cost,
        prior_cost,
    })
}

// Normal equations G z = g of the cost zᵀGz − 2gᵀz + const.
struct Normal<T> {
    g_mat: Matrix<T>,
    g_vec: Vec<T>,
}

impl<T: Scalar> Normal<T> {
    fn new(dim: usize) -> Self {
        Self {
            g_mat: Matrix::zeros(dim, dim),
            g_vec: vec![T::zero(); dim],
        }
    }

    /// Adds `(M z − r)ᵀ W (M z − r)` where `M` acts on the columns listed in
    /// `cols` (a dense row block).
    fn add_residual(&mut self, m: &Matrix<T>, cols: usize, r: &[T], w: &Matrix<T>) {
        let wm = w.matmul(m);
        let mt = m.transpose();
        let block = mt.matmul(&wm);
        self.g_mat.add_block(cols, cols, &block);
        let rhs = mt.mul_vec(&w.mul_vec(r));
        for (i, v) in rhs.into_iter().enumerate() {
            self.g_vec[cols + i] = self.g_vec[cols + i] + v;
        }
    }

    fn into_qp(self) -> QuadraticProgram<T> {
        let two = T::lit(2.0);
        QuadraticProgram::new(
            self.g_mat.scale(two).symmetrized(),
            self.g_vec.into_iter().map(|v| -two * v).collect(),
        )
    }
}

fn condensed<T: Scalar>(
    dynamics: &WindowDynamics<T>,
    ys: &[Vec<T>],
    prior: &Prior<T>,
    weights: &StageCostWeights<T>,
    bounds: &WindowBounds<T>,
    opts: &SolverOptions<T>,
) -> Result<Vec<Vec<T>>> {
    let n = dynamics.n_x();
    let m = dynamics.transitions.len();
    let dim = n * (m + 1);
    let mut normal = Normal::new(dim);
    normal.add_residual(&Matrix::identity(n), 0, &prior.mean, &prior.inv_weight);
    for j in 0..m {
        normal.add_residual(&Matrix::identity(n), n * (j + 1), &vec![T::zero(); n], &weights.q_inv);
    }
    // x_j = T_j z + t_j.
    let mut t_map = Matrix::zeros(n, dim);
    t_map.set_block(0, 0, &Matrix::identity(n));
    let mut t_off = vec![T::zero(); n];
    for j in 0..=m {
        let c = &dynamics.outputs[j];
        let r = sub(&ys[j], &c.mul_vec(&t_off));
        normal.add_residual(&c.matmul(&t_map), 0, &r, &weights.r_inv);
        if j < m {
            let a = &dynamics.transitions[j];
            t_map = a.matmul(&t_map);
            t_map.add_block(0, n * (j + 1), &Matrix::identity(n));
            t_off = a.mul_vec(&t_off);
            for (x, b) in t_off.iter_mut().zip(&dynamics.offsets[j]) {
                *x = *x + *b;
            }
        }
    }
    let mut qp = normal.into_qp();
    if let Some(pb) = &bounds.process {
        let mut lower = vec![T::neg_infinity(); n];
        let mut upper = vec![T::infinity(); n];
        let (lw, uw) = repeat_bounds(&Some(pb.clone()), n, m);
        lower.extend(lw);
        upper.extend(uw);
        qp = qp.with_bounds(lower, upper);
    }
    let z = run_qp(&qp, opts)?;
    let w: Vec<Vec<T>> = (0..m).map(|j| z[n * (j + 1)..n * (j + 2)].to_vec()).collect();
    Ok(dynamics.propagate(&z[..n], &w))
}

fn state_space_normal<T: Scalar>(
    dynamics: &WindowDynamics<T>,
    ys: &[Vec<T>],
    prior: &Prior<T>,
    weights: &StageCostWeights<T>,
) -> Normal<T> {
    let n = dynamics.n_x();
    let m = dynamics.transitions.len();
    let mut normal = Normal::new(n * (m + 1));
    normal.add_residual(&Matrix::identity(n), 0, &prior.mean, &prior.inv_weight);
    for j in 0..m {
        // w_j = [−A_j  I] (x_j, x_{j+1}) − b_j.
        let mut blk = Matrix::zeros(n, 2 * n);
        blk.set_block(0, 0, &dynamics.transitions[j].scale(-T::one()));
        blk.set_block(0, n, &Matrix::identity(n));
        normal.add_residual(&blk, n * j, &dynamics.offsets[j], &weights.q_inv);
    }
    for j in 0..=m {
        normal.add_residual(&dynamics.outputs[j], n * j, &ys[j], &weights.r_inv);
    }
    normal
}

fn state_space<T: Scalar>(
    dynamics: &WindowDynamics<T>,
    ys: &[Vec<T>],
    prior: &Prior<T>,
    weights: &StageCostWeights<T>,
    bounds: &WindowBounds<T>,
    opts: &SolverOptions<T>,
) -> Result<Vec<Vec<T>>> {
    let n = dynamics.n_x();
    let samples = dynamics.samples();
    let normal = state_space_normal(dynamics, ys, prior, weights);
    let z = if bounds.state.is_none() {
        // Block-tridiagonal and positive definite: a banded factorization
        // suffices and keeps long windows cheap.
        let chol = normal.g_mat.cholesky_banded(2 * n - 1).ok_or_else(|| {
            Error::Internal("state-space normal matrix is not positive definite".into())
        })?;
        chol.solve(&normal.g_vec)
    } else {
        let (lower, upper) = repeat_bounds(&bounds.state, n, samples);
        run_qp(&normal.into_qp().with_bounds(lower, upper), opts)?
    };
    Ok(z.chunks(n).map(<[T]>::to_vec).collect())
}

fn full<T: Scalar>(
    dynamics: &WindowDynamics<T>,
    ys: &[Vec<T>],
    prior: &Prior<T>,
    weights: &StageCostWeights<T>,
    bounds: &WindowBounds<T>,
    opts: &SolverOptions<T>,
) -> Result<Vec<Vec<T>>> {
    let n = dynamics.n_x();
    let p = dynamics.n_p();
    let m = dynamics.transitions.len();
    let xs = n * (m + 1);
    let ws = xs + n * m;
    let dim = ws + p * (m + 1);
    let mut normal = Normal::new(dim);
    normal.add_residual(&Matrix::identity(n), 0, &prior.mean, &prior.inv_weight);
    for j in 0..m {
        normal.add_residual(&Matrix::identity(n), xs + n * j, &vec![T::zero(); n], &weights.q_inv);
    }
    for j in 0..=m {
        normal.add_residual(&Matrix::identity(p), ws + p * j, &vec![T::zero(); p], &weights.r_inv);
    }
    let rows = n * m + p * (m + 1);
    let mut a_eq = Matrix::zeros(rows, dim);
    let mut b_eq = vec![T::zero(); rows];
    for j in 0..m {
        // x_{j+1} − A_j x_j − w_j = b_j.
        let r0 = n * j;
        a_eq.set_block(r0, n * j, &dynamics.transitions[j].scale(-T::one()));
        a_eq.set_block(r0, n * (j + 1), &Matrix::identity(n));
        a_eq.set_block(r0, xs + n * j, &Matrix::identity(n).scale(-T::one()));
        b_eq[r0..r0 + n].copy_from_slice(&dynamics.offsets[j]);
    }
    for j in 0..=m {
        // C_j x_j + v_j = y_j.
        let r0 = n * m + p * j;
        a_eq.set_block(r0, n * j, &dynamics.outputs[j]);
        a_eq.set_block(r0, ws + p * j, &Matrix::identity(p));
        b_eq[r0..r0 + p].copy_from_slice(&ys[j]);
    }
    let (mut lower, mut upper) = repeat_bounds(&bounds.state, n, m + 1);
    let (lw, uw) = repeat_bounds(&bounds.process, n, m);
    let (lv, uv) = repeat_bounds(&bounds.measurement, p, m + 1);
    lower.extend(lw.into_iter().chain(lv));
    upper.extend(uw.into_iter().chain(uv));
    let qp = normal
        .into_qp()
        .with_equalities(a_eq, b_eq)
        .with_bounds(lower, upper);
    let z = run_qp(&qp, opts)?;
    Ok(z[..xs].chunks(n).map(<[T]>::to_vec).collect())
}

/// Mixing-weight parameterization inside a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlphaMode {
    /// One `α` for the whole window.
    #[default]
    Constant,
    /// `α_s..α_k` tied by penalized random-walk increments.
    PerStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaWindowSolution<T> {
    /// Mixing weights at the newest sample.
    pub alpha: SimplexWeights<T>,
    /// One entry per window sample.
    pub path: Vec<SimplexWeights<T>>,
    pub d: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub w_alpha: Vec<Vec<T>>,
    /// `Ψ_α` at the optimum.
    pub cost: T,
    /// `Λ(α̂_s)` at the optimum.
    pub prior_cost: T,
    /// Set when the states carry no information about `α` (all zero) and
    /// the prior mean was returned.
    pub flat: bool,
}

/// Evaluates `Ψ_α` for a mixing path along fixed states.
pub fn alpha_window_cost<T: Scalar>(
    model: &PolytopicModel<T>,
    states: &[Vec<T>],
    ys: &[Vec<T>],
    prior: &Prior<T>,
    weights: &StageCostWeights<T>,
    path: &[SimplexWeights<T>],
) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>, Vec<Vec<T>>, T, T)> {
    let mut d = Vec::new();
    let mut v = Vec::new();
    let mut w_alpha = Vec::new();
    for (j, x) in states.iter().enumerate() {
        let (a, c) = model.blend(&path[j])?;
        if j + 1 < states.len() {
            d.push(sub(&states[j + 1], &a.mul_vec(x)));
            w_alpha.push(sub(path[j + 1].as_slice(), path[j].as_slice()));
        }
        v.push(sub(&ys[j], &c.mul_vec(x)));
    }
    let prior_cost = prior.cost(path[0].as_slice());
    let mut cost = prior_cost;
    for e in &d {
        cost = cost + weights.d_inv.quad_form(e);
    }
    for e in &v {
        cost = cost + weights.r_inv.quad_form(e);
    }
    for e in &w_alpha {
        cost = cost + weights.q_alpha_inv.quad_form(e);
    }
    Ok((d, v, w_alpha, cost, prior_cost))
}

/// Solves the mixing window for a fixed state sequence. `ridge` adds
/// `ridge·‖α − ᾱ‖²` so flat directions resolve toward the prior mean.
#[allow(clippy::too_many_arguments)]
pub fn solve_alpha_window<T: Scalar>(
    model: &PolytopicModel<T>,
    states: &[Vec<T>],
    ys: &[Vec<T>],
    prior: &Prior<T>,
    weights: &StageCostWeights<T>,
    mode: AlphaMode,
    ridge: T,
    opts: &SolverOptions<T>,
) -> Result<AlphaWindowSolution<T>> {
    let q = model.q();
    check_dim("window states", ys.len(), states.len())?;
    check_dim("mixing prior", q, prior.mean.len())?;
    if states.is_empty() {
        return Err(Error::InvalidArgument("empty estimation window".into()));
    }
    for x in states {
        check_dim("window state", model.n_x(), x.len())?;
    }
    let samples = states.len();
    let flat = states.iter().all(|x| norm_inf(x) <= T::min_positive_value());
    let path = if flat {
        vec![SimplexWeights::project(&prior.mean); samples]
    } else {
        let blocks = match mode {
            AlphaMode::Constant => 1,
            AlphaMode::PerStep => samples,
        };
        let block_of = |j: usize| if blocks == 1 { 0 } else { j };
        let mut normal = Normal::new(q * blocks);
        normal.add_residual(&Matrix::identity(q), 0, &prior.mean, &prior.inv_weight);
        if ridge > T::zero() {
            for b in 0..blocks {
                normal.add_residual(&Matrix::identity(q), q * b, &prior.mean, &Matrix::identity(q).scale(ridge));
            }
        }
        for j in 0..samples {
            let col = q * block_of(j);
            if j + 1 < samples {
                normal.add_residual(&model.state_regressor(&states[j]), col, &states[j + 1], &weights.d_inv);
            }
            normal.add_residual(&model.output_regressor(&states[j]), col, &ys[j], &weights.r_inv);
        }
        if blocks > 1 {
            for j in 0..samples - 1 {
                let mut blk = Matrix::zeros(q, 2 * q);
                blk.set_block(0, 0, &Matrix::identity(q).scale(-T::one()));
                blk.set_block(0, q, &Matrix::identity(q));
                normal.add_residual(&blk, q * j, &vec![T::zero(); q], &weights.q_alpha_inv);
            }
        }
        let mut qp = normal.into_qp();
        for b in 0..blocks {
            qp = qp.with_simplex_block(q * b..q * (b + 1));
        }
        let z = run_qp(&qp, opts)?;
        let weights_of = |b: usize| SimplexWeights::project(&z[q * b..q * (b + 1)]);
        (0..samples).map(|j| weights_of(block_of(j))).collect()
    };
    let (d, v, w_alpha, cost, prior_cost) = alpha_window_cost(model, states, ys, prior, weights, &path)?;
    Ok(AlphaWindowSolution {
        alpha: path[samples - 1].clone(),
        path,
        d,
        v,
        w_alpha,
        cost,
        prior_cost,
        flat,
    })
}

/// `Λ(α_s) + Σ w_αᵀQ_α⁻¹w_α` along a mixing path.
fn path_cost<T: Scalar>(prior: &Prior<T>, weights: &StageCostWeights<T>, path: &[SimplexWeights<T>]) -> T {
    let mut c = prior.cost(path[0].as_slice());
    for pair in path.windows(2) {
        c = c + weights
            .q_alpha_inv
            .quad_form(&sub(pair[1].as_slice(), pair[0].as_slice()));
    }
    c
}

/// `⌈log₂((ε·Ψ₁ − Γ_l)/Γ_min + 1)⌉ + 1`, with the logarithm's argument
/// clamped at 1 and the result floored at 1.
pub fn compute_iteration_bound<T: Scalar>(psi1: T, gamma_l: T, gamma_min: T, epsilon: T) -> Result<usize> {
    if !(gamma_min > T::zero()) {
        return Err(Error::InvalidBound(format!("Γ_min must be positive, got {gamma_min}")));
    }
    if !(psi1 >= T::zero()) || !psi1.is_finite() || !gamma_l.is_finite() {
        return Err(Error::InvalidBound(format!("non-finite or negative costs ({psi1}, {gamma_l})")));
    }
    let arg = ((epsilon * psi1 - gamma_l) / gamma_min + T::one()).max(T::one());
    Ok(ceil_log2_plus_one(arg))
}

/// Worst-case bound `⌈log₂(ℰ N (γ̄_w(w) + γ̄_v(v)) + 1)⌉ + 1` with
/// `ℰ = ε/Γ_min` and quadratic comparison functions taken from `weights`.
pub fn conservative_iteration_bound<T: Scalar>(
    epsilon: T,
    gamma_min: T,
    horizon: usize,
    w_sup: T,
    v_sup: T,
    weights: &StageCostWeights<T>,
) -> Result<usize> {
    if !(gamma_min > T::zero()) {
        return Err(Error::InvalidBound(format!("Γ_min must be positive, got {gamma_min}")));
    }
    let (_, qw, _, qv) = weights.stage_bounds();
    let big_n = T::from_usize(horizon).expect("horizon fits scalar");
    let arg = epsilon / gamma_min * big_n * (qw * w_sup * w_sup + qv * v_sup * v_sup) + T::one();
    Ok(ceil_log2_plus_one(arg.max(T::one())))
}

fn ceil_log2_plus_one<T: Scalar>(arg: T) -> usize {
    let lg = arg.log2().ceil();
    let lg = lg.to_f64_lossy();
    if lg >= (usize::MAX / 2) as f64 {
        usize::MAX / 2
    } else {
        (lg.max(0.0) as usize + 1).max(1)
    }
}

/// Right-hand side `((εΨ₁ − Γ_l)/Γ_min + 1)^{1/(l−1)} − 1` of the
/// normalized-cost condition; `None` for `l < 2` or when the bracket is
/// not positive.
pub fn g_threshold<T: Scalar>(psi1: T, gamma_l: T, gamma_min: T, epsilon: T, l: usize) -> Option<T> {
    if l < 2 || !(gamma_min > T::zero()) {
        return None;
    }
    let base = (epsilon * psi1 - gamma_l) / gamma_min + T::one();
    if !(base > T::zero()) || !base.is_finite() {
        return None;
    }
    let exp = T::one() / T::from_usize(l - 1).expect("iteration count fits scalar");
    Some(base.powf(exp) - T::one())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    BoundReached,
    Converged,
    MaxIterations,
    /// The next iterate would have increased a cost and was discarded.
    Rejected,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::BoundReached => "bound",
            StopReason::Converged => "converged",
            StopReason::MaxIterations => "max_iter",
            StopReason::Rejected => "rejected",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualIterationReport<T> {
    /// Dual objective after the state solve: `Ψ_x` plus the mixing-side
    /// terms `Λ + Σ w_αᵀQ_α⁻¹w_α` of the frozen path.
    pub costs_x: Vec<T>,
    /// Dual objective after the mixing solve: `Ψ_α` plus `Γ` of the frozen
    /// states.
    pub costs_alpha: Vec<T>,
    /// `g(k, i) = Ψ_x^i / Ψ_x^1`.
    pub g: Vec<T>,
    /// `Γ(x̂_s^i)` per accepted iterate.
    pub prior_costs: Vec<T>,
    pub l_used: usize,
    /// Iteration bound evaluated at the last accepted iterate, when its
    /// preconditions hold.
    pub l_bound: Option<usize>,
    pub stop: StopReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepEstimate<T> {
    /// Smoothed states `x̂_{s..k|k}`.
    pub x_hat: Vec<Vec<T>>,
    pub alpha_hat: SimplexWeights<T>,
    pub alpha_path: Vec<SimplexWeights<T>>,
    pub w_hat: Vec<Vec<T>>,
    pub v_hat: Vec<Vec<T>>,
    pub d_hat: Vec<Vec<T>>,
    pub w_alpha_hat: Vec<Vec<T>>,
    /// Sample index `s` of `x_hat[0]`.
    pub window_start: usize,
}

impl<T: Scalar> StepEstimate<T> {
    /// `x̂_{k|k}`.
    pub fn current(&self) -> &[T] {
        self.x_hat.last().expect("window holds at least one state")
    }
}

/// Dual-loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSettings<T> {
    pub l_max: usize,
    /// Relative decrease of `Ψ_x` below which the loop stops.
    pub epsilon_stop: T,
    /// `ε` of the iteration bound.
    pub bound_epsilon: T,
    pub stop_at_bound: bool,
    pub monotone_slack: T,
    pub alpha_mode: AlphaMode,
    pub formulation: Formulation,
    pub alpha_ridge: T,
    pub solver: SolverOptions<T>,
}

impl<T: Scalar> Default for DualSettings<T> {
    fn default() -> Self {
        Self {
            l_max: 30,
            epsilon_stop: T::lit(1e-6),
            bound_epsilon: T::lit(0.5),
            stop_at_bound: true,
            monotone_slack: T::lit(1e-9),
            alpha_mode: AlphaMode::Constant,
            formulation: Formulation::Auto,
            alpha_ridge: T::lit(1e-10),
            solver: SolverOptions::default(),
        }
    }
}

/// Data of one window.
#[derive(Debug, Clone, Copy)]
pub struct WindowProblem<'a, T> {
    pub model: &'a PolytopicModel<T>,
    pub ys: &'a [Vec<T>],
    pub prior_x: &'a Prior<T>,
    pub prior_alpha: &'a Prior<T>,
    pub weights: &'a StageCostWeights<T>,
    pub bounds: &'a WindowBounds<T>,
    pub window_start: usize,
}

/// Alternates the state and mixing windows starting from `init_alpha`.
pub fn dual_iterate<T: Scalar>(
    problem: &WindowProblem<'_, T>,
    init_alpha: &SimplexWeights<T>,
    settings: &DualSettings<T>,
) -> Result<(StepEstimate<T>, DualIterationReport<T>)> {
    if settings.l_max == 0 {
        return Err(Error::InvalidArgument("l_max must be at least 1".into()));
    }
    check_dim("initial mixing weights", problem.model.q(), init_alpha.len())?;
    let samples = problem.ys.len();
    let r_top = problem.weights.r_inv.max_eigenvalue();
    let data_scale: T = problem.ys.iter().map(|y| norm_sq(y)).sum::<T>() * r_top;
    let zero_cost = T::epsilon() * T::epsilon() * (T::one() + data_scale);

    let mut path = vec![init_alpha.clone(); samples];
    let mut report = DualIterationReport {
        costs_x: Vec::new(),
        costs_alpha: Vec::new(),
        g: Vec::new(),
        prior_costs: Vec::new(),
        l_used: 0,
        l_bound: None,
        stop: StopReason::MaxIterations,
    };
    let mut best: Option<StepEstimate<T>> = None;
    for i in 1..=settings.l_max {
        let frozen_alpha = path_cost(problem.prior_alpha, problem.weights, &path);
        let dynamics = WindowDynamics::from_alpha_path(problem.model, &path)?;
        let xs = solve_state_window(
            &dynamics,
            problem.ys,
            problem.prior_x,
            problem.weights,
            problem.bounds,
            settings.formulation,
            &settings.solver,
        )?;
        let al = solve_alpha_window(
            problem.model,
            &xs.states,
            problem.ys,
            problem.prior_alpha,
            problem.weights,
            settings.alpha_mode,
            settings.alpha_ridge,
            &settings.solver,
        )?;
        // The two subproblems are block minimizations of one objective; the
        // recorded costs add back the terms each block holds fixed.
        let cost_x = xs.cost + frozen_alpha;
        let cost_alpha = al.cost + xs.prior_cost;
        if let (Some(&px), Some(&pa)) = (report.costs_x.last(), report.costs_alpha.last()) {
            if cost_x > px + settings.monotone_slack || cost_alpha > pa + settings.monotone_slack {
                report.stop = StopReason::Rejected;
                break;
            }
        }
        report.costs_x.push(cost_x);
        report.costs_alpha.push(cost_alpha);
        report.prior_costs.push(xs.prior_cost);
        let psi1 = report.costs_x[0];
        report.g.push(if psi1 > T::zero() { cost_x / psi1 } else { T::one() });
        report.l_used = i;
        best = Some(StepEstimate {
            x_hat: xs.states,
            alpha_hat: al.alpha.clone(),
            alpha_path: al.path.clone(),
            w_hat: xs.w,
            v_hat: xs.v,
            d_hat: al.d,
            w_alpha_hat: al.w_alpha,
            window_start: problem.window_start,
        });
        path = al.path;

        let gamma_min = report
            .prior_costs
            .iter()
            .copied()
            .fold(T::infinity(), T::min);
        report.l_bound = if psi1 > zero_cost && gamma_min > T::zero() {
            compute_iteration_bound(psi1, xs.prior_cost, gamma_min, settings.bound_epsilon).ok()
        } else {
            None
        };
        if psi1 <= zero_cost {
            report.stop = StopReason::Converged;
            break;
        }
        if settings.stop_at_bound && report.l_bound.is_some_and(|b| i >= b) {
            report.stop = StopReason::BoundReached;
            break;
        }
        if i > 1 {
            let prev = report.costs_x[i - 2];
            if prev - cost_x <= settings.epsilon_stop * prev {
                report.stop = StopReason::Converged;
                break;
            }
        }
        if i == settings.l_max {
            report.stop = StopReason::MaxIterations;
        }
    }
    let estimate = best.expect("first iterate is always accepted");
    Ok((estimate, report))
}

/// Which smoothed output enters the arrival-cost innovation when the window
/// slides from `s` to `s + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InnovationSource {
    /// `y_{s+1} − C(α̂_k) x̂_{s+1|k}` from the window just solved.
    #[default]
    Smoothed,
    /// `y_{s+1} − C(α̂_{s+1}) x̂_{s+1|s+1}`, the estimate made when the
    /// sample arrived.
    Filtered,
}

/// Arrival-cost hyper-parameters `(λ, σ, c)`; `P₀ = λ I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrivalSettings<T> {
    pub lambda0: T,
    pub sigma: T,
    pub cap: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MheConfig<T> {
    pub horizon: usize,
    pub dual: DualSettings<T>,
    pub arrival_x: ArrivalSettings<T>,
    pub arrival_alpha: ArrivalSettings<T>,
    pub innovation: InnovationSource,
    pub bounds: WindowBounds<T>,
}

impl<T: Scalar> MheConfig<T> {
    pub fn new(horizon: usize, arrival_x: ArrivalSettings<T>) -> Self {
        Self {
            horizon,
            dual: DualSettings::default(),
            arrival_x,
            arrival_alpha: arrival_x,
            innovation: InnovationSource::Smoothed,
            bounds: WindowBounds::default(),
        }
    }
}

/// Sliding measurement window plus the arrival-cost states carried between
/// samples.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBuffer<T> {
    pub horizon: usize,
    pub measurements: VecDeque<Vec<T>>,
    /// Sample index of the oldest stored measurement.
    pub start: usize,
    pub arrival_x: ArrivalCostState<T>,
    pub arrival_alpha: ArrivalCostState<T>,
    pub last: Option<StepEstimate<T>>,
    filtered: VecDeque<(Vec<T>, SimplexWeights<T>)>,
}

impl<T: Scalar> WindowBuffer<T> {
    pub fn new(horizon: usize, arrival_x: ArrivalCostState<T>, arrival_alpha: ArrivalCostState<T>) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        Ok(Self {
            horizon,
            measurements: VecDeque::with_capacity(horizon + 1),
            start: 0,
            arrival_x,
            arrival_alpha,
            last: None,
            filtered: VecDeque::with_capacity(horizon + 1),
        })
    }

    pub fn is_warm(&self) -> bool {
        self.measurements.len() == self.horizon + 1
    }

    /// Index of the newest measurement, if any.
    pub fn newest(&self) -> Option<usize> {
        (self.start + self.measurements.len()).checked_sub(1)
    }
}

/// Per-sample record written to the diagnostics log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics<T> {
    pub k: usize,
    pub l_used: usize,
    pub l_bound: Option<usize>,
    pub stop: StopReason,
    pub costs_x: Vec<T>,
    pub alpha_hat: Vec<T>,
    pub trace_px: T,
    pub trace_palpha: T,
    pub min_eig_px: T,
    pub min_eig_palpha: T,
    pub x_update: Option<UpdateRecord<T>>,
    pub alpha_update: Option<UpdateRecord<T>>,
}

/// Processes one new measurement: slides the window (updating both
/// arrival costs from the previous solve), runs the dual iteration and
/// stores the result.
pub fn step<T: Scalar>(
    buffer: &mut WindowBuffer<T>,
    y: &[T],
    model: &PolytopicModel<T>,
    weights: &StageCostWeights<T>,
    config: &MheConfig<T>,
) -> Result<(StepEstimate<T>, DualIterationReport<T>, StepDiagnostics<T>)> {
    check_dim("measurement", model.n_p(), y.len())?;
    let mut x_update = None;
    let mut alpha_update = None;
    if buffer.is_warm() {
        let last = buffer
            .last
            .as_ref()
            .ok_or_else(|| Error::Internal("warm window without a previous solve".into()))?;
        let r = last.x_hat[1].clone();
        let r_alpha = last.alpha_path[1].clone();
        let y_next = &buffer.measurements[1];
        let innovation = match config.innovation {
            InnovationSource::Smoothed => {
                let (_, c) = model.blend(&last.alpha_hat)?;
                sub(y_next, &c.mul_vec(&r))
            }
            InnovationSource::Filtered => {
                let (xf, af) = &buffer.filtered[1];
                let (_, c) = model.blend(af)?;
                sub(y_next, &c.mul_vec(xf))
            }
        };
        let (px, rec_x) = buffer.arrival_x.update_weight_traced(&r, &innovation)?;
        let (pa, rec_a) = buffer
            .arrival_alpha
            .update_weight_traced(r_alpha.as_slice(), &innovation)?;
        buffer.arrival_x = px.update_prior_mean(&r)?;
        buffer.arrival_alpha = pa.update_prior_mean(r_alpha.as_slice())?;
        x_update = Some(rec_x);
        alpha_update = Some(rec_a);
        buffer.measurements.pop_front();
        buffer.filtered.pop_front();
        buffer.start += 1;
    }
    buffer.measurements.push_back(y.to_vec());
    let k = buffer.start + buffer.measurements.len() - 1;

    let ys: Vec<Vec<T>> = buffer.measurements.iter().cloned().collect();
    let prior_x = Prior::from_arrival(&buffer.arrival_x)?;
    let prior_alpha = Prior::from_arrival(&buffer.arrival_alpha)?;
    let init_alpha = match &buffer.last {
        Some(prev) => prev.alpha_hat.clone(),
        None => SimplexWeights::project(&buffer.arrival_alpha.prior_mean),
    };
    let problem = WindowProblem {
        model,
        ys: &ys,
        prior_x: &prior_x,
        prior_alpha: &prior_alpha,
        weights,
        bounds: &config.bounds,
        window_start: buffer.start,
    };
    let (estimate, report) = dual_iterate(&problem, &init_alpha, &config.dual).map_err(|e| match e {
        Error::WindowInfeasible { dump, .. } => Error::WindowInfeasible { k, dump },
        other => other,
    })?;
    buffer
        .filtered
        .push_back((estimate.current().to_vec(), estimate.alpha_hat.clone()));
    buffer.last = Some(estimate.clone());
    let diagnostics = StepDiagnostics {
        k,
        l_used: report.l_used,
        l_bound: report.l_bound,
        stop: report.stop,
        costs_x: report.costs_x.clone(),
        alpha_hat: estimate.alpha_hat.as_slice().to_vec(),
        trace_px: buffer.arrival_x.p.trace(),
        trace_palpha: buffer.arrival_alpha.p.trace(),
        min_eig_px: buffer.arrival_x.p.min_eigenvalue(),
        min_eig_palpha: buffer.arrival_alpha.p.min_eigenvalue(),
        x_update,
        alpha_update,
    };
    Ok((estimate, report, diagnostics))
}

/// Adaptive polytopic moving-horizon estimator.
#[derive(Debug, Clone)]
pub struct AdaptiveMhe<T> {
    pub model: PolytopicModel<T>,
    pub weights: StageCostWeights<T>,
    pub config: MheConfig<T>,
    pub buffer: WindowBuffer<T>,
}

impl<T: Scalar> AdaptiveMhe<T> {
    pub fn new(
        model: PolytopicModel<T>,
        weights: StageCostWeights<T>,
        config: MheConfig<T>,
        x_prior: Vec<T>,
        alpha_prior: SimplexWeights<T>,
    ) -> Result<Self> {
        check_dim("state prior", model.n_x(), x_prior.len())?;
        check_dim("mixing prior", model.q(), alpha_prior.len())?;
        check_dim("process weight", model.n_x(), weights.n_x())?;
        check_dim("measurement weight", model.n_p(), weights.n_p())?;
        check_dim("mixing walk weight", model.q(), weights.q_alpha_inv.rows())?;
        let ax = &config.arrival_x;
        let aa = &config.arrival_alpha;
        let arrival_x = ArrivalCostState::new(x_prior, ax.lambda0, ax.sigma, ax.cap)?;
        let arrival_alpha = ArrivalCostState::new(alpha_prior.into_vec(), aa.lambda0, aa.sigma, aa.cap)?;
        let buffer = WindowBuffer::new(config.horizon, arrival_x, arrival_alpha)?;
        Ok(Self {
            model,
            weights,
            config,
            buffer,
        })
    }

    pub fn step(&mut self, y: &[T]) -> Result<(StepEstimate<T>, DualIterationReport<T>, StepDiagnostics<T>)> {
        step(&mut self.buffer, y, &self.model, &self.weights, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_weights() -> StageCostWeights<f64> {
        StageCostWeights::new(Matrix::identity(1), Matrix::identity(1), 1).unwrap()
    }

    #[test]
    fn one_step_scalar_window_by_hand() {
        // A = C = 1, all weights 1, x̄ = 0, y = (1, 1):
        // minimize x² + w² + (1 − x)² + (1 − x − w)² → x = 0.6, w = 0.2.
        let dyn1 = WindowDynamics::constant(&Matrix::identity(1), &Matrix::identity(1), 2);
        let ys = vec![vec![1.0], vec![1.0]];
        let prior = Prior::isotropic(vec![0.0], 1.0);
        for form in [Formulation::Condensed, Formulation::StateSpace, Formulation::Full] {
            let sol = solve_state_window(
                &dyn1,
                &ys,
                &prior,
                &scalar_weights(),
                &WindowBounds::default(),
                form,
                &SolverOptions::default(),
            )
            .unwrap();
            assert!((sol.states[0][0] - 0.6).abs() < 1e-9, "{form:?}");
            assert!((sol.w[0][0] - 0.2).abs() < 1e-9, "{form:?}");
            assert!((sol.cost - 0.6).abs() < 1e-9, "{form:?}");
            assert!((sol.prior_cost - 0.36).abs() < 1e-9, "{form:?}");
        }
    }

    #[test]
    fn two_vertex_interpolation() {
        let a1 = Matrix::<f64>::from_diag(&[1.0]);
        let a2 = Matrix::from_diag(&[2.0]);
        let c = Matrix::identity(1);
        let model = PolytopicModel::new(vec![a1, a2], vec![c.clone(), c]).unwrap();
        let weights = StageCostWeights::new(Matrix::identity(1), Matrix::identity(1), 2).unwrap();
        let states = vec![vec![1.0], vec![1.5]];
        let ys = states.clone();
        let flat = Prior::new(vec![0.5, 0.5], Matrix::zeros(2, 2)).unwrap();
        let sol = solve_alpha_window(
            &model,
            &states,
            &ys,
            &flat,
            &weights,
            AlphaMode::Constant,
            1e-10,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!((sol.alpha.as_slice()[0] - 0.5).abs() < 1e-8);
        assert!(sol.cost < 1e-12);
    }

    #[test]
    fn zero_states_return_prior() {
        let c = Matrix::identity(1);
        let model = PolytopicModel::new(
            vec![Matrix::from_diag(&[0.5]), Matrix::from_diag(&[0.9])],
            vec![c.clone(), c],
        )
        .unwrap();
        let weights = StageCostWeights::new(Matrix::identity(1), Matrix::identity(1), 2).unwrap();
        let prior = Prior::isotropic(vec![0.3, 0.7], 1.0);
        let sol = solve_alpha_window(
            &model,
            &[vec![0.0], vec![0.0]],
            &[vec![0.0], vec![0.0]],
            &prior,
            &weights,
            AlphaMode::Constant,
            1e-10,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(sol.flat);
        assert_eq!(sol.alpha.as_slice(), &[0.3, 0.7]);
    }

    #[test]
    fn bound_examples() {
        assert_eq!(compute_iteration_bound(100.0, 0.0, 10.0, 0.7).unwrap(), 4);
        assert_eq!(compute_iteration_bound(10.0, 5.0, 1.0, 0.5).unwrap(), 1);
        assert_eq!(compute_iteration_bound(10.0, 50.0, 1.0, 0.5).unwrap(), 1);
        assert!(compute_iteration_bound(10.0, 0.0, 0.0, 0.5).is_err());
        assert!(g_threshold(100.0, 0.0, 10.0, 0.7, 1).is_none());
        let t = g_threshold::<f64>(100.0, 0.0, 10.0, 0.7, 4).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conservative_bound_formula() {
        let w = StageCostWeights::new(Matrix::identity(2), Matrix::identity(1).scale(5.0), 3).unwrap();
        // ℰ = 0.5, N = 8, γ̄_w(1) + γ̄_v(0.1) = 1 + 0.05 → log₂(5.2) → 3, +1.
        assert_eq!(conservative_iteration_bound(0.5, 1.0, 8, 1.0, 0.1, &w).unwrap(), 4);
    }

    #[test]
    fn stage_cost_sandwich() {
        let w = StageCostWeights::<f64>::new(Matrix::from_diag(&[0.1, 0.3]), Matrix::identity(1).scale(5.0), 3).unwrap();
        let (lw, hw, lv, hv) = w.stage_bounds();
        assert!((lw - 0.1).abs() < 1e-12 && (hw - 0.3).abs() < 1e-12);
        assert!((lv - 5.0).abs() < 1e-12 && (hv - 5.0).abs() < 1e-12);
        let c = w.stage_cost(&[1.0, 2.0], &[0.5]);
        assert!((c - (0.1 + 1.2 + 1.25)).abs() < 1e-12);
    }
}
