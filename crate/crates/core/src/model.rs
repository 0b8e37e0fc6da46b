//! Polytopic LPV models, simplex mixing weights and plant simulation.
//!
//! A polytopic model is a finite set of vertex systems `(A_i, C_i)`; any
//! convex combination `A(α) = Σ α_i A_i`, `C(α) = Σ α_i C_i` with `α` on the
//! unit simplex is an admissible model. Trajectories are generated with
//! additive, truncated-Gaussian process and measurement noise drawn from a
//! counter-keyed generator so every sample is reproducible in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, Matrix};
use crate::scalar::Scalar;

/// Absolute tolerance on `Σ α_i = 1`.
pub const SIMPLEX_SUM_TOL: f64 = 1e-9;
/// Entries down to this value are accepted and clamped to zero.
pub const SIMPLEX_NEG_TOL: f64 = 1e-12;
/// Gaussian draws are resampled outside `±TRUNCATION` standard deviations.
pub const TRUNCATION: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PolytopicModel<T> {
    vertices_a: Vec<Matrix<T>>,
    vertices_c: Vec<Matrix<T>>,
}

impl<T: Scalar> PolytopicModel<T> {
    pub fn new(vertices_a: Vec<Matrix<T>>, vertices_c: Vec<Matrix<T>>) -> Result<Self> {
        if vertices_a.is_empty() {
            return Err(Error::InvalidArgument("polytope needs at least one vertex".into()));
        }
        check_dim("vertex C count", vertices_a.len(), vertices_c.len())?;
        let n_x = vertices_a[0].rows();
        let n_p = vertices_c[0].rows();
        for a in &vertices_a {
            if !a.is_square() {
                return Err(Error::InvalidArgument("vertex A matrices must be square".into()));
            }
            check_dim("vertex A dimension", n_x, a.rows())?;
        }
        for c in &vertices_c {
            check_dim("vertex C rows", n_p, c.rows())?;
            check_dim("vertex C cols", n_x, c.cols())?;
        }
        Ok(Self {
            vertices_a,
            vertices_c,
        })
    }

    /// Single-vertex polytope.
    pub fn lti(a: Matrix<T>, c: Matrix<T>) -> Result<Self> {
        Self::new(vec![a], vec![c])
    }

    pub fn q(&self) -> usize {
        self.vertices_a.len()
    }

    pub fn n_x(&self) -> usize {
        self.vertices_a[0].rows()
    }

    pub fn n_p(&self) -> usize {
        self.vertices_c[0].rows()
    }

    pub fn vertices_a(&self) -> &[Matrix<T>] {
        &self.vertices_a
    }

    pub fn vertices_c(&self) -> &[Matrix<T>] {
        &self.vertices_c
    }

    /// `(Σ α_i A_i, Σ α_i C_i)`.
    pub fn blend(&self, alpha: &SimplexWeights<T>) -> Result<(Matrix<T>, Matrix<T>)> {
        check_dim("blend weights", self.q(), alpha.len())?;
        Ok((
            combine(&self.vertices_a, alpha.as_slice()),
            combine(&self.vertices_c, alpha.as_slice()),
        ))
    }

    /// Columns `[A_1 x, …, A_q x]`: the dynamics are linear in `α` for fixed `x`.
    pub fn state_regressor(&self, x: &[T]) -> Matrix<T> {
        regressor(&self.vertices_a, x)
    }

    /// Columns `[C_1 x, …, C_q x]`.
    pub fn output_regressor(&self, x: &[T]) -> Matrix<T> {
        regressor(&self.vertices_c, x)
    }

    pub fn cast<U: Scalar>(&self) -> PolytopicModel<U> {
        PolytopicModel {
            vertices_a: self.vertices_a.iter().map(Matrix::cast).collect(),
            vertices_c: self.vertices_c.iter().map(Matrix::cast).collect(),
        }
    }
}

fn combine<T: Scalar>(mats: &[Matrix<T>], w: &[T]) -> Matrix<T> {
    let (r, c) = mats[0].shape();
    let mut out = Matrix::zeros(r, c);
    for (m, &wi) in mats.iter().zip(w) {
        out.add_scaled_assign(wi, m);
    }
    out
}

fn regressor<T: Scalar>(mats: &[Matrix<T>], x: &[T]) -> Matrix<T> {
    let rows = mats[0].rows();
    let mut out = Matrix::zeros(rows, mats.len());
    for (i, m) in mats.iter().enumerate() {
        for (r, v) in m.mul_vec(x).into_iter().enumerate() {
            out[(r, i)] = v;
        }
    }
    out
}

/// Mixing vector on the unit simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexWeights<T>(Vec<T>);

impl<T: Scalar> SimplexWeights<T> {
    /// Validates the simplex constraints, clamping tiny negative entries to 0.
    pub fn new(alpha: Vec<T>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::InvalidArgument("empty mixing vector".into()));
        }
        let neg = -T::tol(SIMPLEX_NEG_TOL, 4.0);
        if let Some(bad) = alpha.iter().find(|a| !a.is_finite() || **a < neg) {
            return Err(Error::InvalidArgument(format!(
                "mixing weight {bad} outside the simplex"
            )));
        }
        let sum: T = alpha.iter().copied().sum();
        if (sum - T::one()).abs() > T::tol(SIMPLEX_SUM_TOL, 64.0) {
            return Err(Error::InvalidArgument(format!(
                "mixing weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self(alpha.into_iter().map(|a| a.max(T::zero())).collect()))
    }

    pub fn uniform(q: usize) -> Self {
        let w = T::one() / T::from_usize(q).expect("vertex count fits scalar");
        Self(vec![w; q])
    }

    /// Unit vector selecting vertex `i`.
    pub fn vertex(q: usize, i: usize) -> Self {
        let mut v = vec![T::zero(); q];
        v[i] = T::one();
        Self(v)
    }

    /// Euclidean projection of an arbitrary vector onto the simplex.
    pub fn project(v: &[T]) -> Self {
        Self(crate::solver::project_simplex(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    pub fn distance(&self, other: &Self) -> T {
        crate::linalg::norm(&crate::linalg::sub(&self.0, &other.0))
    }

    /// `λ a + (1 − λ) b`, which stays on the simplex for `λ ∈ [0, 1]`.
    pub fn mix(a: &Self, b: &Self, lambda: T) -> Result<Self> {
        check_dim("mix", a.len(), b.len())?;
        Self::new(
            a.0.iter()
                .zip(&b.0)
                .map(|(&x, &y)| lambda * x + (T::one() - lambda) * y)
                .collect(),
        )
    }
}

/// Noise configuration; `trial` selects an independent stream for the same seed.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec<T> {
    pub s_w: Vec<T>,
    pub s_v: Vec<T>,
    pub seed: u64,
    pub trial: u64,
}

impl<T: Scalar> NoiseSpec<T> {
    pub fn new(s_w: Vec<T>, s_v: Vec<T>, seed: u64) -> Result<Self> {
        if s_w.iter().chain(&s_v).any(|s| !(*s >= T::zero())) {
            return Err(Error::InvalidArgument("noise levels must be >= 0".into()));
        }
        Ok(Self {
            s_w,
            s_v,
            seed,
            trial: 0,
        })
    }

    /// Same standard deviation on every channel.
    pub fn isotropic(n_x: usize, n_p: usize, s_w: T, s_v: T, seed: u64) -> Result<Self> {
        Self::new(vec![s_w; n_x], vec![s_v; n_p], seed)
    }

    pub fn noiseless(n_x: usize, n_p: usize) -> Self {
        Self {
            s_w: vec![T::zero(); n_x],
            s_v: vec![T::zero(); n_p],
            seed: 0,
            trial: 0,
        }
    }

    pub fn for_trial(&self, trial: u64) -> Self {
        Self {
            trial,
            ..self.clone()
        }
    }

    fn draw(&self, stream: NoiseStream, step: usize, channel: usize, sd: T) -> T {
        if sd == T::zero() {
            return T::zero();
        }
        sd * T::lit(standard_normal(self.seed, self.trial, stream, step, channel))
    }

    pub fn process(&self, step: usize) -> Vec<T> {
        (0..self.s_w.len())
            .map(|c| self.draw(NoiseStream::Process, step, c, self.s_w[c]))
            .collect()
    }

    pub fn measurement(&self, step: usize) -> Vec<T> {
        (0..self.s_v.len())
            .map(|c| self.draw(NoiseStream::Measurement, step, c, self.s_v[c]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum NoiseStream {
    Process = 1,
    Measurement = 2,
}

/// Truncated standard normal keyed by `(seed, trial, stream, step, channel)`.
fn standard_normal(seed: u64, trial: u64, stream: NoiseStream, step: usize, channel: usize) -> f64 {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&trial.to_le_bytes());
    key[16..24].copy_from_slice(&(step as u64).to_le_bytes());
    key[24..28].copy_from_slice(&(channel as u32).to_le_bytes());
    key[28..32].copy_from_slice(&(stream as u32).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    loop {
        let z: f64 = StandardNormal.sample(&mut rng);
        if z.abs() <= TRUNCATION {
            return z;
        }
    }
}

/// Simulated plant data. `w` has one entry per transition, `v` one per output.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub states: Vec<Vec<T>>,
    pub outputs: Vec<Vec<T>>,
    pub w: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Mixing weights in force at each sample (polytopic plants).
    pub alphas: Option<Vec<SimplexWeights<T>>>,
    /// Time-varying parameter `p_1(k)` (nonlinear benchmark plant).
    pub p1: Option<Vec<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Simulates `x_{k+1} = A(α_k) x_k + w_k`, `y_k = C(α_k) x_k + v_k` for
/// `k = 0..steps`. `alpha_path` holds one entry (constant `α`) or `steps`
/// entries; the last entry also serves the final output sample.
pub fn simulate<T: Scalar>(
    model: &PolytopicModel<T>,
    alpha_path: &[SimplexWeights<T>],
    x0: &[T],
    noise: &NoiseSpec<T>,
    steps: usize,
) -> Result<Trajectory<T>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("simulation needs at least one step".into()));
    }
    if alpha_path.len() != 1 && alpha_path.len() != steps {
        return Err(Error::InvalidArgument(format!(
            "alpha path must have length 1 or {steps}, got {}",
            alpha_path.len()
        )));
    }
    check_dim("initial state", model.n_x(), x0.len())?;
    check_dim("process noise channels", model.n_x(), noise.s_w.len())?;
    check_dim("measurement noise channels", model.n_p(), noise.s_v.len())?;

    let alpha_at = |k: usize| &alpha_path[k.min(alpha_path.len() - 1)];
    let mut blended = Vec::with_capacity(alpha_path.len());
    for a in alpha_path {
        blended.push(model.blend(a)?);
    }
    let blend_at = |k: usize| &blended[k.min(blended.len() - 1)];

    let mut traj = Trajectory {
        states: Vec::with_capacity(steps + 1),
        outputs: Vec::with_capacity(steps + 1),
        w: Vec::with_capacity(steps),
        v: Vec::with_capacity(steps + 1),
        alphas: Some((0..=steps).map(|k| alpha_at(k).clone()).collect()),
        p1: None,
    };
    let mut x = x0.to_vec();
    for k in 0..=steps {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: k });
        }
        let (a, c) = blend_at(k);
        let v = noise.measurement(k);
        let y: Vec<T> = c.mul_vec(&x).iter().zip(&v).map(|(&m, &n)| m + n).collect();
        traj.outputs.push(y);
        traj.v.push(v);
        traj.states.push(x.clone());
        if k < steps {
            let w = noise.process(k);
            x = a.mul_vec(&x).iter().zip(&w).map(|(&m, &n)| m + n).collect();
            traj.w.push(w);
        }
    }
    Ok(traj)
}

/// Second-order time-varying nonlinear benchmark plant
/// `x⁺ = [x_2, p_1 x_1 + sin(p_2 x_2)] + w`, `y = [0.5 0.5] x + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearPlant<T> {
    pub p1_initial: T,
    pub p2: T,
    /// Length `L` in the schedule `p_1(k+1) = 0.01 p_1(k) sin(5πk/L)`;
    /// `None` means the simulation length.
    pub schedule_length: Option<usize>,
}

impl<T: Scalar> NonlinearPlant<T> {
    pub const N_X: usize = 2;
    pub const N_P: usize = 1;

    pub fn new(p1_initial: T, p2: T) -> Self {
        Self {
            p1_initial,
            p2,
            schedule_length: None,
        }
    }

    pub fn output_matrix() -> Matrix<T> {
        Matrix::from_row_slice(1, 2, &[T::lit(0.5), T::lit(0.5)])
    }

    pub fn dynamics(x: &[T], p1: T, p2: T) -> Vec<T> {
        vec![x[1], p1 * x[0] + (p2 * x[1]).sin()]
    }

    /// `∂f/∂x = [[0, 1], [p_1, p_2 cos(p_2 x_2)]]`.
    pub fn jacobian(x: &[T], p1: T, p2: T) -> Matrix<T> {
        Matrix::from_row_slice(2, 2, &[T::zero(), T::one(), p1, p2 * (p2 * x[1]).cos()])
    }

    /// `p_1(0..=steps)`. The decay law applies for `1 ≤ k ≤ 3L/4`;
    /// outside that range `p_1` is held.
    pub fn p1_schedule(&self, steps: usize) -> Vec<T> {
        let len = self.schedule_length.unwrap_or(steps).max(1);
        let freeze = 3 * len / 4;
        let len_t = T::from_usize(len).expect("length fits scalar");
        let mut p = Vec::with_capacity(steps + 1);
        p.push(self.p1_initial);
        for k in 0..steps {
            let cur = p[k];
            let next = if k >= 1 && k <= freeze {
                let kt = T::from_usize(k).expect("step fits scalar");
                T::lit(0.01) * cur * (T::lit(5.0 * std::f64::consts::PI) * kt / len_t).sin()
            } else {
                cur
            };
            p.push(next);
        }
        p
    }

    pub fn simulate(&self, x0: &[T], noise: &NoiseSpec<T>, steps: usize) -> Result<Trajectory<T>> {
        if steps == 0 {
            return Err(Error::InvalidArgument("simulation needs at least one step".into()));
        }
        check_dim("initial state", Self::N_X, x0.len())?;
        check_dim("process noise channels", Self::N_X, noise.s_w.len())?;
        check_dim("measurement noise channels", Self::N_P, noise.s_v.len())?;
        let c = Self::output_matrix();
        let p1 = self.p1_schedule(steps);
        let mut traj = Trajectory {
            states: Vec::with_capacity(steps + 1),
            outputs: Vec::with_capacity(steps + 1),
            w: Vec::with_capacity(steps),
            v: Vec::with_capacity(steps + 1),
            alphas: None,
            p1: None,
        };
        let mut x = x0.to_vec();
        for k in 0..=steps {
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { step: k });
            }
            let v = noise.measurement(k);
            traj.outputs.push(vec![dot(c.row(0), &x) + v[0]]);
            traj.v.push(v);
            traj.states.push(x.clone());
            if k < steps {
                let w = noise.process(k);
                x = Self::dynamics(&x, p1[k], self.p2)
                    .iter()
                    .zip(&w)
                    .map(|(&m, &n)| m + n)
                    .collect();
                traj.w.push(w);
            }
        }
        traj.p1 = Some(p1);
        Ok(traj)
    }
}

/// Nonlinear benchmark plant with `p_1(0) = 1` and the schedule length equal
/// to the run length.
pub fn simulate_nonlinear<T: Scalar>(
    x0: &[T],
    p2: T,
    noise: &NoiseSpec<T>,
    steps: usize,
) -> Result<Trajectory<T>> {
    NonlinearPlant::new(T::one(), p2).simulate(x0, noise, steps)
}
