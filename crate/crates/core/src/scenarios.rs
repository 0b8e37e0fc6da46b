//! Benchmark scenarios and their plain-text serialization.
//!
//! A scenario bundles the estimator's polytopic model, the plant that
//! generates data, priors, noise levels, cost weights and the MHE
//! configuration. [`example1`] and [`example2`] are the two reference
//! benchmarks; [`random_scenario`] produces stable, observable polytopes for
//! property tests.
//!
//! The text format is line oriented. Blank lines and text after `#` are
//! ignored. Every other line is `key value...`, except matrix blocks:
//!
//! ```text
//! matrix A1 2 2
//! 0 0.72
//! 1 0.28
//! ```
//!
//! where the header gives the name, row and column counts and the following
//! lines hold the rows. See `docs/scenario-format.md` for the full key list.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mhe::{AlphaMode, ArrivalSettings, InnovationSource, MheConfig, StageCostWeights};
use crate::model::{simulate, NoiseSpec, NonlinearPlant, PolytopicModel, SimplexWeights, Trajectory};

/// Growing-window cap for the full-information baseline.
pub const DEFAULT_FIE_MAX_WINDOW: usize = 200;
/// Attempts before [`random_scenario`] gives up.
pub const RANDOM_SCENARIO_BUDGET: usize = 200;

/// The plant that produces a trial's data.
#[derive(Debug, Clone, PartialEq)]
pub enum Plant {
    /// The estimator's own polytope at a fixed true mixing vector.
    Polytopic { true_alpha: SimplexWeights<f64> },
    Nonlinear(NonlinearPlant<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub model: PolytopicModel<f64>,
    pub plant: Plant,
    pub x0_true: Vec<f64>,
    pub x0_prior: Vec<f64>,
    /// `ᾱ₀`; also the nominal model of the fixed-model baselines.
    pub alpha_prior: SimplexWeights<f64>,
    pub noise: NoiseSpec<f64>,
    pub weights: StageCostWeights<f64>,
    pub mhe: MheConfig<f64>,
    /// Run length `T`; each trial has `T + 1` samples.
    pub steps: usize,
    pub trials: usize,
    /// `L` of the static-prior MHE baseline.
    pub fixed_prior_weight: f64,
    pub fie_max_window: usize,
}

fn mat(rows: usize, cols: usize, data: &[f64]) -> Matrix<f64> {
    Matrix::from_row_slice(rows, cols, data)
}

/// Linear three-vertex benchmark.
pub fn example1() -> Scenario {
    let a = |a12, a22| mat(2, 2, &[0.0, a12, 1.0, a22]);
    let c = |c1, c2| mat(1, 2, &[c1, c2]);
    let model = PolytopicModel::new(
        vec![a(0.72, 0.28), a(-0.59, 1.57), a(-0.35, 1.26)],
        vec![c(-1.46, -1.29), c(-4.84, -2.90), c(-0.09, -0.03)],
    )
    .expect("example 1 vertices are consistent");
    let weights = StageCostWeights::new(Matrix::from_diag(&[0.1, 0.1]), Matrix::from_diag(&[5.0]), 3)
        .expect("example 1 weights are valid");
    let arrival = ArrivalSettings {
        lambda0: 10.0,
        sigma: 1e-4,
        cap: 5.0,
    };
    Scenario {
        name: "example1".into(),
        model,
        plant: Plant::Polytopic {
            true_alpha: SimplexWeights::new(vec![0.22, 0.76, 0.02]).expect("on simplex"),
        },
        x0_true: vec![1.0, 1.0],
        x0_prior: vec![0.0, 0.0],
        alpha_prior: SimplexWeights::new(vec![0.41, 0.22, 0.37]).expect("on simplex"),
        noise: NoiseSpec::isotropic(2, 1, 0.1, 0.05, 1).expect("valid noise"),
        weights,
        mhe: MheConfig::new(8, arrival),
        steps: 150,
        trials: 100,
        fixed_prior_weight: 0.1,
        fie_max_window: DEFAULT_FIE_MAX_WINDOW,
    }
}

/// Nonlinear time-varying benchmark with its three-vertex polytope.
pub fn example2() -> Scenario {
    let a = |a12, a22| mat(2, 2, &[0.0, a12, 1.0, a22]);
    let c = mat(1, 2, &[0.5, 0.5]);
    let model = PolytopicModel::new(
        vec![a(1.30, -1.52), a(-2.44, 0.66), a(1.31, 2.81)],
        vec![c.clone(), c.clone(), c],
    )
    .expect("example 2 vertices are consistent");
    let weights = StageCostWeights::new(Matrix::from_diag(&[1e3, 5e3]), Matrix::from_diag(&[5e2]), 3)
        .expect("example 2 weights are valid");
    let arrival = ArrivalSettings {
        lambda0: 10.0,
        sigma: 1.0,
        cap: 1.0,
    };
    Scenario {
        name: "example2".into(),
        model,
        plant: Plant::Nonlinear(NonlinearPlant::new(1.0, 0.05)),
        x0_true: vec![0.5, 0.3],
        x0_prior: vec![0.0, 0.0],
        alpha_prior: SimplexWeights::uniform(3),
        noise: NoiseSpec::isotropic(2, 1, 0.1, 0.05, 1).expect("valid noise"),
        weights,
        mhe: MheConfig::new(8, arrival),
        steps: 200,
        trials: 100,
        fixed_prior_weight: 0.1,
        fie_max_window: DEFAULT_FIE_MAX_WINDOW,
    }
}

/// Looks up a built-in scenario by name.
pub fn builtin(name: &str) -> Option<Scenario> {
    match name {
        "example1" => Some(example1()),
        "example2" => Some(example2()),
        _ => None,
    }
}

/// Rank of the observability matrix `[C; CA; …; CA^{n−1}]` equals `n`.
pub fn is_observable(a: &Matrix<f64>, c: &Matrix<f64>) -> bool {
    let n = a.rows();
    let p = c.rows();
    let mut obs = Matrix::zeros(n * p, n);
    let mut block = c.clone();
    for i in 0..n {
        obs.set_block(i * p, 0, &block);
        block = block.matmul(a);
    }
    let scale = obs.max_abs().max(1.0);
    obs.transpose().matmul(&obs).min_eigenvalue() > 1e-10 * scale * scale
}

/// Random stable, observable polytope with `n_p = 1`.
///
/// Every vertex `A_i` is scaled to spectral norm `margin`, so every convex
/// blend has spectral radius at most `margin`.
pub fn random_scenario(seed: u64, q: usize, n_x: usize, margin: f64) -> Result<Scenario> {
    if q < 2 || n_x == 0 {
        return Err(Error::InvalidArgument("random scenario needs q >= 2 and n_x >= 1".into()));
    }
    if !(margin > 0.0 && margin < 1.0) {
        return Err(Error::InvalidArgument("stability margin must lie in (0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    };
    for _ in 0..RANDOM_SCENARIO_BUDGET {
        let mut va = Vec::with_capacity(q);
        let mut vc = Vec::with_capacity(q);
        for _ in 0..q {
            let a = gauss(n_x, n_x, &mut rng);
            let norm = a.spectral_norm();
            va.push(a.scale(margin / norm));
            vc.push(gauss(1, n_x, &mut rng));
        }
        let raw: Vec<f64> = (0..q).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let alpha = SimplexWeights::new(raw.iter().map(|r| r / total).collect())?;
        let model = PolytopicModel::new(va, vc)?;
        let (a_true, c_true) = model.blend(&alpha)?;
        let observable = is_observable(&a_true, &c_true)
            && (0..q).all(|i| is_observable(&model.vertices_a()[i], &model.vertices_c()[i]));
        if !observable {
            continue;
        }
        let x0_true = (0..n_x).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weights = StageCostWeights::new(Matrix::identity(n_x), Matrix::identity(1), q)?;
        let arrival = ArrivalSettings {
            lambda0: 10.0,
            sigma: 1.0,
            cap: 10.0 * n_x as f64,
        };
        return Ok(Scenario {
            name: format!("random-{seed}"),
            model,
            plant: Plant::Polytopic { true_alpha: alpha },
            x0_true,
            x0_prior: vec![0.0; n_x],
            alpha_prior: SimplexWeights::uniform(q),
            noise: NoiseSpec::noiseless(n_x, 1),
            weights,
            mhe: MheConfig::new(6, arrival),
            steps: 60,
            trials: 1,
            fixed_prior_weight: 0.1,
            fie_max_window: DEFAULT_FIE_MAX_WINDOW,
        });
    }
    Err(Error::InvalidArgument(format!(
        "no stable observable polytope found in {RANDOM_SCENARIO_BUDGET} draws"
    )))
}

impl Scenario {
    pub fn n_x(&self) -> usize {
        self.model.n_x()
    }

    pub fn n_p(&self) -> usize {
        self.model.n_p()
    }

    /// Checks dimensions and that the priors and settings are admissible.
    pub fn validate(&self) -> Result<()> {
        let n_x = self.n_x();
        let n_p = self.n_p();
        let q = self.model.q();
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.x0_true.len() != n_x || self.x0_prior.len() != n_x {
            return bad(format!("initial states must have {n_x} entries"));
        }
        if self.x0_true.iter().chain(&self.x0_prior).any(|v| !v.is_finite()) {
            return bad("initial states must be finite".into());
        }
        if self.alpha_prior.len() != q {
            return bad(format!("alpha prior must have {q} entries"));
        }
        match &self.plant {
            Plant::Polytopic { true_alpha } if true_alpha.len() != q => {
                return bad(format!("true alpha must have {q} entries"));
            }
            Plant::Nonlinear(_) if n_x != NonlinearPlant::<f64>::N_X || n_p != NonlinearPlant::<f64>::N_P => {
                return bad("the nonlinear plant needs n_x = 2, n_p = 1".into());
            }
            _ => {}
        }
        if self.noise.s_w.len() != n_x || self.noise.s_v.len() != n_p {
            return bad("noise channel counts do not match the model".into());
        }
        self.weights.validate()?;
        if self.weights.n_x() != n_x || self.weights.n_p() != n_p || self.weights.q_alpha_inv.rows() != q {
            return bad("cost weights do not match the model".into());
        }
        if self.mhe.horizon == 0 || self.steps == 0 || self.trials == 0 || self.mhe.dual.l_max == 0 {
            return bad("horizon, steps, trials and l_max must be positive".into());
        }
        let e = self.mhe.dual.bound_epsilon;
        if !(e > 0.0 && e <= 1.0) {
            return bad("epsilon must lie in (0, 1]".into());
        }
        for s in [self.mhe.arrival_x, self.mhe.arrival_alpha] {
            if !(s.lambda0 > 0.0 && s.sigma > 0.0 && s.cap > 0.0) {
                return bad("arrival settings need lambda0, sigma, c > 0".into());
            }
        }
        if !(self.fixed_prior_weight > 0.0) || self.fie_max_window == 0 {
            return bad("fixed prior weight and FIE window must be positive".into());
        }
        Ok(())
    }

    /// Data for one trial; trial `i` uses noise stream `i` of the scenario seed.
    pub fn simulate_trial(&self, trial: u64) -> Result<Trajectory<f64>> {
        let noise = self.noise.for_trial(trial);
        match &self.plant {
            Plant::Polytopic { true_alpha } => {
                simulate(&self.model, std::slice::from_ref(true_alpha), &self.x0_true, &noise, self.steps)
            }
            Plant::Nonlinear(plant) => plant.simulate(&self.x0_true, &noise, self.steps),
        }
    }

    /// `(A(ᾱ₀), C(ᾱ₀))`.
    pub fn nominal_matrices(&self) -> Result<(Matrix<f64>, Matrix<f64>)> {
        self.model.blend(&self.alpha_prior)
    }

    /// Transposes every vertex `A_i` in place.
    pub fn transpose_vertices(&mut self) -> Result<()> {
        let a = self.model.vertices_a().iter().map(Matrix::transpose).collect();
        self.model = PolytopicModel::new(a, self.model.vertices_c().to_vec())?;
        Ok(())
    }

    pub fn set_noise_levels(&mut self, s_w: f64, s_v: f64) -> Result<()> {
        self.noise = NoiseSpec::isotropic(self.n_x(), self.n_p(), s_w, s_v, self.noise.seed)?;
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("override {key}: cannot parse '{value}'")))
        }
        match key {
            "N" | "horizon" => self.mhe.horizon = num(key, value)?,
            "l" | "l_max" => self.mhe.dual.l_max = num(key, value)?,
            "epsilon" | "bound_epsilon" => self.mhe.dual.bound_epsilon = num(key, value)?,
            "epsilon_stop" => self.mhe.dual.epsilon_stop = num(key, value)?,
            "stop_at_bound" => self.mhe.dual.stop_at_bound = num(key, value)?,
            "alpha_mode" => self.mhe.dual.alpha_mode = parse_alpha_mode(value)?,
            "innovation" => self.mhe.innovation = parse_innovation(value)?,
            "lambda0" => self.mhe.arrival_x.lambda0 = num(key, value)?,
            "sigma" => self.mhe.arrival_x.sigma = num(key, value)?,
            "c" | "cap" => self.mhe.arrival_x.cap = num(key, value)?,
            "alpha_lambda0" => self.mhe.arrival_alpha.lambda0 = num(key, value)?,
            "alpha_sigma" => self.mhe.arrival_alpha.sigma = num(key, value)?,
            "alpha_cap" => self.mhe.arrival_alpha.cap = num(key, value)?,
            "s_w" | "S_w" => {
                let s_v = self.noise.s_v.first().copied().unwrap_or(0.0);
                self.set_noise_levels(num(key, value)?, s_v)?;
            }
            "s_v" | "S_v" => {
                let s_w = self.noise.s_w.first().copied().unwrap_or(0.0);
                self.set_noise_levels(s_w, num(key, value)?)?;
            }
            "q_inv" | "r_inv" | "d_inv" | "q_alpha_inv" => {
                let v: f64 = num(key, value)?;
                let w = &mut self.weights;
                let target = match key {
                    "q_inv" => &mut w.q_inv,
                    "r_inv" => &mut w.r_inv,
                    "d_inv" => &mut w.d_inv,
                    _ => &mut w.q_alpha_inv,
                };
                *target = Matrix::identity(target.rows()).scale(v);
            }
            "seed" => self.noise.seed = num(key, value)?,
            "T" | "steps" => self.steps = num(key, value)?,
            "trials" => self.trials = num(key, value)?,
            "fixed_prior_weight" => self.fixed_prior_weight = num(key, value)?,
            "fie_max_window" => self.fie_max_window = num(key, value)?,
            "transpose_vertices" => {
                if num::<bool>(key, value)? {
                    self.transpose_vertices()?;
                }
            }
            _ => return Err(Error::InvalidArgument(format!("unknown override key '{key}'"))),
        }
        self.validate()
    }

    /// Serializes to the plain-text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let line = |s: &mut String, key: &str, vals: &[f64]| {
            let _ = write!(s, "{key}");
            for v in vals {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        };
        let _ = writeln!(s, "# polymhe scenario");
        let _ = writeln!(s, "name {}", self.name);
        match &self.plant {
            Plant::Polytopic { true_alpha } => {
                let _ = writeln!(s, "plant polytopic");
                line(&mut s, "true_alpha", true_alpha.as_slice());
            }
            Plant::Nonlinear(p) => {
                let _ = writeln!(s, "plant nonlinear");
                line(&mut s, "p1_initial", &[p.p1_initial]);
                line(&mut s, "p2", &[p.p2]);
                match p.schedule_length {
                    Some(l) => {
                        let _ = writeln!(s, "schedule_length {l}");
                    }
                    None => {
                        let _ = writeln!(s, "schedule_length run");
                    }
                }
            }
        }
        let _ = writeln!(s, "vertices {}", self.model.q());
        for (i, (a, c)) in self.model.vertices_a().iter().zip(self.model.vertices_c()).enumerate() {
            write_matrix(&mut s, &format!("A{}", i + 1), a);
            write_matrix(&mut s, &format!("C{}", i + 1), c);
        }
        line(&mut s, "x0_true", &self.x0_true);
        line(&mut s, "x0_prior", &self.x0_prior);
        line(&mut s, "alpha_prior", self.alpha_prior.as_slice());
        line(&mut s, "s_w", &self.noise.s_w);
        line(&mut s, "s_v", &self.noise.s_v);
        let _ = writeln!(s, "seed {}", self.noise.seed);
        write_matrix(&mut s, "q_inv", &self.weights.q_inv);
        write_matrix(&mut s, "r_inv", &self.weights.r_inv);
        write_matrix(&mut s, "d_inv", &self.weights.d_inv);
        write_matrix(&mut s, "q_alpha_inv", &self.weights.q_alpha_inv);
        let _ = writeln!(s, "horizon {}", self.mhe.horizon);
        let _ = writeln!(s, "l_max {}", self.mhe.dual.l_max);
        line(&mut s, "epsilon_stop", &[self.mhe.dual.epsilon_stop]);
        line(&mut s, "bound_epsilon", &[self.mhe.dual.bound_epsilon]);
        let _ = writeln!(s, "stop_at_bound {}", self.mhe.dual.stop_at_bound);
        let _ = writeln!(s, "alpha_mode {}", alpha_mode_str(self.mhe.dual.alpha_mode));
        let _ = writeln!(s, "innovation {}", innovation_str(self.mhe.innovation));
        let ax = self.mhe.arrival_x;
        let aa = self.mhe.arrival_alpha;
        line(&mut s, "arrival_x", &[ax.lambda0, ax.sigma, ax.cap]);
        line(&mut s, "arrival_alpha", &[aa.lambda0, aa.sigma, aa.cap]);
        let _ = writeln!(s, "steps {}", self.steps);
        let _ = writeln!(s, "trials {}", self.trials);
        line(&mut s, "fixed_prior_weight", &[self.fixed_prior_weight]);
        let _ = writeln!(s, "fie_max_window {}", self.fie_max_window);
        s
    }

    /// Parses the plain-text format. Keys missing from the text keep the
    /// values of the `example1` defaults, except the model and plant, which
    /// are required.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let mut base = example1();
        let mut plant_kind: Option<String> = None;
        let mut true_alpha: Option<Vec<f64>> = None;
        let mut nonlinear = NonlinearPlant::new(1.0, 0.05);
        let mut q: Option<usize> = None;
        let mut va: Vec<Option<Matrix<f64>>> = Vec::new();
        let mut vc: Vec<Option<Matrix<f64>>> = Vec::new();
        let mut q_inv = base.weights.q_inv.clone();
        let mut r_inv = base.weights.r_inv.clone();
        let mut d_inv: Option<Matrix<f64>> = None;
        let mut q_alpha_inv: Option<Matrix<f64>> = None;
        let mut s_w = base.noise.s_w.clone();
        let mut s_v = base.noise.s_v.clone();
        let mut seed = base.noise.seed;
        let mut alpha_prior: Option<Vec<f64>> = None;

        while let Some((no, l)) = lines.next() {
            let err = |m: &str| Error::InvalidArgument(format!("scenario line {no}: {m}"));
            let mut tok = l.split_whitespace();
            let key = tok.next().expect("non-empty line");
            let rest: Vec<&str> = tok.collect();
            let floats = || -> Result<Vec<f64>> {
                rest.iter()
                    .map(|t| t.parse::<f64>().map_err(|_| err(&format!("bad number '{t}'"))))
                    .collect()
            };
            let one = || -> Result<&str> {
                match rest.as_slice() {
                    [v] => Ok(*v),
                    _ => Err(err(&format!("'{key}' takes exactly one value"))),
                }
            };
            let int = || -> Result<usize> { one()?.parse().map_err(|_| err("expected a count")) };
            let float = || -> Result<f64> { one()?.parse().map_err(|_| err("expected a number")) };
            match key {
                "name" => base.name = rest.join(" "),
                "plant" => plant_kind = Some(one()?.to_string()),
                "true_alpha" => true_alpha = Some(floats()?),
                "p1_initial" => nonlinear.p1_initial = float()?,
                "p2" => nonlinear.p2 = float()?,
                "schedule_length" => {
                    nonlinear.schedule_length = match one()? {
                        "run" => None,
                        v => Some(v.parse().map_err(|_| err("expected a count or 'run'"))?),
                    }
                }
                "vertices" => {
                    let n = int()?;
                    q = Some(n);
                    va = vec![None; n];
                    vc = vec![None; n];
                }
                "matrix" => {
                    let (name, rows, cols) = match rest.as_slice() {
                        [n, r, c] => (
                            *n,
                            r.parse::<usize>().map_err(|_| err("bad row count"))?,
                            c.parse::<usize>().map_err(|_| err("bad column count"))?,
                        ),
                        _ => return Err(err("matrix header is 'matrix NAME ROWS COLS'")),
                    };
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (rno, row) = lines.next().ok_or_else(|| err("matrix block ends early"))?;
                        let vals: Vec<f64> = row
                            .split_whitespace()
                            .map(|t| t.parse::<f64>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| Error::InvalidArgument(format!("scenario line {rno}: bad matrix entry")))?;
                        if vals.len() != cols {
                            return Err(Error::InvalidArgument(format!(
                                "scenario line {rno}: expected {cols} entries, got {}",
                                vals.len()
                            )));
                        }
                        data.extend(vals);
                    }
                    let m = Matrix::from_row_slice(rows, cols, &data);
                    match name {
                        "q_inv" => q_inv = m,
                        "r_inv" => r_inv = m,
                        "d_inv" => d_inv = Some(m),
                        "q_alpha_inv" => q_alpha_inv = Some(m),
                        _ => {
                            let (slot, idx) = match name.split_at(1) {
                                ("A", i) => (&mut va, i),
                                ("C", i) => (&mut vc, i),
                                _ => return Err(err(&format!("unknown matrix '{name}'"))),
                            };
                            let i: usize = idx.parse().map_err(|_| err("bad vertex index"))?;
                            if i == 0 || i > slot.len() {
                                return Err(err("vertex index out of range (declare 'vertices' first)"));
                            }
                            slot[i - 1] = Some(m);
                        }
                    }
                }
                "x0_true" => base.x0_true = floats()?,
                "x0_prior" => base.x0_prior = floats()?,
                "alpha_prior" => alpha_prior = Some(floats()?),
                "s_w" => s_w = floats()?,
                "s_v" => s_v = floats()?,
                "seed" => seed = one()?.parse().map_err(|_| err("expected an integer seed"))?,
                "horizon" => base.mhe.horizon = int()?,
                "l_max" => base.mhe.dual.l_max = int()?,
                "epsilon_stop" => base.mhe.dual.epsilon_stop = float()?,
                "bound_epsilon" => base.mhe.dual.bound_epsilon = float()?,
                "stop_at_bound" => {
                    base.mhe.dual.stop_at_bound = one()?.parse().map_err(|_| err("expected true or false"))?
                }
                "alpha_mode" => base.mhe.dual.alpha_mode = parse_alpha_mode(one()?)?,
                "innovation" => base.mhe.innovation = parse_innovation(one()?)?,
                "arrival_x" | "arrival_alpha" => {
                    let v = floats()?;
                    let [lambda0, sigma, cap] = v[..] else {
                        return Err(err("arrival settings are 'lambda0 sigma c'"));
                    };
                    let s = ArrivalSettings { lambda0, sigma, cap };
                    if key == "arrival_x" {
                        base.mhe.arrival_x = s;
                    } else {
                        base.mhe.arrival_alpha = s;
                    }
                }
                "steps" => base.steps = int()?,
                "trials" => base.trials = int()?,
                "fixed_prior_weight" => base.fixed_prior_weight = float()?,
                "fie_max_window" => base.fie_max_window = int()?,
                _ => return Err(err(&format!("unknown key '{key}'"))),
            }
        }

        let missing = |m: &str| Error::InvalidArgument(format!("scenario: missing {m}"));
        let q = q.ok_or_else(|| missing("'vertices'"))?;
        let collect = |v: Vec<Option<Matrix<f64>>>, tag: &str| -> Result<Vec<Matrix<f64>>> {
            v.into_iter()
                .enumerate()
                .map(|(i, m)| m.ok_or_else(|| missing(&format!("matrix {tag}{}", i + 1))))
                .collect()
        };
        base.model = PolytopicModel::new(collect(va, "A")?, collect(vc, "C")?)?;
        base.plant = match plant_kind.as_deref() {
            Some("polytopic") => Plant::Polytopic {
                true_alpha: SimplexWeights::new(true_alpha.ok_or_else(|| missing("'true_alpha'"))?)?,
            },
            Some("nonlinear") => Plant::Nonlinear(nonlinear),
            Some(other) => return Err(Error::InvalidArgument(format!("scenario: unknown plant '{other}'"))),
            None => return Err(missing("'plant'")),
        };
        base.alpha_prior = match alpha_prior {
            Some(a) => SimplexWeights::new(a)?,
            None => SimplexWeights::uniform(q),
        };
        base.noise = NoiseSpec::new(s_w, s_v, seed)?;
        base.weights = StageCostWeights::new(q_inv, r_inv, q)?;
        if let Some(m) = d_inv {
            base.weights.d_inv = m;
        }
        if let Some(m) = q_alpha_inv {
            base.weights.q_alpha_inv = m;
        }
        base.validate()?;
        Ok(base)
    }
}

fn write_matrix(s: &mut String, name: &str, m: &Matrix<f64>) {
    let _ = writeln!(s, "matrix {name} {} {}", m.rows(), m.cols());
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
}

fn alpha_mode_str(m: AlphaMode) -> &'static str {
    match m {
        AlphaMode::Constant => "constant",
        AlphaMode::PerStep => "per-step",
    }
}

fn parse_alpha_mode(v: &str) -> Result<AlphaMode> {
    match v {
        "constant" => Ok(AlphaMode::Constant),
        "per-step" => Ok(AlphaMode::PerStep),
        _ => Err(Error::InvalidArgument(format!("unknown alpha mode '{v}'"))),
    }
}

fn innovation_str(m: InnovationSource) -> &'static str {
    match m {
        InnovationSource::Smoothed => "smoothed",
        InnovationSource::Filtered => "filtered",
    }
}

fn parse_innovation(v: &str) -> Result<InnovationSource> {
    match v {
        "smoothed" => Ok(InnovationSource::Smoothed),
        "filtered" => Ok(InnovationSource::Filtered),
        _ => Err(Error::InvalidArgument(format!("unknown innovation source '{v}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example1_shape() {
        let s = example1();
        assert_eq!((s.model.q(), s.n_x(), s.n_p()), (3, 2, 1));
        let Plant::Polytopic { true_alpha } = &s.plant else { panic!("polytopic plant") };
        let (a, _) = s.model.blend(true_alpha).unwrap();
        // Characteristic roots 0.9756 and 0.3045.
        assert!((a.spectral_radius() - 0.97557).abs() < 1e-4);
        let sum: f64 = s.alpha_prior.as_slice().iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
        s.validate().unwrap();
    }

    #[test]
    fn example2_constants() {
        let s = example2();
        assert_eq!(s.model.vertices_a()[0], mat(2, 2, &[0.0, 1.30, 1.0, -1.52]));
        assert_eq!(s.model.vertices_a()[2], mat(2, 2, &[0.0, 1.31, 1.0, 2.81]));
        assert_eq!(s.x0_prior, vec![0.0, 0.0]);
        assert_eq!(s.x0_true, vec![0.5, 0.3]);
        assert_eq!(s.noise.s_w, vec![0.1, 0.1]);
        assert_eq!(s.noise.s_v, vec![0.05]);
        s.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        for s in [example1(), example2(), random_scenario(3, 3, 3, 0.9).unwrap()] {
            let back = Scenario::from_text(&s.to_text()).unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn overrides() {
        let mut s = example1();
        s.apply_override("N", "4").unwrap();
        s.apply_override("s_w", "0").unwrap();
        s.apply_override("d_inv", "2").unwrap();
        assert_eq!(s.weights.d_inv, Matrix::from_diag(&[2.0, 2.0]));
        assert_eq!(Scenario::from_text(&s.to_text()).unwrap(), s);
        assert_eq!(s.mhe.horizon, 4);
        assert_eq!(s.noise.s_w, vec![0.0, 0.0]);
        assert_eq!(s.noise.s_v, vec![0.05]);
        assert!(s.apply_override("bogus", "1").is_err());
        assert!(s.apply_override("N", "x").is_err());
        assert!(s.apply_override("epsilon", "2").is_err());
    }

    #[test]
    fn random_scenarios_are_stable_and_reproducible() {
        let a = random_scenario(11, 4, 3, 0.9).unwrap();
        let b = random_scenario(11, 4, 3, 0.9).unwrap();
        assert_eq!(a, b);
        for m in a.model.vertices_a() {
            assert!(m.spectral_radius() <= 0.9 + 1e-9);
        }
        assert!(random_scenario(1, 1, 2, 0.9).is_err());
    }

    #[test]
    fn observability_examples() {
        let a = mat(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(is_observable(&a, &mat(1, 2, &[1.0, 0.0])));
        assert!(!is_observable(&a, &mat(1, 2, &[0.0, 1.0])));
    }
}
