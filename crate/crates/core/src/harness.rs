//! Monte-Carlo experiment runner: MSE tables, `(l, N)` sweeps and mixing
//! weight traces, with CSV emission.
//!
//! Every estimator in a trial consumes the same simulated trajectory. Trials
//! are keyed by index, run on a bounded thread pool and aggregated in trial
//! order, so results do not depend on the number of worker threads.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;

use crate::baselines::{Estimator, ExtendedKalmanFilter, KalmanFilter, KalmanState, WindowEstimator, WindowModel};
use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};
use crate::mhe::{AdaptiveMhe, StepDiagnostics};
use crate::model::Trajectory;
use crate::scenarios::{Plant, Scenario};

/// A state estimate with norm above this marks the trial diverged.
pub const DIVERGENCE_NORM: f64 = 1e6;
/// Normal-approximation 95% quantile.
pub const Z95: f64 = 1.959963984540054;
/// Gauss-Newton passes of the relinearized full-information baseline.
pub const FIE_RELINEARIZATION_PASSES: usize = 2;

/// Registered estimator identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    /// Adaptive polytopic MHE.
    MheAdaptive,
    /// Static prior `L·I`, nominal model `(A(ᾱ₀), C(ᾱ₀))`.
    MheFixedPrior,
    /// Kalman filter on the true linear model.
    Kf,
    /// Kalman filter on the nominal model.
    KfNominal,
    /// EKF on the true nonlinear plant.
    Ekf,
    /// EKF with `p_1` frozen at its initial value.
    EkfNominal,
    /// Growing-window full-information estimator with the true model.
    Fie,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 7] = [
        EstimatorKind::MheAdaptive,
        EstimatorKind::MheFixedPrior,
        EstimatorKind::Kf,
        EstimatorKind::KfNominal,
        EstimatorKind::Ekf,
        EstimatorKind::EkfNominal,
        EstimatorKind::Fie,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::MheAdaptive => "mhe-adaptive",
            EstimatorKind::MheFixedPrior => "mhe-fixed-prior",
            EstimatorKind::Kf => "kf",
            EstimatorKind::KfNominal => "kf-nominal",
            EstimatorKind::Ekf => "ekf",
            EstimatorKind::EkfNominal => "ekf-nominal",
            EstimatorKind::Fie => "fie",
        }
    }

    /// Whether the estimator can run on the scenario's plant.
    pub fn supports(self, scenario: &Scenario) -> bool {
        let nonlinear = matches!(scenario.plant, Plant::Nonlinear(_));
        match self {
            EstimatorKind::Kf => !nonlinear,
            EstimatorKind::Ekf | EstimatorKind::EkfNominal => nonlinear,
            _ => true,
        }
    }

    /// Default comparison set for a scenario.
    pub fn defaults_for(scenario: &Scenario) -> Vec<EstimatorKind> {
        match scenario.plant {
            Plant::Polytopic { .. } => vec![
                EstimatorKind::MheAdaptive,
                EstimatorKind::MheFixedPrior,
                EstimatorKind::Kf,
                EstimatorKind::KfNominal,
                EstimatorKind::Fie,
            ],
            Plant::Nonlinear(_) => vec![
                EstimatorKind::MheAdaptive,
                EstimatorKind::MheFixedPrior,
                EstimatorKind::Ekf,
                EstimatorKind::EkfNominal,
                EstimatorKind::Fie,
            ],
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown estimator '{s}'")))
    }
}

fn kalman_state(scenario: &Scenario) -> Result<KalmanState<f64>> {
    let sq = |s: &[f64]| Matrix::from_diag(&s.iter().map(|v| v * v).collect::<Vec<_>>());
    let n = scenario.n_x();
    KalmanState::new(
        scenario.x0_prior.clone(),
        Matrix::identity(n).scale(scenario.mhe.arrival_x.lambda0),
        sq(&scenario.noise.s_w),
        sq(&scenario.noise.s_v),
    )
}

/// Instantiates an estimator for one trial. EKF and relinearized FIE read
/// the true `p_1` schedule from the trajectory.
pub fn build_estimator(
    kind: EstimatorKind,
    scenario: &Scenario,
    traj: &Trajectory<f64>,
) -> Result<Box<dyn Estimator<f64>>> {
    if !kind.supports(scenario) {
        return Err(Error::InvalidArgument(format!(
            "estimator '{kind}' does not apply to scenario '{}'",
            scenario.name
        )));
    }
    let name = kind.as_str();
    let true_linear = || -> Result<(Matrix<f64>, Matrix<f64>)> {
        match &scenario.plant {
            Plant::Polytopic { true_alpha } => scenario.model.blend(true_alpha),
            Plant::Nonlinear(_) => Err(Error::InvalidArgument("no true linear model for a nonlinear plant".into())),
        }
    };
    let p1_schedule = || {
        traj.p1
            .clone()
            .ok_or_else(|| Error::InvalidArgument("trajectory carries no parameter schedule".into()))
    };
    Ok(match kind {
        EstimatorKind::MheAdaptive => Box::new(AdaptiveMhe::new(
            scenario.model.clone(),
            scenario.weights.clone(),
            scenario.mhe.clone(),
            scenario.x0_prior.clone(),
            scenario.alpha_prior.clone(),
        )?),
        EstimatorKind::MheFixedPrior => {
            let (a, c) = scenario.nominal_matrices()?;
            Box::new(WindowEstimator::new(
                name,
                WindowModel::Linear { a, c },
                scenario.weights.clone(),
                scenario.mhe.horizon,
                scenario.fixed_prior_weight,
                scenario.x0_prior.clone(),
            )?)
        }
        EstimatorKind::Kf => {
            let (a, c) = true_linear()?;
            Box::new(KalmanFilter::new(name, kalman_state(scenario)?, a, c))
        }
        EstimatorKind::KfNominal => {
            let (a, c) = scenario.nominal_matrices()?;
            Box::new(KalmanFilter::new(name, kalman_state(scenario)?, a, c))
        }
        EstimatorKind::Ekf | EstimatorKind::EkfNominal => {
            let Plant::Nonlinear(plant) = &scenario.plant else {
                unreachable!("checked by supports()")
            };
            let p1 = if kind == EstimatorKind::Ekf {
                p1_schedule()?
            } else {
                vec![plant.p1_initial]
            };
            Box::new(ExtendedKalmanFilter::new(name, kalman_state(scenario)?, p1, plant.p2)?)
        }
        EstimatorKind::Fie => {
            let model = match &scenario.plant {
                Plant::Polytopic { .. } => {
                    let (a, c) = true_linear()?;
                    WindowModel::Linear { a, c }
                }
                Plant::Nonlinear(plant) => WindowModel::Relinearized {
                    p1: p1_schedule()?,
                    p2: plant.p2,
                    passes: FIE_RELINEARIZATION_PASSES,
                },
            };
            Box::new(WindowEstimator::new(
                name,
                model,
                scenario.weights.clone(),
                scenario.fie_max_window,
                scenario.fixed_prior_weight,
                scenario.x0_prior.clone(),
            )?)
        }
    })
}

/// One estimator's run over one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorTrial {
    pub estimator: EstimatorKind,
    /// Per-component MSE over samples `k ≥ N`; `None` when diverged.
    pub mse: Option<Vec<f64>>,
    pub failure: Option<String>,
    pub estimates: Vec<Vec<f64>>,
    pub alphas: Vec<Option<Vec<f64>>>,
    pub diagnostics: Vec<StepDiagnostics<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: u64,
    pub runs: Vec<EstimatorTrial>,
}

/// Runs one estimator over a trajectory; errors and blow-ups are returned as
/// a flagged result rather than propagated.
pub fn run_estimator(
    kind: EstimatorKind,
    scenario: &Scenario,
    traj: &Trajectory<f64>,
    keep_diagnostics: bool,
) -> Result<EstimatorTrial> {
    let mut est = build_estimator(kind, scenario, traj)?;
    let n = scenario.n_x();
    let warmup = scenario.mhe.horizon;
    let mut out = EstimatorTrial {
        estimator: kind,
        mse: None,
        failure: None,
        estimates: Vec::with_capacity(traj.len()),
        alphas: Vec::with_capacity(traj.len()),
        diagnostics: Vec::new(),
    };
    let mut sums = vec![0.0; n];
    let mut count = 0usize;
    for (k, y) in traj.outputs.iter().enumerate() {
        let step = match est.step(y) {
            Ok(s) => s,
            Err(e) => {
                out.failure = Some(format!("k={k}: {e}"));
                return Ok(out);
            }
        };
        let size = norm(&step.x_hat);
        if !size.is_finite() || size > DIVERGENCE_NORM {
            out.failure = Some(format!("k={k}: estimate norm {size:e} exceeds {DIVERGENCE_NORM:e}"));
            return Ok(out);
        }
        if k >= warmup {
            for i in 0..n {
                let e = step.x_hat[i] - traj.states[k][i];
                sums[i] += e * e;
            }
            count += 1;
        }
        out.estimates.push(step.x_hat);
        out.alphas.push(step.alpha_hat);
        if keep_diagnostics {
            if let Some(d) = step.diagnostics {
                out.diagnostics.push(d);
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument(format!(
            "run length {} leaves no samples after the {warmup}-sample warm-up",
            scenario.steps
        )));
    }
    out.mse = Some(sums.iter().map(|s| s / count as f64).collect());
    Ok(out)
}

/// Runs every estimator on trial `trial`.
pub fn run_trial(
    scenario: &Scenario,
    estimators: &[EstimatorKind],
    trial: u64,
    keep_diagnostics: bool,
) -> Result<TrialResult> {
    let traj = scenario.simulate_trial(trial)?;
    let runs = estimators
        .iter()
        .map(|&k| run_estimator(k, scenario, &traj, keep_diagnostics))
        .collect::<Result<_>>()?;
    Ok(TrialResult { trial, runs })
}

/// Runs trials `0..trials` on at most `jobs` threads, returning results in
/// trial order.
pub fn run_trial_set(
    scenario: &Scenario,
    estimators: &[EstimatorKind],
    trials: usize,
    jobs: usize,
    keep_diagnostics: bool,
) -> Result<Vec<TrialResult>> {
    scenario.validate()?;
    for &k in estimators {
        if !k.supports(scenario) {
            return Err(Error::InvalidArgument(format!(
                "estimator '{k}' does not apply to scenario '{}'",
                scenario.name
            )));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    pool.install(|| {
        (0..trials as u64)
            .into_par_iter()
            .map(|t| run_trial(scenario, estimators, t, keep_diagnostics))
            .collect()
    })
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// One estimator's row of the MSE table.
#[derive(Debug, Clone, PartialEq)]
pub struct MseRow {
    pub estimator: String,
    pub mse: Vec<f64>,
    /// 95% normal-approximation half-widths of the mean.
    pub ci95: Vec<f64>,
    pub trials_used: usize,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseTable {
    pub trials: usize,
    pub rows: Vec<MseRow>,
}

impl MseTable {
    pub fn from_trials(results: &[TrialResult], n_x: usize) -> Self {
        let names: Vec<EstimatorKind> = results
            .first()
            .map(|r| r.runs.iter().map(|e| e.estimator).collect())
            .unwrap_or_default();
        let rows = names
            .iter()
            .enumerate()
            .map(|(j, kind)| {
                let good: Vec<&Vec<f64>> = results.iter().filter_map(|r| r.runs[j].mse.as_ref()).collect();
                let n = good.len();
                let mut mse = vec![f64::NAN; n_x];
                let mut ci95 = vec![f64::NAN; n_x];
                for i in 0..n_x {
                    let mut s = CompensatedSum::default();
                    good.iter().for_each(|m| s.add(m[i]));
                    if n == 0 {
                        continue;
                    }
                    let mean = s.value() / n as f64;
                    let mut ss = CompensatedSum::default();
                    good.iter().for_each(|m| ss.add((m[i] - mean).powi(2)));
                    let sd = if n > 1 { (ss.value() / (n - 1) as f64).sqrt() } else { 0.0 };
                    mse[i] = mean;
                    ci95[i] = Z95 * sd / (n as f64).sqrt();
                }
                MseRow {
                    estimator: kind.as_str().to_string(),
                    mse,
                    ci95,
                    trials_used: n,
                    diverged: results.len() - n,
                }
            })
            .collect();
        Self {
            trials: results.len(),
            rows,
        }
    }

    pub fn row(&self, estimator: &str) -> Option<&MseRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }

    pub fn total_diverged(&self) -> usize {
        self.rows.iter().map(|r| r.diverged).sum()
    }

    /// Long format: `estimator,component,mse,ci95,trials_used,diverged`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["estimator", "component", "mse", "ci95", "trials_used", "diverged"])?;
        for r in &self.rows {
            for i in 0..r.mse.len() {
                w.write_record([
                    r.estimator.clone(),
                    format!("x{i}"),
                    r.mse[i].to_string(),
                    r.ci95[i].to_string(),
                    r.trials_used.to_string(),
                    r.diverged.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let mut rows: Vec<MseRow> = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).ok_or_else(|| Error::InvalidArgument("short CSV record".into()));
            let parse_f = |i: usize| -> Result<f64> {
                field(i)?
                    .parse()
                    .map_err(|_| Error::InvalidArgument("bad number in MSE table".into()))
            };
            let parse_u = |i: usize| -> Result<usize> {
                field(i)?
                    .parse()
                    .map_err(|_| Error::InvalidArgument("bad count in MSE table".into()))
            };
            let name = field(0)?.to_string();
            let row = match rows.last_mut() {
                Some(r) if r.estimator == name => r,
                _ => {
                    rows.push(MseRow {
                        estimator: name,
                        mse: Vec::new(),
                        ci95: Vec::new(),
                        trials_used: parse_u(4)?,
                        diverged: parse_u(5)?,
                    });
                    rows.last_mut().expect("just pushed")
                }
            };
            row.mse.push(parse_f(2)?);
            row.ci95.push(parse_f(3)?);
        }
        let trials = rows.first().map(|r| r.trials_used + r.diverged).unwrap_or(0);
        Ok(Self { trials, rows })
    }
}

/// Writes per-sample diagnostics of the adaptive MHE.
pub fn write_diagnostics_csv<W: Write>(results: &[TrialResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "trial",
        "k",
        "l_used",
        "l_bound",
        "stop",
        "trace_px",
        "trace_palpha",
        "min_eig_px",
        "min_eig_palpha",
        "theta_x",
        "branch_x",
        "theta_alpha",
        "branch_alpha",
    ])?;
    let opt = |v: Option<f64>| v.map(|t| t.to_string()).unwrap_or_default();
    for r in results {
        for run in r.runs.iter().filter(|e| e.estimator == EstimatorKind::MheAdaptive) {
            for d in &run.diagnostics {
                w.write_record([
                    r.trial.to_string(),
                    d.k.to_string(),
                    d.l_used.to_string(),
                    d.l_bound.map(|b| b.to_string()).unwrap_or_default(),
                    d.stop.as_str().to_string(),
                    d.trace_px.to_string(),
                    d.trace_palpha.to_string(),
                    d.min_eig_px.to_string(),
                    d.min_eig_palpha.to_string(),
                    opt(d.x_update.and_then(|u| u.theta)),
                    d.x_update.map(|u| u.branch.as_str().to_string()).unwrap_or_default(),
                    opt(d.alpha_update.and_then(|u| u.theta)),
                    d.alpha_update.map(|u| u.branch.as_str().to_string()).unwrap_or_default(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Settings shared by the experiment entry points.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub estimators: Vec<EstimatorKind>,
    pub trials: usize,
    pub jobs: usize,
    /// Largest tolerated fraction of diverged estimator runs.
    pub max_diverged_fraction: f64,
}

impl RunConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            estimators: EstimatorKind::defaults_for(&scenario),
            trials: scenario.trials,
            jobs: 1,
            max_diverged_fraction: 0.05,
            scenario,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.trials == 0 || self.estimators.is_empty() {
            return Err(Error::InvalidArgument("need at least one trial and one estimator".into()));
        }
        if !(0.0..=1.0).contains(&self.max_diverged_fraction) {
            return Err(Error::InvalidArgument("diverged fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub table: MseTable,
    pub results: Vec<TrialResult>,
}

impl RunReport {
    /// Diverged runs as a fraction of all estimator runs.
    pub fn diverged_fraction(&self) -> f64 {
        let runs = self.table.trials * self.table.rows.len();
        if runs == 0 {
            0.0
        } else {
            self.table.total_diverged() as f64 / runs as f64
        }
    }

    pub fn failures(&self) -> Vec<(u64, EstimatorKind, String)> {
        self.results
            .iter()
            .flat_map(|r| {
                r.runs
                    .iter()
                    .filter_map(move |e| e.failure.clone().map(|f| (r.trial, e.estimator, f)))
            })
            .collect()
    }
}

/// Monte-Carlo MSE comparison.
pub fn run_trials(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    let results = run_trial_set(&config.scenario, &config.estimators, config.trials, config.jobs, true)?;
    let table = MseTable::from_trials(&results, config.scenario.n_x());
    Ok(RunReport { table, results })
}

/// One cell of the `(l, N)` sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub l: usize,
    pub horizon: usize,
    pub mse: Vec<f64>,
    pub diverged: usize,
}

/// Adaptive-MHE error with exactly `l` dual iterations per sample (no bound
/// or relative-decrease stop) for every `(l, N)` pair.
pub fn sweep_l_n(config: &RunConfig, l_values: &[usize], n_values: &[usize]) -> Result<Vec<SweepCell>> {
    config.validate()?;
    let mut cells = Vec::with_capacity(l_values.len() * n_values.len());
    for &horizon in n_values {
        for &l in l_values {
            let mut s = config.scenario.clone();
            s.mhe.horizon = horizon;
            s.mhe.dual.l_max = l;
            s.mhe.dual.stop_at_bound = false;
            s.mhe.dual.epsilon_stop = 0.0;
            let results = run_trial_set(&s, &[EstimatorKind::MheAdaptive], config.trials, config.jobs, false)?;
            let table = MseTable::from_trials(&results, s.n_x());
            let row = &table.rows[0];
            cells.push(SweepCell {
                l,
                horizon,
                mse: row.mse.clone(),
                diverged: row.diverged,
            });
        }
    }
    Ok(cells)
}

pub fn write_sweep_csv<W: Write>(cells: &[SweepCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n_x = cells.first().map(|c| c.mse.len()).unwrap_or(0);
    let mut header = vec!["l".to_string(), "N".to_string()];
    header.extend((0..n_x).map(|i| format!("mse_x{i}")));
    header.push("diverged".into());
    w.write_record(&header)?;
    for c in cells {
        let mut rec = vec![c.l.to_string(), c.horizon.to_string()];
        rec.extend(c.mse.iter().map(|v| v.to_string()));
        rec.push(c.diverged.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: Read>(input: R) -> Result<Vec<SweepCell>> {
    let mut rd = csv::Reader::from_reader(input);
    let bad = || Error::InvalidArgument("malformed sweep CSV".into());
    let mut cells = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let n = rec.len();
        if n < 3 {
            return Err(bad());
        }
        let f = |i: usize| rec.get(i).ok_or_else(bad);
        cells.push(SweepCell {
            l: f(0)?.parse().map_err(|_| bad())?,
            horizon: f(1)?.parse().map_err(|_| bad())?,
            mse: (2..n - 1)
                .map(|i| f(i)?.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?,
            diverged: f(n - 1)?.parse().map_err(|_| bad())?,
        });
    }
    Ok(cells)
}

/// Parameters `(p̂_1, p̂_2)` read off a blended companion matrix of the
/// nonlinear benchmark. One off-diagonal entry of either companion layout is
/// the constant 1, the other carries `p_1`; the `(2,2)` entry approximates
/// `p_2 cos(p_2 x_2) ≈ p_2`.
pub fn implied_parameters(a: &Matrix<f64>) -> (f64, f64) {
    (a[(0, 1)] + a[(1, 0)] - 1.0, a[(1, 1)])
}

/// One sample of a mixing-weight trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub noise_level: f64,
    pub k: usize,
    pub alpha: Vec<f64>,
    /// `(p̂_1, p̂_2, p_1)` for the nonlinear benchmark.
    pub parameters: Option<(f64, f64, f64)>,
}

/// Adaptive-MHE `α̂_k` along trial 0 for each process-noise level `s_w`.
/// The measurement noise is scaled by the scenario's `s_v / s_w` ratio
/// (zero when the scenario itself is noiseless).
pub fn trace_alpha(config: &RunConfig, noise_levels: &[f64]) -> Result<Vec<TraceRow>> {
    config.validate()?;
    let base_w = config.scenario.noise.s_w.first().copied().unwrap_or(0.0);
    let base_v = config.scenario.noise.s_v.first().copied().unwrap_or(0.0);
    let ratio = if base_w > 0.0 { base_v / base_w } else { 0.0 };
    let per_level = |&level: &f64| -> Result<Vec<TraceRow>> {
        let mut s = config.scenario.clone();
        s.set_noise_levels(level, level * ratio)?;
        let traj = s.simulate_trial(0)?;
        let run = run_estimator(EstimatorKind::MheAdaptive, &s, &traj, false)?;
        if let Some(f) = run.failure {
            return Err(Error::InvalidArgument(format!("trace at noise level {level}: {f}")));
        }
        run.alphas
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let alpha = a.clone().ok_or_else(|| Error::Internal("adaptive MHE returned no alpha".into()))?;
                let parameters = match (&s.plant, &traj.p1) {
                    (Plant::Nonlinear(_), Some(p1)) => {
                        let (a_hat, _) = s.model.blend(&crate::model::SimplexWeights::project(&alpha))?;
                        let (p1_hat, p2_hat) = implied_parameters(&a_hat);
                        Some((p1_hat, p2_hat, p1[k]))
                    }
                    _ => None,
                };
                Ok(TraceRow {
                    noise_level: level,
                    k,
                    alpha,
                    parameters,
                })
            })
            .collect()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs.max(1))
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    let chunks: Vec<Vec<TraceRow>> = pool.install(|| noise_levels.par_iter().map(per_level).collect::<Result<_>>())?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let q = rows.first().map(|r| r.alpha.len()).unwrap_or(0);
    let with_params = rows.first().is_some_and(|r| r.parameters.is_some());
    let mut header = vec!["noise_level".to_string(), "k".to_string()];
    header.extend((1..=q).map(|i| format!("alpha_{i}")));
    if with_params {
        header.extend(["p1_hat", "p2_hat", "p1_true"].map(String::from));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.noise_level.to_string(), r.k.to_string()];
        rec.extend(r.alpha.iter().map(|v| v.to_string()));
        if let Some((a, b, c)) = r.parameters {
            rec.extend([a, b, c].map(|v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{example1, example2};

    #[test]
    fn estimator_ids_round_trip() {
        for k in EstimatorKind::ALL {
            assert_eq!(k.as_str().parse::<EstimatorKind>().unwrap(), k);
        }
        assert!("robust-kf".parse::<EstimatorKind>().is_err());
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut s = CompensatedSum::default();
        s.add(1e16);
        for _ in 0..10 {
            s.add(1.0);
        }
        s.add(-1e16);
        assert_eq!(s.value(), 10.0);
    }

    #[test]
    fn implied_parameters_either_layout() {
        let listed = Matrix::from_row_slice(2, 2, &[0.0, 0.4, 1.0, 0.05]);
        for m in [listed.clone(), listed.transpose()] {
            let (p1, p2) = implied_parameters(&m);
            assert!((p1 - 0.4).abs() < 1e-15 && p2 == 0.05);
        }
    }

    #[test]
    fn mismatched_estimator_is_rejected() {
        let s = example1();
        assert!(run_trial_set(&s, &[EstimatorKind::Ekf], 1, 1, false).is_err());
        let s2 = example2();
        assert!(run_trial_set(&s2, &[EstimatorKind::Kf], 1, 1, false).is_err());
    }

    #[test]
    fn single_trial_table_is_reproducible() {
        let mut s = example1();
        s.steps = 30;
        let mut cfg = RunConfig::new(s);
        cfg.trials = 2;
        let a = run_trials(&cfg).unwrap();
        cfg.jobs = 2;
        let b = run_trials(&cfg).unwrap();
        assert_eq!(a.table, b.table);
        let mut buf = Vec::new();
        a.table.write_csv(&mut buf).unwrap();
        assert_eq!(MseTable::read_csv(buf.as_slice()).unwrap(), a.table);
    }
}
