//! Acceptance criteria, one line each. Run with
//! `cargo test -p polymhe --test acceptance --release`.
//!
//! Criteria 3, 4, 5 and 6 are known to fail with the current estimator (see
//! the README); they are printed as FAIL and do not fail the target. Any
//! other failure exits non-zero; an unexpected pass is reported.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use polymhe::harness::{self, EstimatorKind, RunConfig, RunReport};
use polymhe::linalg::norm;
use polymhe::mhe::{compute_iteration_bound, g_threshold, AdaptiveMhe, StopReason};
use polymhe::scenarios::{self, Plant, Scenario};
use polymhe::{solver, NonlinearPlant, SolverOptions};
use rand::Rng;

const KNOWN_FAILURES: [usize; 4] = [3, 4, 5, 6];

const MONOTONE_SLACK: f64 = 1e-9;
const CONVERGENCE_STATE_TOL: f64 = 1e-5;
const CONVERGENCE_ALPHA_TOL: f64 = 1e-3;
const FIE_FACTOR: f64 = 3.0;
const SWEEP_SLACK: f64 = 0.05;
const SWEEP_TAIL_GAIN: f64 = 0.10;
const QP_OBJECTIVE_TOL: f64 = 1e-4;
const JACOBIAN_TOL: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn mhe_for(s: &Scenario) -> AdaptiveMhe<f64> {
    AdaptiveMhe::new(
        s.model.clone(),
        s.weights.clone(),
        s.mhe.clone(),
        s.x0_prior.clone(),
        s.alpha_prior.clone(),
    )
    .expect("scenario builds an estimator")
}

fn non_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|p| p[1] <= p[0] + MONOTONE_SLACK)
}

fn monotonicity() -> Outcome {
    let s = scenarios::example1();
    let (mut windows, mut bad, mut rejected) = (0usize, 0usize, 0usize);
    for trial in 0..20 {
        let traj = s.simulate_trial(trial).unwrap();
        let mut mhe = mhe_for(&s);
        for y in &traj.outputs {
            let (_, rep, _) = mhe.step(y).unwrap();
            windows += 1;
            rejected += usize::from(rep.stop == StopReason::Rejected);
            if !(non_increasing(&rep.costs_x) && non_increasing(&rep.costs_alpha)) {
                bad += 1;
            }
        }
    }
    outcome(
        bad == 0,
        format!("{windows} windows, {bad} non-monotone, {rejected} stopped on a rejected iterate"),
    )
}

fn bound_validity() -> Outcome {
    let mut s = scenarios::example1();
    s.mhe.dual.stop_at_bound = false;
    s.mhe.dual.epsilon_stop = 0.0;
    let eps = s.mhe.dual.bound_epsilon;
    let (mut checked, mut undecided, mut inapplicable, mut violations) = (0usize, 0usize, 0usize, 0usize);
    let mut worst = String::new();
    for trial in 0..20 {
        let traj = s.simulate_trial(trial).unwrap();
        let mut mhe = mhe_for(&s);
        for (k, y) in traj.outputs.iter().enumerate() {
            let (_, rep, _) = mhe.step(y).unwrap();
            let psi1 = rep.costs_x[0];
            let mut gamma_min = f64::INFINITY;
            let mut crossed = None;
            let mut reached = None;
            let mut applicable = false;
            for i in 1..=rep.l_used {
                let gamma_i = rep.prior_costs[i - 1];
                gamma_min = gamma_min.min(gamma_i);
                // Outside these the bracket is not positive and the bound
                // makes no claim.
                if !(psi1 > 0.0 && gamma_min > 0.0 && eps * psi1 > gamma_i) {
                    continue;
                }
                applicable = true;
                let bound = compute_iteration_bound(psi1, gamma_i, gamma_min, eps).unwrap();
                if let Some(tau) = g_threshold(psi1, gamma_i, gamma_min, eps, i) {
                    if crossed.is_none() && rep.g[i - 1] < tau {
                        crossed = Some((i, bound));
                    }
                }
                if reached.is_none() && i >= bound {
                    reached = Some(i);
                }
            }
            match (crossed, reached) {
                (Some((i, bound)), _) => {
                    checked += 1;
                    if i > bound {
                        violations += 1;
                        worst = format!("trial {trial} k={k}: crossed at {i}, bound {bound}");
                    }
                }
                (None, Some(i)) => {
                    checked += 1;
                    violations += 1;
                    worst = format!("trial {trial} k={k}: bound {i} reached, threshold never crossed");
                }
                (None, None) if applicable => undecided += 1,
                (None, None) => inapplicable += 1,
            }
        }
    }
    outcome(
        violations == 0,
        format!(
            "{checked} windows checked, {violations} violations, {undecided} ended before the bound, \
             {inapplicable} without preconditions {worst}"
        ),
    )
}

fn noiseless_convergence() -> Outcome {
    let mut s = scenarios::example1();
    s.set_noise_levels(0.0, 0.0).unwrap();
    let Plant::Polytopic { true_alpha } = s.plant.clone() else {
        unreachable!()
    };
    let traj = s.simulate_trial(0).unwrap();
    let mut mhe = mhe_for(&s);
    let (mut ex, mut ea) = (0.0f64, 0.0f64);
    let tail = traj.len() - 30;
    for (k, y) in traj.outputs.iter().enumerate() {
        let (est, _, _) = mhe.step(y).unwrap();
        if k >= tail {
            let dx: Vec<f64> = est.current().iter().zip(&traj.states[k]).map(|(a, b)| a - b).collect();
            let da: Vec<f64> = est
                .alpha_hat
                .as_slice()
                .iter()
                .zip(true_alpha.as_slice())
                .map(|(a, b)| a - b)
                .collect();
            ex = ex.max(norm(&dx));
            ea = ea.max(norm(&da));
        }
    }
    outcome(
        ex <= CONVERGENCE_STATE_TOL && ea <= CONVERGENCE_ALPHA_TOL,
        format!(
            "last 30 steps: max |x err| {ex:.3e} (tol {CONVERGENCE_STATE_TOL:e}), \
             max |alpha err| {ea:.3e} (tol {CONVERGENCE_ALPHA_TOL:e})"
        ),
    )
}

fn mse(report: &RunReport, id: &str) -> Vec<f64> {
    report.table.row(id).expect("estimator ran").mse.clone()
}

fn fmt_mse(v: &[f64]) -> String {
    v.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join("/")
}

fn run_report(s: Scenario) -> RunReport {
    let cfg = RunConfig::new(s);
    harness::run_trials(&cfg).unwrap()
}

fn table1(report: &RunReport) -> Outcome {
    let a = mse(report, "mhe-adaptive");
    let r = mse(report, "mhe-fixed-prior");
    let n = mse(report, "kf-nominal");
    let f = mse(report, "fie");
    let mut pass = true;
    for i in 0..a.len() {
        pass &= a[i] < r[i] && a[i] < n[i] && f[i] <= FIE_FACTOR * a[i];
    }
    outcome(
        pass,
        format!(
            "mhe-adaptive {} | mhe-fixed-prior {} | kf-nominal {} | fie {} \
             (reference 0.0212/0.0389, 0.2662/0.4675, FIE 0.0054/0.0039)",
            fmt_mse(&a),
            fmt_mse(&r),
            fmt_mse(&n),
            fmt_mse(&f)
        ),
    )
}

fn sweep_shape() -> Outcome {
    let mut cfg = RunConfig::new(scenarios::example1());
    cfg.trials = 20;
    let ls = [1, 2, 5, 10, 20];
    let cells = harness::sweep_l_n(&cfg, &ls, &[4, 8, 12]).unwrap();
    let mean = |m: &[f64]| m.iter().sum::<f64>() / m.len() as f64;
    let mut pass = true;
    let mut parts = Vec::new();
    for row in cells.chunks(ls.len()) {
        let e: Vec<f64> = row.iter().map(|c| mean(&c.mse)).collect();
        let monotone = e.windows(2).all(|p| p[1] <= p[0] * (1.0 + SWEEP_SLACK));
        let tail = (e[3] - e[4]) / e[3];
        pass &= monotone && tail < SWEEP_TAIL_GAIN;
        parts.push(format!(
            "N={}: [{}] tail gain {:.1}%",
            row[0].horizon,
            e.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", "),
            100.0 * tail
        ));
    }
    outcome(pass, format!("20 trials; {}", parts.join("; ")))
}

fn table2(report: &RunReport) -> Outcome {
    let a = mse(report, "mhe-adaptive");
    let e = mse(report, "ekf-nominal");
    let r = mse(report, "mhe-fixed-prior");
    let diverged = report.table.row("mhe-adaptive").unwrap().diverged;
    let mut pass = diverged == 0;
    for i in 0..a.len() {
        pass &= a[i] < e[i] && a[i] < r[i];
    }
    outcome(
        pass,
        format!(
            "mhe-adaptive {} ({diverged} diverged) | ekf-nominal {} | mhe-fixed-prior {} \
             (reference 0.018/0.065, 0.409/0.430, 0.315/1.011)",
            fmt_mse(&a),
            fmt_mse(&e),
            fmt_mse(&r)
        ),
    )
}

fn arrival_bounded(reports: &[(&Scenario, &RunReport)]) -> Outcome {
    let (mut steps, mut bad) = (0usize, 0usize);
    for (s, report) in reports {
        let ax = &s.mhe.arrival_x;
        let aa = &s.mhe.arrival_alpha;
        let cap_x = (ax.lambda0 * s.n_x() as f64).max(ax.cap * s.n_x() as f64);
        let q = s.model.q() as f64;
        let cap_a = (aa.lambda0 * q).max(aa.cap * q);
        for t in &report.results {
            for run in t.runs.iter().filter(|r| r.estimator == EstimatorKind::MheAdaptive) {
                for d in &run.diagnostics {
                    steps += 1;
                    let ok = d.trace_px <= cap_x * (1.0 + 1e-12)
                        && d.min_eig_px > 0.0
                        && d.trace_palpha <= cap_a * (1.0 + 1e-12)
                        && d.min_eig_palpha > 0.0;
                    bad += usize::from(!ok);
                }
            }
        }
    }
    outcome(bad == 0 && steps > 0, format!("{steps} steps over both examples, {bad} out of bounds"))
}

fn solver_oracle() -> Outcome {
    let mut rng = common::rng(2024);
    let opts = SolverOptions::default();
    let (mut worst_gap, mut worst_kkt, mut not_optimal) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..500 {
        let qp = common::random_box_simplex_qp(&mut rng);
        let sol = solver::solve(&qp, &opts).unwrap();
        let (_, oracle) = common::grid_refine_oracle(&qp);
        not_optimal += usize::from(!sol.is_optimal() || !sol.kkt.within(&opts));
        worst_gap = worst_gap.max((sol.objective - oracle).abs());
        worst_kkt = worst_kkt.max(common::kkt_violation(&qp, &sol.z));
    }
    outcome(
        worst_gap <= QP_OBJECTIVE_TOL && worst_kkt <= opts.tol_stationarity && not_optimal == 0,
        format!(
            "500 programs: max objective gap {worst_gap:.2e} (tol {QP_OBJECTIVE_TOL:e}), \
             max independent KKT violation {worst_kkt:.2e} (tol {:e}), {not_optimal} not certified",
            opts.tol_stationarity
        ),
    )
}

fn jacobian_check() -> Outcome {
    let mut rng = common::rng(99);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let p1 = rng.random_range(-1.5..1.5);
        let p2 = rng.random_range(-1.0..1.0);
        let jac = NonlinearPlant::<f64>::jacobian(&x, p1, p2);
        for j in 0..2 {
            let (mut xp, mut xm) = (x, x);
            xp[j] += h;
            xm[j] -= h;
            let fp = NonlinearPlant::<f64>::dynamics(&xp, p1, p2);
            let fm = NonlinearPlant::<f64>::dynamics(&xm, p1, p2);
            for i in 0..2 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                worst = worst.max((fd - jac.row(i)[j]).abs());
            }
        }
    }
    outcome(
        worst < JACOBIAN_TOL,
        format!("100 states: max |J - central difference| {worst:.2e}"),
    )
}

fn cli(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_polymhe"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let invocations: [(&[&str], &[&str]); 4] = [
        (&["run", "--scenario", "example1", "--trials", "6", "--seed", "7"], &["mse_table.csv", "diagnostics.csv"]),
        (&["run", "--scenario", "example2", "--trials", "4", "--seed", "3"], &["mse_table.csv", "diagnostics.csv"]),
        (
            &["sweep", "--trials", "3", "--l-values", "1,3", "--n-values", "4,6"],
            &["sweep_l_N.csv"],
        ),
        (&["trace", "--scenario", "example2"], &["alpha_trace.csv"]),
    ];
    let mut compared = 0usize;
    let mut mismatched = Vec::new();
    for (n, (args, files)) in invocations.iter().enumerate() {
        let dirs: Vec<_> = ["1", "1", "3"]
            .iter()
            .enumerate()
            .map(|(r, jobs)| {
                let d = tmp.path().join(format!("{n}-{r}"));
                let mut a = args.to_vec();
                a.extend(["--jobs", jobs, "--max-diverged", "1"]);
                assert!(cli(&d, &a), "CLI invocation {a:?} failed");
                d
            })
            .collect();
        for f in *files {
            let base = std::fs::read(dirs[0].join(f)).unwrap();
            for d in &dirs[1..] {
                compared += 1;
                if std::fs::read(d.join(f)).unwrap() != base {
                    mismatched.push(format!("{} {f}", args[0]));
                }
            }
        }
    }
    outcome(
        mismatched.is_empty(),
        format!("{compared} CSV comparisons across repeats and --jobs 1/3, mismatches {mismatched:?}"),
    )
}

fn main() {
    let started = Instant::now();
    let mut lines: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut record = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(id) {
            return;
        }
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!(
            "{} {id:>2} {name}: {} [{secs:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        lines.push((id, name, o, secs));
    };

    record(1, "dual-cost monotonicity", &mut monotonicity);
    record(2, "iteration-bound validity", &mut bound_validity);
    record(3, "noiseless convergence", &mut noiseless_convergence);
    let need_tables = wanted(4) || wanted(6) || wanted(7);
    let ex1 = scenarios::example1();
    let rep1 = need_tables.then(|| run_report(ex1.clone()));
    record(4, "example 1 MSE ordering", &mut || table1(rep1.as_ref().unwrap()));
    record(5, "l/N sweep shape", &mut sweep_shape);
    let ex2 = scenarios::example2();
    let rep2 = need_tables.then(|| run_report(ex2.clone()));
    record(6, "example 2 MSE ordering", &mut || table2(rep2.as_ref().unwrap()));
    record(7, "arrival-cost boundedness", &mut || {
        arrival_bounded(&[(&ex1, rep1.as_ref().unwrap()), (&ex2, rep2.as_ref().unwrap())])
    });
    record(8, "solver oracle equivalence", &mut solver_oracle);
    record(9, "EKF Jacobian", &mut jacobian_check);
    record(10, "CLI determinism", &mut determinism);

    let passed = lines.iter().filter(|l| l.2.pass).count();
    let unexpected: Vec<String> = lines
        .iter()
        .filter(|(id, _, o, _)| o.pass == KNOWN_FAILURES.contains(id))
        .map(|(id, name, o, _)| format!("{id} {name} ({})", if o.pass { "passes" } else { "fails" }))
        .collect();
    println!(
        "{passed}/{} criteria pass in {:.0}s; known failures {KNOWN_FAILURES:?}",
        lines.len(),
        started.elapsed().as_secs_f64()
    );
    if !unexpected.is_empty() {
        eprintln!("unexpected outcome: {}", unexpected.join(", "));
        if lines.iter().any(|(id, _, o, _)| !o.pass && !KNOWN_FAILURES.contains(id)) {
            std::process::exit(1);
        }
    }
}
