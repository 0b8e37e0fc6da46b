use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use polymhe::harness::{self, RunConfig};
use polymhe::mhe::{AdaptiveMhe, StopReason};
use polymhe::scenarios::{self, Plant, Scenario};

#[derive(Parser)]
#[command(name = "polymhe", version, about = "Adaptive polytopic MHE benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo MSE table.
    Run(Common),
    /// Adaptive-MHE error over a grid of iteration counts and horizons.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20")]
        l_values: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "4,8,12")]
        n_values: Vec<usize>,
    },
    /// Mixing-weight (and implied parameter) trajectories.
    Trace {
        #[command(flatten)]
        common: Common,
        /// Process-noise levels S_w; S_v keeps the scenario's S_v/S_w ratio.
        #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.1")]
        noise_levels: Vec<f64>,
    },
    /// Checks scenario invariants and one adaptive-MHE run.
    Validate(Common),
    /// Prints a scenario in the plain-text format.
    Export(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Built-in name (example1, example2) or path to a scenario file.
    #[arg(long, default_value = "example1")]
    scenario: String,
    /// Comma-separated estimator ids; defaults depend on the scenario.
    #[arg(long, value_delimiter = ',')]
    estimators: Vec<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Scenario override, repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Largest tolerated fraction of diverged estimator runs.
    #[arg(long, default_value_t = 0.05)]
    max_diverged: f64,
}

fn load_scenario(spec: &str) -> anyhow::Result<Scenario> {
    if let Some(s) = scenarios::builtin(spec) {
        return Ok(s);
    }
    let text = fs::read_to_string(spec).with_context(|| format!("reading scenario file {spec}"))?;
    Ok(Scenario::from_text(&text)?)
}

fn config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut scenario = load_scenario(&common.scenario)?;
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| anyhow!("override '{o}' is not KEY=VALUE"))?;
        scenario.apply_override(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        scenario.noise.seed = seed;
    }
    if let Some(t) = common.trials {
        scenario.trials = t;
    }
    let mut cfg = RunConfig::new(scenario);
    if !common.estimators.is_empty() {
        cfg.estimators = common
            .estimators
            .iter()
            .map(|e| e.trim().parse())
            .collect::<Result<_, _>>()?;
    }
    cfg.jobs = common.jobs;
    cfg.max_diverged_fraction = common.max_diverged;
    cfg.validate()?;
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn run(common: &Common) -> anyhow::Result<bool> {
    let cfg = config(common)?;
    info!("running {} trials of {}", cfg.trials, cfg.scenario.name);
    let report = harness::run_trials(&cfg)?;
    report.table.write_csv(create(&common.out, "mse_table.csv")?)?;
    harness::write_diagnostics_csv(&report.results, create(&common.out, "diagnostics.csv")?)?;
    println!("{:<16} {:>6} {:>8}  mse (± 95% half-width)", "estimator", "used", "diverged");
    for r in &report.table.rows {
        let cells: Vec<String> = r
            .mse
            .iter()
            .zip(&r.ci95)
            .map(|(m, c)| format!("{m:.6} ± {c:.6}"))
            .collect();
        println!("{:<16} {:>6} {:>8}  {}", r.estimator, r.trials_used, r.diverged, cells.join("  "));
    }
    for (trial, est, why) in report.failures() {
        eprintln!("diverged: trial {trial} {est}: {why}");
    }
    let frac = report.diverged_fraction();
    if frac > cfg.max_diverged_fraction {
        eprintln!(
            "diverged fraction {frac:.3} exceeds the quota {:.3}",
            cfg.max_diverged_fraction
        );
        return Ok(false);
    }
    Ok(true)
}

fn sweep(common: &Common, l_values: &[usize], n_values: &[usize]) -> anyhow::Result<bool> {
    let cfg = config(common)?;
    if l_values.is_empty() || n_values.is_empty() {
        bail!("sweep needs at least one l and one N");
    }
    let cells = harness::sweep_l_n(&cfg, l_values, n_values)?;
    harness::write_sweep_csv(&cells, create(&common.out, "sweep_l_N.csv")?)?;
    for c in &cells {
        println!("l={:<3} N={:<3} mse={:?} diverged={}", c.l, c.horizon, c.mse, c.diverged);
    }
    let diverged: usize = cells.iter().map(|c| c.diverged).sum();
    let runs = cells.len() * cfg.trials;
    Ok(diverged as f64 <= cfg.max_diverged_fraction * runs as f64)
}

fn trace(common: &Common, levels: &[f64]) -> anyhow::Result<bool> {
    let cfg = config(common)?;
    let rows = harness::trace_alpha(&cfg, levels)?;
    harness::write_trace_csv(&rows, create(&common.out, "alpha_trace.csv")?)?;
    for level in levels {
        if let Some(last) = rows.iter().rfind(|r| r.noise_level == *level) {
            println!("S_w={level}: final alpha {:?}", last.alpha);
        }
    }
    Ok(true)
}

fn validate(common: &Common) -> anyhow::Result<bool> {
    let cfg = config(common)?;
    let s = &cfg.scenario;
    let mut ok = true;
    let mut check = |name: &str, pass: bool, detail: String| {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    };
    check("scenario", true, format!("{} vertices, n_x={}, n_p={}", s.model.q(), s.n_x(), s.n_p()));
    if let Plant::Polytopic { true_alpha } = &s.plant {
        let (a, c) = s.model.blend(true_alpha)?;
        let rho = a.spectral_radius();
        check("true model stable", rho < 1.0, format!("spectral radius {rho:.6}"));
        check("true model observable", scenarios::is_observable(&a, &c), String::new());
    }
    let traj = s.simulate_trial(0)?;
    let mut mhe = AdaptiveMhe::new(
        s.model.clone(),
        s.weights.clone(),
        s.mhe.clone(),
        s.x0_prior.clone(),
        s.alpha_prior.clone(),
    )?;
    let slack = s.mhe.dual.monotone_slack;
    let tr_x = s.mhe.arrival_x.lambda0 * s.n_x() as f64;
    let tr_a = s.mhe.arrival_alpha.lambda0 * s.model.q() as f64;
    let (mut mono, mut bounded, mut rejected) = (true, true, 0usize);
    for y in &traj.outputs {
        let (_, rep, d) = mhe.step(y)?;
        let non_increasing = |v: &[f64]| v.windows(2).all(|p| p[1] <= p[0] + slack);
        mono &= non_increasing(&rep.costs_x) && non_increasing(&rep.costs_alpha);
        rejected += usize::from(rep.stop == StopReason::Rejected);
        bounded &= d.trace_px <= tr_x.max(s.mhe.arrival_x.cap) + 1e-9 && d.min_eig_px > 0.0;
        bounded &= d.trace_palpha <= tr_a.max(s.mhe.arrival_alpha.cap) + 1e-9 && d.min_eig_palpha > 0.0;
    }
    check("dual costs non-increasing", mono, format!("{rejected} rejected iterates"));
    check("arrival weights bounded and positive definite", bounded, String::new());
    for kind in &cfg.estimators {
        let r = harness::run_estimator(*kind, s, &traj, false)?;
        check(
            &format!("{kind} runs"),
            r.failure.is_none(),
            r.mse.map(|m| format!("trial-0 mse {m:?}")).or(r.failure).unwrap_or_default(),
        );
    }
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => run(c),
        Command::Sweep {
            common,
            l_values,
            n_values,
        } => sweep(common, l_values, n_values),
        Command::Trace { common, noise_levels } => trace(common, noise_levels),
        Command::Validate(c) => validate(c),
        Command::Export(c) => config(c).map(|cfg| {
            print!("{}", cfg.scenario.to_text());
            true
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
