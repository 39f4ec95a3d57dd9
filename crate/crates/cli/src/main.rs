//! Configuration-driven command line for the ergodic-BSDE laboratory:
//! path simulation, return-time bounds, ergodic-cost estimation, solver
//! training, evaluation against the closed forms, table reproduction, and
//! utility surfaces. All outputs are CSV files with an embedded config hash
//! and seed; re-running a command with the same configuration and seed
//! reproduces them bitwise at any thread count.

use clap::{Args, Parser, Subcommand};
use ebsde::config::{preset, preset_names, ExperimentConfig};
use ebsde::csvio::{config_hash, fmt, write_csv};
use ebsde::drivers::DriverKind;
use ebsde::ergodic_cost::estimate_lambda;
use ebsde::metrics::{
    err_h_study, lambda_convergence_grid, method_comparison, rep_stats, BenchmarkExample,
    ComparisonConfig,
};
use ebsde::oracles::OracleSolution;
use ebsde::rng::derive_seed;
use ebsde::sde::{exp_moment_bounds, simulate_paths};
use ebsde::solvers::{evaluate, gebsde_train, laebsde_train, Checkpoint, SolvedEbsde};
use ebsde::utilities::{optimal_strategy, utility_surface, UtilityKind, UtilitySpec};
use std::error::Error;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "ebsde", about = "Ergodic BSDE solvers and forward utilities", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (flat key = value lines).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset: example1, example2, example1-mc, example2-mc,
    /// power-5.3, two-dim-5.3.
    #[arg(long)]
    preset: Option<String>,
    /// Override the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads (default: all cores). Results are thread-count
    /// invariant.
    #[arg(long)]
    threads: Option<usize>,
    /// Validate the configuration and print a summary without running.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate paths and report return-time statistics.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also dump the first N paths to paths.csv.
        #[arg(long)]
        dump_paths: Option<usize>,
    },
    /// Return-time moment bounds and driver constants.
    Bounds {
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo estimate of the ergodic cost.
    EstimateLambda {
        #[command(flatten)]
        common: Common,
    },
    /// Train a neural solver; writes a checkpoint and the training log.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate trained checkpoints against the closed-form solution.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file(s) from `train`; several give repetition
        /// statistics.
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        /// Fresh evaluation paths.
        #[arg(long, default_value_t = 6_400)]
        eval_paths: usize,
    },
    /// Reproduce the benchmark tables.
    Table {
        #[command(flatten)]
        common: Common,
        /// lambda: convergence grid; comparison: exact/MC/solvers; err-h:
        /// discretization-error study.
        #[arg(long, default_value = "lambda")]
        which: String,
    },
    /// Utility surface and optimal strategy from a trained checkpoint.
    Utility {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Box<dyn Error>> {
    let mut cfg = match (&common.config, &common.preset) {
        (Some(path), None) => ExperimentConfig::load(path)?,
        (None, Some(name)) => {
            let text = preset(name).ok_or_else(|| {
                format!("unknown preset {name:?}; available: {}", preset_names().join(", "))
            })?;
            ExperimentConfig::parse(text)?
        }
        _ => return Err("exactly one of --config or --preset is required".into()),
    };
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(dir) = &common.out_dir {
        cfg.set("output.dir", &dir.display().to_string())?;
    }
    if let Some(threads) = common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().ok();
    }
    Ok(cfg)
}

/// Validates and, on --dry-run, prints the summary instead of running.
fn prepare(common: &Common) -> Result<Option<(ExperimentConfig, String)>, Box<dyn Error>> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let hash = config_hash(&cfg.canonical());
    if common.dry_run {
        println!("config ok (hash {hash}, seed {})", cfg.seed());
        print!("{}", cfg.canonical());
        return Ok(None);
    }
    Ok(Some((cfg, hash)))
}

fn run(cli: Cli) -> Result<(), Box<dyn Error>> {
    match cli.command {
        Command::Simulate { common, dump_paths } => {
            let Some((cfg, hash)) = prepare(&common)? else { return Ok(()) };
            cmd_simulate(&cfg, &hash, dump_paths)
        }
        Command::Bounds { common } => {
            let Some((cfg, hash)) = prepare(&common)? else { return Ok(()) };
            cmd_bounds(&cfg, &hash)
        }
        Command::EstimateLambda { common } => {
            let Some((cfg, hash)) = prepare(&common)? else { return Ok(()) };
            cmd_estimate_lambda(&cfg, &hash)
        }
        Command::Train { common } => {
            let Some((cfg, hash)) = prepare(&common)? else { return Ok(()) };
            cmd_train(&cfg, &hash)
        }
        Command::Evaluate { common, checkpoint, eval_paths } => {
            let Some((cfg, hash)) = prepare(&common)? else { return Ok(()) };
            cmd_evaluate(&cfg, &hash, &checkpoint, eval_paths)
        }
        Command::Table { common, which } => {
            let Some((cfg, hash)) = prepare(&common)? else { return Ok(()) };
            cmd_table(&cfg, &hash, &which)
        }
        Command::Utility { common, checkpoint } => {
            let Some((cfg, hash)) = prepare(&common)? else { return Ok(()) };
            cmd_utility(&cfg, &hash, &checkpoint)
        }
    }
}

fn cmd_simulate(
    cfg: &ExperimentConfig,
    hash: &str,
    dump_paths: Option<usize>,
) -> Result<(), Box<dyn Error>> {
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let n = cfg.estimator_m()?;
    let bundle = simulate_paths(&model, &grid, n, cfg.seed())?;
    let mut taus: Vec<f64> = (0..n).map(|j| bundle.tau(j)).collect();
    taus.sort_by(f64::total_cmp);
    let q = |p: f64| taus[((p * (n - 1) as f64).round() as usize).min(n - 1)];
    let dir = cfg.out_dir();
    let rows = vec![
        format!("n_paths,{n}"),
        format!("h,{}", fmt(grid.h)),
        format!("T,{}", fmt(grid.t_min)),
        format!("mean_tau,{}", fmt(bundle.mean_tau())),
        format!("tau_q10,{}", fmt(q(0.10))),
        format!("tau_q50,{}", fmt(q(0.50))),
        format!("tau_q90,{}", fmt(q(0.90))),
        format!("tau_max,{}", fmt(*taus.last().unwrap())),
    ];
    write_csv(&dir.join("summary.csv"), hash, cfg.seed(), "stat,value", rows)?;
    if let Some(limit) = dump_paths {
        let mut rows = Vec::new();
        for (j, p) in bundle.paths.iter().take(limit).enumerate() {
            for (i, v) in p.v.iter().enumerate() {
                rows.push(format!("{j},{i},{},{}", fmt(i as f64 * grid.h), fmt(*v)));
            }
        }
        write_csv(&dir.join("paths.csv"), hash, cfg.seed(), "path,step,t,v", rows)?;
    }
    println!("mean return time {:.4} over {n} paths -> {}", bundle.mean_tau(), dir.display());
    Ok(())
}

fn cmd_bounds(cfg: &ExperimentConfig, hash: &str) -> Result<(), Box<dyn Error>> {
    let model = cfg.model()?;
    let bounds = exp_moment_bounds(&model, model.v0)?;
    let driver = cfg.driver()?;
    let (k, z_max, c_v, c_z) = match driver.bounds(&model) {
        Ok(b) => (b.k, b.z_max, b.c_v, b.c_z),
        Err(_) => {
            let (c_v, c_z) = driver.lipschitz();
            (driver.sup_f0(), f64::NAN, c_v, c_z)
        }
    };
    let row = format!(
        "{},{},{},{},{},{},{}",
        fmt(bounds.b_plus),
        fmt(bounds.b_minus),
        fmt(bounds.gamma_threshold),
        fmt(k),
        fmt(z_max),
        fmt(c_v),
        fmt(c_z)
    );
    let dir = cfg.out_dir();
    write_csv(
        &dir.join("bounds.csv"),
        hash,
        cfg.seed(),
        "b_plus,b_minus,gamma_threshold,K,Z_max,C_v,C_z",
        [row],
    )?;
    println!(
        "B+ = {:.6}, B- = {:.6}, gamma threshold = {:.6}, K = {:.6} -> {}",
        bounds.b_plus,
        bounds.b_minus,
        bounds.gamma_threshold,
        k,
        dir.display()
    );
    Ok(())
}

fn cmd_estimate_lambda(cfg: &ExperimentConfig, hash: &str) -> Result<(), Box<dyn Error>> {
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let driver = cfg.driver()?;
    let method = cfg.estimator_method(&driver)?;
    let est =
        estimate_lambda(&method, &model, &grid, cfg.estimator_m()?, cfg.estimator_reps()?, cfg.seed())?;
    let row = format!(
        "{:?},{},{},{},{},{},{}",
        est.method,
        fmt(grid.h),
        est.n_paths,
        fmt(est.value),
        fmt(est.variance),
        est.values.len(),
        cfg.seed()
    );
    let dir = cfg.out_dir();
    write_csv(
        &dir.join("lambda_table.csv"),
        hash,
        cfg.seed(),
        "method,h,M,mean,variance,reps,seed",
        [row],
    )?;
    println!(
        "lambda = {:.6} (variance {:.3e}, {} reps, {:.1}s) -> {}",
        est.value,
        est.variance,
        est.values.len(),
        est.runtime,
        dir.display()
    );
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, hash: &str) -> Result<(), Box<dyn Error>> {
    let solver_cfg = cfg.solver_config()?;
    let kind = cfg.solver_kind()?;
    let (sol, log) = match kind {
        "laebsde" => laebsde_train(&solver_cfg)?,
        _ => gebsde_train(&solver_cfg)?,
    };
    let dir = cfg.out_dir();
    let rows = log
        .records
        .iter()
        .map(|r| format!("{},{},{}", r.step, fmt(r.train_loss), fmt(r.lambda_bar)));
    write_csv(&dir.join("training_log.csv"), hash, cfg.seed(), "step,loss,lambda_bar", rows)?;
    let ck = Checkpoint::from_solution(&sol, hash)?;
    ck.save(&dir.join("checkpoint.json"))?;
    println!(
        "{kind}: lambda_bar = {:.6} after {} steps ({:.1}s) -> {}",
        sol.lambda(),
        log.records.len(),
        log.runtime,
        dir.display()
    );
    Ok(())
}

fn cmd_evaluate(
    cfg: &ExperimentConfig,
    hash: &str,
    checkpoints: &[PathBuf],
    eval_paths: usize,
) -> Result<(), Box<dyn Error>> {
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let driver = cfg.driver()?;
    let oracle: OracleSolution =
        cfg.oracle()?.ok_or("evaluate requires a benchmark driver with a closed-form solution")?;
    let bundle = simulate_paths(&model, &grid, eval_paths, derive_seed(cfg.seed(), 0xE7A1))?;

    let mut reports = Vec::new();
    for path in checkpoints {
        let sol = Checkpoint::load(path)?.into_solution()?;
        reports.push(evaluate(&sol, &oracle, &bundle, &driver, &model)?);
    }
    let n_t = grid.n_t();
    let dir = cfg.out_dir();
    let rows = (0..=n_t).map(|i| {
        let eps = reports.iter().map(|r| r.eps_y[i]).sum::<f64>() / reports.len() as f64;
        format!("{},{}", fmt(i as f64 * grid.h), fmt(eps))
    });
    write_csv(&dir.join("errors.csv"), hash, cfg.seed(), "t,eps_Y", rows)?;

    let int_y = rep_stats(&reports.iter().map(|r| r.int_y).collect::<Vec<_>>());
    let int_z = rep_stats(&reports.iter().map(|r| r.int_z).collect::<Vec<_>>());
    let row = format!(
        "{},{},{},{},{}",
        fmt(grid.h),
        fmt(int_y.mean),
        fmt(int_z.mean),
        fmt(int_y.ci_lo),
        fmt(int_y.ci_hi)
    );
    write_csv(&dir.join("integral_errors.csv"), hash, cfg.seed(), "h,I_Y,I_Z,ci_lo,ci_hi", [row])?;
    let lam = rep_stats(&reports.iter().map(|r| r.lambda_abs_err).collect::<Vec<_>>());
    println!(
        "I(Y) = {:.5}, I(Z) = {:.5}, |lambda err| = {:.5} over {} checkpoint(s) -> {}",
        int_y.mean,
        int_z.mean,
        lam.mean,
        reports.len(),
        dir.display()
    );
    Ok(())
}

fn benchmark_example(cfg: &ExperimentConfig) -> Result<BenchmarkExample, Box<dyn Error>> {
    Ok(match cfg.driver()?.kind {
        DriverKind::Example1 { .. } => BenchmarkExample::One,
        DriverKind::Example2 { .. } => BenchmarkExample::Two,
        DriverKind::Power { .. } => BenchmarkExample::Power,
        _ => return Err("this study needs a benchmark (example/power) driver".into()),
    })
}

fn cmd_table(cfg: &ExperimentConfig, hash: &str, which: &str) -> Result<(), Box<dyn Error>> {
    let dir = cfg.out_dir();
    match which {
        "lambda" => {
            let model = cfg.model()?;
            let driver = cfg.driver()?;
            let method = cfg.estimator_method(&driver)?;
            let exact = cfg.oracle()?.map(|o| o.lambda);
            let rows = lambda_convergence_grid(
                &method,
                &model,
                exact,
                cfg.grid()?.t_min,
                &cfg.table_h_list()?,
                &cfg.table_m_list()?,
                cfg.estimator_reps()?,
                cfg.seed(),
            )?;
            let lines = rows.iter().map(|r| {
                format!(
                    "{},{},{},{},{},{},{}",
                    r.method,
                    fmt(r.h),
                    r.m_paths,
                    fmt(r.mean_abs_err.unwrap_or(r.mean)),
                    fmt(r.variance),
                    r.reps,
                    r.seed
                )
            });
            write_csv(
                &dir.join("lambda_table.csv"),
                hash,
                cfg.seed(),
                "method,h,M,mean,variance,reps,seed",
                lines,
            )?;
            println!("{} cells -> {}", rows.len(), dir.join("lambda_table.csv").display());
        }
        "comparison" => {
            let model = cfg.model()?;
            let driver = cfg.driver()?;
            let method = cfg.estimator_method(&driver)?;
            let exact = cfg.oracle()?.map(|o| o.lambda);
            let grid = cfg.grid()?;
            let solver_cfg = cfg.solver_config()?;
            let ccfg = ComparisonConfig {
                h: grid.h,
                t_min: grid.t_min,
                mc_paths: cfg.estimator_m()?,
                mc_reps: cfg.estimator_reps()?,
                batch: solver_cfg.batch,
                grad_steps: solver_cfg.grad_steps,
                lr: solver_cfg.lr,
                train_reps: 10,
                seed: cfg.seed(),
            };
            let rows = method_comparison(&model, &driver, &method, exact, cfg.y0()?, &ccfg)?;
            let lines = rows.iter().map(|r| {
                format!(
                    "{},{},{},{},{},{},{}",
                    r.method,
                    fmt(grid.h),
                    ccfg.mc_paths,
                    fmt(r.mean),
                    fmt(r.variance),
                    r.reps,
                    cfg.seed()
                )
            });
            write_csv(
                &dir.join("lambda_table.csv"),
                hash,
                cfg.seed(),
                "method,h,M,mean,variance,reps,seed",
                lines,
            )?;
            println!("comparison -> {}", dir.join("lambda_table.csv").display());
        }
        "err-h" => {
            let example = benchmark_example(cfg)?;
            let rows = err_h_study(
                example,
                cfg.oracle()?.map(|o| o.lambda).unwrap_or(0.0),
                &cfg.table_h_list()?,
                4_000,
                4,
                3,
                cfg.seed(),
            )?;
            let lines = rows
                .iter()
                .map(|r| format!("{},{},{},{}", fmt(r.h), fmt(r.err), fmt(r.y_part), fmt(r.z_part)));
            write_csv(&dir.join("err_h.csv"), hash, cfg.seed(), "h,err,y_part,z_part", lines)?;
            println!("err-h study -> {}", dir.join("err_h.csv").display());
        }
        other => {
            return Err(format!("unknown table kind {other:?} (lambda/comparison/err-h)").into())
        }
    }
    Ok(())
}

fn cmd_utility(
    cfg: &ExperimentConfig,
    hash: &str,
    checkpoint: &PathBuf,
) -> Result<(), Box<dyn Error>> {
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let driver = cfg.driver()?;
    let kind = match driver.kind {
        DriverKind::Log => UtilityKind::Log,
        DriverKind::Exp { gamma } => UtilityKind::Exp { gamma },
        DriverKind::Power { delta } => UtilityKind::Power { delta },
        _ => return Err("utility surfaces need a log/exp/power driver".into()),
    };
    let spec = UtilitySpec::new(kind, cfg.x0()?, cfg.x_grid()?);
    let sol: SolvedEbsde = Checkpoint::load(checkpoint)?.into_solution()?;
    let bundle = simulate_paths(&model, &grid, 1, derive_seed(cfg.seed(), 0x5EF))?;
    let path = &bundle.paths[0];

    let dir = cfg.out_dir();
    let rows = utility_surface(&sol, &spec, path, &grid, &driver)?;
    let lines = rows.iter().map(|p| format!("{},{},{}", fmt(p.t), fmt(p.x), fmt(p.u)));
    write_csv(&dir.join("surface.csv"), hash, cfg.seed(), "t,x,U", lines)?;

    let mut strat_lines = Vec::new();
    let header = {
        let mut h = String::from("t,v");
        for c in 1..=driver.dims {
            h.push_str(&format!(",pi_{c}"));
        }
        h
    };
    for i in 0..=grid.n_t().min(path.n_ret) {
        let v = path.v[i];
        let pi = optimal_strategy(&sol, &spec, &driver, v, i)?;
        let mut line = format!("{},{}", fmt(i as f64 * grid.h), fmt(v));
        for p in &pi {
            line.push_str(&format!(",{}", fmt(*p)));
        }
        strat_lines.push(line);
    }
    write_csv(&dir.join("strategy.csv"), hash, cfg.seed(), &header, strat_lines)?;
    println!("surface ({} rows) and strategy -> {}", rows.len(), dir.display());
    Ok(())
}
