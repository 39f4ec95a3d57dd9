//! Acceptance suite: end-to-end criteria with pinned tolerances, one
//! pass/fail line per criterion (run with `-- --nocapture` to see them all).

use ebsde::config::{preset, ExperimentConfig};
use ebsde::drivers::{Driver, RiskPremium};
use ebsde::ergodic_cost::{estimate_lambda, GammaSample, LambdaMethod};
use ebsde::metrics::err_h_study;
use ebsde::metrics::BenchmarkExample;
use ebsde::nn::{Mlp, TrainState};
use ebsde::oracles::{
    constant_power_solution, example1_solution, example2_solution,
    example1_solution_with_convention, ZConvention,
};
use ebsde::sde::{simulate_paths, FactorModel, TimeGrid};
use ebsde::solvers::{
    evaluate, gebsde_loss, gebsde_loss_and_grads, gebsde_train, laebsde_loss,
    laebsde_loss_and_grads, laebsde_train, SolvedEbsde, SolverConfig,
};
use ebsde::utilities::{martingale_check, optimal_strategy, utility_surface, UtilityKind, UtilitySpec};

fn report(criterion: &str, pass: bool, details: &str) {
    println!("[{}] criterion {criterion}: {details}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion}: {details}");
}

/// Shared benchmark-table model: mu = 2, kappa = 2, v0 = 0.5, T = 1.
fn table_model() -> FactorModel {
    FactorModel::ou(2.0, vec![2.0], 0.5).unwrap()
}

#[test]
fn criterion_01_ratio_estimator_benchmark_two() {
    let grid = TimeGrid::new(0.01, 1.0).unwrap();
    let start = std::time::Instant::now();
    let est = estimate_lambda(
        &LambdaMethod::Ratio { driver: Driver::example2(1.0) },
        &table_model(),
        &grid,
        10_000,
        20,
        101,
    )
    .unwrap();
    let runtime = start.elapsed().as_secs_f64();
    let exact = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mean_abs_err =
        est.values.iter().map(|v| (v - exact).abs()).sum::<f64>() / est.values.len() as f64;
    report(
        "1 (ratio estimator, benchmark 2)",
        mean_abs_err <= 0.005 && runtime <= 30.0,
        &format!("mean abs err {mean_abs_err:.6} (<= 0.005), runtime {runtime:.1}s (<= 30s)"),
    );
}

#[test]
fn criterion_02_ratio_estimator_benchmark_one() {
    let grid = TimeGrid::new(0.01, 1.0).unwrap();
    let start = std::time::Instant::now();
    let est = estimate_lambda(
        &LambdaMethod::Ratio { driver: Driver::example1(1.0) },
        &table_model(),
        &grid,
        10_000,
        20,
        102,
    )
    .unwrap();
    let runtime = start.elapsed().as_secs_f64();
    let mean_abs_err =
        est.values.iter().map(|v| v.abs()).sum::<f64>() / est.values.len() as f64;
    report(
        "2 (ratio estimator, benchmark 1)",
        mean_abs_err <= 0.012 && est.value.abs() <= 0.012 && runtime <= 30.0,
        &format!(
            "mean abs err {mean_abs_err:.6} (<= 0.012), mean {:.6}, runtime {runtime:.1}s",
            est.value
        ),
    );
}

#[test]
fn criterion_03_colehopf_power_lambda() {
    let model = FactorModel::ou(3.0, vec![1.3], 0.0).unwrap();
    let theta = RiskPremium::TruncatedLinear { slope: 0.8, bound: 3.0 };
    let method = LambdaMethod::ColeHopfPower { delta: 0.5, theta, k_bound: 4.5 };
    let start = std::time::Instant::now();

    let grid_a = TimeGrid::new(0.02, 1.0).unwrap();
    let est_a = estimate_lambda(&method, &model, &grid_a, 10_000, 3, 103).unwrap();
    let grid_b = TimeGrid::new(0.01, 1.0).unwrap();
    let est_b = estimate_lambda(&method, &model, &grid_b, 100_000, 1, 104).unwrap();
    let runtime = start.elapsed().as_secs_f64();

    let err_a = (est_a.value - 0.1737).abs();
    let err_b = (est_b.value - 0.169749).abs();
    report(
        "3 (Cole-Hopf power-case lambda)",
        err_a <= 0.05 && err_b <= 0.03 && runtime <= 300.0,
        &format!(
            "h=0.02/M=1e4: {:.6} (|d| = {err_a:.4} <= 0.05); h=0.01/M=1e5: {:.6} \
             (|d| = {err_b:.4} <= 0.03); runtime {runtime:.0}s (<= 300s)",
            est_a.value, est_b.value
        ),
    );
}

#[test]
fn criterion_04_gebsde_benchmark_two_training() {
    // h = 0.01, B = 64, lr = 3e-4 on the second benchmark
    // (C_v = 0.75, mu = 1 = kappa^2/2): exact lambda = 0.299206.
    let cfg_text = preset("example2").unwrap();
    let cfg = ExperimentConfig::parse(cfg_text).unwrap();
    let mut solver_cfg = cfg.solver_config().unwrap();
    solver_cfg.grad_steps = 10_000;
    solver_cfg.eval_every = 0;
    solver_cfg.seed = 204;
    let start = std::time::Instant::now();
    let (sol, log) = gebsde_train(&solver_cfg).unwrap();
    let runtime = start.elapsed().as_secs_f64();

    let exact = 0.299206;
    let smoke = (log.records[1999].lambda_bar - exact).abs();
    let final_err = (sol.lambda() - exact).abs();
    report(
        "4 (global solver on benchmark 2)",
        final_err <= 0.02 && smoke <= 0.05 && runtime <= 1200.0,
        &format!(
            "lambda_bar {:.6}: |err| {final_err:.5} (<= 0.02) after 10^4 steps, \
             {smoke:.5} (<= 0.05) at step 2000, runtime {runtime:.0}s (<= 1200s)",
            sol.lambda()
        ),
    );
}

#[test]
fn criterion_05_laebsde_benchmark_one_training() {
    // lambda at h = 0.01 after 10^4 steps, Y error at h = 0.005.
    let model = FactorModel::ou(1.5, vec![0.8], 0.0).unwrap();
    let oracle = example1_solution(1.0, 1.5, 0.8);
    let y0 = oracle.y(0.0);
    let drv = Driver::example1(1.0);

    let grid = TimeGrid::new(0.01, 1.0).unwrap();
    let mut cfg = SolverConfig::new(drv.clone(), model.clone(), grid, 64);
    cfg.grad_steps = 10_000;
    cfg.lr = 3e-4;
    cfg.seed = 205;
    cfg.eval_every = 0;
    cfg.y0 = y0;
    let (sol, _) = laebsde_train(&cfg).unwrap();
    let lambda_err = sol.lambda().abs();

    let grid_fine = TimeGrid::new(0.005, 1.0).unwrap();
    let mut cfg_fine = cfg.clone();
    cfg_fine.grid = grid_fine;
    cfg_fine.seed = 206;
    let (sol_fine, _) = laebsde_train(&cfg_fine).unwrap();
    let eval_bundle = simulate_paths(&model, &grid_fine, 6_400, 207).unwrap();
    let rep = evaluate(&sol_fine, &oracle, &eval_bundle, &drv, &model).unwrap();
    let eps_t = rep.eps_y[grid_fine.n_t()];

    report(
        "5 (locally additive solver on benchmark 1)",
        lambda_err <= 0.02 && eps_t <= 0.05,
        &format!(
            "|lambda_bar| {lambda_err:.5} (<= 0.02) at h = 0.01; \
             time-T mean relative Y error {eps_t:.4} (<= 0.05) at h = 0.005"
        ),
    );
}

#[test]
fn criterion_06_gamma_martingale_at_estimated_lambda() {
    let model = FactorModel::ou(3.0, vec![1.3], 0.0).unwrap();
    let theta = RiskPremium::TruncatedLinear { slope: 0.8, bound: 3.0 };
    let grid = TimeGrid::new(0.01, 1.0).unwrap();
    let est = estimate_lambda(
        &LambdaMethod::ColeHopfPower { delta: 0.5, theta: theta.clone(), k_bound: 4.5 },
        &model,
        &grid,
        20_000,
        1,
        601,
    )
    .unwrap();

    // Independent sample for the expectation check.
    let fresh = simulate_paths(&model, &grid, 20_000, 602).unwrap();
    let delta = 0.5f64;
    let beta = 1.0 / (1.0 - delta);
    let sample = GammaSample::simulate(
        beta,
        |v| {
            let mut t = [0.0];
            theta.eval_into(v, &mut t);
            delta / (2.0 * (1.0 - delta)) * t[0] * t[0]
        },
        |v, out: &mut [f64]| {
            theta.eval_into(v, out);
            out[0] *= delta / (1.0 - delta);
        },
        &fresh,
    );
    let (mean, se) = sample.mean_and_se(est.value);
    report(
        "6 (adjoint expectation at the estimated cost)",
        (mean - 1.0).abs() <= 3.0 * se,
        &format!("mean Gamma(lambda_hat) = {mean:.5}, |d| = {:.5} <= 3 se = {:.5}", (mean - 1.0).abs(), 3.0 * se),
    );
}

#[test]
fn criterion_07_solver_gradients_match_finite_differences() {
    let model = FactorModel::ou(1.5, vec![0.8], 0.0).unwrap();
    let grid = TimeGrid::new(0.05, 0.3).unwrap();
    let bundle = simulate_paths(&model, &grid, 4, 701).unwrap();
    let drv = Driver::new(
        ebsde::drivers::DriverKind::Power { delta: 0.5 },
        ebsde::drivers::ConvexSet::Full,
        RiskPremium::TruncatedLinear { slope: 0.8, bound: 3.0 },
        1,
    )
    .unwrap();
    let y0 = 0.3;
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;

    // Global solver loss.
    let mut state = TrainState::new(vec![Mlp::glorot(&Mlp::standard_sizes(1, 1), 702)], 1e-3, 4.5, false);
    state.lambda_bar = 0.07;
    let (_, grads) = gebsde_loss_and_grads(&state, &bundle, &drv, y0, None);
    let n = state.n_params();
    let base = state.flatten();
    for idx in (0..n).step_by((n / 50).max(1)).chain([n - 1]) {
        let mut bp = base.clone();
        let mut bm = base.clone();
        bp[idx] += eps;
        bm[idx] -= eps;
        let mut plus = state.clone();
        let mut minus = state.clone();
        plus.assign(&bp);
        minus.assign(&bm);
        let lp = gebsde_loss(&plus.nets[0], plus.lambda_bar, &bundle, &drv, y0, None);
        let lm = gebsde_loss(&minus.nets[0], minus.lambda_bar, &bundle, &drv, y0, None);
        let fd = (lp - lm) / (2.0 * eps);
        let rel = (grads[idx] - fd).abs() / fd.abs().max(grads[idx].abs()).max(1e-8);
        worst = worst.max(rel);
        checked += 1;
    }

    // Locally additive solver loss (two networks + the ergodic cost).
    let mut state = TrainState::new(
        vec![
            Mlp::glorot(&Mlp::standard_sizes(1, 1), 703),
            Mlp::glorot(&Mlp::standard_sizes(1, 1), 704),
        ],
        1e-3,
        4.5,
        false,
    );
    state.lambda_bar = -0.04;
    let (_, grads) = laebsde_loss_and_grads(&state, &bundle, &drv, y0, None);
    let n = state.n_params();
    let base = state.flatten();
    for idx in (0..n).step_by((n / 50).max(1)).chain([n - 1]) {
        let mut bp = base.clone();
        let mut bm = base.clone();
        bp[idx] += eps;
        bm[idx] -= eps;
        let mut plus = state.clone();
        let mut minus = state.clone();
        plus.assign(&bp);
        minus.assign(&bm);
        let lp =
            laebsde_loss(&plus.nets[0], &plus.nets[1], plus.lambda_bar, &bundle, &drv, y0, None);
        let lm =
            laebsde_loss(&minus.nets[0], &minus.nets[1], minus.lambda_bar, &bundle, &drv, y0, None);
        let fd = (lp - lm) / (2.0 * eps);
        let rel = (grads[idx] - fd).abs() / fd.abs().max(grads[idx].abs()).max(1e-8);
        worst = worst.max(rel);
        checked += 1;
    }

    report(
        "7 (gradient correctness)",
        worst <= 1e-4 && checked >= 102,
        &format!("{checked} coordinates checked, worst relative error {worst:.2e} (<= 1e-4)"),
    );
}

#[test]
fn criterion_08_oracle_invariants() {
    // Benchmark 2 at the training parameters (mu = 1, kappa = sqrt(2)).
    let kappa = 2.0f64.sqrt();
    let sol2 = example2_solution(0.75, kappa);
    let z_cont = sol2.z_scalar(0.0) == 0.0
        && sol2.z_scalar(1e-13).abs() < 1e-12
        && sol2.z_scalar(-1e-13).abs() < 1e-12;

    let mut kyp_ok = true;
    let fd_eps = 1e-5;
    for i in 0..=160 {
        let v = -8.0 + 0.1 * i as f64;
        if v.abs() < 2.0 * fd_eps {
            continue;
        }
        let fd = (sol2.y(v + fd_eps) - sol2.y(v - fd_eps)) / (2.0 * fd_eps);
        let z = sol2.z_scalar(v);
        if ((kappa * fd - z) / z.abs().max(1e-8)).abs() >= 1e-6 {
            kyp_ok = false;
        }
    }

    let sol1 = example1_solution(1.0, 1.5, 0.8);
    let lambda1_ok = sol1.lambda == 0.0;

    let model1 = FactorModel::ou(1.5, vec![0.8], 0.0).unwrap();
    let b1 = Driver::example1(1.0).bounds(&model1).unwrap();
    let model2 = FactorModel::ou(1.0, vec![kappa], 0.0).unwrap();
    let b2 = Driver::example2(0.75).bounds(&model2).unwrap();
    let mut bounded = true;
    for i in 0..=2000 {
        let v = -10.0 + 0.01 * i as f64;
        if sol1.z_scalar(v).abs() > b1.z_max + 1e-12 || sol2.z_scalar(v).abs() > b2.z_max + 1e-12 {
            bounded = false;
        }
    }

    report(
        "8 (oracle invariants)",
        z_cont && kyp_ok && lambda1_ok && bounded,
        &format!(
            "z continuous at 0: {z_cont}; z = kappa y' to 1e-6: {kyp_ok}; \
             benchmark-1 lambda = 0: {lambda1_ok}; |z| <= Z_max on [-10, 10]: {bounded}"
        ),
    );
}

#[test]
fn criterion_09_regression_error_monotone_in_h_and_lambda() {
    let hs = [0.04, 0.02, 0.01];
    let rows = err_h_study(BenchmarkExample::One, 0.0, &hs, 4_000, 4, 3, 901).unwrap();
    let decreasing = rows[0].err > rows[1].err && rows[1].err > rows[2].err;
    let biased = err_h_study(BenchmarkExample::One, 0.1, &hs, 4_000, 4, 3, 901).unwrap();
    let offset_increases = biased.iter().zip(&rows).all(|(b, r)| b.err > r.err);
    report(
        "9 (backward-scheme error shape)",
        decreasing && offset_increases,
        &format!(
            "Err(h) = [{:.4}, {:.4}, {:.4}] strictly decreasing: {decreasing}; \
             lambda + 0.1 increases it at every h: {offset_increases}",
            rows[0].err, rows[1].err, rows[2].err
        ),
    );
}

#[test]
fn criterion_11_utility_consistency() {
    // U(0, x) = u0(x) exactly for the three families.
    let y0 = -0.35;
    let mut initial_exact = true;
    for kind in
        [UtilityKind::Log, UtilityKind::Exp { gamma: 0.4 }, UtilityKind::Power { delta: 0.5 }]
    {
        let spec = UtilitySpec::new(kind, 1.5, vec![1.5]);
        for x in [0.5, 1.5, 4.0] {
            let u0 = spec.u0(x, y0).unwrap();
            if spec.utility(0.0, x, y0, 0.77).unwrap() != u0 {
                initial_exact = false;
            }
        }
    }

    // Power surface on the preset wealth grid from a short training run.
    let cfg = ExperimentConfig::parse(preset("power-5.3").unwrap()).unwrap();
    let mut solver_cfg = cfg.solver_config().unwrap();
    solver_cfg.grad_steps = 400;
    solver_cfg.eval_every = 0;
    solver_cfg.seed = 1101;
    let (sol, _) = gebsde_train(&solver_cfg).unwrap();
    let spec = UtilitySpec::new(UtilityKind::Power { delta: 0.5 }, cfg.x0().unwrap(), cfg.x_grid().unwrap());
    let model = cfg.model().unwrap();
    let grid = cfg.grid().unwrap();
    let driver = cfg.driver().unwrap();
    let bundle = simulate_paths(&model, &grid, 1, 1102).unwrap();
    let rows = utility_surface(&sol, &spec, &bundle.paths[0], &grid, &driver).unwrap();
    let nx = spec.x_grid.len();
    let mut monotone = true;
    let mut concave = true;
    for chunk in rows.chunks(nx) {
        for w in chunk.windows(2) {
            if w[1].u <= w[0].u {
                monotone = false;
            }
        }
        for w in chunk.windows(3) {
            if w[2].u - 2.0 * w[1].u + w[0].u >= 0.0 {
                concave = false;
            }
        }
    }

    // Constrained two-dimensional preset: the second strategy coordinate is
    // exactly zero.
    let cfg2 = ExperimentConfig::parse(preset("two-dim-5.3").unwrap()).unwrap();
    let mut solver_cfg2 = cfg2.solver_config().unwrap();
    solver_cfg2.grad_steps = 200;
    solver_cfg2.eval_every = 0;
    solver_cfg2.seed = 1103;
    let (sol2, _) = gebsde_train(&solver_cfg2).unwrap();
    let driver2 = cfg2.driver().unwrap();
    let spec2 = UtilitySpec::new(UtilityKind::Power { delta: 0.5 }, 1.0, vec![1.0]);
    let mut second_zero = true;
    for i in 0..=20 {
        let v = -1.0 + 0.1 * i as f64;
        let pi = optimal_strategy(&sol2, &spec2, &driver2, v, 0).unwrap();
        if pi[1] != 0.0 {
            second_zero = false;
        }
    }

    report(
        "11 (utility consistency)",
        initial_exact && monotone && concave && second_zero,
        &format!(
            "U(0,x) = u0(x) exact: {initial_exact}; power surface increasing: {monotone}, \
             concave: {concave}; two-dim strategy second coordinate zero: {second_zero}"
        ),
    );
}

#[test]
fn supplement_martingale_property_of_utilities() {
    // Supporting check behind the consistency property: with the exact
    // constant-theta power solution injected, the mean utility along the
    // optimal wealth stays within 5% of U(0, x0).
    let theta = vec![0.5];
    let delta = 0.5;
    let model = FactorModel::ou(3.0, vec![1.3], 0.0).unwrap();
    let grid = TimeGrid::new(0.005, 1.0).unwrap();
    let bundle = simulate_paths(&model, &grid, 50_000, 1201).unwrap();
    let drv = Driver::new(
        ebsde::drivers::DriverKind::Power { delta },
        ebsde::drivers::ConvexSet::Full,
        RiskPremium::Constant(theta.clone()),
        1,
    )
    .unwrap();
    let sol = SolvedEbsde::Analytic { oracle: constant_power_solution(&theta, delta), y0: 0.1 };
    let spec = UtilitySpec::new(UtilityKind::Power { delta }, 1.0, vec![1.0]);
    let report_mc = martingale_check(&sol, &spec, &drv, &bundle, 1.0).unwrap();
    report(
        "supplement (utility martingale drift)",
        report_mc.max_rel_drift <= 0.05,
        &format!("max relative drift {:.4} (<= 0.05)", report_mc.max_rel_drift),
    );
}

#[test]
fn supplement_z_convention_resolution() {
    // The recursion-consistency diagnostic behind the benchmark-1 z
    // convention: kappa y' is the variant the forward recursion reproduces.
    let model = FactorModel::ou(1.5, vec![0.8], 0.0).unwrap();
    let drv = Driver::example1(1.0);
    let grid = TimeGrid::new(0.01, 1.0).unwrap();
    let bundle = simulate_paths(&model, &grid, 500, 1301).unwrap();
    let paper = example1_solution(1.0, 1.5, 0.8);
    let grad = example1_solution_with_convention(1.0, 1.5, 0.8, ZConvention::KappaGradient);
    let residual = |sol: &ebsde::oracles::OracleSolution| -> f64 {
        let mut acc = 0.0;
        let mut count = 0usize;
        for p in &bundle.paths {
            for k in 0..p.n_ret {
                let v = p.v[k];
                let pred = sol.y(v) - grid.h * drv.eval(v, &sol.z(v))
                    + sol.lambda * grid.h
                    + sol.z_scalar(v) * p.dw[k];
                acc += (sol.y(p.v[k + 1]) - pred).abs();
                count += 1;
            }
        }
        acc / count as f64
    };
    let e_paper = residual(&paper);
    let e_grad = residual(&grad);
    report(
        "supplement (benchmark-1 z convention)",
        e_grad * 3.0 < e_paper,
        &format!("one-step residual: kappa-gradient {e_grad:.5} vs stated form {e_paper:.5}"),
    );
}
