//! Acceptance run: every check prints one PASS/FAIL line; the process exits
//! nonzero if any check fails.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use risk_ctmdp::cli::{execute, Command, Overrides};
use risk_ctmdp::fixtures::{
    bounded_certificate, constant_cost_model, gaussian_identity_fixture, gaussian_solve_fixture,
    random_small_model, two_state_certificate, two_state_model, GAUSSIAN_M, GAUSSIAN_SIGMA,
};
use risk_ctmdp::hjb::{
    contraction_bound, contraction_steps, enclosure_violations, extract_policy,
    grid_error_estimate, solve_hjb, solve_truncated, HjbOptions, PicardOptions, Schedules,
    ThetaGrid,
};
use risk_ctmdp::lyapunov::check_certificate;
use risk_ctmdp::model::{truncate, ControlledChain, CostRate};
use risk_ctmdp::simulate::{
    estimate_j, estimate_second_moment, estimate_truncated_functional, estimate_v0_moments,
    MarkovControl,
};
use risk_ctmdp::verify::{crosscheck_feynman_kac, oracle_fixed_policy, FkOptions};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn constant_cost_case() -> Outcome {
    let c0 = 0.5;
    let alpha = 1.0;
    let grid = ThetaGrid::uniform(201).unwrap();
    let schedules = Schedules {
        delta_list: (0..=6).map(|k| 0.064 * 0.5f64.powi(k)).collect(),
        n_list: vec![2.0, 4.0],
    };
    let mut models = vec![constant_cost_model(c0, alpha).unwrap()];
    for seed in 0..3 {
        let m = random_small_model(100 + seed, 4, 3, 2.0, 1.0, alpha).unwrap();
        let cost = CostRate::from_fn(m.actions(), |_, _| c0).unwrap();
        models.push(m.with_cost(cost).unwrap());
    }
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut fields = Vec::new();
    for m in &models {
        let cert = bounded_certificate(m);
        let (phi, _) = solve_hjb(m, &cert, &schedules, &grid, &HjbOptions::default())
            .map_err(|e| e.to_string())?;
        for (i, &t) in grid.nodes().iter().enumerate() {
            let exact = (t * c0 / alpha).exp();
            for x in 0..m.num_states() {
                worst = worst.max((phi.get(i, x) / exact - 1.0).abs());
            }
        }
        fields.push(phi);
    }
    let elapsed = start.elapsed();

    let m = &models[0];
    let cert = bounded_certificate(m);
    let policy = extract_policy(&fields[0], m);
    let control = MarkovControl::new(policy, 1.0, alpha).map_err(|e| e.to_string())?;
    let est = estimate_j(m, Some(&cert), &control, 1.0, 0, 2000, 11, 1e-6)
        .map_err(|e| e.to_string())?;
    let j_err = (est.j_log - c0 / alpha).abs();
    check(
        worst <= 1e-4
            && elapsed < Duration::from_secs(10)
            && j_err <= 1e-3
            && est.j_tilde.std_error == 0.0,
        format!(
            "max rel err {worst:.2e} (<= 1e-4) over {} models, solved in {elapsed:.2?} (< 10 s); \
             MC J err {j_err:.2e} (<= 1e-3), SE {}",
            models.len(),
            est.j_tilde.std_error
        ),
    )
}

fn zero_cost_case() -> Outcome {
    let m = constant_cost_model(0.0, 1.0).unwrap();
    let cert = bounded_certificate(&m);
    let grid = ThetaGrid::uniform(201).unwrap();
    let start = Instant::now();
    let schedules = Schedules::default_for(&m, &cert).map_err(|e| e.to_string())?;
    let (phi, _) = solve_hjb(&m, &cert, &schedules, &grid, &HjbOptions::default())
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let err = phi.values().iter().fold(0.0f64, |a, v| a.max((v - 1.0).abs()));
    check(
        err <= 1e-10 && elapsed < Duration::from_secs(1),
        format!("max |phi - 1| = {err:.2e} (<= 1e-10) in {elapsed:.2?} (< 1 s)"),
    )
}

fn enclosure_case() -> Outcome {
    let (m, cert) = gaussian_solve_fixture(1.0).map_err(|e| e.to_string())?;
    let grid = ThetaGrid::uniform(201).unwrap();
    let schedules = Schedules::default_for(&m, &cert).map_err(|e| e.to_string())?;
    let (phi, _) = solve_hjb(&m, &cert, &schedules, &grid, &HjbOptions::default())
        .map_err(|e| e.to_string())?;
    let v0 = cert.v0_values(m.space()).unwrap();
    let count = enclosure_violations(&phi, &cert, m.alpha(), &v0, 0.0);
    check(
        count == 0,
        format!(
            "{count} violations of 1 <= phi <= bound over {} nodes",
            phi.values().len()
        ),
    )
}

fn double_limit_case() -> Outcome {
    let m = two_state_model();
    let cert = two_state_certificate();
    let grid = ThetaGrid::uniform(201).unwrap();
    let mut schedules = Schedules::default_for(&m, &cert).map_err(|e| e.to_string())?;
    schedules.n_list = vec![2.0, 4.0, 8.0];
    let (_, rep) = solve_hjb(&m, &cert, &schedules, &grid, &HjbOptions::default())
        .map_err(|e| e.to_string())?;
    let mon = &rep.monitors;
    check(
        mon.delta_monotone_violation <= 1e-8
            && mon.level_monotone_violation <= 1e-8
            && mon.truncated_lipschitz_ratio <= 1.0
            && mon.limit_lipschitz_ratio <= 1.0,
        format!(
            "delta-monotone {:.1e}, n-monotone {:.1e} (<= 1e-8); Lipschitz ratios {:.2e}, {:.2e} (<= 1)",
            mon.delta_monotone_violation,
            mon.level_monotone_violation,
            mon.truncated_lipschitz_ratio,
            mon.limit_lipschitz_ratio
        ),
    )
}

fn contraction_case() -> Outcome {
    let (alpha, delta, level) = (1.0, 0.5, 1.0);
    let grid = ThetaGrid::uniform(201).unwrap().truncated(delta, 1.25).unwrap();
    let opts = PicardOptions {
        tol: 1e-15,
        ..Default::default()
    };
    let mut worst_slack = f64::INFINITY;
    let mut pairs = 0;
    for seed in 0..5 {
        let m = random_small_model(seed, 4, 3, 2.0, 1.0, alpha).unwrap();
        let cert = bounded_certificate(&m);
        let mt = truncate(&m, &cert, level).unwrap();
        let q_bar = mt.q_bar();
        let (_, rep) = solve_truncated(&mt, &grid, &opts).map_err(|e| e.to_string())?;
        for step in contraction_steps(level, delta, q_bar, alpha)..=10 {
            let beta = contraction_bound(level, delta, q_bar, alpha, step);
            for r in rep.m_step_ratios(step, 1e-13) {
                pairs += 1;
                worst_slack = worst_slack.min(beta - r);
            }
        }
    }
    let beta_example = contraction_bound(1.0, 0.5, 2.0, 1.0, 10);
    check(
        worst_slack >= 0.0 && pairs > 0 && (beta_example - 0.039).abs() < 5e-4,
        format!(
            "{pairs} m-step ratios on 5 models, min(beta - ratio) = {worst_slack:.3e}; \
             beta(q=2, m=10) = {beta_example:.4}"
        ),
    )
}

fn feynman_kac_case() -> Outcome {
    let m = two_state_model();
    let cert = two_state_certificate();
    let (level, delta, theta) = (5.0, 0.01, 1.0);
    let mt = truncate(&m, &cert, level).unwrap();
    let grid = ThetaGrid::uniform(201).unwrap();
    let start = Instant::now();
    let (phi, grid_error) =
        grid_error_estimate(&mt, &grid, delta, 1.25, &PicardOptions::default())
            .map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut ok = true;
    for x0 in 0..2 {
        let opts = FkOptions {
            num_traj: 100_000,
            seed: 2024 + x0 as u64,
            grid_error,
            ..Default::default()
        };
        let r = crosscheck_feynman_kac(&mt, &phi, theta, delta, x0, &opts)
            .map_err(|e| e.to_string())?;
        ok &= r.passed();
        let fk = r.get(&format!("fk_x{x0}")).unwrap();
        let se = r.get(&format!("fk_se_x{x0}")).unwrap();
        let inf_ok = r
            .entries
            .iter()
            .filter(|e| e.check_id.starts_with("fk_infimum"))
            .filter(|e| e.passed)
            .count();
        lines.push(format!(
            "x0={x0}: |diff| {:.2e} <= {:.2e}, SE/mean {:.2}%, {inf_ok}/20 random policies >= value",
            fk.lhs,
            fk.rhs,
            100.0 * se.lhs / (se.rhs / 0.005)
        ));
    }
    let elapsed = start.elapsed();
    check(
        ok && elapsed < Duration::from_secs(120),
        format!("{}; grid error {grid_error:.2e}; {elapsed:.2?}", lines.join("; ")),
    )
}

fn oracle_case() -> Outcome {
    let m = two_state_model();
    let cert = two_state_certificate();
    let mt = truncate(&m, &cert, 5.0).unwrap();
    let grid = ThetaGrid::uniform(201).unwrap().truncated(0.01, 1.25).unwrap();
    let (phi, _) = solve_truncated(&mt, &grid, &PicardOptions::default())
        .map_err(|e| e.to_string())?;
    let policy = extract_policy(&phi, &mt);
    let oracle = oracle_fixed_policy(&mt, &policy, &grid, 1e-6).map_err(|e| e.to_string())?;
    let diff = oracle.sup_diff(&phi);
    check(diff <= 1e-4, format!("sup |oracle - solver| = {diff:.2e} (<= 1e-4)"))
}

fn gaussian_certificate_case() -> Outcome {
    let (m, cert) = gaussian_solve_fixture(1.0).map_err(|e| e.to_string())?;
    let r1 = check_certificate(&m, &cert, 1e-5).map_err(|e| e.to_string())?;
    let (g, gcert) = gaussian_identity_fixture().map_err(|e| e.to_string())?;
    let r2 = check_certificate(&g, &gcert, 1e-5).map_err(|e| e.to_string())?;

    let s2 = GAUSSIAN_SIGMA * GAUSSIAN_SIGMA;
    let v0 = gcert.v0_values(g.space()).unwrap();
    let v1_sq: Vec<f64> = gcert
        .v1_values(g.space())
        .unwrap()
        .iter()
        .map(|v| v * v)
        .collect();
    let mut out = [0.0];
    let (mut e0, mut e1) = (0.0f64, 0.0f64);
    for x in 0..g.num_states() {
        let c = g.space().coord(x);
        if c.abs() > 4.0 {
            continue;
        }
        let lambda = GAUSSIAN_M * (c * c + 1.0);
        g.apply_generator(x, &v0, &mut out);
        e0 = e0.max((out[0] / (lambda * s2) - 1.0).abs());
        let poly = 105.0 * s2.powi(4)
            + 420.0 * c * c * s2.powi(3)
            + 210.0 * c.powi(4) * s2 * s2
            + 6.0 * s2 * s2
            + 12.0 * s2 * c * c
            + 28.0 * c.powi(6) * s2;
        g.apply_generator(x, &v1_sq, &mut out);
        e1 = e1.max((out[0] / (lambda * poly) - 1.0).abs());
    }
    check(
        r1.is_empty() && r2.is_empty() && e0 <= 1e-5 && e1 <= 1e-5,
        format!(
            "{} + {} violations at tol 1e-5; drift identity rel errors {e0:.2e}, {e1:.2e} (<= 1e-5)",
            r1.len(),
            r2.len()
        ),
    )
}

fn moment_case() -> Outcome {
    let times = [0.5, 1.0, 2.0, 5.0];
    let mut checks = 0;
    let mut worst = f64::INFINITY;
    let (g, gcert) = gaussian_solve_fixture(1.0).map_err(|e| e.to_string())?;
    let m2 = two_state_model();
    let c2 = two_state_certificate();
    let ns = g.num_states();
    let controls = [
        MarkovControl::stationary(vec![0; ns]),
        MarkovControl::stationary(vec![1; ns]),
        MarkovControl::stationary((0..ns).map(|x| x % 2).collect()),
    ];
    let mut run = |chain: &risk_ctmdp::model::CtmdpModel,
                   cert: &risk_ctmdp::lyapunov::LyapunovCertificate,
                   control: &MarkovControl,
                   x0: usize,
                   seed: u64|
     -> Result<(), String> {
        let alpha = chain.alpha();
        let v0 = cert.v0_values(chain.space()).unwrap();
        let v1 = cert.v1_values(chain.space()).unwrap();
        let ests = estimate_v0_moments(chain, cert, control, x0, &times, 10_000, seed)
            .map_err(|e| e.to_string())?;
        for (t, e) in times.iter().zip(&ests) {
            let bound = (cert.rho0 * t).exp() * v0[x0];
            worst = worst.min(bound + 3.0 * e.std_error - e.mean);
            checks += 1;
        }
        let sm = estimate_second_moment(chain, cert, control, x0, 10_000, seed + 1, 1e-4)
            .map_err(|e| e.to_string())?;
        let bound = cert.second_moment_bound(alpha, v1[x0]);
        worst = worst.min(bound + 3.0 * sm.std_error - sm.mean);
        checks += 1;
        Ok(())
    };
    for (k, control) in controls.iter().enumerate() {
        for x0 in [g.space().nearest(0.0), g.space().nearest(3.0), ns - 1] {
            run(&g, &gcert, control, x0, 31 * k as u64 + x0 as u64)?;
        }
    }
    for a in 0..2 {
        for x0 in 0..2 {
            run(&m2, &c2, &MarkovControl::stationary(vec![a; 2]), x0, 500 + a as u64)?;
        }
    }
    check(
        worst >= 0.0,
        format!("{checks} moment checks, min(bound + 3 SE - mean) = {worst:.3e}"),
    )
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.json");
    fs::write(
        &path,
        r#"{
  "model": {
    "alpha": 1.0,
    "actions": {"count": 2},
    "kernel": {"type": "rate_matrix", "rows": [[-0.5, 0.5], [-2.0, 2.0], [1.0, -1.0], [0.2, -0.2]]},
    "cost": {"spec": {"type": "table", "values": [0.6, 1.0, 0.1, 0.4]}}
  },
  "schedules": {"n_list": [2, 4, 8]},
  "seed": 99,
  "simulate": {"num_traj": 4000},
  "verify": {"level": 5, "delta": 0.01, "num_traj": 20000, "random_policy_traj": 2000, "num_oracle_policies": 5}
}"#,
    )
    .unwrap();
    path
}

fn determinism_case() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = write_config(tmp.path());
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let ov = Overrides {
            out_dir: Some(out.clone()),
            dump_trajectories: true,
            ..Default::default()
        };
        for cmd in [Command::Certify, Command::Solve, Command::Simulate, Command::Verify] {
            let o = execute(&config, cmd, &ov).map_err(|e| e.to_string())?;
            if !o.passed {
                return Err(format!("{} did not pass", cmd.name()));
            }
        }
        let mut names: Vec<_> = fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        files.push(
            names
                .iter()
                .map(|n| (n.clone(), fs::read(out.join(n)).unwrap()))
                .collect::<Vec<_>>(),
        );
    }
    let identical = files[0] == files[1];

    let m = two_state_model();
    let cert = two_state_certificate();
    let mt = truncate(&m, &cert, 5.0).unwrap();
    let grid = ThetaGrid::uniform(201).unwrap().truncated(0.01, 1.25).unwrap();
    let mut results = Vec::new();
    for threads in [1, 2, 4] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let r = pool.install(|| -> Result<_, String> {
            let (phi, _) = solve_truncated(&mt, &grid, &PicardOptions::default())
                .map_err(|e| e.to_string())?;
            let control = MarkovControl::new(extract_policy(&phi, &mt), 1.0, 1.0)
                .map_err(|e| e.to_string())?;
            let est = estimate_truncated_functional(&mt, &control, 1.0, 0.01, 0, 20_000, 5)
                .map_err(|e| e.to_string())?;
            Ok((phi.values().to_vec(), est.mean.to_bits(), est.std_error.to_bits()))
        })?;
        results.push(r);
    }
    let thread_independent = results.windows(2).all(|w| w[0] == w[1]);
    check(
        identical && thread_independent,
        format!(
            "{} CSV files byte-identical across runs: {identical}; \
             field and estimate identical for 1/2/4 threads: {thread_independent}",
            files[0].len()
        ),
    )
}

fn main() {
    let cases: [(&str, fn() -> Outcome); 10] = [
        ("constant-cost analytic solution", constant_cost_case),
        ("zero-cost solution", zero_cost_case),
        ("value bound enclosure", enclosure_case),
        ("monotone double limit", double_limit_case),
        ("Picard contraction", contraction_case),
        ("Feynman-Kac cross-check", feynman_kac_case),
        ("fixed-policy oracle", oracle_case),
        ("Gaussian certificate", gaussian_certificate_case),
        ("moment bounds", moment_case),
        ("determinism", determinism_case),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, case)) in cases.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(case)
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("[{:>2}] PASS {name} ({secs:.1} s): {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("[{:>2}] FAIL {name} ({secs:.1} s): {d}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} check(s) failed");
        std::process::exit(1);
    }
    println!("acceptance: all checks passed");
}
