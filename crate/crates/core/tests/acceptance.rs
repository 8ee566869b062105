//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line
//! with the measured values, then asserts.

use std::io::Write;
use std::sync::OnceLock;

use vrextra::audit::{fejer_audit_with_tolerance, martingale_probe};
use vrextra::baselines::{variance_scaling_probe, MirrorProxSchedule};
use vrextra::constants::{c_consistency, rate_and_complexity_bounds};
use vrextra::harness::{
    constants_inputs_for, run_experiment, schedule_calls, ExperimentConfig, FitWindow, ProblemSpec,
};
use vrextra::merit::natural_residual_sq;
use vrextra::problems::{self, check_pseudo_monotone, StronglyMonotoneSpec};
use vrextra::sampling::error_decay_probe;
use vrextra::solver::run;
use vrextra::suites::{merit_suite, projection_suite, reference_sets};
use vrextra::{
    AgentSchedule, Coordination, Diagnostics, ExperimentResult, ProblemInstance, SampleSchedule, SolverConfig,
};

// Written to the process stdout directly so the line shows up without
// `--nocapture`.
fn report(id: &str, passed: bool, detail: String) {
    let line = format!("criterion {id}: {} | {detail}\n", if passed { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn default_schedule() -> SampleSchedule {
    SampleSchedule::single(1.0, 3.0, 0.0, 1.0).unwrap()
}

fn strongly() -> ProblemInstance {
    problems::strongly_monotone(&StronglyMonotoneSpec::default()).unwrap()
}

fn rate_config(problem: &ProblemInstance) -> ExperimentConfig {
    let solver = SolverConfig::new(0.25 / problem.lipschitz, default_schedule(), 300, 20_240_601);
    let mut c = ExperimentConfig::new(
        ProblemSpec::StronglyMonotone(StronglyMonotoneSpec::default()),
        solver,
        100,
    );
    c.fit_window = Some(FitWindow { k_lo: 20, k_hi: 300 });
    c
}

/// The rate run, shared by criteria 1 and 9.
fn rate_run() -> &'static (ExperimentConfig, ExperimentResult) {
    static RUN: OnceLock<(ExperimentConfig, ExperimentResult)> = OnceLock::new();
    RUN.get_or_init(|| {
        let c = rate_config(&strongly());
        let r = run_experiment(&c).unwrap();
        (c, r)
    })
}

#[test]
fn criterion_01_rate_slope() {
    let (_, r) = rate_run();
    let fit = r.fit.expect("fit over the window");
    let passed = (-1.8..=-0.85).contains(&fit.slope) && r.replications == 100 && r.max_iterations == 300;
    report(
        "1",
        passed,
        format!(
            "slope {:.4} over k in [{}, {}] ({} points, R={}), required [-1.8, -0.85]",
            fit.slope, fit.k_lo, fit.k_hi, fit.points, r.replications
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_02_error_decay() {
    let p = problems::constant_noise(1.0);
    let rows = error_decay_probe(&p, &[0.7], &[1, 4, 16, 64, 256], 20_000, 11).unwrap();
    let worst = rows.iter().map(|r| (r.product - 1.0).abs()).fold(0.0, f64::max);
    let passed = worst <= 0.2 && rows.len() == 5;
    let products: Vec<String> = rows.iter().map(|r| format!("N={}:{:.4}", r.n, r.product)).collect();
    report(
        "2",
        passed,
        format!(
            "N E||eps_N||^2 = [{}], worst relative deviation {:.4} (limit 0.2)",
            products.join(", "),
            worst
        ),
    );
    assert!(passed);
}

fn audit(problem: &ProblemInstance, x_star: &[f64], seed: u64) -> (usize, usize, f64) {
    let mut c = SolverConfig::new(0.25 / problem.lipschitz, default_schedule(), 100, seed);
    c.diagnostics = Diagnostics::full();
    let (mut violations, mut mismatches, mut worst) = (0, 0, f64::NEG_INFINITY);
    for rep in 0..50 {
        let t = run(problem, &c, rep).unwrap();
        let a = fejer_audit_with_tolerance(&t, x_star, problem, &c, 1e-9).unwrap();
        violations += a.violations;
        mismatches += a.replay_mismatches;
        worst = worst.max(a.max_relative_violation);
    }
    (violations, mismatches, worst)
}

#[test]
fn criterion_03_fejer_audit() {
    let sm = strongly();
    let (v1, m1, w1) = audit(&sm, &sm.solutions.points()[0], 31);
    let sc = problems::scaled_monotone(5, 4, 0.5).unwrap();
    let (v2, m2, w2) = audit(&sc, &sc.solutions.points()[0], 32);

    // negative control: T(x) = -x
    let neg = problems::negated_identity(3, 0.3).unwrap();
    let (v3, _, w3) = audit(&neg, &[0.0; 3], 33);
    let pm = check_pseudo_monotone(neg.mean.as_deref().unwrap(), &neg.set, 2000, 3).unwrap();
    let control_caught = v3 > 0 || !pm.passed;

    let passed = v1 == 0 && m1 == 0 && v2 == 0 && m2 == 0 && control_caught;
    report(
        "3",
        passed,
        format!(
            "strongly monotone: {v1} violations (max rel {w1:.2e}); scaled monotone: {v2} violations (max rel {w2:.2e}); \
             replay mismatches {}; negative control: {v3} violations (max rel {w3:.2e}), pm_check passed={}",
            m1 + m2,
            pm.passed
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_04_martingale_zero_mean() {
    let p = problems::gen_linear_svi(4, 12, 0.5).unwrap().to_instance().unwrap();
    let c = SolverConfig::new(0.25 / p.lipschitz, default_schedule(), 1, 41);
    let x = vec![1.0, -0.5, 2.0, 0.25];
    let r = martingale_probe(&p, &c, &x, 10_000).unwrap();
    let passed = r.mean.abs() <= 4.0 * r.stderr && r.replications == 10_000;
    report(
        "4",
        passed,
        format!(
            "mean dM {:.3e}, stderr {:.3e}, |mean|/stderr {:.2} (limit 4)",
            r.mean,
            r.stderr,
            r.mean.abs() / r.stderr
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_05_example1_variance_laws() {
    let rows = variance_scaling_probe(&[60, 120], 1.0, 1.0, 5000, 51).unwrap();
    let zk_ok = rows
        .iter()
        .all(|r| (r.var_zk_emp - r.var_zk_exact).abs() <= 4.0 * r.var_zk_stderr);
    let ratio = rows[0].var_zbar_emp / rows[1].var_zbar_emp;
    let exact_ratio = rows[0].var_zbar_exact / rows[1].var_zbar_exact;
    let ratio_ok = (5.6..=11.4).contains(&ratio);
    let sums: Vec<f64> = [60, 120]
        .iter()
        .map(|&k| MirrorProxSchedule::new(k, 1.0, 1.0).unwrap().p.iter().sum())
        .collect();
    let sum_ok = sums.iter().all(|s| (s - 1.0).abs() <= 1e-12);
    let passed = zk_ok && ratio_ok && sum_ok;
    report(
        "5",
        passed,
        format!(
            "(a) Var[z^K] within 4 stderr: {zk_ok} [K=60 {:.4} vs {:.4}, K=120 {:.4} vs {:.4}]; \
             (b) Var[zbar^60]/Var[zbar^120] = {ratio:.4} (exact {exact_ratio:.4}), required [5.6, 11.4]: {ratio_ok}; \
             (c) sum p = [{:.15}, {:.15}]: {sum_ok}",
            rows[0].var_zk_emp, rows[0].var_zk_exact, rows[1].var_zk_emp, rows[1].var_zk_exact, sums[0], sums[1]
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_06_oracle_complexity_accounting() {
    let (theta, mu, b) = (1.0f64, 3.0f64, 1.0f64);
    let sched = default_schedule();
    let p = problems::constant_noise(1.0);
    let mut c = SolverConfig::new(0.1, sched.clone(), 1000, 61);
    // T = 0 here, so the residual is zero from the start
    c.residual_floor = f64::NEG_INFINITY;
    let trace = run(&p, &c, 0).unwrap();
    let closed = schedule_calls(&sched, Coordination::Centralized, 1, 1000).unwrap();
    let n_k = |k: u64| {
        let t = k as f64 + mu;
        (theta * t * t.ln().powf(1.0 + b)).ceil() as u64
    };
    let mut details = Vec::new();
    let mut passed = true;
    for kk in [10u64, 100, 1000] {
        let direct: u64 = (0..kk).map(|j| 2 * n_k(j)).sum();
        let proof_sum: u64 = (1..=kk).map(|j| 2 * n_k(j)).sum();
        let kf = kk as f64;
        let bound = 4.0 * theta.max(1.0) * kf * (kf + 2.0 * mu) * ((kf + mu).ln().powf(1.0 + b) + 1.0);
        let run_calls = trace.records[kk as usize].cum_calls;
        let ok = run_calls == direct
            && closed[kk as usize] == direct
            && (proof_sum as f64) <= bound
            && (direct as f64) <= bound;
        passed &= ok;
        details.push(format!(
            "K={kk}: run {run_calls}, exact {direct}, sum_1^K {proof_sum} <= {bound:.0}"
        ));
    }
    report("6", passed, details.join("; "));
    assert!(passed);
}

/// Plain extragradient on a box, written independently of the solver.
fn reference_extragradient(
    t: &dyn vrextra::MeanOperator,
    lo: f64,
    hi: f64,
    x0: &[f64],
    alpha: f64,
    k: usize,
) -> Vec<Vec<f64>> {
    let clamp = |v: Vec<f64>| v.into_iter().map(|a| a.clamp(lo, hi)).collect::<Vec<f64>>();
    let mut xs = vec![x0.to_vec()];
    let mut x = x0.to_vec();
    for _ in 0..k {
        let tx = t.eval(&x);
        let z = clamp(x.iter().zip(&tx).map(|(a, g)| a - alpha * g).collect());
        let tz = t.eval(&z);
        x = clamp(x.iter().zip(&tz).map(|(a, g)| a - alpha * g).collect());
        xs.push(x.clone());
    }
    xs
}

#[test]
fn criterion_07_deterministic_limit() {
    let spec = StronglyMonotoneSpec {
        mult_noise: 0.0,
        add_noise: 0.0,
        start: Some(vec![8.0, -8.0, 8.0, -8.0, 8.0]),
        ..Default::default()
    };
    let p = problems::strongly_monotone(&spec).unwrap();
    let alpha = 0.25 / p.lipschitz;
    let t = p.mean.clone().unwrap();
    let mut c = SolverConfig::new(alpha, default_schedule(), 500, 71);
    c.residual_floor = 0.0;
    let trace = run(&p, &c, 0).unwrap();
    let reference = reference_extragradient(t.as_ref(), -spec.radius, spec.radius, &p.start, alpha, 500);
    let max_dev = trace
        .records
        .iter()
        .zip(&reference)
        .flat_map(|(r, x)| r.x.iter().zip(x).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    let equal_ok = trace.records.len() == 501 && max_dev <= 1e-12;

    let mut c2 = SolverConfig::new(alpha, default_schedule(), 2000, 72);
    c2.residual_floor = 0.0;
    let long = run(&p, &c2, 0).unwrap();
    let hit = long.records.iter().find_map(|r| {
        let r2 = natural_residual_sq(t.as_ref(), &p.set, &r.x, alpha).unwrap();
        (r2 < 1e-12).then_some(r.k)
    });
    let passed = equal_ok && hit.is_some();
    report(
        "7",
        passed,
        format!("max |x_solver - x_reference| over 500 iterations {max_dev:.2e} (limit 1e-12); first k with r^2 < 1e-12: {hit:?} (limit 2000)"),
    );
    assert!(passed);
}

#[test]
fn criterion_08_distributed_consistency() {
    let mono = strongly();
    let split = mono.clone().with_blocks(vec![2, 2, 1]).unwrap();
    let c = SolverConfig::new(0.25 / mono.lipschitz, default_schedule(), 100, 81);
    let mut identical = true;
    for rep in 0..3 {
        let a = run(&mono, &c, rep).unwrap();
        let b = run(&split, &c, rep).unwrap();
        identical &= a.records.len() == b.records.len()
            && a.records
                .iter()
                .zip(&b.records)
                .all(|(u, v)| u.x == v.x && u.z == v.z && u.cum_calls == v.cum_calls);
    }

    let agents = vec![
        AgentSchedule::new(1.0, 3.0, 0.0, 1.0).unwrap(),
        AgentSchedule::new(1.5, 3.0, 0.0, 1.0).unwrap(),
        AgentSchedule::new(1.0, 4.0, 0.0, 1.0).unwrap(),
    ];
    let sched = SampleSchedule::new(agents.clone()).unwrap();
    let mut cfg = rate_config(&mono);
    cfg.blocks = Some(vec![2, 2, 1]);
    cfg.solver.schedule = sched.clone();
    cfg.solver.coordination = Coordination::Distributed;
    cfg.solver.master_seed = 82;
    let r = run_experiment(&cfg).unwrap();
    let fit = r.fit.unwrap();
    let slope_ok = (-1.8..=-0.85).contains(&fit.slope);
    let want: u64 = (0..300u64)
        .map(|k| agents.iter().map(|a| 2 * a.size(k)).sum::<u64>())
        .sum();
    let calls_ok = r.accounting_ok && r.rows[300].cum_calls == want;

    let passed = identical && slope_ok && calls_ok;
    report(
        "8",
        passed,
        format!(
            "centralized m=3 bit-identical to monolithic: {identical}; distributed slope {:.4} in [-1.8, -0.85]: {slope_ok}; \
             calls at K=300 {} vs sum_i sum_k 2N_k,i {want}, per-replication accounting {}",
            fit.slope, r.rows[300].cum_calls, r.accounting_ok
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_09_constants_self_consistency() {
    let (cfg, r) = rate_run();
    let p = strongly();
    let inputs = constants_inputs_for(&p, cfg, r).unwrap();
    assert_eq!((inputs.c, inputs.c2), (2.0, 1.0));
    let report_c = rate_and_complexity_bounds(&inputs).unwrap();
    let q_bar = report_c.scalar.as_ref().expect("single-agent rate block").q_bar;
    let worst = r
        .rows
        .iter()
        .filter(|row| row.k >= 20)
        .map(|row| row.k as f64 * row.mean_r2 / q_bar)
        .fold(0.0, f64::max);
    let bound_ok = worst <= 1.0;

    let cc = c_consistency(&inputs).unwrap();
    let c_ok = cc.holds && cc.threshold.is_some();
    let passed = bound_ok && c_ok;
    report(
        "9",
        passed,
        format!(
            "(a) Q_bar {q_bar:.4e} from empirical J {:.4e}: max_k>=20 k E[r^2]/Q_bar = {worst:.3e}: {bound_ok}; \
             (b) c = {}: smallest admissible c over k <= {} is {:.3}, tail value {:.3}, threshold {:?}: {c_ok}",
            report_c.j.value, cc.c, cc.horizon, cc.min_admissible_c, cc.tail_admissible_c, cc.threshold
        ),
    );
    assert!(passed);
}

#[test]
fn criterion_10_property_suites() {
    let proj = projection_suite(10_000, 101);
    let merit = merit_suite(10_000, 102);
    let proj_fail: Vec<String> = proj
        .iter()
        .filter(|(_, r)| !r.passed)
        .map(|(s, r)| format!("{s}/{} {:.2e}", r.property, r.max_violation))
        .collect();
    let merit_fail: Vec<String> = merit
        .iter()
        .filter(|m| !m.passed())
        .map(|m| m.property.clone())
        .collect();
    let passed = proj_fail.is_empty() && merit_fail.is_empty();
    report(
        "10",
        passed,
        format!(
            "projection: {} checks over {} set types at 1e4 trials, failures {:?}; merit: {} properties, failures {:?}",
            proj.len(),
            reference_sets().len(),
            proj_fail,
            merit.len(),
            merit_fail
        ),
    );
    assert!(passed);
}
