//! Acceptance run: one PASS/FAIL line per criterion, tolerances pinned below.
//!
//! Criteria listed in `OPEN` are reported like the rest but do not fail the
//! target; everything else does.

use std::path::Path;
use std::time::Instant;

use stoplab::intensity::girsanov_diagnostics;
use stoplab::randomized::JumpEvent;
use stoplab::verify::{corollary_check, write_report, EquivalenceReport, Scene};
use stoplab::{
    check_sign_constraint, evaluate_policy, girsanov_density, lift_solution, residual_check,
    solve_penalized_randomized, solve_snell, ConstantIntensity, RunConfig,
};

const EXACT_TOL: f64 = 1e-8;
const ORACLE_REL_TOL: f64 = 0.015;
const PENALTY_REL_TOL: f64 = 0.01;
const SE_BAND: f64 = 3.0;
const HALVING_RATIO: f64 = 0.5;
const HALVING_SLACK: f64 = 0.25;
const EXACT_INSTANCES: [&str; 3] = ["zero", "running-one", "constant-obstacle"];

/// Criteria whose measured outcome is reported without failing the run.
const OPEN: [u32; 1] = [4];

struct Line {
    id: u32,
    passed: bool,
    detail: String,
}

fn config(problem: &str, steps: usize, paths: usize) -> RunConfig {
    let mut cfg = RunConfig::default().for_problem(problem);
    cfg.grid.steps = steps;
    cfg.monte_carlo.paths = paths;
    cfg
}

fn analytic_y0(problem: &str) -> f64 {
    match problem {
        "zero" => 0.0,
        _ => 1.0,
    }
}

/// Largest residual over all events at `t = 0` and `t = T/2`.
fn lifted_residual(scene: &Scene) -> stoplab::Result<(f64, f64)> {
    let snell = solve_snell(&scene.state, &scene.paths, &scene.basis)?;
    let lifted = lift_solution(&snell, &scene.jumps, &scene.state)?;
    let m = scene.state.grid().steps();
    let mut worst = 0.0_f64;
    for t in [0, m / 2] {
        let rep = residual_check(&lifted, &scene.state, &scene.paths, t)?;
        for e in &rep.events {
            worst = worst.max(e.max_abs);
        }
    }
    let sk = snell
        .skorokhod_sums(&scene.state)
        .iter()
        .fold(0.0_f64, |a, v| a.max(v.abs()));
    Ok((worst, sk))
}

fn criterion_1() -> stoplab::Result<Line> {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    for name in EXACT_INSTANCES {
        for paths in [10, 1000] {
            let scene = Scene::build(&config(name, 50, paths))?;
            let target = analytic_y0(name);
            let snell = solve_snell(&scene.state, &scene.paths, &scene.basis)?;
            let lifted = lift_solution(&snell, &scene.jumps, &scene.state)?;
            let rnd = solve_penalized_randomized(
                &scene.state,
                &scene.paths,
                &scene.jumps,
                &scene.basis,
                64.0,
            )?;
            let (res, sk) = lifted_residual(&scene)?;
            for v in [
                (snell.y0.mean - target).abs(),
                (lifted.y0.mean - target).abs(),
                (rnd.y0.mean - target).abs(),
                res,
                sk,
            ] {
                worst = worst.max(v);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Line {
        id: 1,
        passed: worst <= EXACT_TOL && secs < 1.0,
        detail: format!(
            "max deviation {worst:.1e} (tol {EXACT_TOL:.0e}), runtime {secs:.2}s (limit 1s)"
        ),
    })
}

fn criterion_2(eq: &EquivalenceReport) -> Line {
    let rel = (eq.snell_y0.mean - eq.oracle).abs() / eq.oracle;
    Line {
        id: 2,
        passed: rel <= ORACLE_REL_TOL,
        detail: format!(
            "Y0 {:.4} (se {:.4}) vs oracle {:.4}: rel err {:.3}% (tol {:.1}%)",
            eq.snell_y0.mean,
            eq.snell_y0.se,
            eq.oracle,
            100.0 * rel,
            100.0 * ORACLE_REL_TOL
        ),
    }
}

fn criterion_3(eq: &EquivalenceReport) -> Line {
    let monotone = eq
        .ladder
        .windows(2)
        .all(|w| w[1].y0.mean >= w[0].y0.mean - 2.0 * w[1].y0.combined_se(&w[0].y0));
    let violation = eq
        .ladder
        .windows(2)
        .all(|w| w[1].mean_max_violation <= w[0].mean_max_violation);
    let top = eq.ladder.last().expect("ladder");
    let rel = (top.y0.mean - eq.snell_y0.mean).abs() / eq.snell_y0.mean;
    let ys: Vec<String> = eq
        .ladder
        .iter()
        .map(|r| format!("{:.4}", r.y0.mean))
        .collect();
    Line {
        id: 3,
        passed: monotone && violation && rel <= PENALTY_REL_TOL,
        detail: format!(
            "Y0^n [{}], nondecreasing {monotone}, violation nonincreasing {violation}, |Y0^64 - Y0| {:.3}% (tol {:.0}%)",
            ys.join(", "),
            100.0 * rel,
            100.0 * PENALTY_REL_TOL
        ),
    }
}

fn criterion_4() -> stoplab::Result<Line> {
    let mut exact = 0.0_f64;
    for name in EXACT_INSTANCES {
        let scene = Scene::build(&config(name, 50, 1000))?;
        let snell = solve_snell(&scene.state, &scene.paths, &scene.basis)?;
        let lifted = lift_solution(&snell, &scene.jumps, &scene.state)?;
        for t in [0, 25, 49] {
            let rep = residual_check(&lifted, &scene.state, &scene.paths, t)?;
            for event in JumpEvent::ALL {
                let e = rep
                    .events
                    .iter()
                    .find(|e| e.event == event)
                    .expect("every event reported");
                exact = exact.max(e.max_abs);
            }
        }
    }
    let mut means = Vec::new();
    for m in [25, 50, 100] {
        let scene = Scene::build(&config("put-drift", m, 100_000))?;
        let snell = solve_snell(&scene.state, &scene.paths, &scene.basis)?;
        let lifted = lift_solution(&snell, &scene.jumps, &scene.state)?;
        means.push(residual_check(&lifted, &scene.state, &scene.paths, 0)?.mean_abs);
    }
    let ratios = [means[1] / means[0], means[2] / means[1]];
    let halving = ratios
        .iter()
        .all(|r| (r - HALVING_RATIO).abs() <= HALVING_SLACK * HALVING_RATIO);
    Ok(Line {
        id: 4,
        passed: exact <= EXACT_TOL && halving,
        detail: format!(
            "exact instances max residual {exact:.1e}; put-drift mean |R| M=25/50/100: {:.3}/{:.3}/{:.3}, ratios {:.3}, {:.3} (target 0.5 +/- 25%)",
            means[0], means[1], means[2], ratios[0], ratios[1]
        ),
    })
}

fn criterion_5(eq: &EquivalenceReport) -> stoplab::Result<Line> {
    let mut lifted_max = 0.0_f64;
    for name in ["put-drift", "put-martingale", "constant-obstacle"] {
        let scene = Scene::build(&config(name, 50, 20_000))?;
        let snell = solve_snell(&scene.state, &scene.paths, &scene.basis)?;
        let lifted = lift_solution(&snell, &scene.jumps, &scene.state)?;
        lifted_max = lifted_max.max(check_sign_constraint(&lifted).max);
    }
    let integrals: Vec<f64> = eq
        .ladder
        .iter()
        .map(|r| r.sign_violation_integral)
        .collect();
    let nonincreasing = integrals.windows(2).all(|w| w[1] <= w[0]);
    let shown: Vec<String> = integrals.iter().map(|v| format!("{v:.2e}")).collect();
    Ok(Line {
        id: 5,
        passed: lifted_max == 0.0 && nonincreasing,
        detail: format!(
            "lifted max (U)+ {lifted_max:.1e}; penalized integral [{}], nonincreasing {nonincreasing}",
            shown.join(", ")
        ),
    })
}

fn criterion_6() -> stoplab::Result<Line> {
    let scene = Scene::build(&config("put-drift", 50, 100_000))?;
    let horizon = scene.horizon();
    let mut ok = true;
    let mut parts = Vec::new();
    for nu in [0.5, 1.0, 2.0] {
        let d = girsanov_diagnostics(&ConstantIntensity::new(nu)?, &scene.jumps, &scene.state)?;
        let weight = d.weight.within(1.0, SE_BAND, EXACT_TOL);
        let survival = d.survival.within((-nu * horizon).exp(), SE_BAND, EXACT_TOL);
        let comp = d.compensator_gap.within(0.0, SE_BAND, EXACT_TOL);
        ok &= weight && survival && comp;
        parts.push(format!(
            "nu={nu}: E[L] {:.4}, P(eta>=T) {:.4} vs {:.4}, comp gap {:+.4}",
            d.weight.mean,
            d.survival.mean,
            (-nu * horizon).exp(),
            d.compensator_gap.mean
        ));
    }
    let unit = girsanov_density(&ConstantIntensity::new(1.0)?, &scene.jumps, &scene.state)?;
    let m = scene.state.grid().steps();
    let unit_dev = (0..unit.paths())
        .flat_map(|p| (0..=m).map(move |i| (p, i)))
        .map(|(p, i)| (unit.at(p, i) - 1.0).abs())
        .fold(0.0, f64::max);
    ok &= unit_dev == 0.0;
    Ok(Line {
        id: 6,
        passed: ok,
        detail: format!("{}; max |L^1 - 1| {unit_dev:.1e}", parts.join("; ")),
    })
}

fn criterion_7(eq: &EquivalenceReport) -> Line {
    let horizon = eq.metadata.horizon;
    let level = eq.dual.levels.last().expect("levels");
    let cell = eq
        .dual
        .epsilon_cell(64.0, 0.01)
        .expect("n = 64, eps = 0.01 evaluated");
    let e = cell.estimate.estimate();
    let band = SE_BAND * e.combined_se(&level.ybar0);
    let lo = level.ybar0.mean - 0.01 * horizon - band;
    let hi = level.ybar0.mean + band;
    let in_band = e.mean >= lo && e.mean <= hi;
    let max_gap = eq
        .dual
        .levels
        .iter()
        .flat_map(|l| &l.cells)
        .filter_map(|c| Some(c.max_gap? - c.epsilon?))
        .fold(f64::NEG_INFINITY, f64::max);
    let weak = eq
        .dual
        .levels
        .iter()
        .flat_map(|l| &l.cells)
        .filter(|c| c.constant.is_some())
        .all(|c| {
            let est = c.estimate.estimate();
            est.mean <= eq.snell_y0.mean + SE_BAND * est.combined_se(&eq.snell_y0)
        });
    Line {
        id: 7,
        passed: in_band && max_gap <= 0.0 && weak,
        detail: format!(
            "J(nu^eps) {:.4} (se {:.4}) in [{lo:.4}, {hi:.4}]: {in_band}; max(gap - eps) {max_gap:.1e}; weak duality {weak}",
            e.mean, e.se
        ),
    }
}

fn criterion_8() -> stoplab::Result<Line> {
    let scene = Scene::build(&config("running-one", 50, 100_000))?;
    let horizon = scene.horizon();
    let mut ok = true;
    let mut prev = f64::INFINITY;
    let mut parts = Vec::new();
    for c in [0.1, 0.5, 1.0, 2.0] {
        let est =
            evaluate_policy(&ConstantIntensity::new(c)?, &scene.state, &scene.jumps)?.estimate();
        let exact = (1.0 - (-c * horizon).exp()) / c;
        ok &= est.within(exact, SE_BAND, EXACT_TOL) && est.mean < prev;
        prev = est.mean;
        parts.push(format!("c={c}: {:.4} vs {exact:.4}", est.mean));
    }
    Ok(Line {
        id: 8,
        passed: ok,
        detail: parts.join("; "),
    })
}

fn pipeline_bytes(
    cfg: &RunConfig,
    workers: usize,
    dir: &Path,
) -> stoplab::Result<(Vec<u8>, Vec<u8>)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool");
    let report = pool.install(|| corollary_check(cfg))?;
    write_report(dir, &report, &report.checks)?;
    Ok((
        std::fs::read(dir.join("report.json"))?,
        std::fs::read(dir.join("report.csv"))?,
    ))
}

fn criterion_9() -> stoplab::Result<Line> {
    let mut cfg = config("put-drift", 20, 20_000);
    cfg.penalty.levels = vec![1.0, 8.0, 64.0];
    let tmp = tempfile::tempdir()?;
    let mut runs = Vec::new();
    for (k, workers) in [1, 4, 4].into_iter().enumerate() {
        runs.push(pipeline_bytes(
            &cfg,
            workers,
            &tmp.path().join(format!("run{k}")),
        )?);
    }
    let identical = runs.windows(2).all(|w| w[0] == w[1]);
    Ok(Line {
        id: 9,
        passed: identical,
        detail: format!("three corollary runs (1, 4, 4 workers) byte-identical: {identical}"),
    })
}

fn main() -> stoplab::Result<()> {
    let eq = corollary_check(&config("put-drift", 50, 100_000))?;
    let lines = vec![
        criterion_1()?,
        criterion_2(&eq),
        criterion_3(&eq),
        criterion_4()?,
        criterion_5(&eq)?,
        criterion_6()?,
        criterion_7(&eq),
        criterion_8()?,
        criterion_9()?,
    ];
    for l in &lines {
        println!(
            "{} criterion {}: {}",
            if l.passed { "PASS" } else { "FAIL" },
            l.id,
            l.detail
        );
    }
    let passed = lines.iter().filter(|l| l.passed).count();
    println!("{passed}/{} criteria pass", lines.len());
    let blocking: Vec<u32> = lines
        .iter()
        .filter(|l| !l.passed && !OPEN.contains(&l.id))
        .map(|l| l.id)
        .collect();
    if !blocking.is_empty() {
        eprintln!("failing criteria: {blocking:?}");
        std::process::exit(1);
    }
    Ok(())
}
