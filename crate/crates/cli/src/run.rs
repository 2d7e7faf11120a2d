//! One pipeline per subcommand. Each writes `report.json` and `report.csv`
//! into the output directory and returns a one-line summary.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::Result;
use serde::Serialize;
use stoplab::randomized::{RandomizedSummary, ResidualReport};
use stoplab::reflected::{PenalizationReport, PenaltyRunSummary, SolutionSummary};
use stoplab::verify::{
    corollary_check, run_invariant_suite, theorem2_interior_check, write_json, write_report, Check,
    EquivalenceReport, InteriorReport, RunMetadata, Scene,
};
use stoplab::{
    binomial_snell_oracle, dual_value_sweep, lift_solution, penalization_diagnostics,
    residual_check, solve_penalized, solve_penalized_randomized, solve_snell, RunConfig,
    SCHEMA_VERSION,
};

pub struct Outcome {
    pub summary: String,
    pub passed: bool,
}

fn csv_writer(dir: &Path, name: &str) -> Result<csv::Writer<BufWriter<File>>> {
    std::fs::create_dir_all(dir)?;
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(
        dir.join(name),
    )?)))
}

fn dump_file(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir)?;
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn fmt_level(level: f64) -> String {
    level.to_string().replace('.', "p")
}

#[derive(Serialize)]
struct ReflectedReport {
    schema_version: u32,
    metadata: RunMetadata,
    reflected: SolutionSummary,
    penalization: PenalizationReport,
}

pub fn solve_reflected(cfg: &RunConfig) -> Result<Outcome> {
    let scene = Scene::build(cfg)?;
    let dir = &cfg.output.dir;
    let snell = solve_snell(&scene.state, &scene.paths, &scene.basis)?;
    if cfg.output.dump_solutions {
        snell.write_csv(dump_file(dir, "reflected.csv")?)?;
    }
    let mut runs = Vec::new();
    for n in cfg.sorted_levels() {
        let pen = solve_penalized(&scene.state, &scene.paths, &scene.basis, n)?;
        if cfg.output.dump_solutions {
            pen.write_csv(dump_file(dir, &format!("penalized_n{}.csv", fmt_level(n)))?)?;
        }
        runs.push(PenaltyRunSummary::from_solution(&pen, &scene.state));
    }
    runs.push(PenaltyRunSummary::from_solution(&snell, &scene.state));
    let report = ReflectedReport {
        schema_version: SCHEMA_VERSION,
        metadata: RunMetadata::new(cfg, &scene.basis),
        reflected: snell.summary(),
        penalization: penalization_diagnostics(&runs),
    };
    write_json(dir, &report)?;
    let mut w = csv_writer(dir, "report.csv")?;
    w.write_record([
        "level",
        "y0",
        "y0_se",
        "mean_max_violation",
        "max_violation",
        "mean_terminal_push",
    ])?;
    for r in &report.penalization.rows {
        w.write_record([
            r.level.map_or("reflected".into(), |n| n.to_string()),
            r.y0.mean.to_string(),
            r.y0.se.to_string(),
            r.mean_max_violation.to_string(),
            r.max_violation.to_string(),
            r.mean_terminal_push.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(Outcome {
        summary: format!(
            "{}: Y0 = {:.6} (se {:.6}), ladder monotone: {}",
            cfg.problem,
            snell.y0.mean,
            snell.y0.se,
            report.penalization.y0_nondecreasing && report.penalization.violation_nonincreasing
        ),
        passed: true,
    })
}

#[derive(Serialize)]
struct RandomizedReport {
    schema_version: u32,
    metadata: RunMetadata,
    runs: Vec<RandomizedRun>,
}

#[derive(Serialize)]
struct RandomizedRun {
    level: f64,
    #[serde(flatten)]
    summary: RandomizedSummary,
}

pub fn solve_randomized(cfg: &RunConfig) -> Result<Outcome> {
    let scene = Scene::build(cfg)?;
    let dir = &cfg.output.dir;
    let mut runs = Vec::new();
    for n in cfg.sorted_levels() {
        let sol =
            solve_penalized_randomized(&scene.state, &scene.paths, &scene.jumps, &scene.basis, n)?;
        if cfg.output.dump_solutions {
            sol.write_csv(dump_file(
                dir,
                &format!("randomized_n{}.csv", fmt_level(n)),
            )?)?;
        }
        runs.push(RandomizedRun {
            level: n,
            summary: sol.summary(),
        });
    }
    let report = RandomizedReport {
        schema_version: SCHEMA_VERSION,
        metadata: RunMetadata::new(cfg, &scene.basis),
        runs,
    };
    write_json(dir, &report)?;
    let mut w = csv_writer(dir, "report.csv")?;
    w.write_record([
        "level",
        "ybar0",
        "ybar0_se",
        "sign_violation_max",
        "sign_violation_integral",
        "ubar_l2",
    ])?;
    for r in &report.runs {
        let s = &r.summary;
        w.write_record([
            r.level.to_string(),
            s.ybar0.to_string(),
            s.ybar0_se.to_string(),
            s.sign_violation_max.to_string(),
            s.sign_violation_integral.to_string(),
            s.ubar_l2.to_string(),
        ])?;
    }
    w.flush()?;
    let top = report.runs.last().expect("at least one level");
    Ok(Outcome {
        summary: format!(
            "{}: Ybar0^{} = {:.6} (se {:.6}), sign integral {:.3e}",
            cfg.problem,
            top.level,
            top.summary.ybar0,
            top.summary.ybar0_se,
            top.summary.sign_violation_integral
        ),
        passed: true,
    })
}

#[derive(Serialize)]
struct LiftReport {
    schema_version: u32,
    metadata: RunMetadata,
    reflected: SolutionSummary,
    lifted: RandomizedSummary,
    residuals: Vec<ResidualReport>,
}

pub fn lift(cfg: &RunConfig) -> Result<Outcome> {
    let scene = Scene::build(cfg)?;
    let dir = &cfg.output.dir;
    let snell = solve_snell(&scene.state, &scene.paths, &scene.basis)?;
    let lifted = lift_solution(&snell, &scene.jumps, &scene.state)?;
    if cfg.output.dump_solutions {
        lifted.write_csv(dump_file(dir, "lifted.csv")?)?;
    }
    let m = cfg.grid.steps;
    let mut indices = vec![0, m / 2];
    indices.dedup();
    let residuals = indices
        .iter()
        .map(|&i| residual_check(&lifted, &scene.state, &scene.paths, i))
        .collect::<stoplab::Result<Vec<_>>>()?;
    let report = LiftReport {
        schema_version: SCHEMA_VERSION,
        metadata: RunMetadata::new(cfg, &scene.basis),
        reflected: snell.summary(),
        lifted: lifted.summary(),
        residuals,
    };
    write_json(dir, &report)?;
    let mut w = csv_writer(dir, "report.csv")?;
    w.write_record(["t_index", "event", "paths", "mean", "mean_abs", "max_abs"])?;
    for r in &report.residuals {
        for e in &r.events {
            w.write_record([
                r.t_index.to_string(),
                format!("{:?}", e.event).to_lowercase(),
                e.paths.to_string(),
                e.mean.to_string(),
                e.mean_abs.to_string(),
                e.max_abs.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(Outcome {
        summary: format!(
            "{}: Ybar0 = {:.6}, Y0 = {:.6}, mean |residual| at t0 = {:.3e}, sign violation {:.1e}",
            cfg.problem,
            report.lifted.ybar0,
            report.reflected.y0,
            report.residuals[0].mean_abs,
            report.lifted.sign_violation_max
        ),
        passed: true,
    })
}

pub fn dual_sweep(cfg: &RunConfig) -> Result<Outcome> {
    let scene = Scene::build(cfg)?;
    let dir = &cfg.output.dir;
    let sweep = dual_value_sweep(
        &scene.state,
        &scene.paths,
        &scene.jumps,
        &scene.basis,
        &cfg.sorted_levels(),
        &cfg.penalty.epsilons,
        &cfg.penalty.constants,
    )?;
    write_json(dir, &sweep)?;
    sweep.write_csv(BufWriter::new(File::create(dir.join("report.csv"))?))?;
    let top = sweep.levels.last().expect("at least one level");
    let best = top
        .cells
        .iter()
        .map(|c| c.estimate.mean)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Outcome {
        summary: format!(
            "{}: n = {}, Ybar0 = {:.6}, best dual = {:.6}, bands {}",
            cfg.problem,
            top.level,
            top.ybar0.mean,
            best,
            if sweep.all_ok { "ok" } else { "FAILED" }
        ),
        passed: sweep.all_ok,
    })
}

#[derive(Serialize)]
struct CorollaryReport {
    schema_version: u32,
    corollary: EquivalenceReport,
    interior: InteriorReport,
    passed: bool,
}

pub fn corollary(cfg: &RunConfig) -> Result<Outcome> {
    let dir = &cfg.output.dir;
    let eq = corollary_check(cfg)?;
    let m = cfg.grid.steps;
    let mut indices = vec![m / 2, m];
    indices.dedup();
    let interior = theorem2_interior_check(cfg, &indices)?;
    let checks: Vec<Check> = eq.checks.iter().chain(&interior.checks).cloned().collect();
    let passed = eq.passed && interior.passed;
    let summary = format!(
        "{}: oracle {:.6}, Y0 {:.6}, Ybar0 {:.6}, max pairwise gap {:.3e}, {}/{} checks passed",
        cfg.problem,
        eq.oracle,
        eq.snell_y0.mean,
        eq.lifted_ybar0.mean,
        eq.max_pairwise_gap,
        checks.iter().filter(|c| c.passed).count(),
        checks.len()
    );
    let report = CorollaryReport {
        schema_version: SCHEMA_VERSION,
        corollary: eq,
        interior,
        passed,
    };
    write_report(dir, &report, &checks)?;
    Ok(Outcome { summary, passed })
}

pub fn suite(cfg: &RunConfig) -> Result<Outcome> {
    let report = run_invariant_suite(cfg)?;
    write_report(&cfg.output.dir, &report, &report.checks)?;
    let failed: Vec<String> = report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{}/{}", c.instance, c.name))
        .collect();
    let mut summary = format!(
        "suite: {}/{} checks passed over {} instances",
        report.checks.len() - failed.len(),
        report.checks.len(),
        report.metadata.len()
    );
    if !failed.is_empty() {
        summary.push_str(&format!("; failed: {}", failed.join(", ")));
    }
    Ok(Outcome {
        summary,
        passed: report.passed,
    })
}

#[derive(Serialize)]
struct OracleReport {
    schema_version: u32,
    problem: String,
    horizon: f64,
    tree_steps: usize,
    value: f64,
}

pub fn oracle(cfg: &RunConfig) -> Result<Outcome> {
    let spec = cfg.spec()?;
    let value = binomial_snell_oracle(&spec, cfg.grid.horizon, cfg.oracle.tree_steps)?;
    let report = OracleReport {
        schema_version: SCHEMA_VERSION,
        problem: cfg.problem.clone(),
        horizon: cfg.grid.horizon,
        tree_steps: cfg.oracle.tree_steps,
        value,
    };
    let dir = &cfg.output.dir;
    write_json(dir, &report)?;
    let mut w = csv_writer(dir, "report.csv")?;
    w.write_record(["problem", "horizon", "tree_steps", "value"])?;
    w.write_record([
        report.problem.clone(),
        report.horizon.to_string(),
        report.tree_steps.to_string(),
        value.to_string(),
    ])?;
    w.flush()?;
    Ok(Outcome {
        summary: format!("{value:.6}"),
        passed: true,
    })
}
