//! Cross-checks between the stopping, randomized and dual routes, and the
//! report files they produce.
//!
//! Tolerances: [`STRUCTURAL_TOL`] for quantities that are exact by
//! construction, [`ORACLE_REL_TOL`] between the tree oracle and the
//! regression solver on stochastic instances, and [`SE_BAND`] standard
//! errors for statistical equalities. Differences of two estimates use the
//! combined standard error.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::intensity::{
    dual_value_sweep, epsilon_optimal_policy, girsanov_density, girsanov_diagnostics,
    randomized_payoff, ConstantIntensity, DualSweep, WeightedEstimate,
};
use crate::kernel::{JumpRandomization, PathBundle};
use crate::problem::{binomial_snell_oracle, catalog, simulate_forward, ProblemSpec, StatePaths};
use crate::randomized::{
    check_sign_constraint, lift_solution, residual_check, solve_penalized_randomized, JumpEvent,
};
use crate::reflected::{
    penalization_diagnostics, solve_penalized, solve_snell, PenaltyRunSummary, ReflectedSolution,
};
use crate::regression::{NodeRegression, RegressionBasis};
use crate::stats::Estimate;
use crate::SCHEMA_VERSION;

pub const STRUCTURAL_TOL: f64 = 1e-8;
pub const ORACLE_REL_TOL: f64 = 0.015;
/// Allowed relative gap between the most penalized and the reflected `Y_0`.
pub const PENALTY_REL_TOL: f64 = 0.01;
pub const SE_BAND: f64 = 3.0;
/// Band for monotonicity in the penalization level.
pub const MONOTONE_SE_BAND: f64 = 2.0;
/// Share of quantile-grid points on which the interior comparison must hold.
pub const INTERIOR_PASS_SHARE: f64 = 0.99;

/// Shared simulated scene of one run.
pub struct Scene {
    pub spec: ProblemSpec,
    pub paths: PathBundle,
    pub jumps: JumpRandomization,
    pub state: StatePaths,
    pub basis: RegressionBasis,
}

impl Scene {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let spec = cfg.spec()?;
        let grid = cfg.time_grid()?;
        let seed = cfg.monte_carlo.seed;
        let paths = PathBundle::sample(&grid, cfg.monte_carlo.paths, spec.brownian_dim, seed)?;
        let jumps = JumpRandomization::sample(&grid, cfg.monte_carlo.paths, seed)?;
        let state = simulate_forward(&spec, &paths)?;
        let basis = cfg.regression_basis(&spec);
        Ok(Self {
            spec,
            paths,
            jumps,
            state,
            basis,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.state.grid().horizon()
    }
}

/// One pass/fail line of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub instance: String,
    pub name: String,
    pub measured: f64,
    pub target: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    /// `|measured - target| <= tolerance`.
    pub fn close(instance: &str, name: &str, measured: f64, target: f64, tolerance: f64) -> Self {
        Self {
            instance: instance.into(),
            name: name.into(),
            measured,
            target,
            tolerance,
            passed: (measured - target).abs() <= tolerance,
        }
    }

    /// `measured <= bound + tolerance`.
    pub fn at_most(instance: &str, name: &str, measured: f64, bound: f64, tolerance: f64) -> Self {
        Self {
            instance: instance.into(),
            name: name.into(),
            measured,
            target: bound,
            tolerance,
            passed: measured <= bound + tolerance,
        }
    }

    /// `measured >= bound - tolerance`.
    pub fn at_least(instance: &str, name: &str, measured: f64, bound: f64, tolerance: f64) -> Self {
        Self {
            passed: measured >= bound - tolerance,
            ..Self::at_most(instance, name, measured, bound, tolerance)
        }
    }

    pub fn flag(instance: &str, name: &str, ok: bool) -> Self {
        let v = if ok { 1.0 } else { 0.0 };
        Self {
            instance: instance.into(),
            name: name.into(),
            measured: v,
            target: 1.0,
            tolerance: 0.0,
            passed: ok,
        }
    }
}

/// Inputs a report can be reproduced from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub problem: String,
    pub seed: u64,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub basis: String,
    pub levels: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub constants: Vec<f64>,
    pub tree_steps: usize,
}

impl RunMetadata {
    pub fn new(cfg: &RunConfig, basis: &RegressionBasis) -> Self {
        Self {
            problem: cfg.problem.clone(),
            seed: cfg.monte_carlo.seed,
            horizon: cfg.grid.horizon,
            steps: cfg.grid.steps,
            paths: cfg.monte_carlo.paths,
            basis: basis.describe(),
            levels: cfg.sorted_levels(),
            epsilons: cfg.penalty.epsilons.clone(),
            constants: cfg.penalty.constants.clone(),
            tree_steps: cfg.oracle.tree_steps,
        }
    }
}

/// Penalized runs at one level, reflected and randomized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub level: f64,
    pub y0: Estimate,
    pub ybar0: Estimate,
    pub mean_max_violation: f64,
    pub sign_violation_integral: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub schema_version: u32,
    pub metadata: RunMetadata,
    pub oracle: f64,
    pub snell_y0: Estimate,
    pub lifted_ybar0: Estimate,
    pub ladder: Vec<LadderRow>,
    /// `ν^ε` at the largest level and smallest `ε`.
    pub epsilon_dual: Option<WeightedEstimate>,
    /// Largest tested dual estimate at the largest level.
    pub best_dual: Option<WeightedEstimate>,
    /// Largest pairwise gap among oracle, `Y_0`, `Ȳ_0` and the best dual value.
    pub max_pairwise_gap: f64,
    pub dual: DualSweep,
    pub checks: Vec<Check>,
    pub passed: bool,
}

fn oracle_tolerance(name: &str, oracle: f64) -> f64 {
    if catalog::is_deterministic(name) {
        STRUCTURAL_TOL
    } else {
        ORACLE_REL_TOL * oracle.abs()
    }
}

fn all_passed(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.passed)
}

/// Oracle, reflected, lifted, penalized and dual values at `t = 0` on one
/// shared path set.
pub fn corollary_check(cfg: &RunConfig) -> Result<EquivalenceReport> {
    let scene = Scene::build(cfg)?;
    let name = cfg.problem.as_str();
    let horizon = scene.horizon();
    let oracle = binomial_snell_oracle(&scene.spec, horizon, cfg.oracle.tree_steps)?;
    let snell = solve_snell(&scene.state, &scene.paths, &scene.basis)?;
    let lifted = lift_solution(&snell, &scene.jumps, &scene.state)?;
    let lifted_sign = check_sign_constraint(&lifted);
    let lifted_ybar0 = lifted.y0;
    drop(lifted);

    let levels = cfg.sorted_levels();
    let mut penalized = Vec::with_capacity(levels.len());
    for &n in &levels {
        let sol = solve_penalized(&scene.state, &scene.paths, &scene.basis, n)?;
        penalized.push(PenaltyRunSummary::from_solution(&sol, &scene.state));
    }
    let mut runs = penalized.clone();
    runs.push(PenaltyRunSummary::from_solution(&snell, &scene.state));
    let diag = penalization_diagnostics(&runs);
    let dual = dual_value_sweep(
        &scene.state,
        &scene.paths,
        &scene.jumps,
        &scene.basis,
        &levels,
        &cfg.penalty.epsilons,
        &cfg.penalty.constants,
    )?;
    let ladder: Vec<LadderRow> = penalized
        .iter()
        .zip(&dual.levels)
        .map(|(p, d)| LadderRow {
            level: d.level,
            y0: p.y0,
            ybar0: d.ybar0,
            mean_max_violation: p.mean_max_violation,
            sign_violation_integral: d.sign_violation_integral,
        })
        .collect();

    let y0 = snell.y0;
    let mut checks = vec![
        Check::close(
            name,
            "oracle_vs_snell",
            y0.mean,
            oracle,
            oracle_tolerance(name, oracle),
        ),
        Check::close(
            name,
            "lift_identity",
            lifted_ybar0.mean,
            y0.mean,
            STRUCTURAL_TOL,
        ),
        Check::close(name, "lifted_sign_violation", lifted_sign.max, 0.0, 0.0),
        Check::flag(name, "penalized_y0_nondecreasing", diag.y0_nondecreasing),
        Check::flag(
            name,
            "penalized_violation_nonincreasing",
            diag.violation_nonincreasing,
        ),
    ];
    let top = ladder.last().expect("at least one level");
    checks.push(Check::close(
        name,
        "top_level_vs_snell",
        top.y0.mean,
        y0.mean,
        (PENALTY_REL_TOL * y0.mean.abs()).max(STRUCTURAL_TOL),
    ));
    checks.push(Check::close(
        name,
        "randomized_vs_reflected_penalized",
        top.ybar0.mean,
        top.y0.mean,
        (MONOTONE_SE_BAND * top.y0.se).max(STRUCTURAL_TOL),
    ));
    checks.push(Check::flag(
        name,
        "randomized_sign_integral_nonincreasing",
        ladder
            .windows(2)
            .all(|w| w[1].sign_violation_integral <= w[0].sign_violation_integral),
    ));
    checks.push(Check::flag(name, "dual_sweep_cells", dual.all_ok));
    for cell in dual.levels.iter().flat_map(|l| &l.cells) {
        if cell.epsilon.is_none() {
            let e = cell.estimate.estimate();
            checks.push(Check::at_most(
                name,
                &format!("weak_duality[{}]", cell.estimate.policy),
                e.mean,
                y0.mean,
                (SE_BAND * e.combined_se(&y0)).max(STRUCTURAL_TOL),
            ));
        }
    }

    let top_level = *levels.last().expect("at least one level");
    let eps_min = cfg
        .penalty
        .epsilons
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let epsilon_dual = dual
        .epsilon_cell(top_level, eps_min)
        .map(|c| c.estimate.clone());
    if let Some(e) = &epsilon_dual {
        let pen_gap = (y0.mean - top.ybar0.mean).abs();
        let tol = eps_min * horizon + SE_BAND * e.estimate().combined_se(&y0) + pen_gap;
        checks.push(Check::close(
            name,
            "snell_vs_epsilon_dual",
            e.mean,
            y0.mean,
            tol.max(STRUCTURAL_TOL),
        ));
    }
    let best_dual = dual
        .levels
        .last()
        .and_then(|l| {
            l.cells
                .iter()
                .max_by(|a, b| a.estimate.mean.total_cmp(&b.estimate.mean))
        })
        .map(|c| c.estimate.clone());
    let mut values = vec![oracle, y0.mean, lifted_ybar0.mean];
    if let Some(b) = &best_dual {
        values.push(b.mean);
    }
    let max_pairwise_gap = values
        .iter()
        .flat_map(|a| values.iter().map(move |b| (a - b).abs()))
        .fold(0.0, f64::max);

    Ok(EquivalenceReport {
        schema_version: SCHEMA_VERSION,
        metadata: RunMetadata::new(cfg, &scene.basis),
        oracle,
        snell_y0: y0,
        lifted_ybar0,
        ladder,
        epsilon_dual,
        best_dual,
        max_pairwise_gap,
        passed: all_passed(&checks),
        dual,
        checks,
    })
}

/// Comparison of the fitted `Ȳ` and dual conditional values at one node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteriorPoint {
    pub t_index: usize,
    pub time: f64,
    pub survivors: usize,
    pub grid_points: usize,
    /// Largest `|Ȳ(x) - Ĵ(x)|` over the quantile grid.
    pub max_abs_gap: f64,
    /// Mean of `Ȳ(x) - Ĵ(x)`.
    pub mean_gap: f64,
    /// Share of grid points with `Ĵ(x) <= Ȳ(x) + tolerance(x)`.
    pub share_ok: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteriorReport {
    pub schema_version: u32,
    pub metadata: RunMetadata,
    pub level: f64,
    pub epsilon: f64,
    pub policy: String,
    /// The comparison is between regression fits of conditional values on
    /// the basis, not between pathwise quantities.
    pub note: String,
    pub points: Vec<InteriorPoint>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// State quantiles `1%, 2%, …, 99%` of the first coordinate over `rows`.
fn quantile_rows(state: &StatePaths, i: usize, rows: &[usize]) -> Vec<usize> {
    let mut order = rows.to_vec();
    order.sort_by(|&a, &b| {
        state.state(a, i)[0]
            .total_cmp(&state.state(b, i)[0])
            .then(a.cmp(&b))
    });
    let mut picks: Vec<usize> = (1..100)
        .map(|q| order[(q * (order.len() - 1)) / 100])
        .collect();
    picks.dedup_by(|a, b| state.state(*a, i) == state.state(*b, i));
    picks
}

/// At each `t_i`, regresses `Ȳ_{t_i}` (lifted reflected solution) and the
/// `ν^ε`-reweighted payoff from `t_i` on the state among paths alive at
/// `t_i`, then compares the fits on a quantile grid of the state.
pub fn theorem2_interior_check(cfg: &RunConfig, t_indices: &[usize]) -> Result<InteriorReport> {
    let scene = Scene::build(cfg)?;
    let name = cfg.problem.as_str();
    let grid = *scene.state.grid();
    let m = grid.steps();
    if let Some(&bad) = t_indices.iter().find(|&&i| i > m) {
        return Err(Error::Config(format!("time index {bad} beyond {m} steps")));
    }
    let level = *cfg.sorted_levels().last().expect("at least one level");
    let eps = cfg
        .penalty
        .epsilons
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !eps.is_finite() {
        return Err(Error::Config("the interior check needs an epsilon".into()));
    }

    let snell = solve_snell(&scene.state, &scene.paths, &scene.basis)?;
    let lifted = lift_solution(&snell, &scene.jumps, &scene.state)?;
    drop(snell);
    let randomized = solve_penalized_randomized(
        &scene.state,
        &scene.paths,
        &scene.jumps,
        &scene.basis,
        level,
    )?;
    let policy = epsilon_optimal_policy(&randomized, level, eps)?;
    drop(randomized);
    let density = girsanov_density(&policy, &scene.jumps, &scene.state)?;

    let mut points = Vec::with_capacity(t_indices.len());
    let mut checks = Vec::new();
    for &i in t_indices {
        let payoff = randomized_payoff(&scene.state, &scene.jumps, i);
        let rows: Vec<usize> = (0..scene.state.paths())
            .filter(|&p| scene.jumps.alive(p, i))
            .collect();
        if rows.len() < 2 {
            continue;
        }
        let k = scene.state.state_dim();
        let xs: Vec<f64> = rows
            .iter()
            .flat_map(|&p| scene.state.state(p, i).to_vec())
            .collect();
        let hs: Vec<f64> = rows.iter().map(|&p| scene.state.obstacle(p, i)).collect();
        let ybar: Vec<f64> = rows.iter().map(|&p| lifted.ybar(p, i)).collect();
        let dual: Vec<f64> = rows
            .iter()
            .map(|&p| density.terminal(p) / density.at(p, i) * payoff[p])
            .collect();
        let reg = NodeRegression::fit(&scene.basis, &xs, k, &hs, i)?;
        let cy = reg.solve(&ybar);
        let cj = reg.solve(&dual);
        let vy = reg.residual_variances(&cy, &ybar);
        let vj = reg.residual_variances(&cj, &dual);

        let mut gaps = Vec::new();
        let mut ok = 0usize;
        let picks = quantile_rows(&scene.state, i, &rows);
        for &p in &picks {
            let x = scene.state.state(p, i);
            let h = scene.state.obstacle(p, i);
            let fy = reg.predict(&cy, x, h);
            let fj = reg.predict(&cj, x, h);
            let tol = SE_BAND
                * reg
                    .prediction_se(x, h, &vy)
                    .hypot(reg.prediction_se(x, h, &vj));
            if fj <= fy + tol.max(STRUCTURAL_TOL) {
                ok += 1;
            }
            gaps.push(fy - fj);
        }
        let share_ok = ok as f64 / picks.len() as f64;
        let passed = if i == m {
            gaps.iter().all(|g| g.abs() <= STRUCTURAL_TOL)
        } else {
            share_ok >= INTERIOR_PASS_SHARE
        };
        let point = InteriorPoint {
            t_index: i,
            time: grid.time(i),
            survivors: rows.len(),
            grid_points: picks.len(),
            max_abs_gap: gaps.iter().fold(0.0, |a, g| a.max(g.abs())),
            mean_gap: gaps.iter().sum::<f64>() / gaps.len() as f64,
            share_ok,
            passed,
        };
        checks.push(if i == m {
            Check::close(
                name,
                &format!("terminal_equality[t{i}]"),
                point.max_abs_gap,
                0.0,
                STRUCTURAL_TOL,
            )
        } else {
            Check::at_least(
                name,
                &format!("interior_dominance[t{i}]"),
                share_ok,
                INTERIOR_PASS_SHARE,
                0.0,
            )
        });
        points.push(point);
    }
    Ok(InteriorReport {
        schema_version: SCHEMA_VERSION,
        metadata: RunMetadata::new(cfg, &scene.basis),
        level,
        epsilon: eps,
        policy: crate::intensity::IntensityPolicy::name(&policy),
        note: "fitted conditional values on the regression basis among paths alive at t".into(),
        points,
        passed: all_passed(&checks),
        checks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub schema_version: u32,
    pub metadata: Vec<RunMetadata>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

fn reflected_invariants(name: &str, sol: &ReflectedSolution, scene: &Scene, out: &mut Vec<Check>) {
    let state = &scene.state;
    let m = state.grid().steps();
    let np = state.paths();
    let sk = sol
        .skorokhod_sums(state)
        .iter()
        .fold(0.0_f64, |a, v| a.max(v.abs()));
    out.push(Check::close(name, "skorokhod_sum", sk, 0.0, STRUCTURAL_TOL));
    let min_push = (0..m)
        .flat_map(|i| (0..np).map(move |p| (p, i)))
        .map(|(p, i)| sol.push(p, i))
        .fold(f64::INFINITY, f64::min);
    out.push(Check::at_least(
        name,
        "push_nonnegative",
        min_push,
        0.0,
        0.0,
    ));
    let viol = (0..np)
        .map(|p| sol.max_violation(state, p))
        .fold(0.0, f64::max);
    out.push(Check::close(name, "obstacle_dominated", viol, 0.0, 0.0));
    let worst = sol
        .martingale_residuals(state, &scene.paths)
        .iter()
        .map(|e| e.mean.abs() - SE_BAND * e.se)
        .fold(f64::NEG_INFINITY, f64::max);
    out.push(Check::at_most(
        name,
        "martingale_residual_means",
        worst,
        0.0,
        STRUCTURAL_TOL,
    ));
}

fn instance_checks(cfg: &RunConfig, out: &mut Vec<Check>) -> Result<RunMetadata> {
    let name = cfg.problem.as_str();
    let scene = Scene::build(cfg)?;
    let horizon = scene.horizon();
    let m = scene.state.grid().steps();
    let deterministic = catalog::is_deterministic(name);

    let snell = solve_snell(&scene.state, &scene.paths, &scene.basis)?;
    reflected_invariants(name, &snell, &scene, out);
    let oracle = binomial_snell_oracle(&scene.spec, horizon, cfg.oracle.tree_steps)?;
    out.push(Check::close(
        name,
        "oracle_vs_snell",
        snell.y0.mean,
        oracle,
        oracle_tolerance(name, oracle),
    ));
    let rerun = Scene::build(cfg).and_then(|s| solve_snell(&s.state, &s.paths, &s.basis))?;
    out.push(Check::flag(
        name,
        "rerun_bitwise_identical",
        rerun.y0.mean.to_bits() == snell.y0.mean.to_bits(),
    ));
    drop(rerun);

    let lifted = lift_solution(&snell, &scene.jumps, &scene.state)?;
    out.push(Check::close(
        name,
        "lift_identity",
        lifted.y0.mean,
        snell.y0.mean,
        STRUCTURAL_TOL,
    ));
    out.push(Check::close(
        name,
        "lifted_sign_violation",
        check_sign_constraint(&lifted).max,
        0.0,
        0.0,
    ));
    let frozen = (0..scene.state.paths()).all(|p| match scene.jumps.jump_index(p) {
        Some(j) => (j..=m).all(|i| lifted.kbar(p, i) == lifted.kbar(p, j)),
        None => true,
    });
    out.push(Check::flag(name, "kbar_frozen_after_jump", frozen));
    for t in [0, m / 2] {
        let rep = residual_check(&lifted, &scene.state, &scene.paths, t)?;
        for e in &rep.events {
            if e.event == JumpEvent::Jumped {
                out.push(Check::close(
                    name,
                    &format!("residual_jumped[t{t}]"),
                    e.max_abs,
                    0.0,
                    0.0,
                ));
            } else if deterministic {
                out.push(Check::close(
                    name,
                    &format!("residual_{:?}[t{t}]", e.event).to_lowercase(),
                    e.max_abs,
                    0.0,
                    STRUCTURAL_TOL,
                ));
            }
        }
    }
    drop(lifted);

    let levels = cfg.sorted_levels();
    let mut runs = Vec::with_capacity(levels.len() + 1);
    let mut sign_integrals = Vec::with_capacity(levels.len());
    let mut top = None;
    for &n in &levels {
        let pen = solve_penalized(&scene.state, &scene.paths, &scene.basis, n)?;
        runs.push(PenaltyRunSummary::from_solution(&pen, &scene.state));
        let rnd =
            solve_penalized_randomized(&scene.state, &scene.paths, &scene.jumps, &scene.basis, n)?;
        sign_integrals.push(check_sign_constraint(&rnd).integral);
        top = Some((pen.y0, rnd.y0));
    }
    runs.push(PenaltyRunSummary::from_solution(&snell, &scene.state));
    let diag = penalization_diagnostics(&runs);
    out.push(Check::flag(
        name,
        "penalized_y0_nondecreasing",
        diag.y0_nondecreasing,
    ));
    out.push(Check::flag(
        name,
        "penalized_violation_nonincreasing",
        diag.violation_nonincreasing,
    ));
    out.push(Check::flag(
        name,
        "randomized_sign_integral_nonincreasing",
        sign_integrals.windows(2).all(|w| w[1] <= w[0]),
    ));
    if let Some((pen, rnd)) = top {
        out.push(Check::close(
            name,
            "randomized_vs_reflected_penalized",
            rnd.mean,
            pen.mean,
            (MONOTONE_SE_BAND * pen.se).max(STRUCTURAL_TOL),
        ));
    }

    for c in [0.5, 1.0, 2.0] {
        let policy = ConstantIntensity::new(c)?;
        let d = girsanov_diagnostics(&policy, &scene.jumps, &scene.state)?;
        let band = |e: &Estimate| (SE_BAND * e.se).max(STRUCTURAL_TOL);
        out.push(Check::close(
            name,
            &format!("unit_mean_weight[{c}]"),
            d.weight.mean,
            1.0,
            band(&d.weight),
        ));
        out.push(Check::close(
            name,
            &format!("tilted_survival[{c}]"),
            d.survival.mean,
            (-c * horizon).exp(),
            band(&d.survival),
        ));
        out.push(Check::close(
            name,
            &format!("compensator_identity[{c}]"),
            d.compensator_gap.mean,
            0.0,
            band(&d.compensator_gap),
        ));
    }
    let unit = girsanov_density(&ConstantIntensity::new(1.0)?, &scene.jumps, &scene.state)?;
    let unit_dev = (0..scene.state.paths())
        .flat_map(|p| (0..=m).map(move |i| (p, i)))
        .map(|(p, i)| (unit.at(p, i) - 1.0).abs())
        .fold(0.0, f64::max);
    out.push(Check::close(
        name,
        "unit_intensity_density",
        unit_dev,
        0.0,
        0.0,
    ));
    drop(unit);

    let dual = dual_value_sweep(
        &scene.state,
        &scene.paths,
        &scene.jumps,
        &scene.basis,
        &[*levels.last().expect("at least one level")],
        &cfg.penalty.epsilons,
        &cfg.penalty.constants,
    )?;
    for cell in dual.levels.iter().flat_map(|l| &l.cells) {
        let e = cell.estimate.estimate();
        if let (Some(gap), Some(eps)) = (cell.max_gap, cell.epsilon) {
            out.push(Check::at_most(
                name,
                &format!("pointwise_gap[{}]", cell.estimate.policy),
                gap,
                eps,
                0.0,
            ));
        } else {
            out.push(Check::at_most(
                name,
                &format!("weak_duality[{}]", cell.estimate.policy),
                e.mean,
                snell.y0.mean,
                (SE_BAND * e.combined_se(&snell.y0)).max(STRUCTURAL_TOL),
            ));
        }
        if name == "constant-obstacle" {
            out.push(Check::close(
                name,
                &format!("unit_payoff[{}]", cell.estimate.policy),
                e.mean,
                1.0,
                (SE_BAND * e.se).max(STRUCTURAL_TOL),
            ));
        }
        if let (true, Some(c)) = (name == "running-one", cell.constant) {
            out.push(Check::close(
                name,
                &format!("analytic_dual[{}]", cell.estimate.policy),
                e.mean,
                (1.0 - (-c * horizon).exp()) / c,
                (SE_BAND * e.se).max(STRUCTURAL_TOL),
            ));
        }
    }
    Ok(RunMetadata::new(cfg, &scene.basis))
}

/// Every module invariant on every catalog instance.
pub fn run_invariant_suite(cfg: &RunConfig) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    let mut metadata = Vec::new();
    for name in catalog::NAMES {
        metadata.push(instance_checks(&cfg.for_problem(name), &mut checks)?);
    }
    Ok(SuiteReport {
        schema_version: SCHEMA_VERSION,
        metadata,
        passed: all_passed(&checks),
        checks,
    })
}

/// CSV of check lines: `instance,check,measured,target,tolerance,passed`.
pub fn write_checks_csv<W: Write>(checks: &[Check], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "instance",
        "check",
        "measured",
        "target",
        "tolerance",
        "passed",
    ])?;
    for c in checks {
        out.write_record([
            c.instance.clone(),
            c.name.clone(),
            c.measured.to_string(),
            c.target.to_string(),
            c.tolerance.to_string(),
            c.passed.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `report.json` (pretty, trailing newline) into `dir`.
pub fn write_json<T: Serialize>(dir: &Path, report: &T) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(dir.join("report.json"), text)?;
    Ok(())
}

/// `report.json` plus the check table as `report.csv`.
pub fn write_report<T: Serialize>(dir: &Path, report: &T, checks: &[Check]) -> Result<()> {
    write_json(dir, report)?;
    let file = std::fs::File::create(dir.join("report.csv"))?;
    write_checks_csv(checks, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(name: &str) -> RunConfig {
        let mut cfg = RunConfig::default().for_problem(name);
        cfg.grid.steps = 10;
        cfg.monte_carlo.paths = 2000;
        cfg.penalty.levels = vec![1.0, 4.0];
        cfg.oracle.tree_steps = 200;
        cfg
    }

    #[test]
    fn check_constructors() {
        assert!(Check::close("x", "a", 1.0, 1.05, 0.1).passed);
        assert!(!Check::close("x", "a", 1.0, 1.2, 0.1).passed);
        assert!(Check::at_most("x", "a", 1.05, 1.0, 0.1).passed);
        assert!(!Check::at_least("x", "a", 0.8, 1.0, 0.1).passed);
        assert!(!Check::flag("x", "a", false).passed);
    }

    #[test]
    fn constant_obstacle_corollary_is_all_ones() {
        let rep = corollary_check(&small("constant-obstacle")).unwrap();
        assert_eq!(rep.oracle, 1.0);
        assert!((rep.snell_y0.mean - 1.0).abs() < 1e-12);
        assert!((rep.lifted_ybar0.mean - 1.0).abs() < 1e-12);
        for row in &rep.ladder {
            assert!((row.y0.mean - 1.0).abs() < 1e-12 && (row.ybar0.mean - 1.0).abs() < 1e-12);
        }
        assert!(rep.passed, "{:#?}", rep.checks);
    }

    #[test]
    fn running_one_corollary_is_family_limited() {
        let rep = corollary_check(&small("running-one")).unwrap();
        assert!((rep.oracle - 1.0).abs() < 1e-10);
        assert!((rep.snell_y0.mean - 1.0).abs() < 1e-8);
        let best = rep.best_dual.as_ref().unwrap();
        assert!(best.mean < 1.0);
        assert!(rep.passed, "{:#?}", rep.checks);
    }

    #[test]
    fn interior_check_terminal_equality() {
        let rep = theorem2_interior_check(&small("constant-obstacle"), &[5, 10]).unwrap();
        assert_eq!(rep.points.len(), 2);
        assert!(rep.passed, "{:#?}", rep.points);
        assert!(theorem2_interior_check(&small("zero"), &[11]).is_err());
    }

    #[test]
    fn reports_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let checks = vec![Check::flag("zero", "ok", true)];
        write_report(dir.path(), &checks, &checks).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(dir.path().join("report.json").exists());
    }
}
