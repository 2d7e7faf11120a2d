//! Backward regression solvers for the reflected BSDE and its penalized
//! approximations.
//!
//! At each step `Y_{i+1}` is regressed jointly on `φ(X_i)` and
//! `φ(X_i) ΔW_i`: the first block gives the continuation value
//! `E[Y_{i+1} | X_i]`, the second the martingale integrand `Z_i`. Then
//!
//! * reflected: `Y_i = max(h_i, c_i)`,
//! * penalized: `Y_i = c_i + n Δt (Y_i - h_i)^-`, solved in closed form,
//!
//! with `c_i = E[Y_{i+1} | X_i] + f_i Δt` and `ΔK_i = Y_i - c_i`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{PathBundle, TimeGrid};
use crate::problem::StatePaths;
use crate::regression::{FeatureMap, LeastSquares, Partition, RegressionBasis, RegressionWarning};
use crate::stats::Estimate;
use crate::SCHEMA_VERSION;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheme {
    Reflected,
    Penalized { level: f64 },
}

impl Scheme {
    pub fn label(&self) -> String {
        match self {
            Scheme::Reflected => "reflected".into(),
            Scheme::Penalized { level } => format!("penalized(n={level})"),
        }
    }
}

/// Grid-sampled `(Y, Z, K)`, stored time-major.
#[derive(Clone, Debug)]
pub struct ReflectedSolution {
    grid: TimeGrid,
    paths: usize,
    dim: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    k: Vec<f64>,
    pub scheme: Scheme,
    pub basis: RegressionBasis,
    pub warnings: Vec<RegressionWarning>,
    pub y0: Estimate,
}

/// Output of one backward pass.
pub(crate) struct Sweep {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    /// `ΔK_i = Y_i - c_i`, `[i][p]` for `i < M`.
    pub push: Vec<f64>,
    pub warnings: Vec<RegressionWarning>,
    pub y0: Estimate,
}

/// Backward regression pass shared by every solver.
///
/// `step_dt` multiplies the running cost in the continuation value; `update`
/// maps `(c, h)` to the node value.
pub(crate) fn backward_sweep<U>(
    state: &StatePaths,
    paths: &PathBundle,
    basis: &RegressionBasis,
    step_dt: f64,
    update: U,
) -> Result<Sweep>
where
    U: Fn(f64, f64) -> f64,
{
    check_alignment(state, paths)?;
    let grid = state.grid();
    let (np, m, k, bm) = (state.paths(), grid.steps(), state.state_dim(), paths.dim());

    let mut y = vec![0.0; (m + 1) * np];
    let mut z = vec![0.0; m * np * bm];
    let mut push = vec![0.0; m * np];
    let mut warnings = Vec::new();
    y[m * np..].copy_from_slice(state.terminals());

    let mut y0 = Estimate::exact(0.0);
    let mut cont = vec![0.0; np];
    for i in (0..m).rev() {
        let states = state.states_at(i);
        let obstacle = state.obstacle_at(i);
        let (head, tail) = y.split_at_mut((i + 1) * np);
        let target = &tail[..np];
        let partition = Partition::new(states, k, basis.cells);
        for cell in 0..partition.cells() {
            let rows = partition.members(cell);
            let zs = &mut z[i * np * bm..(i + 1) * np * bm];
            if let Some(w) = fit_cell(
                basis, states, obstacle, paths, target, rows, i, &mut cont, zs,
            )? {
                warnings.push(w);
            }
        }

        let cur = &mut head[i * np..];
        let running = state.running_at(i);
        for p in 0..np {
            let c = cont[p] + running[p] * step_dt;
            let v = update(c, obstacle[p]);
            cur[p] = v;
            push[i * np + p] = v - c;
        }
        if i == 0 {
            y0 = Estimate {
                mean: crate::stats::ordered_sum(&cur[..np]) / np as f64,
                se: Estimate::from_fn(np, |p| target[p] + running[p] * step_dt).se,
                count: np,
            };
        }
    }
    Ok(Sweep {
        y,
        z,
        push,
        warnings,
        y0,
    })
}

/// Joint regression of `target` on `[φ, ΔW_d, ΔW_d φ]` over the rows of one
/// cell. Writes the continuation value into `cont` and `Z` into `z` (`[p][d]`).
#[allow(clippy::too_many_arguments)]
fn fit_cell(
    basis: &RegressionBasis,
    states: &[f64],
    obstacle: &[f64],
    paths: &PathBundle,
    target: &[f64],
    rows: &[usize],
    step: usize,
    cont: &mut [f64],
    z: &mut [f64],
) -> Result<Option<RegressionWarning>> {
    let k = states.len() / obstacle.len();
    let bm = paths.dim();
    let sub_states: Vec<f64> = rows
        .iter()
        .flat_map(|&p| &states[p * k..(p + 1) * k])
        .copied()
        .collect();
    let sub_obstacle: Vec<f64> = rows.iter().map(|&p| obstacle[p]).collect();
    let features = FeatureMap::fit(basis, &sub_states, k, &sub_obstacle);
    let nb = features.len();
    let phi = features.matrix(&sub_states, k, &sub_obstacle);
    let cols = nb + bm * (1 + nb);
    let mut joint = Vec::with_capacity(rows.len() * cols);
    for (r, &p) in rows.iter().enumerate() {
        let row = &phi[r * nb..(r + 1) * nb];
        joint.extend_from_slice(row);
        for &w in paths.increment(p, step) {
            joint.push(w);
            joint.extend(row.iter().map(|v| v * w));
        }
    }
    let ls = LeastSquares::new(&joint, rows.len(), cols, step)?;
    drop(joint);
    let warning = ls.ridge().map(|lambda| RegressionWarning {
        step,
        message: format!("near-singular normal matrix, ridge {lambda:e}"),
    });
    let sub_target: Vec<f64> = rows.iter().map(|&p| target[p]).collect();
    let coef = ls.solve(&sub_target);
    if !coef.intercept.is_finite() || coef.slopes.iter().any(|b| !b.is_finite()) {
        return Err(Error::Regression {
            step,
            reason: "non-finite coefficients".into(),
        });
    }
    let dot = |b: &[f64], row: &[f64]| b.iter().zip(row).map(|(b, v)| b * v).sum::<f64>();
    for (r, &p) in rows.iter().enumerate() {
        let row = &phi[r * nb..(r + 1) * nb];
        cont[p] = coef.intercept + dot(&coef.slopes[..nb], row);
        for d in 0..bm {
            let base = nb + d * (1 + nb);
            z[p * bm + d] = coef.slopes[base] + dot(&coef.slopes[base + 1..base + 1 + nb], row);
        }
    }
    Ok(warning)
}

pub(crate) fn check_alignment(state: &StatePaths, paths: &PathBundle) -> Result<()> {
    if state.grid() != paths.grid() || state.paths() != paths.paths() {
        return Err(Error::GridMismatch(format!(
            "state ({} paths, {} steps) and Brownian bundle ({} paths, {} steps) differ",
            state.paths(),
            state.grid().steps(),
            paths.paths(),
            paths.grid().steps()
        )));
    }
    Ok(())
}

fn from_sweep(
    sweep: Sweep,
    state: &StatePaths,
    paths: &PathBundle,
    scheme: Scheme,
    basis: &RegressionBasis,
) -> ReflectedSolution {
    let np = state.paths();
    let m = state.grid().steps();
    let mut k = vec![0.0; (m + 1) * np];
    for i in 0..m {
        for p in 0..np {
            k[(i + 1) * np + p] = k[i * np + p] + sweep.push[i * np + p];
        }
    }
    ReflectedSolution {
        grid: *state.grid(),
        paths: np,
        dim: paths.dim(),
        y: sweep.y,
        z: sweep.z,
        k,
        scheme,
        basis: *basis,
        warnings: sweep.warnings,
        y0: sweep.y0,
    }
}

/// Discrete Snell envelope: reflection at the obstacle.
pub fn solve_snell(
    state: &StatePaths,
    paths: &PathBundle,
    basis: &RegressionBasis,
) -> Result<ReflectedSolution> {
    let sweep = backward_sweep(state, paths, basis, state.grid().dt(), |c, h| h.max(c))?;
    Ok(from_sweep(sweep, state, paths, Scheme::Reflected, basis))
}

/// Root of `y = c + w (y - h)^-` for `w >= 0`.
pub fn implicit_penalty_step(c: f64, h: f64, w: f64) -> f64 {
    if c >= h {
        c
    } else {
        (c + w * h) / (1.0 + w)
    }
}

/// Penalized scheme with the penalty term implicit in `Y_i`.
pub fn solve_penalized(
    state: &StatePaths,
    paths: &PathBundle,
    basis: &RegressionBasis,
    level: f64,
) -> Result<ReflectedSolution> {
    if !(level.is_finite() && level > 0.0) {
        return Err(Error::Config(format!(
            "penalization level must be positive, got {level}"
        )));
    }
    let dt = state.grid().dt();
    let w = level * dt;
    let sweep = backward_sweep(state, paths, basis, dt, |c, h| {
        implicit_penalty_step(c, h, w)
    })?;
    Ok(from_sweep(
        sweep,
        state,
        paths,
        Scheme::Penalized { level },
        basis,
    ))
}

impl ReflectedSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn brownian_dim(&self) -> usize {
        self.dim
    }

    pub fn y(&self, p: usize, i: usize) -> f64 {
        self.y[i * self.paths + p]
    }

    pub fn y_at(&self, i: usize) -> &[f64] {
        &self.y[i * self.paths..(i + 1) * self.paths]
    }

    /// `Z_i` of path `p`, defined for `i < M`.
    pub fn z(&self, p: usize, i: usize) -> &[f64] {
        let at = (i * self.paths + p) * self.dim;
        &self.z[at..at + self.dim]
    }

    pub fn k(&self, p: usize, i: usize) -> f64 {
        self.k[i * self.paths + p]
    }

    pub fn k_at(&self, i: usize) -> &[f64] {
        &self.k[i * self.paths..(i + 1) * self.paths]
    }

    /// `K_{i+1} - K_i`.
    pub fn push(&self, p: usize, i: usize) -> f64 {
        self.k(p, i + 1) - self.k(p, i)
    }

    /// Per-path `Σ_i (Y_i - h_i) ΔK_i`.
    pub fn skorokhod_sums(&self, state: &StatePaths) -> Vec<f64> {
        let m = self.grid.steps();
        (0..self.paths)
            .map(|p| {
                (0..m)
                    .map(|i| (self.y(p, i) - state.obstacle(p, i)) * self.push(p, i))
                    .sum()
            })
            .collect()
    }

    /// Mean over paths of
    /// `Y_{i+1} + f_i Δt - Y_i + ΔK_i - Z_i·ΔW_i`, one estimate per step.
    pub fn martingale_residuals(&self, state: &StatePaths, paths: &PathBundle) -> Vec<Estimate> {
        let dt = self.grid.dt();
        (0..self.grid.steps())
            .map(|i| {
                Estimate::from_fn(self.paths, |p| {
                    let zdw: f64 = self
                        .z(p, i)
                        .iter()
                        .zip(paths.increment(p, i))
                        .map(|(a, b)| a * b)
                        .sum();
                    self.y(p, i + 1) + state.running(p, i) * dt - self.y(p, i) + self.push(p, i)
                        - zdw
                })
            })
            .collect()
    }

    /// Largest `(h - Y)^+` over the nodes of path `p`.
    pub fn max_violation(&self, state: &StatePaths, p: usize) -> f64 {
        (0..=self.grid.steps())
            .map(|i| (state.obstacle(p, i) - self.y(p, i)).max(0.0))
            .fold(0.0, f64::max)
    }

    /// CSV with columns `path,time_index,Y,K,Z0..`; `Z` is empty at the last node.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec![
            "path".to_string(),
            "time_index".into(),
            "Y".into(),
            "K".into(),
        ];
        header.extend((0..self.dim).map(|d| format!("Z{d}")));
        out.write_record(&header)?;
        let m = self.grid.steps();
        for p in 0..self.paths {
            for i in 0..=m {
                let mut rec = vec![
                    p.to_string(),
                    i.to_string(),
                    self.y(p, i).to_string(),
                    self.k(p, i).to_string(),
                ];
                if i < m {
                    rec.extend(self.z(p, i).iter().map(|v| v.to_string()));
                } else {
                    rec.extend((0..self.dim).map(|_| String::new()));
                }
                out.write_record(&rec)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> SolutionSummary {
        SolutionSummary {
            schema_version: SCHEMA_VERSION,
            scheme: self.scheme.label(),
            basis: self.basis.describe(),
            paths: self.paths,
            steps: self.grid.steps(),
            y0: self.y0.mean,
            y0_se: self.y0.se,
            warnings: self.warnings.clone(),
        }
    }
}

/// JSON summary of a solver run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionSummary {
    pub schema_version: u32,
    pub scheme: String,
    pub basis: String,
    pub paths: usize,
    pub steps: usize,
    pub y0: f64,
    pub y0_se: f64,
    pub warnings: Vec<RegressionWarning>,
}

/// Per-run figures kept by [`penalization_diagnostics`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyRunSummary {
    /// `None` for the reflected scheme.
    pub level: Option<f64>,
    pub y0: Estimate,
    pub mean_max_violation: f64,
    pub max_violation: f64,
    pub mean_terminal_push: f64,
}

impl PenaltyRunSummary {
    pub fn from_solution(sol: &ReflectedSolution, state: &StatePaths) -> Self {
        let np = sol.paths;
        let viol: Vec<f64> = (0..np).map(|p| sol.max_violation(state, p)).collect();
        let m = sol.grid.steps();
        Self {
            level: match sol.scheme {
                Scheme::Reflected => None,
                Scheme::Penalized { level } => Some(level),
            },
            y0: sol.y0,
            mean_max_violation: crate::stats::ordered_sum(&viol) / np as f64,
            max_violation: viol.iter().copied().fold(0.0, f64::max),
            mean_terminal_push: crate::stats::ordered_sum(sol.k_at(m)) / np as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenalizationReport {
    /// Penalized runs by increasing level, then the reflected run if present.
    pub rows: Vec<PenaltyRunSummary>,
    pub violation_nonincreasing: bool,
    /// `Y_0^n` nondecreasing in `n` up to two combined standard errors.
    pub y0_nondecreasing: bool,
}

/// Orders runs by penalization level and checks the monotone trends.
pub fn penalization_diagnostics(runs: &[PenaltyRunSummary]) -> PenalizationReport {
    let mut rows = runs.to_vec();
    rows.sort_by(|a, b| {
        let key = |r: &PenaltyRunSummary| r.level.unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b))
    });
    let violation_nonincreasing = rows
        .windows(2)
        .all(|w| w[1].mean_max_violation <= w[0].mean_max_violation);
    let y0_nondecreasing = rows
        .windows(2)
        .all(|w| w[1].y0.mean >= w[0].y0.mean - 2.0 * w[0].y0.combined_se(&w[1].y0));
    PenalizationReport {
        rows,
        violation_nonincreasing,
        y0_nondecreasing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{catalog, simulate_forward};

    fn scene(name: &str, m: usize, p: usize) -> (StatePaths, PathBundle, RegressionBasis) {
        let spec = catalog::named(name);
        let g = TimeGrid::new(1.0, m).unwrap();
        let b = PathBundle::sample(&g, p, 1, 42).unwrap();
        let s = simulate_forward(&spec, &b).unwrap();
        let basis = RegressionBasis::for_problem(&spec, 3);
        (s, b, basis)
    }

    #[test]
    fn zero_problem_is_identically_zero() {
        let (s, b, basis) = scene("zero", 10, 50);
        for sol in [
            solve_snell(&s, &b, &basis).unwrap(),
            solve_penalized(&s, &b, &basis, 8.0).unwrap(),
        ] {
            assert!(sol.y.iter().all(|&v| v == 0.0));
            assert!(sol.z.iter().all(|&v| v == 0.0));
            assert!(sol.k.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn running_one_is_time_to_go() {
        let (s, b, basis) = scene("running-one", 20, 64);
        let sol = solve_snell(&s, &b, &basis).unwrap();
        for i in 0..=20 {
            for p in 0..64 {
                assert!((sol.y(p, i) - (1.0 - s.grid().time(i))).abs() < 1e-8);
                assert_eq!(sol.k(p, i), 0.0);
                if i < 20 {
                    assert!(sol.z(p, i)[0].abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn constant_obstacle_penalized_never_active() {
        let (s, b, basis) = scene("constant-obstacle", 10, 30);
        for n in [1.0, 64.0] {
            let sol = solve_penalized(&s, &b, &basis, n).unwrap();
            assert!(sol.y.iter().all(|&v| (v - 1.0).abs() < 1e-12));
            assert!(sol.k.iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn implicit_step_solves_its_equation() {
        for &(c, h, w) in &[
            (1.0, 2.0, 0.5),
            (3.0, 2.0, 10.0),
            (-1.0, 4.0, 100.0),
            (0.0, 0.0, 1.0),
        ] {
            let y: f64 = implicit_penalty_step(c, h, w);
            assert!((y - (c + w * (h - y).max(0.0))).abs() < 1e-12);
            assert!(y >= c.min(h) - 1e-12 && y <= c.max(h) + 1e-12);
        }
    }

    #[test]
    fn rejects_bad_level_and_mismatch() {
        let (s, b, basis) = scene("zero", 4, 10);
        assert!(solve_penalized(&s, &b, &basis, 0.0).is_err());
        let other = PathBundle::sample(&TimeGrid::new(1.0, 5).unwrap(), 10, 1, 0).unwrap();
        assert!(matches!(
            solve_snell(&s, &other, &basis),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn put_invariants_small_sample() {
        let (s, b, basis) = scene("put-drift", 20, 4000);
        let sol = solve_snell(&s, &b, &basis).unwrap();
        assert!(sol.skorokhod_sums(&s).iter().all(|&v| v == 0.0));
        for p in 0..4000 {
            assert_eq!(sol.k(p, 0), 0.0);
            for i in 0..20 {
                assert!(sol.push(p, i) >= 0.0);
            }
            for i in 0..=20 {
                assert!(sol.y(p, i) >= s.obstacle(p, i));
            }
            assert_eq!(sol.y(p, 20), s.terminal(p));
        }
        for r in sol.martingale_residuals(&s, &b) {
            assert!(r.within(0.0, 3.0, 1e-8), "{r:?}");
        }
        let pen = solve_penalized(&s, &b, &basis, 4.0).unwrap();
        assert!(pen.y0.mean <= sol.y0.mean + 2.0 * sol.y0.combined_se(&pen.y0));
        for p in 0..4000 {
            for i in 0..20 {
                assert!(pen.push(p, i) >= 0.0);
            }
        }
    }

    #[test]
    fn diagnostics_order_and_trends() {
        let mk = |level: Option<f64>, y0: f64, v: f64| PenaltyRunSummary {
            level,
            y0: Estimate {
                mean: y0,
                se: 0.01,
                count: 100,
            },
            mean_max_violation: v,
            max_violation: v,
            mean_terminal_push: 0.0,
        };
        let rep = penalization_diagnostics(&[
            mk(None, 6.0, 0.0),
            mk(Some(4.0), 5.9, 0.2),
            mk(Some(1.0), 5.5, 0.5),
        ]);
        assert_eq!(rep.rows[0].level, Some(1.0));
        assert_eq!(rep.rows[2].level, None);
        assert!(rep.violation_nonincreasing && rep.y0_nondecreasing);
        let single = penalization_diagnostics(&[mk(None, 6.0, 0.0)]);
        assert_eq!(single.rows[0].max_violation, 0.0);
        assert!(single.violation_nonincreasing);
    }

    #[test]
    fn csv_has_expected_shape() {
        let (s, b, basis) = scene("running-one", 3, 2);
        let sol = solve_snell(&s, &b, &basis).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path,time_index,Y,K,Z0");
        assert_eq!(lines.len(), 1 + 2 * 4);
        assert!(lines[4].ends_with(','));
    }
}
