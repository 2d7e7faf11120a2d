//! Dual side: jump intensities `ν` for `η`, their Girsanov densities and
//! reweighted payoff estimates.
//!
//! Under the base measure `η ~ Exp(1)`. Tilting by
//! `L^ν_t = exp(∫_0^{t∧η} (1 - ν) ds) (1{t<η} + ν_η 1{t>=η})`
//! turns the jump intensity into `ν`, so one path set evaluates every
//! policy. The integral is `Σ (1 - ν_i) ΔA_i` with `ν_i` read at the left
//! node, and `ν_η` is the value at the left node of the interval holding
//! the jump.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{JumpRandomization, PathBundle};
use crate::problem::StatePaths;
use crate::randomized::{check_sign_constraint, solve_penalized_randomized, RandomizedSolution};
use crate::regression::RegressionBasis;
use crate::stats::Estimate;

/// Weights above this multiple of their mean flag the estimate as degenerate.
pub const WEIGHT_DEGENERACY: f64 = 1e3;

/// A bounded positive intensity, decided at grid nodes.
pub trait IntensityPolicy: Sync {
    fn name(&self) -> String;

    /// Declared bound `n`; values must lie in `(0, n]`.
    fn bound(&self) -> f64;

    /// `ν` on `(t_i, t_{i+1}]` for path `p`, from information at node `i`.
    fn intensity(&self, p: usize, i: usize, t: f64, x: &[f64]) -> f64;

    fn epsilon(&self) -> Option<f64> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantIntensity {
    pub value: f64,
}

impl ConstantIntensity {
    pub fn new(value: f64) -> Result<Self> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::Config(format!(
                "constant intensity must be positive, got {value}"
            )));
        }
        Ok(Self { value })
    }
}

impl IntensityPolicy for ConstantIntensity {
    fn name(&self) -> String {
        format!("const({})", self.value)
    }

    fn bound(&self) -> f64 {
        self.value
    }

    fn intensity(&self, _: usize, _: usize, _: f64, _: &[f64]) -> f64 {
        self.value
    }
}

/// `n` if `u > 0`, `ε` if `-1 <= u <= 0`, `ε / |u|` if `u < -1`.
///
/// In the last branch the value is rounded down so that `-u ν <= ε` holds in
/// floating point, keeping the gap `n u^+ - u ν` at most `ε` exactly.
pub fn epsilon_optimal_intensity(u: f64, level: f64, eps: f64) -> f64 {
    if u > 0.0 {
        level
    } else if u >= -1.0 {
        eps
    } else {
        let mut v = eps / -u;
        while -u * v > eps {
            v = v.next_down();
        }
        v
    }
}

/// `n u^+ - u ν`.
pub fn duality_gap(u: f64, level: f64, nu: f64) -> f64 {
    level * u.max(0.0) - u * nu
}

/// `ν^ε` tabulated on the `(path, node)` grid of a randomized solution.
#[derive(Clone, Debug)]
pub struct EpsilonOptimalPolicy {
    level: f64,
    eps: f64,
    paths: usize,
    /// `[i][p]`
    table: Vec<f64>,
    max_gap: f64,
}

pub fn epsilon_optimal_policy(
    sol: &RandomizedSolution,
    level: f64,
    eps: f64,
) -> Result<EpsilonOptimalPolicy> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Config(format!(
            "epsilon must lie in (0, 1], got {eps}"
        )));
    }
    if !(level.is_finite() && level > 0.0) {
        return Err(Error::Config(format!(
            "intensity bound must be positive, got {level}"
        )));
    }
    let np = sol.paths();
    let m = sol.grid().steps();
    let mut table = Vec::with_capacity((m + 1) * np);
    let mut max_gap = f64::NEG_INFINITY;
    for i in 0..=m {
        for &u in sol.ubar_at(i) {
            let nu = epsilon_optimal_intensity(u, level, eps);
            max_gap = max_gap.max(duality_gap(u, level, nu));
            table.push(nu);
        }
    }
    Ok(EpsilonOptimalPolicy {
        level,
        eps,
        paths: np,
        table,
        max_gap,
    })
}

impl EpsilonOptimalPolicy {
    /// Largest `n Ū^+ - Ū ν^ε` over the table.
    pub fn max_gap(&self) -> f64 {
        self.max_gap
    }
}

impl IntensityPolicy for EpsilonOptimalPolicy {
    fn name(&self) -> String {
        format!("eps-optimal(n={},eps={})", self.level, self.eps)
    }

    fn bound(&self) -> f64 {
        self.level
    }

    fn intensity(&self, p: usize, i: usize, _: f64, _: &[f64]) -> f64 {
        self.table[i * self.paths + p]
    }

    fn epsilon(&self) -> Option<f64> {
        Some(self.eps)
    }
}

/// `L^ν` on the grid, path-major.
#[derive(Clone, Debug)]
pub struct GirsanovDensity {
    steps: usize,
    /// `[p][i]`
    values: Vec<f64>,
    /// `∫_0^{T∧η} ν dA` per path.
    compensator: Vec<f64>,
}

impl GirsanovDensity {
    pub fn at(&self, p: usize, i: usize) -> f64 {
        self.values[p * (self.steps + 1) + i]
    }

    pub fn terminal(&self, p: usize) -> f64 {
        self.at(p, self.steps)
    }

    pub fn compensator(&self, p: usize) -> f64 {
        self.compensator[p]
    }

    pub fn paths(&self) -> usize {
        self.compensator.len()
    }
}

fn checked_intensity(
    policy: &dyn IntensityPolicy,
    state: &StatePaths,
    p: usize,
    i: usize,
) -> Result<f64> {
    let nu = policy.intensity(p, i, state.grid().time(i), state.state(p, i));
    let bound = policy.bound();
    if nu > 0.0 && nu <= bound {
        Ok(nu)
    } else {
        Err(Error::PolicyViolation {
            policy: policy.name(),
            value: nu,
            bound,
            path: p,
            node: i,
        })
    }
}

pub fn girsanov_density(
    policy: &dyn IntensityPolicy,
    jumps: &JumpRandomization,
    state: &StatePaths,
) -> Result<GirsanovDensity> {
    if jumps.grid() != state.grid() || jumps.paths() != state.paths() {
        return Err(Error::GridMismatch(
            "jump times and state paths differ".into(),
        ));
    }
    let m = state.grid().steps();
    let per_path: Vec<(Vec<f64>, f64)> = (0..state.paths())
        .into_par_iter()
        .map(|p| {
            let mut out = Vec::with_capacity(m + 1);
            let mut log = 0.0_f64;
            let mut comp = 0.0;
            let mut at_jump = None;
            for i in 0..=m {
                if jumps.alive(p, i) {
                    out.push(log.exp());
                } else {
                    let nu = *at_jump.get_or_insert(match jumps.jump_left_node(p) {
                        Some(j) => checked_intensity(policy, state, p, j)?,
                        None => 1.0,
                    });
                    out.push(log.exp() * nu);
                }
                if i < m {
                    let da = jumps.compensator_increment(p, i);
                    if da > 0.0 {
                        let nu = checked_intensity(policy, state, p, i)?;
                        log += (1.0 - nu) * da;
                        comp += nu * da;
                    }
                }
            }
            Ok((out, comp))
        })
        .collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(per_path.len() * (m + 1));
    let mut compensator = Vec::with_capacity(per_path.len());
    for (v, c) in per_path {
        values.extend(v);
        compensator.push(c);
    }
    Ok(GirsanovDensity {
        steps: m,
        values,
        compensator,
    })
}

/// Reweighted mean of a per-path quantity with weight diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedEstimate {
    pub policy: String,
    pub mean: f64,
    pub se: f64,
    pub paths: usize,
    pub mean_weight: f64,
    pub weight_se: f64,
    pub max_weight: f64,
    /// Max weight above [`WEIGHT_DEGENERACY`] times the mean weight.
    pub degenerate: bool,
}

impl WeightedEstimate {
    pub fn estimate(&self) -> Estimate {
        Estimate {
            mean: self.mean,
            se: self.se,
            count: self.paths,
        }
    }

    fn from_weights(
        policy: String,
        density: &GirsanovDensity,
        value: impl Fn(usize) -> f64 + Sync,
    ) -> Self {
        let np = density.paths();
        let est = Estimate::from_fn(np, |p| density.terminal(p) * value(p));
        let w = Estimate::from_fn(np, |p| density.terminal(p));
        let max_weight = (0..np).map(|p| density.terminal(p)).fold(0.0, f64::max);
        Self {
            policy,
            mean: est.mean,
            se: est.se,
            paths: np,
            mean_weight: w.mean,
            weight_se: w.se,
            max_weight,
            degenerate: max_weight > WEIGHT_DEGENERACY * w.mean,
        }
    }
}

/// `∫_0^{T∧η} f dA + h_η 1{η<T} + ξ 1{η>=T}` per path, with the exact `ΔA`
/// and `h` at the interpolated state at `η`.
pub fn randomized_payoff(state: &StatePaths, jumps: &JumpRandomization, from: usize) -> Vec<f64> {
    let m = state.grid().steps();
    let horizon = state.grid().horizon();
    (0..state.paths())
        .into_par_iter()
        .map(|p| {
            let running: f64 = (from..m)
                .map(|i| state.running(p, i) * jumps.compensator_increment(p, i))
                .sum();
            let eta = jumps.eta(p);
            running
                + if eta < horizon {
                    state.obstacle_between(p, eta)
                } else {
                    state.terminal(p)
                }
        })
        .collect()
}

/// Estimate of `Ē[L^ν_T · payoff]`.
pub fn evaluate_policy(
    policy: &dyn IntensityPolicy,
    state: &StatePaths,
    jumps: &JumpRandomization,
) -> Result<WeightedEstimate> {
    let density = girsanov_density(policy, jumps, state)?;
    let payoff = randomized_payoff(state, jumps, 0);
    Ok(WeightedEstimate::from_weights(
        policy.name(),
        &density,
        |p| payoff[p],
    ))
}

/// Reweighted checks of the tilted law of `η`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GirsanovDiagnostics {
    pub policy: String,
    /// `L_T`
    pub weight: Estimate,
    /// `L_T 1{η>=T}`
    pub survival: Estimate,
    /// `L_T N_T`
    pub jumps: Estimate,
    /// `L_T ∫ν dA`
    pub compensator: Estimate,
    /// `L_T (N_T - ∫ν dA)`
    pub compensator_gap: Estimate,
}

pub fn girsanov_diagnostics(
    policy: &dyn IntensityPolicy,
    jumps: &JumpRandomization,
    state: &StatePaths,
) -> Result<GirsanovDiagnostics> {
    let d = girsanov_density(policy, jumps, state)?;
    let np = d.paths();
    let horizon = state.grid().horizon();
    let n_t = |p: usize| if jumps.eta(p) <= horizon { 1.0 } else { 0.0 };
    Ok(GirsanovDiagnostics {
        policy: policy.name(),
        weight: Estimate::from_fn(np, |p| d.terminal(p)),
        survival: Estimate::from_fn(np, |p| d.terminal(p) * (1.0 - n_t(p))),
        jumps: Estimate::from_fn(np, |p| d.terminal(p) * n_t(p)),
        compensator: Estimate::from_fn(np, |p| d.terminal(p) * d.compensator(p)),
        compensator_gap: Estimate::from_fn(np, |p| d.terminal(p) * (n_t(p) - d.compensator(p))),
    })
}

/// One policy evaluated at one penalization level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualCell {
    pub level: f64,
    pub epsilon: Option<f64>,
    /// Value of a constant policy.
    pub constant: Option<f64>,
    pub estimate: WeightedEstimate,
    /// `n Ū^+ - Ū ν` maximum, for `ν^ε` only.
    pub max_gap: Option<f64>,
    /// Estimate `<= Ȳ_0^n + 3 SE`.
    pub upper_ok: bool,
    /// `ν^ε` only: estimate `>= Ȳ_0^n - ε T - 3 SE`.
    pub lower_ok: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualLevel {
    pub level: f64,
    pub ybar0: Estimate,
    pub sign_violation_integral: f64,
    pub cells: Vec<DualCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualSweep {
    pub schema_version: u32,
    pub problem: String,
    pub horizon: f64,
    pub levels: Vec<DualLevel>,
    pub all_ok: bool,
}

/// For each level `n`: the direct penalized randomized solve, `ν^ε` for
/// every `ε`, and the constant policies of `constants` not above `n`.
#[allow(clippy::too_many_arguments)]
pub fn dual_value_sweep(
    state: &StatePaths,
    paths: &PathBundle,
    jumps: &JumpRandomization,
    basis: &RegressionBasis,
    levels: &[f64],
    epsilons: &[f64],
    constants: &[f64],
) -> Result<DualSweep> {
    let horizon = state.grid().horizon();
    let mut out = Vec::with_capacity(levels.len());
    for &level in levels {
        let sol = solve_penalized_randomized(state, paths, jumps, basis, level)?;
        let ybar0 = sol.y0;
        let band = |e: &WeightedEstimate| 3.0 * e.estimate().combined_se(&ybar0);
        let mut cells = Vec::new();
        for &eps in epsilons {
            let policy = epsilon_optimal_policy(&sol, level, eps)?;
            let estimate = evaluate_policy(&policy, state, jumps)?;
            let tol = band(&estimate);
            cells.push(DualCell {
                level,
                epsilon: Some(eps),
                constant: None,
                upper_ok: estimate.mean <= ybar0.mean + tol,
                lower_ok: Some(estimate.mean >= ybar0.mean - eps * horizon - tol),
                max_gap: Some(policy.max_gap()),
                estimate,
            });
        }
        let mut grid: Vec<f64> = constants.iter().copied().filter(|&c| c <= level).collect();
        if !grid.contains(&level) {
            grid.push(level);
        }
        for c in grid {
            let estimate = evaluate_policy(&ConstantIntensity::new(c)?, state, jumps)?;
            let tol = band(&estimate);
            cells.push(DualCell {
                level,
                epsilon: None,
                constant: Some(c),
                upper_ok: estimate.mean <= ybar0.mean + tol,
                lower_ok: None,
                max_gap: None,
                estimate,
            });
        }
        out.push(DualLevel {
            level,
            ybar0,
            sign_violation_integral: check_sign_constraint(&sol).integral,
            cells,
        });
    }
    let all_ok = out.iter().flat_map(|l| &l.cells).all(|c| {
        c.upper_ok
            && c.lower_ok.unwrap_or(true)
            && c.max_gap.is_none_or(|g| g <= c.epsilon.unwrap_or(0.0))
    });
    Ok(DualSweep {
        schema_version: crate::SCHEMA_VERSION,
        problem: state.spec().name.clone(),
        horizon,
        levels: out,
        all_ok,
    })
}

impl DualSweep {
    /// One row per level and policy, with the level's `Ȳ_0^n` repeated.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "n",
            "ybar0",
            "ybar0_se",
            "policy",
            "epsilon",
            "constant",
            "mean",
            "se",
            "max_weight",
            "max_gap",
            "upper_ok",
            "lower_ok",
        ])?;
        for level in &self.levels {
            for c in &level.cells {
                out.write_record([
                    level.level.to_string(),
                    level.ybar0.mean.to_string(),
                    level.ybar0.se.to_string(),
                    c.estimate.policy.clone(),
                    opt(c.epsilon),
                    opt(c.constant),
                    c.estimate.mean.to_string(),
                    c.estimate.se.to_string(),
                    c.estimate.max_weight.to_string(),
                    opt(c.max_gap),
                    c.upper_ok.to_string(),
                    c.lower_ok.map_or(String::new(), |b| b.to_string()),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Largest `ν^ε` estimate at `level` for `eps`.
    pub fn epsilon_cell(&self, level: f64, eps: f64) -> Option<&DualCell> {
        self.levels
            .iter()
            .find(|l| l.level == level)?
            .cells
            .iter()
            .find(|c| c.epsilon == Some(eps))
    }
}
