//! Optimal stopping instances: forward dynamics plus running cost `f`,
//! obstacle `h` and terminal cost `ξ`, all functionals of a simulated state.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{PathBundle, TimeGrid};

pub mod oracle;

pub use oracle::binomial_snell_oracle;

/// `(t, x) -> value`.
pub type CostFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
/// `x -> value`.
pub type TerminalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// `(t, x, out)`; drift writes `k` entries, diffusion writes `k * m` row-major.
pub type VectorField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Forward state dynamics.
#[derive(Clone)]
pub enum Dynamics {
    /// `X_t = x_0`.
    Constant,
    /// Scalar `dX = μ dt + σ dW`.
    Arithmetic { drift: f64, vol: f64 },
    /// Scalar `dX = μ X dt + σ X dW`, stepped exactly in log space.
    Geometric { drift: f64, vol: f64 },
    /// General Euler–Maruyama with state-dependent coefficients.
    Euler {
        drift: VectorField,
        diffusion: VectorField,
    },
}

impl fmt::Debug for Dynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dynamics::Constant => write!(f, "Constant"),
            Dynamics::Arithmetic { drift, vol } => {
                write!(f, "Arithmetic {{ drift: {drift}, vol: {vol} }}")
            }
            Dynamics::Geometric { drift, vol } => {
                write!(f, "Geometric {{ drift: {drift}, vol: {vol} }}")
            }
            Dynamics::Euler { .. } => write!(f, "Euler {{ .. }}"),
        }
    }
}

/// A stopping problem: forward state and the three cost functionals.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub x0: Vec<f64>,
    pub brownian_dim: usize,
    pub dynamics: Dynamics,
    pub running: CostFn,
    pub obstacle: CostFn,
    pub terminal: TerminalFn,
    pub markovian: bool,
    /// Whether regressions should use `h(t, x)` as an extra feature.
    pub obstacle_feature: bool,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("x0", &self.x0)
            .field("brownian_dim", &self.brownian_dim)
            .field("dynamics", &self.dynamics)
            .field("markovian", &self.markovian)
            .field("obstacle_feature", &self.obstacle_feature)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn state_dim(&self) -> usize {
        self.x0.len()
    }

    pub fn running_cost(&self, t: f64, x: &[f64]) -> f64 {
        (self.running)(t, x)
    }

    pub fn obstacle_value(&self, t: f64, x: &[f64]) -> f64 {
        (self.obstacle)(t, x)
    }

    pub fn terminal_value(&self, x: &[f64]) -> f64 {
        (self.terminal)(x)
    }

    fn validate(&self, brownian_dim: usize) -> Result<()> {
        if self.x0.is_empty() {
            return Err(Error::Problem(format!(
                "{}: empty initial state",
                self.name
            )));
        }
        if self.brownian_dim != brownian_dim {
            return Err(Error::Problem(format!(
                "{}: diffusion expects {} Brownian dimensions, paths carry {}",
                self.name, self.brownian_dim, brownian_dim
            )));
        }
        match self.dynamics {
            Dynamics::Arithmetic { .. } | Dynamics::Geometric { .. }
                if self.x0.len() != 1 || self.brownian_dim != 1 =>
            {
                Err(Error::Problem(format!(
                    "{}: scalar dynamics need a one-dimensional state and Brownian motion",
                    self.name
                )))
            }
            Dynamics::Geometric { .. } if self.x0[0] <= 0.0 => Err(Error::Problem(format!(
                "{}: geometric dynamics need a positive initial state",
                self.name
            ))),
            _ => Ok(()),
        }
    }
}

/// Parameters of the catalog instances; overridable from configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemParams {
    pub x0: f64,
    pub strike: f64,
    pub drift: f64,
    pub vol: f64,
}

impl Default for ProblemParams {
    fn default() -> Self {
        Self {
            x0: 100.0,
            strike: 100.0,
            drift: 0.05,
            vol: 0.2,
        }
    }
}

/// Named instances addressable from the command line.
pub mod catalog {
    use super::*;

    pub const NAMES: [&str; 5] = [
        "zero",
        "running-one",
        "constant-obstacle",
        "put-drift",
        "put-martingale",
    ];

    fn constant_costs(name: &str, x0: f64, f: f64, h: f64, xi: f64) -> ProblemSpec {
        ProblemSpec {
            name: name.to_string(),
            x0: vec![x0],
            brownian_dim: 1,
            dynamics: Dynamics::Constant,
            running: Arc::new(move |_, _| f),
            obstacle: Arc::new(move |_, _| h),
            terminal: Arc::new(move |_| xi),
            markovian: true,
            obstacle_feature: false,
        }
    }

    /// Put payoff `(K - x)^+` on a geometric state, no running cost.
    pub fn put(name: &str, x0: f64, strike: f64, drift: f64, vol: f64) -> ProblemSpec {
        ProblemSpec {
            name: name.to_string(),
            x0: vec![x0],
            brownian_dim: 1,
            dynamics: Dynamics::Geometric { drift, vol },
            running: Arc::new(|_, _| 0.0),
            obstacle: Arc::new(move |_, x| (strike - x[0]).max(0.0)),
            terminal: Arc::new(move |x| (strike - x[0]).max(0.0)),
            markovian: true,
            obstacle_feature: true,
        }
    }

    pub fn build(name: &str, params: &ProblemParams) -> Result<ProblemSpec> {
        match name {
            "zero" => Ok(constant_costs(name, params.x0, 0.0, 0.0, 0.0)),
            "running-one" => Ok(constant_costs(name, params.x0, 1.0, 0.0, 0.0)),
            "constant-obstacle" => Ok(constant_costs(name, params.x0, 0.0, 1.0, 1.0)),
            "put-drift" => Ok(put(
                name,
                params.x0,
                params.strike,
                params.drift,
                params.vol,
            )),
            "put-martingale" => Ok(put(name, params.x0, params.strike, 0.0, params.vol)),
            other => Err(Error::UnknownProblem(other.to_string())),
        }
    }

    /// Instance with default parameters; panics on unknown names.
    pub fn named(name: &str) -> ProblemSpec {
        build(name, &ProblemParams::default()).expect("catalog name")
    }

    /// `true` for the instances whose costs are deterministic constants.
    pub fn is_deterministic(name: &str) -> bool {
        matches!(name, "zero" | "running-one" | "constant-obstacle")
    }
}

/// Simulated forward states and cached cost values, stored time-major.
#[derive(Clone, Debug)]
pub struct StatePaths {
    spec: ProblemSpec,
    grid: TimeGrid,
    paths: usize,
    dim: usize,
    /// `[i][p][k]`
    states: Vec<f64>,
    /// `[i][p]`
    running: Vec<f64>,
    /// `[i][p]`
    obstacle: Vec<f64>,
    terminal: Vec<f64>,
}

impl StatePaths {
    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn state_dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, p: usize, i: usize) -> &[f64] {
        let at = (i * self.paths + p) * self.dim;
        &self.states[at..at + self.dim]
    }

    /// All states at node `i`, `P × k` row-major.
    pub fn states_at(&self, i: usize) -> &[f64] {
        let n = self.paths * self.dim;
        &self.states[i * n..(i + 1) * n]
    }

    pub fn running(&self, p: usize, i: usize) -> f64 {
        self.running[i * self.paths + p]
    }

    pub fn running_at(&self, i: usize) -> &[f64] {
        &self.running[i * self.paths..(i + 1) * self.paths]
    }

    pub fn obstacle(&self, p: usize, i: usize) -> f64 {
        self.obstacle[i * self.paths + p]
    }

    pub fn obstacle_at(&self, i: usize) -> &[f64] {
        &self.obstacle[i * self.paths..(i + 1) * self.paths]
    }

    pub fn terminal(&self, p: usize) -> f64 {
        self.terminal[p]
    }

    pub fn terminals(&self) -> &[f64] {
        &self.terminal
    }

    /// State at time `t ∈ [0, T]`, linear between the bracketing nodes.
    pub fn interpolated_state(&self, p: usize, t: f64) -> Vec<f64> {
        let (lo, w) = self.bracket(t);
        if w == 0.0 {
            return self.state(p, lo).to_vec();
        }
        let a = self.state(p, lo);
        let b = self.state(p, lo + 1);
        a.iter().zip(b).map(|(a, b)| a + w * (b - a)).collect()
    }

    /// `h(t, X_t)` with the state interpolated between nodes.
    pub fn obstacle_between(&self, p: usize, t: f64) -> f64 {
        let (lo, w) = self.bracket(t);
        if w == 0.0 {
            return self.obstacle(p, lo);
        }
        let x = self.interpolated_state(p, t);
        self.spec.obstacle_value(t, &x)
    }

    /// Left node `i` and weight `w` with `t = t_i + w Δt`, `w ∈ [0, 1)`.
    pub(crate) fn bracket(&self, t: f64) -> (usize, f64) {
        bracket(&self.grid, t)
    }
}

/// Left node and interpolation weight of `t` on `grid`.
pub(crate) fn bracket(grid: &TimeGrid, t: f64) -> (usize, f64) {
    let m = grid.steps();
    if t >= grid.horizon() {
        return (m, 0.0);
    }
    let mut i = ((t / grid.dt()).floor().max(0.0) as usize).min(m - 1);
    while i > 0 && grid.time(i) > t {
        i -= 1;
    }
    while i + 1 < m && grid.time(i + 1) <= t {
        i += 1;
    }
    let w = (t - grid.time(i)) / grid.dt();
    (i, w.clamp(0.0, 1.0))
}

/// Steps the forward state along every path and caches `f`, `h`, `ξ`.
///
/// Fails if `ξ < h(T, ·)` on any path.
pub fn simulate_forward(spec: &ProblemSpec, paths: &PathBundle) -> Result<StatePaths> {
    spec.validate(paths.dim())?;
    let grid = *paths.grid();
    let (np, m, k, bm) = (paths.paths(), grid.steps(), spec.state_dim(), paths.dim());
    let dt = grid.dt();

    // Path-major scratch, transposed into time-major below.
    let per_path: Vec<Vec<f64>> = (0..np)
        .into_par_iter()
        .map(|p| {
            let mut xs = Vec::with_capacity((m + 1) * k);
            xs.extend_from_slice(&spec.x0);
            let mut drift = vec![0.0; k];
            let mut diff = vec![0.0; k * bm];
            for i in 0..m {
                let dw = paths.increment(p, i);
                let x = xs[i * k..(i + 1) * k].to_vec();
                match &spec.dynamics {
                    Dynamics::Constant => xs.extend_from_slice(&x),
                    Dynamics::Arithmetic { drift, vol } => {
                        xs.push(x[0] + drift * dt + vol * dw[0]);
                    }
                    Dynamics::Geometric { drift, vol } => {
                        xs.push(x[0] * ((drift - 0.5 * vol * vol) * dt + vol * dw[0]).exp());
                    }
                    Dynamics::Euler {
                        drift: mu,
                        diffusion: sigma,
                    } => {
                        let t = grid.time(i);
                        mu(t, &x, &mut drift);
                        sigma(t, &x, &mut diff);
                        for c in 0..k {
                            let noise: f64 = (0..bm).map(|d| diff[c * bm + d] * dw[d]).sum();
                            xs.push(x[c] + drift[c] * dt + noise);
                        }
                    }
                }
            }
            xs
        })
        .collect();

    let mut states = vec![0.0; (m + 1) * np * k];
    for (p, xs) in per_path.iter().enumerate() {
        for i in 0..=m {
            let at = (i * np + p) * k;
            states[at..at + k].copy_from_slice(&xs[i * k..(i + 1) * k]);
        }
    }
    drop(per_path);

    let mut running = vec![0.0; (m + 1) * np];
    let mut obstacle = vec![0.0; (m + 1) * np];
    running
        .par_chunks_mut(np)
        .zip(obstacle.par_chunks_mut(np))
        .enumerate()
        .for_each(|(i, (fs, hs))| {
            let t = grid.time(i);
            for p in 0..np {
                let x = &states[(i * np + p) * k..(i * np + p + 1) * k];
                fs[p] = spec.running_cost(t, x);
                hs[p] = spec.obstacle_value(t, x);
            }
        });
    let terminal: Vec<f64> = (0..np)
        .into_par_iter()
        .map(|p| spec.terminal_value(&states[(m * np + p) * k..(m * np + p + 1) * k]))
        .collect();

    for p in 0..np {
        let h_t = obstacle[m * np + p];
        if terminal[p] < h_t {
            return Err(Error::TerminalBelowObstacle {
                path: p,
                terminal: terminal[p],
                obstacle: h_t,
            });
        }
    }

    Ok(StatePaths {
        spec: spec.clone(),
        grid,
        paths: np,
        dim: k,
        states,
        running,
        obstacle,
        terminal,
    })
}

/// Per-path stopping node `τ[p] ∈ {0, …, M}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoppingRule {
    pub index: Vec<usize>,
}

impl StoppingRule {
    /// Never stop before the horizon.
    pub fn at_horizon(state: &StatePaths) -> Self {
        Self {
            index: vec![state.grid.steps(); state.paths],
        }
    }

    /// Stop at the first node where `region(t, x, h)` holds, scanning forward.
    pub fn first_entry<F>(state: &StatePaths, region: F) -> Self
    where
        F: Fn(f64, &[f64], f64) -> bool + Sync,
    {
        let m = state.grid.steps();
        let index = (0..state.paths)
            .into_par_iter()
            .map(|p| {
                (0..m)
                    .find(|&i| region(state.grid.time(i), state.state(p, i), state.obstacle(p, i)))
                    .unwrap_or(m)
            })
            .collect();
        Self { index }
    }
}

/// `Σ_{i<τ} f_i Δt + h_τ 1{τ<M} + ξ 1{τ=M}` per path.
pub fn stopping_payoff(state: &StatePaths, rule: &StoppingRule) -> Result<Vec<f64>> {
    let m = state.grid.steps();
    if rule.index.len() != state.paths {
        return Err(Error::GridMismatch(format!(
            "stopping rule covers {} paths, state has {}",
            rule.index.len(),
            state.paths
        )));
    }
    if let Some(&bad) = rule.index.iter().find(|&&t| t > m) {
        return Err(Error::GridMismatch(format!(
            "stopping index {bad} beyond {m} steps"
        )));
    }
    let dt = state.grid.dt();
    Ok((0..state.paths)
        .map(|p| {
            let tau = rule.index[p];
            let run: f64 = (0..tau).map(|i| state.running(p, i) * dt).sum();
            if tau < m {
                run + state.obstacle(p, tau)
            } else {
                run + state.terminal(p)
            }
        })
        .collect())
}
