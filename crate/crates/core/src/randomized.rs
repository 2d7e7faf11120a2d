//! The stopping problem on the space enlarged by an independent
//! exponential time `η`: value `Ȳ`, Brownian integrand `Z̄`, jump integrand
//! `Ū` (constrained to be nonpositive) and push `K̄`.
//!
//! [`lift_solution`] builds these from a reflected solution,
//! [`solve_penalized_randomized`] solves the penalized equation directly.
//! On survival the value is a function `y(t, X_t)` of the state; the jump
//! payoff is `h_η - Ū_η = y_η`. Each step is split into the jump and
//! no-jump alternatives: a jump falls in `(t_i, t_{i+1}]` with probability
//! `q = 1 - e^{-Δt}` at mean offset `s` from `t_i`, the running and penalty
//! terms accrue over the expected `ΔA = q`, and `y_η` is interpolated
//! linearly between `y_i` and `E[y_{i+1} | X_i]`. Solving for `y_i` gives
//!
//! `y_i = E[y_{i+1} | X_i] + w (f_i + n (h_i - y_i)^+)`, `w = q / (1 - q + q s / Δt)`,
//!
//! and `w` equals `Δt` up to rounding. Since `η` is independent of the
//! Brownian scene, the survivor regression is run on every path.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{JumpRandomization, PathBundle, TimeGrid};
use crate::problem::{bracket, StatePaths};
use crate::reflected::{backward_sweep, check_alignment, implicit_penalty_step, ReflectedSolution};
use crate::regression::{RegressionBasis, RegressionWarning};
use crate::stats::{ordered_sum_by, Estimate};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RandomizedScheme {
    /// Lift of a reflected solution; `source_level` is the penalization level
    /// of that solution, if any.
    Lifted {
        source_level: Option<f64>,
    },
    Penalized {
        level: f64,
    },
}

impl RandomizedScheme {
    pub fn label(&self) -> String {
        match self {
            RandomizedScheme::Lifted { source_level: None } => "lifted".into(),
            RandomizedScheme::Lifted {
                source_level: Some(n),
            } => format!("lifted(n={n})"),
            RandomizedScheme::Penalized { level } => format!("randomized-penalized(n={level})"),
        }
    }
}

/// Grid-sampled `(Ȳ, Z̄, Ū, K̄)`, stored time-major, plus the jump-time values.
#[derive(Clone, Debug)]
pub struct RandomizedSolution {
    grid: TimeGrid,
    paths: usize,
    dim: usize,
    ybar: Vec<f64>,
    zbar: Vec<f64>,
    ubar: Vec<f64>,
    kbar: Vec<f64>,
    /// `Ū_η` for paths with `η <= T`.
    ubar_at_eta: Vec<Option<f64>>,
    /// `h(η, X_η)` for paths with `η <= T`.
    h_at_eta: Vec<Option<f64>>,
    jumps: JumpRandomization,
    pub scheme: RandomizedScheme,
    pub warnings: Vec<RegressionWarning>,
    /// Estimate of `Ȳ_0`.
    pub y0: Estimate,
}

fn check_jumps(grid: &TimeGrid, paths: usize, jumps: &JumpRandomization) -> Result<()> {
    if jumps.grid() != grid || jumps.paths() != paths {
        return Err(Error::GridMismatch(format!(
            "solution ({paths} paths, {} steps) and jump times ({} paths, {} steps) differ",
            grid.steps(),
            jumps.paths(),
            jumps.grid().steps()
        )));
    }
    Ok(())
}

/// Value of a node-sampled process at time `t`, linear between nodes.
fn interpolate(grid: &TimeGrid, values: impl Fn(usize) -> f64, t: f64) -> f64 {
    let (lo, w) = bracket(grid, t);
    if w == 0.0 {
        values(lo)
    } else {
        values(lo) + w * (values(lo + 1) - values(lo))
    }
}

/// Survivor quantities `(y, Z, K)` on the grid, assembled into the
/// enlarged-space solution. `kbar` is computed by the caller.
struct Assembly<'a> {
    state: &'a StatePaths,
    jumps: &'a JumpRandomization,
    dim: usize,
    /// survivor value, `[i][p]`
    y: &'a [f64],
    /// `[i][p][d]`, `i < M`
    z: &'a [f64],
}

impl Assembly<'_> {
    fn build(
        &self,
        kbar: Vec<f64>,
        scheme: RandomizedScheme,
        warnings: Vec<RegressionWarning>,
        y0: Estimate,
    ) -> RandomizedSolution {
        let grid = *self.state.grid();
        let (np, m, bm) = (self.state.paths(), grid.steps(), self.dim);
        let mut ybar = vec![0.0; (m + 1) * np];
        let mut ubar = vec![0.0; (m + 1) * np];
        let mut zbar = vec![0.0; m * np * bm];
        for i in 0..=m {
            let t = grid.time(i);
            for p in 0..np {
                let at = i * np + p;
                let eta = self.jumps.eta(p);
                if t < eta {
                    ybar[at] = self.y[at];
                }
                if t <= eta {
                    ubar[at] = self.state.obstacle(p, i) - self.y[at];
                    if i < m {
                        zbar[at * bm..(at + 1) * bm]
                            .copy_from_slice(&self.z[at * bm..(at + 1) * bm]);
                    }
                }
            }
        }
        let mut ubar_at_eta = vec![None; np];
        let mut h_at_eta = vec![None; np];
        for p in 0..np {
            if self.jumps.jumps_before_horizon(p) {
                let eta = self.jumps.eta(p);
                let h = self.state.obstacle_between(p, eta);
                let y = interpolate(&grid, |i| self.y[i * np + p], eta);
                ubar_at_eta[p] = Some(h - y);
                h_at_eta[p] = Some(h);
            }
        }
        RandomizedSolution {
            grid,
            paths: np,
            dim: bm,
            ybar,
            zbar,
            ubar,
            kbar,
            ubar_at_eta,
            h_at_eta,
            jumps: self.jumps.clone(),
            scheme,
            warnings,
            y0,
        }
    }
}

/// `Ȳ = Y 1{t<η}`, `Z̄ = Z 1{t<=η}`, `Ū = (h - Y) 1{t<=η}`, `K̄ = K_{t∧η}`.
///
/// `Y` and `K` at the jump time are interpolated between the bracketing
/// nodes; `h_η` uses the interpolated state.
pub fn lift_solution(
    refl: &ReflectedSolution,
    jumps: &JumpRandomization,
    state: &StatePaths,
) -> Result<RandomizedSolution> {
    if refl.grid() != state.grid() || refl.paths() != state.paths() {
        return Err(Error::GridMismatch(
            "reflected solution and state paths differ".into(),
        ));
    }
    check_jumps(refl.grid(), refl.paths(), jumps)?;
    let grid = *refl.grid();
    let (np, m, bm) = (refl.paths(), grid.steps(), refl.brownian_dim());

    let mut y = Vec::with_capacity((m + 1) * np);
    for i in 0..=m {
        y.extend_from_slice(refl.y_at(i));
    }
    let mut z = vec![0.0; m * np * bm];
    for i in 0..m {
        for p in 0..np {
            let at = (i * np + p) * bm;
            z[at..at + bm].copy_from_slice(refl.z(p, i));
        }
    }
    let mut kbar = vec![0.0; (m + 1) * np];
    for p in 0..np {
        let eta = jumps.eta(p);
        let k_eta = interpolate(&grid, |i| refl.k(p, i), eta.min(grid.horizon()));
        for i in 0..=m {
            kbar[i * np + p] = if grid.time(i) < eta {
                refl.k(p, i)
            } else {
                k_eta
            };
        }
    }
    let source_level = match refl.scheme {
        crate::reflected::Scheme::Reflected => None,
        crate::reflected::Scheme::Penalized { level } => Some(level),
    };
    let y0 = Estimate {
        mean: ordered_sum_by(np, |p| if jumps.alive(p, 0) { refl.y(p, 0) } else { 0.0 })
            / np as f64,
        ..refl.y0
    };
    let assembly = Assembly {
        state,
        jumps,
        dim: bm,
        y: &y,
        z: &z,
    };
    Ok(assembly.build(
        kbar,
        RandomizedScheme::Lifted { source_level },
        refl.warnings.clone(),
        y0,
    ))
}

/// Weight of the running and penalty terms in one survivor step.
pub fn survivor_step_weight(dt: f64) -> f64 {
    let q = -(-dt).exp_m1();
    let mean_offset = (q - dt * (-dt).exp()) / q;
    q / (1.0 - q + q * mean_offset / dt)
}

/// Direct backward solve of the penalized equation on the enlarged space.
pub fn solve_penalized_randomized(
    state: &StatePaths,
    paths: &PathBundle,
    jumps: &JumpRandomization,
    basis: &RegressionBasis,
    level: f64,
) -> Result<RandomizedSolution> {
    if !(level.is_finite() && level > 0.0) {
        return Err(Error::Config(format!(
            "penalization level must be positive, got {level}"
        )));
    }
    if !state.spec().markovian {
        return Err(Error::Problem(format!(
            "{}: the randomized solver needs a Markovian instance",
            state.spec().name
        )));
    }
    check_alignment(state, paths)?;
    check_jumps(state.grid(), state.paths(), jumps)?;
    let grid = *state.grid();
    let step = survivor_step_weight(grid.dt());
    let w = level * step;
    let sweep = backward_sweep(state, paths, basis, step, |c, h| {
        implicit_penalty_step(c, h, w)
    })?;

    let (np, m) = (state.paths(), grid.steps());
    let mut kbar = vec![0.0; (m + 1) * np];
    for i in 0..m {
        for p in 0..np {
            let at = i * np + p;
            let u = if grid.time(i) <= jumps.eta(p) {
                state.obstacle(p, i) - sweep.y[at]
            } else {
                0.0
            };
            kbar[at + np] = kbar[at] + level * u.max(0.0) * jumps.compensator_increment(p, i);
        }
    }
    let y0 = Estimate {
        mean: ordered_sum_by(np, |p| if jumps.alive(p, 0) { sweep.y[p] } else { 0.0 }) / np as f64,
        ..sweep.y0
    };
    let assembly = Assembly {
        state,
        jumps,
        dim: paths.dim(),
        y: &sweep.y,
        z: &sweep.z,
    };
    Ok(assembly.build(
        kbar,
        RandomizedScheme::Penalized { level },
        sweep.warnings,
        y0,
    ))
}

/// Result of [`check_sign_constraint`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignViolation {
    /// Largest `Ū^+` over nodes with `ΔA > 0`.
    pub max: f64,
    /// Path average of `Σ_i Ū_i^+ ΔA_i`.
    pub integral: f64,
}

/// Measures `Ū^+` where the compensator charges mass.
pub fn check_sign_constraint(sol: &RandomizedSolution) -> SignViolation {
    let (np, m) = (sol.paths, sol.grid.steps());
    let mut max = 0.0_f64;
    for i in 0..m {
        for p in 0..np {
            if sol.jumps.compensator_increment(p, i) > 0.0 {
                max = max.max(sol.ubar(p, i).max(0.0));
            }
        }
    }
    let integral = ordered_sum_by(np, |p| {
        (0..m)
            .map(|i| sol.ubar(p, i).max(0.0) * sol.jumps.compensator_increment(p, i))
            .sum()
    }) / np as f64;
    SignViolation { max, integral }
}

/// The three disjoint events of a path relative to node `t_i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpEvent {
    /// `η >= T`
    Beyond,
    /// `t_i < η < T`
    Ahead,
    /// `η <= t_i`, `η < T`
    Jumped,
}

impl JumpEvent {
    pub const ALL: [JumpEvent; 3] = [JumpEvent::Beyond, JumpEvent::Ahead, JumpEvent::Jumped];

    pub fn classify(grid: &TimeGrid, eta: f64, i: usize) -> Self {
        if eta >= grid.horizon() {
            JumpEvent::Beyond
        } else if grid.time(i) < eta {
            JumpEvent::Ahead
        } else {
            JumpEvent::Jumped
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventResidual {
    pub event: JumpEvent,
    pub paths: usize,
    pub mean: f64,
    pub mean_abs: f64,
    pub max_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub t_index: usize,
    pub events: Vec<EventResidual>,
    /// Mean `|R|` over all paths.
    pub mean_abs: f64,
    pub max_abs: f64,
}

/// Pathwise residual of the enlarged-space equation from `t_i` to `T`:
///
/// `R = Ȳ_i + Σ_{t_j<η} Z̄_j·ΔW_j + 1{t_i<η<T}(Ū_η - h_η) - ξ 1{η>=T}
///      - Σ_j f_j ΔA_j - (K̄_M - K̄_i)`,
///
/// summarized per event.
pub fn residual_check(
    sol: &RandomizedSolution,
    state: &StatePaths,
    paths: &PathBundle,
    t_index: usize,
) -> Result<ResidualReport> {
    check_alignment(state, paths)?;
    if sol.grid != *state.grid() || sol.paths != state.paths() {
        return Err(Error::GridMismatch(
            "randomized solution and state paths differ".into(),
        ));
    }
    let grid = sol.grid;
    let (np, m) = (sol.paths, grid.steps());
    if t_index > m {
        return Err(Error::Config(format!(
            "time index {t_index} beyond {m} steps"
        )));
    }
    let residual: Vec<f64> = (0..np)
        .map(|p| {
            let eta = sol.jumps.eta(p);
            let mut r = sol.ybar(p, t_index) - (sol.kbar(p, m) - sol.kbar(p, t_index));
            for j in t_index..m {
                if grid.time(j) < eta {
                    r += sol
                        .zbar(p, j)
                        .iter()
                        .zip(paths.increment(p, j))
                        .map(|(z, w)| z * w)
                        .sum::<f64>();
                }
                r -= state.running(p, j) * sol.jumps.compensator_increment(p, j);
            }
            match JumpEvent::classify(&grid, eta, t_index) {
                JumpEvent::Beyond => r -= state.terminal(p),
                JumpEvent::Ahead => {
                    r += sol.ubar_at_eta[p].unwrap_or(0.0) - sol.h_at_eta[p].unwrap_or(0.0)
                }
                JumpEvent::Jumped => {}
            }
            r
        })
        .collect();

    let events = JumpEvent::ALL
        .iter()
        .map(|&event| {
            let members: Vec<f64> = (0..np)
                .filter(|&p| JumpEvent::classify(&grid, sol.jumps.eta(p), t_index) == event)
                .map(|p| residual[p])
                .collect();
            let n = members.len();
            let (mean, mean_abs) = if n == 0 {
                (0.0, 0.0)
            } else {
                (
                    ordered_sum_by(n, |k| members[k]) / n as f64,
                    ordered_sum_by(n, |k| members[k].abs()) / n as f64,
                )
            };
            EventResidual {
                event,
                paths: n,
                mean,
                mean_abs,
                max_abs: members.iter().fold(0.0, |a, r| a.max(r.abs())),
            }
        })
        .collect();
    Ok(ResidualReport {
        t_index,
        events,
        mean_abs: ordered_sum_by(np, |p| residual[p].abs()) / np as f64,
        max_abs: residual.iter().fold(0.0, |a, r| a.max(r.abs())),
    })
}

impl RandomizedSolution {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn jumps(&self) -> &JumpRandomization {
        &self.jumps
    }

    pub fn ybar(&self, p: usize, i: usize) -> f64 {
        self.ybar[i * self.paths + p]
    }

    pub fn ybar_at(&self, i: usize) -> &[f64] {
        &self.ybar[i * self.paths..(i + 1) * self.paths]
    }

    /// `Z̄_i`, defined for `i < M`.
    pub fn zbar(&self, p: usize, i: usize) -> &[f64] {
        let at = (i * self.paths + p) * self.dim;
        &self.zbar[at..at + self.dim]
    }

    pub fn ubar(&self, p: usize, i: usize) -> f64 {
        self.ubar[i * self.paths + p]
    }

    pub fn ubar_at(&self, i: usize) -> &[f64] {
        &self.ubar[i * self.paths..(i + 1) * self.paths]
    }

    pub fn kbar(&self, p: usize, i: usize) -> f64 {
        self.kbar[i * self.paths + p]
    }

    pub fn ubar_at_eta(&self, p: usize) -> Option<f64> {
        self.ubar_at_eta[p]
    }

    pub fn h_at_eta(&self, p: usize) -> Option<f64> {
        self.h_at_eta[p]
    }

    /// `Σ_p Σ_i Ū_i² ΔA_i / P`.
    pub fn ubar_l2(&self) -> f64 {
        let m = self.grid.steps();
        ordered_sum_by(self.paths, |p| {
            (0..m)
                .map(|i| self.ubar(p, i).powi(2) * self.jumps.compensator_increment(p, i))
                .sum()
        }) / self.paths as f64
    }

    /// CSV with columns `path,time_index,Ybar,Kbar,Ubar,Zbar0..,eta,N,A,Ubar_at_eta`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["path", "time_index", "Ybar", "Kbar", "Ubar"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..self.dim).map(|d| format!("Zbar{d}")));
        header.extend(
            ["eta", "N", "A", "Ubar_at_eta"]
                .iter()
                .map(|s| s.to_string()),
        );
        out.write_record(&header)?;
        let m = self.grid.steps();
        for p in 0..self.paths {
            let u_eta = self.ubar_at_eta[p]
                .map(|v| v.to_string())
                .unwrap_or_default();
            for i in 0..=m {
                let mut rec = vec![
                    p.to_string(),
                    i.to_string(),
                    self.ybar(p, i).to_string(),
                    self.kbar(p, i).to_string(),
                    self.ubar(p, i).to_string(),
                ];
                if i < m {
                    rec.extend(self.zbar(p, i).iter().map(|v| v.to_string()));
                } else {
                    rec.extend((0..self.dim).map(|_| String::new()));
                }
                rec.push(self.jumps.eta(p).to_string());
                rec.push(self.jumps.counting(p, i).to_string());
                rec.push(self.jumps.compensator(p, i).to_string());
                rec.push(u_eta.clone());
                out.write_record(&rec)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> RandomizedSummary {
        let sign = check_sign_constraint(self);
        RandomizedSummary {
            schema_version: crate::SCHEMA_VERSION,
            scheme: self.scheme.label(),
            paths: self.paths,
            steps: self.grid.steps(),
            ybar0: self.y0.mean,
            ybar0_se: self.y0.se,
            sign_violation_max: sign.max,
            sign_violation_integral: sign.integral,
            ubar_l2: self.ubar_l2(),
            warnings: self.warnings.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomizedSummary {
    pub schema_version: u32,
    pub scheme: String,
    pub paths: usize,
    pub steps: usize,
    pub ybar0: f64,
    pub ybar0_se: f64,
    pub sign_violation_max: f64,
    pub sign_violation_integral: f64,
    pub ubar_l2: f64,
    pub warnings: Vec<RegressionWarning>,
}
