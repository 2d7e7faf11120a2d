//! Recombining binomial tree for the Snell envelope of scalar Markovian
//! instances. Shares no code with the regression solvers.
//!
//! Node values follow `V_N = ξ(x)` and
//! `V_i = max(h(t_i, x), E[V_{i+1}] + f(t_i, x) Δt)`, with the up probability
//! matched to the drift of the state.

use super::{Dynamics, ProblemSpec};
use crate::error::{Error, Result};

enum Lattice {
    /// `x0 u^j d^{i-j}`
    Geometric { up: f64, prob: f64 },
    /// `x0 + (2j - i) σ √Δt`
    Arithmetic { step: f64, prob: f64 },
    /// Deterministic path `x(t_i)`; one node per level.
    Path { growth: Box<dyn Fn(usize) -> f64> },
}

pub fn binomial_snell_oracle(spec: &ProblemSpec, horizon: f64, tree_steps: usize) -> Result<f64> {
    if !spec.markovian {
        return Err(Error::Problem(format!(
            "{}: oracle needs a Markovian instance",
            spec.name
        )));
    }
    if spec.state_dim() != 1 {
        return Err(Error::Problem(format!(
            "{}: oracle supports one-dimensional states only",
            spec.name
        )));
    }
    if tree_steps == 0 || horizon.is_nan() || horizon <= 0.0 {
        return Err(Error::Config(
            "oracle needs positive horizon and tree steps".into(),
        ));
    }
    let n = tree_steps;
    let dt = horizon / n as f64;
    let x0 = spec.x0[0];

    let lattice = match spec.dynamics {
        Dynamics::Constant => Lattice::Path {
            growth: Box::new(move |_| x0),
        },
        Dynamics::Geometric { drift, vol: 0.0 } => Lattice::Path {
            growth: Box::new(move |i| x0 * (drift * i as f64 * dt).exp()),
        },
        Dynamics::Arithmetic { drift, vol: 0.0 } => Lattice::Path {
            growth: Box::new(move |i| x0 + drift * i as f64 * dt),
        },
        Dynamics::Geometric { drift, vol } => {
            let up = (vol * dt.sqrt()).exp();
            let down = 1.0 / up;
            let prob = ((drift * dt).exp() - down) / (up - down);
            Lattice::Geometric { up, prob }
        }
        Dynamics::Arithmetic { drift, vol } => {
            let step = vol.abs() * dt.sqrt();
            let prob = 0.5 + drift * dt.sqrt() / (2.0 * vol.abs());
            Lattice::Arithmetic { step, prob }
        }
        Dynamics::Euler { .. } => {
            return Err(Error::Problem(format!(
                "{}: oracle needs constant-coefficient arithmetic or geometric dynamics",
                spec.name
            )))
        }
    };
    if let Lattice::Geometric { prob, .. } | Lattice::Arithmetic { prob, .. } = lattice {
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::Config(format!(
                "tree up-probability {prob} outside [0, 1]; increase tree steps"
            )));
        }
    }

    let time = |i: usize| if i == n { horizon } else { i as f64 * dt };

    if let Lattice::Path { growth } = &lattice {
        let mut v = spec.terminal_value(&[growth(n)]);
        for i in (0..n).rev() {
            let x = [growth(i)];
            let cont = v + spec.running_cost(time(i), &x) * dt;
            v = spec.obstacle_value(time(i), &x).max(cont);
        }
        return Ok(v);
    }

    let state = |i: usize, j: usize| -> f64 {
        match lattice {
            Lattice::Geometric { up, .. } => x0 * up.powi(2 * j as i32 - i as i32),
            Lattice::Arithmetic { step, .. } => x0 + (2.0 * j as f64 - i as f64) * step,
            Lattice::Path { .. } => unreachable!(),
        }
    };
    let prob = match lattice {
        Lattice::Geometric { prob, .. } | Lattice::Arithmetic { prob, .. } => prob,
        Lattice::Path { .. } => unreachable!(),
    };

    let mut values: Vec<f64> = (0..=n)
        .map(|j| spec.terminal_value(&[state(n, j)]))
        .collect();
    for i in (0..n).rev() {
        let t = time(i);
        for j in 0..=i {
            let x = [state(i, j)];
            let cont =
                prob * values[j + 1] + (1.0 - prob) * values[j] + spec.running_cost(t, &x) * dt;
            values[j] = spec.obstacle_value(t, &x).max(cont);
        }
    }
    Ok(values[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::catalog;
    use std::sync::Arc;

    /// European value of the same tree, i.e. no early stopping.
    fn terminal_only(spec: &ProblemSpec, n: usize) -> f64 {
        let mut s = spec.clone();
        s.obstacle = Arc::new(|_, _| f64::NEG_INFINITY);
        binomial_snell_oracle(&s, 1.0, n).unwrap()
    }

    #[test]
    fn trivial_instances() {
        assert_eq!(
            binomial_snell_oracle(&catalog::named("zero"), 1.0, 100).unwrap(),
            0.0
        );
        let v = binomial_snell_oracle(&catalog::named("running-one"), 1.0, 2000).unwrap();
        assert!((v - 1.0).abs() < 1e-10);
        let v = binomial_snell_oracle(&catalog::named("constant-obstacle"), 1.0, 50).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn drifting_put_has_early_stopping_premium() {
        let spec = catalog::named("put-drift");
        let american = binomial_snell_oracle(&spec, 1.0, 2000).unwrap();
        let european = terminal_only(&spec, 2000);
        assert!(american > european + 0.05, "{american} vs {european}");
        // Converged to a few cents between tree sizes.
        let coarse = binomial_snell_oracle(&spec, 1.0, 1000).unwrap();
        assert!((american - coarse).abs() < 5e-3);
    }

    #[test]
    fn martingale_put_never_stops_early() {
        let spec = catalog::named("put-martingale");
        let american = binomial_snell_oracle(&spec, 1.0, 2000).unwrap();
        let european = terminal_only(&spec, 2000);
        assert!((american - european).abs() < 1e-9);
        // Closed form with zero rate: S0 (2Φ(σ√T/2) - 1) = 7.9656...
        assert!((american - 7.965567).abs() < 0.01, "{american}");
    }

    #[test]
    fn monotone_in_obstacle() {
        let spec = catalog::named("put-drift");
        let base = binomial_snell_oracle(&spec, 1.0, 500).unwrap();
        let mut lifted = spec.clone();
        lifted.obstacle = Arc::new(|_, x| (100.0 - x[0]).max(0.0) + 0.5);
        lifted.terminal = Arc::new(|x| (100.0 - x[0]).max(0.0) + 0.5);
        let higher = binomial_snell_oracle(&lifted, 1.0, 500).unwrap();
        assert!(higher >= base);
    }

    #[test]
    fn rejects_unsupported_instances() {
        let mut spec = catalog::named("put-drift");
        spec.markovian = false;
        assert!(binomial_snell_oracle(&spec, 1.0, 10).is_err());
        let mut spec = catalog::named("put-drift");
        spec.x0 = vec![1.0, 2.0];
        assert!(binomial_snell_oracle(&spec, 1.0, 10).is_err());
    }

    #[test]
    fn arithmetic_tree_matches_closed_form_european() {
        let mut spec = catalog::named("put-martingale");
        spec.dynamics = Dynamics::Arithmetic {
            drift: 0.0,
            vol: 20.0,
        };
        let v = terminal_only(&spec, 2000);
        // E[(100 - X_1)^+] with X_1 ~ N(100, 20²) = 20 φ(0) = 7.9788...
        assert!(
            (v - 20.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 0.01,
            "{v}"
        );
    }
}
