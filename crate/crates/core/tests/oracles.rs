use approx::assert_relative_eq;
use stoplab::verify::Scene;
use stoplab::{
    binomial_snell_oracle, catalog, evaluate_policy, lift_solution, solve_penalized, solve_snell,
    ConstantIntensity, ProblemParams, RunConfig,
};

/// Black-Scholes put with zero rate, `x0 = K = 100`, `σ = 0.2`, `T = 1`.
const EUROPEAN_PUT: f64 = 7.965567455405798;

fn scene(problem: &str, steps: usize, paths: usize) -> Scene {
    let mut cfg = RunConfig::default().for_problem(problem);
    cfg.grid.steps = steps;
    cfg.monte_carlo.paths = paths;
    Scene::build(&cfg).unwrap()
}

#[test]
fn martingale_put_tree_matches_closed_form() {
    let spec = catalog::build("put-martingale", &ProblemParams::default()).unwrap();
    let tree = binomial_snell_oracle(&spec, 1.0, 2000).unwrap();
    assert_relative_eq!(tree, EUROPEAN_PUT, max_relative = 1e-3);
}

#[test]
fn martingale_put_regression_matches_closed_form() {
    let s = scene("put-martingale", 25, 20_000);
    let snell = solve_snell(&s.state, &s.paths, &s.basis).unwrap();
    let tol = 3.0 * snell.y0.se + 0.015 * EUROPEAN_PUT;
    assert!(
        (snell.y0.mean - EUROPEAN_PUT).abs() <= tol,
        "{:?}",
        snell.y0
    );
}

#[test]
fn drifting_put_regression_matches_tree() {
    let s = scene("put-drift", 25, 20_000);
    let tree = binomial_snell_oracle(&s.spec, 1.0, 1000).unwrap();
    let snell = solve_snell(&s.state, &s.paths, &s.basis).unwrap();
    assert_relative_eq!(snell.y0.mean, tree, max_relative = 0.02);
    let lifted = lift_solution(&snell, &s.jumps, &s.state).unwrap();
    assert_relative_eq!(lifted.y0.mean, snell.y0.mean, epsilon = 1e-10);
}

#[test]
fn penalized_values_sit_below_the_envelope() {
    let s = scene("put-drift", 20, 10_000);
    let snell = solve_snell(&s.state, &s.paths, &s.basis).unwrap();
    for n in [1.0, 8.0, 64.0] {
        let pen = solve_penalized(&s.state, &s.paths, &s.basis, n).unwrap();
        assert!(
            pen.y0.mean <= snell.y0.mean + 2.0 * pen.y0.combined_se(&snell.y0),
            "n={n}"
        );
    }
}

#[test]
fn running_cost_under_constant_intensity_matches_closed_form() {
    let s = scene("running-one", 20, 50_000);
    for c in [0.25, 1.0, 3.0] {
        let est = evaluate_policy(&ConstantIntensity::new(c).unwrap(), &s.state, &s.jumps)
            .unwrap()
            .estimate();
        let exact = (1.0 - (-c).exp()) / c;
        assert!(est.within(exact, 3.0, 1e-9), "c={c}: {est:?} vs {exact}");
    }
}
