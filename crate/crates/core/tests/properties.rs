use proptest::prelude::*;
use stoplab::epsilon_optimal_intensity;
use stoplab::intensity::duality_gap;
use stoplab::reflected::implicit_penalty_step;

proptest! {
    #[test]
    fn epsilon_optimal_gap_is_bounded(u in -1e6f64..1e6, level in 1.0f64..1e3, eps in 1e-6f64..=1.0) {
        let nu = epsilon_optimal_intensity(u, level, eps);
        prop_assert!(nu > 0.0 && nu <= level);
        let gap = duality_gap(u, level, nu);
        prop_assert!(gap >= 0.0);
        prop_assert!(gap <= eps);
    }

    #[test]
    fn implicit_step_solves_its_equation(c in -1e3f64..1e3, h in -1e3f64..1e3, w in 0.0f64..1e3) {
        let y = implicit_penalty_step(c, h, w);
        let lhs = y - c - w * (h - y).max(0.0);
        prop_assert!(lhs.abs() <= 1e-9 * (1.0 + c.abs() + w * h.abs()));
        prop_assert!(y >= c.min(h) - 1e-12 && y <= c.max(h) + 1e-12);
    }

    #[test]
    fn implicit_step_increases_with_the_level(c in -1e2f64..1e2, h in -1e2f64..1e2, w in 0.0f64..1e2, dw in 0.0f64..1e2) {
        prop_assert!(implicit_penalty_step(c, h, w + dw) >= implicit_penalty_step(c, h, w) - 1e-12);
    }
}
