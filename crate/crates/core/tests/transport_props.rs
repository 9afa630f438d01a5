//! Cross-checks between the transportation simplex and the 1-D quantile coupling.

use proptest::prelude::*;
use sotlab::measures::DiscreteMeasure;
use sotlab::transport::{solve_exact, solve_quantile_1d};

fn measure() -> impl Strategy<Value = DiscreteMeasure> {
    prop::collection::vec((-5.0f64..5.0, 0.05f64..1.0), 1..7).prop_map(|atoms| {
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        let xs: Vec<f64> = atoms.iter().map(|a| a.0).collect();
        let ws: Vec<f64> = atoms.iter().map(|a| a.1 / total).collect();
        DiscreteMeasure::from_1d(&xs, &ws).unwrap()
    })
}

proptest! {
    #[test]
    fn simplex_matches_monotone_coupling(p in measure(), q in measure(), r in 1.0f64..3.0) {
        let lp = solve_exact(&p, &q, r).unwrap().value;
        let mono = solve_quantile_1d(&p, &q, r).unwrap().value;
        prop_assert!((lp - mono).abs() <= 1e-9 * (1.0 + mono), "lp {lp} vs monotone {mono}");
    }

    #[test]
    fn value_is_symmetric_and_vanishes_on_diagonal(p in measure(), q in measure(), r in 1.0f64..3.0) {
        let pq = solve_exact(&p, &q, r).unwrap().value;
        let qp = solve_exact(&q, &p, r).unwrap().value;
        prop_assert!((pq - qp).abs() <= 1e-9 * (1.0 + pq));
        prop_assert!(solve_exact(&p, &p, r).unwrap().value.abs() <= 1e-12);
    }
}
