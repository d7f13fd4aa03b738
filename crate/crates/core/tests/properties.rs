use proptest::prelude::*;

use elight_core::{
    assign, column_reorder, execute_layer, hungarian, partition, remap_schedule, simulate_schedule,
    verify_equivalence, wt_scalar, AgedProfile, Assignment, CellConfig, Matrix, MdForm, SimOptions,
};
use elight_core::deploy::assign_with;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(-1.0f64..=1.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn layer_case() -> impl Strategy<Value = (usize, Matrix, Matrix)> {
    (1usize..=4, 1usize..=9, 1usize..=13, 1usize..=3)
        .prop_flat_map(|(k, r, c, n)| (Just(k), matrix(r, c), matrix(c, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reorder_keeps_outputs_and_never_adds_rewrites(
        (k, w, x) in layer_case(),
        bits in 2u32..=5,
        base in 0.5f64..0.95,
        round_robin in any::<bool>(),
    ) {
        let cfg = CellConfig::new(bits, base).unwrap();
        let mode = if round_robin { Assignment::RoundRobin { ptcs: 2 } } else { Assignment::RowPerPtc };
        let s = assign_with(&partition(&w, k).unwrap(), mode);
        let r = column_reorder(&s).unwrap();
        prop_assert!(verify_equivalence(&s, &r, &x).unwrap() <= 1e-9);
        let before = simulate_schedule(&cfg, &s, &SimOptions::default(), None).unwrap();
        let after = simulate_schedule(&cfg, &r.schedule, &SimOptions::default(), None).unwrap();
        // initial programming from the fresh state is not covered
        for (a, b) in after.ptcs.iter().zip(&before.ptcs) {
            for (x, y) in a.cell_rewrite_counts().iter().zip(b.cell_rewrite_counts()) {
                prop_assert!(*x <= y);
            }
        }
        prop_assert!(
            after.stats.total_writes - after.stats.initial_writes
                <= before.stats.total_writes - before.stats.initial_writes
        );
    }

    #[test]
    fn remap_keeps_outputs((k, w, x) in layer_case(), seed in any::<u64>()) {
        let cfg = CellConfig::new(3, 0.7).unwrap();
        let r = column_reorder(&assign(&partition(&w, k).unwrap())).unwrap();
        let profiles: Vec<AgedProfile> = (0..r.schedule.ptcs.len())
            .map(|t| {
                let cells = (0..k * k)
                    .map(|i| {
                        let h = seed.wrapping_mul(31).wrapping_add((t * 97 + i) as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                        ((h >> 7) as u32 % 8, (h >> 29) as u32 % 8)
                    })
                    .collect();
                AgedProfile::from_cells(k, cells).unwrap()
            })
            .collect();
        let m = remap_schedule(&cfg, &r.schedule, &profiles, MdForm::Corrected).unwrap();
        let reference = execute_layer(&assign(&partition(&w, k).unwrap()), &x).unwrap();
        prop_assert!(reference.relative_residual(&execute_layer(&m, &x).unwrap()) <= 1e-9);
        for o in m.row_orders.as_ref().unwrap() {
            prop_assert!(o.cost <= o.identity_cost);
        }
    }

    #[test]
    fn wt_is_a_metric(bits in 2u32..=6, a in -1.0f64..=1.0, b in -1.0f64..=1.0, c in -1.0f64..=1.0) {
        let cfg = CellConfig::new(bits, 0.8).unwrap();
        let d = |x, y| wt_scalar(&cfg, x, y).unwrap();
        prop_assert_eq!(d(a, b), d(b, a));
        prop_assert_eq!(d(a, a), 0);
        prop_assert!(d(a, c) <= d(a, b) + d(b, c));
    }

    #[test]
    fn hungarian_beats_every_permutation_sampled(
        cost in (1usize..=6).prop_flat_map(|n| proptest::collection::vec(proptest::collection::vec(0.0f64..5.0, n), n)),
        rot in 0usize..6,
    ) {
        let m = hungarian(&cost).unwrap();
        let n = cost.len();
        let mut seen = vec![false; n];
        for &c in &m.cols {
            prop_assert!(!seen[c]);
            seen[c] = true;
        }
        let shifted: f64 = (0..n).map(|r| cost[r][(r + rot) % n]).sum();
        prop_assert!(m.cost <= shifted + 1e-12);
    }
}
