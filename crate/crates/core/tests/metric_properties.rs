use interface_core::eval::{board_count, kfold_accuracy, pair_accuracy, tar_at_far, AccuracyTable, ScoredPairs};
use proptest::prelude::*;

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![(-4i32..4).prop_map(|k| k as f64 / 4.0), -1.0..1.0f64], 1..40)
}

proptest! {
    #[test]
    fn accuracy_beats_trivial_thresholds(g in scores(), i in scores()) {
        let (acc, _) = pair_accuracy(&ScoredPairs::new(g.clone(), i.clone()).unwrap()).unwrap();
        let n = (g.len() + i.len()) as f64;
        prop_assert!(acc <= 1.0);
        prop_assert!(acc >= g.len() as f64 / n);
        prop_assert!(acc >= i.len() as f64 / n);
    }

    #[test]
    fn accuracy_is_invariant_under_exact_rescaling(g in scores(), i in scores()) {
        let scaled = |v: &[f64]| v.iter().map(|x| 4.0 * x).collect::<Vec<_>>();
        let a = pair_accuracy(&ScoredPairs::new(g.clone(), i.clone()).unwrap()).unwrap().0;
        let b = pair_accuracy(&ScoredPairs::new(scaled(&g), scaled(&i)).unwrap()).unwrap().0;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn accuracy_is_symmetric_under_negation(g in scores(), i in scores()) {
        let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
        let a = pair_accuracy(&ScoredPairs::new(g.clone(), i.clone()).unwrap()).unwrap().0;
        let b = pair_accuracy(&ScoredPairs::new(neg(&i), neg(&g)).unwrap()).unwrap().0;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn tar_is_monotone_and_full_at_far_one(g in scores(), i in scores(), mut fars in prop::collection::vec(1e-4..=1.0f64, 1..8)) {
        let pairs = ScoredPairs::new(g, i).unwrap();
        fars.sort_by(f64::total_cmp);
        let tars: Vec<f64> = fars.iter().map(|&f| tar_at_far(&pairs, f).unwrap()).collect();
        prop_assert!(tars.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(tars.iter().all(|t| (0.0..=1.0).contains(t)));
        prop_assert_eq!(tar_at_far(&pairs, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn kfold_mean_is_a_fraction(labeled in prop::collection::vec((-1.0..1.0f64, any::<bool>()), 4..60), folds in 2usize..5) {
        prop_assume!(labeled.iter().any(|p| p.1) && labeled.iter().any(|p| !p.1));
        // Every training split must hold both kinds of pair.
        let n = labeled.len();
        let splits_ok = (0..folds).all(|f| {
            let (lo, hi) = (f * n / folds, (f + 1) * n / folds);
            let rest: Vec<_> = labeled[..lo].iter().chain(&labeled[hi..]).collect();
            rest.iter().any(|p| p.1) && rest.iter().any(|p| !p.1)
        });
        prop_assume!(splits_ok);
        let r = kfold_accuracy(&labeled, folds).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.mean_accuracy));
        prop_assert_eq!(r.fold_accuracy.len(), folds);
    }

    #[test]
    fn board_count_ignores_column_shifts_and_follows_row_order(
        values in prop::collection::vec(prop::collection::vec(0u8..6, 3), 2..6),
        shift in -40.0..40.0f64,
    ) {
        let rows = values.len();
        let as_f = |v: &Vec<Vec<u8>>, d: f64| v.iter().map(|r| r.iter().map(|&x| 50.0 + x as f64 + d).collect()).collect();
        let labels: Vec<String> = (0..rows).map(|r| format!("r{r}")).collect();
        let cols: Vec<String> = (0..3).map(|c| format!("c{c}")).collect();
        let base = board_count(&AccuracyTable::new(labels.clone(), cols.clone(), as_f(&values, 0.0)).unwrap()).unwrap();
        let shifted = board_count(&AccuracyTable::new(labels.clone(), cols.clone(), as_f(&values, shift)).unwrap()).unwrap();
        prop_assert_eq!(&base, &shifted);
        prop_assert!(base.bc.iter().flatten().all(|&b| (1..=rows).contains(&b)));

        let mut reversed = values.clone();
        reversed.reverse();
        let rev = board_count(&AccuracyTable::new(labels, cols, as_f(&reversed, 0.0)).unwrap()).unwrap();
        let mut sums = base.row_sums.clone();
        sums.reverse();
        prop_assert_eq!(&rev.row_sums, &sums);
        let top = *base.row_sums.iter().max().unwrap();
        prop_assert_eq!(rev.row_sums[rev.best_row], top);
    }
}
