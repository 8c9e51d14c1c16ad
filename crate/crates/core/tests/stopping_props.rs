use gd_core::data::kfold_assign;
use gd_core::stopping::{PatiencePolicy, ThresholdKind};
use proptest::prelude::*;

fn series() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 0..60)
}

proptest! {
    #[test]
    fn any_increase_fires_no_later_than_consecutive(s in series(), p in 1usize..8) {
        let t1 = PatiencePolicy::t1(p).unwrap().stop_epoch(&s);
        let t2 = PatiencePolicy::t2(p).unwrap().stop_epoch(&s);
        match (t1, t2) {
            (Some(a), Some(b)) => prop_assert!(a <= b),
            (None, Some(_)) => prop_assert!(false, "t2 fired without t1"),
            _ => {}
        }
    }

    #[test]
    fn stop_epoch_is_monotone_in_patience(s in series(), p in 1usize..8, consecutive in any::<bool>()) {
        let kind = if consecutive { ThresholdKind::ConsecutiveIncrease } else { ThresholdKind::AnyIncrease };
        let a = PatiencePolicy::new(p, kind).unwrap().stop_epoch(&s);
        let b = PatiencePolicy::new(p + 1, kind).unwrap().stop_epoch(&s);
        if let Some(b) = b {
            prop_assert!(a.is_some_and(|a| a < b));
        }
    }

    #[test]
    fn non_increasing_series_never_stop(mut s in series(), p in 1usize..5) {
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assert_eq!(PatiencePolicy::t1(p).unwrap().stop_epoch(&s), None);
    }

    #[test]
    fn folds_partition_the_data(n in 2usize..=1000, kseed in any::<u64>(), seed in any::<u64>()) {
        let k = 2 + (kseed as usize) % (n - 1);
        let f = kfold_assign(n, k, seed).unwrap();
        let mut seen = vec![0u32; n];
        for fold in 0..k {
            let val = f.validation_indices(fold);
            let train = f.training_indices(fold);
            prop_assert_eq!(val.len() + train.len(), n);
            prop_assert!(!val.is_empty());
            for &i in &val {
                seen[i] += 1;
                prop_assert!(train.binary_search(&i).is_err());
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes = f.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}
