use bounded_diffusion::sim::{self, Ensemble};
use bounded_diffusion::validate::{self, Exceedance, QuantileStatistic};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn quantile_rows_are_monotone(
        paths in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 30), 1..6),
        pooled in any::<bool>(),
    ) {
        let probs = validate::PROB_LADDER;
        let obs = validate::empirical_quantiles(&paths[0], &probs);
        prop_assert!(obs.windows(2).all(|w| w[0] <= w[1]));
        let e = Ensemble::from_paths(paths).unwrap();
        let stat = if pooled { QuantileStatistic::Pooled } else { QuantileStatistic::MeanOfPaths };
        let col = validate::quantile_report(&e, &probs, stat).unwrap();
        prop_assert!(col.simulated.windows(2).all(|w| w[0] <= w[1] + 1e-12));
    }

    #[test]
    fn cluster_bookkeeping(
        values in prop::collection::vec(0.0f64..1.0, 1..300),
        cuts in prop::collection::vec(0usize..300, 0..4),
        threshold in 0.0f64..1.0,
        above in any::<bool>(),
    ) {
        let n = values.len();
        let mut bounds: Vec<usize> = cuts.into_iter().map(|c| c % n).collect();
        bounds.push(0);
        bounds.push(n);
        bounds.sort();
        bounds.dedup();
        let segments: Vec<_> = bounds.windows(2).map(|w| w[0]..w[1]).collect();
        let dir = if above { Exceedance::Above } else { Exceedance::Below };
        let s = validate::clusters_in_segments(&values, &segments, threshold, dir);
        let hit = |v: f64| if above { v > threshold } else { v < threshold };
        let days = values.iter().filter(|v| hit(**v)).count();
        let weighted: usize = s.length_counts.iter().map(|(l, c)| l * c).sum();
        prop_assert_eq!(weighted, days);
        prop_assert_eq!(s.exceedance_days, days);
        let mut runs = 0;
        for seg in &segments {
            for i in seg.clone() {
                if hit(values[i]) && (i == seg.start || !hit(values[i - 1])) {
                    runs += 1;
                }
            }
        }
        prop_assert_eq!(s.n_clusters, runs);
        if runs > 0 {
            let total: f64 = s.length_histogram.values().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            let m = s.mean_length.unwrap();
            prop_assert_eq!(s.declusterization_rate.unwrap(), 1.0 / m);
        } else {
            prop_assert!(s.mean_length.is_none() && s.declusterization_rate.is_none());
        }
    }

    #[test]
    fn ensemble_files_round_trip(
        paths in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 7), 1..5),
    ) {
        let e = Ensemble::from_paths(paths).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("e.csv");
        let bin = dir.path().join("e.bin");
        sim::write_csv(&e, &csv).unwrap();
        sim::write_binary(&e, &bin).unwrap();
        prop_assert_eq!(&sim::read_ensemble(&csv).unwrap().paths, &e.paths);
        prop_assert_eq!(&sim::read_ensemble(&bin).unwrap().paths, &e.paths);
    }
}
