mod oracles;

use oracles::*;
use proptest::prelude::*;
use vineyield_core::geo::LocalPoint;
use vineyield_core::yield_ingest::*;

fn as_points(values: &[f64]) -> Vec<YieldPoint> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| YieldPoint {
            id: i as u64,
            t: 0.0,
            pos: LocalPoint::new(i as f64, 0.0),
            row_id: 0,
            raw_mass: v,
            yield_tha: v,
            block: "a".into(),
            split: Split::Unassigned,
        })
        .collect()
}

#[test]
fn thousand_datasets_match_fence_oracle_and_are_idempotent() {
    let mut changed = 0;
    for seed in 0..1000 {
        let values = iqr_dataset(seed);
        let (kept, removed) = remove_outliers_iqr(&as_points(&values)).unwrap();
        let got: Vec<usize> = kept.iter().map(|p| p.id as usize).collect();
        assert_eq!(got, oracle_iqr_keep(&values), "seed {seed}");
        assert_eq!(kept.len() + removed.len(), values.len());
        changed += !removed.is_empty() as usize;
        if kept.len() >= 4 {
            let (again, none) = remove_outliers_iqr(&kept).unwrap();
            assert!(none.is_empty(), "seed {seed}: second pass removed {}", none.len());
            assert_eq!(again, kept);
        }
    }
    assert!(changed > 300, "spikes were planted; only {changed} datasets changed");
}

#[test]
fn blocks_are_filtered_independently() {
    let mut pts = as_points(&[1.0, 1.1, 1.2, 1.3, 1.25]);
    let mut other = as_points(&[100.0, 101.0, 102.0, 103.0, 500.0]);
    for p in &mut other {
        p.block = "b".into();
        p.id += 10;
    }
    pts.extend(other);
    let (kept, removed) = remove_outliers_iqr(&pts).unwrap();
    assert_eq!(removed.len(), 1);
    assert_eq!(removed[0].point.yield_tha, 500.0);
    assert_eq!(kept.len(), 9);
}

proptest! {
    #[test]
    fn survivors_sit_within_their_own_fences(values in prop::collection::vec(0.1f64..50.0, 10..60)) {
        let (kept, _) = remove_outliers_iqr(&as_points(&values)).unwrap();
        if kept.len() >= 4 {
            let v: Vec<f64> = kept.iter().map(|p| p.yield_tha).collect();
            let (lo, hi) = tukey_fences(&v);
            prop_assert!(v.iter().all(|x| (lo..=hi).contains(x)));
        }
    }

    #[test]
    fn calibration_hits_block_mean(values in prop::collection::vec(0.1f64..50.0, 1..40), target in 0.5f64..30.0) {
        let cal = [BlockCalibration { block: "a".into(), winery_mean_tha: target }];
        let out = calibrate_block_means(&as_points(&values), &cal).unwrap();
        let mean = out.iter().map(|p| p.yield_tha).sum::<f64>() / out.len() as f64;
        prop_assert!((mean - target).abs() <= 1e-9 * target);
    }

    #[test]
    fn type7_quantile_is_monotone(mut values in prop::collection::vec(-10.0f64..10.0, 1..30), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        values.sort_by(f64::total_cmp);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantile_type7(&values, lo) <= quantile_type7(&values, hi));
        prop_assert_eq!(quantile_type7(&values, 0.0), values[0]);
        prop_assert_eq!(quantile_type7(&values, 1.0), values[values.len() - 1]);
    }
}
