use proptest::prelude::*;
use tsummary::dataset::{Bout, CategoryLabel, Signal};
use tsummary::features::{featurize_bout, lag1_autocorrelation, percentile_points, FEATURES_PER_AXIS};

fn window() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e4f64..1e4, 2..40)
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #[test]
    fn percentiles_ignore_sample_order(values in window(), seed in any::<u64>()) {
        let mut shuffled = values.clone();
        let n = shuffled.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(percentile_points(&values).unwrap(), percentile_points(&shuffled).unwrap());
    }

    #[test]
    fn percentiles_follow_increasing_affine_maps(values in window(), a in 0.01f64..100.0, b in -1e3f64..1e3) {
        let mapped: Vec<f64> = values.iter().map(|v| a * v + b).collect();
        let before = percentile_points(&values).unwrap();
        let after = percentile_points(&mapped).unwrap();
        for (p, q) in before.iter().zip(&after) {
            prop_assert!(close(a * p + b, *q, 1e-12), "{} vs {}", a * p + b, q);
        }
        prop_assert!(after.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn autocorrelation_ignores_shift_and_scale(values in window(), a in 0.01f64..100.0, b in -1e3f64..1e3) {
        let r = lag1_autocorrelation(&values).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r));
        let mapped: Vec<f64> = values.iter().map(|v| a * v + b).collect();
        let r2 = lag1_autocorrelation(&mapped).unwrap();
        prop_assert!((r - r2).abs() <= 1e-9, "{} vs {}", r, r2);
    }

    #[test]
    fn window_count_and_width(samples in 1usize..300, axes in 1usize..4, wl in 2usize..20) {
        prop_assume!(samples >= wl);
        let data: Vec<f64> = (0..samples * axes).map(|i| ((i * 37) % 101) as f64).collect();
        let bout = Bout::new("b", "s", CategoryLabel::new("x"), Signal::new(samples, axes, data).unwrap(), None, wl).unwrap();
        let f = featurize_bout(&bout, wl).unwrap();
        prop_assert_eq!(f.windows.len(), samples / wl);
        prop_assert!(f.windows.iter().all(|w| w.values.len() == axes * FEATURES_PER_AXIS));
        prop_assert!(f.windows.iter().enumerate().all(|(i, w)| w.window_index == i));
    }
}

#[test]
fn constant_window_has_zero_autocorrelation() {
    assert_eq!(lag1_autocorrelation(&[3.0; 12]).unwrap(), 0.0);
}

#[test]
fn trailing_partial_window_is_dropped() {
    // 25 samples of one axis: two windows of 12, the 25th sample is ignored
    let mut data: Vec<f64> = (0..24).map(f64::from).collect();
    data.push(1e9);
    let bout = Bout::new("b", "s", CategoryLabel::new("x"), Signal::new(25, 1, data).unwrap(), None, 12).unwrap();
    let f = featurize_bout(&bout, 12).unwrap();
    assert_eq!(f.windows.len(), 2);
    // positions 2, 3, 6, 9, 11 of 12..=23
    assert_eq!(&f.windows[1].values[..5], &[13.0, 14.0, 17.0, 20.0, 22.0]);
}
