use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tsummary::par::Execution;
use tsummary::vbgmm::{fit, FitOptions, MixtureModel, MixturePrior, Standardizer};

fn two_d_model(weights: Vec<f64>) -> MixtureModel {
    MixtureModel::from_parts(
        weights,
        vec![vec![-2.0, 0.5], vec![1.5, -1.0], vec![0.0, 2.5]],
        vec![vec![1.0, 0.3, 0.3, 0.8], vec![0.5, -0.2, -0.2, 1.5], vec![2.0, 0.0, 0.0, 0.4]],
        Standardizer::identity(2),
    )
    .unwrap()
}

fn blobs(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let centers = [[0.0, 0.0], [12.0, 0.0], [0.0, 12.0]];
    (0..240)
        .map(|i| {
            let c = centers[i % 3];
            vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]
        })
        .collect()
}

proptest! {
    #[test]
    fn responsibilities_form_a_simplex(x in -50.0f64..50.0, y in -50.0f64..50.0) {
        let model = two_d_model(vec![0.2, 0.5, 0.3]);
        let gamma = model.responsibilities(&[x, y]).unwrap().gamma;
        prop_assert!(gamma.iter().all(|g| (0.0..=1.0).contains(g)));
        prop_assert!((gamma.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn shifting_weight_toward_the_denser_component_raises_density(
        x in -4.0f64..4.0, y in -4.0f64..4.0, t in 0.0f64..0.9, dt in 0.01f64..0.09,
    ) {
        let dense: Vec<f64> = (0..3)
            .map(|k| {
                let mut w = vec![1e-12; 3];
                w[k] = 1.0;
                two_d_model(w).log_density(&[x, y]).unwrap()
            })
            .collect();
        let hi = if dense[0] >= dense[1] { 0 } else { 1 };
        let lo = 1 - hi;
        let density = |share: f64| {
            let mut w = vec![0.0; 3];
            w[hi] = share;
            w[lo] = 1.0 - share;
            w[2] = 1e-300;
            two_d_model(w).log_density(&[x, y]).unwrap()
        };
        prop_assert!(density(t + dt) >= density(t) - 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn assignments_survive_increasing_affine_rescaling(
        seed in 0u64..1000, a0 in 0.001f64..1000.0, a1 in 0.001f64..1000.0, b0 in -1e4f64..1e4, b1 in -1e4f64..1e4,
    ) {
        let rows = blobs(seed);
        let mapped: Vec<Vec<f64>> = rows.iter().map(|r| vec![a0 * r[0] + b0, a1 * r[1] + b1]).collect();
        let prior = MixturePrior::default_for(2).with_k_max(6);
        let options = FitOptions::default().with_seed(seed);
        let m1 = fit(&rows, &prior, &options).unwrap();
        let m2 = fit(&mapped, &prior, &options).unwrap();
        prop_assert_eq!(m1.k_effective(), m2.k_effective());
        prop_assert_eq!(
            m1.assign_rows(&rows, Execution::Sequential).unwrap(),
            m2.assign_rows(&mapped, Execution::Sequential).unwrap()
        );
    }
}

#[test]
fn density_integrates_to_one() {
    let model = two_d_model(vec![0.2, 0.5, 0.3]);
    let h = 0.04;
    let mut total = 0.0;
    let steps = (24.0 / h) as i64;
    for i in 0..steps {
        for j in 0..steps {
            let x = -12.0 + (i as f64 + 0.5) * h;
            let y = -12.0 + (j as f64 + 0.5) * h;
            total += model.log_density(&[x, y]).unwrap().exp() * h * h;
        }
    }
    assert!((total - 1.0).abs() < 1e-4, "{total}");
}

#[test]
fn fitted_density_is_normalized_in_raw_units() {
    // strongly rescaled axes: the reported density must carry the Jacobian
    let rows: Vec<Vec<f64>> = blobs(3).iter().map(|r| vec![100.0 * r[0] + 7.0, 0.01 * r[1]]).collect();
    let model = fit(&rows, &MixturePrior::default_for(2).with_k_max(6), &FitOptions::default()).unwrap();
    let (nx, ny) = (600, 600);
    let (x0, x1, y0, y1) = (-800.0, 2000.0, -0.08, 0.2);
    let (hx, hy) = ((x1 - x0) / nx as f64, (y1 - y0) / ny as f64);
    let mut total = 0.0;
    for i in 0..nx {
        for j in 0..ny {
            let p = [x0 + (i as f64 + 0.5) * hx, y0 + (j as f64 + 0.5) * hy];
            total += model.log_density(&p).unwrap().exp() * hx * hy;
        }
    }
    assert!((total - 1.0).abs() < 1e-3, "{total}");
}

#[test]
fn elbo_never_decreases_on_random_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..10 {
        let rows: Vec<Vec<f64>> = (0..150).map(|_| (0..4).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let model = fit(&rows, &MixturePrior::default_for(4).with_k_max(8), &FitOptions::default().with_seed(seed)).unwrap();
        assert!(model.elbo_trace().windows(2).all(|w| w[1] >= w[0] - 1e-8), "seed {seed}");
        let total: f64 = model.weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
