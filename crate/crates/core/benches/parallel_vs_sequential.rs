use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use tsummary::dataset::{generate_synthetic, loso_fold_indices, Corpus, SyntheticConfig};
use tsummary::evaluate::{run_prepared, EvaluationConfig, Method, Prepared};
use tsummary::features::featurize;
use tsummary::par::Execution;
use tsummary::vbgmm::fit;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn corpus(subjects: usize) -> Corpus {
    let config = SyntheticConfig {
        subjects,
        bouts_per_class: 2,
        ..SyntheticConfig::default()
    };
    generate_synthetic(&config, 1).unwrap()
}

fn bench_featurize(c: &mut Criterion) {
    let corpus = corpus(10);
    let mut group = c.benchmark_group("featurize");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| featurize(black_box(&corpus), 12, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_assign(c: &mut Criterion) {
    let corpus = corpus(10);
    let config = EvaluationConfig::default();
    let table = featurize(&corpus, 12, Execution::Sequential).unwrap();
    let rows: Vec<Vec<f64>> = table.bouts.iter().flat_map(|b| b.rows().map(<[f64]>::to_vec)).collect();
    let model = fit(&rows, &config.gmm.prior(table.dim), &config.gmm.options(1)).unwrap();
    let mut group = c.benchmark_group("assign_rows");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| model.assign_rows(black_box(&rows), exec).unwrap())
        });
    }
    group.finish();
}

fn bench_loso(c: &mut Criterion) {
    let corpus = corpus(4);
    let mut group = c.benchmark_group("loso_cluster_summary");
    group.sample_size(10);
    for (name, exec) in MODES {
        let mut config = EvaluationConfig {
            execution: exec,
            ..EvaluationConfig::default()
        };
        config.mlp.epochs = 50;
        let prep = Prepared::new(&corpus, &config).unwrap();
        let folds = loso_fold_indices(&corpus).unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_prepared(&prep, &folds, Method::ClusterSummary, &config).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_featurize, bench_assign, bench_loso);
criterion_main!(benches);
