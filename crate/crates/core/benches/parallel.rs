use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use retr::data::{leave_one_out_split, synth_generate, SyntheticSpec, WindowMode, DEFAULT_MIN_COUNT};
use retr::eval::{evaluate, EvalConfig};
use retr::model::{ModelConfig, RetrModel};
use retr::parallel::Parallelism;
use retr::train::{batch_gradients, sample_negatives};

const MODES: [Parallelism; 2] = [Parallelism::Sequential, Parallelism::Rayon];

fn setup() -> (RetrModel<f32>, retr::data::SplitDataset, retr::data::InteractionLog) {
    let spec = SyntheticSpec {
        users: 400,
        ..SyntheticSpec::default()
    };
    let log = synth_generate(&spec).unwrap().to_log(DEFAULT_MIN_COUNT).unwrap();
    let split = leave_one_out_split(&log, 50, WindowMode::MostRecent);
    let cfg = ModelConfig {
        dim: 64,
        heads: 4,
        blocks: 2,
        max_len: 50,
        num_items: log.num_items(),
        ..ModelConfig::default()
    };
    (RetrModel::new(cfg, 0).unwrap(), split, log)
}

fn bench(c: &mut Criterion) {
    let (model, split, log) = setup();
    let batch: Vec<_> = split.train.iter().take(128).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let negatives: Vec<_> = batch.iter().map(|s| sample_negatives(s, log.num_items(), &mut rng)).collect();
    let keys: Vec<u64> = (0..batch.len() as u64).collect();

    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for mode in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter(|| batch_gradients(&model, &batch, &negatives, (0, 0), &keys, mode).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for mode in MODES {
        let cfg = EvalConfig {
            parallelism: mode,
            ..EvalConfig::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &cfg, |b, cfg| {
            b.iter(|| evaluate(&model, &split.test, &log, cfg, None).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
