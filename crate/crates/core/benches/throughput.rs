//! Single worker thread against the default pool, for the similarity scan
//! and for a small end-to-end evaluation. Built with `--no-default-features`
//! both variants run the sequential path.

use std::hint::black_box;

use bend_core::augment::TemplateAugmenter;
use bend_core::dataset::{split_reference_target, synth_generate, synth_queries, SplitSpec, SynthSpec};
use bend_core::index::{retrieve_top_k, ReferenceIndex, RelevantCount};
use bend_core::par;
use bend_core::pipeline::{resolve_all, uniform_prior, Evaluation, QueryResolver, RunConfig};
use bend_core::random::{random_unit, seeded_rng};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const POOLS: [(&str, Option<usize>); 2] = [("1-thread", Some(1)), ("default", None)];

fn scan(c: &mut Criterion) {
    let spec = SynthSpec::aligned(512, 1, 0.05, 0.8, 10, 1000);
    let table = synth_generate(&spec).unwrap();
    let query = random_unit(&mut seeded_rng(7), 512);
    let mut group = c.benchmark_group("scan_20k_x_512");
    for (name, jobs) in POOLS {
        group.bench_function(BenchmarkId::new("all_similarities", name), |b| {
            par::with_jobs(jobs, || b.iter(|| black_box(table.all_similarities(black_box(query.as_slice())))))
        });
        group.bench_function(BenchmarkId::new("top_500", name), |b| {
            par::with_jobs(jobs, || b.iter(|| black_box(retrieve_top_k(&table, &query, 500).unwrap())))
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let spec = SynthSpec::aligned(64, 6, 0.05, 0.8, 4, 250);
    let table = synth_generate(&spec).unwrap();
    let records = synth_queries(&spec).unwrap();
    let split = split_reference_target(&table, &SplitSpec { seed: 6, ..SplitSpec::default() }).unwrap();
    let space = spec.attribute.clone();
    let prior = uniform_prior(&space).unwrap();
    let index = ReferenceIndex::build(split.reference.clone()).unwrap();
    let resolver = QueryResolver::new(&space, table.dim(), None, &TemplateAugmenter);
    let queries = resolve_all(&resolver, &records);

    let mut group = c.benchmark_group("evaluate_4_queries");
    group.sample_size(10);
    for (name, jobs) in POOLS {
        let cfg = RunConfig {
            count: RelevantCount::Fixed(50),
            k: 200,
            seed: 6,
            jobs,
            ..RunConfig::default()
        };
        group.bench_function(name, |b| {
            b.iter(|| {
                Evaluation {
                    index: &index,
                    target: &split.target,
                    folds: &split.folds,
                    prior: &prior,
                    config: &cfg,
                }
                .run(&queries)
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, scan, evaluation);
criterion_main!(benches);
