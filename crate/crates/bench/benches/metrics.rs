use criterion::{criterion_group, criterion_main, Criterion};
use privad::evaluation::{average_precision, cmap, roc_auc};
use privad_bench::scored;
use std::hint::black_box;

fn ranking(c: &mut Criterion) {
    let (s, y) = scored(100_000, 1);
    c.bench_function("roc_auc 100k", |b| b.iter(|| black_box(roc_auc(&s, &y).unwrap())));
    c.bench_function("average_precision 100k", |b| b.iter(|| black_box(average_precision(&s, &y).unwrap())));

    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..7).map(|k| scored(2000, 10 + k)).collect();
    let scores: Vec<Vec<f64>> = (0..2000).map(|i| rows.iter().map(|r| r.0[i]).collect()).collect();
    let targets: Vec<Vec<bool>> = (0..2000).map(|i| rows.iter().map(|r| r.1[i]).collect()).collect();
    c.bench_function("cmap 2000x7", |b| b.iter(|| black_box(cmap(&scores, &targets).unwrap())));
}

criterion_group!(benches, ranking);
criterion_main!(benches);
