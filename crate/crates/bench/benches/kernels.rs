use std::hint::black_box;

use capret_bench::{backbones, batch, bridge, caption, image, index, matrix};
use capret_core::captioning::{cider_d, corpus_bleu};
use capret_core::objectives::info_nce_both_with_grads;
use capret_core::retrieval::search;
use capret_core::training::bridge_loss;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;

fn contrastive(c: &mut Criterion) {
    let mut group = c.benchmark_group("info_nce_both_with_grads");
    for n in [8, 64, 256] {
        let u = matrix(n, 32, 2);
        let v = matrix(n, 32, 3);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| info_nce_both_with_grads(black_box(&u), black_box(&v), 0.07f32.ln(), 1.0).unwrap())
        });
    }
    group.finish();
}

fn retrieval(c: &mut Criterion) {
    let mut group = c.benchmark_group("search_top10");
    for n in [100, 1_000, 10_000] {
        let idx = index(n);
        let q = matrix(1, 32, 9).row(0).to_owned();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| search(black_box(&idx), "q", q.view(), 10).unwrap())
        });
    }
    group.finish();
}

fn encoders(c: &mut Criterion) {
    let bb = backbones();
    let img = image(0);
    c.bench_function("vision_encode_one", |b| b.iter(|| bb.encode_image(black_box(&img))));
    let br = bridge(&bb);
    let prefix = Array2::<f32>::zeros((0, 128));
    let tokens = caption(12, 1);
    c.bench_function("decoder_hidden_at_ret", |b| {
        b.iter(|| bb.hidden_at_ret(&prefix, black_box(&tokens), br.ret()).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let bb = backbones();
    let br = bridge(&bb);
    let mut group = c.benchmark_group("bridge_loss_with_grads");
    group.sample_size(10);
    for pairs in [8, 32] {
        let b32 = batch(&bb, pairs);
        group.bench_with_input(BenchmarkId::from_parameter(pairs), &pairs, |b, _| {
            b.iter(|| bridge_loss(&bb, &br, black_box(&b32), 1.0, 1.0, true).unwrap())
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let words = [
        "a", "red", "square", "on", "the", "water", "near", "two", "tanks", "runway", "field",
    ];
    let sentence = |i: usize, len: usize| {
        (0..len)
            .map(|j| words[(i * 7 + j * 3) % words.len()])
            .collect::<Vec<_>>()
            .join(" ")
    };
    let hyps: Vec<String> = (0..200).map(|i| sentence(i, 9)).collect();
    let refs: Vec<Vec<String>> = (0..200)
        .map(|i| (0..5).map(|r| sentence(i + r, 10)).collect())
        .collect();
    c.bench_function("corpus_bleu4_200", |b| {
        b.iter(|| corpus_bleu(black_box(&hyps), &refs, 4).unwrap())
    });
    c.bench_function("cider_d_200", |b| b.iter(|| cider_d(black_box(&hyps), &refs).unwrap()));
}

criterion_group!(benches, contrastive, retrieval, encoders, training, metrics);
criterion_main!(benches);
