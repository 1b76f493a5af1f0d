use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use diffrec_bench::{diffusion_head, encoder, gaussian, random_scores, user_streams};
use diffrec_core::autograd::Tape;
use diffrec_core::nn::causal_mask;
use diffrec_core::retrieval::rank_topk;

fn encoder_step(c: &mut Criterion) {
    let (params, layer) = encoder(32, 2);
    let mut group = c.benchmark_group("encoder_forward_backward");
    for len in [32usize, 128] {
        let x = gaussian(len, 32, 1);
        let mask = causal_mask(len);
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let p = params.bind(&mut tape);
                let xv = tape.leaf(x.clone());
                let h = layer.forward(&mut tape, &p, xv, Some(&mask));
                let loss = tape.sum(h);
                black_box(tape.backward(loss));
            })
        });
    }
    group.finish();
}

fn guided_sampling(c: &mut Criterion) {
    let head = diffusion_head(16, 32);
    let cond = gaussian(64, 32, 2);
    c.bench_function("cfg_sample_64_users_20_steps", |b| {
        b.iter(|| {
            let mut rngs = user_streams(64);
            black_box(head.sample(&cond, 2.0, &mut rngs).unwrap())
        })
    });
}

fn ranking(c: &mut Criterion) {
    let mut group = c.benchmark_group("rank_top20");
    for m in [1_000usize, 100_000] {
        let (scores, exclude) = random_scores(m, 3);
        group.bench_with_input(BenchmarkId::from_parameter(m), &m, |b, _| b.iter(|| black_box(rank_topk(&scores, 20, &exclude))));
    }
    group.finish();
}

criterion_group!(benches, encoder_step, guided_sampling, ranking);
criterion_main!(benches);
