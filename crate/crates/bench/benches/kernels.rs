//! Microbenchmarks for the kernels that dominate training time: masked
//! attention, RoIAlign, the toy encoder, and a full forward/backward step.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvaformer_core::encoder::{roi_align, roi_align_var, BoundingBox};
use mvaformer_core::model::{forward, init_params, CoopMode, ModelConfig, SublayerCombo};
use mvaformer_core::nn::{build_attention_mask, multi_head_attention, AttnVars, MaskKind};
use mvaformer_core::train::bce_loss;
use mvaformer_core::{Tape, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen::<f32>() - 0.5).collect()).unwrap()
}

fn bench_cfg() -> ModelConfig {
    ModelConfig {
        views: 2,
        channels: 32,
        layers: 1,
        heads: 4,
        classes: 8,
        mode: CoopMode::SvaDva,
        combo: SublayerCombo::ParallelSum,
        dropout: 0.0,
        patch: 8,
        ln_eps: 1e-5,
    }
}

fn attention_kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = bench_cfg();
    let params = init_params::<f32>(&cfg, 1).unwrap();
    let tokens = cfg.views * 49;
    let x = rand_tensor(&mut rng, vec![tokens, cfg.channels]);
    let sva = build_attention_mask::<f32>(MaskKind::Sva, cfg.views, 49);
    let dva = build_attention_mask::<f32>(MaskKind::Dva, cfg.views, 49);

    let mut group = c.benchmark_group("attention");
    for (name, mask) in [("sva", &sva), ("dva", &dva)] {
        group.bench_function(format!("mha_{name}_2x49x32"), |b| {
            b.iter(|| {
                let tape = Tape::new();
                let bound = params.bind(&tape);
                let vars = AttnVars::from_bound(&bound, "layer0.sva", cfg.heads).unwrap();
                let input = tape.leaf(&x);
                multi_head_attention(&input, &input, Some(mask), &vars, false).unwrap()
            })
        });
    }
    group.bench_function("masked_softmax_98x98", |b| {
        let logits = rand_tensor(&mut rng, vec![tokens, tokens]);
        b.iter(|| {
            let tape = Tape::new();
            tape.leaf(&logits)
                .masked_softmax_lastdim(Some(&sva.matrix))
                .unwrap()
        })
    });
    group.finish();
}

fn roi_kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let map = rand_tensor(&mut rng, vec![8, 8, 32]);
    let bbox = BoundingBox::new(0.12, 0.2, 0.81, 0.77).unwrap();

    let mut group = c.benchmark_group("roi_align");
    group.bench_function("plain_8x8x32", |b| {
        b.iter(|| roi_align(&map, &bbox, 7, 2).unwrap())
    });
    group.bench_function("taped_8x8x32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            roi_align_var(&tape.leaf(&map), &bbox, 7, 2).unwrap()
        })
    });
    group.finish();
}

fn end_to_end(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = bench_cfg();
    let params = init_params::<f32>(&cfg, 2).unwrap();
    let videos: Vec<Tensor<f32>> = (0..cfg.views)
        .map(|_| rand_tensor(&mut rng, vec![4, 32, 32, 3]))
        .collect();
    let boxes = vec![vec![
        Some(BoundingBox::new(0.1, 0.1, 0.9, 0.9).unwrap()),
        Some(BoundingBox::new(0.2, 0.15, 0.7, 0.8).unwrap()),
    ]];
    let targets = Tensor::<f32>::full(vec![cfg.classes], 1.0);

    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    group.bench_function("forward_2v_4f_32px", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let bound = params.bind(&tape);
            forward(&tape, &bound, &cfg, &videos, &boxes, false, None).unwrap()
        })
    });
    group.bench_function("forward_backward_2v_4f_32px", |b| {
        b.iter_batched(
            Tape::new,
            |tape| {
                let bound = params.bind(&tape);
                let out =
                    forward(&tape, &bound, &cfg, &videos, &boxes, false, None).unwrap();
                let loss = bce_loss(&out[0].probs, &targets).unwrap();
                tape.backward(&loss).unwrap();
            },
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

criterion_group!(benches, attention_kernels, roi_kernels, end_to_end);
criterion_main!(benches);
