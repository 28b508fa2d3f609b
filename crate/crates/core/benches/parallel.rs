//! Batch forward and forward+backward with the rayon path against the
//! in-order fallback. Build with `--no-default-features` to drop rayon
//! entirely; both variants then measure the sequential path.

use std::time::Duration;

use attngrounder::data::{generate_synthetic, image_to_chw, letterbox, SyntheticConfig};
use attngrounder::exec;
use attngrounder::losses::{objective, GroundingTarget, DEFAULT_LAMBDA};
use attngrounder::nn::{Ctx, ParamStore};
use attngrounder::text_encoder::Vocabulary;
use attngrounder::{AttnGrounder, ModelConfig, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BATCH: usize = 8;

struct Setup {
    model: AttnGrounder,
    store: ParamStore,
    images: Tensor,
    ids: Vec<Vec<usize>>,
    targets: Vec<GroundingTarget>,
}

fn setup() -> Setup {
    let samples: Vec<_> = generate_synthetic(&SyntheticConfig::default(), 7, BATCH)
        .unwrap()
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    let vocab = Vocabulary::from_queries(samples.iter().map(|s| s.query.as_str())).unwrap();
    let cfg = ModelConfig::desk(vocab.len());
    let size = cfg.backbone.input_size;
    let table = vocab.initial_embeddings(cfg.embed_dim, None, 0).unwrap();
    let mut store = ParamStore::new();
    let model = AttnGrounder::new(cfg, table, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut data = Vec::new();
    let mut targets = Vec::new();
    for s in &samples {
        let (img, gt, _) = letterbox(&s.image, &s.gt, size as u32);
        data.extend(image_to_chw(&img));
        targets.push(GroundingTarget::build(&gt, &model.specs).unwrap());
    }
    let ids = samples.iter().map(|s| vocab.encode_text(&s.query, 40).unwrap()).collect();
    Setup {
        model,
        store,
        images: Tensor::new(&[BATCH, 3, size, size], data),
        ids,
        targets,
    }
}

fn bench(c: &mut Criterion) {
    let s = setup();
    let mut group = c.benchmark_group("desk_batch8");
    group.sample_size(10).measurement_time(Duration::from_secs(10));
    for (label, sequential) in [("parallel", false), ("sequential", true)] {
        exec::set_sequential(sequential);
        group.bench_function(BenchmarkId::new("infer", label), |b| {
            b.iter(|| s.model.infer(&s.store, &s.images, &s.ids).unwrap())
        });
        group.bench_function(BenchmarkId::new("train_step", label), |b| {
            b.iter(|| {
                let mut ctx = Ctx::new(&s.store, true);
                let out = s.model.forward(&mut ctx, &s.images, &s.ids).unwrap();
                let att = out.attention.map(|a| a.logits);
                let loss = objective(&mut ctx.graph, att, out.offsets, out.logits, &s.targets, DEFAULT_LAMBDA);
                ctx.graph.backward(loss.total)
            })
        });
    }
    exec::set_sequential(false);
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
