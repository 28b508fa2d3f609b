//! Training loop, evaluation metrics, and checkpoints.

mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorEntry, CHECKPOINT_VERSION};

use crate::data::{augment, flip_query, image_to_chw, letterbox, AugmentConfig, LetterboxTransform, Sample};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, GridSpec, NUM_RESOLUTIONS};
use crate::image_encoder::BackboneConfig;
use crate::losses::{objective, GroundingTarget, LossBreakdown, DEFAULT_LAMBDA};
use crate::model::{count_params, AttnGrounder, ModelConfig};
use crate::nn::layers::apply_bn_updates;
use crate::nn::optim::{Adam, PolyDecay};
use crate::nn::{Ctx, ParamGroup, ParamStore};
use crate::tensor::Tensor;
use crate::text_encoder::{load_glove_or_warn, Vocabulary, DEFAULT_MAX_QUERY_LEN};

pub const BN_MOMENTUM: f64 = 0.1;
const WARMUP_SAMPLES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub backbone_lr_scale: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub lambda: f64,
    pub seed: u64,
    pub augment: bool,
    /// Used when `augment` is on.
    #[serde(default)]
    pub augmentation: AugmentConfig,
    pub backbone: BackboneConfig,
    pub embed_dim: usize,
    pub hidden: usize,
    pub dim: usize,
    pub fused_dim: usize,
    pub fusion_relu: bool,
    pub max_query_len: usize,
    pub glove_path: Option<PathBuf>,
    /// Validation interval in epochs; 0 disables validation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            backbone_lr_scale: 0.1,
            batch_size: 8,
            epochs: 10,
            max_steps: None,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            augment: true,
            augmentation: AugmentConfig::default(),
            backbone: BackboneConfig::tiny(416),
            embed_dim: 300,
            hidden: 128,
            dim: 256,
            fused_dim: 256,
            fusion_relu: true,
            max_query_len: DEFAULT_MAX_QUERY_LEN,
            glove_path: None,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    /// Small, CPU-friendly settings trained from scratch.
    pub fn desk() -> Self {
        let m = ModelConfig::desk(2);
        Self {
            base_lr: 1e-3,
            backbone_lr_scale: 1.0,
            epochs: 12,
            // Flip and colour jitter only: shifting or scaling a synthetic
            // scene can push a shape out of frame and change which shape an
            // ordinal query refers to.
            augment: true,
            augmentation: AugmentConfig {
                max_shift: 0.0,
                max_scale: 0.0,
                ..AugmentConfig::default()
            },
            backbone: m.backbone,
            embed_dim: m.embed_dim,
            hidden: m.hidden,
            dim: m.dim,
            fused_dim: m.fused_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.backbone_lr_scale >= 0.0 && self.backbone_lr_scale.is_finite()) {
            return Err(Error::Config("backbone_lr_scale must be non-negative".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::Config("epochs must be positive".into()));
        }
        self.model_config(2).validate()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            vocab_size,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            dim: self.dim,
            fused_dim: self.fused_dim,
            fusion_relu: self.fusion_relu,
            max_query_len: self.max_query_len,
        }
    }
}

/// A sample resized to the network input, with everything the loss needs.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    /// Letterboxed copy; its `gt` is in network-input pixels.
    pub input: Sample,
    pub transform: LetterboxTransform,
    pub original_gt: BBox,
}

pub fn prepare(samples: &[Sample], input_size: usize) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            s.validate()?;
            let (image, gt, transform) = letterbox(&s.image, &s.gt, input_size as u32);
            Ok(PreparedSample {
                input: Sample {
                    id: s.id.clone(),
                    image,
                    query: s.query.clone(),
                    gt,
                },
                transform,
                original_gt: s.gt,
            })
        })
        .collect()
}

/// Vocabulary over training queries and their mirrored forms.
pub fn build_vocabulary(samples: &[Sample]) -> Result<Vocabulary> {
    let mut queries: Vec<String> = samples.iter().map(|s| s.query.clone()).collect();
    queries.extend(samples.iter().map(|s| flip_query(&s.query.to_lowercase())));
    Vocabulary::from_queries(queries.iter().map(String::as_str))
}

struct Batch {
    images: Tensor,
    ids: Vec<Vec<usize>>,
    targets: Vec<GroundingTarget>,
    sample_ids: Vec<String>,
}

fn make_batch(items: &[Sample], vocab: &Vocabulary, specs: &[GridSpec; NUM_RESOLUTIONS], size: usize, max_len: usize) -> Result<Batch> {
    let mut data = Vec::with_capacity(items.len() * 3 * size * size);
    let mut ids = Vec::with_capacity(items.len());
    let mut targets = Vec::with_capacity(items.len());
    for s in items {
        data.extend(image_to_chw(&s.image));
        ids.push(vocab.encode_text(&s.query, max_len)?);
        targets.push(GroundingTarget::build(&s.gt, specs)?);
    }
    Ok(Batch {
        images: Tensor::new(&[items.len(), 3, size, size], data),
        ids,
        targets,
        sample_ids: items.iter().map(|s| s.id.clone()).collect(),
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_ap50: Option<f64>,
}

#[derive(Debug, Default)]
pub struct TrainOptions {
    /// Receives `last.ckpt`, `best.ckpt` and `train_log.jsonl`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Highest validation AP50, or the final state without validation.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<LogRecord>,
}

/// Trains from scratch (or from `opts.resume`) and returns the best and
/// final checkpoints.
pub fn train(cfg: &TrainConfig, train_set: &[Sample], val_set: &[Sample], opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let size = cfg.backbone.input_size;
    let specs = GridSpec::pyramid(size)?;

    let (model, mut store, mut adam, vocab, start_step, mut best_ap50) = match &opts.resume {
        Some(ck) => {
            if ck.model != cfg.model_config(ck.vocab.len()) {
                return Err(Error::Incompatible("resume checkpoint was trained with a different model config".into()));
            }
            let (model, store) = ck.restore()?;
            let adam = ck.restore_adam(&store)?;
            (model, store, adam, ck.vocab.clone(), ck.step, ck.best_ap50)
        }
        None => {
            let vocab = build_vocabulary(train_set)?;
            let glove = load_glove_or_warn(cfg.glove_path.as_deref(), &vocab)?;
            let table = vocab.initial_embeddings(cfg.embed_dim, glove.as_ref(), cfg.seed)?;
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let model = AttnGrounder::new(cfg.model_config(vocab.len()), table, &mut store, &mut rng)?;
            let adam = Adam::new(&store);
            (model, store, adam, vocab, 0, None)
        }
    };

    let prepared = prepare(train_set, size)?;
    let steps_per_epoch = prepared.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_steps.unwrap_or(usize::MAX).min(cfg.epochs.max(1) * steps_per_epoch);
    let total_steps = if cfg.epochs == 0 { cfg.max_steps.unwrap_or(0) } else { total_steps };
    let schedule = PolyDecay::linear(cfg.base_lr, total_steps);
    let aug = cfg.augmentation;

    let mut log = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let f = std::fs::OpenOptions::new().create(true).append(true).open(dir.join("train_log.jsonl"))?;
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };
    let mut history = Vec::new();
    let mcfg = model.cfg.clone();
    let mut best: Option<Checkpoint> = None;
    let mut step = start_step;

    while step < total_steps {
        let epoch = step / steps_per_epoch;
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let first = step % steps_per_epoch;
        for b in first..steps_per_epoch {
            if step >= total_steps {
                break;
            }
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(order.len())];
            let items: Vec<Sample> = idx
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
                        rng.set_stream(((epoch as u64) << 32) | i as u64);
                        augment(&prepared[i].input, &aug, &mut rng)
                    } else {
                        prepared[i].input.clone()
                    }
                })
                .collect();
            let batch = make_batch(&items, &vocab, &specs, size, cfg.max_query_len)?;
            let lr = schedule.lr(step);

            let (breakdown, grads, bn) = {
                let mut ctx = Ctx::new(&store, true);
                let out = model.forward(&mut ctx, &batch.images, &batch.ids)?;
                let att = out.attention.map(|a| a.logits);
                let loss = objective(&mut ctx.graph, att, out.offsets, out.logits, &batch.targets, cfg.lambda);
                let breakdown = loss.breakdown(&ctx.graph, cfg.lambda);
                if !breakdown.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        batch_ids: batch.sample_ids,
                    });
                }
                let grads = ctx.graph.backward(loss.total);
                (breakdown, grads, std::mem::take(&mut ctx.bn_updates))
            };
            store.zero_grad();
            store.accumulate(&grads);
            drop(grads);
            apply_bn_updates(&mut store, &bn, BN_MOMENTUM);
            let scale = cfg.backbone_lr_scale;
            adam.step(&mut store, |g| match g {
                ParamGroup::Backbone => lr * scale,
                ParamGroup::Head => lr,
            });
            step += 1;

            let end_of_epoch = b + 1 == steps_per_epoch || step == total_steps;
            let validate = end_of_epoch
                && cfg.eval_every > 0
                && !val_set.is_empty()
                && ((epoch + 1) % cfg.eval_every == 0 || step == total_steps);
            let val_ap50 = if validate {
                Some(evaluate(&model, &store, &vocab, val_set, &EvalOptions::default())?.ap50)
            } else {
                None
            };
            let rec = LogRecord {
                step,
                epoch,
                lr,
                loss: breakdown,
                val_ap50,
            };
            log::debug!("step {step} loss {:.4}", rec.loss.total);
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
            }
            history.push(rec);

            if let Some(ap) = val_ap50 {
                log::info!("epoch {epoch}: val AP50 {ap:.2}");
                if best_ap50.is_none_or(|b| ap > b) {
                    best_ap50 = Some(ap);
                    let ck = Checkpoint::capture(&mcfg, cfg, &vocab, &store, &adam, step, best_ap50);
                    if let Some(dir) = &opts.out_dir {
                        ck.save(&dir.join("best.ckpt"))?;
                    }
                    best = Some(ck);
                }
            }
            if end_of_epoch {
                if let Some(dir) = &opts.out_dir {
                    Checkpoint::capture(&mcfg, cfg, &vocab, &store, &adam, step, best_ap50).save(&dir.join("last.ckpt"))?;
                }
            }
        }
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
    }

    let last = Checkpoint::capture(&mcfg, cfg, &vocab, &store, &adam, step, best_ap50);
    if let Some(dir) = &opts.out_dir {
        last.save(&dir.join("last.ckpt"))?;
        if best.is_none() {
            last.save(&dir.join("best.ckpt"))?;
        }
    }
    Ok(TrainOutcome {
        best: best.unwrap_or_else(|| last.clone()),
        last,
        history,
    })
}

/// Per-sample evaluation record, boxes in original pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub predicted: BBox,
    pub gt: BBox,
    pub iou: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap50: f64,
    pub mean_inference_ms: f64,
    pub param_count: usize,
    pub records: Vec<EvalRecord>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// Times single-sample forward + selection after a warm-up.
    pub timing: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 16,
            timing: false,
        }
    }
}

/// Percentage of IoUs strictly above one half.
pub fn ap50(ious: &[f64]) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    100.0 * ious.iter().filter(|&&v| v > 0.5).count() as f64 / ious.len() as f64
}

pub fn evaluate(model: &AttnGrounder, store: &ParamStore, vocab: &Vocabulary, samples: &[Sample], opts: &EvalOptions) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let size = model.cfg.backbone.input_size;
    let prepared = prepare(samples, size)?;
    let max_len = model.cfg.max_query_len;
    let encode = |p: &[PreparedSample]| -> Result<(Tensor, Vec<Vec<usize>>)> {
        let mut data = Vec::with_capacity(p.len() * 3 * size * size);
        let mut ids = Vec::with_capacity(p.len());
        for s in p {
            data.extend(image_to_chw(&s.input.image));
            ids.push(vocab.encode_text(&s.input.query, max_len)?);
        }
        Ok((Tensor::new(&[p.len(), 3, size, size], data), ids))
    };

    let mut records = Vec::with_capacity(prepared.len());
    let mut elapsed = 0.0;
    let batch = if opts.timing { 1 } else { opts.batch_size.max(1) };
    if opts.timing {
        for p in prepared.iter().take(WARMUP_SAMPLES) {
            let (x, ids) = encode(std::slice::from_ref(p))?;
            model.infer(store, &x, &ids)?;
        }
    }
    for chunk in prepared.chunks(batch) {
        let (x, ids) = encode(chunk)?;
        let t0 = Instant::now();
        let out = model.infer(store, &x, &ids)?;
        elapsed += t0.elapsed().as_secs_f64();
        for (p, inf) in chunk.iter().zip(out) {
            let predicted = p.transform.inverse(&inf.selection.bbox);
            records.push(EvalRecord {
                id: p.input.id.clone(),
                predicted,
                gt: p.original_gt,
                iou: iou(&predicted, &p.original_gt),
                confidence: inf.selection.confidence,
            });
        }
    }
    let ious: Vec<f64> = records.iter().map(|r| r.iou).collect();
    Ok(EvalReport {
        ap50: ap50(&ious),
        mean_inference_ms: 1000.0 * elapsed / records.len() as f64,
        param_count: count_params(store),
        records,
    })
}

/// Mean attention inside the ground-truth cells minus mean attention
/// outside, averaged over resolutions and samples.
pub fn attention_margin(model: &AttnGrounder, store: &ParamStore, vocab: &Vocabulary, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let size = model.cfg.backbone.input_size;
    let prepared = prepare(samples, size)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in prepared.chunks(16) {
        let mut data = Vec::new();
        let mut ids = Vec::new();
        for p in chunk {
            data.extend(image_to_chw(&p.input.image));
            ids.push(vocab.encode_text(&p.input.query, model.cfg.max_query_len)?);
        }
        let out = model.infer(store, &Tensor::new(&[chunk.len(), 3, size, size], data), &ids)?;
        for (p, inf) in chunk.iter().zip(out) {
            for (k, spec) in model.specs.iter().enumerate() {
                let mask = crate::geometry::rasterize_mask(&p.input.gt, spec);
                let (mut inside, mut outside) = ((0.0, 0usize), (0.0, 0usize));
                for (b, &m) in inf.beta[k].data().iter().zip(&mask.values) {
                    let slot = if m == 1 { &mut inside } else { &mut outside };
                    slot.0 += b;
                    slot.1 += 1;
                }
                if inside.1 > 0 && outside.1 > 0 {
                    total += inside.0 / inside.1 as f64 - outside.0 / outside.1 as f64;
                    count += 1;
                }
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Loads the model, parameters and vocabulary stored in a checkpoint file.
pub fn load_model(path: &Path) -> Result<(AttnGrounder, ParamStore, Vocabulary)> {
    let ck = load_checkpoint(path)?;
    let (model, store) = ck.restore()?;
    Ok((model, store, ck.vocab))
}
