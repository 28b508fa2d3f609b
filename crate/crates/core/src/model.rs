//! The full grounding network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion_grounding::{predict, split_prediction, Fusion, GroundingHead, PredictionSet, Selection, SLOT_WIDTH};
use crate::geometry::{num_predictions, GridSpec, NUM_RESOLUTIONS};
use crate::image_encoder::{Backbone, BackboneConfig, Projection};
use crate::nn::{Ctx, ParamStore, Var};
use crate::tensor::Tensor;
use crate::text_encoder::{TextEncoder, DEFAULT_MAX_QUERY_LEN};
use crate::vt_attention::diff::{attend, Attended};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub vocab_size: usize,
    /// Word embedding size `E`.
    pub embed_dim: usize,
    /// LSTM hidden size `L` per direction.
    pub hidden: usize,
    /// Shared visual/text dimension `D`.
    pub dim: usize,
    /// Fused dimension `D′`.
    pub fused_dim: usize,
    /// ReLU after the fusion convolution.
    pub fusion_relu: bool,
    pub max_query_len: usize,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            backbone: BackboneConfig::tiny(128),
            vocab_size,
            embed_dim: 32,
            hidden: 32,
            dim: 64,
            fused_dim: 64,
            fusion_relu: true,
            max_query_len: DEFAULT_MAX_QUERY_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("dim", self.dim),
            ("fused_dim", self.fused_dim),
            ("max_query_len", self.max_query_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocabulary needs at least the padding and unknown entries".into()));
        }
        Ok(())
    }

    pub fn specs(&self) -> Result<[GridSpec; NUM_RESOLUTIONS]> {
        GridSpec::pyramid(self.backbone.input_size)
    }
}

#[derive(Debug, Clone)]
pub struct AttnGrounder {
    pub cfg: ModelConfig,
    pub specs: [GridSpec; NUM_RESOLUTIONS],
    pub backbone: Backbone,
    pub projections: Vec<Projection>,
    pub text: TextEncoder,
    pub fusions: Vec<Fusion>,
    pub heads: Vec<GroundingHead>,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `N × m × 5`.
    pub raw: Var,
    /// `N × m × 4`.
    pub offsets: Var,
    /// `N × m`.
    pub logits: Var,
    pub attention: [Attended; NUM_RESOLUTIONS],
}

/// Eval-mode result for one sample.
#[derive(Debug, Clone)]
pub struct Inference {
    pub prediction: PredictionSet,
    pub selection: Selection,
    /// Attention maps, each `rows × cols`.
    pub beta: [Tensor; NUM_RESOLUTIONS],
}

impl AttnGrounder {
    /// `embeddings` is the initial `V × E` word table.
    pub fn new(cfg: ModelConfig, embeddings: Tensor, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if embeddings.shape() != [cfg.vocab_size, cfg.embed_dim] {
            return Err(Error::Shape(format!(
                "embedding table {:?}, config expects [{}, {}]",
                embeddings.shape(),
                cfg.vocab_size,
                cfg.embed_dim
            )));
        }
        let specs = cfg.specs()?;
        let backbone = Backbone::new(&cfg.backbone, store, rng)?;
        let channels = cfg.backbone.out_channels();
        let projections = (0..NUM_RESOLUTIONS)
            .map(|k| Projection::new(store, &format!("proj{k}"), specs[k], channels[k], cfg.dim, rng))
            .collect();
        let text = TextEncoder::new(store, embeddings, cfg.hidden, cfg.dim, rng);
        let fusions = (0..NUM_RESOLUTIONS)
            .map(|k| Fusion::new(store, &format!("fuse{k}"), cfg.dim, cfg.fused_dim, cfg.fusion_relu, rng))
            .collect();
        let heads = (0..NUM_RESOLUTIONS)
            .map(|k| GroundingHead::new(store, &format!("head{k}"), cfg.fused_dim, rng))
            .collect();
        Ok(Self {
            cfg,
            specs,
            backbone,
            projections,
            text,
            fusions,
            heads,
        })
    }

    pub fn num_predictions(&self) -> usize {
        num_predictions(&self.specs)
    }

    /// `images`: `N × 3 × S × S` in `[0, 1]`; one id sequence per image.
    pub fn forward(&self, ctx: &mut Ctx, images: &Tensor, queries: &[Vec<usize>]) -> Result<ForwardOutput> {
        if images.rank() != 4 || images.dim(0) != queries.len() {
            return Err(Error::Shape(format!(
                "{} queries for image batch {:?}",
                queries.len(),
                images.shape()
            )));
        }
        let x = ctx.constant(images.clone());
        let raw = self.backbone.forward(ctx, x)?;
        let (words, lengths) = self.text.forward(ctx, queries)?;
        let mut attention = Vec::with_capacity(NUM_RESOLUTIONS);
        let mut heads = Vec::with_capacity(NUM_RESOLUTIONS);
        for (k, &r) in raw.iter().enumerate() {
            let grid = self.projections[k].forward(ctx, r)?;
            let att = attend(&mut ctx.graph, grid, words.features, &lengths);
            let fused = self.fusions[k].forward(ctx, grid, att.text, att.attended)?;
            heads.push(self.heads[k].forward(ctx, fused));
            attention.push(att);
        }
        let raw = predict(&mut ctx.graph, &heads);
        let (offsets, logits) = split_prediction(&mut ctx.graph, raw);
        Ok(ForwardOutput {
            raw,
            offsets,
            logits,
            attention: [attention[0], attention[1], attention[2]],
        })
    }

    /// Eval-mode forward and box selection for a batch.
    pub fn infer(&self, store: &ParamStore, images: &Tensor, queries: &[Vec<usize>]) -> Result<Vec<Inference>> {
        let mut ctx = Ctx::new(store, false);
        let out = self.forward(&mut ctx, images, queries)?;
        let m = self.num_predictions();
        let raw = ctx.value(out.raw).data();
        (0..queries.len())
            .map(|n| {
                let prediction = PredictionSet::from_raw(&raw[n * m * SLOT_WIDTH..(n + 1) * m * SLOT_WIDTH], &self.specs)?;
                let selection = prediction.select_box(&self.specs)?;
                let beta = std::array::from_fn(|k| {
                    let spec = &self.specs[k];
                    let b = ctx.value(out.attention[k].beta).data();
                    Tensor::new(&[spec.rows, spec.cols], b[n * spec.cells()..(n + 1) * spec.cells()].to_vec())
                });
                Ok(Inference {
                    prediction,
                    selection,
                    beta,
                })
            })
            .collect()
    }
}

/// Total trainable scalar parameters.
pub fn count_params(store: &ParamStore) -> usize {
    store.count_trainable()
}
