//! Three-scale convolutional feature pyramid and the projection of each
//! scale (plus location features) into the shared dimension `D`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{spatial_coord_features, GridSpec, NUM_RESOLUTIONS};
use crate::nn::layers::{Activation, BatchNorm, ConvBn, Linear};
use crate::nn::{ops, Ctx, ParamGroup, ParamStore, Var};
use crate::tensor::Tensor;

const LEAKY: Activation = Activation::Leaky(0.1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackbonePreset {
    /// Five strided 3×3 stages with a light top-down path. CPU-friendly.
    Tiny,
    /// Darknet-53 residual topology with a YOLOv3-style top-down neck.
    Darknet53,
}

impl std::str::FromStr for BackbonePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "darknet53" | "darknet53-like" => Ok(Self::Darknet53),
            other => Err(Error::Config(format!("unknown backbone preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub preset: BackbonePreset,
    /// Channel width of each stage: 5 entries for `tiny`, 6 for `darknet53`.
    pub widths: Vec<usize>,
    pub input_size: usize,
}

impl BackboneConfig {
    pub fn tiny(input_size: usize) -> Self {
        Self {
            preset: BackbonePreset::Tiny,
            widths: vec![16, 32, 64, 128, 128],
            input_size,
        }
    }

    /// Full-width Darknet-53 (32 … 1024 channels).
    pub fn darknet53(input_size: usize) -> Self {
        Self {
            preset: BackbonePreset::Darknet53,
            widths: vec![32, 64, 128, 256, 512, 1024],
            input_size,
        }
    }

    pub fn with_widths(mut self, widths: Vec<usize>) -> Self {
        self.widths = widths;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let want = match self.preset {
            BackbonePreset::Tiny => 5,
            BackbonePreset::Darknet53 => 6,
        };
        if self.widths.len() != want {
            return Err(Error::Config(format!(
                "{:?} backbone needs {want} stage widths, got {}",
                self.preset,
                self.widths.len()
            )));
        }
        if self.widths.iter().any(|&w| w < 2) {
            return Err(Error::Config("stage widths must be at least 2".into()));
        }
        GridSpec::pyramid(self.input_size)?;
        Ok(())
    }

    /// Channel count `C_k` of each raw pyramid level, `k = 0` coarsest.
    pub fn out_channels(&self) -> [usize; NUM_RESOLUTIONS] {
        let w = &self.widths;
        match self.preset {
            BackbonePreset::Tiny => [w[4], w[3], w[2]],
            BackbonePreset::Darknet53 => [w[5], w[4], w[3]],
        }
    }
}

/// Output of the backbone: one `N × C_k × H_k × W_k` grid per resolution.
#[derive(Debug, Clone)]
pub struct RawFeaturePyramid {
    pub grids: [Tensor; NUM_RESOLUTIONS],
}

#[derive(Debug, Clone)]
struct Residual {
    reduce: ConvBn,
    expand: ConvBn,
}

#[derive(Debug, Clone)]
enum Layers {
    Tiny {
        stages: Vec<ConvBn>,
        refine32: ConvBn,
        lateral32: ConvBn,
        merge16: ConvBn,
        lateral16: ConvBn,
        merge8: ConvBn,
    },
    Darknet {
        stem: ConvBn,
        /// Downsampling conv followed by residual blocks, per stage.
        stages: Vec<(ConvBn, Vec<Residual>)>,
        set32: Vec<ConvBn>,
        out32: ConvBn,
        lateral32: ConvBn,
        set16: Vec<ConvBn>,
        out16: ConvBn,
        lateral16: ConvBn,
        set8: Vec<ConvBn>,
        out8: ConvBn,
    },
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    layers: Layers,
}

/// `1×1, 3×3, 1×1, 3×3, 1×1` block of the YOLOv3 neck.
fn conv_set(store: &mut ParamStore, name: &str, c_in: usize, c: usize, rng: &mut impl Rng) -> Vec<ConvBn> {
    let g = ParamGroup::Backbone;
    vec![
        ConvBn::new(store, &format!("{name}.0"), c_in, c, 1, 1, LEAKY, g, rng),
        ConvBn::new(store, &format!("{name}.1"), c, 2 * c, 3, 1, LEAKY, g, rng),
        ConvBn::new(store, &format!("{name}.2"), 2 * c, c, 1, 1, LEAKY, g, rng),
        ConvBn::new(store, &format!("{name}.3"), c, 2 * c, 3, 1, LEAKY, g, rng),
        ConvBn::new(store, &format!("{name}.4"), 2 * c, c, 1, 1, LEAKY, g, rng),
    ]
}

fn run(ctx: &mut Ctx, layers: &[ConvBn], mut x: Var) -> Var {
    for l in layers {
        x = l.forward(ctx, x);
    }
    x
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let g = ParamGroup::Backbone;
        let w = &cfg.widths;
        let layers = match cfg.preset {
            BackbonePreset::Tiny => {
                let mut stages = Vec::new();
                let mut c_in = 3;
                for (i, &c) in w.iter().enumerate() {
                    stages.push(ConvBn::new(store, &format!("backbone.stage{i}"), c_in, c, 3, 2, LEAKY, g, rng));
                    c_in = c;
                }
                let (l32, l16) = ((w[3] / 2).max(1), (w[2] / 2).max(1));
                Layers::Tiny {
                    refine32: ConvBn::new(store, "backbone.refine32", w[4], w[4], 3, 1, LEAKY, g, rng),
                    lateral32: ConvBn::new(store, "backbone.lateral32", w[4], l32, 1, 1, LEAKY, g, rng),
                    merge16: ConvBn::new(store, "backbone.merge16", l32 + w[3], w[3], 3, 1, LEAKY, g, rng),
                    lateral16: ConvBn::new(store, "backbone.lateral16", w[3], l16, 1, 1, LEAKY, g, rng),
                    merge8: ConvBn::new(store, "backbone.merge8", l16 + w[2], w[2], 3, 1, LEAKY, g, rng),
                    stages,
                }
            }
            BackbonePreset::Darknet53 => {
                let stem = ConvBn::new(store, "backbone.stem", 3, w[0], 3, 1, LEAKY, g, rng);
                let repeats = [1, 2, 8, 8, 4];
                let mut stages = Vec::new();
                for (i, &reps) in repeats.iter().enumerate() {
                    let (c_in, c) = (w[i], w[i + 1]);
                    let name = format!("backbone.stage{}", i + 1);
                    let down = ConvBn::new(store, &format!("{name}.down"), c_in, c, 3, 2, LEAKY, g, rng);
                    let blocks = (0..reps)
                        .map(|b| Residual {
                            reduce: ConvBn::new(store, &format!("{name}.res{b}.reduce"), c, c / 2, 1, 1, LEAKY, g, rng),
                            expand: ConvBn::new(store, &format!("{name}.res{b}.expand"), c / 2, c, 3, 1, LEAKY, g, rng),
                        })
                        .collect();
                    stages.push((down, blocks));
                }
                Layers::Darknet {
                    stem,
                    stages,
                    set32: conv_set(store, "neck.set32", w[5], w[4], rng),
                    out32: ConvBn::new(store, "neck.out32", w[4], w[5], 3, 1, LEAKY, g, rng),
                    lateral32: ConvBn::new(store, "neck.lateral32", w[4], w[3], 1, 1, LEAKY, g, rng),
                    set16: conv_set(store, "neck.set16", w[3] + w[4], w[3], rng),
                    out16: ConvBn::new(store, "neck.out16", w[3], w[4], 3, 1, LEAKY, g, rng),
                    lateral16: ConvBn::new(store, "neck.lateral16", w[3], w[2], 1, 1, LEAKY, g, rng),
                    set8: conv_set(store, "neck.set8", w[2] + w[3], w[2], rng),
                    out8: ConvBn::new(store, "neck.out8", w[2], w[3], 3, 1, LEAKY, g, rng),
                }
            }
        };
        Ok(Self { cfg: cfg.clone(), layers })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// `images`: `N×3×S×S` with `S` the configured input size.
    pub fn forward(&self, ctx: &mut Ctx, images: Var) -> Result<[Var; NUM_RESOLUTIONS]> {
        let s = ctx.graph.shape(images);
        let size = self.cfg.input_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(Error::Shape(format!("expected N×3×{size}×{size} image batch, got {s:?}")));
        }
        Ok(match &self.layers {
            Layers::Tiny {
                stages,
                refine32,
                lateral32,
                merge16,
                lateral16,
                merge8,
            } => {
                let mut x = images;
                let mut taps = Vec::new();
                for st in stages {
                    x = st.forward(ctx, x);
                    taps.push(x);
                }
                let top = refine32.forward(ctx, x);
                let lat = lateral32.forward(ctx, top);
                let up = ops::upsample2(&mut ctx.graph, lat);
                let cat = ops::concat(&mut ctx.graph, &[up, taps[3]], 1);
                let mid = merge16.forward(ctx, cat);
                let lat = lateral16.forward(ctx, mid);
                let up = ops::upsample2(&mut ctx.graph, lat);
                let cat = ops::concat(&mut ctx.graph, &[up, taps[2]], 1);
                let fine = merge8.forward(ctx, cat);
                [top, mid, fine]
            }
            Layers::Darknet {
                stem,
                stages,
                set32,
                out32,
                lateral32,
                set16,
                out16,
                lateral16,
                set8,
                out8,
            } => {
                let mut x = stem.forward(ctx, images);
                let mut routes = Vec::new();
                for (down, blocks) in stages {
                    x = down.forward(ctx, x);
                    for b in blocks {
                        let y = b.reduce.forward(ctx, x);
                        let y = b.expand.forward(ctx, y);
                        x = ops::add(&mut ctx.graph, x, y);
                    }
                    routes.push(x);
                }
                let x32 = run(ctx, set32, routes[4]);
                let top = out32.forward(ctx, x32);
                let lat = lateral32.forward(ctx, x32);
                let up = ops::upsample2(&mut ctx.graph, lat);
                let cat = ops::concat(&mut ctx.graph, &[up, routes[3]], 1);
                let x16 = run(ctx, set16, cat);
                let mid = out16.forward(ctx, x16);
                let lat = lateral16.forward(ctx, x16);
                let up = ops::upsample2(&mut ctx.graph, lat);
                let cat = ops::concat(&mut ctx.graph, &[up, routes[2]], 1);
                let x8 = run(ctx, set8, cat);
                let fine = out8.forward(ctx, x8);
                [top, mid, fine]
            }
        })
    }

    /// Eval-mode forward of a batch of letterboxed, `[0,1]`-scaled images.
    pub fn encode_image(&self, store: &ParamStore, images: &Tensor) -> Result<RawFeaturePyramid> {
        let mut ctx = Ctx::new(store, false);
        let x = ctx.constant(images.clone());
        let out = self.forward(&mut ctx, x)?;
        Ok(RawFeaturePyramid {
            grids: out.map(|v| ctx.value(v).clone()),
        })
    }
}

/// `1×1` convolution with batch norm and ReLU from `C_k + 8` channels
/// (raw features plus location features) to `D`.
#[derive(Debug, Clone)]
pub struct Projection {
    pub spec: GridSpec,
    pub linear: Linear,
    pub bn: BatchNorm,
    coords: Tensor,
}

impl Projection {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: GridSpec,
        raw_channels: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let g = ParamGroup::Head;
        Self {
            spec,
            linear: Linear::new(store, &format!("{name}.conv"), raw_channels + 8, dim, false, g, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), dim, 2, g),
            coords: spatial_coord_features(&spec),
        }
    }

    /// `raw`: `N × C_k × H_k × W_k`. Returns `N × (H_k·W_k) × D`, all ≥ 0.
    pub fn forward(&self, ctx: &mut Ctx, raw: Var) -> Result<Var> {
        let s = ctx.graph.shape(raw).to_vec();
        if s.len() != 4 || s[2] != self.spec.rows || s[3] != self.spec.cols {
            return Err(Error::Shape(format!(
                "raw grid {s:?} does not match {}×{} projection grid",
                self.spec.rows, self.spec.cols
            )));
        }
        let n = s[0];
        let rows = ops::to_rows(&mut ctx.graph, raw);
        let mut coords = Vec::with_capacity(n * self.coords.numel());
        for _ in 0..n {
            coords.extend_from_slice(self.coords.data());
        }
        let coords = ctx.constant(Tensor::new(&[n, self.spec.cells(), 8], coords));
        let cat = ops::concat(&mut ctx.graph, &[rows, coords], 2);
        let y = self.linear.forward(ctx, cat);
        let y = self.bn.forward(ctx, y);
        Ok(ops::relu(&mut ctx.graph, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &BackboneConfig) -> (ParamStore, Backbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Backbone::new(cfg, &mut store, &mut rng).unwrap();
        (store, b)
    }

    fn image(size: usize) -> Tensor {
        Tensor::new(
            &[1, 3, size, size],
            (0..3 * size * size).map(|i| ((i * 7919) % 255) as f64 / 255.0).collect(),
        )
    }

    #[test]
    fn pyramid_sizes_follow_strides() {
        let cfg = BackboneConfig::tiny(256).with_widths(vec![4, 4, 8, 8, 8]);
        let (store, b) = build(&cfg);
        let out = b.encode_image(&store, &image(256)).unwrap();
        let sizes: Vec<_> = out.grids.iter().map(|g| (g.dim(1), g.dim(2), g.dim(3))).collect();
        assert_eq!(sizes, vec![(8, 8, 8), (8, 16, 16), (8, 32, 32)]);
        assert!(out.grids.iter().all(|g| g.all_finite()));
    }

    #[test]
    fn tiny_at_416_gives_13_26_52() {
        let cfg = BackboneConfig::tiny(416).with_widths(vec![2, 2, 2, 2, 2]);
        let (store, b) = build(&cfg);
        let out = b.encode_image(&store, &image(416)).unwrap();
        let sizes: Vec<_> = out.grids.iter().map(|g| g.dim(2)).collect();
        assert_eq!(sizes, vec![13, 26, 52]);
    }

    #[test]
    fn darknet_topology_runs_at_reduced_width() {
        let cfg = BackboneConfig::darknet53(64).with_widths(vec![2, 4, 4, 8, 8, 8]);
        let (store, b) = build(&cfg);
        let out = b.encode_image(&store, &image(64)).unwrap();
        let shapes: Vec<_> = out.grids.iter().map(|g| g.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 8, 2, 2], vec![1, 8, 4, 4], vec![1, 8, 8, 8]]);
        // 52 convolutions in the Darknet-53 trunk: stem + 5 downsamples + 23 residual pairs.
        let convs = store.params().iter().filter(|p| p.name.starts_with("backbone.") && p.name.ends_with(".weight")).count();
        assert_eq!(convs, 52);
    }

    #[test]
    fn wrong_input_size_is_a_shape_error() {
        let cfg = BackboneConfig::tiny(128).with_widths(vec![2, 2, 2, 2, 2]);
        let (store, b) = build(&cfg);
        assert!(matches!(b.encode_image(&store, &image(96)), Err(Error::Shape(_))));
    }

    #[test]
    fn encoding_is_deterministic() {
        let cfg = BackboneConfig::tiny(64).with_widths(vec![4, 4, 4, 4, 4]);
        let (s1, b1) = build(&cfg);
        let (s2, b2) = build(&cfg);
        let a = b1.encode_image(&s1, &image(64)).unwrap();
        let b = b2.encode_image(&s2, &image(64)).unwrap();
        for (x, y) in a.grids.iter().zip(&b.grids) {
            assert_eq!(x.data(), y.data());
        }
    }

    fn projection(raw_c: usize, dim: usize, spec: GridSpec) -> (ParamStore, Projection) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Projection::new(&mut store, "proj", spec, raw_c, dim, &mut rng);
        (store, p)
    }

    #[test]
    fn projection_is_rectified_and_d_wide() {
        let spec = GridSpec { rows: 4, cols: 4, stride: 8, k: 2 };
        let (store, p) = projection(5, 8, spec);
        let mut ctx = Ctx::new(&store, true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = ctx.constant(crate::verification::uniform_tensor(&[2, 5, 4, 4], 1.0, &mut rng));
        let y = p.forward(&mut ctx, raw).unwrap();
        assert_eq!(ctx.graph.shape(y), &[2, 16, 8]);
        assert!(ctx.value(y).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn projection_rejects_mismatched_grid() {
        let spec = GridSpec { rows: 4, cols: 4, stride: 8, k: 2 };
        let (store, p) = projection(5, 8, spec);
        let mut ctx = Ctx::new(&store, true);
        let raw = ctx.constant(Tensor::zeros(&[1, 5, 2, 2]));
        assert!(matches!(p.forward(&mut ctx, raw), Err(Error::Shape(_))));
    }

    #[test]
    fn projection_is_spatially_local_in_eval_mode() {
        let spec = GridSpec { rows: 4, cols: 4, stride: 8, k: 2 };
        let (store, p) = projection(3, 8, spec);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = crate::verification::uniform_tensor(&[1, 3, 4, 4], 1.0, &mut rng);
        let mut bumped = base.clone();
        // Cell (row 1, col 2) in every channel.
        for c in 0..3 {
            let v = bumped.at(&[0, c, 1, 2]);
            bumped.set(&[0, c, 1, 2], v + 0.7);
        }
        let run = |t: &Tensor| {
            let mut ctx = Ctx::new(&store, false);
            let raw = ctx.constant(t.clone());
            let y = p.forward(&mut ctx, raw).unwrap();
            ctx.value(y).clone()
        };
        let (a, b) = (run(&base), run(&bumped));
        for cell in 0..16 {
            let same = (0..8).all(|d| a.at(&[0, cell, d]) == b.at(&[0, cell, d]));
            assert_eq!(same, cell != 6, "cell {cell}");
        }
    }

    #[test]
    fn coordinates_break_translation_symmetry() {
        let spec = GridSpec { rows: 4, cols: 4, stride: 8, k: 2 };
        let (store, p) = projection(3, 8, spec);
        let mut ctx = Ctx::new(&store, false);
        let raw = ctx.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let y = p.forward(&mut ctx, raw).unwrap();
        let v = ctx.value(y);
        let first: Vec<f64> = (0..8).map(|d| v.at(&[0, 0, d])).collect();
        assert!((1..16).any(|cell| (0..8).any(|d| v.at(&[0, cell, d]) != first[d])));
    }
}
