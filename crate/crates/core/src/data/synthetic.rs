//! Procedural scenes of colored shapes with uniquely resolvable queries.

use image::{Rgb, RgbImage};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    White,
    Cyan,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
        Color::White,
        Color::Cyan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::White => "white",
            Color::Cyan => "cyan",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [50, 80, 230],
            Color::Yellow => [235, 220, 50],
            Color::Purple => [150, 60, 200],
            Color::Orange => [245, 140, 30],
            Color::White => [240, 240, 240],
            Color::Cyan => [50, 220, 230],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub color: Color,
    /// Side length of the bounding square.
    pub size: f64,
    pub cx: f64,
    pub cy: f64,
}

impl PlacedShape {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.size, self.size)
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        let h = self.size / 2.0;
        let (dx, dy) = (px - self.cx, py - self.cy);
        match self.kind {
            ShapeKind::Square => dx.abs() <= h && dy.abs() <= h,
            ShapeKind::Circle => dx * dx + dy * dy <= h * h,
            // Apex at top center, base along the bottom edge.
            ShapeKind::Triangle => dy.abs() <= h && dx.abs() <= (dy + h) / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    fn words(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Signed separation; positive when `a` stands in this relation to `b`.
    fn margin(self, a: &PlacedShape, b: &PlacedShape) -> f64 {
        match self {
            Relation::LeftOf => b.cx - a.cx,
            Relation::RightOf => a.cx - b.cx,
            Relation::Above => b.cy - a.cy,
            Relation::Below => a.cy - b.cy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

const ORDINALS: [&str; 4] = ["first", "second", "third", "fourth"];

/// Structured form of a synthetic query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "form")]
pub enum Query {
    Attribute {
        color: Color,
        kind: ShapeKind,
    },
    Relational {
        color: Color,
        kind: ShapeKind,
        relation: Relation,
        landmark_color: Color,
        landmark_kind: ShapeKind,
    },
    Ordinal {
        rank: usize,
        kind: ShapeKind,
        side: Side,
    },
}

impl Query {
    pub fn text(&self) -> String {
        match *self {
            Query::Attribute { color, kind } => format!("the {} {}", color.name(), kind.name()),
            Query::Relational {
                color,
                kind,
                relation,
                landmark_color,
                landmark_kind,
            } => format!(
                "the {} {} {} the {} {}",
                color.name(),
                kind.name(),
                relation.words(),
                landmark_color.name(),
                landmark_kind.name()
            ),
            Query::Ordinal { rank, kind, side } => format!(
                "the {} {} from the {}",
                ORDINALS[rank],
                kind.name(),
                match side {
                    Side::Left => "left",
                    Side::Right => "right",
                }
            ),
        }
    }

    /// Objects the query picks out.
    pub fn referents(&self, shapes: &[PlacedShape]) -> Vec<usize> {
        let idx = 0..shapes.len();
        match *self {
            Query::Attribute { color, kind } => idx.filter(|&i| shapes[i].color == color && shapes[i].kind == kind).collect(),
            Query::Relational {
                color,
                kind,
                relation,
                landmark_color,
                landmark_kind,
            } => idx
                .filter(|&i| shapes[i].color == color && shapes[i].kind == kind)
                .filter(|&i| {
                    shapes.iter().enumerate().any(|(j, l)| {
                        j != i && l.color == landmark_color && l.kind == landmark_kind && relation.margin(&shapes[i], l) > 0.0
                    })
                })
                .collect(),
            Query::Ordinal { rank, kind, side } => {
                let mut same: Vec<usize> = idx.filter(|&i| shapes[i].kind == kind).collect();
                same.sort_by(|&a, &b| shapes[a].cx.total_cmp(&shapes[b].cx));
                if side == Side::Right {
                    same.reverse();
                }
                same.get(rank).copied().into_iter().collect()
            }
        }
    }
}

/// A generated scene: what was drawn and which object the query names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub shapes: Vec<PlacedShape>,
    pub target: usize,
    pub query: Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub width: u32,
    pub height: u32,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Distance kept between shapes and from the canvas edge.
    pub gap: f64,
    /// Chance of trying a plain attribute query first.
    pub attribute_prob: f64,
    /// Minimum center separation that makes a spatial word count.
    pub spatial_margin: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            min_shapes: 3,
            max_shapes: 8,
            min_size: 14.0,
            max_size: 26.0,
            gap: 4.0,
            attribute_prob: 0.8,
            spatial_margin: 6.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.width >= 32
            && self.height >= 32
            && self.min_shapes >= 1
            && self.min_shapes <= self.max_shapes
            && self.min_size >= 4.0
            && self.min_size <= self.max_size
            && self.max_size + 2.0 * self.gap < self.width.min(self.height) as f64
            && (0.0..=1.0).contains(&self.attribute_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid synthetic corpus settings {self:?}")))
        }
    }
}

fn place_shapes(cfg: &SyntheticConfig, rng: &mut impl Rng) -> Vec<PlacedShape> {
    let n = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let mut shapes: Vec<PlacedShape> = Vec::with_capacity(n);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    for _ in 0..n {
        for _attempt in 0..200 {
            let size = rng.random_range(cfg.min_size..=cfg.max_size).round();
            let half = size / 2.0 + cfg.gap;
            let cx = rng.random_range(half..w - half).round();
            let cy = rng.random_range(half..h - half).round();
            let clear = shapes
                .iter()
                .all(|o| (o.cx - cx).abs() >= (o.size + size) / 2.0 + cfg.gap || (o.cy - cy).abs() >= (o.size + size) / 2.0 + cfg.gap);
            if clear {
                shapes.push(PlacedShape {
                    kind: *ShapeKind::ALL.choose(rng).unwrap(),
                    color: *Color::ALL.choose(rng).unwrap(),
                    size,
                    cx,
                    cy,
                });
                break;
            }
        }
    }
    shapes
}

fn attribute_query(shapes: &[PlacedShape], rng: &mut impl Rng) -> Option<(usize, Query)> {
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    order.shuffle(rng);
    order.into_iter().find_map(|t| {
        let q = Query::Attribute {
            color: shapes[t].color,
            kind: shapes[t].kind,
        };
        (q.referents(shapes) == [t]).then_some((t, q))
    })
}

fn relational_query(shapes: &[PlacedShape], margin: f64, rng: &mut impl Rng) -> Option<(usize, Query)> {
    let mut pairs: Vec<(usize, usize, Relation)> = Vec::new();
    for t in 0..shapes.len() {
        for l in 0..shapes.len() {
            for r in Relation::ALL {
                if t != l && r.margin(&shapes[t], &shapes[l]) >= margin {
                    pairs.push((t, l, r));
                }
            }
        }
    }
    pairs.shuffle(rng);
    pairs.into_iter().find_map(|(t, l, relation)| {
        let landmark = Query::Attribute {
            color: shapes[l].color,
            kind: shapes[l].kind,
        };
        if landmark.referents(shapes) != [l] {
            return None;
        }
        let q = Query::Relational {
            color: shapes[t].color,
            kind: shapes[t].kind,
            relation,
            landmark_color: shapes[l].color,
            landmark_kind: shapes[l].kind,
        };
        // Any other same-looking object must not satisfy the relation at all.
        (q.referents(shapes) == [t]).then_some((t, q))
    })
}

fn ordinal_query(shapes: &[PlacedShape], margin: f64, rng: &mut impl Rng) -> Option<(usize, Query)> {
    let mut options = Vec::new();
    for kind in ShapeKind::ALL {
        let mut same: Vec<usize> = (0..shapes.len()).filter(|&i| shapes[i].kind == kind).collect();
        same.sort_by(|&a, &b| shapes[a].cx.total_cmp(&shapes[b].cx));
        let well_separated = same.windows(2).all(|w| shapes[w[1]].cx - shapes[w[0]].cx >= margin);
        if same.len() < 2 || !well_separated {
            continue;
        }
        for rank in 0..same.len().min(ORDINALS.len()) {
            options.push((same[rank], Query::Ordinal { rank, kind, side: Side::Left }));
            options.push((same[same.len() - 1 - rank], Query::Ordinal { rank, kind, side: Side::Right }));
        }
    }
    options.choose(rng).copied()
}

fn choose_query(cfg: &SyntheticConfig, shapes: &[PlacedShape], rng: &mut impl Rng) -> Option<(usize, Query)> {
    if rng.random_bool(cfg.attribute_prob) {
        if let Some(q) = attribute_query(shapes, rng) {
            return Some(q);
        }
    }
    if rng.random_bool(0.5) {
        relational_query(shapes, cfg.spatial_margin, rng).or_else(|| ordinal_query(shapes, cfg.spatial_margin, rng))
    } else {
        ordinal_query(shapes, cfg.spatial_margin, rng).or_else(|| relational_query(shapes, cfg.spatial_margin, rng))
    }
    .or_else(|| attribute_query(shapes, rng))
}

/// Draws `scene` over a noisy dark background.
pub fn render(scene: &SceneSpec, rng: &mut impl Rng) -> RgbImage {
    let base: [i32; 3] = std::array::from_fn(|_| rng.random_range(30..80));
    let mut img = RgbImage::from_fn(scene.width, scene.height, |_, _| {
        let n = rng.random_range(-8..=8);
        Rgb(base.map(|c| (c + n).clamp(0, 255) as u8))
    });
    for s in &scene.shapes {
        let b = s.bbox();
        let (x0, y0) = (b.x.floor().max(0.0) as u32, b.y.floor().max(0.0) as u32);
        let x1 = (b.right().ceil() as u32).min(scene.width);
        let y1 = (b.bottom().ceil() as u32).min(scene.height);
        for y in y0..y1 {
            for x in x0..x1 {
                if s.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    img.put_pixel(x, y, Rgb(s.color.rgb()));
                }
            }
        }
    }
    img
}

fn generate_one(cfg: &SyntheticConfig, seed: u64, index: usize) -> (Sample, SceneSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    loop {
        let shapes = place_shapes(cfg, &mut rng);
        if shapes.len() < cfg.min_shapes {
            continue;
        }
        let Some((target, query)) = choose_query(cfg, &shapes, &mut rng) else {
            continue;
        };
        let scene = SceneSpec {
            width: cfg.width,
            height: cfg.height,
            shapes,
            target,
            query,
        };
        let image = render(&scene, &mut rng);
        let sample = Sample {
            id: format!("syn-{seed}-{index:06}"),
            image,
            query: query.text(),
            gt: scene.shapes[target].bbox(),
        };
        return (sample, scene);
    }
}

/// `count` samples, each a pure function of `(seed, index)`.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64, count: usize) -> Result<Vec<(Sample, SceneSpec)>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(exec::map(count, |i| generate_one(cfg, seed, i)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let cfg = SyntheticConfig::default();
        let a = generate_synthetic(&cfg, 5, 40).unwrap();
        let b = generate_synthetic(&cfg, 5, 40).unwrap();
        assert_eq!(a, b);
        for (s, scene) in &a {
            s.validate().unwrap();
            assert!((3..=8).contains(&scene.shapes.len()));
            assert_eq!(scene.query.referents(&scene.shapes), vec![scene.target]);
        }
        assert_ne!(a[0].0.image, generate_synthetic(&cfg, 6, 1).unwrap()[0].0.image);
    }

    #[test]
    fn count_zero_is_an_error() {
        assert!(generate_synthetic(&SyntheticConfig::default(), 1, 0).is_err());
    }

    #[test]
    fn all_query_forms_occur() {
        let corpus = generate_synthetic(&SyntheticConfig::default(), 9, 300).unwrap();
        let has = |f: fn(&Query) -> bool| corpus.iter().any(|(_, s)| f(&s.query));
        assert!(has(|q| matches!(q, Query::Attribute { .. })));
        assert!(has(|q| matches!(q, Query::Relational { .. })));
        assert!(has(|q| matches!(q, Query::Ordinal { .. })));
    }

    #[test]
    fn shapes_do_not_overlap() {
        for (_, scene) in generate_synthetic(&SyntheticConfig::default(), 2, 100).unwrap() {
            for (i, a) in scene.shapes.iter().enumerate() {
                for b in &scene.shapes[i + 1..] {
                    assert_eq!(crate::geometry::iou(&a.bbox(), &b.bbox()), 0.0);
                }
            }
        }
    }
}
