//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key except
//! `train_manifest` has a default; unknown and repeated keys are errors.
//! `profile` picks the base settings (`desk` or `full`) before the other
//! keys are applied, regardless of where it appears in the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use attngrounder::image_encoder::{BackboneConfig, BackbonePreset};
use attngrounder::train_eval::TrainConfig;

use crate::CliError;

pub const KEYS: &[&str] = &[
    "profile",
    "train_manifest",
    "val_manifest",
    "output_dir",
    "base_lr",
    "backbone_lr_scale",
    "batch_size",
    "epochs",
    "max_steps",
    "lambda",
    "seed",
    "augment",
    "backbone",
    "backbone_widths",
    "input_size",
    "embed_dim",
    "hidden",
    "dim",
    "fused_dim",
    "fusion_relu",
    "max_query_len",
    "glove_path",
    "eval_every",
];

pub const DEFAULT_OUTPUT_DIR: &str = "runs/default";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train_manifest: PathBuf,
    pub val_manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Reads and parses a config file. Relative paths inside it resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let pairs = parse_pairs(text)?;
        let get = |k: &str| pairs.get(k).map(String::as_str);

        let mut train = match get("profile").unwrap_or("desk") {
            "desk" => TrainConfig::desk(),
            "full" => TrainConfig::default(),
            other => return Err(bad("profile", other, "`desk` or `full`")),
        };
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() { p } else { base.join(p) }
        };

        let train_manifest = get("train_manifest")
            .map(resolve)
            .ok_or_else(|| CliError::Config("missing required key `train_manifest`".into()))?;
        let val_manifest = get("val_manifest").map(resolve);
        let output_dir = resolve(get("output_dir").unwrap_or(DEFAULT_OUTPUT_DIR));

        if let Some(v) = get("base_lr") {
            train.base_lr = num("base_lr", v)?;
        }
        if let Some(v) = get("backbone_lr_scale") {
            train.backbone_lr_scale = num("backbone_lr_scale", v)?;
        }
        if let Some(v) = get("batch_size") {
            train.batch_size = num("batch_size", v)?;
        }
        if let Some(v) = get("epochs") {
            train.epochs = num("epochs", v)?;
        }
        if let Some(v) = get("max_steps") {
            train.max_steps = match v {
                "none" => None,
                v => Some(num("max_steps", v)?),
            };
        }
        if let Some(v) = get("lambda") {
            train.lambda = num("lambda", v)?;
        }
        if let Some(v) = get("seed") {
            train.seed = num("seed", v)?;
        }
        if let Some(v) = get("augment") {
            train.augment = num("augment", v)?;
        }
        if get("backbone").is_some() || get("input_size").is_some() {
            let preset = match get("backbone") {
                Some(v) => BackbonePreset::from_str(v).map_err(|_| bad("backbone", v, "`tiny` or `darknet53`"))?,
                None => train.backbone.preset,
            };
            let size = match get("input_size") {
                Some(v) => num("input_size", v)?,
                None => train.backbone.input_size,
            };
            train.backbone = match preset {
                BackbonePreset::Tiny => BackboneConfig::tiny(size),
                BackbonePreset::Darknet53 => BackboneConfig::darknet53(size),
            };
        }
        if let Some(v) = get("backbone_widths") {
            let widths = v
                .split(',')
                .map(|w| num("backbone_widths", w.trim()))
                .collect::<Result<Vec<usize>, _>>()?;
            train.backbone = train.backbone.with_widths(widths);
        }
        if let Some(v) = get("embed_dim") {
            train.embed_dim = num("embed_dim", v)?;
        }
        if let Some(v) = get("hidden") {
            train.hidden = num("hidden", v)?;
        }
        if let Some(v) = get("dim") {
            train.dim = num("dim", v)?;
        }
        if let Some(v) = get("fused_dim") {
            train.fused_dim = num("fused_dim", v)?;
        }
        if let Some(v) = get("fusion_relu") {
            train.fusion_relu = num("fusion_relu", v)?;
        }
        if let Some(v) = get("max_query_len") {
            train.max_query_len = num("max_query_len", v)?;
        }
        if let Some(v) = get("glove_path") {
            train.glove_path = Some(resolve(v));
        }
        if let Some(v) = get("eval_every") {
            train.eval_every = num("eval_every", v)?;
        }

        train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Self {
            train_manifest,
            val_manifest,
            output_dir,
            train,
        })
    }
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut pairs = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(CliError::Config(format!("line {}: unknown key `{key}`", i + 1)));
        }
        if value.is_empty() {
            return Err(CliError::Config(format!("line {}: empty value for `{key}`", i + 1)));
        }
        if pairs.insert(key.to_string(), value.to_string()).is_some() {
            return Err(CliError::Config(format!("line {}: duplicate key `{key}`", i + 1)));
        }
    }
    Ok(pairs)
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| bad(key, value, std::any::type_name::<T>()))
}

fn bad(key: &str, value: &str, expected: &str) -> CliError {
    CliError::Config(format!("`{key}`: cannot use {value:?}, expected {expected}"))
}
