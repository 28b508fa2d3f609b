use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use attngrounder::data::{generate_synthetic, image_to_chw, letterbox, load_manifest_lenient, save_manifest, Sample, SyntheticConfig};
use attngrounder::train_eval::{evaluate, load_checkpoint, load_model, train, EvalOptions, TrainOptions};
use attngrounder::{AttnGrounder, BBox, Tensor};
use clap::{Args, Parser, Subcommand};
use image::RgbImage;
use log::{info, warn};

use crate::config::RunConfig;
use crate::render::{composite, draw_box, normalize_map, upsample};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "attngrounder", version, about = "Ground a text query to one box in an image")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config file.
    Train(TrainArgs),
    /// Report AP50, timing and parameter count on a manifest.
    Eval(EvalArgs),
    /// Predict one box for an image and query.
    Predict(PredictArgs),
    /// Write the three attention maps and a composite.
    VisualizeAttn(VisualizeArgs),
    /// Generate a synthetic corpus.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long)]
    pub overlay: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::VisualizeAttn(a) => cmd_visualize_attn(&a),
        Command::GenData(a) => cmd_gen_data(&a),
    }
}

fn load_samples(path: &Path) -> Result<Vec<Sample>, CliError> {
    let (samples, rejects) = load_manifest_lenient(path).map_err(|e| CliError::data(format!("loading {}", path.display()), e))?;
    for r in &rejects {
        warn!("skipped record: {r}");
    }
    if samples.is_empty() {
        return Err(CliError::data(format!("loading {}", path.display()), attngrounder::Error::EmptyDataset));
    }
    Ok(samples)
}

fn open_model(path: &Path) -> Result<(AttnGrounder, attngrounder::nn::ParamStore, attngrounder::text_encoder::Vocabulary), CliError> {
    load_model(path).map_err(|e| CliError::data(format!("loading checkpoint {}", path.display()), e))
}

fn open_image(path: &Path) -> Result<RgbImage, CliError> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| CliError::data(format!("reading image {}", path.display()), e))
}

fn check_query(query: &str) -> Result<(), CliError> {
    if query.trim().is_empty() {
        return Err(CliError::Usage("--query must not be empty".into()));
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config)?;
    let train_set = load_samples(&cfg.train_manifest)?;
    let val_set = match &cfg.val_manifest {
        Some(p) => load_samples(p)?,
        None => Vec::new(),
    };
    let resume = match &args.resume {
        Some(p) => Some(load_checkpoint(p).map_err(|e| CliError::data(format!("loading checkpoint {}", p.display()), e))?),
        None => None,
    };
    info!(
        "training on {} samples ({} validation), output in {}",
        train_set.len(),
        val_set.len(),
        cfg.output_dir.display()
    );
    let out = train(
        &cfg.train,
        &train_set,
        &val_set,
        TrainOptions {
            out_dir: Some(cfg.output_dir.clone()),
            resume,
        },
    )?;
    if let Some(r) = out.history.last() {
        println!("step {} epoch {} loss {:.4}", r.step, r.epoch, r.loss.total);
    }
    if let Some(ap) = out.best.best_ap50 {
        println!("best AP50 {ap:.2}");
    }
    println!("checkpoint {}", cfg.output_dir.join("last.ckpt").display());
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let (model, store, vocab) = open_model(&args.checkpoint)?;
    let samples = load_samples(&args.data)?;
    let report = evaluate(
        &model,
        &store,
        &vocab,
        &samples,
        &EvalOptions {
            timing: true,
            ..EvalOptions::default()
        },
    )?;
    let records_path = args.checkpoint.with_extension("eval.jsonl");
    let mut w = File::create(&records_path)
        .map(BufWriter::new)
        .map_err(|e| CliError::output(format!("creating {}", records_path.display()), e))?;
    for r in &report.records {
        let line = serde_json::to_string(r).map_err(attngrounder::Error::from)?;
        writeln!(w, "{line}").map_err(|e| CliError::output(format!("writing {}", records_path.display()), e))?;
    }
    w.flush().map_err(|e| CliError::output(format!("writing {}", records_path.display()), e))?;
    println!(
        "AP50 {:.2}  ms {:.3}  params {}  samples {}",
        report.ap50,
        report.mean_inference_ms,
        report.param_count,
        report.records.len()
    );
    println!("records {}", records_path.display());
    Ok(())
}

struct Grounded {
    input: RgbImage,
    input_box: BBox,
    original_box: BBox,
    confidence: f64,
    beta: [Tensor; 3],
}

fn ground(model: &AttnGrounder, store: &attngrounder::nn::ParamStore, vocab: &attngrounder::text_encoder::Vocabulary, image: &RgbImage, query: &str) -> Result<Grounded, CliError> {
    let size = model.cfg.backbone.input_size as u32;
    let whole = BBox::new(0.0, 0.0, image.width() as f64, image.height() as f64);
    let (input, _, transform) = letterbox(image, &whole, size);
    let ids = vocab.encode_text(query, model.cfg.max_query_len)?;
    let x = Tensor::new(&[1, 3, size as usize, size as usize], image_to_chw(&input));
    let inf = model.infer(store, &x, &[ids])?.remove(0);
    Ok(Grounded {
        input,
        input_box: inf.selection.bbox,
        original_box: transform.inverse(&inf.selection.bbox),
        confidence: inf.selection.confidence,
        beta: inf.beta,
    })
}

pub fn cmd_predict(args: &PredictArgs) -> Result<(), CliError> {
    check_query(&args.query)?;
    let (model, store, vocab) = open_model(&args.checkpoint)?;
    let image = open_image(&args.image)?;
    let g = ground(&model, &store, &vocab, &image, &args.query)?;
    let b = g.original_box;
    println!(
        "{}",
        serde_json::json!({ "box": [b.x, b.y, b.w, b.h], "confidence": g.confidence })
    );
    if let Some(path) = &args.overlay {
        let mut img = image;
        draw_box(&mut img, &b);
        img.save(path)
            .map_err(|e| CliError::output(format!("writing {}", path.display()), std::io::Error::other(e)))?;
    }
    Ok(())
}

pub fn cmd_visualize_attn(args: &VisualizeArgs) -> Result<(), CliError> {
    check_query(&args.query)?;
    let (model, store, vocab) = open_model(&args.checkpoint)?;
    let image = open_image(&args.image)?;
    let g = ground(&model, &store, &vocab, &image, &args.query)?;
    let size = g.input.width();
    let maps: Vec<_> = g.beta.iter().map(|b| upsample(&normalize_map(b), size)).collect();
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::output(format!("creating {}", args.out.display()), e))?;
    let save = |img: &dyn Fn(&Path) -> image::ImageResult<()>, name: &str| {
        let path = args.out.join(name);
        img(&path).map_err(|e| CliError::output(format!("writing {}", path.display()), std::io::Error::other(e)))
    };
    for (k, m) in maps.iter().enumerate() {
        save(&|p| m.save(p), &format!("attention_{k}.png"))?;
    }
    let comp = composite(&g.input, &maps, &g.input_box);
    save(&|p| comp.save(p), "composite.png")?;
    println!("wrote 3 attention maps and composite.png to {}", args.out.display());
    Ok(())
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    if args.count == 0 {
        return Err(CliError::Usage("--count must be positive".into()));
    }
    let generated = generate_synthetic(&SyntheticConfig::default(), args.seed, args.count)?;
    let samples: Vec<Sample> = generated.into_iter().map(|(s, _)| s).collect();
    let manifest = save_manifest(&args.out, &samples).map_err(|e| match e {
        attngrounder::Error::Io(io) => CliError::output(format!("writing {}", args.out.display()), io),
        other => other.into(),
    })?;
    println!("wrote {} samples to {}", samples.len(), manifest.display());
    Ok(())
}
