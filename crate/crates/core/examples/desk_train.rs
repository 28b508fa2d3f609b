//! Trains the desk configuration on a synthetic corpus and reports AP50.
//!
//! `cargo run --release --example desk_train -- [train_count] [epochs] [lambda] [augment]`

use std::collections::BTreeMap;
use std::time::Instant;

use attngrounder::data::{generate_synthetic, Query, SyntheticConfig};
use attngrounder::train_eval::{ap50, attention_margin, evaluate, train, EvalOptions, TrainConfig, TrainOptions};

fn main() -> attngrounder::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize| args.get(i).map(String::as_str);
    let n: usize = arg(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let desk = TrainConfig::desk();
    let epochs: usize = arg(2).and_then(|s| s.parse().ok()).unwrap_or(desk.epochs);
    let lambda: f64 = arg(3).and_then(|s| s.parse().ok()).unwrap_or(desk.lambda);
    let augment = arg(4).map_or(desk.augment, |s| s == "1" || s == "true");
    let syn = SyntheticConfig::default();
    let train_set: Vec<_> = generate_synthetic(&syn, 1, n)?.into_iter().map(|(s, _)| s).collect();
    let val: Vec<_> = generate_synthetic(&syn, 2, 200)?;
    let val_set: Vec<_> = val.iter().map(|(s, _)| s.clone()).collect();
    let cfg = TrainConfig {
        epochs,
        lambda,
        augment,
        eval_every: 2,
        ..desk
    };
    let t0 = Instant::now();
    let out = train(&cfg, &train_set, &val_set, TrainOptions::default())?;
    let train_secs = t0.elapsed().as_secs_f64();
    for r in out.history.iter().filter(|r| r.val_ap50.is_some()) {
        println!(
            "step {:5} epoch {:2} lr {:.2e} total {:.4} conf {:.4} box {:.4} mask {:.4} ap50 {:?}",
            r.step, r.epoch, r.lr, r.loss.total, r.loss.confidence, r.loss.box_loss, r.loss.mask_total, r.val_ap50
        );
    }
    let (model, store) = out.last.restore()?;
    let vocab = &out.last.vocab;
    let rep = evaluate(&model, &store, vocab, &val_set, &EvalOptions::default())?;
    let seen = evaluate(&model, &store, vocab, &train_set[..200.min(n)], &EvalOptions::default())?;
    let margin = attention_margin(&model, &store, vocab, &val_set)?;

    let mut by_form: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for ((_, scene), r) in val.iter().zip(&rep.records) {
        let form = match scene.query {
            Query::Attribute { .. } => "attribute",
            Query::Relational { .. } => "relational",
            Query::Ordinal { .. } => "ordinal",
        };
        by_form.entry(form).or_default().push(r.iou);
    }
    for (form, ious) in &by_form {
        println!("  {form:10} n {:3} AP50 {:.1}", ious.len(), ap50(ious));
    }
    println!(
        "final AP50 {:.1} (train subset {:.1}) params {} margin {:.4} train {:.1}s",
        rep.ap50, seen.ap50, rep.param_count, margin, train_secs
    );
    Ok(())
}
