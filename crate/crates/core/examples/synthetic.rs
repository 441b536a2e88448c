//! Trains on a generated topic corpus and compares against popularity.
//!
//! ```text
//! cargo run --release --example synthetic -- [ablation] [seed] [epochs]
//! ```

use ccfrec::corpus::Split;
use ccfrec::evaluator::{evaluate, evaluate_popularity};
use ccfrec::model::ModelConfig;
use ccfrec::pipeline::{prepare, PrepConfig};
use ccfrec::synth::{generate_synthetic, SyntheticSpec};
use ccfrec::trainer::{apply_ablation, train, validation_ndcg, TrainConfig};
use ccfrec::Model32;

fn main() -> ccfrec::Result<()> {
    let mut args = std::env::args().skip(1);
    let ablation = args.next().unwrap_or_default();
    let seed: u64 = args.next().map_or(1, |s| s.parse().expect("seed is an integer"));
    let epochs: usize = args.next().map_or(5, |s| s.parse().expect("epochs is an integer"));

    let cfg = TrainConfig {
        ablations: ablation.parse()?,
        seed,
        max_epochs: epochs,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let wiring = apply_ablation(&cfg.ablations);
    let prep = PrepConfig { codebook_size: 32, ..PrepConfig::default() };
    let corpus = generate_synthetic(&SyntheticSpec::default())?;
    let p = prepare(&corpus.items, &corpus.interactions, &prep, &wiring)?;
    let config = ModelConfig { dim: 32, heads: 2, ffn_hidden: 64, fusion_layers: 1, backbone_layers: 1, dropout: 0.2, ..ModelConfig::default() };
    let mut model: Model32 = p.build_model(config, &prep, &wiring, seed)?;

    let outcome = train(&mut model, &p.data, &cfg, validation_ndcg(&p.data, true))?;
    for r in &outcome.history {
        println!("epoch {:>2}  loss {:.3}  ce {:.3}  valid NDCG@10 {:.4}", r.epoch, r.loss, r.ce, r.valid_ndcg10);
    }
    let test = evaluate(&outcome.best.model, &p.data, Split::Test, true, &[10])?;
    let pop = evaluate_popularity(&p.data, Split::Test, true, &[10]);
    println!("test Recall@10 {:.4}  NDCG@10 {:.4}  (popularity {:.4})", test.recall(10), test.ndcg(10), pop.recall(10));
    Ok(())
}
