//! Training, persistence and ablation wiring on a tiny synthetic corpus.

use ccfrec::corpus::Split;
use ccfrec::evaluator::evaluate;
use ccfrec::model::ModelConfig;
use ccfrec::pipeline::{prepare, PrepConfig, Prepared};
use ccfrec::quantizer::QuantMethod;
use ccfrec::synth::{generate_synthetic, SyntheticSpec};
use ccfrec::trainer::{apply_ablation, compute_losses, train, validation_ndcg, Ablation, Checkpoint, TrainConfig};
use ccfrec::{Model32, Model64};

fn spec() -> SyntheticSpec {
    SyntheticSpec { topics: 3, items_per_topic: 10, users: 60, ..SyntheticSpec::default() }
}

fn prep() -> PrepConfig {
    PrepConfig {
        encoder_dim: 16,
        method: QuantMethod::Pq,
        levels: 2,
        codebook_size: 4,
        ..PrepConfig::default()
    }
}

fn model_config() -> ModelConfig {
    ModelConfig { dim: 8, heads: 2, ffn_hidden: 16, fusion_layers: 1, backbone_layers: 1, ..ModelConfig::default() }
}

fn train_config(ablation: &str) -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        max_epochs: 2,
        ablations: ablation.parse().unwrap(),
        ..TrainConfig::default()
    }
}

fn prepared(cfg: &TrainConfig) -> Prepared {
    let corpus = generate_synthetic(&spec()).unwrap();
    prepare(&corpus.items, &corpus.interactions, &prep(), &apply_ablation(&cfg.ablations)).unwrap()
}

fn trained(cfg: &TrainConfig) -> (Model32, Prepared) {
    let p = prepared(cfg);
    let wiring = apply_ablation(&cfg.ablations);
    let mut model: Model32 = p.build_model(model_config(), &prep(), &wiring, cfg.seed).unwrap();
    train(&mut model, &p.data, cfg, validation_ndcg(&p.data, true)).unwrap();
    (model, p)
}

#[test]
fn training_is_deterministic() {
    let cfg = train_config("");
    let (a, _) = trained(&cfg);
    let (b, _) = trained(&cfg);
    assert_eq!(a, b);
    let (c, _) = trained(&TrainConfig { seed: cfg.seed + 1, ..cfg });
    assert_ne!(a, c);
}

#[test]
fn checkpoints_round_trip_exactly() {
    let cfg = train_config("");
    let p = prepared(&cfg);
    let wiring = apply_ablation(&cfg.ablations);
    let mut model: Model32 = p.build_model(model_config(), &prep(), &wiring, 0).unwrap();
    let outcome = train(&mut model, &p.data, &cfg, validation_ndcg(&p.data, true)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    outcome.best.save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(back, outcome.best);
    let before = evaluate(&outcome.best.model, &p.data, Split::Test, true, &[10]).unwrap();
    let after = evaluate(&back.model, &p.data, Split::Test, true, &[10]).unwrap();
    assert_eq!(before.recall(10), after.recall(10));
    assert_eq!(before.ndcg(10), after.ndcg(10));
}

#[test]
fn every_ablation_trains_and_reports_its_tag() {
    for a in Ablation::ALL {
        let cfg = TrainConfig { max_epochs: 1, ..train_config(a.name()) };
        let p = prepared(&cfg);
        let wiring = apply_ablation(&cfg.ablations);
        let mut model: Model32 = p.build_model(model_config(), &prep(), &wiring, 0).unwrap();
        let outcome = train(&mut model, &p.data, &cfg, validation_ndcg(&p.data, true)).unwrap();
        let record = &outcome.history[0];
        assert!(record.loss.is_finite(), "{}", a.name());
        assert_eq!(record.ablation.as_deref(), Some(a.name()));
        // Mean pooling has no code states, so it drops the masked-code loss too.
        let no_mcm = matches!(a, Ablation::NoMcm | Ablation::NoCrossAttention);
        assert_eq!(record.mcm.is_none(), no_mcm, "{}", a.name());
        assert_eq!(record.msa.is_none(), matches!(a, Ablation::NoMsa), "{}", a.name());
    }
}

#[test]
fn single_and_double_precision_agree() {
    let cfg = train_config("");
    let p = prepared(&cfg);
    let wiring = apply_ablation(&cfg.ablations);
    let m32: Model32 = p.build_model(model_config(), &prep(), &wiring, 5).unwrap();
    let m64: Model64 = p.build_model(model_config(), &prep(), &wiring, 5).unwrap();
    let windows = p.data.train_windows();
    let batch: Vec<_> = windows.iter().take(16).collect();
    let l32 = compute_losses(&m32, &batch, &cfg, 1, None).unwrap().values();
    let l64 = compute_losses(&m64, &batch, &cfg, 1, None).unwrap().values();
    assert!((l32.total - l64.total).abs() <= 1e-4 * l64.total.abs(), "{l32:?} vs {l64:?}");
    assert!((l32.ce - l64.ce).abs() <= 1e-4 * l64.ce.abs());
}
