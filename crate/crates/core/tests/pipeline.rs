//! Pipeline, trainer and evaluator behaviour on a miniature model.

use std::collections::BTreeMap;

use candle_core::DType;
use promptseg::check::miniature_config;
use promptseg::data::{gen_synthetic_dataset, make_folds, sample_episode, Dataset, Episode, FoldSpec, Split, SynthConfig};
use promptseg::eval::{evaluate_fold, BackgroundModel, EvalProtocol, OracleModel, PipelineModel};
use promptseg::model::{base_vocab, Ablation, ModelConfig, Pipeline};
use promptseg::nn::ParamGroup;
use promptseg::semantic::GenerationMode;
use promptseg::train::{Checkpoint, Schedule, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    _dir: tempfile::TempDir,
    dataset: Dataset,
    fold: FoldSpec,
    vocab: promptseg::semantic::tokenizer::Vocab,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        image_size: 64,
        per_class: 5,
        ..SynthConfig::default()
    };
    let data = gen_synthetic_dataset(&synth, dir.path(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let vocab = base_vocab(&data.classes);
    let dataset = data.into_dataset().unwrap();
    let fold = make_folds(&dataset.meta, 0).unwrap();
    Fixture { _dir: dir, dataset, fold, vocab }
}

fn episodes(f: &Fixture, n: usize, seed: u64) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| sample_episode(&f.dataset, &f.fold, Split::Train, 1, &mut rng).unwrap())
        .collect()
}

fn pipeline(f: &Fixture, cfg: ModelConfig, seed: u64) -> Pipeline {
    Pipeline::new(cfg, f.vocab.clone(), seed, DType::F32).unwrap()
}

fn logits(p: &Pipeline, eps: &[Episode]) -> Vec<f32> {
    let out = p.forward(eps, GenerationMode::TeacherForced).unwrap();
    out.mask_logits.logits.flatten_all().unwrap().to_vec1().unwrap()
}

fn train_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        steps_per_epoch: steps,
        batch_size: 2,
        learning_rate: 1e-3,
        schedule: Schedule::Constant,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn forward_shapes_for_every_ablation() {
    let f = fixture();
    let eps = episodes(&f, 2, 0);
    for ablation in [Ablation::Full, Ablation::SemanticOnly, Ablation::VisualOnly] {
        let p = pipeline(&f, miniature_config().with_ablation(ablation), 0);
        let out = p.forward(&eps, GenerationMode::TeacherForced).unwrap();
        assert_eq!(out.mask_logits.logits.dims(), &[2, 64, 64], "{ablation:?}");
        assert_eq!(out.fallbacks.len(), 2);
        assert_eq!(out.text.is_empty(), ablation == Ablation::VisualOnly);
        let masks = out.mask_logits.to_masks(0.0).unwrap();
        assert!(masks.iter().all(|m| m.height == 64 && m.width == 64));
    }
}

#[test]
fn both_prompts_disabled_is_rejected() {
    let f = fixture();
    let mut cfg = miniature_config();
    cfg.use_semantic = false;
    cfg.use_visual = false;
    assert!(Pipeline::new(cfg, f.vocab.clone(), 0, DType::F32).is_err());
}

#[test]
fn forward_is_deterministic_and_ablations_differ() {
    let f = fixture();
    let eps = episodes(&f, 2, 1);
    let a = pipeline(&f, miniature_config(), 3);
    let b = pipeline(&f, miniature_config(), 3);
    assert_eq!(a.store().checksum().unwrap(), b.store().checksum().unwrap());
    let full = logits(&a, &eps);
    assert_eq!(full, logits(&b, &eps));
    let mut c = pipeline(&f, miniature_config(), 3);
    c.set_ablation(Ablation::SemanticOnly);
    assert_ne!(full, logits(&c, &eps));
    assert_ne!(a.store().checksum().unwrap(), pipeline(&f, miniature_config(), 4).store().checksum().unwrap());
}

#[test]
fn frozen_backbone_keeps_its_checksum() {
    let f = fixture();
    let p = pipeline(&f, miniature_config(), 0);
    let before: BTreeMap<ParamGroup, String> = ParamGroup::ALL
        .iter()
        .map(|&g| (g, p.store().checksum_group(g).unwrap()))
        .collect();
    let mut cfg = train_cfg(2);
    cfg.freeze_backbone = true;
    let mut t = Trainer::new(cfg, None).unwrap();
    t.run(&p, &f.dataset, &f.fold).unwrap();
    assert_eq!(p.store().checksum_group(ParamGroup::Backbone).unwrap(), before[&ParamGroup::Backbone]);
    for g in [ParamGroup::Decoder, ParamGroup::Matching, ParamGroup::SemProj] {
        assert_ne!(p.store().checksum_group(g).unwrap(), before[&g], "{g:?} should train");
    }
}

#[test]
fn overfits_a_fixed_batch() {
    let f = fixture();
    let p = pipeline(&f, miniature_config(), 0);
    let eps = episodes(&f, 2, 2);
    let mut cfg = train_cfg(1);
    cfg.learning_rate = 3e-3;
    let mut t = Trainer::new(cfg, None).unwrap();
    let first = t.train_step(&p, &eps).unwrap().total;
    let mut last = first;
    for _ in 0..199 {
        last = t.train_step(&p, &eps).unwrap().total;
    }
    assert!(last < 0.5 * first, "loss {first} -> {last}");
    assert_eq!(t.step_count(), 200);
}

#[test]
fn training_is_reproducible_and_resume_is_seamless() {
    let f = fixture();
    let straight = pipeline(&f, miniature_config(), 0);
    let mut cfg = train_cfg(2);
    cfg.epochs = 2;
    let mut t = Trainer::new(cfg.clone(), None).unwrap();
    let full_hist = t.run(&straight, &f.dataset, &f.fold).unwrap().to_vec();

    let again = pipeline(&f, miniature_config(), 0);
    let mut t2 = Trainer::new(cfg.clone(), None).unwrap();
    assert_eq!(t2.run(&again, &f.dataset, &f.fold).unwrap(), &full_hist[..]);
    assert_eq!(straight.store().checksum().unwrap(), again.store().checksum().unwrap());

    // stop after one epoch, round-trip through a checkpoint file, continue
    let dir = tempfile::tempdir().unwrap();
    let halfway = pipeline(&f, miniature_config(), 0);
    let mut first = cfg.clone();
    first.epochs = 1;
    let mut t3 = Trainer::new(first, None).unwrap();
    t3.run(&halfway, &f.dataset, &f.fold).unwrap();
    let path = dir.path().join("mid.safetensors");
    t3.checkpoint(&halfway, Some(f.dataset.name())).unwrap().save(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    assert_eq!((ckpt.step, ckpt.epoch), (2, 1));
    let resumed = ckpt.to_pipeline().unwrap();
    let mut t4 = Trainer::resume(cfg, &ckpt, None).unwrap();
    let tail = t4.run(&resumed, &f.dataset, &f.fold).unwrap();
    assert_eq!(tail, &full_hist[2..]);
    assert_eq!(resumed.store().checksum().unwrap(), straight.store().checksum().unwrap());
}

#[test]
fn evaluator_bounds_and_pipeline_is_read_only() {
    let f = fixture();
    let protocol = EvalProtocol {
        episodes: 6,
        seeds: 2,
        ..EvalProtocol::default()
    };
    let oracle = evaluate_fold(&mut OracleModel, &f.dataset, &f.fold, &protocol, serde_json::Value::Null).unwrap();
    assert_eq!(oracle.mean_miou, 1.0);
    let bg = evaluate_fold(&mut BackgroundModel, &f.dataset, &f.fold, &protocol, serde_json::Value::Null).unwrap();
    assert_eq!(bg.mean_miou, 0.0);
    assert_eq!(bg.trace.len(), 12);
    assert!(bg.trace.iter().all(|r| f.fold.classes(Split::Test).contains(&r.class_id)));

    let p = pipeline(&f, miniature_config(), 0);
    let before = p.store().checksum().unwrap();
    for k in [1, 3] {
        let protocol = EvalProtocol { k, episodes: 2, seeds: 1, ..EvalProtocol::default() };
        let mut model = PipelineModel::new(&p);
        let r = evaluate_fold(&mut model, &f.dataset, &f.fold, &protocol, serde_json::Value::Null).unwrap();
        assert!((0.0..=1.0).contains(&r.mean_miou));
        assert_eq!(r.k, k);
    }
    assert_eq!(p.store().checksum().unwrap(), before);
}
