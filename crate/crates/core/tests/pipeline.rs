//! Stage 1 to stage 2 through files, plus trainer contracts that need a real
//! model.

use std::sync::Arc;

use pvp_core::data::{generate, sample_episode, Family, GenerateSpec};
use pvp_core::petuning::{attach, freeze_backbone};
use pvp_core::trainer::{evaluate, grid_search, train, Grid};
use pvp_core::vit::{init_backbone, SharedBackbone};
use pvp_core::workflow::{downstream_tune, load_modules, load_prompts, pretrain_modules};
use pvp_core::{
    Dataset, ErrorKind, LoadSpec, LoadType, Model, ModuleCheckpoint, PetConfig, PetMethod,
    TrainSpec, ViTConfig,
};

fn vit_cfg() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2,
        num_classes: 4,
        max_seq_len: 64,
    }
}

fn backbone() -> SharedBackbone {
    let mut vit = init_backbone(&vit_cfg(), 0).unwrap();
    freeze_backbone(&mut vit);
    Arc::new(vit)
}

fn data(classes: Vec<usize>, seed: u64, spc: usize) -> Dataset {
    generate(&GenerateSpec {
        family: Family::Parts,
        seed,
        classes,
        samples_per_class: spc,
        image_size: 8,
        channels: 1,
        noise_std: 0.1,
    })
    .unwrap()
}

fn spec(steps: usize, lr: f64) -> TrainSpec {
    TrainSpec {
        steps,
        batch_size: 16,
        lr,
        ..TrainSpec::default()
    }
}

#[test]
fn pretrain_save_load_tune_for_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let bb = backbone();
    let source = data(vec![0, 2, 5, 7], 1, 8);
    let target = data(vec![1, 3, 4, 6], 2, 6);
    let episode = sample_episode(&target, 2, 0).unwrap();
    for method in PetMethod::ALL {
        let cfg = PetConfig::new(method).with_prompt_tokens(6);
        let pre = pretrain_modules(&bb, &cfg, &source, &spec(5, 1e-2)).unwrap();
        assert!(pre.record.backbone_unchanged());
        let path = dir.path().join(format!("{method}.pvpc"));
        pre.checkpoint.save(&path).unwrap();
        let ck = ModuleCheckpoint::load(&path).unwrap();
        let pet = if method.is_prompt() {
            load_prompts(
                &ck,
                &LoadSpec::new(LoadType::Sequential, method, 3),
                &bb.config,
                4,
            )
            .unwrap()
        } else {
            load_modules(&ck, &cfg, &bb.config, 4).unwrap()
        };
        let out = downstream_tune(&bb, pet, &episode, &spec(5, 1e-2)).unwrap();
        assert!(out.record.backbone_unchanged(), "{method}");
        assert_eq!(out.record.losses.len(), 5);
    }
}

#[test]
fn loading_into_the_wrong_backbone_is_rejected() {
    let bb = backbone();
    let source = data(vec![0, 1], 1, 4);
    let cfg = PetConfig::new(PetMethod::Lora);
    let pre = pretrain_modules(&bb, &cfg, &source, &spec(1, 1e-2)).unwrap();
    let other = ViTConfig {
        embed_dim: 8,
        ..vit_cfg()
    };
    let err = load_modules(&pre.checkpoint, &cfg, &other, 2).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
    let adapter = PetConfig::new(PetMethod::Adapter);
    assert!(load_modules(&pre.checkpoint, &adapter, &bb.config, 2).is_err());
}

#[test]
fn zero_steps_gives_tie_broken_chance() {
    let bb = backbone();
    let target = data(vec![1, 3, 4, 6], 2, 6);
    let episode = sample_episode(&target, 1, 0).unwrap();
    let pet = attach(&PetConfig::new(PetMethod::VptDeep), &bb.config, 4, 0).unwrap();
    let out = downstream_tune(&bb, pet, &episode, &spec(0, 1e-2)).unwrap();
    // zero head: uniform logits, argmax picks class 0, balanced eval split
    assert_eq!(out.eval_accuracy(), 0.25);
}

#[test]
fn zero_lr_leaves_parameters_untouched() {
    let bb = backbone();
    let ds = data(vec![0, 1], 1, 4);
    let pet = attach(&PetConfig::new(PetMethod::Adapter), &bb.config, 2, 3).unwrap();
    let mut model = Model::petuning(bb.clone(), pet.clone()).unwrap();
    train(&mut model, &ds, None, &spec(4, 0.0)).unwrap();
    let after = model.pet.unwrap();
    for ((n, a), (_, b)) in pet.named_tensors().into_iter().zip(after.named_tensors()) {
        assert_eq!(a.data(), b.data(), "{n}");
    }
}

#[test]
fn training_is_bitwise_deterministic_and_reduces_loss() {
    let bb = backbone();
    let ds = data(vec![0, 15], 1, 16);
    let run = || {
        let pet = attach(&PetConfig::new(PetMethod::Lora), &bb.config, 2, 1).unwrap();
        let mut model = Model::petuning(bb.clone(), pet).unwrap();
        train(&mut model, &ds, None, &spec(40, 1e-2)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.losses, b.losses);
    let head: f64 = a.losses[..5].iter().sum();
    let tail: f64 = a.losses[a.losses.len() - 5..].iter().sum();
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn evaluation_matches_a_recount_of_predictions() {
    let bb = backbone();
    let ds = data(vec![0, 5, 10], 4, 5);
    let pet = attach(&PetConfig::new(PetMethod::VptShallow), &bb.config, 3, 2).unwrap();
    let mut model = Model::petuning(bb, pet).unwrap();
    train(&mut model, &ds, None, &spec(10, 3e-2)).unwrap();
    let ev = evaluate(&model, &ds).unwrap();
    let correct = ev
        .predictions
        .iter()
        .zip(&ds.labels)
        .filter(|(p, l)| p == l)
        .count();
    assert_eq!(ev.accuracy, correct as f64 / ds.len() as f64);
    for c in 0..3 {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        let hits = idx.iter().filter(|&&i| ev.predictions[i] == c).count();
        assert_eq!(ev.per_class_accuracy[c], hits as f64 / idx.len() as f64);
    }
}

#[test]
fn full_finetune_changes_the_backbone() {
    let ds = data(vec![0, 1], 1, 4);
    let mut model = Model::full(init_backbone(&vit_cfg(), 0).unwrap(), 2);
    let rec = train(&mut model, &ds, None, &spec(2, 1e-2)).unwrap();
    assert!(!rec.backbone_unchanged());
}

#[test]
fn grid_search_prefers_a_good_lr_over_a_divergent_one() {
    let bb = backbone();
    let ds = data(vec![0, 15], 1, 16);
    let pet = attach(&PetConfig::new(PetMethod::Lora), &bb.config, 2, 1).unwrap();
    let template = Model::petuning(bb, pet).unwrap();
    let grid = Grid {
        lrs: vec![1e-2, 1e300],
        weight_decays: vec![0.0],
    };
    let res = grid_search(&template, &ds, &ds, &spec(20, 0.0), &grid).unwrap();
    assert_eq!(res.table.len(), 2);
    assert_eq!(res.best_row().lr, 1e-2);
    let single = Grid {
        lrs: vec![3e-3],
        weight_decays: vec![1e-4],
    };
    let one = grid_search(&template, &ds, &ds, &spec(3, 0.0), &single).unwrap();
    assert_eq!((one.best, one.table.len()), (0, 1));
}
