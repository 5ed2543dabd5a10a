//! Two-stage tuning: pre-train modules on a source task, save the bank, then
//! initialise downstream modules from it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{fill_modules, BankKind, ModuleCheckpoint, Provenance};
use crate::data::{Dataset, FewShotEpisode};
use crate::error::{Error, Result};
use crate::petuning::{attach, PetConfig, PetMethod, PetModules, PetParams};
use crate::tensor::Tensor;
use crate::trainer::{train, Model, RunRecord, TrainSpec};
use crate::vit::{SharedBackbone, ViTConfig};

/// Default number of prompt tokens trained in stage 1.
pub const DEFAULT_BANK_TOKENS: usize = 16;

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub checkpoint: ModuleCheckpoint,
    /// Stage-1 modules including their source-task head.
    pub pet: PetParams,
    pub record: RunRecord,
}

pub fn source_task_id(ds: &Dataset) -> String {
    let ids: Vec<String> = ds
        .fingerprint
        .class_ids
        .iter()
        .map(|c| c.to_string())
        .collect();
    format!(
        "dataset/{}/seed={}/classes={}/m={}",
        ds.fingerprint
            .family
            .map(|f| f.as_str())
            .unwrap_or("external"),
        ds.fingerprint.seed,
        ids.join(","),
        ds.fingerprint.count
    )
}

/// Stage 1: trains freshly attached modules (and a source head) on `source`
/// with the backbone frozen. For prompt methods `cfg.prompt_tokens` is the
/// bank size.
pub fn pretrain_modules(
    backbone: &SharedBackbone,
    cfg: &PetConfig,
    source: &Dataset,
    spec: &TrainSpec,
) -> Result<Pretrained> {
    source.validate()?;
    if source.num_classes() < 2 {
        return Err(Error::Data("source task needs at least 2 classes".into()));
    }
    let pet = attach(cfg, &backbone.config, source.num_classes(), spec.seed)?;
    let mut model = Model::petuning(backbone.clone(), pet)?;
    let record = train(&mut model, source, None, spec)?;
    let pet = model.pet.expect("petuning model keeps its modules");
    let checkpoint = ModuleCheckpoint::from_pet(
        &pet,
        &backbone.config,
        Some(Provenance {
            seed: spec.seed,
            source_task: source_task_id(source),
            steps: spec.steps,
        }),
    )
    .with_head(&pet);
    Ok(Pretrained {
        checkpoint,
        pet,
        record,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadType {
    /// First `k` bank tokens of each layer.
    Sequential,
    /// Per-layer bank mean, replicated `k` times.
    Average,
}

impl LoadType {
    pub fn as_str(self) -> &'static str {
        match self {
            LoadType::Sequential => "sequential",
            LoadType::Average => "average",
        }
    }
}

impl fmt::Display for LoadType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LoadType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sequential" | "seq" => Ok(LoadType::Sequential),
            "average" | "avg" | "mean" => Ok(LoadType::Average),
            other => Err(Error::config(
                "load",
                format!("unknown load type `{other}` (expected sequential or average)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadSpec {
    pub load_type: LoadType,
    /// `VptDeep` or `VptShallow`.
    pub method: PetMethod,
    pub k: usize,
}

impl LoadSpec {
    pub fn new(load_type: LoadType, method: PetMethod, k: usize) -> Self {
        Self {
            load_type,
            method,
            k,
        }
    }
}

/// Builds the `[rows, k, d]` prompt tensor selected by `spec` from an
/// `[L, N, d]` bank.
pub fn select_prompts(bank: &Tensor, spec: &LoadSpec) -> Result<Tensor> {
    if !spec.method.is_prompt() {
        return Err(Error::config(
            "method",
            format!("`{}` does not use prompts", spec.method),
        ));
    }
    if spec.k == 0 {
        return Err(Error::config("k", "must be at least 1"));
    }
    let (layers, n, d) = (bank.shape()[0], bank.shape()[1], bank.shape()[2]);
    let rows = match spec.method {
        PetMethod::VptShallow => 1,
        _ => layers,
    };
    let k = spec.k;
    let mut out = Vec::with_capacity(rows * k * d);
    for l in 0..rows {
        let layer = &bank.data()[l * n * d..(l + 1) * n * d];
        match spec.load_type {
            LoadType::Sequential => {
                if k > n {
                    return Err(Error::config(
                        "k",
                        format!("sequential loading needs k <= N, got k={k} with a bank of N={n} tokens"),
                    ));
                }
                out.extend_from_slice(&layer[..k * d]);
            }
            LoadType::Average => {
                let mut mean = vec![0.0; d];
                for token in layer.chunks(d) {
                    for (m, x) in mean.iter_mut().zip(token) {
                        *m += x;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                for _ in 0..k {
                    out.extend_from_slice(&mean);
                }
            }
        }
    }
    Tensor::new(vec![rows, k, d], out)
}

/// Initialises `k` downstream prompts from a stage-1 bank, with a fresh head.
pub fn load_prompts(
    ckpt: &ModuleCheckpoint,
    spec: &LoadSpec,
    vit: &ViTConfig,
    num_classes: usize,
) -> Result<PetParams> {
    ckpt.check_backbone(vit)?;
    let bank = ckpt.prompt_bank()?;
    if spec.method == PetMethod::VptDeep && bank.shape()[0] != vit.num_layers {
        return Err(Error::Incompatible(format!(
            "deep loading needs a bank with {} layers, found {}",
            vit.num_layers,
            bank.shape()[0]
        )));
    }
    let prompts = select_prompts(bank, spec)?;
    let cfg = PetConfig::new(spec.method).with_prompt_tokens(spec.k);
    let mut pet = attach(&cfg, vit, num_classes, 0)?;
    pet.modules = PetModules::Prompts(prompts.with_requires_grad(true));
    Ok(pet)
}

/// Initialises Adapter or LoRA modules from a bank of identical dimensions.
pub fn load_modules(
    ckpt: &ModuleCheckpoint,
    cfg: &PetConfig,
    vit: &ViTConfig,
    num_classes: usize,
) -> Result<PetParams> {
    if cfg.method.is_prompt() {
        return Err(Error::config(
            "method",
            "prompt banks are loaded with load_prompts",
        ));
    }
    if ckpt.kind != BankKind::for_method(cfg.method) {
        return Err(Error::Incompatible(format!(
            "cannot load a {} bank into {} modules",
            ckpt.kind.as_str(),
            cfg.method
        )));
    }
    ckpt.check_backbone(vit)?;
    let mut pet = attach(cfg, vit, num_classes, 0)?;
    fill_modules(&mut pet, ckpt)?;
    Ok(pet)
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub pet: PetParams,
    pub record: RunRecord,
}

impl TuneOutcome {
    pub fn eval_accuracy(&self) -> f64 {
        self.record.eval_accuracy.unwrap_or(0.0)
    }
}

/// Stage 2: few-shot tuning of `pet` on the episode's train split, scored on
/// its held-out split.
pub fn downstream_tune(
    backbone: &SharedBackbone,
    pet: PetParams,
    episode: &FewShotEpisode,
    spec: &TrainSpec,
) -> Result<TuneOutcome> {
    if episode.train.is_empty() || episode.eval.is_empty() {
        return Err(Error::Data("episode has an empty split".into()));
    }
    let mut model = Model::petuning(backbone.clone(), pet)?;
    let record = train(&mut model, &episode.train, Some(&episode.eval), spec)?;
    Ok(TuneOutcome {
        pet: model.pet.expect("petuning model keeps its modules"),
        record,
    })
}
