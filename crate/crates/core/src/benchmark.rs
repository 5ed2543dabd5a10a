//! Scratch-vs-pre-trained comparison on the synthetic transfer task.
//!
//! Stages:
//! 0. the backbone is trained end to end on an upstream task (whole-image
//!    patterns) and then frozen; with `upstream.steps = 0` it stays random;
//! 1. each method's modules are pre-trained on the source half of the
//!    two-part class space;
//! 2. few-shot episodes from the disjoint target half are tuned from scratch
//!    and from the stage-1 bank, paired by seed.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModuleCheckpoint;
use crate::data::{
    generate, sample_episode, source_target_partition, AugmentConfig, Dataset, Family,
    GenerateSpec, PARTS_CLASSES,
};
use crate::error::{Error, Result};
use crate::petuning::{attach, freeze_backbone, PetConfig, PetMethod, PetParams};
use crate::trainer::{train, Model, TrainSpec};
use crate::vit::{init_backbone, SharedBackbone, ViTConfig};
use crate::workflow::{
    downstream_tune, load_modules, load_prompts, pretrain_modules, LoadSpec, LoadType,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Optimiser settings of one stage; the seed comes from the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl StageSpec {
    pub fn train_spec(&self, seed: u64) -> TrainSpec {
        TrainSpec {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed,
            augment: AugmentConfig::disabled(),
        }
    }
}

/// How the frozen backbone is produced: a seeded init, optionally followed
/// by full training on the upstream patterns task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub seed: u64,
    pub upstream: StageSpec,
    pub upstream_samples_per_class: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            upstream: StageSpec {
                steps: 800,
                batch_size: 32,
                lr: 3e-3,
                weight_decay: 0.0,
            },
            upstream_samples_per_class: 32,
        }
    }
}

/// Generated upstream, source and target tasks. Source and target are the
/// two halves of the parts class space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub seed: u64,
    pub noise_std: f64,
    pub source_samples_per_class: usize,
    pub target_samples_per_class: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            noise_std: 0.5,
            source_samples_per_class: 128,
            target_samples_per_class: 64,
        }
    }
}

fn task_spec(
    vit: &ViTConfig,
    noise_std: f64,
    family: Family,
    seed: u64,
    classes: Vec<usize>,
    spc: usize,
) -> GenerateSpec {
    GenerateSpec {
        family,
        seed,
        classes,
        samples_per_class: spc,
        image_size: vit.image_size,
        channels: vit.channels,
        noise_std,
    }
}

/// All sixteen pattern classes.
pub fn upstream_task(
    vit: &ViTConfig,
    backbone: &BackboneSpec,
    tasks: &TaskSpec,
) -> Result<Dataset> {
    generate(&task_spec(
        vit,
        tasks.noise_std,
        Family::Patterns,
        tasks.seed.wrapping_add(2),
        (0..16).collect(),
        backbone.upstream_samples_per_class,
    ))
}

pub fn source_task(vit: &ViTConfig, tasks: &TaskSpec) -> Result<Dataset> {
    let (classes, _) = source_target_partition(PARTS_CLASSES);
    generate(&task_spec(
        vit,
        tasks.noise_std,
        Family::Parts,
        tasks.seed,
        classes,
        tasks.source_samples_per_class,
    ))
}

pub fn target_task(vit: &ViTConfig, tasks: &TaskSpec) -> Result<Dataset> {
    let (_, classes) = source_target_partition(PARTS_CLASSES);
    generate(&task_spec(
        vit,
        tasks.noise_std,
        Family::Parts,
        tasks.seed.wrapping_add(1),
        classes,
        tasks.target_samples_per_class,
    ))
}

/// Stage 0: the frozen backbone every PETuning run shares.
pub fn prepare_backbone(
    vit: &ViTConfig,
    backbone: &BackboneSpec,
    tasks: &TaskSpec,
) -> Result<SharedBackbone> {
    let mut vit_cfg = vit.clone();
    vit_cfg.num_classes = 16;
    let params = init_backbone(&vit_cfg, backbone.seed)?;
    let mut model = Model::full(params, 16);
    if backbone.upstream.steps > 0 {
        let upstream = upstream_task(vit, backbone, tasks)?;
        train(
            &mut model,
            &upstream,
            None,
            &backbone.upstream.train_spec(backbone.seed),
        )?;
    }
    let mut params = Arc::try_unwrap(model.backbone).unwrap_or_else(|shared| (*shared).clone());
    freeze_backbone(&mut params);
    Ok(Arc::new(params))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainOverride {
    pub stage: StageSpec,
    /// Uses only the first this-many source samples of each class.
    #[serde(default)]
    pub source_samples_per_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub vit: ViTConfig,
    pub backbone: BackboneSpec,
    pub tasks: TaskSpec,
    /// Stage-1 prompt bank size `N`.
    pub bank_tokens: usize,
    /// Prompt count of the main scratch-vs-pre-trained comparison.
    pub prompt_tokens: usize,
    pub pretrain: StageSpec,
    /// Per-method replacements for `pretrain`.
    #[serde(default)]
    pub pretrain_overrides: BTreeMap<PetMethod, PretrainOverride>,
    pub pretrain_seed: u64,
    pub tune: StageSpec,
    pub methods: Vec<PetMethod>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub k_sweep: Vec<usize>,
    pub sweep_shots: usize,
    pub loading_shots: usize,
    pub loading_k: usize,
    pub include_full: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            vit: ViTConfig::default(),
            backbone: BackboneSpec::default(),
            tasks: TaskSpec::default(),
            bank_tokens: 16,
            prompt_tokens: 16,
            pretrain: StageSpec {
                steps: 300,
                batch_size: 32,
                lr: 1e-2,
                weight_decay: 0.0,
            },
            // Without decay a jointly trained bank's leading tokens rely on
            // the rest of the bank and transfer poorly on their own.
            pretrain_overrides: [PetMethod::VptDeep, PetMethod::VptShallow]
                .into_iter()
                .map(|m| {
                    (
                        m,
                        PretrainOverride {
                            stage: StageSpec {
                                steps: 300,
                                batch_size: 32,
                                lr: 1e-2,
                                weight_decay: 1.0,
                            },
                            source_samples_per_class: Some(32),
                        },
                    )
                })
                .collect(),
            pretrain_seed: 3,
            tune: StageSpec {
                steps: 50,
                batch_size: 64,
                lr: 3e-3,
                weight_decay: 0.0,
            },
            methods: vec![PetMethod::VptDeep, PetMethod::Adapter, PetMethod::Lora],
            shots: vec![1, 2],
            seeds: vec![0, 1, 2, 3, 4],
            k_sweep: vec![1, 2, 4, 8],
            sweep_shots: 4,
            loading_shots: 4,
            loading_k: 16,
            include_full: false,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.methods.is_empty() || self.shots.is_empty() || self.seeds.is_empty() {
            return Err(Error::config(
                "bench",
                "methods, shots and seeds must be nonempty",
            ));
        }
        if self.bank_tokens == 0 || self.prompt_tokens == 0 || self.loading_k == 0 {
            return Err(Error::config(
                "bank_tokens",
                "prompt counts must be positive",
            ));
        }
        if self.prompt_tokens > self.bank_tokens || self.loading_k > self.bank_tokens {
            return Err(Error::config(
                "prompt_tokens",
                format!(
                    "sequential loading needs k <= bank_tokens ({})",
                    self.bank_tokens
                ),
            ));
        }
        if let Some((m, o)) = self.pretrain_overrides.iter().find(|(_, o)| {
            o.source_samples_per_class
                .is_some_and(|n| n == 0 || n > self.tasks.source_samples_per_class)
        }) {
            return Err(Error::config(
                "pretrain_overrides",
                format!(
                    "{m}: source_samples_per_class {:?} must lie in 1..={}",
                    o.source_samples_per_class, self.tasks.source_samples_per_class
                ),
            ));
        }
        if let Some(&k) = self
            .k_sweep
            .iter()
            .find(|&&k| k == 0 || k > self.bank_tokens)
        {
            return Err(Error::config(
                "k_sweep",
                format!("k={k} is outside 1..={}", self.bank_tokens),
            ));
        }
        let most_shots = self
            .shots
            .iter()
            .chain([&self.sweep_shots, &self.loading_shots])
            .max()
            .copied()
            .unwrap_or(1);
        if self.tasks.target_samples_per_class <= most_shots {
            return Err(Error::config(
                "target_samples_per_class",
                format!("needs more than {most_shots} samples per class to leave an eval split"),
            ));
        }
        Ok(())
    }

    pub fn pretrain_spec(&self, method: PetMethod) -> StageSpec {
        self.pretrain_overrides
            .get(&method)
            .map(|o| o.stage)
            .unwrap_or(self.pretrain)
    }

    /// Source samples per class seen by `method` in stage 1.
    pub fn source_size(&self, method: PetMethod) -> usize {
        self.pretrain_overrides
            .get(&method)
            .and_then(|o| o.source_samples_per_class)
            .unwrap_or(self.tasks.source_samples_per_class)
    }

    fn needs_prompts(&self) -> bool {
        self.methods.iter().any(|m| m.is_prompt()) || !self.k_sweep.is_empty()
    }

    /// Method whose bank drives the prompt-length and loading experiments.
    fn prompt_method(&self) -> PetMethod {
        self.methods
            .iter()
            .copied()
            .find(|m| m.is_prompt())
            .unwrap_or(PetMethod::VptDeep)
    }

    /// Methods that need a stage-1 bank.
    pub fn bank_methods(&self) -> Vec<PetMethod> {
        let mut out: Vec<PetMethod> = self.methods.clone();
        if self.needs_prompts() && !out.contains(&self.prompt_method()) {
            out.push(self.prompt_method());
        }
        out.sort_by_key(|m| m.as_str());
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneSummary {
    pub method: PetMethod,
    pub train_accuracy: f64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub backbone_unchanged: bool,
}

/// The first `n` samples of every class.
pub fn per_class_prefix(ds: &Dataset, n: usize) -> Dataset {
    let mut seen = vec![0usize; ds.num_classes()];
    let keep: Vec<usize> = (0..ds.len())
        .filter(|&i| {
            let c = &mut seen[ds.labels[i]];
            *c += 1;
            *c <= n
        })
        .collect();
    ds.subset(&keep)
}

/// Stage 1 for every method that needs a bank.
pub fn pretrain_banks(
    cfg: &BenchConfig,
    backbone: &SharedBackbone,
    source: &Dataset,
) -> Result<(BTreeMap<PetMethod, ModuleCheckpoint>, Vec<StageOneSummary>)> {
    let outs = cfg
        .bank_methods()
        .into_par_iter()
        .map(|method| {
            let pet_cfg = PetConfig::new(method).with_prompt_tokens(cfg.bank_tokens);
            let source = per_class_prefix(source, cfg.source_size(method));
            let pre = pretrain_modules(
                backbone,
                &pet_cfg,
                &source,
                &cfg.pretrain_spec(method).train_spec(cfg.pretrain_seed),
            )?;
            let summary = StageOneSummary {
                method,
                train_accuracy: pre.record.train_accuracy,
                first_loss: pre.record.losses.first().copied(),
                last_loss: pre.record.losses.last().copied(),
                backbone_unchanged: pre.record.backbone_unchanged(),
            };
            Ok((method, pre.checkpoint, summary))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut banks = BTreeMap::new();
    let mut summaries = Vec::new();
    for (m, ck, s) in outs {
        banks.insert(m, ck);
        summaries.push(s);
    }
    Ok((banks, summaries))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Ordering,
    PromptLength,
    Loading,
    Full,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Ordering => "ordering",
            Experiment::PromptLength => "prompt_length",
            Experiment::Loading => "loading",
            Experiment::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Scratch,
    #[serde(rename = "pvp")]
    Pretrained,
}

impl Init {
    pub fn as_str(self) -> &'static str {
        match self {
            Init::Scratch => "scratch",
            Init::Pretrained => "pvp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Job {
    experiment: Experiment,
    /// `None` for the full fine-tuning baseline.
    method: Option<PetMethod>,
    init: Init,
    load: Option<LoadType>,
    shots: usize,
    k: Option<usize>,
    seed: u64,
}

/// One downstream run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub experiment: Experiment,
    pub method: String,
    pub init: Init,
    pub load: Option<LoadType>,
    pub shots: usize,
    pub k: Option<usize>,
    pub seed: u64,
    pub eval_accuracy: f64,
    pub train_accuracy: f64,
    pub final_loss: Option<f64>,
    pub backbone_unchanged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub experiment: Experiment,
    pub method: String,
    pub init: Init,
    pub load: Option<LoadType>,
    pub shots: usize,
    pub k: Option<usize>,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub config: BenchConfig,
    pub backbone_digest: String,
    pub stage_one: Vec<StageOneSummary>,
    pub runs: Vec<RunRow>,
    pub summary: Vec<CellSummary>,
    pub checks: Vec<Check>,
    /// Not serialized, so reports of identical runs are identical bytes.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl BenchReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn jobs(cfg: &BenchConfig) -> Vec<Job> {
    let mut jobs = Vec::new();
    let pm = cfg.prompt_method();
    let job = |experiment, method, init, load, shots, k, seed| Job {
        experiment,
        method,
        init,
        load,
        shots,
        k,
        seed,
    };
    for &method in &cfg.methods {
        let k = method.is_prompt().then_some(cfg.prompt_tokens);
        let load = method.is_prompt().then_some(LoadType::Sequential);
        for &shots in &cfg.shots {
            for &seed in &cfg.seeds {
                jobs.push(job(
                    Experiment::Ordering,
                    Some(method),
                    Init::Scratch,
                    None,
                    shots,
                    k,
                    seed,
                ));
                jobs.push(job(
                    Experiment::Ordering,
                    Some(method),
                    Init::Pretrained,
                    load,
                    shots,
                    k,
                    seed,
                ));
            }
        }
    }
    for &k in &cfg.k_sweep {
        for &seed in &cfg.seeds {
            jobs.push(job(
                Experiment::PromptLength,
                Some(pm),
                Init::Scratch,
                None,
                cfg.sweep_shots,
                Some(k),
                seed,
            ));
            jobs.push(job(
                Experiment::PromptLength,
                Some(pm),
                Init::Pretrained,
                Some(LoadType::Sequential),
                cfg.sweep_shots,
                Some(k),
                seed,
            ));
        }
    }
    if cfg.needs_prompts() {
        for load in [LoadType::Sequential, LoadType::Average] {
            for &seed in &cfg.seeds {
                jobs.push(job(
                    Experiment::Loading,
                    Some(pm),
                    Init::Pretrained,
                    Some(load),
                    cfg.loading_shots,
                    Some(cfg.loading_k),
                    seed,
                ));
            }
        }
    }
    if cfg.include_full {
        for &shots in &cfg.shots {
            for &seed in &cfg.seeds {
                jobs.push(job(
                    Experiment::Full,
                    None,
                    Init::Scratch,
                    None,
                    shots,
                    None,
                    seed,
                ));
            }
        }
    }
    jobs
}

fn missing_bank(method: PetMethod) -> Error {
    Error::Incompatible(format!(
        "no stage-1 bank for `{method}`; run `pvp pretrain --method {method}` first"
    ))
}

fn initial_modules(
    job: &Job,
    method: PetMethod,
    backbone: &SharedBackbone,
    banks: &BTreeMap<PetMethod, ModuleCheckpoint>,
    num_classes: usize,
) -> Result<PetParams> {
    let vit = &backbone.config;
    let cfg = PetConfig::new(method).with_prompt_tokens(job.k.unwrap_or(1));
    match job.init {
        Init::Scratch => attach(&cfg, vit, num_classes, job.seed),
        Init::Pretrained => {
            let bank = banks.get(&method).ok_or_else(|| missing_bank(method))?;
            if method.is_prompt() {
                let spec = LoadSpec::new(
                    job.load.unwrap_or(LoadType::Sequential),
                    method,
                    cfg.prompt_tokens,
                );
                load_prompts(bank, &spec, vit, num_classes)
            } else {
                load_modules(bank, &cfg, vit, num_classes)
            }
        }
    }
}

fn run_job(
    job: &Job,
    cfg: &BenchConfig,
    backbone: &SharedBackbone,
    banks: &BTreeMap<PetMethod, ModuleCheckpoint>,
    target: &Dataset,
) -> Result<RunRow> {
    let episode = sample_episode(target, job.shots, job.seed)?;
    let spec = cfg.tune.train_spec(job.seed);
    let c = target.num_classes();
    let record = match job.method {
        Some(method) => {
            let pet = initial_modules(job, method, backbone, banks, c)?;
            downstream_tune(backbone, pet, &episode, &spec)?.record
        }
        None => {
            let mut model = Model::full((**backbone).clone(), c);
            train(&mut model, &episode.train, Some(&episode.eval), &spec)?
        }
    };
    Ok(RunRow {
        experiment: job.experiment,
        method: job.method.map(|m| m.as_str()).unwrap_or("full").to_string(),
        init: job.init,
        load: job.load,
        shots: job.shots,
        k: job.k,
        seed: job.seed,
        eval_accuracy: record.eval_accuracy.unwrap_or(f64::NAN),
        train_accuracy: record.train_accuracy,
        final_loss: record.losses.last().copied(),
        backbone_unchanged: record.backbone_unchanged(),
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

type CellKey = (
    Experiment,
    String,
    Init,
    Option<LoadType>,
    usize,
    Option<usize>,
);

pub fn summarize(runs: &[RunRow]) -> Vec<CellSummary> {
    let mut cells: BTreeMap<CellKey, Vec<f64>> = BTreeMap::new();
    for r in runs {
        cells
            .entry((r.experiment, r.method.clone(), r.init, r.load, r.shots, r.k))
            .or_default()
            .push(r.eval_accuracy);
    }
    cells
        .into_iter()
        .map(|((experiment, method, init, load, shots, k), accs)| {
            let (mean, std) = mean_std(&accs);
            CellSummary {
                experiment,
                method,
                init,
                load,
                shots,
                k,
                runs: accs.len(),
                mean,
                std,
            }
        })
        .collect()
}

/// Seeds needed to pass a "wins in at least `fraction` of seeds" check.
fn required_wins(seeds: usize, fraction: f64) -> usize {
    (seeds as f64 * fraction - 1e-9).ceil() as usize
}

fn paired(
    runs: &[RunRow],
    pick_a: impl Fn(&RunRow) -> bool,
    pick_b: impl Fn(&RunRow) -> bool,
) -> Vec<(f64, f64)> {
    let a: BTreeMap<u64, f64> = runs
        .iter()
        .filter(|r| pick_a(r))
        .map(|r| (r.seed, r.eval_accuracy))
        .collect();
    runs.iter()
        .filter(|r| pick_b(r))
        .filter_map(|r| a.get(&r.seed).map(|&x| (x, r.eval_accuracy)))
        .collect()
}

/// The ordering, robustness, loading and freezing checks over finished runs.
pub fn evaluate_checks(cfg: &BenchConfig, runs: &[RunRow]) -> Vec<Check> {
    let mut checks = Vec::new();
    let n = cfg.seeds.len();
    let need = required_wins(n, 0.8);
    for &method in &cfg.methods {
        for &shots in &cfg.shots {
            let sel = |init: Init| {
                move |r: &RunRow| {
                    r.experiment == Experiment::Ordering
                        && r.method == method.as_str()
                        && r.shots == shots
                        && r.init == init
                }
            };
            let pairs = paired(runs, sel(Init::Pretrained), sel(Init::Scratch));
            let wins = pairs.iter().filter(|(p, s)| p > s).count();
            let (pm, _) = mean_std(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let (sm, _) = mean_std(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            checks.push(Check {
                name: format!("ordering/{method}/{shots}-shot"),
                passed: pairs.len() == n && wins >= need,
                detail: format!("pvp beats scratch in {wins}/{n} seeds (need {need}); mean pvp {pm:.4} vs scratch {sm:.4}"),
            });
        }
    }
    if !cfg.k_sweep.is_empty() {
        let acc = |init: Init, seed: u64, k: usize| {
            runs.iter()
                .find(|r| {
                    r.experiment == Experiment::PromptLength
                        && r.init == init
                        && r.seed == seed
                        && r.k == Some(k)
                })
                .map(|r| r.eval_accuracy)
        };
        // Per seed, the spread of accuracy over k; then averaged over seeds.
        let spread = |init: Init| -> Option<f64> {
            let per_seed = cfg
                .seeds
                .iter()
                .map(|&seed| {
                    let curve = cfg
                        .k_sweep
                        .iter()
                        .map(|&k| acc(init, seed, k))
                        .collect::<Option<Vec<_>>>()?;
                    Some(mean_std(&curve).1)
                })
                .collect::<Option<Vec<_>>>()?;
            Some(mean_std(&per_seed).0)
        };
        let mean_curve_std = |init: Init| {
            let curve: Vec<f64> = cfg
                .k_sweep
                .iter()
                .map(|&k| {
                    let accs: Vec<f64> =
                        cfg.seeds.iter().filter_map(|&s| acc(init, s, k)).collect();
                    mean_std(&accs).0
                })
                .collect();
            mean_std(&curve).1
        };
        let (ps, ss) = (spread(Init::Pretrained), spread(Init::Scratch));
        let passed = matches!((ps, ss), (Some(p), Some(s)) if p < s);
        let (ps, ss) = (ps.unwrap_or(f64::NAN), ss.unwrap_or(f64::NAN));
        checks.push(Check {
            name: "prompt_length/robustness".into(),
            passed,
            detail: format!(
                "mean over seeds of the std across k: pvp {ps:.4} vs scratch {ss:.4}; std of the seed-mean curve: pvp {:.4} vs scratch {:.4} (k = {:?}, {}-shot)",
                mean_curve_std(Init::Pretrained),
                mean_curve_std(Init::Scratch),
                cfg.k_sweep,
                cfg.sweep_shots
            ),
        });
    }
    if cfg.needs_prompts() {
        let sel = |load: LoadType| {
            move |r: &RunRow| r.experiment == Experiment::Loading && r.load == Some(load)
        };
        let pairs = paired(runs, sel(LoadType::Sequential), sel(LoadType::Average));
        let wins = pairs.iter().filter(|(s, a)| s >= a).count();
        let need = required_wins(n, 0.6);
        checks.push(Check {
            name: "loading/sequential_vs_average".into(),
            passed: pairs.len() == n && wins >= need,
            detail: format!(
                "sequential >= average in {wins}/{n} seeds (need {need}) at {}-shot, k={}",
                cfg.loading_shots, cfg.loading_k
            ),
        });
    }
    let frozen_ok = runs
        .iter()
        .filter(|r| r.method != "full")
        .all(|r| r.backbone_unchanged);
    let full_ok = runs
        .iter()
        .filter(|r| r.method == "full")
        .all(|r| !r.backbone_unchanged);
    checks.push(Check {
        name: "freezing".into(),
        passed: frozen_ok && full_ok,
        detail: format!(
            "PETuning backbones unchanged: {frozen_ok}; full baseline changed: {full_ok}"
        ),
    });
    let finite = runs.iter().all(|r| r.eval_accuracy.is_finite());
    checks.push(Check {
        name: "completeness".into(),
        passed: finite,
        detail: format!("{} runs, all accuracies finite: {finite}", runs.len()),
    });
    checks
}

/// Stage 2 over every configured cell, given a frozen backbone and banks.
pub fn benchmark_ordering(
    cfg: &BenchConfig,
    backbone: &SharedBackbone,
    banks: &BTreeMap<PetMethod, ModuleCheckpoint>,
    target: &Dataset,
) -> Result<Vec<RunRow>> {
    cfg.validate()?;
    for job in jobs(cfg) {
        if let (Some(m), Init::Pretrained) = (job.method, job.init) {
            if !banks.contains_key(&m) {
                return Err(missing_bank(m));
            }
        }
    }
    jobs(cfg)
        .par_iter()
        .map(|job| run_job(job, cfg, backbone, banks, target))
        .collect()
}

/// All three stages plus checks.
pub fn run(cfg: &BenchConfig) -> Result<BenchReport> {
    run_with_banks(cfg, None)
}

/// Like [`run`], but stage 1 is skipped when `banks` are given; every method
/// that needs one must then be present.
pub fn run_with_banks(
    cfg: &BenchConfig,
    banks: Option<BTreeMap<PetMethod, ModuleCheckpoint>>,
) -> Result<BenchReport> {
    cfg.validate()?;
    let start = Instant::now();
    let backbone = prepare_backbone(&cfg.vit, &cfg.backbone, &cfg.tasks)?;
    let target = target_task(&cfg.vit, &cfg.tasks)?;
    let (banks, stage_one) = match banks {
        Some(banks) => {
            if let Some(m) = cfg
                .bank_methods()
                .into_iter()
                .find(|m| !banks.contains_key(m))
            {
                return Err(missing_bank(m));
            }
            (banks, Vec::new())
        }
        None => pretrain_banks(cfg, &backbone, &source_task(&cfg.vit, &cfg.tasks)?)?,
    };
    let runs = benchmark_ordering(cfg, &backbone, &banks, &target)?;
    let mut checks = evaluate_checks(cfg, &runs);
    let stage_one_frozen = stage_one.iter().all(|s| s.backbone_unchanged);
    if let Some(c) = checks.iter_mut().find(|c| c.name == "freezing") {
        c.passed &= stage_one_frozen;
        c.detail.push_str(&format!(
            "; stage-1 backbones unchanged: {stage_one_frozen}"
        ));
    }
    Ok(BenchReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        backbone_digest: backbone.digest(),
        summary: summarize(&runs),
        stage_one,
        runs,
        checks,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
