//! Replayable commands. Each writes its outputs plus a manifest into one
//! directory; nothing written there depends on wall-clock time.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pvp_core::benchmark::{self, per_class_prefix};
use pvp_core::checkpoint::{BankKind, ModuleCheckpoint};
use pvp_core::data::{sample_episode, DatasetFingerprint};
use pvp_core::petuning::attach;
use pvp_core::trainer::{evaluate, RunRecord};
use pvp_core::vit::SharedBackbone;
use pvp_core::workflow::{downstream_tune, load_modules, load_prompts, pretrain_modules};
use pvp_core::{
    Dataset, LoadSpec, LoadType, Model, PetConfig, PetMethod, PetParams, Tensor, TrainSpec,
};
use serde::Serialize;

use crate::config::Config;
use crate::error::CliError;
use crate::manifest::{seeds, sha256_file, FileDigest, Invocation, Manifest, Outputs, Split};

/// What a command produced, beyond the files.
pub struct Executed {
    pub manifest: Manifest,
    /// One line per result worth printing.
    pub summary: Vec<String>,
    /// Names of failed benchmark checks.
    pub failed_checks: Vec<String>,
}

fn absolute(path: &Path) -> Result<PathBuf, CliError> {
    fs::canonicalize(path)
        .map_err(|e| CliError::data(format!("cannot open `{}`: {e}", path.display())))
}

/// Makes every input path absolute, failing early on missing files.
pub fn absolutize(inv: &mut Invocation, cfg: &mut Config) -> Result<(), CliError> {
    for p in [&mut cfg.data.source, &mut cfg.data.target]
        .into_iter()
        .flatten()
    {
        *p = absolute(p)?;
    }
    if let Some(p) = &mut cfg.tune.checkpoint {
        *p = absolute(p)?;
    }
    match inv {
        Invocation::Eval { modules: p, .. }
        | Invocation::DataImport { csv: p, .. }
        | Invocation::DataExport { dataset: p } => *p = absolute(p)?,
        Invocation::Bench { banks: Some(p) } => *p = absolute(p)?,
        _ => {}
    }
    Ok(())
}

fn bank_path(dir: &Path, method: PetMethod) -> PathBuf {
    dir.join(format!("{method}.pvpc"))
}

/// Input files the command reads, in a fixed order.
fn inputs(inv: &Invocation, cfg: &Config) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let uses_source = matches!(inv, Invocation::Pretrain | Invocation::DataGenerate { .. });
    let uses_target = matches!(
        inv,
        Invocation::Tune | Invocation::Eval { .. } | Invocation::DataGenerate { .. }
    );
    if uses_source {
        out.extend(cfg.data.source.clone());
    }
    if uses_target {
        out.extend(cfg.data.target.clone());
    }
    match inv {
        Invocation::Tune => out.extend(cfg.tune.checkpoint.clone()),
        Invocation::Eval { modules, .. } => out.push(modules.clone()),
        Invocation::Bench { banks: Some(dir) } => out.extend(
            cfg.bench
                .bank_methods()
                .into_iter()
                .map(|m| bank_path(dir, m))
                .filter(|p| p.exists()),
        ),
        Invocation::DataImport { csv, .. } => out.push(csv.clone()),
        Invocation::DataExport { dataset } => out.push(dataset.clone()),
        _ => {}
    }
    out
}

pub fn digest_inputs(inv: &Invocation, cfg: &Config) -> Result<Vec<FileDigest>, CliError> {
    inputs(inv, cfg)
        .into_iter()
        .map(|path| {
            Ok(FileDigest {
                sha256: sha256_file(&path)?,
                path,
            })
        })
        .collect()
}

fn backbone(cfg: &Config) -> Result<SharedBackbone, CliError> {
    Ok(benchmark::prepare_backbone(
        &cfg.vit,
        &cfg.backbone,
        &cfg.tasks,
    )?)
}

fn check_images(ds: &Dataset, cfg: &Config, role: &str) -> Result<(), CliError> {
    let expected = [cfg.vit.channels, cfg.vit.image_size, cfg.vit.image_size];
    if ds.image_shape() != expected {
        return Err(CliError::data(format!(
            "{role} images are {:?}, the model expects {expected:?}",
            ds.image_shape()
        )));
    }
    Ok(())
}

fn source(cfg: &Config) -> Result<Dataset, CliError> {
    let ds = match &cfg.data.source {
        Some(p) => Dataset::load(p)?,
        None => benchmark::source_task(&cfg.vit, &cfg.tasks)?,
    };
    check_images(&ds, cfg, "source")?;
    Ok(match cfg.pretrain.source_samples_per_class {
        Some(n) => per_class_prefix(&ds, n),
        None => ds,
    })
}

fn target(cfg: &Config) -> Result<Dataset, CliError> {
    let ds = match &cfg.data.target {
        Some(p) => Dataset::load(p)?,
        None => benchmark::target_task(&cfg.vit, &cfg.tasks)?,
    };
    check_images(&ds, cfg, "target")?;
    Ok(ds)
}

/// A training record without its wall time.
#[derive(Debug, Serialize)]
struct RecordOut<'a> {
    method: &'a str,
    spec: &'a TrainSpec,
    steps: usize,
    first_loss: Option<f64>,
    final_loss: Option<f64>,
    train_accuracy: f64,
    eval_accuracy: Option<f64>,
    digest_before: &'a str,
    digest_after: &'a str,
    backbone_unchanged: bool,
}

impl<'a> From<&'a RunRecord> for RecordOut<'a> {
    fn from(r: &'a RunRecord) -> Self {
        Self {
            method: &r.method,
            spec: &r.spec,
            steps: r.losses.len(),
            first_loss: r.losses.first().copied(),
            final_loss: r.losses.last().copied(),
            train_accuracy: r.train_accuracy,
            eval_accuracy: r.eval_accuracy,
            digest_before: &r.digest_before,
            digest_after: &r.digest_after,
            backbone_unchanged: r.backbone_unchanged(),
        }
    }
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

fn loss_rows(r: &RunRecord) -> Vec<LossRow> {
    r.losses
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossRow { step, loss })
        .collect()
}

/// Deep or shallow, from the bank's row count.
pub fn prompt_method(ck: &ModuleCheckpoint) -> Result<PetMethod, CliError> {
    let rows = ck.prompt_bank()?.shape()[0];
    Ok(if rows == 1 && ck.fingerprint.num_layers > 1 {
        PetMethod::VptShallow
    } else {
        PetMethod::VptDeep
    })
}

/// Rebuilds tuned modules and their head from a checkpoint written by `tune`.
pub fn restore_tuned(
    ck: &ModuleCheckpoint,
    cfg: &Config,
    num_classes: usize,
) -> Result<PetParams, CliError> {
    let (w, _) = ck.head().ok_or_else(|| {
        CliError::usage("checkpoint has no classifier head; evaluate modules written by `pvp tune`")
    })?;
    if w.shape()[1] != num_classes {
        return Err(CliError::data(format!(
            "checkpoint head has {} classes, the dataset has {num_classes}",
            w.shape()[1]
        )));
    }
    let dim = ck.fingerprint.module_dim as usize;
    let mut pet = match ck.kind {
        BankKind::Prompts => {
            let spec = LoadSpec::new(LoadType::Sequential, prompt_method(ck)?, dim);
            load_prompts(ck, &spec, &cfg.vit, num_classes)?
        }
        BankKind::Adapter => load_modules(
            ck,
            &PetConfig::new(PetMethod::Adapter).with_bottleneck(dim),
            &cfg.vit,
            num_classes,
        )?,
        BankKind::Lora => {
            let mut pc = PetConfig::new(PetMethod::Lora).with_rank(dim);
            pc.lora_scale = cfg.pet.lora_scale;
            load_modules(ck, &pc, &cfg.vit, num_classes)?
        }
    };
    ck.restore_head(&mut pet)?;
    Ok(pet)
}

fn manifest(inv: &Invocation, cfg: &Config, inputs: Vec<FileDigest>) -> Manifest {
    Manifest {
        manifest_version: crate::manifest::MANIFEST_VERSION,
        tool: "pvp".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        invocation: inv.clone(),
        config: cfg.clone(),
        seeds: seeds(cfg),
        backbone_digest: None,
        inputs,
        outputs: Vec::new(),
    }
}

/// Runs `inv` with a resolved, absolutized config and writes into `out`.
pub fn execute(inv: &Invocation, cfg: &Config, out: &Path) -> Result<Executed, CliError> {
    cfg.validate()?;
    let inputs = digest_inputs(inv, cfg)?;
    let mut m = manifest(inv, cfg, inputs);
    let mut files = Outputs::create(out)?;
    let mut summary = Vec::new();
    let mut failed_checks = Vec::new();
    match inv {
        Invocation::Pretrain => {
            let bb = backbone(cfg)?;
            let src = source(cfg)?;
            let pre = pretrain_modules(&bb, &cfg.pet, &src, &cfg.pretrain.train_spec())?;
            files.write("checkpoint.pvpc", &pre.checkpoint.to_bytes())?;
            files.write_json("record.json", &RecordOut::from(&pre.record))?;
            files.write_csv("losses.csv", &loss_rows(&pre.record))?;
            summary.push(format!(
                "pre-trained {} on {} source samples: train accuracy {:.4}, final loss {:.4}",
                cfg.pet.method,
                src.len(),
                pre.record.train_accuracy,
                pre.record.losses.last().copied().unwrap_or(f64::NAN)
            ));
            m.backbone_digest = Some(bb.digest());
        }
        Invocation::Tune => {
            let (row, record, pet) = tune(cfg)?;
            files.write(
                "tuned.pvpc",
                &ModuleCheckpoint::from_pet(&pet, &cfg.vit, None)
                    .with_head(&pet)
                    .to_bytes(),
            )?;
            files.write_csv("metrics.csv", std::slice::from_ref(&row))?;
            files.write_csv("losses.csv", &loss_rows(&record))?;
            files.write_json("record.json", &RecordOut::from(&record))?;
            summary.push(format!(
                "{} {}-shot ({}): eval accuracy {:.4}, train accuracy {:.4}",
                row.method, row.shots, row.init, row.eval_accuracy, row.train_accuracy
            ));
            m.backbone_digest = Some(record.digest_after.clone());
        }
        Invocation::Eval { modules, all } => {
            let bb = backbone(cfg)?;
            let ck = ModuleCheckpoint::load(modules)?;
            let tgt = target(cfg)?;
            let data = if *all {
                tgt
            } else {
                sample_episode(&tgt, cfg.tune.shots, cfg.tune.seed)?.eval
            };
            let pet = restore_tuned(&ck, cfg, data.num_classes())?;
            let model = Model::petuning(bb.clone(), pet)?;
            let ev = evaluate(&model, &data)?;
            files.write_json(
                "eval.json",
                &EvalOut {
                    samples: data.len(),
                    accuracy: ev.accuracy,
                    mean_loss: ev.mean_loss,
                    per_class: data
                        .class_names
                        .iter()
                        .zip(&ev.per_class_accuracy)
                        .enumerate()
                        .map(|(label, (name, &accuracy))| ClassAccuracy {
                            label,
                            name: name.clone(),
                            accuracy,
                        })
                        .collect(),
                },
            )?;
            let rows: Vec<PredictionRow> = (0..data.len())
                .map(|i| PredictionRow {
                    sample_id: data.sample_ids[i],
                    label: data.labels[i],
                    prediction: ev.predictions[i],
                })
                .collect();
            files.write_csv("predictions.csv", &rows)?;
            summary.push(format!(
                "accuracy {:.4} on {} samples, mean loss {:.4}",
                ev.accuracy,
                data.len(),
                ev.mean_loss
            ));
            m.backbone_digest = Some(bb.digest());
        }
        Invocation::Bench { banks } => {
            let banks = banks.as_ref().map(|dir| load_banks(dir, cfg)).transpose()?;
            let report = benchmark::run_with_banks(&cfg.bench, banks)?;
            files.write_json("report.json", &report)?;
            files.write_csv("runs.csv", &report.runs)?;
            let summary_rows: Vec<SummaryRow> =
                report.summary.iter().map(SummaryRow::from).collect();
            files.write_csv("summary.csv", &summary_rows)?;
            files.write_csv("checks.csv", &report.checks)?;
            for c in &report.checks {
                summary.push(format!(
                    "[{}] {} {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                ));
                if !c.passed {
                    failed_checks.push(c.name.clone());
                }
            }
            summary.push(format!("wall time {:.1}s", report.wall_time_s));
            m.backbone_digest = Some(report.backbone_digest.clone());
        }
        Invocation::DataGenerate { split } => {
            let ds = match split {
                Split::Upstream => benchmark::upstream_task(&cfg.vit, &cfg.backbone, &cfg.tasks)?,
                Split::Source => source(cfg)?,
                Split::Target => target(cfg)?,
            };
            files.write("dataset.pvpd", &ds.to_bytes())?;
            summary.push(describe(&ds));
        }
        Invocation::DataImport { csv, channels } => {
            let ds = import_csv(csv, *channels)?;
            files.write("dataset.pvpd", &ds.to_bytes())?;
            summary.push(describe(&ds));
        }
        Invocation::DataExport { dataset } => {
            let ds = Dataset::load(dataset)?;
            files.write("dataset.csv", &export_csv(&ds)?)?;
            summary.push(describe(&ds));
        }
    }
    let manifest = files.finish(m)?;
    Ok(Executed {
        manifest,
        summary,
        failed_checks,
    })
}

fn describe(ds: &Dataset) -> String {
    format!(
        "{} samples of shape {:?} in {} classes",
        ds.len(),
        ds.image_shape(),
        ds.num_classes()
    )
}

/// One tuning run, as in the benchmark's run table.
#[derive(Debug, Clone, Serialize)]
pub struct TuneRow {
    pub method: PetMethod,
    pub init: &'static str,
    pub load: Option<LoadType>,
    pub shots: usize,
    pub k: Option<usize>,
    pub seed: u64,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub eval_accuracy: f64,
    pub train_accuracy: f64,
    pub final_loss: Option<f64>,
    pub backbone_unchanged: bool,
}

fn tune(cfg: &Config) -> Result<(TuneRow, RunRecord, PetParams), CliError> {
    let bb = backbone(cfg)?;
    let tgt = target(cfg)?;
    let episode = sample_episode(&tgt, cfg.tune.shots, cfg.tune.seed)?;
    let c = tgt.num_classes();
    let method = cfg.pet.method;
    let prompt_k = method.is_prompt().then_some(cfg.tune.k);
    let (pet, init, load) = match &cfg.tune.checkpoint {
        None => {
            let pc = PetConfig {
                prompt_tokens: cfg.tune.k,
                ..cfg.pet
            };
            (attach(&pc, &cfg.vit, c, cfg.tune.seed)?, "scratch", None)
        }
        Some(path) => {
            let ck = ModuleCheckpoint::load(path)?;
            if ck.kind != BankKind::for_method(method) {
                let hint = match ck.kind {
                    BankKind::Prompts => "vpt_deep or vpt_shallow",
                    BankKind::Adapter => "adapter",
                    BankKind::Lora => "lora",
                };
                return Err(CliError::usage(format!(
                    "`{}` holds {} modules but pet.method is {method}; use --method {hint}",
                    path.display(),
                    ck.kind.as_str()
                )));
            }
            if method.is_prompt() {
                let spec = LoadSpec::new(cfg.tune.load, method, cfg.tune.k);
                let pet = load_prompts(&ck, &spec, &cfg.vit, c)?;
                (pet, "pvp", Some(cfg.tune.load))
            } else {
                (load_modules(&ck, &cfg.pet, &cfg.vit, c)?, "pvp", None)
            }
        }
    };
    let out = downstream_tune(&bb, pet, &episode, &cfg.tune.train_spec())?;
    let r = &out.record;
    let row = TuneRow {
        method,
        init,
        load,
        shots: cfg.tune.shots,
        k: prompt_k,
        seed: cfg.tune.seed,
        steps: cfg.tune.steps,
        lr: cfg.tune.lr,
        weight_decay: cfg.tune.weight_decay,
        eval_accuracy: out.eval_accuracy(),
        train_accuracy: r.train_accuracy,
        final_loss: r.losses.last().copied(),
        backbone_unchanged: r.backbone_unchanged(),
    };
    Ok((row, out.record, out.pet))
}

fn load_banks(dir: &Path, cfg: &Config) -> Result<BTreeMap<PetMethod, ModuleCheckpoint>, CliError> {
    let mut banks = BTreeMap::new();
    for m in cfg.bench.bank_methods() {
        let path = bank_path(dir, m);
        if path.exists() {
            banks.insert(m, ModuleCheckpoint::load(&path)?);
        }
    }
    Ok(banks)
}

#[derive(Serialize)]
struct EvalOut {
    samples: usize,
    accuracy: f64,
    mean_loss: f64,
    per_class: Vec<ClassAccuracy>,
}

#[derive(Serialize)]
struct ClassAccuracy {
    label: usize,
    name: String,
    accuracy: f64,
}

#[derive(Serialize)]
struct PredictionRow {
    sample_id: usize,
    label: usize,
    prediction: usize,
}

/// Flat form of a summary cell for CSV.
#[derive(Serialize)]
struct SummaryRow {
    experiment: &'static str,
    method: String,
    init: &'static str,
    load: Option<LoadType>,
    shots: usize,
    k: Option<usize>,
    runs: usize,
    mean: f64,
    std: f64,
}

impl From<&benchmark::CellSummary> for SummaryRow {
    fn from(c: &benchmark::CellSummary) -> Self {
        Self {
            experiment: c.experiment.as_str(),
            method: c.method.clone(),
            init: c.init.as_str(),
            load: c.load,
            shots: c.shots,
            k: c.k,
            runs: c.runs,
            mean: c.mean,
            std: c.std,
        }
    }
}

/// CSV columns: `label`, `class_id`, then the pixels in `[C, H, W]` order.
pub fn export_csv(ds: &Dataset) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let pixels = ds.images.numel() / ds.len().max(1);
    let mut header = vec!["label".to_string(), "class_id".to_string()];
    header.extend((0..pixels).map(|i| format!("px{i}")));
    w.write_record(&header)?;
    for (i, px) in ds.images.data().chunks(pixels).enumerate() {
        let label = ds.labels[i];
        let mut rec = vec![
            label.to_string(),
            ds.fingerprint.class_ids[label].to_string(),
        ];
        // f32 is the storage precision; its shortest form round-trips exactly
        rec.extend(px.iter().map(|&x| (x as f32).to_string()));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| CliError::data(e.to_string()))
}

pub fn import_csv(path: &Path, channels: usize) -> Result<Dataset, CliError> {
    let bad =
        |line: usize, msg: String| CliError::data(format!("{}:{line}: {msg}", path.display()));
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.len() < 3 || &header[0] != "label" || &header[1] != "class_id" {
        return Err(bad(1, "header must start with `label,class_id`".into()));
    }
    let pixels = header.len() - 2;
    if channels == 0 || pixels % channels != 0 {
        return Err(bad(
            1,
            format!("{pixels} pixels do not split into {channels} channels"),
        ));
    }
    let side = ((pixels / channels) as f64).sqrt().round() as usize;
    if side * side * channels != pixels {
        return Err(bad(
            1,
            format!("{pixels} pixels per row are not {channels} square images"),
        ));
    }
    let mut labels = Vec::new();
    let mut class_ids: Vec<Option<usize>> = Vec::new();
    let mut data = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let int = |s: &str, what: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| bad(line, format!("{what} `{s}` is not a non-negative integer")))
        };
        let label = int(&rec[0], "label")?;
        let class_id = int(&rec[1], "class_id")?;
        if class_ids.len() <= label {
            class_ids.resize(label + 1, None);
        }
        match class_ids[label] {
            Some(c) if c != class_id => {
                return Err(bad(
                    line,
                    format!("label {label} maps to class_id {c} elsewhere, here {class_id}"),
                ))
            }
            _ => class_ids[label] = Some(class_id),
        }
        for s in rec.iter().skip(2) {
            let v: f32 = s
                .trim()
                .parse()
                .map_err(|_| bad(line, format!("pixel `{s}` is not a number")))?;
            data.push(v as f64);
        }
        labels.push(label);
    }
    let class_ids = class_ids
        .into_iter()
        .enumerate()
        .map(|(l, c)| c.ok_or_else(|| CliError::data(format!("label {l} has no samples"))))
        .collect::<Result<Vec<_>, _>>()?;
    let m = labels.len();
    if m == 0 {
        return Err(CliError::data(format!("`{}` has no rows", path.display())));
    }
    let ds = Dataset {
        images: Tensor::new(vec![m, channels, side, side], data)?,
        labels,
        class_names: class_ids
            .iter()
            .map(|&id| pvp_core::data::display_name(None, id))
            .collect(),
        sample_ids: (0..m).collect(),
        fingerprint: DatasetFingerprint {
            family: None,
            seed: 0,
            class_ids,
            count: m,
        },
    };
    ds.validate()?;
    Ok(ds)
}
