//! Mini-batch training, evaluation and the (lr, weight decay) grid search.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::data::{augment, AugmentConfig, Dataset};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::petuning::PetParams;
use crate::tensor::Tensor;
use crate::vit::{self, SharedBackbone, ViTParams};

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default = "AugmentConfig::disabled")]
    pub augment: AugmentConfig,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            steps: 100,
            batch_size: 32,
            lr: 1e-2,
            weight_decay: 0.0,
            seed: 0,
            augment: AugmentConfig::disabled(),
        }
    }
}

impl TrainSpec {
    /// Zero steps is allowed (it evaluates the initial model).
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(
                "weight_decay",
                "must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// A backbone plus, for PETuning, its attached modules. Without modules the
/// whole backbone is trained (the FULL baseline).
#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: SharedBackbone,
    pub pet: Option<PetParams>,
}

impl Model {
    pub fn petuning(backbone: SharedBackbone, pet: PetParams) -> Result<Self> {
        if !backbone.is_frozen() {
            return Err(Error::Incompatible(
                "PETuning needs a frozen backbone; call freeze_backbone first".into(),
            ));
        }
        pet.check_compatible(&backbone.config)?;
        Ok(Self {
            backbone,
            pet: Some(pet),
        })
    }

    /// Full fine-tuning: every backbone tensor trainable, fresh zero head.
    pub fn full(mut backbone: ViTParams, num_classes: usize) -> Self {
        backbone.set_trainable(true);
        backbone.reset_head(num_classes);
        Self {
            backbone: Arc::new(backbone),
            pet: None,
        }
    }

    pub fn method_name(&self) -> &'static str {
        self.pet
            .as_ref()
            .map(|p| p.config.method.as_str())
            .unwrap_or("full")
    }

    pub fn num_classes(&self) -> usize {
        match &self.pet {
            Some(p) => p.num_classes(),
            None => self.backbone.config.num_classes,
        }
    }

    pub fn backbone_digest(&self) -> String {
        self.backbone.digest()
    }

    pub fn predict(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        vit::predict(&self.backbone, self.pet.as_ref(), images)
    }
}

pub trait Classifier {
    fn num_classes(&self) -> usize;
    /// `[B, num_classes]` logits for a `[B, C, H, W]` batch.
    fn logits(&self, images: &Tensor) -> Result<Tensor>;
}

impl Classifier for Model {
    fn num_classes(&self) -> usize {
        Model::num_classes(self)
    }

    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.predict(images)?.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub spec: TrainSpec,
    /// Training loss of every step, in order.
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
    pub wall_time_ms: u128,
    pub digest_before: String,
    pub digest_after: String,
}

impl RunRecord {
    pub fn backbone_unchanged(&self) -> bool {
        self.digest_before == self.digest_after
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `NaN`-free: classes absent from the dataset report 0.
    pub per_class_accuracy: Vec<f64>,
    pub mean_loss: f64,
    pub predictions: Vec<usize>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn nll(row: &[f64], label: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - row[label]
}

pub fn evaluate(model: &dyn Classifier, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let c = model.num_classes();
    let mut predictions = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (images, labels) = data.batch(chunk);
        let logits = model.logits(&images)?;
        for (row, &label) in logits.data().chunks(c).zip(&labels) {
            if label >= c {
                return Err(Error::LabelOutOfRange {
                    label,
                    num_classes: c,
                });
            }
            predictions.push(argmax(row));
            loss += nll(row, label);
        }
    }
    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    for (&p, &l) in predictions.iter().zip(&data.labels) {
        totals[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        per_class_accuracy: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
            .collect(),
        mean_loss: loss / data.len() as f64,
        predictions,
    })
}

fn load_grads(
    named: Vec<(String, &mut Tensor)>,
    bound: &[(String, Var)],
    grads: &Gradients,
) -> Result<()> {
    for ((name, t), (bound_name, var)) in named.into_iter().zip(bound) {
        debug_assert_eq!(&name, bound_name);
        if t.requires_grad() {
            t.zero_grad();
            grads.accumulate_into(*var, t)?;
        }
    }
    Ok(())
}

fn optimizer_step(opt: &mut AdamW, mut named: Vec<(String, &mut Tensor)>) -> Result<()> {
    let mut params: Vec<(&str, &mut Tensor)> = named
        .iter_mut()
        .map(|(n, t)| (n.as_str(), &mut **t))
        .collect();
    opt.step(&mut params)
}

/// One optimisation step on a batch; returns the batch loss.
fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    images: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let mut graph = Graph::new();
    let out = vit::forward(&mut graph, &model.backbone, model.pet.as_ref(), images)?;
    let loss = graph.cross_entropy(out.logits, labels)?;
    let value = graph.value(loss)[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = graph.backward(loss)?;
    match &mut model.pet {
        Some(pet) => {
            load_grads(pet.named_tensors_mut(), &out.bindings.pet, &grads)?;
            optimizer_step(opt, pet.named_tensors_mut())?;
        }
        None => {
            let backbone = Arc::make_mut(&mut model.backbone);
            load_grads(backbone.named_tensors_mut(), &out.bindings.backbone, &grads)?;
            optimizer_step(opt, backbone.named_tensors_mut())?;
        }
    }
    Ok(value)
}

/// Trains `model` on `data` for `spec.steps` mini-batches. Batches follow a
/// seeded shuffle that is redrawn every epoch, so the run is a pure function
/// of `(model, data, spec)`.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    eval: Option<&Dataset>,
    spec: &TrainSpec,
) -> Result<RunRecord> {
    spec.validate()?;
    data.validate()?;
    if data.num_classes() != model.num_classes() {
        return Err(Error::Incompatible(format!(
            "dataset has {} classes, model head has {}",
            data.num_classes(),
            model.num_classes()
        )));
    }
    let start = Instant::now();
    let digest_before = model.backbone_digest();
    let mut opt = AdamW::new(AdamWConfig::new(spec.lr, spec.weight_decay));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let batch = spec.batch_size.min(data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut losses = Vec::with_capacity(spec.steps);
    for step in 0..spec.steps {
        if cursor + batch > data.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let (images, labels) = data.batch(idx);
        let images = augment(
            &images,
            &spec.augment,
            spec.seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        let loss = train_step(model, &mut opt, &images, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        losses.push(loss);
    }
    let train_accuracy = evaluate(model, data)?.accuracy;
    let eval_accuracy = eval
        .map(|e| evaluate(model, e))
        .transpose()?
        .map(|e| e.accuracy);
    Ok(RunRecord {
        method: model.method_name().to_string(),
        spec: *spec,
        losses,
        train_accuracy,
        eval_accuracy,
        wall_time_ms: start.elapsed().as_millis(),
        digest_before,
        digest_after: model.backbone_digest(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lrs: Vec<f64>,
    pub weight_decays: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            lrs: vec![1e-3, 3e-3, 1e-2],
            weight_decays: vec![0.0, 1e-4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lr: f64,
    pub weight_decay: f64,
    /// `None` when the run diverged.
    pub eval_accuracy: Option<f64>,
    pub record: Option<RunRecord>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: usize,
    pub table: Vec<GridRow>,
}

impl GridResult {
    pub fn best_row(&self) -> &GridRow {
        &self.table[self.best]
    }
}

/// Trains one copy of `template` per `(lr, wd)` pair and selects by eval
/// accuracy. Ties go to the lower lr, then the lower weight decay; diverged
/// runs rank below every finished one.
pub fn grid_search(
    template: &Model,
    train_set: &Dataset,
    eval_set: &Dataset,
    base: &TrainSpec,
    grid: &Grid,
) -> Result<GridResult> {
    if grid.lrs.is_empty() || grid.weight_decays.is_empty() {
        return Err(Error::config(
            "grid",
            "lr and weight_decay lists must be nonempty",
        ));
    }
    let mut cells: Vec<(f64, f64)> = Vec::new();
    for &lr in &grid.lrs {
        for &wd in &grid.weight_decays {
            cells.push((lr, wd));
        }
    }
    let table = cells
        .par_iter()
        .map(|&(lr, wd)| {
            let spec = TrainSpec {
                lr,
                weight_decay: wd,
                ..*base
            };
            let mut model = template.clone();
            match train(&mut model, train_set, Some(eval_set), &spec) {
                Ok(record) => Ok(GridRow {
                    lr,
                    weight_decay: wd,
                    eval_accuracy: record.eval_accuracy,
                    record: Some(record),
                    error: None,
                }),
                Err(e @ Error::NonFiniteLoss { .. }) => Ok(GridRow {
                    lr,
                    weight_decay: wd,
                    eval_accuracy: None,
                    record: None,
                    error: Some(e.to_string()),
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let best = select_best(&table);
    Ok(GridResult { best, table })
}

fn select_best(table: &[GridRow]) -> usize {
    let key = |r: &GridRow| {
        (
            r.eval_accuracy.unwrap_or(f64::NEG_INFINITY),
            -r.lr,
            -r.weight_decay,
        )
    };
    let mut best = 0;
    for (i, row) in table.iter().enumerate().skip(1) {
        let (a, b) = (key(row), key(&table[best]));
        if a.0 > b.0 || (a.0 == b.0 && (a.1 > b.1 || (a.1 == b.1 && a.2 > b.2))) {
            best = i;
        }
    }
    best
}
