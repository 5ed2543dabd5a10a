//! Human-readable and JSON summaries of PVPC and PVPD files.

use std::fs;
use std::path::Path;

use pvp_core::checkpoint::{ModuleCheckpoint, CHECKPOINT_MAGIC};
use pvp_core::data::DATASET_MAGIC;
use pvp_core::{Dataset, Tensor};
use serde::Serialize;

use crate::commands::prompt_method;
use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct TensorStats {
    pub name: String,
    pub shape: Vec<usize>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl TensorStats {
    fn of(name: &str, t: &Tensor) -> Self {
        let d = t.data();
        Self {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            mean: t.mean(),
            std: t.std(),
            min: d.iter().cloned().fold(f64::INFINITY, f64::min),
            max: d.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "format", rename_all = "lowercase")]
pub enum Summary {
    Pvpc {
        method: String,
        embed_dim: u32,
        num_layers: u32,
        patch_size: u32,
        image_size: u32,
        /// Bank tokens `N`, adapter width or LoRA rank.
        module_dim: u32,
        num_classes: Option<usize>,
        parameters: usize,
        tensors: Vec<TensorStats>,
    },
    Pvpd {
        samples: usize,
        image_shape: Vec<usize>,
        family: String,
        seed: u64,
        classes: Vec<ClassInfo>,
        pixels: TensorStats,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassInfo {
    pub label: usize,
    pub class_id: usize,
    pub name: String,
    pub samples: usize,
}

pub fn summarize(path: &Path) -> Result<Summary, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::data(format!("cannot read `{}`: {e}", path.display())))?;
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        let ck = ModuleCheckpoint::from_bytes(&bytes)?;
        let fp = ck.fingerprint;
        let method = match ck.kind {
            pvp_core::checkpoint::BankKind::Prompts => prompt_method(&ck)?.to_string(),
            other => other.as_str().to_string(),
        };
        Ok(Summary::Pvpc {
            method,
            embed_dim: fp.embed_dim,
            num_layers: fp.num_layers,
            patch_size: fp.patch_size,
            image_size: fp.image_size,
            module_dim: fp.module_dim,
            num_classes: ck.head().map(|(w, _)| w.shape()[1]),
            parameters: ck.tensors.values().map(|t| t.numel()).sum(),
            tensors: ck
                .tensors
                .iter()
                .map(|(n, t)| TensorStats::of(n, t))
                .collect(),
        })
    } else if bytes.starts_with(DATASET_MAGIC) {
        let ds = Dataset::from_bytes(&bytes)?;
        let counts = ds.class_counts();
        Ok(Summary::Pvpd {
            samples: ds.len(),
            image_shape: ds.image_shape().to_vec(),
            family: ds
                .fingerprint
                .family
                .map(|f| f.as_str())
                .unwrap_or("external")
                .to_string(),
            seed: ds.fingerprint.seed,
            classes: (0..ds.num_classes())
                .map(|l| ClassInfo {
                    label: l,
                    class_id: ds.fingerprint.class_ids[l],
                    name: ds.class_names[l].clone(),
                    samples: counts[l],
                })
                .collect(),
            pixels: TensorStats::of("pixels", &ds.images),
        })
    } else {
        Err(CliError::data(format!(
            "`{}` is neither a PVPC checkpoint nor a PVPD dataset",
            path.display()
        )))
    }
}

fn shape(s: &[usize]) -> String {
    let parts: Vec<String> = s.iter().map(|d| d.to_string()).collect();
    format!("({})", parts.join(", "))
}

fn stats_line(t: &TensorStats) -> String {
    format!(
        "  {:<20} shape {:<14} mean {:>10.6} std {:>10.6} min {:>10.6} max {:>10.6}",
        t.name,
        shape(&t.shape),
        t.mean,
        t.std,
        t.min,
        t.max
    )
}

pub fn render(s: &Summary) -> String {
    let mut out = Vec::new();
    match s {
        Summary::Pvpc {
            method,
            embed_dim,
            num_layers,
            patch_size,
            image_size,
            module_dim,
            num_classes,
            parameters,
            tensors,
        } => {
            out.push(format!("PVPC module checkpoint: {method}"));
            out.push(format!(
                "  backbone: d={embed_dim} L={num_layers} patch={patch_size} image={image_size}"
            ));
            let dim_name = match method.as_str() {
                "adapter" => "h",
                "lora" => "r",
                _ => "N",
            };
            out.push(format!("  {dim_name}={module_dim}"));
            match num_classes {
                Some(c) => out.push(format!("  head: {c} classes")),
                None => out.push("  head: none".into()),
            }
            out.push(format!("  {parameters} stored values"));
            out.extend(tensors.iter().map(stats_line));
        }
        Summary::Pvpd {
            samples,
            image_shape,
            family,
            seed,
            classes,
            pixels,
        } => {
            out.push(format!(
                "PVPD dataset: {samples} samples of shape {}",
                shape(image_shape)
            ));
            out.push(format!("  family {family}, seed {seed}"));
            for c in classes {
                out.push(format!(
                    "  label {:>2}  class {:>3}  {:<20} {} samples",
                    c.label, c.class_id, c.name, c.samples
                ));
            }
            out.push(stats_line(pixels));
        }
    }
    out.join("\n")
}
