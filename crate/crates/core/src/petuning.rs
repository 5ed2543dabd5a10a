//! Parameter-efficient tuning modules: prompt tokens (shallow and deep),
//! bottleneck adapters after the FFN, and low-rank query/value deltas.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{ViTConfig, ViTParams, INIT_STD};

/// Name of the prompt bank tensor, shaped `(num_layer, num_tokens, embed_dim)`.
pub const PROMPT_TENSOR: &str = "prompt_tokens";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PetMethod {
    VptShallow,
    VptDeep,
    Adapter,
    Lora,
}

impl PetMethod {
    pub const ALL: [PetMethod; 4] = [
        PetMethod::VptShallow,
        PetMethod::VptDeep,
        PetMethod::Adapter,
        PetMethod::Lora,
    ];

    pub fn is_prompt(self) -> bool {
        matches!(self, PetMethod::VptShallow | PetMethod::VptDeep)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PetMethod::VptShallow => "vpt_shallow",
            PetMethod::VptDeep => "vpt_deep",
            PetMethod::Adapter => "adapter",
            PetMethod::Lora => "lora",
        }
    }
}

impl fmt::Display for PetMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PetMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "vpt_shallow" => Ok(PetMethod::VptShallow),
            "vpt_deep" | "vpt" => Ok(PetMethod::VptDeep),
            "adapter" => Ok(PetMethod::Adapter),
            "lora" => Ok(PetMethod::Lora),
            other => Err(Error::config(
                "method",
                format!(
                    "unknown method `{other}` (expected vpt_shallow, vpt_deep, adapter or lora)"
                ),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PetConfig {
    pub method: PetMethod,
    /// Prompt length `k` (prompt methods).
    #[serde(default = "defaults::prompt_tokens")]
    pub prompt_tokens: usize,
    /// Adapter bottleneck width `h`.
    #[serde(default = "defaults::bottleneck")]
    pub bottleneck: usize,
    /// LoRA rank `r`.
    #[serde(default = "defaults::rank")]
    pub rank: usize,
    /// LoRA scale `s`.
    #[serde(default = "defaults::lora_scale")]
    pub lora_scale: f64,
}

pub mod defaults {
    pub fn prompt_tokens() -> usize {
        4
    }
    pub fn bottleneck() -> usize {
        2
    }
    pub fn rank() -> usize {
        1
    }
    pub fn lora_scale() -> f64 {
        1.0
    }
}

impl PetConfig {
    pub fn new(method: PetMethod) -> Self {
        Self {
            method,
            prompt_tokens: defaults::prompt_tokens(),
            bottleneck: defaults::bottleneck(),
            rank: defaults::rank(),
            lora_scale: defaults::lora_scale(),
        }
    }

    pub fn with_prompt_tokens(mut self, k: usize) -> Self {
        self.prompt_tokens = k;
        self
    }

    pub fn with_bottleneck(mut self, h: usize) -> Self {
        self.bottleneck = h;
        self
    }

    pub fn with_rank(mut self, r: usize) -> Self {
        self.rank = r;
        self
    }

    /// The size parameter that matters for this method (k, h or r).
    pub fn module_dim(&self) -> usize {
        match self.method {
            PetMethod::VptShallow | PetMethod::VptDeep => self.prompt_tokens,
            PetMethod::Adapter => self.bottleneck,
            PetMethod::Lora => self.rank,
        }
    }

    pub fn validate(&self, vit: &ViTConfig) -> Result<()> {
        let d = vit.embed_dim;
        match self.method {
            PetMethod::VptShallow | PetMethod::VptDeep => {
                let k = self.prompt_tokens;
                if k == 0 {
                    return Err(Error::config("prompt_tokens", "must be at least 1"));
                }
                let total = 1 + vit.num_patches() + k;
                if total > vit.max_seq_len {
                    return Err(Error::config(
                        "prompt_tokens",
                        format!("{total} tokens exceed max_seq_len {}", vit.max_seq_len),
                    ));
                }
            }
            PetMethod::Adapter => {
                if self.bottleneck == 0 || self.bottleneck >= d {
                    return Err(Error::config(
                        "bottleneck",
                        format!(
                            "must satisfy 1 <= h < embed_dim ({d}), got {}",
                            self.bottleneck
                        ),
                    ));
                }
            }
            PetMethod::Lora => {
                if self.rank == 0 || self.rank >= d {
                    return Err(Error::config(
                        "rank",
                        format!("must satisfy 1 <= r < embed_dim ({d}), got {}", self.rank),
                    ));
                }
                if !(self.lora_scale > 0.0 && self.lora_scale.is_finite()) {
                    return Err(Error::config("lora_scale", "must be positive and finite"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    pub w_down: Tensor,
    pub w_up: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraWeights {
    pub a_q: Tensor,
    pub b_q: Tensor,
    pub a_v: Tensor,
    pub b_v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PetModules {
    /// `[L, k, d]` for deep prompts, `[1, k, d]` for shallow.
    Prompts(Tensor),
    Adapter(Vec<AdapterWeights>),
    Lora(Vec<LoraWeights>),
}

/// Inserted parameters plus the task-specific classifier head. Everything here
/// is trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct PetParams {
    pub config: PetConfig,
    pub modules: PetModules,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn trainable(t: Tensor) -> Tensor {
    let mut t = t.with_requires_grad(true);
    t.zero_grad();
    t
}

pub(crate) fn zero_head(d: usize, num_classes: usize) -> (Tensor, Tensor) {
    (
        trainable(Tensor::zeros(vec![d, num_classes])),
        trainable(Tensor::zeros(vec![num_classes])),
    )
}

/// Creates freshly initialised modules for `vit` and a zero classifier head.
pub fn attach(
    config: &PetConfig,
    vit: &ViTConfig,
    num_classes: usize,
    seed: u64,
) -> Result<PetParams> {
    config.validate(vit)?;
    if num_classes < 2 {
        return Err(Error::config("num_classes", "need at least 2 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = vit.embed_dim;
    let layers = vit.num_layers;
    let modules = match config.method {
        PetMethod::VptShallow | PetMethod::VptDeep => {
            let rows = if config.method == PetMethod::VptDeep {
                layers
            } else {
                1
            };
            // Xavier-uniform with fan_in = fan_out = d.
            let bound = (6.0 / (d + d) as f64).sqrt();
            PetModules::Prompts(trainable(Tensor::uniform(
                vec![rows, config.prompt_tokens, d],
                bound,
                &mut rng,
            )))
        }
        PetMethod::Adapter => PetModules::Adapter(
            (0..layers)
                .map(|_| AdapterWeights {
                    w_down: trainable(Tensor::trunc_normal(
                        vec![d, config.bottleneck],
                        INIT_STD,
                        &mut rng,
                    )),
                    w_up: trainable(Tensor::zeros(vec![config.bottleneck, d])),
                })
                .collect(),
        ),
        PetMethod::Lora => PetModules::Lora(
            (0..layers)
                .map(|_| LoraWeights {
                    a_q: trainable(Tensor::trunc_normal(
                        vec![d, config.rank],
                        INIT_STD,
                        &mut rng,
                    )),
                    b_q: trainable(Tensor::zeros(vec![config.rank, d])),
                    a_v: trainable(Tensor::trunc_normal(
                        vec![d, config.rank],
                        INIT_STD,
                        &mut rng,
                    )),
                    b_v: trainable(Tensor::zeros(vec![config.rank, d])),
                })
                .collect(),
        ),
    };
    let (head_w, head_b) = zero_head(d, num_classes);
    Ok(PetParams {
        config: *config,
        modules,
        head_w,
        head_b,
    })
}

impl PetParams {
    pub fn num_classes(&self) -> usize {
        self.head_b.numel()
    }

    /// Module tensors only (no head), sorted by name.
    pub fn module_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match &self.modules {
            PetModules::Prompts(t) => out.push((PROMPT_TENSOR.to_string(), t)),
            PetModules::Adapter(layers) => {
                for (l, a) in layers.iter().enumerate() {
                    out.push((format!("adapter.{l:03}.w_down"), &a.w_down));
                    out.push((format!("adapter.{l:03}.w_up"), &a.w_up));
                }
            }
            PetModules::Lora(layers) => {
                for (l, w) in layers.iter().enumerate() {
                    out.push((format!("lora.{l:03}.a_q"), &w.a_q));
                    out.push((format!("lora.{l:03}.a_v"), &w.a_v));
                    out.push((format!("lora.{l:03}.b_q"), &w.b_q));
                    out.push((format!("lora.{l:03}.b_v"), &w.b_v));
                }
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.module_tensors();
        out.push(("head.b".to_string(), &self.head_b));
        out.push(("head.w".to_string(), &self.head_w));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("head.b".to_string(), &mut self.head_b),
            ("head.w".to_string(), &mut self.head_w),
        ];
        match &mut self.modules {
            PetModules::Prompts(t) => out.push((PROMPT_TENSOR.to_string(), t)),
            PetModules::Adapter(layers) => {
                for (l, a) in layers.iter_mut().enumerate() {
                    out.push((format!("adapter.{l:03}.w_down"), &mut a.w_down));
                    out.push((format!("adapter.{l:03}.w_up"), &mut a.w_up));
                }
            }
            PetModules::Lora(layers) => {
                for (l, w) in layers.iter_mut().enumerate() {
                    out.push((format!("lora.{l:03}.a_q"), &mut w.a_q));
                    out.push((format!("lora.{l:03}.a_v"), &mut w.a_v));
                    out.push((format!("lora.{l:03}.b_q"), &mut w.b_q));
                    out.push((format!("lora.{l:03}.b_v"), &mut w.b_v));
                }
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copies the classifier head from `other` (used for identity probes).
    pub fn copy_head_from(&mut self, other: &PetParams) -> Result<()> {
        if self.head_w.shape() != other.head_w.shape() {
            return Err(Error::ShapeMismatch {
                op: "copy_head",
                lhs: self.head_w.shape().to_vec(),
                rhs: other.head_w.shape().to_vec(),
            });
        }
        self.head_w.data_mut().copy_from_slice(other.head_w.data());
        self.head_b.data_mut().copy_from_slice(other.head_b.data());
        Ok(())
    }

    /// Checks config and tensor shapes against a backbone configuration.
    pub fn check_compatible(&self, vit: &ViTConfig) -> Result<()> {
        self.config.validate(vit)?;
        let d = vit.embed_dim;
        let mismatch = |name: &str, got: &[usize], want: Vec<usize>| {
            Error::Incompatible(format!(
                "tensor `{name}` has shape {got:?}, backbone expects {want:?}"
            ))
        };
        if self.head_w.shape()[0] != d {
            return Err(mismatch(
                "head.w",
                self.head_w.shape(),
                vec![d, self.num_classes()],
            ));
        }
        match &self.modules {
            PetModules::Prompts(t) => {
                let rows = if self.config.method == PetMethod::VptDeep {
                    vit.num_layers
                } else {
                    1
                };
                let want = vec![rows, self.config.prompt_tokens, d];
                if !self.config.method.is_prompt() || t.shape() != want.as_slice() {
                    return Err(mismatch(PROMPT_TENSOR, t.shape(), want));
                }
            }
            PetModules::Adapter(layers) => {
                if self.config.method != PetMethod::Adapter || layers.len() != vit.num_layers {
                    return Err(Error::Incompatible(format!(
                        "adapter bank has {} layers, backbone has {}",
                        layers.len(),
                        vit.num_layers
                    )));
                }
                let h = self.config.bottleneck;
                for (l, a) in layers.iter().enumerate() {
                    if a.w_down.shape() != [d, h] {
                        return Err(mismatch(
                            &format!("adapter.{l:03}.w_down"),
                            a.w_down.shape(),
                            vec![d, h],
                        ));
                    }
                    if a.w_up.shape() != [h, d] {
                        return Err(mismatch(
                            &format!("adapter.{l:03}.w_up"),
                            a.w_up.shape(),
                            vec![h, d],
                        ));
                    }
                }
            }
            PetModules::Lora(layers) => {
                if self.config.method != PetMethod::Lora || layers.len() != vit.num_layers {
                    return Err(Error::Incompatible(format!(
                        "lora bank has {} layers, backbone has {}",
                        layers.len(),
                        vit.num_layers
                    )));
                }
                let r = self.config.rank;
                for (l, w) in layers.iter().enumerate() {
                    for (name, t, want) in [
                        ("a_q", &w.a_q, [d, r]),
                        ("a_v", &w.a_v, [d, r]),
                        ("b_q", &w.b_q, [r, d]),
                        ("b_v", &w.b_v, [r, d]),
                    ] {
                        if t.shape() != want {
                            return Err(mismatch(
                                &format!("lora.{l:03}.{name}"),
                                t.shape(),
                                want.to_vec(),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Freezing mask: with modules attached, no backbone tensor is trainable.
pub fn freeze_backbone(vit: &mut ViTParams) {
    vit.set_trainable(false);
}

/// Places prompt tokens into the `[B, T, d]` residual stream entering
/// `layer_index`.
///
/// At layer 0 the prompts go right after the class token. Deep prompts
/// overwrite the `k` prompt slots at every later layer, discarding what the
/// previous layer produced there; shallow prompts are inserted once and
/// later layers pass through. `None` stands for an empty prompt set.
pub fn insert_prompts(
    graph: &mut Graph,
    x: Var,
    prompts: Option<Var>,
    layer_index: usize,
    method: PetMethod,
    max_seq_len: usize,
) -> Result<Var> {
    if !method.is_prompt() {
        return Err(Error::config(
            "method",
            format!("{method} does not use prompt tokens"),
        ));
    }
    let Some(prompts) = prompts else { return Ok(x) };
    let shape = graph.shape(x).to_vec();
    let pshape = graph.shape(prompts).to_vec();
    if shape.len() != 3 || pshape.len() != 2 || pshape[1] != shape[2] {
        return Err(Error::ShapeMismatch {
            op: "insert_prompts",
            lhs: shape,
            rhs: pshape,
        });
    }
    let (batch, tokens, k) = (shape[0], shape[1], pshape[0]);
    let expanded = |graph: &mut Graph| graph.expand(prompts, batch);
    match (layer_index, method) {
        (0, _) => {
            if tokens + k > max_seq_len {
                return Err(Error::config(
                    "prompt_tokens",
                    format!("{} tokens exceed max_seq_len {max_seq_len}", tokens + k),
                ));
            }
            let cls = graph.narrow(x, 1, 0, 1)?;
            let rest = graph.narrow(x, 1, 1, tokens - 1)?;
            let p = expanded(graph);
            graph.concat(&[cls, p, rest], 1)
        }
        (_, PetMethod::VptDeep) => {
            if tokens < 2 + k {
                return Err(Error::ShapeMismatch {
                    op: "insert_prompts",
                    lhs: shape,
                    rhs: pshape,
                });
            }
            let cls = graph.narrow(x, 1, 0, 1)?;
            let rest = graph.narrow(x, 1, 1 + k, tokens - 1 - k)?;
            let p = expanded(graph);
            graph.concat(&[cls, p, rest], 1)
        }
        _ => Ok(x),
    }
}

/// `X + gelu(X W_down) W_up`, bias-free.
pub fn adapter_apply(graph: &mut Graph, x: Var, w_down: Var, w_up: Var) -> Result<Var> {
    let h = graph.matmul(x, w_down)?;
    let h = graph.gelu(h);
    let h = graph.matmul(h, w_up)?;
    graph.add(x, h)
}

/// `X W + s * (X A) B`.
pub fn lora_qv(graph: &mut Graph, x: Var, w: Var, a: Var, b: Var, scale: f64) -> Result<Var> {
    let base = graph.matmul(x, w)?;
    let low = graph.matmul(x, a)?;
    let low = graph.matmul(low, b)?;
    let low = graph.scale(low, scale);
    graph.add(base, low)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub trainable: usize,
    pub total: usize,
    pub ratio: f64,
}

/// Trainable-parameter accounting from the closed-form size of each method.
pub fn count_trainable(vit: &ViTParams, pet: &PetParams) -> ParamBudget {
    let cfg = &vit.config;
    let (d, layers) = (cfg.embed_dim, cfg.num_layers);
    let modules = match pet.config.method {
        PetMethod::VptDeep => layers * pet.config.prompt_tokens * d,
        PetMethod::VptShallow => pet.config.prompt_tokens * d,
        PetMethod::Adapter => layers * 2 * d * pet.config.bottleneck,
        PetMethod::Lora => layers * 4 * d * pet.config.rank,
    };
    let classes = pet.num_classes();
    let trainable = modules + classes * d + classes;
    let total = cfg.param_count() + trainable;
    ParamBudget {
        trainable,
        total,
        ratio: trainable as f64 / total as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{init_backbone, predict};

    fn vit_cfg() -> ViTConfig {
        ViTConfig {
            image_size: 16,
            patch_size: 8,
            channels: 1,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 4,
            mlp_ratio: 2,
            num_classes: 4,
            max_seq_len: 64,
        }
    }

    #[test]
    fn method_parsing() {
        assert_eq!("VPT_DEEP".parse::<PetMethod>().unwrap(), PetMethod::VptDeep);
        assert_eq!("lora".parse::<PetMethod>().unwrap(), PetMethod::Lora);
        assert!("prefix".parse::<PetMethod>().is_err());
    }

    #[test]
    fn validation_bounds() {
        let cfg = vit_cfg();
        assert!(PetConfig::new(PetMethod::Adapter)
            .with_bottleneck(32)
            .validate(&cfg)
            .is_err());
        assert!(PetConfig::new(PetMethod::Adapter)
            .with_bottleneck(0)
            .validate(&cfg)
            .is_err());
        assert!(PetConfig::new(PetMethod::Lora)
            .with_rank(32)
            .validate(&cfg)
            .is_err());
        assert!(PetConfig::new(PetMethod::VptDeep)
            .with_prompt_tokens(0)
            .validate(&cfg)
            .is_err());
        assert!(PetConfig::new(PetMethod::VptDeep)
            .with_prompt_tokens(60)
            .validate(&cfg)
            .is_err());
        // prompt length is not bounded by the embedding width
        assert!(PetConfig::new(PetMethod::VptDeep)
            .with_prompt_tokens(40)
            .validate(&cfg)
            .is_ok());
        assert!(attach(&PetConfig::new(PetMethod::Lora), &cfg, 1, 0).is_err());
    }

    #[test]
    fn attach_is_deterministic_and_trainable() {
        for method in PetMethod::ALL {
            let c = PetConfig::new(method);
            let a = attach(&c, &vit_cfg(), 4, 9).unwrap();
            let b = attach(&c, &vit_cfg(), 4, 9).unwrap();
            assert_eq!(a, b);
            assert!(a.named_tensors().iter().all(|(_, t)| t.requires_grad()));
        }
    }

    #[test]
    fn prompt_shapes_and_init_bounds() {
        let deep = attach(&PetConfig::new(PetMethod::VptDeep), &vit_cfg(), 4, 1).unwrap();
        let shallow = attach(&PetConfig::new(PetMethod::VptShallow), &vit_cfg(), 4, 1).unwrap();
        let PetModules::Prompts(d) = &deep.modules else {
            panic!()
        };
        let PetModules::Prompts(s) = &shallow.modules else {
            panic!()
        };
        assert_eq!(d.shape(), &[2, 4, 32]);
        assert_eq!(s.shape(), &[1, 4, 32]);
        let bound = (6.0f64 / 64.0).sqrt();
        assert!(d.data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn budget_examples() {
        let vit = init_backbone(&vit_cfg(), 0).unwrap();
        let deep = attach(
            &PetConfig::new(PetMethod::VptDeep).with_prompt_tokens(4),
            &vit.config,
            4,
            0,
        )
        .unwrap();
        assert_eq!(count_trainable(&vit, &deep).trainable, 388);
        let lora = attach(
            &PetConfig::new(PetMethod::Lora).with_rank(2),
            &vit.config,
            4,
            0,
        )
        .unwrap();
        assert_eq!(count_trainable(&vit, &lora).trainable, 644);
    }

    #[test]
    fn lora_at_init_leaves_logits_unchanged() {
        let mut vit = init_backbone(&vit_cfg(), 2).unwrap();
        freeze_backbone(&mut vit);
        let mut pet = attach(
            &PetConfig::new(PetMethod::Lora).with_rank(2),
            &vit.config,
            4,
            5,
        )
        .unwrap();
        pet.head_w.data_mut().copy_from_slice(vit.head_w.data());
        pet.head_b.data_mut().copy_from_slice(vit.head_b.data());
        let img = Tensor::from_fn(vec![2, 1, 16, 16], |i| (i as f64 * 0.37).sin());
        let (bare, _) = predict(&vit, None, &img).unwrap();
        let (with, _) = predict(&vit, Some(&pet), &img).unwrap();
        assert!(bare.max_abs_diff(&with) < 1e-12);
    }

    #[test]
    fn incompatible_modules_rejected_by_forward() {
        let vit = init_backbone(&vit_cfg(), 2).unwrap();
        let mut other = vit_cfg();
        other.num_layers = 3;
        let pet = attach(&PetConfig::new(PetMethod::Adapter), &other, 4, 0).unwrap();
        let img = Tensor::zeros(vec![1, 1, 16, 16]);
        assert!(matches!(
            predict(&vit, Some(&pet), &img),
            Err(Error::Incompatible(_))
        ));
    }
}
