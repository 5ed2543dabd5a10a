//! Miniature pre-norm Vision Transformer.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::petuning::{self, PetModules, PetParams};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Upper bound on class + prompt + patch tokens.
    pub max_seq_len: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            embed_dim: 32,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4,
            num_classes: 8,
            max_seq_len: 256,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "patch_size",
                format!(
                    "{} does not divide image_size {}",
                    self.patch_size, self.image_size
                ),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "num_heads",
                format!(
                    "{} does not divide embed_dim {}",
                    self.num_heads, self.embed_dim
                ),
            ));
        }
        if self.max_seq_len < self.num_patches() + 1 {
            return Err(Error::config(
                "max_seq_len",
                format!("must hold at least {} tokens", self.num_patches() + 1),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    /// Closed-form number of scalars in [`ViTParams`].
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let hidden = self.mlp_hidden();
        let embed = self.patch_dim() * d + d + d + (self.num_patches() + 1) * d;
        let block = 4 * (d * d + d) + 2 * 2 * d + (d * hidden + hidden) + (hidden * d + d);
        let tail = 2 * d + d * self.num_classes + self.num_classes;
        embed + self.num_layers * block + tail
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

impl BlockParams {
    fn tensors(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("attn.b_k", &self.b_k),
            ("attn.b_o", &self.b_o),
            ("attn.b_q", &self.b_q),
            ("attn.b_v", &self.b_v),
            ("attn.w_k", &self.w_k),
            ("attn.w_o", &self.w_o),
            ("attn.w_q", &self.w_q),
            ("attn.w_v", &self.w_v),
            ("ln1.beta", &self.ln1_beta),
            ("ln1.gamma", &self.ln1_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("ln2.gamma", &self.ln2_gamma),
            ("mlp.b1", &self.mlp_b1),
            ("mlp.b2", &self.mlp_b2),
            ("mlp.w1", &self.mlp_w1),
            ("mlp.w2", &self.mlp_w2),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 16] {
        [
            ("attn.b_k", &mut self.b_k),
            ("attn.b_o", &mut self.b_o),
            ("attn.b_q", &mut self.b_q),
            ("attn.b_v", &mut self.b_v),
            ("attn.w_k", &mut self.w_k),
            ("attn.w_o", &mut self.w_o),
            ("attn.w_q", &mut self.w_q),
            ("attn.w_v", &mut self.w_v),
            ("ln1.beta", &mut self.ln1_beta),
            ("ln1.gamma", &mut self.ln1_gamma),
            ("ln2.beta", &mut self.ln2_beta),
            ("ln2.gamma", &mut self.ln2_gamma),
            ("mlp.b1", &mut self.mlp_b1),
            ("mlp.b2", &mut self.mlp_b2),
            ("mlp.w1", &mut self.mlp_w1),
            ("mlp.w2", &mut self.mlp_w2),
        ]
    }
}

/// The backbone parameter set. Linear weights are stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams {
    pub config: ViTConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Draws a fresh backbone. Every tensor starts trainable; PETuning freezes it.
pub fn init_backbone(config: &ViTConfig, seed: u64) -> Result<ViTParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.embed_dim;
    let hidden = config.mlp_hidden();
    let mut w = |shape: Vec<usize>| Tensor::trunc_normal(shape, INIT_STD, &mut rng);
    let patch_w = w(vec![config.patch_dim(), d]);
    let pos_embed = w(vec![config.num_patches() + 1, d]);
    let mut blocks = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        blocks.push(BlockParams {
            ln1_gamma: Tensor::full(vec![d], 1.0),
            ln1_beta: Tensor::zeros(vec![d]),
            w_q: w(vec![d, d]),
            b_q: Tensor::zeros(vec![d]),
            w_k: w(vec![d, d]),
            b_k: Tensor::zeros(vec![d]),
            w_v: w(vec![d, d]),
            b_v: Tensor::zeros(vec![d]),
            w_o: w(vec![d, d]),
            b_o: Tensor::zeros(vec![d]),
            ln2_gamma: Tensor::full(vec![d], 1.0),
            ln2_beta: Tensor::zeros(vec![d]),
            mlp_w1: w(vec![d, hidden]),
            mlp_b1: Tensor::zeros(vec![hidden]),
            mlp_w2: w(vec![hidden, d]),
            mlp_b2: Tensor::zeros(vec![d]),
        });
    }
    let head_w = w(vec![d, config.num_classes]);
    let mut params = ViTParams {
        config: config.clone(),
        patch_w,
        patch_b: Tensor::zeros(vec![d]),
        cls_token: Tensor::zeros(vec![1, d]),
        pos_embed,
        blocks,
        norm_gamma: Tensor::full(vec![d], 1.0),
        norm_beta: Tensor::zeros(vec![d]),
        head_w,
        head_b: Tensor::zeros(vec![config.num_classes]),
    };
    params.set_trainable(true);
    Ok(params)
}

impl ViTParams {
    /// All tensors with stable, lexicographically sortable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("cls_token".to_string(), &self.cls_token),
            ("head.b".to_string(), &self.head_b),
            ("head.w".to_string(), &self.head_w),
            ("norm.beta".to_string(), &self.norm_beta),
            ("norm.gamma".to_string(), &self.norm_gamma),
            ("patch.b".to_string(), &self.patch_b),
            ("patch.w".to_string(), &self.patch_w),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (l, block) in self.blocks.iter().enumerate() {
            for (name, t) in block.tensors() {
                out.push((format!("blocks.{l:03}.{name}"), t));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("cls_token".to_string(), &mut self.cls_token),
            ("head.b".to_string(), &mut self.head_b),
            ("head.w".to_string(), &mut self.head_w),
            ("norm.beta".to_string(), &mut self.norm_beta),
            ("norm.gamma".to_string(), &mut self.norm_gamma),
            ("patch.b".to_string(), &mut self.patch_b),
            ("patch.w".to_string(), &mut self.patch_w),
            ("pos_embed".to_string(), &mut self.pos_embed),
        ];
        for (l, block) in self.blocks.iter_mut().enumerate() {
            for (name, t) in block.tensors_mut() {
                out.push((format!("blocks.{l:03}.{name}"), t));
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for (_, t) in self.named_tensors_mut() {
            t.set_requires_grad(trainable);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| !t.requires_grad())
    }

    /// Replaces the classifier with a zero-initialised head of `num_classes` outputs.
    pub fn reset_head(&mut self, num_classes: usize) {
        let d = self.config.embed_dim;
        let trainable = self.head_w.requires_grad();
        self.config.num_classes = num_classes;
        self.head_w = Tensor::zeros(vec![d, num_classes]).with_requires_grad(trainable);
        self.head_b = Tensor::zeros(vec![num_classes]).with_requires_grad(trainable);
    }

    /// SHA-256 over every tensor's name, shape and little-endian values.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.named_tensors() {
            hasher.update(name.as_bytes());
            for &e in t.shape() {
                hasher.update((e as u64).to_le_bytes());
            }
            for &x in t.data() {
                hasher.update(x.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Rearranges `[B, C, H, W]` images into `[B, num_patches, C * p * p]` rows.
/// Patches are ordered row-major over the grid; features as (channel, dy, dx).
pub fn patchify(config: &ViTConfig, images: &Tensor) -> Result<Tensor> {
    let s = images.shape();
    let expected = [config.channels, config.image_size, config.image_size];
    if s.len() != 4 || s[1..] != expected {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            lhs: s.to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let (b, c, size, p) = (s[0], config.channels, config.image_size, config.patch_size);
    let grid = config.grid();
    let pd = config.patch_dim();
    let data = images.data();
    let mut out = Vec::with_capacity(b * grid * grid * pd);
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                for ch in 0..c {
                    for dy in 0..p {
                        let row = ((bi * c + ch) * size + gy * p + dy) * size + gx * p;
                        out.extend_from_slice(&data[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, grid * grid, pd], out)
}

/// Graph handles for every parameter bound during a forward pass.
#[derive(Debug, Default)]
pub struct Bindings {
    pub backbone: Vec<(String, Var)>,
    pub pet: Vec<(String, Var)>,
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Class-token representation after the final norm, `[B, d]`.
    pub features: Var,
    /// Residual stream entering each block (after prompt insertion), `[B, T, d]`.
    pub layer_inputs: Vec<Var>,
    pub bindings: Bindings,
}

fn bind_all(graph: &mut Graph, named: Vec<(String, &Tensor)>) -> Vec<(String, Var)> {
    named
        .into_iter()
        .map(|(name, t)| {
            let v = graph.param(t);
            (name, v)
        })
        .collect()
}

fn lookup(bound: &[(String, Var)], name: &str) -> Var {
    bound
        .binary_search_by(|(n, _)| n.as_str().cmp(name))
        .map(|i| bound[i].1)
        .unwrap_or_else(|_| panic!("parameter `{name}` not bound"))
}

fn linear(graph: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = graph.matmul(x, w)?;
    graph.add(y, b)
}

/// Records the forward pass of the backbone, optionally with PETuning modules,
/// for a `[B, C, H, W]` batch.
///
/// With modules attached, the modules' own classifier head replaces the
/// backbone head.
pub fn forward(
    graph: &mut Graph,
    params: &ViTParams,
    pet: Option<&PetParams>,
    images: &Tensor,
) -> Result<ForwardOutput> {
    let cfg = &params.config;
    if let Some(pet) = pet {
        pet.check_compatible(cfg)?;
    }
    let patches = patchify(cfg, images)?;
    let batch = patches.shape()[0];
    let bb = bind_all(graph, params.named_tensors());
    let pb = pet
        .map(|p| bind_all(graph, p.named_tensors()))
        .unwrap_or_default();
    let p = |name: &str| lookup(&bb, name);

    let x = graph.constant(&patches);
    let x = linear(graph, x, p("patch.w"), p("patch.b"))?;
    let cls = graph.expand(p("cls_token"), batch);
    let x = graph.concat(&[cls, x], 1)?;
    let mut x = graph.add(x, p("pos_embed"))?;

    let mut layer_inputs = Vec::with_capacity(cfg.num_layers);
    for layer in 0..cfg.num_layers {
        let prefix = format!("blocks.{layer:03}.");
        let bp = |name: &str| lookup(&bb, &format!("{prefix}{name}"));
        if let Some(pet) = pet {
            if let PetModules::Prompts(tokens) = &pet.modules {
                let rows = tokens.shape()[0];
                if layer < rows {
                    let bank = lookup(&pb, petuning::PROMPT_TENSOR);
                    let k = tokens.shape()[1];
                    let layer_prompts = graph.narrow(bank, 0, layer, 1)?;
                    let layer_prompts = graph.reshape(layer_prompts, vec![k, cfg.embed_dim])?;
                    x = petuning::insert_prompts(
                        graph,
                        x,
                        Some(layer_prompts),
                        layer,
                        pet.config.method,
                        cfg.max_seq_len,
                    )?;
                }
            }
        }
        layer_inputs.push(x);

        let h = graph.layernorm(x, bp("ln1.gamma"), bp("ln1.beta"), LAYER_NORM_EPS)?;
        let (q, k, v) = match pet.map(|p| &p.modules) {
            Some(PetModules::Lora(_)) => {
                let pet = pet.unwrap();
                let lp = |name: &str| lookup(&pb, &format!("lora.{layer:03}.{name}"));
                let s = pet.config.lora_scale;
                let q = petuning::lora_qv(graph, h, bp("attn.w_q"), lp("a_q"), lp("b_q"), s)?;
                let q = graph.add(q, bp("attn.b_q"))?;
                let v = petuning::lora_qv(graph, h, bp("attn.w_v"), lp("a_v"), lp("b_v"), s)?;
                let v = graph.add(v, bp("attn.b_v"))?;
                let k = linear(graph, h, bp("attn.w_k"), bp("attn.b_k"))?;
                (q, k, v)
            }
            _ => (
                linear(graph, h, bp("attn.w_q"), bp("attn.b_q"))?,
                linear(graph, h, bp("attn.w_k"), bp("attn.b_k"))?,
                linear(graph, h, bp("attn.w_v"), bp("attn.b_v"))?,
            ),
        };
        let a = graph.attention(q, k, v, cfg.num_heads)?;
        let a = linear(graph, a, bp("attn.w_o"), bp("attn.b_o"))?;
        x = graph.add(x, a)?;

        let h = graph.layernorm(x, bp("ln2.gamma"), bp("ln2.beta"), LAYER_NORM_EPS)?;
        let h = linear(graph, h, bp("mlp.w1"), bp("mlp.b1"))?;
        let h = graph.gelu(h);
        let mut f = linear(graph, h, bp("mlp.w2"), bp("mlp.b2"))?;
        if let Some(PetModules::Adapter(_)) = pet.map(|p| &p.modules) {
            let ap = |name: &str| lookup(&pb, &format!("adapter.{layer:03}.{name}"));
            f = petuning::adapter_apply(graph, f, ap("w_down"), ap("w_up"))?;
        }
        x = graph.add(x, f)?;
    }

    let x = graph.layernorm(x, p("norm.gamma"), p("norm.beta"), LAYER_NORM_EPS)?;
    let cls = graph.narrow(x, 1, 0, 1)?;
    let features = graph.reshape(cls, vec![batch, cfg.embed_dim])?;
    let (hw, hb) = match pet {
        Some(_) => (lookup(&pb, "head.w"), lookup(&pb, "head.b")),
        None => (p("head.w"), p("head.b")),
    };
    let logits = linear(graph, features, hw, hb)?;
    Ok(ForwardOutput {
        logits,
        features,
        layer_inputs,
        bindings: Bindings {
            backbone: bb,
            pet: pb,
        },
    })
}

/// Gradient-free evaluation returning `(logits, features)`.
pub fn predict(
    params: &ViTParams,
    pet: Option<&PetParams>,
    images: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut graph = Graph::new();
    let out = forward(&mut graph, params, pet, images)?;
    Ok((graph.tensor(out.logits), graph.tensor(out.features)))
}

/// Shared, read-only backbone handle used by concurrent tuning runs.
pub type SharedBackbone = Arc<ViTParams>;

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ViTConfig {
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
    fn patch_count() {
        assert_eq!(small().num_patches(), 4);
    }

    #[test]
    fn invalid_config_names_field() {
        let mut cfg = small();
        cfg.patch_size = 5;
        let err = init_backbone(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("patch_size"), "{err}");
        let mut cfg = small();
        cfg.num_heads = 3;
        assert!(init_backbone(&cfg, 0)
            .unwrap_err()
            .to_string()
            .contains("num_heads"));
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_backbone(&small(), 11).unwrap();
        let b = init_backbone(&small(), 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        let c = init_backbone(&small(), 12).unwrap();
        assert_ne!(a.digest(), c.digest());
        assert!(a.cls_token.data().iter().all(|&x| x == 0.0));
        assert!(a.blocks[0].b_q.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn param_count_matches_closed_form() {
        for cfg in [small(), ViTConfig::default()] {
            let p = init_backbone(&cfg, 0).unwrap();
            assert_eq!(p.param_count(), cfg.param_count());
        }
    }

    #[test]
    fn patchify_layout() {
        let cfg = ViTConfig {
            image_size: 4,
            patch_size: 2,
            max_seq_len: 8,
            ..small()
        };
        let img = Tensor::from_fn(vec![1, 1, 4, 4], |i| i as f64);
        let p = patchify(&cfg, &img).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn batch_rows_independent() {
        let params = init_backbone(&small(), 3).unwrap();
        let one = Tensor::from_fn(vec![1, 1, 16, 16], |i| ((i * 7) % 13) as f64 / 13.0);
        let mut two = one.data().to_vec();
        two.extend_from_slice(one.data());
        let two = Tensor::new(vec![2, 1, 16, 16], two).unwrap();
        let (l1, _) = predict(&params, None, &one).unwrap();
        let (l2, _) = predict(&params, None, &two).unwrap();
        assert_eq!(&l2.data()[..4], l1.data());
        assert_eq!(&l2.data()[4..], l1.data());
    }

    #[test]
    fn rejects_wrong_image_size() {
        let params = init_backbone(&small(), 3).unwrap();
        let img = Tensor::zeros(vec![1, 1, 8, 8]);
        assert!(matches!(
            predict(&params, None, &img),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
