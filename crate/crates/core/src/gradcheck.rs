//! Central-difference verification of every differentiable operation, a
//! small ViT, and each PETuning method.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, OpKind, Var};
use crate::error::Result;
use crate::petuning::{attach, PetConfig, PetMethod, PetParams};
use crate::tensor::Tensor;
use crate::vit::{self, init_backbone, ViTConfig, ViTParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub seeds: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so gradients near zero are
    /// compared absolutely.
    pub floor: f64,
    /// Coordinates probed per model tensor group in the ViT cases.
    pub model_probes: usize,
    /// Test hook: negate the backward contribution of this op.
    #[serde(skip)]
    pub sign_flip: Option<OpKind>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 20,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            model_probes: 12,
            sign_flip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub name: String,
    pub seeds: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub cases: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn case(&self, name: &str) -> Option<&CaseReport> {
        self.cases.iter().find(|c| c.name == name)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn randn(shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        scale * Distribution::<f64>::sample(&StandardNormal, rng)
    })
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Max relative error between backward and central differences for a scalar
/// function of `inputs`.
pub fn check_function(
    inputs: &[Tensor],
    build: &Build,
    cfg: &GradcheckConfig,
) -> Result<(f64, usize)> {
    let mut graph = match cfg.sign_flip {
        Some(kind) => Graph::with_sign_flip(kind),
        None => Graph::new(),
    };
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| graph.param(&t.clone().with_requires_grad(true)))
        .collect();
    let loss = build(&mut graph, &vars)?;
    let grads = graph.backward(loss)?;
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = ts.iter().map(|t| g.constant(t)).collect();
        let l = build(&mut g, &vs)?;
        Ok(g.value(l)[0])
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + cfg.step;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x - cfg.step;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * cfg.step);
            worst = worst.max(relative_error(a, numeric, cfg.floor));
            checked += 1;
        }
    }
    Ok((worst, checked))
}

/// Reduces an arbitrary output to a scalar with fixed random weights, so
/// every output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = randn(g.shape(y).to_vec(), 1.0, &mut rng);
    let w = g.constant(&w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

struct PrimitiveCase {
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: fn(&mut Graph, &[Var], u64) -> Result<Var>,
}

fn primitive_cases() -> Vec<PrimitiveCase> {
    vec![
        PrimitiveCase {
            name: "add",
            inputs: |r| vec![randn(vec![3, 4], 1.0, r), randn(vec![4], 1.0, r)],
            build: |g, v, s| {
                let y = g.add(v[0], v[1])?;
                weighted_sum(g, y, s)
            },
        },
        PrimitiveCase {
            name: "mul",
            inputs: |r| vec![randn(vec![2, 3, 4], 1.0, r), randn(vec![3, 4], 1.0, r)],
            build: |g, v, s| {
                let y = g.mul(v[0], v[1])?;
                weighted_sum(g, y, s)
            },
        },
        PrimitiveCase {
            name: "scale",
            inputs: |r| vec![randn(vec![5], 1.0, r)],
            build: |g, v, s| {
                let y = g.scale(v[0], -1.7);
                weighted_sum(g, y, s)
            },
        },
        PrimitiveCase {
            name: "matmul",
            inputs: |r| vec![randn(vec![3, 4], 1.0, r), randn(vec![4, 2], 1.0, r)],
            build: |g, v, s| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, s)
            },
        },
        PrimitiveCase {
            name: "matmul_batched",
            inputs: |r| vec![randn(vec![2, 3, 4], 1.0, r), randn(vec![4, 5], 1.0, r)],
            build: |g, v, s| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, s)
            },
        },
        PrimitiveCase {
            name: "gelu",
            inputs: |r| vec![randn(vec![3, 5], 1.5, r)],
            build: |g, v, s| {
                let y = g.gelu(v[0]);
                weighted_sum(g, y, s)
            },
        },
        PrimitiveCase {
            name: "softmax",
            inputs: |r| vec![randn(vec![2, 5], 1.0, r)],
            build: |g, v, s| {
                let y = g.softmax(v[0]);
                weighted_sum(g, y, s)
            },
        },
        PrimitiveCase {
            name: "layernorm",
            inputs: |r| {
                vec![
                    randn(vec![4, 8], 1.0, r),
                    randn(vec![8], 1.0, r),
                    randn(vec![8], 1.0, r),
                ]
            },
            build: |g, v, s| {
                let y = g.layernorm(v[0], v[1], v[2], 1e-6)?;
                weighted_sum(g, y, s)
            },
        },
        PrimitiveCase {
            name: "attention",
            inputs: |r| {
                vec![
                    randn(vec![2, 3, 4], 1.0, r),
                    randn(vec![2, 3, 4], 1.0, r),
                    randn(vec![2, 3, 4], 1.0, r),
                ]
            },
            build: |g, v, s| {
                let y = g.attention(v[0], v[1], v[2], 2)?;
                weighted_sum(g, y, s)
            },
        },
        PrimitiveCase {
            name: "concat",
            inputs: |r| vec![randn(vec![2, 1, 3], 1.0, r), randn(vec![2, 2, 3], 1.0, r)],
            build: |g, v, s| {
                let y = g.concat(&[v[0], v[1]], 1)?;
                weighted_sum(g, y, s)
            },
        },
        PrimitiveCase {
            name: "narrow",
            inputs: |r| vec![randn(vec![2, 4, 3], 1.0, r)],
            build: |g, v, s| {
                let y = g.narrow(v[0], 1, 1, 2)?;
                weighted_sum(g, y, s)
            },
        },
        PrimitiveCase {
            name: "expand",
            inputs: |r| vec![randn(vec![2, 3], 1.0, r)],
            build: |g, v, s| {
                let y = g.expand(v[0], 3);
                weighted_sum(g, y, s)
            },
        },
        PrimitiveCase {
            name: "reshape",
            inputs: |r| vec![randn(vec![2, 6], 1.0, r)],
            build: |g, v, s| {
                let y = g.reshape(v[0], vec![3, 4])?;
                weighted_sum(g, y, s)
            },
        },
        PrimitiveCase {
            name: "sum",
            inputs: |r| vec![randn(vec![4, 2], 1.0, r)],
            build: |g, v, _| {
                let y = g.mul(v[0], v[0])?;
                Ok(g.sum(y))
            },
        },
        PrimitiveCase {
            name: "cross_entropy",
            inputs: |r| vec![randn(vec![4, 3], 2.0, r)],
            build: |g, v, _| g.cross_entropy(v[0], &[0, 2, 1, 2]),
        },
        PrimitiveCase {
            name: "mlp2",
            inputs: |r| {
                vec![
                    randn(vec![5, 4], 1.0, r),
                    randn(vec![4, 6], 0.5, r),
                    randn(vec![6], 0.5, r),
                    randn(vec![6, 3], 0.5, r),
                    randn(vec![3], 0.5, r),
                ]
            },
            build: |g, v, _| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.add(h, v[2])?;
                let h = g.gelu(h);
                let o = g.matmul(h, v[3])?;
                let o = g.add(o, v[4])?;
                g.cross_entropy(o, &[0, 1, 2, 1, 0])
            },
        },
    ]
}

/// The toy model used by the model-level cases: two layers, small width.
pub fn gradcheck_vit() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        max_seq_len: 64,
    }
}

/// Replaces every value with a unit-scale draw so that no gradient is
/// trivially zero (the real init has zero heads and tiny weights).
fn scramble(named: Vec<(String, &mut Tensor)>, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, t) in named {
        for x in t.data_mut() {
            *x = scale * Distribution::<f64>::sample(&StandardNormal, rng);
        }
    }
}

struct ModelCase {
    vit: ViTParams,
    pet: Option<PetParams>,
    images: Tensor,
    labels: Vec<usize>,
}

fn model_loss(graph: &mut Graph, case: &ModelCase) -> Result<(Var, vit::ForwardOutput)> {
    let out = vit::forward(graph, &case.vit, case.pet.as_ref(), &case.images)?;
    let loss = graph.cross_entropy(out.logits, &case.labels)?;
    Ok((loss, out))
}

fn loss_value(case: &ModelCase) -> Result<f64> {
    let mut g = Graph::new();
    let (loss, _) = model_loss(&mut g, case)?;
    Ok(g.value(loss)[0])
}

fn build_model_case(method: Option<PetMethod>, seed: u64) -> Result<ModelCase> {
    let cfg = gradcheck_vit();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vit = init_backbone(&cfg, seed)?;
    scramble(vit.named_tensors_mut(), &mut rng, 0.4);
    let pet = match method {
        Some(m) => {
            vit.set_trainable(false);
            let pc = PetConfig::new(m)
                .with_prompt_tokens(2)
                .with_bottleneck(2)
                .with_rank(2);
            let mut p = attach(&pc, &cfg, cfg.num_classes, seed)?;
            scramble(p.named_tensors_mut(), &mut rng, 0.4);
            Some(p)
        }
        None => None,
    };
    let images = randn(vec![2, 1, 8, 8], 1.0, &mut rng);
    let labels = (0..2)
        .map(|_| rng.random_range(0..cfg.num_classes))
        .collect();
    Ok(ModelCase {
        vit,
        pet,
        images,
        labels,
    })
}

/// Checks `probes` random coordinates of every trainable tensor.
fn check_model(case: &mut ModelCase, cfg: &GradcheckConfig, seed: u64) -> Result<(f64, usize)> {
    let mut graph = match cfg.sign_flip {
        Some(kind) => Graph::with_sign_flip(kind),
        None => Graph::new(),
    };
    let (loss, out) = model_loss(&mut graph, case)?;
    let grads = graph.backward(loss)?;
    let bound = if case.pet.is_some() {
        &out.bindings.pet
    } else {
        &out.bindings.backbone
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, var) in bound {
        let analytic = grads.get(*var).map(|g| g.to_vec());
        let numel = graph.shape(*var).iter().product::<usize>();
        for _ in 0..cfg.model_probes.min(numel) {
            let j = rng.random_range(0..numel);
            let perturb = |case: &mut ModelCase, delta: f64| {
                let named = match &mut case.pet {
                    Some(p) => p.named_tensors_mut(),
                    None => case.vit.named_tensors_mut(),
                };
                for (n, t) in named {
                    if &n == name {
                        t.data_mut()[j] += delta;
                    }
                }
            };
            perturb(case, cfg.step);
            let up = loss_value(case)?;
            perturb(case, -2.0 * cfg.step);
            let down = loss_value(case)?;
            perturb(case, cfg.step);
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.as_ref().map(|g| g[j]).unwrap_or(0.0);
            worst = worst.max(relative_error(a, numeric, cfg.floor));
            checked += 1;
        }
    }
    Ok((worst, checked))
}

fn summarize(name: &str, results: Vec<(u64, f64, usize)>, cfg: &GradcheckConfig) -> CaseReport {
    let (worst_seed, max_rel_error) =
        results
            .iter()
            .map(|&(s, e, _)| (s, e))
            .fold((cfg.seed, 0.0f64), |acc, (s, e)| {
                if e > acc.1 || e.is_nan() {
                    (s, e)
                } else {
                    acc
                }
            });
    CaseReport {
        name: name.to_string(),
        seeds: results.len(),
        checked: results.iter().map(|r| r.2).sum(),
        max_rel_error,
        worst_seed,
        passed: max_rel_error < cfg.tolerance,
    }
}

/// Runs every case over `cfg.seeds` consecutive seeds starting at `cfg.seed`.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let seeds: Vec<u64> = (0..cfg.seeds as u64)
        .map(|i| cfg.seed.wrapping_add(i))
        .collect();
    let mut cases = Vec::new();
    for case in primitive_cases() {
        let mut results = Vec::new();
        for &seed in &seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = (case.inputs)(&mut rng);
            let b = case.build;
            let (e, n) =
                check_function(&inputs, &move |g: &mut Graph, v: &[Var]| b(g, v, seed), cfg)?;
            results.push((seed, e, n));
        }
        cases.push(summarize(case.name, results, cfg));
    }
    let methods: [(&str, Option<PetMethod>); 5] = [
        ("vit", None),
        ("vit+vpt_shallow", Some(PetMethod::VptShallow)),
        ("vit+vpt_deep", Some(PetMethod::VptDeep)),
        ("vit+adapter", Some(PetMethod::Adapter)),
        ("vit+lora", Some(PetMethod::Lora)),
    ];
    for (name, method) in methods {
        let mut results = Vec::new();
        for &seed in &seeds {
            let mut case = build_model_case(method, seed)?;
            let (e, n) = check_model(&mut case, cfg, seed)?;
            results.push((seed, e, n));
        }
        cases.push(summarize(name, results, cfg));
    }
    Ok(GradcheckReport {
        config: *cfg,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-4), 0.0);
        assert!((relative_error(2e-9, 1e-9, 1e-4) - 1e-5).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0, 1e-4) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matmul_check_is_tight() {
        let cfg = GradcheckConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs = vec![
            randn(vec![3, 4], 1.0, &mut rng),
            randn(vec![4, 2], 1.0, &mut rng),
        ];
        let (e, n) = check_function(
            &inputs,
            &|g: &mut Graph, v: &[Var]| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, 1)
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(n, 20);
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn sign_flip_is_caught() {
        let cfg = GradcheckConfig {
            sign_flip: Some(OpKind::Gelu),
            ..GradcheckConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![randn(vec![6], 1.0, &mut rng)];
        let (e, _) = check_function(
            &inputs,
            &|g: &mut Graph, v: &[Var]| {
                let y = g.gelu(v[0]);
                weighted_sum(g, y, 0)
            },
            &cfg,
        )
        .unwrap();
        assert!(e > 1.0);
    }
}
