//! Pre-trained parameter-efficient tuning on a miniature Vision Transformer.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autograd`], [`optim`]: dense tensors, a reverse-mode tape
//!   and AdamW.
//! * [`vit`]: the frozen backbone.
//! * [`petuning`]: prompt tokens, adapters, LoRA and the freezing mask.
//! * [`checkpoint`], [`workflow`]: stage-1 module pre-training, the binary
//!   module bank, prompt/module loading and stage-2 tuning.
//! * [`data`]: synthetic tasks, few-shot episodes, augmentation.
//! * [`trainer`], [`benchmark`]: training loops, evaluation, grid search and
//!   the scratch-vs-pre-trained comparison.

pub mod autograd;
pub mod benchmark;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod petuning;
pub mod tensor;
pub mod trainer;
pub mod vit;
pub mod workflow;

pub use autograd::{Graph, OpKind, Var};
pub use checkpoint::{Fingerprint, ModuleCheckpoint};
pub use data::{Dataset, FewShotEpisode, GenerateSpec};
pub use error::{Error, ErrorKind, Result};
pub use optim::{AdamW, AdamWConfig};
pub use petuning::{PetConfig, PetMethod, PetParams};
pub use tensor::Tensor;
pub use trainer::{Model, RunRecord, TrainSpec};
pub use vit::{ViTConfig, ViTParams};
pub use workflow::{LoadSpec, LoadType};
