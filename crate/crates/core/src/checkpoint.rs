//! Binary module bank (`PVPC`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PVPC"                      4 bytes
//! version                     u32 (= 1)
//! method tag                  u8  (0 = prompts, 1 = adapter, 2 = lora)
//! d, L, patch, image, dim     u32 x 5   (dim = N, h or r)
//! tensor count                u32
//! per tensor, sorted by name:
//!   name length               u16
//!   name                      UTF-8
//!   rank                      u8
//!   dims                      u32 x rank
//!   payload                   f32 x prod(dims), row-major
//! crc32 of all preceding bytes u32
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::petuning::{PetMethod, PetParams, PROMPT_TENSOR};
use crate::tensor::Tensor;
use crate::vit::ViTConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PVPC";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEAD_W: &str = "head.w";
const HEAD_B: &str = "head.b";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankKind {
    Prompts,
    Adapter,
    Lora,
}

impl BankKind {
    pub fn tag(self) -> u8 {
        match self {
            BankKind::Prompts => 0,
            BankKind::Adapter => 1,
            BankKind::Lora => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(BankKind::Prompts),
            1 => Some(BankKind::Adapter),
            2 => Some(BankKind::Lora),
            _ => None,
        }
    }

    pub fn for_method(method: PetMethod) -> Self {
        match method {
            PetMethod::VptShallow | PetMethod::VptDeep => BankKind::Prompts,
            PetMethod::Adapter => BankKind::Adapter,
            PetMethod::Lora => BankKind::Lora,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BankKind::Prompts => "vpt",
            BankKind::Adapter => "adapter",
            BankKind::Lora => "lora",
        }
    }
}

/// Architecture facts a bank must agree with before it can be attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub embed_dim: u32,
    pub num_layers: u32,
    pub patch_size: u32,
    pub image_size: u32,
    /// Bank token count `N`, adapter width `h` or LoRA rank `r`.
    pub module_dim: u32,
}

impl Fingerprint {
    pub fn new(vit: &ViTConfig, module_dim: usize) -> Self {
        Self {
            embed_dim: vit.embed_dim as u32,
            num_layers: vit.num_layers as u32,
            patch_size: vit.patch_size as u32,
            image_size: vit.image_size as u32,
            module_dim: module_dim as u32,
        }
    }
}

/// Where a bank came from. Not part of the binary format; the CLI records it
/// in the run manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub source_task: String,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleCheckpoint {
    pub kind: BankKind,
    pub fingerprint: Fingerprint,
    pub tensors: BTreeMap<String, Tensor>,
    pub provenance: Option<Provenance>,
}

impl ModuleCheckpoint {
    /// Captures the module tensors (never the head) of `pet`.
    pub fn from_pet(pet: &PetParams, vit: &ViTConfig, provenance: Option<Provenance>) -> Self {
        let tensors = pet
            .module_tensors()
            .into_iter()
            .map(|(name, t)| {
                let mut t = t.clone();
                t.set_requires_grad(false);
                (name, t)
            })
            .collect();
        Self {
            kind: BankKind::for_method(pet.config.method),
            fingerprint: Fingerprint::new(vit, pet.config.module_dim()),
            tensors,
            provenance,
        }
    }

    /// Also stores the classifier head of `pet`.
    pub fn with_head(mut self, pet: &PetParams) -> Self {
        for (name, t) in [(HEAD_W, &pet.head_w), (HEAD_B, &pet.head_b)] {
            let mut t = t.clone();
            t.set_requires_grad(false);
            self.tensors.insert(name.to_string(), t);
        }
        self
    }

    pub fn head(&self) -> Option<(&Tensor, &Tensor)> {
        Some((self.tensors.get(HEAD_W)?, self.tensors.get(HEAD_B)?))
    }

    /// Copies the stored head into `pet`.
    pub fn restore_head(&self, pet: &mut PetParams) -> Result<()> {
        let (w, b) = self
            .head()
            .ok_or_else(|| Error::Incompatible("checkpoint has no classifier head".into()))?;
        if w.shape() != pet.head_w.shape() {
            return Err(Error::Incompatible(format!(
                "stored head {:?} does not match model head {:?}",
                w.shape(),
                pet.head_w.shape()
            )));
        }
        pet.head_w.data_mut().copy_from_slice(w.data());
        pet.head_b.data_mut().copy_from_slice(b.data());
        Ok(())
    }

    pub fn prompt_bank(&self) -> Result<&Tensor> {
        if self.kind != BankKind::Prompts {
            return Err(Error::Incompatible(format!(
                "expected a prompt bank, found a {} bank",
                self.kind.as_str()
            )));
        }
        self.tensors
            .get(PROMPT_TENSOR)
            .ok_or_else(|| Error::Incompatible(format!("missing tensor `{PROMPT_TENSOR}`")))
    }

    /// Structural consistency between the tensor table and the fingerprint.
    pub fn validate(&self) -> Result<()> {
        let fp = self.fingerprint;
        let (d, layers, dim) = (
            fp.embed_dim as usize,
            fp.num_layers as usize,
            fp.module_dim as usize,
        );
        if dim == 0 || d == 0 || layers == 0 {
            return Err(Error::Incompatible("fingerprint has zero extents".into()));
        }
        let mut expected: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        match self.kind {
            BankKind::Prompts => {
                let rows = self
                    .tensors
                    .get(PROMPT_TENSOR)
                    .map(|t| t.shape()[0])
                    .unwrap_or(layers);
                if rows != layers && rows != 1 {
                    return Err(Error::Incompatible(format!(
                        "prompt bank has {rows} layers, fingerprint says {layers}"
                    )));
                }
                expected.insert(PROMPT_TENSOR.into(), vec![rows, dim, d]);
            }
            BankKind::Adapter => {
                for l in 0..layers {
                    expected.insert(format!("adapter.{l:03}.w_down"), vec![d, dim]);
                    expected.insert(format!("adapter.{l:03}.w_up"), vec![dim, d]);
                }
            }
            BankKind::Lora => {
                for l in 0..layers {
                    expected.insert(format!("lora.{l:03}.a_q"), vec![d, dim]);
                    expected.insert(format!("lora.{l:03}.a_v"), vec![d, dim]);
                    expected.insert(format!("lora.{l:03}.b_q"), vec![dim, d]);
                    expected.insert(format!("lora.{l:03}.b_v"), vec![dim, d]);
                }
            }
        }
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => return Err(Error::Incompatible(format!("missing tensor `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Incompatible(format!(
                        "tensor `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        match (self.tensors.get(HEAD_W), self.tensors.get(HEAD_B)) {
            (None, None) => {}
            (Some(w), Some(b)) => {
                let ok = w.shape().len() == 2 && w.shape()[0] == d && b.shape() == [w.shape()[1]];
                if !ok || w.shape()[1] < 2 {
                    return Err(Error::Incompatible(format!(
                        "head shapes {:?} / {:?} do not fit embed_dim {d}",
                        w.shape(),
                        b.shape()
                    )));
                }
                expected.insert(HEAD_W.into(), w.shape().to_vec());
                expected.insert(HEAD_B.into(), b.shape().to_vec());
            }
            _ => {
                return Err(Error::Incompatible(
                    "head needs both `head.w` and `head.b`".into(),
                ))
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Incompatible(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    /// Fingerprint check against the model the bank is about to be attached to.
    pub fn check_backbone(&self, vit: &ViTConfig) -> Result<()> {
        let fp = self.fingerprint;
        let ours = Fingerprint::new(vit, fp.module_dim as usize);
        if fp != ours {
            return Err(Error::Incompatible(format!(
                "bank fingerprint (d={}, L={}, patch={}, image={}) does not match backbone (d={}, L={}, patch={}, image={})",
                fp.embed_dim, fp.num_layers, fp.patch_size, fp.image_size,
                ours.embed_dim, ours.num_layers, ours.patch_size, ours.image_size
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.push(self.kind.tag());
        let fp = self.fingerprint;
        for v in [
            fp.embed_dim,
            fp.num_layers,
            fp.patch_size,
            fp.image_size,
            fp.module_dim,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            write_tensor(&mut buf, name, t);
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC, "checkpoint")?;
        r.version(CHECKPOINT_VERSION)?;
        let tag_offset = r.pos;
        let tag = r.u8()?;
        let kind = BankKind::from_tag(tag).ok_or(Error::Parse {
            offset: tag_offset,
            reason: format!("unknown method tag {tag}"),
        })?;
        let fingerprint = Fingerprint {
            embed_dim: r.u32()?,
            num_layers: r.u32()?,
            patch_size: r.u32()?,
            image_size: r.u32()?,
            module_dim: r.u32()?,
        };
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let (name, t) = read_tensor(&mut r)?;
            tensors.insert(name, t);
        }
        r.finish_with_crc()?;
        let ckpt = Self {
            kind,
            fingerprint,
            tensors,
            provenance: None,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub(crate) fn write_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(t.shape().len() as u8);
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &x in t.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

fn read_tensor(r: &mut Reader<'_>) -> Result<(String, Tensor)> {
    let name_len = r.u16()? as usize;
    let name_offset = r.pos;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|e| Error::Parse {
            offset: name_offset,
            reason: format!("tensor name is not UTF-8: {e}"),
        })?
        .to_string();
    let rank = r.u8()? as usize;
    let dims_offset = r.pos;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u32()? as usize);
    }
    let n: usize = dims.iter().product();
    if dims.contains(&0) {
        return Err(Error::Parse {
            offset: dims_offset,
            reason: format!("tensor `{name}` has a zero extent {dims:?}"),
        });
    }
    let payload = r.take(n.checked_mul(4).ok_or(Error::Parse {
        offset: dims_offset,
        reason: "tensor size overflows".into(),
    })?)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((name, Tensor::new(dims, data)?))
}

/// Bounds-checked little-endian cursor that reports byte offsets.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                reason: format!(
                    "unexpected end of file: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4], expected: &'static str) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::BadMagic { expected });
        }
        Ok(())
    }

    pub(crate) fn version(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(Error::UnsupportedVersion { found, expected });
        }
        Ok(())
    }

    /// Reads the trailing CRC and requires it to be the last thing in the buffer.
    pub(crate) fn finish_with_crc(&mut self) -> Result<()> {
        let body_end = self.pos;
        let stored = self.u32()?;
        if self.pos != self.buf.len() {
            return Err(Error::Parse {
                offset: self.pos,
                reason: format!("{} trailing bytes after crc", self.buf.len() - self.pos),
            });
        }
        let computed = crc32fast::hash(&self.buf[..body_end]);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }
        Ok(())
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config("path", format!("`{}` has no file name", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp.{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Copies a bank's tensors into freshly attached modules of the same shape.
pub(crate) fn fill_modules(pet: &mut PetParams, ckpt: &ModuleCheckpoint) -> Result<()> {
    for (name, t) in pet.named_tensors_mut() {
        if name.starts_with("head.") {
            continue;
        }
        let src = ckpt
            .tensors
            .get(&name)
            .ok_or_else(|| Error::Incompatible(format!("bank is missing tensor `{name}`")))?;
        if src.shape() != t.shape() {
            return Err(Error::Incompatible(format!(
                "tensor `{name}`: bank shape {:?} does not match module shape {:?}",
                src.shape(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::petuning::{attach, PetConfig};

    fn vit_cfg() -> ViTConfig {
        ViTConfig {
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
            ..ViTConfig::default()
        }
    }

    fn bank(method: PetMethod) -> ModuleCheckpoint {
        let cfg = PetConfig::new(method)
            .with_prompt_tokens(3)
            .with_bottleneck(2)
            .with_rank(2);
        let mut pet = attach(&cfg, &vit_cfg(), 3, 7).unwrap();
        for (_, t) in pet.named_tensors_mut() {
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x += 0.01 * i as f64;
            }
        }
        ModuleCheckpoint::from_pet(&pet, &vit_cfg(), None)
    }

    #[test]
    fn roundtrip_within_f32_precision() {
        for method in PetMethod::ALL {
            let ckpt = bank(method);
            let back = ModuleCheckpoint::from_bytes(&ckpt.to_bytes()).unwrap();
            assert_eq!(back.kind, ckpt.kind);
            assert_eq!(back.fingerprint, ckpt.fingerprint);
            for (name, t) in &ckpt.tensors {
                let b = &back.tensors[name];
                for (x, y) in t.data().iter().zip(b.data()) {
                    assert!(
                        (x - y).abs() <= 1e-6 * x.abs().max(1e-30),
                        "{name}: {x} vs {y}"
                    );
                }
            }
        }
    }

    #[test]
    fn header_layout_is_exact() {
        let bytes = bank(PetMethod::VptDeep).to_bytes();
        assert_eq!(&bytes[..4], b"PVPC");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(bytes[8], 0);
        assert_eq!(&bytes[9..13], &8u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &2u32.to_le_bytes());
        assert_eq!(&bytes[25..29], &3u32.to_le_bytes());
        assert_eq!(&bytes[29..33], &1u32.to_le_bytes());
        assert_eq!(&bytes[33..35], &(PROMPT_TENSOR.len() as u16).to_le_bytes());
        let expected_len = 33 + 2 + PROMPT_TENSOR.len() + 1 + 12 + 2 * 3 * 8 * 4 + 4;
        assert_eq!(bytes.len(), expected_len);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = bank(PetMethod::Adapter).to_bytes();
        let err = ModuleCheckpoint::from_bytes(&bytes[..bytes.len() - 10]).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert!(offset > 33 && offset < bytes.len()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_crc() {
        let mut bytes = bank(PetMethod::Lora).to_bytes();
        bytes[0] = b'X';
        assert_eq!(
            ModuleCheckpoint::from_bytes(&bytes)
                .unwrap_err()
                .to_string(),
            "not a PVP checkpoint file (bad magic bytes)"
        );
        let mut bytes = bank(PetMethod::Lora).to_bytes();
        let n = bytes.len();
        bytes[n - 20] ^= 0x10;
        assert!(matches!(
            ModuleCheckpoint::from_bytes(&bytes),
            Err(Error::Crc { .. })
        ));
    }

    #[test]
    fn fingerprint_mismatch_detected_at_attach_time() {
        let ckpt = bank(PetMethod::Adapter);
        let mut other = vit_cfg();
        other.num_layers = 3;
        assert!(ckpt.check_backbone(&vit_cfg()).is_ok());
        assert!(matches!(
            ckpt.check_backbone(&other),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.pvpc");
        let ckpt = bank(PetMethod::VptShallow);
        ckpt.save(&path).unwrap();
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
        assert_eq!(ModuleCheckpoint::load(&path).unwrap().tensors.len(), 1);
    }
}
