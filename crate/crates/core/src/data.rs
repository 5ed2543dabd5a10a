//! Procedural image-classification tasks, few-shot episodes and augmentation.
//!
//! Every class id renders a fixed template, independent of the generator
//! seed; the seed only drives the additive noise. Templates are mirror
//! symmetric about the vertical axis so a horizontal flip never changes the
//! label.
//!
//! Two families:
//! - `parts`: the top half shows part `id % 4`, the bottom half part
//!   `(id / 4) % 4`. Sixteen classes; two disjoint class sets built from the
//!   same parts share their building blocks but no whole class.
//! - `patterns`: one whole-image pattern per class (`id % 4`) at a
//!   class-specific position or frequency (`id / 4`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_atomic, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"PVPD";
pub const DATASET_VERSION: u32 = 1;
pub const MIN_IMAGE_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSpec {
    #[serde(default)]
    pub family: Family,
    pub seed: u64,
    /// Global class ids to render; local labels follow this order.
    pub classes: Vec<usize>,
    pub samples_per_class: usize,
    pub image_size: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub noise_std: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Parts,
    Patterns,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Parts => "parts",
            Family::Patterns => "patterns",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "parts" => Ok(Family::Parts),
            "patterns" => Ok(Family::Patterns),
            other => Err(Error::config(
                "family",
                format!("unknown family `{other}` (expected parts or patterns)"),
            )),
        }
    }
}

/// Noise-free template value of class `class_id` at normalised coordinates.
fn template(family: Family, class_id: usize, u: f64, v: f64) -> f64 {
    match family {
        Family::Parts => parts_template(class_id, u, v),
        Family::Patterns => pattern_template(class_id, u, v),
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    /// `None` for data that did not come from the generator.
    pub family: Option<Family>,
    pub seed: u64,
    pub class_ids: Vec<usize>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[M, C, H, W]`
    pub images: Tensor,
    /// Local labels in `0..num_classes`.
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Identifier of each sample within the dataset it was drawn from.
    pub sample_ids: Vec<usize>,
    pub fingerprint: DatasetFingerprint,
}

fn gauss(x: f64, width: f64) -> f64 {
    (-(x / width).powi(2)).exp()
}

fn parts_template(class_id: usize, u: f64, v: f64) -> f64 {
    let top = class_id % 4;
    let bottom = (class_id / 4) % 4;
    let (kind, lv) = if v < 0.5 {
        (top, 2.0 * v)
    } else {
        (bottom, 2.0 * v - 1.0)
    };
    part(kind, u, lv)
}

const PART_NAMES: [&str; 4] = ["bar", "twin", "blob", "checker"];
pub const PARTS_CLASSES: usize = 16;

fn part(kind: usize, u: f64, v: f64) -> f64 {
    match kind {
        0 => gauss(v - 0.5, 0.15),
        1 => gauss(u - 0.2, 0.08).max(gauss(u - 0.8, 0.08)),
        2 => gauss(((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt(), 0.18),
        _ => {
            let parity = ((u * 3.0).floor() as usize + (v * 2.0).floor() as usize) % 2;
            if parity == 0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn pattern_template(class_id: usize, u: f64, v: f64) -> f64 {
    let kind = class_id % 4;
    let variant = (class_id / 4) % 4;
    // Ids past 16 reuse the sixteen templates, nudged downwards.
    let shift = 0.05 * (class_id / 16) as f64;
    match kind {
        // horizontal bar at a class-specific height
        0 => gauss(v - (0.2 + 0.2 * variant as f64 + shift), 0.07),
        // twin vertical bars at a class-specific spread
        1 => {
            let du = 0.1 + 0.1 * variant as f64 + shift;
            gauss(u - 0.5 - du, 0.06).max(gauss(u - 0.5 + du, 0.06))
        }
        // twin blobs at a class-specific height
        2 => {
            let v0 = 0.2 + 0.2 * variant as f64 + shift;
            let r2 = |uc: f64| ((u - uc).powi(2) + (v - v0).powi(2)).sqrt();
            gauss(r2(0.25), 0.12).max(gauss(r2(0.75), 0.12))
        }
        // checkerboard; odd cell counts keep it mirror symmetric
        _ => {
            let cells = 3 + 2 * (variant % 2);
            let parity =
                ((u * cells as f64).floor() as usize + (v * cells as f64).floor() as usize) % 2;
            let on = if variant >= 2 {
                parity == 1
            } else {
                parity == 0
            };
            if on {
                1.0
            } else {
                0.0
            }
        }
    }
}

const EXTERNAL_FAMILY: u32 = u32::MAX;

fn family_code(family: Option<Family>) -> u32 {
    match family {
        Some(Family::Parts) => 0,
        Some(Family::Patterns) => 1,
        None => EXTERNAL_FAMILY,
    }
}

/// Class name for generated data, `class-NN` for external data.
pub fn display_name(family: Option<Family>, class_id: usize) -> String {
    match family {
        Some(f) => class_name(f, class_id),
        None => format!("class-{class_id:02}"),
    }
}

pub fn class_name(family: Family, class_id: usize) -> String {
    match family {
        Family::Parts => format!(
            "{}+{}-{class_id:02}",
            PART_NAMES[class_id % 4],
            PART_NAMES[(class_id / 4) % 4]
        ),
        Family::Patterns => {
            let kind = ["bar", "twin-bars", "blobs", "checker"][class_id % 4];
            format!("{kind}-{class_id:02}")
        }
    }
}

/// Renders a deterministic dataset; samples are grouped by class.
pub fn generate(spec: &GenerateSpec) -> Result<Dataset> {
    if spec.classes.len() < 2 {
        return Err(Error::config("classes", "need at least 2 classes"));
    }
    if spec.image_size < MIN_IMAGE_SIZE {
        return Err(Error::config(
            "image_size",
            format!(
                "{} is too small to render patterns (minimum {MIN_IMAGE_SIZE})",
                spec.image_size
            ),
        ));
    }
    if spec.samples_per_class == 0 || spec.channels == 0 {
        return Err(Error::config("samples_per_class", "must be positive"));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::config(
            "noise_std",
            "must be finite and non-negative",
        ));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = spec.classes.iter().find(|c| !seen.insert(**c)) {
        return Err(Error::config(
            "classes",
            format!("duplicate class id {dup}"),
        ));
    }
    if spec.family == Family::Parts {
        if let Some(c) = spec.classes.iter().find(|&&c| c >= PARTS_CLASSES) {
            return Err(Error::config(
                "classes",
                format!("the parts family has class ids 0..{PARTS_CLASSES}, got {c}"),
            ));
        }
    }
    let size = spec.image_size;
    let plane = size * size;
    let per_image = spec.channels * plane;
    let m = spec.classes.len() * spec.samples_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let mut pixels = Vec::with_capacity(m * per_image);
    let mut labels = Vec::with_capacity(m);
    for (label, &class_id) in spec.classes.iter().enumerate() {
        let mut base = Vec::with_capacity(plane);
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 + 0.5) / size as f64;
                let v = (y as f64 + 0.5) / size as f64;
                base.push(template(spec.family, class_id, u, v));
            }
        }
        for _ in 0..spec.samples_per_class {
            for _ in 0..spec.channels {
                for &b in &base {
                    let n = if spec.noise_std > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    pixels.push(b + n);
                }
            }
            labels.push(label);
        }
    }
    Ok(Dataset {
        images: Tensor::new(vec![m, spec.channels, size, size], pixels)?,
        labels,
        class_names: spec
            .classes
            .iter()
            .map(|&c| class_name(spec.family, c))
            .collect(),
        sample_ids: (0..m).collect(),
        fingerprint: DatasetFingerprint {
            family: Some(spec.family),
            seed: spec.seed,
            class_ids: spec.classes.clone(),
            count: m,
        },
    })
}

/// Splits `0..total` parts classes into two disjoint halves by the parity of
/// `top + bottom`; each half still uses every part in both positions.
pub fn source_target_partition(total: usize) -> (Vec<usize>, Vec<usize>) {
    (0..total).partition(|c| (c % 4 + (c / 4) % 4) % 2 == 0)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if self.images.shape()[0] != self.labels.len() || self.sample_ids.len() != self.labels.len()
        {
            return Err(Error::Data("image, label and id counts disagree".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes()) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes: self.num_classes(),
            });
        }
        if let Some(c) = self.class_counts().iter().position(|&n| n == 0) {
            return Err(Error::Data(format!(
                "class `{}` has no samples",
                self.class_names[c]
            )));
        }
        if !self.images.is_finite() {
            return Err(Error::Data("images contain non-finite values".into()));
        }
        Ok(())
    }

    /// Samples at `indices` (positions in this dataset), keeping ids and class set.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let per = self.images.numel() / self.len().max(1);
        let mut pixels = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            pixels.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Dataset {
            images: Tensor::new(shape, pixels).expect("subset of a valid dataset"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            sample_ids: indices.iter().map(|&i| self.sample_ids[i]).collect(),
            fingerprint: DatasetFingerprint {
                count: indices.len(),
                ..self.fingerprint.clone()
            },
        }
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let sub = self.subset(indices);
        (sub.images, sub.labels)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.images.shape();
        let mut buf = Vec::with_capacity(40 + self.images.numel() * 4);
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for v in [s[0], s[1], s[2], s[3], self.num_classes()] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&family_code(self.fingerprint.family).to_le_bytes());
        buf.extend_from_slice(&self.fingerprint.seed.to_le_bytes());
        for &c in &self.fingerprint.class_ids {
            buf.extend_from_slice(&(c as u32).to_le_bytes());
        }
        for &l in &self.labels {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for &x in self.images.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC, "dataset")?;
        r.version(DATASET_VERSION)?;
        let dims_offset = r.pos;
        let (m, c, h, w, k) = (
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
            r.u32()? as usize,
        );
        if [m, c, h, w, k].contains(&0) {
            return Err(Error::Parse {
                offset: dims_offset,
                reason: format!("zero extent in header ({m}, {c}, {h}, {w}, classes {k})"),
            });
        }
        let family_offset = r.pos;
        let family = match r.u32()? {
            0 => Some(Family::Parts),
            1 => Some(Family::Patterns),
            EXTERNAL_FAMILY => None,
            other => {
                return Err(Error::Parse {
                    offset: family_offset,
                    reason: format!("unknown family code {other}"),
                })
            }
        };
        let seed = r.u64()?;
        let class_ids = (0..k)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let labels = (0..m)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = m * c * h * w;
        let payload = r.take(n * 4)?;
        let pixels = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        r.finish_with_crc()?;
        let ds = Dataset {
            images: Tensor::new(vec![m, c, h, w], pixels)?,
            labels,
            class_names: class_ids
                .iter()
                .map(|&id| display_name(family, id))
                .collect(),
            sample_ids: (0..m).collect(),
            fingerprint: DatasetFingerprint {
                family,
                seed,
                class_ids,
                count: m,
            },
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotEpisode {
    pub train: Dataset,
    pub eval: Dataset,
    pub shots: usize,
    pub seed: u64,
}

/// Stratified draw of exactly `shots` samples per class; everything else is
/// held out for evaluation.
pub fn sample_episode(ds: &Dataset, shots: usize, seed: u64) -> Result<FewShotEpisode> {
    if shots == 0 {
        return Err(Error::config("shots", "must be at least 1"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for class in 0..ds.num_classes() {
        let mut idx = by_class.remove(&class).unwrap_or_default();
        if idx.len() < shots + 1 {
            return Err(Error::Data(format!(
                "class `{}` has {} samples, need at least {} for a {shots}-shot episode",
                ds.class_names[class],
                idx.len(),
                shots + 1
            )));
        }
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..shots]);
        eval.extend_from_slice(&idx[shots..]);
    }
    eval.sort_unstable();
    Ok(FewShotEpisode {
        train: ds.subset(&train),
        eval: ds.subset(&eval),
        shots,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    /// Standard deviation of a per-image brightness offset.
    pub jitter_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_prob: 0.5,
            jitter_std: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

/// Mirrors every image of a `[B, C, H, W]` batch left to right.
pub fn hflip(images: &Tensor) -> Tensor {
    let w = images.shape()[3];
    let mut out = images.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Label-preserving random flip plus brightness jitter, deterministic in `seed`.
pub fn augment(images: &Tensor, config: &AugmentConfig, seed: u64) -> Tensor {
    if !config.enabled {
        return images.clone();
    }
    let s = images.shape();
    let per = s[1] * s[2] * s[3];
    let w = s[3];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, config.jitter_std.max(f64::MIN_POSITIVE)).unwrap();
    let mut out = images.clone();
    for img in out.data_mut().chunks_mut(per) {
        if rng.random_bool(config.flip_prob.clamp(0.0, 1.0)) {
            for row in img.chunks_mut(w) {
                row.reverse();
            }
        }
        let offset = if config.jitter_std > 0.0 {
            jitter.sample(&mut rng)
        } else {
            0.0
        };
        img.iter_mut().for_each(|x| *x += offset);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> GenerateSpec {
        GenerateSpec {
            family: Family::Parts,
            seed: 5,
            classes: vec![0, 1, 2],
            samples_per_class: 4,
            image_size: 16,
            channels: 1,
            noise_std: noise,
        }
    }

    #[test]
    fn generate_is_deterministic() {
        assert_eq!(generate(&spec(0.1)).unwrap(), generate(&spec(0.1)).unwrap());
    }

    #[test]
    fn noiseless_samples_identical() {
        let ds = generate(&spec(0.0)).unwrap();
        assert_eq!(ds.images.index(0), ds.images.index(1));
        assert_ne!(ds.images.index(0), ds.images.index(4));
    }

    #[test]
    fn rejects_tiny_images_and_single_class() {
        let mut s = spec(0.1);
        s.image_size = 6;
        assert!(generate(&s).unwrap_err().to_string().contains("image_size"));
        let mut s = spec(0.1);
        s.classes = vec![3];
        assert!(generate(&s).is_err());
    }

    #[test]
    fn templates_are_mirror_symmetric() {
        for family in [Family::Parts, Family::Patterns] {
            for c in 0..32 {
                for i in 0..16 {
                    for j in 0..16 {
                        let (u, v) = ((j as f64 + 0.5) / 16.0, (i as f64 + 0.5) / 16.0);
                        let a = template(family, c, u, v);
                        let b = template(family, c, 1.0 - u, v);
                        assert!((a - b).abs() < 1e-12, "{family:?} class {c} at ({i},{j})");
                    }
                }
            }
        }
    }

    #[test]
    fn partition_is_disjoint_and_covers_parts() {
        let (src, tgt) = source_target_partition(PARTS_CLASSES);
        assert_eq!(src.len(), 8);
        assert!(src.iter().all(|c| !tgt.contains(c)));
        for kind in 0..4 {
            for side in [&src, &tgt] {
                assert!(side.iter().any(|c| c % 4 == kind));
                assert!(side.iter().any(|c| (c / 4) % 4 == kind));
            }
        }
    }

    #[test]
    fn parts_ids_bounded() {
        let mut s = spec(0.1);
        s.classes = vec![0, 16];
        assert!(generate(&s).unwrap_err().to_string().contains("0..16"));
        s.family = Family::Patterns;
        generate(&s).unwrap();
    }

    #[test]
    fn distinct_templates() {
        for family in [Family::Parts, Family::Patterns] {
            let s = GenerateSpec {
                family,
                classes: (0..16).collect(),
                samples_per_class: 1,
                ..spec(0.0)
            };
            let ds = generate(&s).unwrap();
            for a in 0..16 {
                for b in 0..a {
                    assert_ne!(
                        ds.images.index(a),
                        ds.images.index(b),
                        "{family:?} {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn episode_counts() {
        let ds = generate(&spec(0.1)).unwrap();
        let ep = sample_episode(&ds, 2, 1).unwrap();
        assert_eq!(ep.train.len(), 6);
        assert_eq!(ep.train.class_counts(), vec![2, 2, 2]);
        let boundary = sample_episode(&ds, 3, 1).unwrap();
        assert_eq!(boundary.eval.class_counts(), vec![1, 1, 1]);
        let err = sample_episode(&ds, 4, 1).unwrap_err().to_string();
        assert!(err.contains("bar-00"), "{err}");
        let other = sample_episode(&ds, 2, 2).unwrap();
        assert_ne!(ep.train.sample_ids, other.train.sample_ids);
        assert_eq!(other.train.class_counts(), vec![2, 2, 2]);
    }

    #[test]
    fn augment_contract() {
        let ds = generate(&spec(0.1)).unwrap();
        assert_eq!(
            augment(&ds.images, &AugmentConfig::disabled(), 3),
            ds.images
        );
        assert_eq!(hflip(&hflip(&ds.images)), ds.images);
        let a = augment(&ds.images, &AugmentConfig::default(), 3);
        assert_eq!(a.shape(), ds.images.shape());
        assert_eq!(a, augment(&ds.images, &AugmentConfig::default(), 3));
        let flips_only = AugmentConfig {
            jitter_std: 0.0,
            ..AugmentConfig::default()
        };
        let once = augment(&ds.images, &flips_only, 8);
        assert_eq!(augment(&once, &flips_only, 8), ds.images);
    }

    #[test]
    fn pvpd_roundtrip_and_integrity() {
        let ds = generate(&spec(0.2)).unwrap();
        let bytes = ds.to_bytes();
        assert_eq!(&bytes[..4], b"PVPD");
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.fingerprint, ds.fingerprint);
        for (a, b) in ds.images.data().iter().zip(back.images.data()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-30));
        }
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 9] ^= 1;
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Crc { .. })));
        assert!(matches!(
            Dataset::from_bytes(&bytes[..30]),
            Err(Error::Parse { .. })
        ));
    }
}
