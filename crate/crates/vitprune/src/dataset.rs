//! Labeled token datasets: seeded synthetic generation and on-disk storage.
//!
//! Two interchangeable file forms. The binary container ("VITD") stores
//! pre-embedded token tensors plus integer labels using the same tensor
//! record layout as the weight file. The JSON form stores a generation spec;
//! loading it synthesizes the dataset on the fly. The loader sniffs the
//! leading magic bytes to tell them apart.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::wire;

pub const DATASET_MAGIC: &[u8; 4] = b"VITD";
pub const DATASET_VERSION: u16 = 1;

/// Class patterns draw from this fixed tag, never from the dataset seed, so
/// a scorer can reconstruct a class's pattern without the generating spec.
const CLASS_PATTERN_TAG: u64 = 0x434C_4153;

/// In-memory dataset: per-sample token matrices with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    tokens: Vec<Tensor>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    /// Invariants: non-empty, one label per sample, labels < num_classes,
    /// every sample the same [tokens, dim] shape.
    pub fn new(tokens: Vec<Tensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Validation("dataset has no samples".into()));
        }
        if tokens.len() != labels.len() {
            return Err(Error::Validation(format!(
                "{} samples but {} labels",
                tokens.len(),
                labels.len()
            )));
        }
        let shape = tokens[0].shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!(
                "samples must be [tokens, dim], got {shape:?}"
            )));
        }
        for (i, t) in tokens.iter().enumerate() {
            if t.shape() != shape {
                return Err(Error::Shape(format!(
                    "sample {i} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Validation(format!(
                "label {l} of sample {i} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            tokens,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sample(&self, i: usize) -> (&Tensor, usize) {
        (&self.tokens[i], self.labels[i])
    }

    pub fn tokens(&self) -> &[Tensor] {
        &self.tokens
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens[0].shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens[0].shape()[1]
    }
}

/// Recipe for a synthetic dataset; loading this JSON regenerates the data.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub schema_version: u32,
    pub num_samples: usize,
    pub num_classes: usize,
    pub num_tokens: usize,
    pub embed_dim: usize,
    pub num_special_tokens: usize,
    /// Weight of the class pattern in each informative token.
    pub signal: f32,
    /// Weight of the per-token uniform noise.
    pub noise: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != manifest::SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "unsupported dataset spec schema_version {}",
                self.schema_version
            )));
        }
        if self.num_samples == 0 {
            return Err(Error::Validation("num_samples must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Validation("num_classes must be positive".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Validation("embed_dim must be positive".into()));
        }
        if self.num_tokens <= self.num_special_tokens {
            return Err(Error::Validation(format!(
                "num_tokens {} must exceed num_special_tokens {}",
                self.num_tokens, self.num_special_tokens
            )));
        }
        if !(self.signal.is_finite() && self.noise.is_finite()) {
            return Err(Error::Validation("signal and noise must be finite".into()));
        }
        Ok(())
    }
}

/// The ±1 pattern that marks class membership, one sign per channel.
pub fn class_pattern(class: usize, dim: usize) -> Vec<f32> {
    let mut rng = SplitMix64::substream(CLASS_PATTERN_TAG, class as u64, 0);
    (0..dim)
        .map(|_| if rng.next_f32() < 0.5 { -1.0 } else { 1.0 })
        .collect()
}

/// Generate the dataset a spec describes. Sample s gets label s mod classes;
/// special tokens are zero rows; informative token t of sample s draws its
/// noise from substream (seed, s, t), so samples and tokens are independent.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (n, d) = (spec.num_tokens, spec.embed_dim);
    let mut tokens = Vec::with_capacity(spec.num_samples);
    let mut labels = Vec::with_capacity(spec.num_samples);
    let patterns: Vec<Vec<f32>> = (0..spec.num_classes).map(|c| class_pattern(c, d)).collect();
    for s in 0..spec.num_samples {
        let label = s % spec.num_classes;
        let pattern = &patterns[label];
        let mut data = vec![0.0f32; n * d];
        for t in spec.num_special_tokens..n {
            let mut rng = SplitMix64::substream(spec.seed, s as u64, t as u64);
            let row = &mut data[t * d..(t + 1) * d];
            for (j, v) in row.iter_mut().enumerate() {
                *v = spec.signal * pattern[j] + spec.noise * rng.next_symmetric(1.0);
            }
        }
        tokens.push(Tensor::new(vec![n, d], data)?);
        labels.push(label);
    }
    Dataset::new(tokens, labels, spec.num_classes)
}

fn encode_binary(dataset: &Dataset) -> Result<Vec<u8>> {
    u32::try_from(dataset.len())
        .and(u32::try_from(dataset.num_classes))
        .map_err(|_| Error::Validation("dataset too large for the container format".into()))?;
    let mut buf = Vec::new();
    let w = &mut buf;
    w.extend_from_slice(DATASET_MAGIC);
    wire::write_u16(w, DATASET_VERSION).expect("in-memory write cannot fail");
    wire::write_u32(w, dataset.len() as u32).expect("in-memory write cannot fail");
    wire::write_u32(w, dataset.num_classes as u32).expect("in-memory write cannot fail");
    for (i, (tensor, label)) in dataset.tokens.iter().zip(&dataset.labels).enumerate() {
        wire::write_u32(w, *label as u32).expect("in-memory write cannot fail");
        wire::write_tensor(w, &format!("samples.{i}"), tensor)
            .expect("in-memory write cannot fail");
    }
    Ok(buf)
}

/// Write the binary container atomically.
pub fn save_binary(dataset: &Dataset, path: &Path) -> Result<()> {
    manifest::write_atomic(path, &encode_binary(dataset)?)
}

fn read_binary_after_magic<R: Read>(r: &mut R, source: &str) -> Result<Dataset> {
    let fail = |what: &str| Error::Validation(format!("truncated {what} in {source}"));
    let version = wire::read_u16(r).map_err(|_| fail("version"))?;
    if version != DATASET_VERSION {
        return Err(Error::Validation(format!(
            "{source}: unsupported dataset version {version}"
        )));
    }
    let count = wire::read_u32(r).map_err(|_| fail("sample count"))? as usize;
    let num_classes = wire::read_u32(r).map_err(|_| fail("class count"))? as usize;
    if count == 0 {
        return Err(Error::Validation(format!(
            "{source}: dataset has no samples"
        )));
    }
    let mut tokens = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        labels.push(wire::read_u32(r).map_err(|_| fail("label"))? as usize);
        let context = format!("sample {i} of {count} in {source}");
        let (name, tensor) = wire::read_tensor(r, &context)?;
        let expected = format!("samples.{i}");
        if name != expected {
            return Err(Error::Validation(format!(
                "{source}: expected tensor {expected}, found {name}"
            )));
        }
        tokens.push(tensor);
    }
    Dataset::new(tokens, labels, num_classes)
}

/// Load either dataset form, sniffing the binary magic first.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    if &magic == DATASET_MAGIC {
        return read_binary_after_magic(&mut r, &source);
    }
    let mut bytes = magic.to_vec();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let spec: SyntheticSpec = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    generate(&spec)
}

/// Write the JSON spec form atomically.
pub fn save_spec(spec: &SyntheticSpec, path: &Path) -> Result<()> {
    spec.validate()?;
    let mut body = serde_json::to_vec_pretty(spec).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    body.push(b'\n');
    manifest::write_atomic(path, &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            schema_version: 1,
            num_samples: 6,
            num_classes: 3,
            num_tokens: 9,
            embed_dim: 5,
            num_special_tokens: 1,
            signal: 0.7,
            noise: 0.4,
            seed: 42,
        }
    }

    #[test]
    fn class_patterns_are_signs_and_seed_independent() {
        let p = class_pattern(2, 16);
        assert_eq!(p.len(), 16);
        assert!(p.iter().all(|&v| v == 1.0 || v == -1.0));
        assert_eq!(p, class_pattern(2, 16));
        assert_ne!(class_pattern(0, 16), class_pattern(1, 16));
    }

    #[test]
    fn generation_is_deterministic_and_labeled_round_robin() {
        let a = generate(&spec()).unwrap();
        let b = generate(&spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels(), &[0, 1, 2, 0, 1, 2]);
        let mut other = spec();
        other.seed = 43;
        assert_ne!(generate(&other).unwrap(), a);
    }

    #[test]
    fn special_rows_are_zero_and_signal_shifts_toward_pattern() {
        let ds = generate(&spec()).unwrap();
        let (t, label) = ds.sample(0);
        assert!(t.row(0).iter().all(|&v| v == 0.0));
        // With signal > noise the mean informative row correlates with the
        // class pattern on every channel.
        let d = ds.embed_dim();
        let pattern = class_pattern(label, d);
        for (j, &p) in pattern.iter().enumerate() {
            let mean: f32 = (1..ds.num_tokens()).map(|r| t.row(r)[j]).sum::<f32>()
                / (ds.num_tokens() - 1) as f32;
            assert!(mean * p > 0.0, "channel {j}: mean {mean} vs pattern {p}");
        }
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let ds = generate(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.vitd");
        save_binary(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.num_classes(), ds.num_classes());
        assert_eq!(back.labels(), ds.labels());
        for (a, b) in back.tokens().iter().zip(ds.tokens()) {
            assert_eq!(a.shape(), b.shape());
            let bits_equal = a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(bits_equal);
        }
    }

    #[test]
    fn spec_file_regenerates_the_same_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.json");
        save_spec(&spec(), &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), generate(&spec()).unwrap());
    }

    #[test]
    fn loader_rejects_garbage_and_bad_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a dataset at all").unwrap();
        assert!(load_dataset(&path).is_err());

        let versioned = dir.path().join("future.vitd");
        let mut bytes = DATASET_MAGIC.to_vec();
        bytes.extend_from_slice(&9u16.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        std::fs::write(&versioned, bytes).unwrap();
        let err = load_dataset(&versioned).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec();
        s.num_tokens = 1;
        assert!(generate(&s).is_err());
        let mut s = spec();
        s.num_samples = 0;
        assert!(generate(&s).is_err());
        let mut s = spec();
        s.noise = f32::NAN;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn dataset_constructor_enforces_invariants() {
        let t = Tensor::zeros(vec![4, 3]).unwrap();
        assert!(Dataset::new(vec![t.clone()], vec![2], 2).is_err()); // label range
        assert!(Dataset::new(vec![], vec![], 2).is_err());
        let other = Tensor::zeros(vec![5, 3]).unwrap();
        assert!(Dataset::new(vec![t, other], vec![0, 0], 2).is_err()); // shape
    }
}
