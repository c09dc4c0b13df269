//! Vision-transformer architecture, weight storage, and the forward pass.
//!
//! The encoder is pre-norm: `x += attn(ln1(x))`, then `x += mlp(ln2(x))`.
//! A [`TokenReducer`] hook can run after one designated layer's attention
//! residual; it sees that layer's post-softmax attention and per-head values
//! ([`AttentionCapture`]) plus the current activations, and may return a
//! reduced token set which every later computation (including that layer's
//! MLP) consumes. The classifier head reads special token 0 after the final
//! norm, so its output shape never depends on how many tokens survive.

use std::collections::HashMap;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ops;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::wire;

/// Magic bytes opening a weight file.
pub const WEIGHTS_MAGIC: &[u8; 4] = b"VITW";
/// Weight format version this build reads and writes.
pub const WEIGHTS_VERSION: u16 = 1;

// ---- configuration ---------------------------------------------------------

/// Architecture description. `head_dim` is derived (`embed_dim / num_heads`),
/// not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: f32,
    /// Nominal sequence length: patch tokens plus special tokens.
    pub num_tokens: usize,
    /// Prefix tokens (class/register) that are never pruned.
    pub num_special_tokens: usize,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema_version: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_hash: Option<String>,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.embed_dim == 0 || self.num_heads == 0 {
            return Err(Error::Config(
                "embed_dim and num_heads must be positive".into(),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !self.mlp_ratio.is_finite() || self.mlp_ratio <= 0.0 {
            return Err(Error::Config(format!(
                "mlp_ratio must be a positive finite number, got {}",
                self.mlp_ratio
            )));
        }
        if self.mlp_hidden() == 0 {
            return Err(Error::Config(format!(
                "mlp_ratio {} with embed_dim {} yields an empty hidden layer",
                self.mlp_ratio, self.embed_dim
            )));
        }
        if self.num_special_tokens >= self.num_tokens {
            return Err(Error::Config(format!(
                "num_special_tokens {} must be smaller than num_tokens {}",
                self.num_special_tokens, self.num_tokens
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        Ok(())
    }

    /// Per-head channel count C.
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// MLP hidden width, `round(mlp_ratio · embed_dim)`.
    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f32).round() as usize
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ViTConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }
}

// ---- weights ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
struct LayerWeights {
    ln1_gamma: Vec<f32>,
    ln1_beta: Vec<f32>,
    qkv_w: Tensor, // [d, 3d]
    qkv_b: Vec<f32>,
    proj_w: Tensor, // [d, d]
    proj_b: Vec<f32>,
    ln2_gamma: Vec<f32>,
    ln2_beta: Vec<f32>,
    fc1_w: Tensor, // [d, hidden]
    fc1_b: Vec<f32>,
    fc2_w: Tensor, // [hidden, d]
    fc2_b: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTModel {
    config: ViTConfig,
    layers: Vec<LayerWeights>,
    final_gamma: Vec<f32>,
    final_beta: Vec<f32>,
    head_w: Tensor, // [d, num_classes]
    head_b: Vec<f32>,
}

/// Expected (name, shape) pairs for a config, in serialization order.
fn expected_tensors(config: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.embed_dim;
    let hidden = config.mlp_hidden();
    let mut out = Vec::new();
    for l in 0..config.depth {
        out.push((format!("layers.{l}.ln1.gamma"), vec![d]));
        out.push((format!("layers.{l}.ln1.beta"), vec![d]));
        out.push((format!("layers.{l}.qkv.weight"), vec![d, 3 * d]));
        out.push((format!("layers.{l}.qkv.bias"), vec![3 * d]));
        out.push((format!("layers.{l}.proj.weight"), vec![d, d]));
        out.push((format!("layers.{l}.proj.bias"), vec![d]));
        out.push((format!("layers.{l}.ln2.gamma"), vec![d]));
        out.push((format!("layers.{l}.ln2.beta"), vec![d]));
        out.push((format!("layers.{l}.mlp.fc1.weight"), vec![d, hidden]));
        out.push((format!("layers.{l}.mlp.fc1.bias"), vec![hidden]));
        out.push((format!("layers.{l}.mlp.fc2.weight"), vec![hidden, d]));
        out.push((format!("layers.{l}.mlp.fc2.bias"), vec![d]));
    }
    out.push(("final_norm.gamma".into(), vec![d]));
    out.push(("final_norm.beta".into(), vec![d]));
    out.push(("head.weight".into(), vec![d, config.num_classes]));
    out.push(("head.bias".into(), vec![config.num_classes]));
    out
}

fn vec_tensor(v: &[f32]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("non-empty weight vector")
}

impl ViTModel {
    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    /// Tensors in serialization order, matching [`expected_tensors`].
    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (l, lw) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.ln1.gamma"), vec_tensor(&lw.ln1_gamma)));
            out.push((format!("layers.{l}.ln1.beta"), vec_tensor(&lw.ln1_beta)));
            out.push((format!("layers.{l}.qkv.weight"), lw.qkv_w.clone()));
            out.push((format!("layers.{l}.qkv.bias"), vec_tensor(&lw.qkv_b)));
            out.push((format!("layers.{l}.proj.weight"), lw.proj_w.clone()));
            out.push((format!("layers.{l}.proj.bias"), vec_tensor(&lw.proj_b)));
            out.push((format!("layers.{l}.ln2.gamma"), vec_tensor(&lw.ln2_gamma)));
            out.push((format!("layers.{l}.ln2.beta"), vec_tensor(&lw.ln2_beta)));
            out.push((format!("layers.{l}.mlp.fc1.weight"), lw.fc1_w.clone()));
            out.push((format!("layers.{l}.mlp.fc1.bias"), vec_tensor(&lw.fc1_b)));
            out.push((format!("layers.{l}.mlp.fc2.weight"), lw.fc2_w.clone()));
            out.push((format!("layers.{l}.mlp.fc2.bias"), vec_tensor(&lw.fc2_b)));
        }
        out.push(("final_norm.gamma".into(), vec_tensor(&self.final_gamma)));
        out.push(("final_norm.beta".into(), vec_tensor(&self.final_beta)));
        out.push(("head.weight".into(), self.head_w.clone()));
        out.push(("head.bias".into(), vec_tensor(&self.head_b)));
        out
    }

    /// Stream the weight file encoding to any writer.
    pub fn save_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let tensors = self.named_tensors();
        w.write_all(WEIGHTS_MAGIC)?;
        wire::write_u16(w, WEIGHTS_VERSION)?;
        wire::write_u32(w, tensors.len() as u32)?;
        for (name, t) in &tensors {
            wire::write_tensor(w, name, t)?;
        }
        Ok(())
    }

    pub fn save_to_file(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.save_to(&mut buf).expect("in-memory write cannot fail");
        crate::manifest::write_atomic(path, &buf)
    }

    /// SHA-256 over the weight-file encoding: a stable identity for a set of
    /// weights regardless of where the file lives.
    pub fn weights_hash(&self) -> String {
        struct HashWriter(Sha256);
        impl Write for HashWriter {
            fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
                self.0.update(buf);
                Ok(buf.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let mut hw = HashWriter(Sha256::new());
        self.save_to(&mut hw).expect("hash write cannot fail");
        crate::manifest::to_hex(&hw.0.finalize())
    }
}

/// Deterministically generate a model from a seed. Projection weights are
/// uniform in ±1/sqrt(fan_in), biases zero, norm scales one. Draws come from
/// a single SplitMix64 stream in serialization order and use only bit
/// manipulation plus exactly-rounded sqrt, so the same (config, seed) yields
/// bit-identical weights on every platform.
pub fn generate_random_model(config: &ViTConfig, seed: u64) -> Result<ViTModel> {
    config.validate()?;
    let d = config.embed_dim;
    let hidden = config.mlp_hidden();
    let mut rng = SplitMix64::new(seed);
    let mut proj = |rows: usize, cols: usize| -> Tensor {
        let scale = (1.0 / rows as f32).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.next_symmetric(scale))
            .collect();
        Tensor::new(vec![rows, cols], data).expect("projection shape is valid")
    };

    let mut layers = Vec::with_capacity(config.depth);
    for _ in 0..config.depth {
        layers.push(LayerWeights {
            ln1_gamma: vec![1.0; d],
            ln1_beta: vec![0.0; d],
            qkv_w: proj(d, 3 * d),
            qkv_b: vec![0.0; 3 * d],
            proj_w: proj(d, d),
            proj_b: vec![0.0; d],
            ln2_gamma: vec![1.0; d],
            ln2_beta: vec![0.0; d],
            fc1_w: proj(d, hidden),
            fc1_b: vec![0.0; hidden],
            fc2_w: proj(hidden, d),
            fc2_b: vec![0.0; d],
        });
    }
    let head_w = proj(d, config.num_classes);
    Ok(ViTModel {
        config: config.clone(),
        layers,
        final_gamma: vec![1.0; d],
        final_beta: vec![0.0; d],
        head_w,
        head_b: vec![0.0; config.num_classes],
    })
}

/// Load a model from a config (JSON path) and weight file, validating every
/// tensor's shape against the config.
pub fn load_model(config_path: &Path, weights_path: &Path) -> Result<ViTModel> {
    let config = ViTConfig::from_json_file(config_path)?;
    let file = std::fs::File::open(weights_path).map_err(|e| Error::io(weights_path, e))?;
    let mut r = BufReader::new(file);
    load_model_from(&config, &mut r, &weights_path.display().to_string())
}

/// Load weights for `config` from any reader; `source` names the origin in
/// error messages.
pub fn load_model_from(config: &ViTConfig, r: &mut impl Read, source: &str) -> Result<ViTModel> {
    config.validate()?;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Validation(format!("malformed header in {source}: file too short")))?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Validation(format!(
            "malformed header in {source}: bad magic {magic:?}, expected \"VITW\""
        )));
    }
    let version = wire::read_u16(r)
        .map_err(|_| Error::Validation(format!("malformed header in {source}: missing version")))?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Validation(format!(
            "unsupported weight format version {version} in {source} (expected {WEIGHTS_VERSION})"
        )));
    }
    let count = wire::read_u32(r).map_err(|_| {
        Error::Validation(format!(
            "malformed header in {source}: missing tensor count"
        ))
    })? as usize;

    let expected = expected_tensors(config);
    if count != expected.len() {
        return Err(Error::Validation(format!(
            "{source} holds {count} tensors but the config requires {}",
            expected.len()
        )));
    }

    let mut tensors: HashMap<String, Tensor> = HashMap::with_capacity(count);
    for i in 0..count {
        let context = format!("record {} of {count} in {source}", i + 1);
        let (name, t) = wire::read_tensor(r, &context)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Validation(format!(
                "duplicate tensor '{name}' in {source}"
            )));
        }
    }

    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::Validation(format!("missing tensor '{name}' in {source}")))?;
        if t.shape() != shape {
            return Err(Error::Validation(format!(
                "tensor '{name}' in {source} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };

    let d = config.embed_dim;
    let hidden = config.mlp_hidden();
    let mut layers = Vec::with_capacity(config.depth);
    for l in 0..config.depth {
        layers.push(LayerWeights {
            ln1_gamma: take(&format!("layers.{l}.ln1.gamma"), &[d])?.into_data(),
            ln1_beta: take(&format!("layers.{l}.ln1.beta"), &[d])?.into_data(),
            qkv_w: take(&format!("layers.{l}.qkv.weight"), &[d, 3 * d])?,
            qkv_b: take(&format!("layers.{l}.qkv.bias"), &[3 * d])?.into_data(),
            proj_w: take(&format!("layers.{l}.proj.weight"), &[d, d])?,
            proj_b: take(&format!("layers.{l}.proj.bias"), &[d])?.into_data(),
            ln2_gamma: take(&format!("layers.{l}.ln2.gamma"), &[d])?.into_data(),
            ln2_beta: take(&format!("layers.{l}.ln2.beta"), &[d])?.into_data(),
            fc1_w: take(&format!("layers.{l}.mlp.fc1.weight"), &[d, hidden])?,
            fc1_b: take(&format!("layers.{l}.mlp.fc1.bias"), &[hidden])?.into_data(),
            fc2_w: take(&format!("layers.{l}.mlp.fc2.weight"), &[hidden, d])?,
            fc2_b: take(&format!("layers.{l}.mlp.fc2.bias"), &[d])?.into_data(),
        });
    }
    let final_gamma = take("final_norm.gamma", &[d])?.into_data();
    let final_beta = take("final_norm.beta", &[d])?.into_data();
    let head_w = take("head.weight", &[d, config.num_classes])?;
    let head_b = take("head.bias", &[config.num_classes])?.into_data();
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Validation(format!(
            "unexpected tensor '{extra}' in {source}"
        )));
    }
    Ok(ViTModel {
        config: config.clone(),
        layers,
        final_gamma,
        final_beta,
        head_w,
        head_b,
    })
}

// ---- forward pass -------------------------------------------------------------

/// Attention internals of one layer for one sample, handed to the reducer.
#[derive(Debug, Clone)]
pub struct AttentionCapture {
    /// Post-softmax attention, `[H, n, n]`; every row sums to 1.
    pub attn: Tensor,
    /// Per-head value vectors, `[H, n, C]`.
    pub values: Tensor,
    pub layer_index: usize,
}

/// Hook that may shrink the token set after one layer's attention residual.
///
/// Contract: runs per sample; the returned activations must keep the
/// embedding width and leave the special-token prefix rows untouched.
pub trait TokenReducer: Sync {
    /// Encoder layer index (0-based) after whose attention the hook runs.
    fn layer_index(&self) -> usize;
    fn reduce(&self, capture: &AttentionCapture, activations: Tensor) -> Result<Tensor>;
}

/// Hook that returns its input unchanged; useful for testing that the hook
/// plumbing itself does not perturb the forward pass.
pub struct IdentityReducer {
    pub layer_index: usize,
}

impl TokenReducer for IdentityReducer {
    fn layer_index(&self) -> usize {
        self.layer_index
    }
    fn reduce(&self, _capture: &AttentionCapture, activations: Tensor) -> Result<Tensor> {
        Ok(activations)
    }
}

impl ViTModel {
    /// Run the encoder on `tokens` (`[b, n, d]`), optionally applying a
    /// [`TokenReducer`] after its designated layer's attention. Returns
    /// logits `[b, num_classes]`.
    pub fn forward(&self, tokens: &Tensor, hook: Option<&dyn TokenReducer>) -> Result<Tensor> {
        if tokens.rank() != 3 {
            return Err(Error::Shape(format!(
                "forward expects [batch, tokens, dim], got {:?}",
                tokens.shape()
            )));
        }
        let (b, n, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
        if d != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "input embedding dim {d} does not match model embed_dim {}",
                self.config.embed_dim
            )));
        }
        if n < self.config.num_special_tokens + 1 || n > self.config.num_tokens {
            return Err(Error::Validation(format!(
                "input token count {n} outside [{}, {}] allowed by the config",
                self.config.num_special_tokens + 1,
                self.config.num_tokens
            )));
        }
        if let Some(h) = hook {
            if h.layer_index() >= self.config.depth {
                return Err(Error::Validation(format!(
                    "hook layer {} out of range for depth {}",
                    h.layer_index(),
                    self.config.depth
                )));
            }
        }

        let mut logits = vec![0.0f32; b * self.config.num_classes];
        for s in 0..b {
            let sample = Tensor::new(
                vec![n, d],
                tokens.data()[s * n * d..(s + 1) * n * d].to_vec(),
            )?;
            let out = self.forward_sample(sample, hook)?;
            logits[s * self.config.num_classes..(s + 1) * self.config.num_classes]
                .copy_from_slice(out.data());
        }
        Tensor::new(vec![b, self.config.num_classes], logits)
    }

    fn forward_sample(&self, mut x: Tensor, hook: Option<&dyn TokenReducer>) -> Result<Tensor> {
        let d = self.config.embed_dim;
        let heads = self.config.num_heads;
        let c = self.config.head_dim();
        let special = self.config.num_special_tokens;
        // Applied to attention scores before softmax.
        let scale = 1.0 / (c as f32).sqrt();

        for (l, lw) in self.layers.iter().enumerate() {
            let n = x.shape()[0];
            let is_hook_layer = hook.map(|h| h.layer_index() == l).unwrap_or(false);

            let h = ops::layer_norm(&x, &lw.ln1_gamma, &lw.ln1_beta, ops::LAYER_NORM_EPS)?;
            let qkv = ops::linear(&h, &lw.qkv_w, &lw.qkv_b)?; // [n, 3d]

            let mut ctx = vec![0.0f32; n * d];
            // Captured only at the hook layer to keep other layers allocation-light.
            let mut attn_stack = if is_hook_layer {
                Vec::with_capacity(heads * n * n)
            } else {
                Vec::new()
            };
            let mut value_stack = if is_hook_layer {
                Vec::with_capacity(heads * n * c)
            } else {
                Vec::new()
            };

            for head in 0..heads {
                let qkv_data = qkv.data();
                let mut q = vec![0.0f32; n * c];
                let mut kt = vec![0.0f32; c * n]; // materialized transpose for the row kernel
                let mut v = vec![0.0f32; n * c];
                for t in 0..n {
                    let row = &qkv_data[t * 3 * d..(t + 1) * 3 * d];
                    let (qo, ko, vo) = (head * c, d + head * c, 2 * d + head * c);
                    q[t * c..(t + 1) * c].copy_from_slice(&row[qo..qo + c]);
                    v[t * c..(t + 1) * c].copy_from_slice(&row[vo..vo + c]);
                    for j in 0..c {
                        kt[j * n + t] = row[ko + j];
                    }
                }
                let q = Tensor::new(vec![n, c], q)?;
                let kt = Tensor::new(vec![c, n], kt)?;
                let mut scores = ops::matmul(&q, &kt)?; // [n, n]
                for val in scores.data_mut() {
                    *val *= scale;
                }
                let attn = ops::softmax(&scores, 1)?;
                let v = Tensor::new(vec![n, c], v)?;
                let ctx_h = ops::matmul(&attn, &v)?; // [n, c]
                for t in 0..n {
                    ctx[t * d + head * c..t * d + (head + 1) * c]
                        .copy_from_slice(&ctx_h.data()[t * c..(t + 1) * c]);
                }
                if is_hook_layer {
                    attn_stack.extend_from_slice(attn.data());
                    value_stack.extend_from_slice(v.data());
                }
            }

            let ctx = Tensor::new(vec![n, d], ctx)?;
            let attn_out = ops::linear(&ctx, &lw.proj_w, &lw.proj_b)?;
            for (xv, &av) in x.data_mut().iter_mut().zip(attn_out.data()) {
                *xv += av;
            }

            if is_hook_layer {
                let capture = AttentionCapture {
                    attn: Tensor::new(vec![heads, n, n], attn_stack)?,
                    values: Tensor::new(vec![heads, n, c], value_stack)?,
                    layer_index: l,
                };
                let special_rows = x.data()[..special * d].to_vec();
                let reduced = hook
                    .expect("hook present at hook layer")
                    .reduce(&capture, x)?;
                if reduced.rank() != 2 || reduced.shape()[1] != d {
                    return Err(Error::Validation(format!(
                        "hook returned shape {:?}, expected [tokens, {d}]",
                        reduced.shape()
                    )));
                }
                if reduced.shape()[0] < special + 1 {
                    return Err(Error::Validation(format!(
                        "hook reduced token count to {} but {} special tokens plus one \
                         informative token must remain",
                        reduced.shape()[0],
                        special
                    )));
                }
                if reduced.data()[..special * d] != special_rows[..] {
                    return Err(Error::Validation(
                        "hook modified or removed special-token rows".into(),
                    ));
                }
                x = reduced;
            }

            let h2 = ops::layer_norm(&x, &lw.ln2_gamma, &lw.ln2_beta, ops::LAYER_NORM_EPS)?;
            let m = ops::linear(&h2, &lw.fc1_w, &lw.fc1_b)?;
            let m = ops::gelu(&m);
            let m = ops::linear(&m, &lw.fc2_w, &lw.fc2_b)?;
            for (xv, &mv) in x.data_mut().iter_mut().zip(m.data()) {
                *xv += mv;
            }
        }

        let f = ops::layer_norm(&x, &self.final_gamma, &self.final_beta, ops::LAYER_NORM_EPS)?;
        let cls = Tensor::new(vec![1, self.config.embed_dim], f.row(0).to_vec())?;
        ops::linear(&cls, &self.head_w, &self.head_b)
    }
}

// ---- token inputs ---------------------------------------------------------------

/// Input source for [`embed_tokens`]: pre-embedded features or a seeded
/// synthetic generator (patch extraction from images is out of scope).
pub enum TokenInput<'a> {
    /// `[n, d]` (single sample) or `[b, n, d]`.
    Features(&'a Tensor),
    /// Uniform ±1 tokens, reproducible from the seed.
    Synthetic {
        seed: u64,
        batch: usize,
        tokens: usize,
    },
}

/// Produce a `[b, n, d]` token tensor validated against the config.
pub fn embed_tokens(input: TokenInput, config: &ViTConfig) -> Result<Tensor> {
    config.validate()?;
    let d = config.embed_dim;
    match input {
        TokenInput::Features(t) => {
            let (b, n, dim) = match t.shape() {
                [n, dim] => (1, *n, *dim),
                [b, n, dim] => (*b, *n, *dim),
                other => {
                    return Err(Error::Shape(format!(
                        "token features must be [n, d] or [b, n, d], got {other:?}"
                    )))
                }
            };
            if dim != d {
                return Err(Error::Shape(format!(
                    "token feature dim {dim} does not match embed_dim {d}"
                )));
            }
            check_token_count(n, config)?;
            Tensor::new(vec![b, n, d], t.data().to_vec())
        }
        TokenInput::Synthetic {
            seed,
            batch,
            tokens,
        } => {
            if batch == 0 {
                return Err(Error::Validation("synthetic batch must be positive".into()));
            }
            check_token_count(tokens, config)?;
            let mut data = Vec::with_capacity(batch * tokens * d);
            for s in 0..batch {
                let mut rng = SplitMix64::substream(seed, s as u64, 0);
                for _ in 0..tokens * d {
                    data.push(rng.next_symmetric(1.0));
                }
            }
            Tensor::new(vec![batch, tokens, d], data)
        }
    }
}

fn check_token_count(n: usize, config: &ViTConfig) -> Result<()> {
    if n < config.num_special_tokens + 1 || n > config.num_tokens {
        return Err(Error::Validation(format!(
            "token count {n} outside [{}, {}] allowed by the config",
            config.num_special_tokens + 1,
            config.num_tokens
        )));
    }
    Ok(())
}
