//! The acoustic model: a CNN feature encoder over raw waveforms, a stack of
//! pre-norm transformer blocks, and a linear CTC projection head.
//!
//! The model is deliberately small — it trains from scratch on the synthetic
//! corpus in seconds — but structurally faithful to the usual self-supervised
//! encoder layout: strided convolutions downsample the waveform into frames,
//! a projection lifts frames to the model width, sinusoidal positions are
//! added, and each transformer block computes
//! `x + Dropout(MHSA(LN(x)))` followed by `y + Dropout(FFN(LN(y)))`.
//!
//! Adapters hook in at named [`InsertionPoint`]s: the output of the CNN
//! encoder (before block 0) or the output of a specific transformer block
//! after its second residual connection.
//!
//! All trainable parameters live in an ordered, name-addressed
//! [`ParamRegistry`] so that optimizers, freeze policies, checkpoints, and
//! content digests can all speak about "the parameter named
//! `block.1.attn.wq`" without holding references into the model.

mod checkpoint;
mod encode;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use encode::{encode, encode_staged, stage, Encoded};

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::AdapterBank;
use crate::diffcore::{DiffArray, Tape, ValueId};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, gauss};

// ── configuration ────────────────────────────────────────────────────────

/// One strided convolution layer of the feature encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Where an adapter hooks into [`encode`].
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InsertionPoint {
    /// Output of the CNN feature encoder, before transformer block 0.
    AfterCnnEncoder,
    /// Output of transformer block `block_index`, after its second residual.
    InTransformerBlock { block_index: usize },
}

impl fmt::Display for InsertionPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InsertionPoint::AfterCnnEncoder => write!(f, "after_cnn_encoder"),
            InsertionPoint::InTransformerBlock { block_index } => {
                write!(f, "block_{block_index}_output")
            }
        }
    }
}

/// Hyperparameters of the acoustic model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Feature-encoder layers, applied in order to the `[T, 1]` waveform.
    pub conv_layers: Vec<ConvLayer>,
    /// Transformer width.
    pub d_model: usize,
    /// Number of transformer blocks.
    pub n_blocks: usize,
    /// Attention heads; must divide `d_model`.
    pub n_heads: usize,
    /// Feed-forward inner width.
    pub d_ff: usize,
    /// Output vocabulary size, including the blank token at index 0.
    pub vocab_size: usize,
    /// Dropout probability on both residual branches.
    pub dropout_p: f64,
    /// Layer-norm epsilon used throughout the model.
    pub ln_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            conv_layers: vec![
                ConvLayer { channels: 12, kernel: 64, stride: 16 },
                ConvLayer { channels: 16, kernel: 8, stride: 4 },
            ],
            d_model: 24,
            n_blocks: 2,
            n_heads: 4,
            d_ff: 48,
            vocab_size: 41,
            dropout_p: 0.1,
            ln_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_layers.is_empty() {
            return Err(Error::Config("at least one conv layer required".into()));
        }
        for (i, layer) in self.conv_layers.iter().enumerate() {
            if layer.channels == 0 || layer.kernel == 0 || layer.stride == 0 {
                return Err(Error::Config(format!(
                    "conv layer {i}: channels/kernel/stride must all be >= 1"
                )));
            }
        }
        if self.d_model == 0 || self.n_blocks == 0 || self.d_ff == 0 {
            return Err(Error::Config(
                "d_model, n_blocks and d_ff must be positive".into(),
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} must be positive and divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size {} must be >= 2 (blank plus at least one token)",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config(format!("ln_eps {} must be > 0", self.ln_eps)));
        }
        Ok(())
    }

    /// Number of encoder frames produced for a waveform of `n_samples`.
    ///
    /// Applies the `(t - kernel) / stride + 1` length rule per layer and
    /// fails with an input error if any layer would produce zero frames.
    pub fn frames_for(&self, n_samples: usize) -> Result<usize> {
        let mut t = n_samples;
        for (i, layer) in self.conv_layers.iter().enumerate() {
            if t < layer.kernel {
                return Err(Error::Input(format!(
                    "waveform too short: {t} samples reach conv layer {i} with kernel {}",
                    layer.kernel
                )));
            }
            t = (t - layer.kernel) / layer.stride + 1;
        }
        Ok(t)
    }

    /// Smallest waveform length that yields at least one encoder frame.
    pub fn min_samples(&self) -> usize {
        let mut t = 1;
        for layer in self.conv_layers.iter().rev() {
            t = (t - 1) * layer.stride + layer.kernel;
        }
        t
    }
}

// ── parameter registry ───────────────────────────────────────────────────

/// Ordered, name-addressed storage for trainable parameter arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry {
    names: Vec<String>,
    arrays: Vec<DiffArray>,
    index: HashMap<String, usize>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, array: DiffArray) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter name '{name}'")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.arrays.push(array);
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&DiffArray> {
        self.index.get(name).map(|&i| &self.arrays[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DiffArray> {
        self.index.get(name).map(|&i| &mut self.arrays[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DiffArray)> {
        self.names.iter().map(String::as_str).zip(self.arrays.iter())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Hex SHA-256 over `(name, shape, payload)` triples in iteration order.
///
/// Shared by model and adapter-bank digests so stage-isolation checks can
/// compare any parameter subset before and after a training phase.
pub(crate) fn digest_params<'a>(
    items: impl Iterator<Item = (&'a str, &'a DiffArray)>,
) -> String {
    let mut hasher = Sha256::new();
    for (name, array) in items {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update((array.shape().len() as u64).to_le_bytes());
        for &dim in array.shape() {
            hasher.update((dim as u64).to_le_bytes());
        }
        for &x in array.data() {
            hasher.update(x.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write;
        write!(out, "{byte:02x}").expect("writing hex to a String cannot fail");
    }
    out
}

// ── model ────────────────────────────────────────────────────────────────

/// Which parameters [`BackboneModel::named_parameters`] should report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamFilter {
    /// Backbone parameters only — excludes every adapter parameter.
    BackboneOnly,
    /// Backbone parameters plus all entries of the attached bank, if any.
    All,
}

/// The acoustic model: configuration plus its parameter registry.
#[derive(Debug, Clone)]
pub struct BackboneModel {
    config: BackboneConfig,
    params: ParamRegistry,
}

impl BackboneModel {
    /// Build a freshly initialized model. Projection weights are
    /// Xavier-uniform, conv kernels N(0, 0.02), biases zero, layer-norm
    /// gains one — all drawn from a ChaCha stream derived from `seed` so
    /// construction is bit-reproducible.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "backbone:init"));
        let mut params = ParamRegistry::new();

        let mut c_in = 1;
        for (i, layer) in config.conv_layers.iter().enumerate() {
            let kernel = normal(
                &mut rng,
                vec![layer.channels, layer.kernel, c_in],
                0.02,
            );
            params.insert(&format!("conv.{i}.kernel"), kernel)?;
            params.insert(
                &format!("conv.{i}.bias"),
                DiffArray::zeros(vec![layer.channels]),
            )?;
            c_in = layer.channels;
        }

        params.insert("feat_ln.gamma", ones(c_in))?;
        params.insert("feat_ln.beta", DiffArray::zeros(vec![c_in]))?;
        params.insert(
            "feat_proj.weight",
            xavier(&mut rng, config.d_model, c_in),
        )?;
        params.insert("feat_proj.bias", DiffArray::zeros(vec![config.d_model]))?;

        let d = config.d_model;
        for b in 0..config.n_blocks {
            params.insert(&format!("block.{b}.ln1.gamma"), ones(d))?;
            params.insert(&format!("block.{b}.ln1.beta"), DiffArray::zeros(vec![d]))?;
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(&format!("block.{b}.attn.{w}"), xavier(&mut rng, d, d))?;
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                params.insert(
                    &format!("block.{b}.attn.{bias}"),
                    DiffArray::zeros(vec![d]),
                )?;
            }
            params.insert(&format!("block.{b}.ln2.gamma"), ones(d))?;
            params.insert(&format!("block.{b}.ln2.beta"), DiffArray::zeros(vec![d]))?;
            params.insert(
                &format!("block.{b}.ffn.w1"),
                xavier(&mut rng, config.d_ff, d),
            )?;
            params.insert(
                &format!("block.{b}.ffn.b1"),
                DiffArray::zeros(vec![config.d_ff]),
            )?;
            params.insert(
                &format!("block.{b}.ffn.w2"),
                xavier(&mut rng, d, config.d_ff),
            )?;
            params.insert(&format!("block.{b}.ffn.b2"), DiffArray::zeros(vec![d]))?;
        }

        params.insert("final_ln.gamma", ones(d))?;
        params.insert("final_ln.beta", DiffArray::zeros(vec![d]))?;
        params.insert(
            "ctc_head.weight",
            xavier(&mut rng, config.vocab_size, d),
        )?;
        params.insert(
            "ctc_head.bias",
            DiffArray::zeros(vec![config.vocab_size]),
        )?;

        Ok(Self { config, params })
    }

    /// Reassemble a model from checkpointed parts, validating that the
    /// parameter names and shapes are exactly those the config implies.
    pub(crate) fn from_parts(
        config: BackboneConfig,
        names: Vec<String>,
        arrays: Vec<DiffArray>,
    ) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        if names.len() != reference.params.len() {
            return Err(Error::Usage(format!(
                "parameter list has {} entries, config implies {}",
                names.len(),
                reference.params.len()
            )));
        }
        let mut params = ParamRegistry::new();
        for (i, (name, array)) in names.into_iter().zip(arrays).enumerate() {
            let expected = &reference.params.names()[i];
            if &name != expected {
                return Err(Error::Usage(format!(
                    "parameter {i} named '{name}', config implies '{expected}'"
                )));
            }
            let want = reference
                .params
                .get(&name)
                .expect("reference registry contains its own names")
                .shape();
            if array.shape() != want {
                return Err(Error::Usage(format!(
                    "parameter '{name}' has shape {:?}, config implies {want:?}",
                    array.shape()
                )));
            }
            params.insert(&name, array)?;
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamRegistry {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamRegistry {
        &mut self.params
    }

    /// Total number of trainable scalars in the backbone.
    pub fn n_params(&self) -> usize {
        self.params.iter().map(|(_, a)| a.numel()).sum()
    }

    /// Content digest over every backbone parameter, in registry order.
    pub fn digest(&self) -> String {
        digest_params(self.params.iter())
    }

    /// Deterministically ordered parameter names: registry order for the
    /// backbone, then the bank's entries (if provided and `filter` is
    /// [`ParamFilter::All`]) under their `adapter.`-prefixed names.
    pub fn named_parameters(
        &self,
        filter: ParamFilter,
        bank: Option<&AdapterBank>,
    ) -> Vec<String> {
        let mut names: Vec<String> = self
            .params
            .names()
            .iter()
            .filter(|n| !n.contains("adapter"))
            .cloned()
            .collect();
        if filter == ParamFilter::All {
            if let Some(bank) = bank {
                names.extend(bank.named_parameters());
            }
        }
        names
    }
}

fn ones(n: usize) -> DiffArray {
    DiffArray::vector(vec![1.0; n])
}

fn normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> DiffArray {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * gauss(rng)).collect();
    DiffArray::new(shape, data).expect("shape/data lengths agree by construction")
}

/// Xavier-uniform `[rows, cols]` matrix: U(−a, a) with a = √(6/(in+out)).
fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DiffArray {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    DiffArray::new(vec![rows, cols], data).expect("shape/data lengths agree")
}

// ── staged parameters ────────────────────────────────────────────────────

/// Tape handles for one staged copy of the parameters, addressable by the
/// same hierarchical names as the registry. Produced by [`stage`]; after
/// `Tape::backward`, gradients are read back through these ids.
#[derive(Debug, Clone, Default)]
pub struct StagedParams {
    names: Vec<String>,
    ids: Vec<ValueId>,
    index: HashMap<String, usize>,
}

impl StagedParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, id: ValueId) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Usage(format!("parameter '{name}' staged twice")));
        }
        self.index.insert(name.to_string(), self.ids.len());
        self.names.push(name.to_string());
        self.ids.push(id);
        Ok(())
    }

    pub fn id(&self, name: &str) -> Result<ValueId> {
        self.index
            .get(name)
            .map(|&i| self.ids[i])
            .ok_or_else(|| Error::Usage(format!("no staged parameter named '{name}'")))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ValueId)> + '_ {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.ids.iter().copied())
    }

    /// Stage every registry array as a trainable tape leaf.
    pub fn stage_registry(&mut self, tape: &mut Tape, params: &ParamRegistry) -> Result<()> {
        for (name, array) in params.iter() {
            let id = tape.leaf(array.clone());
            self.push(name, id)?;
        }
        Ok(())
    }
}
