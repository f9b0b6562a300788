//! Named parameter storage and seeded initialization.
//!
//! All learnable state — every linear layer, layer norm, codebook, and
//! exchange MLP — lives in one ordered [`ParamStore`]. The creation order is
//! fixed by the configuration, which makes checkpoints, optimizer state, and
//! gradient vectors line up by index.

use super::config::{CoarseSource, ModelConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// An ordered, name-indexed collection of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name '{name}'")));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&self.tensors[i]),
            None => Err(Error::config(format!("unknown parameter '{name}'"))),
        }
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn set_at(&mut self, i: usize, tensor: Tensor) -> Result<()> {
        if tensor.shape() != self.tensors[i].shape() {
            return Err(Error::shape(format!(
                "parameter '{}' expects shape {:?}, got {:?}",
                self.names[i],
                self.tensors[i].shape(),
                tensor.shape()
            )));
        }
        self.tensors[i] = tensor;
        Ok(())
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let i = self
            .position(name)
            .ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))?;
        self.set_at(i, tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Replaces every tensor at once; shapes must match entry-wise.
    pub fn replace_all(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (i, t) in tensors.into_iter().enumerate() {
            self.set_at(i, t)?;
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Draws a weight matrix from U[-1/sqrt(fan_in), 1/sqrt(fan_in)].
fn weight(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data)
}

fn add_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.insert(&format!("{prefix}.w"), weight(rng, fan_in, fan_out)?)?;
    store.insert(&format!("{prefix}.b"), Tensor::zeros(vec![1, fan_out]))
}

fn add_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
    store.insert(&format!("{prefix}.g"), Tensor::new(vec![1, dim], vec![1.0; dim])?)?;
    store.insert(&format!("{prefix}.b"), Tensor::zeros(vec![1, dim]))
}

fn add_attention(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim: usize,
) -> Result<()> {
    for proj in ["q", "k", "v", "o"] {
        add_linear(store, rng, &format!("{prefix}.{proj}"), dim, dim)?;
    }
    Ok(())
}

fn add_qie_mlp(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, r: usize) -> Result<()> {
    add_linear(store, rng, &format!("{prefix}.l1"), r, 2 * r)?;
    add_linear(store, rng, &format!("{prefix}.l2"), 2 * r, 2 * r)?;
    add_linear(store, rng, &format!("{prefix}.l3"), 2 * r, r)
}

/// Builds every parameter of the configured model in a fixed order, seeded
/// from `config.seed`. Weights follow the U[±1/sqrt(fan_in)] law, biases are
/// zero, layer-norm gains are one, and codebooks use the U[±1/K] box.
pub fn init_params(config: &ModelConfig) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let r = config.code_dim;
    let c = config.model_dim;
    let k = config.codebook_size;
    let h = config.coarse_points;

    // Shallow feature extractor: per-point offsets through a two-layer MLP.
    add_linear(&mut store, &mut rng, "sf.l1", 3, r)?;
    add_linear(&mut store, &mut rng, "sf.l2", r, r)?;
    // Positional embedding of region centers.
    add_linear(&mut store, &mut rng, "posenc.l1", 3, c)?;
    add_linear(&mut store, &mut rng, "posenc.l2", c, c)?;
    // Shallow features into the transformer width.
    add_linear(&mut store, &mut rng, "in_proj", r, c)?;

    for i in 0..config.encoder_depth {
        let p = format!("enc.{i}");
        add_layer_norm(&mut store, &format!("{p}.ln1"), c)?;
        add_attention(&mut store, &mut rng, &format!("{p}.attn"), c)?;
        add_layer_norm(&mut store, &format!("{p}.ln2"), c)?;
        add_linear(&mut store, &mut rng, &format!("{p}.ffn.l1"), c, 2 * c)?;
        add_linear(&mut store, &mut rng, &format!("{p}.ffn.l2"), 2 * c, c)?;
    }

    // Coarse head over the pooled feature.
    let pooled_dim = match config.coarse_source {
        CoarseSource::EncoderOutput => c,
        CoarseSource::ShallowFeatures => r,
    };
    add_linear(&mut store, &mut rng, "coarse.l1", pooled_dim, 2 * c)?;
    add_linear(&mut store, &mut rng, "coarse.l2", 2 * c, 3 * h)?;

    // Query embedding of the coarse points.
    add_linear(&mut store, &mut rng, "queryenc.l1", 3, c)?;
    add_linear(&mut store, &mut rng, "queryenc.l2", c, c)?;

    for i in 0..config.decoder_depth {
        let p = format!("dec.{i}");
        add_layer_norm(&mut store, &format!("{p}.ln1"), c)?;
        add_attention(&mut store, &mut rng, &format!("{p}.self"), c)?;
        add_layer_norm(&mut store, &format!("{p}.ln2"), c)?;
        add_attention(&mut store, &mut rng, &format!("{p}.cross"), c)?;
        add_layer_norm(&mut store, &format!("{p}.ln3"), c)?;
        add_linear(&mut store, &mut rng, &format!("{p}.ffn.l1"), c, 2 * c)?;
        add_linear(&mut store, &mut rng, &format!("{p}.ffn.l2"), 2 * c, c)?;
    }

    // Deep features down to code width, then fuse with the consumed codes.
    add_linear(&mut store, &mut rng, "down_proj", c, r)?;
    add_linear(&mut store, &mut rng, "fuse", c + r, c)?;
    // Folding MLP over (grid uv, fused feature).
    add_linear(&mut store, &mut rng, "fold.l1", 2 + c, c)?;
    add_linear(&mut store, &mut rng, "fold.l2", c, 3)?;

    // Codebooks draw from the same stream with the U[±1/K] box.
    let codebook = |rng: &mut ChaCha8Rng| -> Result<Tensor> {
        let bound = 1.0 / k as f64;
        let data: Vec<f64> = (0..k * r).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::new(vec![k, r], data)
    };
    if config.shared_codebook {
        store.insert("codebook.shared", codebook(&mut rng)?)?;
    } else {
        if config.use_encoder_codebook {
            store.insert("codebook.encoder", codebook(&mut rng)?)?;
        }
        if config.use_decoder_codebook {
            store.insert("codebook.decoder", codebook(&mut rng)?)?;
        }
    }

    if config.use_qie {
        add_qie_mlp(&mut store, &mut rng, "qie.fwd", r)?;
        add_qie_mlp(&mut store, &mut rng, "qie.rev", r)?;
    }

    Ok(store)
}

/// Name of the codebook parameter used at the encoder site, if any.
pub fn encoder_codebook_name(config: &ModelConfig) -> Option<&'static str> {
    if !config.use_encoder_codebook {
        None
    } else if config.shared_codebook {
        Some("codebook.shared")
    } else {
        Some("codebook.encoder")
    }
}

/// Name of the codebook parameter used at the decoder site, if any.
pub fn decoder_codebook_name(config: &ModelConfig) -> Option<&'static str> {
    if !config.use_decoder_codebook {
        None
    } else if config.shared_codebook {
        Some("codebook.shared")
    } else {
        Some("codebook.decoder")
    }
}
