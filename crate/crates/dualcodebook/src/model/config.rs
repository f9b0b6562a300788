//! Model and training configuration, including the ablation presets.

use crate::error::{Error, Result};
use std::fmt;
use std::str::FromStr;

/// Where the coarse predictor takes its pooled feature from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoarseSource {
    /// Pool the transformer encoder output (default).
    EncoderOutput,
    /// Pool the shallow per-region features directly.
    ShallowFeatures,
}

/// Weights of the loss components in the training objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Chamfer term between the dense completion and the ground truth.
    pub complete: f64,
    /// Chamfer term between the coarse prediction and the ground truth.
    pub coarse: f64,
    /// Exchange loss (internal spread + external alignment).
    pub codebook: f64,
    /// VQ codebook terms (move codes toward features).
    pub vq: f64,
    /// VQ commitment terms (move features toward codes).
    pub commitment: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            complete: 1.0,
            coarse: 1.0,
            codebook: 1.0,
            vq: 1.0,
            commitment: crate::codebook::COMMITMENT_WEIGHT,
        }
    }
}

/// Everything needed to build and train one model. Serialized as JSON with
/// unknown keys rejected; omitted keys fall back to the desk-scale defaults.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of regions sampled by farthest point sampling (M).
    pub regions: usize,
    /// Points per region gathered by nearest-neighbor grouping (k).
    pub region_size: usize,
    /// Width of shallow features and code vectors (R).
    pub code_dim: usize,
    /// Transformer width (C).
    pub model_dim: usize,
    /// Codes per codebook (K).
    pub codebook_size: usize,
    /// Coarse points predicted before folding (H).
    pub coarse_points: usize,
    /// Folding grid side (g); the completion has `coarse_points * g^2` points.
    pub fold_grid: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub use_encoder_codebook: bool,
    pub use_decoder_codebook: bool,
    pub use_qie: bool,
    /// One codebook object serving both quantization sites.
    pub shared_codebook: bool,
    /// Sum the reverse exchange direction's loss pair into the codebook loss.
    pub qie_reverse_loss: bool,
    pub coarse_source: CoarseSource,
    pub loss_weights: LossWeights,
    // Training knobs.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// The desk-scale toy configuration.
    fn default() -> Self {
        ModelConfig {
            regions: 16,
            region_size: 32,
            code_dim: 64,
            model_dim: 128,
            codebook_size: 64,
            coarse_points: 64,
            fold_grid: 2,
            encoder_depth: 2,
            decoder_depth: 2,
            heads: 4,
            use_encoder_codebook: true,
            use_decoder_codebook: true,
            use_qie: true,
            shared_codebook: false,
            qie_reverse_loss: true,
            coarse_source: CoarseSource::EncoderOutput,
            loss_weights: LossWeights::default(),
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            seed: 7,
        }
    }
}

impl ModelConfig {
    /// Dense completion size: `coarse_points * fold_grid^2`.
    pub fn complete_points(&self) -> usize {
        self.coarse_points * self.fold_grid * self.fold_grid
    }

    /// Smallest partial cloud the pipeline accepts.
    pub fn min_partial_points(&self) -> usize {
        self.regions.max(self.region_size)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("regions", self.regions),
            ("region_size", self.region_size),
            ("code_dim", self.code_dim),
            ("model_dim", self.model_dim),
            ("codebook_size", self.codebook_size),
            ("coarse_points", self.coarse_points),
            ("fold_grid", self.fold_grid),
            ("heads", self.heads),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "heads ({}) must divide model_dim ({})",
                self.heads, self.model_dim
            )));
        }
        if self.use_qie && !(self.use_encoder_codebook && self.use_decoder_codebook) {
            return Err(Error::config(
                "use_qie requires both use_encoder_codebook and use_decoder_codebook".to_string(),
            ));
        }
        if self.shared_codebook && !(self.use_encoder_codebook && self.use_decoder_codebook) {
            return Err(Error::config(
                "shared_codebook requires both quantization sites to be active".to_string(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {beta}")));
            }
        }
        let w = &self.loss_weights;
        for (name, value) in [
            ("complete", w.complete),
            ("coarse", w.coarse),
            ("codebook", w.codebook),
            ("vq", w.vq),
            ("commitment", w.commitment),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::config(format!(
                    "loss weight '{name}' must be finite and non-negative, got {value}"
                )));
            }
        }
        Ok(())
    }

    /// Parses a config JSON document; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// A deliberately tiny configuration for fast unit tests.
    pub fn tiny() -> Self {
        ModelConfig {
            regions: 4,
            region_size: 8,
            code_dim: 8,
            model_dim: 16,
            codebook_size: 8,
            coarse_points: 8,
            fold_grid: 2,
            encoder_depth: 1,
            decoder_depth: 1,
            heads: 2,
            epochs: 2,
            batch_size: 2,
            ..ModelConfig::default()
        }
    }

    /// SHA-256 fingerprint of the canonical JSON form, truncated for display.
    pub fn fingerprint(&self) -> String {
        use sha2::Digest;
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = sha2::Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// The six ablation variants: every combination of the two codebooks, the
/// exchange, and codebook sharing that the evaluation sweep covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AblationConfig {
    /// No codebooks: features flow directly; no quantization losses.
    A,
    /// Encoder codebook only.
    B,
    /// Decoder codebook only.
    C,
    /// Both codebooks, no exchange.
    D,
    /// Both codebooks plus the exchange (the full model).
    E,
    /// Both quantization sites share a single codebook; no exchange.
    F,
}

impl AblationConfig {
    pub const ALL: [AblationConfig; 6] = [
        AblationConfig::A,
        AblationConfig::B,
        AblationConfig::C,
        AblationConfig::D,
        AblationConfig::E,
        AblationConfig::F,
    ];

    /// Applies the variant's toggles to a base configuration.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let (enc, dec, qie, shared) = match self {
            AblationConfig::A => (false, false, false, false),
            AblationConfig::B => (true, false, false, false),
            AblationConfig::C => (false, true, false, false),
            AblationConfig::D => (true, true, false, false),
            AblationConfig::E => (true, true, true, false),
            AblationConfig::F => (true, true, false, true),
        };
        ModelConfig {
            use_encoder_codebook: enc,
            use_decoder_codebook: dec,
            use_qie: qie,
            shared_codebook: shared,
            ..base.clone()
        }
    }

    pub fn description(&self) -> &'static str {
        match self {
            AblationConfig::A => "no codebooks",
            AblationConfig::B => "encoder codebook only",
            AblationConfig::C => "decoder codebook only",
            AblationConfig::D => "both codebooks",
            AblationConfig::E => "both codebooks + exchange",
            AblationConfig::F => "shared codebook",
        }
    }

    /// Published full-scale CD-l1 (x 10^3) for orientation in ablation
    /// reports. Desk-scale runs are not comparable to these numbers and no
    /// ordering is asserted against them.
    pub fn reference_cd_l1(&self) -> f64 {
        match self {
            AblationConfig::A => 6.53,
            AblationConfig::B => 6.48,
            AblationConfig::C => 6.52,
            AblationConfig::D => 6.47,
            AblationConfig::E => 6.46,
            AblationConfig::F => 6.685,
        }
    }
}

impl fmt::Display for AblationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for AblationConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(AblationConfig::A),
            "B" | "b" => Ok(AblationConfig::B),
            "C" | "c" => Ok(AblationConfig::C),
            "D" | "d" => Ok(AblationConfig::D),
            "E" | "e" => Ok(AblationConfig::E),
            "F" | "f" => Ok(AblationConfig::F),
            other => Err(Error::config(format!("unknown ablation variant '{other}'"))),
        }
    }
}
