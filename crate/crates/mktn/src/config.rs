//! Model configuration: dimensions, schedule constants, loss weights and
//! ablation switches. Mirrored one-to-one by the JSON config file the CLI
//! accepts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// `phi_final - (phi_final - phi_initial) * (cos(r*pi) + 1) / 2`:
    /// monotone, hits both endpoints exactly.
    HalfCosine,
    /// `phi_final - (phi_final - phi_initial) * cos(r*pi + 1)` taken
    /// verbatim; neither monotone nor endpoint-exact.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaMode {
    /// The printed balance formula has identical numerator and denominator,
    /// which forces theta = 0.5.
    FixedHalf,
    /// Asymmetric reading: theta/(1-theta) = m_w^2 / m_v^2 on the triplet
    /// margins, clamped to (0.05, 0.95).
    MarginRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityQueryMode {
    /// A fixed number of learnable activity queries (count independent of
    /// batch composition).
    Learnable,
    /// Use the batch's sentence vectors as the activity queries.
    BatchSentences,
}

/// Per-module toggles. Disabling a module removes its loss contribution
/// (and any computation nothing else consumes).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Ablations {
    #[serde(default = "default_true")]
    pub csm: bool,
    #[serde(default = "default_true")]
    pub opm: bool,
    #[serde(default = "default_true")]
    pub apa: bool,
    #[serde(default = "default_true")]
    pub avm: bool,
}

fn default_true() -> bool {
    true
}

impl Default for Ablations {
    fn default() -> Self {
        Ablations { csm: true, opm: true, apa: true, avm: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature dimension d. Must be even (the recurrent composer splits it)
    /// and divisible by `attention_heads`.
    pub feature_dim: usize,
    /// Patches per frame C (the stored grid has C+1 slots, slot 0 global).
    pub patches_per_frame: usize,
    /// Frames per video N_v. Sizes the learnable frame queries, and is the
    /// frame count synthetic corpora are generated with.
    pub frames_per_video: usize,
    /// Words per query N_q used by the synthetic generator.
    pub words_per_query: usize,
    /// Object-level appearance prototypes per frame N_a.
    pub appearance_prototypes: usize,
    /// Phrase prototypes per query N_p.
    pub phrase_prototypes: usize,
    /// Activity prototypes K_e (learnable-query mode).
    pub activity_prototypes: usize,
    pub attention_heads: usize,
    /// Depth of the frame self-attention stack in the video encoder.
    pub encoder_depth: usize,
    /// Negative-selection threshold at the start of training.
    pub threshold_initial: f64,
    /// Negative-selection threshold at the end of training.
    pub threshold_final: f64,
    pub schedule_mode: ScheduleMode,
    /// RINCE temperature, in (0, 1].
    pub rince_tau: f64,
    /// RINCE density weight, in (0, 1].
    pub rince_alpha: f64,
    /// When set, tau and alpha become learnable (sigmoid-squashed into
    /// (0, 1)) instead of fixed constants.
    pub rince_learnable: bool,
    /// Weight of the alignment loss L1 (lambda).
    pub weight_alignment: f64,
    /// Weight of the span loss L2 (gamma).
    pub weight_span: f64,
    /// Weight of the float loss L3 (mu).
    pub weight_float: f64,
    /// Weight of the auxiliary cross-sentence regression loss.
    pub weight_csm: f64,
    /// Hinge margin of the contrastive loss. Defaults to the dynamic
    /// threshold itself when unset.
    pub contrast_margin: Option<f64>,
    pub theta_mode: ThetaMode,
    pub activity_query_mode: ActivityQueryMode,
    pub ablations: Ablations,
    pub learning_rate: f64,
    /// Distinct videos per training batch; all their queries ride along.
    pub batch_videos: usize,
    /// Planted-latent weight in synthetic corpora.
    pub signal_weight: f64,
    /// I.i.d. noise weight in synthetic corpora.
    pub noise_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            patches_per_frame: 2,
            frames_per_video: 16,
            words_per_query: 6,
            appearance_prototypes: 3,
            phrase_prototypes: 2,
            activity_prototypes: 4,
            attention_heads: 4,
            encoder_depth: 1,
            threshold_initial: 0.1,
            threshold_final: 0.5,
            schedule_mode: ScheduleMode::HalfCosine,
            rince_tau: 0.5,
            rince_alpha: 0.5,
            rince_learnable: false,
            weight_alignment: 1.0,
            weight_span: 1.0,
            weight_float: 1.0,
            weight_csm: 0.5,
            contrast_margin: None,
            theta_mode: ThetaMode::FixedHalf,
            activity_query_mode: ActivityQueryMode::Learnable,
            ablations: Ablations::default(),
            learning_rate: 1e-3,
            batch_videos: 4,
            signal_weight: 1.0,
            noise_weight: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.feature_dim < 2 || self.feature_dim % 2 != 0 {
            return bad(format!("feature_dim must be even and >= 2, got {}", self.feature_dim));
        }
        if self.attention_heads == 0 || self.feature_dim % self.attention_heads != 0 {
            return bad(format!(
                "attention_heads ({}) must divide feature_dim ({})",
                self.attention_heads, self.feature_dim
            ));
        }
        for (name, v) in [
            ("patches_per_frame", self.patches_per_frame),
            ("frames_per_video", self.frames_per_video),
            ("words_per_query", self.words_per_query),
            ("appearance_prototypes", self.appearance_prototypes),
            ("phrase_prototypes", self.phrase_prototypes),
            ("activity_prototypes", self.activity_prototypes),
            ("encoder_depth", self.encoder_depth),
            ("batch_videos", self.batch_videos),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if !(self.threshold_final > self.threshold_initial) {
            return bad(format!(
                "threshold_final ({}) must exceed threshold_initial ({})",
                self.threshold_final, self.threshold_initial
            ));
        }
        for (name, v) in [("rince_tau", self.rince_tau), ("rince_alpha", self.rince_alpha)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {v}"));
            }
        }
        for (name, v) in [
            ("weight_alignment", self.weight_alignment),
            ("weight_span", self.weight_span),
            ("weight_float", self.weight_float),
            ("weight_csm", self.weight_csm),
            ("learning_rate", self.learning_rate),
            ("signal_weight", self.signal_weight),
            ("noise_weight", self.noise_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite nonnegative float, got {v}"));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Per-head dimension of the multi-head attention blocks.
    pub fn head_dim(&self) -> usize {
        self.feature_dim / self.attention_heads
    }
}
