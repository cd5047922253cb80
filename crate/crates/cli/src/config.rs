//! Experiment configuration: one JSON file with a schema version. Unknown keys
//! are rejected. Defaults are desk scale; the published values are noted next
//! to each field.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use accomp_core::bridge::BridgeConfig;
use accomp_core::consistency::ConsistencySchedule;
use accomp_core::dit::DitConfig;
use accomp_core::edm::EdmParams;
use accomp_core::metrics::ProtocolConfig;
use accomp_core::optim::TrainSchedule;
use accomp_core::synth::{GapSpaceConfig, TrackConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    DitDiffusion,
    CDit,
    /// Diffusion DiT whose style embedding comes from the gap bridge.
    Bridge,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::DitDiffusion, Variant::CDit, Variant::Bridge];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DitDiffusion => "dit-diffusion",
            Variant::CDit => "c-dit",
            Variant::Bridge => "bridge",
        }
    }

    pub fn supports(self, c: Conditioning) -> bool {
        match self {
            Variant::Bridge => c.style().is_some(),
            _ => true,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown variant {s:?} (expected dit-diffusion, c-dit or bridge)")))
    }
}

/// Where a style embedding comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StyleSource {
    /// Audio-side embedding of another window of the target.
    Audio,
    /// Text-side embedding of the target's tags.
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Conditioning {
    #[serde(rename = "style+ctx")]
    StyleCtx,
    #[serde(rename = "text-style+ctx")]
    TextStyleCtx,
    #[serde(rename = "ctx")]
    Ctx,
    #[serde(rename = "style")]
    Style,
    #[serde(rename = "text-style")]
    TextStyle,
    #[serde(rename = "uncond")]
    Uncond,
}

impl Conditioning {
    pub const ALL: [Conditioning; 6] = [
        Conditioning::StyleCtx,
        Conditioning::TextStyleCtx,
        Conditioning::Ctx,
        Conditioning::Style,
        Conditioning::TextStyle,
        Conditioning::Uncond,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Conditioning::StyleCtx => "style+ctx",
            Conditioning::TextStyleCtx => "text-style+ctx",
            Conditioning::Ctx => "ctx",
            Conditioning::Style => "style",
            Conditioning::TextStyle => "text-style",
            Conditioning::Uncond => "uncond",
        }
    }

    pub fn uses_context(self) -> bool {
        matches!(self, Conditioning::StyleCtx | Conditioning::TextStyleCtx | Conditioning::Ctx)
    }

    pub fn style(self) -> Option<StyleSource> {
        match self {
            Conditioning::StyleCtx | Conditioning::Style => Some(StyleSource::Audio),
            Conditioning::TextStyleCtx | Conditioning::TextStyle => Some(StyleSource::Text),
            Conditioning::Ctx | Conditioning::Uncond => None,
        }
    }
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Conditioning {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Conditioning::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown conditioning {s:?}")))
    }
}

/// Synthetic data generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub tracks: TrackConfig,
    pub gap: GapSpaceConfig,
    pub train_sets: usize,
    /// Held-out track sets used for reference and candidate conditioning.
    pub eval_sets: usize,
    pub max_stems: usize,
    /// Frames per training window.
    pub window: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tracks: TrackConfig::default(),
            gap: GapSpaceConfig::default(),
            train_sets: 2048,
            eval_sets: 512,
            max_stems: 6,
            window: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Paper: 1_000_000.
    pub steps: usize,
    /// Paper: 128.
    pub diffusion_batch: usize,
    /// Paper: 16.
    pub consistency_batch: usize,
    /// Paper: 1e-4.
    pub base_lr: f64,
    /// Paper: 1000.
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub gap_max: f64,
    pub gap_min: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            diffusion_batch: 64,
            consistency_batch: 32,
            base_lr: 1e-3,
            warmup_steps: 250,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            clip_norm: None,
            gap_max: 2.0,
            gap_min: 1e-4,
            checkpoint_every: 1000,
        }
    }
}

impl TrainingConfig {
    pub fn schedule(&self, steps: usize) -> TrainSchedule {
        TrainSchedule {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps.min(steps.saturating_sub(1)).max(1),
            total_steps: steps,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            eps: 1e-8,
            clip_norm: self.clip_norm,
        }
    }

    pub fn consistency(&self, steps: usize) -> ConsistencySchedule {
        ConsistencySchedule { gap_max: self.gap_max, gap_min: self.gap_min, total_steps: steps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeSection {
    /// Paper: 1024 hidden units, 8 blocks, 512-d embeddings.
    pub model: BridgeConfig,
    pub steps: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub sample_steps: usize,
    pub guidance: f64,
}

impl Default for BridgeSection {
    fn default() -> Self {
        Self { model: BridgeConfig::desk(), steps: 2000, batch: 64, base_lr: 1e-3, warmup_steps: 100, sample_steps: 50, guidance: 1.25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub diffusion_steps: usize,
    /// Paper: 5.
    pub consistency_steps: usize,
    /// Classifier-free guidance weight for the diffusion sampler.
    pub guidance: f64,
    pub count: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { diffusion_steps: 50, consistency_steps: 5, guidance: 1.25, count: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Paper: 5.
    pub batches: usize,
    /// Paper: 1000.
    pub batch_size: usize,
    /// Paper: 5000.
    pub reference_size: usize,
    pub k: usize,
    pub variants: Vec<Variant>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { batches: 5, batch_size: 200, reference_size: 1000, k: 5, variants: Variant::ALL.to_vec() }
    }
}

impl EvalConfig {
    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig { batches: self.batches, batch_size: self.batch_size, k: self.k }
    }
}

fn default_dit() -> DitConfig {
    DitConfig::desk()
}

fn default_conditioning() -> Vec<Conditioning> {
    Conditioning::ALL.to_vec()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model_variant: Variant,
    #[serde(default = "default_conditioning")]
    pub conditioning: Vec<Conditioning>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    /// Paper: `DitConfig::paper_reference()`.
    #[serde(default = "default_dit")]
    pub dit: DitConfig,
    #[serde(default)]
    pub edm: EdmParams,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub bridge: BridgeSection,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
}

impl ExperimentConfig {
    pub fn desk(variant: Variant) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model_variant: variant,
            conditioning: default_conditioning(),
            seeds: default_seeds(),
            output_dir: default_output(),
            data: DataConfig::default(),
            dit: default_dit(),
            edm: EdmParams::default(),
            training: TrainingConfig::default(),
            bridge: BridgeSection::default(),
            sampling: SamplingConfig::default(),
            evaluation: EvalConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.schema_version != SCHEMA_VERSION {
            return usage(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.seeds.is_empty() {
            return usage("seeds must not be empty".into());
        }
        let d = &self.data;
        if d.max_stems < 2 || d.train_sets == 0 || d.eval_sets == 0 {
            return usage("data needs max_stems >= 2 and non-empty train/eval splits".into());
        }
        if d.window == 0 || d.window > d.tracks.length || d.window > self.dit.max_len {
            return usage(format!("window {} must fit the stem length and the DiT max_len", d.window));
        }
        if self.dit.latent_channels != d.tracks.latent_channels || self.dit.context_channels != d.tracks.latent_channels {
            return usage("DiT latent/context channels must match the track channels".into());
        }
        if self.dit.style_embed_dim != d.gap.embed_dim || self.bridge.model.embed_dim != d.gap.embed_dim {
            return usage("style and bridge embedding sizes must match the gap-space embed_dim".into());
        }
        if self.sampling.diffusion_steps == 0 || self.sampling.consistency_steps == 0 || self.bridge.sample_steps == 0 {
            return usage("sampler step counts must be positive".into());
        }
        if self.training.diffusion_batch == 0 || self.training.consistency_batch == 0 || self.bridge.batch == 0 {
            return usage("batch sizes must be positive".into());
        }
        if self.training.checkpoint_every == 0 {
            return usage("checkpoint_every must be positive".into());
        }
        let e = &self.evaluation;
        if e.batches == 0 || e.batch_size <= e.k || e.reference_size <= e.k {
            return usage("evaluation needs batches > 0 and batch/reference sizes above k".into());
        }
        if e.batch_size <= d.gap.embed_dim || e.reference_size <= d.gap.embed_dim {
            return usage(format!("evaluation batch and reference sizes must exceed embed_dim {} for a full-rank FD", d.gap.embed_dim));
        }
        self.dit.validate()?;
        self.edm.validate()?;
        self.bridge.model.validate()?;
        d.tracks.validate()?;
        Ok(())
    }

    /// The seed used by single-seed commands.
    pub fn seed(&self) -> u64 {
        self.seeds[0]
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON of everything except
    /// `output_dir`.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
        }
        hash_json(&v)
    }

    /// Hash of the data generator settings alone.
    pub fn data_hash(&self) -> String {
        hash_json(&serde_json::to_value(&self.data).expect("config serializes"))
    }
}

fn hash_json(v: &serde_json::Value) -> String {
    // serde_json's map is ordered by key, so this text is canonical
    let text = serde_json::to_string(v).expect("value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}
