//! Artifact layout and the gen-data, train and sample commands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use accomp_core::bridge::{bridge_sample, Bridge, TextCond};
use accomp_core::checkpoint::{self, meta_value, restore_store, Entry};
use accomp_core::consistency::{multistep_sample, ConsistencyModel};
use accomp_core::dit::Dit;
use accomp_core::edm::{ode_sample, EdmDenoiser};
use accomp_core::embedding::{Emb1, EmbeddingSet, Modality, Source};
use accomp_core::synth::tag_seed;
use accomp_core::train::{train_consistency, train_diffusion, Trainer};
use accomp_core::{Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Conditioning, ExperimentConfig, Variant};
use crate::data::{audio_set, bridge_cond, cond_batch, stack_rows, text_set, training_batch, Dataset, Example};
use crate::error::{CliError, CliResult};

/// Where every artifact of a run lives.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
    pub seed: u64,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>, seed: u64) -> Self {
        Self { root: root.into(), seed }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.root.join(format!("seed-{}", self.seed))
    }

    /// Network checkpoint; the bridge variant stores the bridge network here.
    pub fn checkpoint(&self, variant: Variant) -> PathBuf {
        self.run_dir().join(format!("{variant}.lcl"))
    }

    pub fn loss_log(&self, variant: Variant) -> PathBuf {
        self.run_dir().join(format!("{variant}-loss.csv"))
    }

    pub fn samples(&self, variant: Variant, cond: Conditioning) -> PathBuf {
        self.run_dir().join(format!("samples-{variant}-{cond}.emb"))
    }

    pub fn latents(&self, variant: Variant, cond: Conditioning) -> PathBuf {
        self.run_dir().join(format!("latents-{variant}-{cond}.emb"))
    }

    pub fn report_csv(&self) -> PathBuf {
        self.run_dir().join("report.csv")
    }

    pub fn report_table(&self) -> PathBuf {
        self.run_dir().join("report.txt")
    }
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn save_emb(path: &Path, emb: &Emb1) -> CliResult<()> {
    let mut buf = Vec::new();
    emb.write(&mut buf)?;
    write_file(path, &buf)
}

/// Sidecar written next to every EMB1 file: EMB1 has no metadata slot, so the
/// config hash and the payload digest travel here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub config_hash: String,
    pub data_hash: String,
    pub kind: String,
    pub seed: u64,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditioning: Option<Conditioning>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calls_per_sample: Option<usize>,
    /// File name to SHA-256 of its bytes.
    pub files: Vec<(String, String)>,
}

impl ArtifactManifest {
    fn new(cfg: &ExperimentConfig, kind: &str, seed: u64, count: usize) -> Self {
        Self {
            config_hash: cfg.config_hash(),
            data_hash: cfg.data_hash(),
            kind: kind.into(),
            seed,
            count,
            variant: None,
            conditioning: None,
            steps: None,
            calls_per_sample: None,
            files: Vec::new(),
        }
    }

    fn add(&mut self, path: &Path) -> CliResult<()> {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.files.push((name, sha256_file(path)?));
        Ok(())
    }

    fn save(&self, path: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_file(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Dataset manifest plus reference embeddings for the held-out split.
pub fn gen_data(cfg: &ExperimentConfig, layout: &Layout) -> CliResult<ArtifactManifest> {
    let data = Dataset::generate(&cfg.data)?;
    let dir = layout.data_dir();
    let n = cfg.evaluation.reference_size;
    let examples = data.eval_examples("reference", n)?;
    let reference = audio_set(examples.iter().map(|e| e.target_audio.clone()).collect(), Source::Real)?;
    let prompts = text_set(examples.iter().map(|e| e.text.clone()).collect())?;
    let ref_path = dir.join("reference.emb");
    let prompt_path = dir.join("prompts.emb");
    save_emb(&ref_path, &Emb1::from_set(&reference))?;
    save_emb(&prompt_path, &Emb1::from_set(&prompts))?;
    let stems: usize = data.train.iter().chain(&data.eval).map(|s| s.stems.len()).sum();
    let mut m = ArtifactManifest::new(cfg, "dataset", cfg.data.seed, stems);
    m.add(&ref_path)?;
    m.add(&prompt_path)?;
    m.save(&dir.join("manifest.json"))?;
    log::info!("generated {} train and {} eval track sets ({stems} stems)", data.train.len(), data.eval.len());
    Ok(m)
}

fn run_meta(cfg: &ExperimentConfig, variant: Variant, seed: u64) -> Vec<Entry> {
    vec![
        Entry::meta("config_hash", &cfg.config_hash()),
        Entry::meta("data_hash", &cfg.data_hash()),
        Entry::meta("variant", variant.name()),
        Entry::meta("seed", &seed.to_string()),
    ]
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub losses: Vec<f64>,
}

struct LossLog {
    path: PathBuf,
    text: String,
}

impl LossLog {
    fn new(path: PathBuf, cfg: &ExperimentConfig, extra: &str) -> Self {
        Self { path, text: format!("# config_hash={}\nstep,loss{extra}\n", cfg.config_hash()) }
    }

    fn flush(&self) -> CliResult<()> {
        write_file(&self.path, self.text.as_bytes())
    }
}

fn divergence(e: accomp_core::Error, last: &Option<PathBuf>) -> CliError {
    if e.is_numerical() {
        let at = last.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        CliError::Numerical { message: format!("training failed: {e}; last checkpoint: {at}") }
    } else {
        e.into()
    }
}

/// Trains the DiT for `variant` (or the bridge), checkpointing every
/// `checkpoint_every` steps.
pub fn train(cfg: &ExperimentConfig, layout: &Layout, variant: Variant, steps: usize) -> CliResult<TrainSummary> {
    if variant == Variant::Bridge {
        return train_bridge(cfg, layout, steps);
    }
    if steps < 2 {
        return Err(CliError::Usage("training needs at least 2 steps".into()));
    }
    let data = Dataset::generate(&cfg.data)?;
    let seed = layout.seed;
    let mut net = Dit::<f32>::new(cfg.dit.clone(), seed)?;
    let mut trainer = Trainer::new(&net, cfg.training.schedule(steps))?;
    let mut rng = ChaCha8Rng::seed_from_u64(tag_seed(&format!("train:{variant}:{seed}")));
    let ckpt = layout.checkpoint(variant);
    let consistency = variant == Variant::CDit;
    let batch = if consistency { cfg.training.consistency_batch } else { cfg.training.diffusion_batch };
    let cschedule = cfg.training.consistency(steps);
    let mut log = LossLog::new(layout.loss_log(variant), cfg, if consistency { ",gap" } else { "" });
    let mut losses = Vec::with_capacity(steps);
    let mut last: Option<PathBuf> = None;
    let draw = |r: &mut ChaCha8Rng| {
        let ex = data.train_examples(batch, r)?;
        let (clean, mut cond) = training_batch(&ex)?;
        cond.apply_dropout(cfg.dit.cond_dropout, r);
        Ok((clean, cond))
    };
    while trainer.step < steps {
        let chunk = cfg.training.checkpoint_every.min(steps - trainer.step);
        let start = trainer.step;
        if consistency {
            // the teacher is re-snapshotted from the student every step, so chunking is exact
            let out = train_consistency(&mut net, &mut trainer, &cschedule, &cfg.edm, chunk, &mut rng, draw)
                .map_err(|e| divergence(e, &last))?;
            for (i, s) in out.iter().enumerate() {
                let _ = writeln!(log.text, "{},{},{}", start + i + 1, s.loss, s.gap);
                losses.push(s.loss);
            }
        } else {
            let out = train_diffusion(&mut net, &mut trainer, &cfg.edm, chunk, &mut rng, draw).map_err(|e| divergence(e, &last))?;
            for (i, l) in out.iter().enumerate() {
                let _ = writeln!(log.text, "{},{l}", start + i + 1);
                losses.push(*l);
            }
        }
        let mut entries = run_meta(cfg, variant, seed);
        entries.extend(trainer.entries(&net));
        save_checkpoint(&ckpt, &entries)?;
        log.flush()?;
        last = Some(ckpt.clone());
        log::info!("{variant}: step {}/{steps}, loss {:.5}", trainer.step, losses.last().copied().unwrap_or(f64::NAN));
    }
    Ok(TrainSummary { checkpoint: ckpt, losses })
}

fn save_checkpoint(path: &Path, entries: &[Entry]) -> CliResult<()> {
    let mut buf = Vec::new();
    checkpoint::write_entries(&mut buf, entries)?;
    write_file(path, &buf)
}

/// Trains the text-to-audio embedding bridge on random (tag, window) pairs.
pub fn train_bridge(cfg: &ExperimentConfig, layout: &Layout, steps: usize) -> CliResult<TrainSummary> {
    if steps < 2 {
        return Err(CliError::Usage("training needs at least 2 steps".into()));
    }
    let data = Dataset::generate(&cfg.data)?;
    let seed = layout.seed;
    let b = &cfg.bridge;
    let mut net = Bridge::<f32>::new(b.model.clone(), seed)?;
    let mut schedule = cfg.training.schedule(steps);
    schedule.base_lr = b.base_lr;
    schedule.warmup_steps = b.warmup_steps.min(steps - 1).max(1);
    let mut trainer = Trainer::new(&net, schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tag_seed(&format!("train:bridge:{seed}")));
    let scale = b.model.data_scale(&cfg.edm) as f32;
    let ckpt = layout.checkpoint(Variant::Bridge);
    let mut log = LossLog::new(layout.loss_log(Variant::Bridge), cfg, "");
    let mut losses = Vec::with_capacity(steps);
    let mut last: Option<PathBuf> = None;
    while trainer.step < steps {
        let chunk = cfg.training.checkpoint_every.min(steps - trainer.step);
        let start = trainer.step;
        let out = train_diffusion(&mut net, &mut trainer, &cfg.edm, chunk, &mut rng, |r| {
            let (text, audio) = data.bridge_pairs(b.batch, r)?;
            let mut cond = TextCond::new(stack_rows(&text)?)?;
            cond.apply_dropout(b.model.cond_dropout, r);
            Ok((stack_rows(&audio)?.scale(scale), cond))
        })
        .map_err(|e| divergence(e, &last))?;
        for (i, l) in out.iter().enumerate() {
            let _ = writeln!(log.text, "{},{l}", start + i + 1);
            losses.push(*l);
        }
        let mut entries = run_meta(cfg, Variant::Bridge, seed);
        entries.extend(trainer.entries(&net));
        save_checkpoint(&ckpt, &entries)?;
        log.flush()?;
        last = Some(ckpt.clone());
    }
    Ok(TrainSummary { checkpoint: ckpt, losses })
}

/// Reads a checkpoint written by [`train`]. Missing files give `None`; files
/// built from different data settings are refused.
fn load_entries(cfg: &ExperimentConfig, path: &Path, variant: Variant) -> CliResult<Option<Vec<Entry>>> {
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let entries = checkpoint::read_entries(bytes.as_slice())?;
    let data_hash = meta_value(&entries, "data_hash").unwrap_or("");
    if data_hash != cfg.data_hash() {
        return Err(CliError::Usage(format!(
            "{} was trained on different data (data hash {data_hash:?}, expected {})",
            path.display(),
            cfg.data_hash()
        )));
    }
    if meta_value(&entries, "variant") != Some(variant.name()) {
        return Err(CliError::Usage(format!("{} does not hold a {variant} checkpoint", path.display())));
    }
    Ok(Some(entries))
}

pub fn load_dit(cfg: &ExperimentConfig, layout: &Layout, variant: Variant) -> CliResult<Option<Dit<f32>>> {
    let Some(entries) = load_entries(cfg, &layout.checkpoint(variant), variant)? else { return Ok(None) };
    let mut net = Dit::<f32>::new(cfg.dit.clone(), 0)?;
    restore_store(net.store_mut(), &entries, "model/")?;
    Ok(Some(net))
}

pub fn load_bridge(cfg: &ExperimentConfig, layout: &Layout) -> CliResult<Option<Bridge<f32>>> {
    let Some(entries) = load_entries(cfg, &layout.checkpoint(Variant::Bridge), Variant::Bridge)? else { return Ok(None) };
    let mut net = Bridge::<f32>::new(cfg.bridge.model.clone(), 0)?;
    restore_store(net.store_mut(), &entries, "model/")?;
    Ok(Some(net))
}

/// Trained networks available to the samplers.
#[derive(Default)]
pub struct Models {
    pub diffusion: Option<Dit<f32>>,
    pub consistency: Option<Dit<f32>>,
    pub bridge: Option<Bridge<f32>>,
}

impl Models {
    pub fn load(cfg: &ExperimentConfig, layout: &Layout) -> CliResult<Self> {
        Ok(Self {
            diffusion: load_dit(cfg, layout, Variant::DitDiffusion)?,
            consistency: load_dit(cfg, layout, Variant::CDit)?,
            bridge: load_bridge(cfg, layout)?,
        })
    }

    /// Whether everything `variant` needs is present.
    pub fn has(&self, variant: Variant) -> bool {
        match variant {
            Variant::DitDiffusion => self.diffusion.is_some(),
            Variant::CDit => self.consistency.is_some(),
            Variant::Bridge => self.diffusion.is_some() && self.bridge.is_some(),
        }
    }
}

/// Generated latents and the network evaluations each sample cost.
pub struct Generated {
    pub latents: Tensor<f32>,
    pub calls_per_sample: usize,
}

pub fn sampler_steps(cfg: &ExperimentConfig, variant: Variant) -> usize {
    match variant {
        Variant::CDit => cfg.sampling.consistency_steps,
        _ => cfg.sampling.diffusion_steps,
    }
}

/// Bridged style embeddings for `examples` (text-conditioned for text-style
/// settings, unconditional otherwise).
pub fn bridged_styles<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    bridge: &Bridge<f32>,
    examples: &[Example],
    cond: Conditioning,
    rng: &mut R,
) -> CliResult<Vec<Vec<f64>>> {
    let tc = bridge_cond(examples, cond)?;
    let out = bridge_sample(bridge, &tc, cfg.bridge.sample_steps, cfg.bridge.guidance as f32, &cfg.edm, rng)?;
    Ok(out.data().chunks(bridge.config().embed_dim).map(|r| r.iter().map(|&v| v as f64).collect()).collect())
}

/// Samples one latent per example under `cond`.
pub fn generate<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    models: &Models,
    variant: Variant,
    cond: Conditioning,
    examples: &[Example],
    rng: &mut R,
) -> CliResult<Generated> {
    if !variant.supports(cond) {
        return Err(CliError::Usage(format!("variant {variant} does not support conditioning {cond}")));
    }
    let missing = || CliError::Usage(format!("no trained {variant} checkpoint"));
    let shape = [examples.len(), cfg.data.window, cfg.data.tracks.latent_channels];
    let steps = sampler_steps(cfg, variant);
    let guidance = cfg.sampling.guidance as f32;
    match variant {
        Variant::DitDiffusion | Variant::Bridge => {
            let dit = models.diffusion.as_ref().ok_or_else(missing)?;
            let styles = match variant {
                Variant::Bridge => Some(bridged_styles(cfg, models.bridge.as_ref().ok_or_else(missing)?, examples, cond, rng)?),
                _ => None,
            };
            let cb = cond_batch(examples, cond, styles.as_deref())?;
            let den = EdmDenoiser::new(dit, cb, &cfg.edm, guidance);
            let latents = ode_sample(&den, &shape, steps, &cfg.edm, rng)?;
            Ok(Generated { latents, calls_per_sample: den.calls() })
        }
        Variant::CDit => {
            let dit = models.consistency.as_ref().ok_or_else(missing)?;
            let model = ConsistencyModel::new(dit, cond_batch(examples, cond, None)?, &cfg.edm);
            let latents = multistep_sample(&model, &shape, steps, rng)?;
            Ok(Generated { latents, calls_per_sample: model.calls() })
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleSummary {
    pub samples: PathBuf,
    pub latents: PathBuf,
    pub manifest: ArtifactManifest,
}

/// Writes `count` generated latents and their audio-side embeddings.
pub fn sample(cfg: &ExperimentConfig, layout: &Layout, variant: Variant, cond: Conditioning, count: usize) -> CliResult<SampleSummary> {
    if !variant.supports(cond) {
        return Err(CliError::Usage(format!("variant {variant} does not support conditioning {cond}")));
    }
    let models = Models::load(cfg, layout)?;
    if !models.has(variant) {
        return Err(CliError::Usage(format!("no trained {variant} checkpoint under {}", layout.run_dir().display())));
    }
    let data = Dataset::generate(&cfg.data)?;
    let (w, ch, e) = (cfg.data.window, cfg.data.tracks.latent_channels, data.embed_dim());
    let mut emb = Emb1::empty(e, Modality::AudioSide, Source::Generated);
    let mut lat = Emb1::empty(w * ch, Modality::AudioSide, Source::Generated);
    let mut calls = 0;
    if count > 0 {
        let examples = data.eval_examples("sample", count)?;
        let mut rng = ChaCha8Rng::seed_from_u64(tag_seed(&format!("sample:{variant}:{cond}:{}", layout.seed)));
        let chunk = cfg.evaluation.batch_size;
        for part in examples.chunks(chunk) {
            let g = generate(cfg, &models, variant, cond, part, &mut rng)?;
            calls = g.calls_per_sample;
            let set = data.embed_latents(&g.latents)?;
            emb.data.extend(set.data().iter().map(|&v| v as f32));
            lat.data.extend_from_slice(g.latents.data());
        }
        emb.count = count;
        lat.count = count;
    }
    let (sp, lp) = (layout.samples(variant, cond), layout.latents(variant, cond));
    save_emb(&sp, &emb)?;
    save_emb(&lp, &lat)?;
    let mut m = ArtifactManifest::new(cfg, "samples", layout.seed, count);
    m.variant = Some(variant);
    m.conditioning = Some(cond);
    m.steps = Some(sampler_steps(cfg, variant));
    m.calls_per_sample = (count > 0).then_some(calls);
    m.add(&sp)?;
    m.add(&lp)?;
    m.save(&sidecar(&sp))?;
    Ok(SampleSummary { samples: sp, latents: lp, manifest: m })
}

/// Writes `count` bridged audio-side embeddings for held-out prompts.
pub fn bridge_sample_cmd(cfg: &ExperimentConfig, layout: &Layout, cond: Conditioning, count: usize) -> CliResult<SampleSummary> {
    if cond.style().is_none() {
        return Err(CliError::Usage(format!("the bridge produces style embeddings; conditioning {cond} has none")));
    }
    let bridge = load_bridge(cfg, layout)?
        .ok_or_else(|| CliError::Usage(format!("no trained bridge checkpoint under {}", layout.run_dir().display())))?;
    let data = Dataset::generate(&cfg.data)?;
    let mut emb = Emb1::empty(data.embed_dim(), Modality::AudioSide, Source::Generated);
    if count > 0 {
        let examples = data.eval_examples("bridge-sample", count)?;
        let mut rng = ChaCha8Rng::seed_from_u64(tag_seed(&format!("bridge-sample:{cond}:{}", layout.seed)));
        let rows = bridged_styles(cfg, &bridge, &examples, cond, &mut rng)?;
        let set: EmbeddingSet<f64> = audio_set(rows, Source::Generated)?;
        emb = Emb1::from_set(&set);
    }
    let path = layout.run_dir().join(format!("bridged-{cond}.emb"));
    save_emb(&path, &emb)?;
    let mut m = ArtifactManifest::new(cfg, "bridged", layout.seed, count);
    m.variant = Some(Variant::Bridge);
    m.conditioning = Some(cond);
    m.steps = Some(cfg.bridge.sample_steps);
    m.add(&path)?;
    m.save(&sidecar(&path))?;
    Ok(SampleSummary { samples: path.clone(), latents: path, manifest: m })
}
