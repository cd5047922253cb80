use std::f64::consts::TAU;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dit::LatentSequence;
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

use super::tag_seed;

/// Parameters of the multi-stem latent generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackConfig {
    pub latent_channels: usize,
    /// Frames per stem.
    pub length: usize,
    /// Sinusoid/envelope components per stem.
    pub components: usize,
    /// Bound on every latent value.
    pub amplitude: f64,
    pub num_genres: usize,
    pub num_instruments: usize,
    /// Relative per-stem deviation from the tag prototype.
    pub jitter: f64,
    /// Instruments never used as target or context.
    #[serde(default)]
    pub exclude_instruments: Vec<usize>,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            length: 64,
            components: 3,
            amplitude: 1.0,
            num_genres: 8,
            num_instruments: 8,
            jitter: 0.15,
            exclude_instruments: Vec::new(),
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.latent_channels > 0 && self.length > 0 && self.components > 0, || "track dims must be positive".into())?;
        ensure(self.num_genres > 0 && self.num_instruments > 0, || "need at least one genre and instrument".into())?;
        ensure(self.amplitude > 0.0 && self.jitter >= 0.0, || "amplitude > 0 and jitter >= 0".into())
    }
}

/// Generator parameters of one stem.
#[derive(Clone, Debug, PartialEq)]
struct StemParams {
    /// Cycles per 32 frames.
    freqs: Vec<f64>,
    phases: Vec<f64>,
    decays: Vec<f64>,
    periods: Vec<f64>,
    onset: f64,
    /// `components x channels`, each in `[-1, 1]`.
    weights: Vec<f64>,
}

fn prototype(genre: usize, instrument: usize, cfg: &TrackConfig) -> StemParams {
    let k = cfg.components;
    let mut inst = ChaCha8Rng::seed_from_u64(tag_seed(&format!("instrument:{instrument}")));
    let mut gen = ChaCha8Rng::seed_from_u64(tag_seed(&format!("genre:{genre}")));
    let freqs = (0..k).map(|_| inst.random_range(0.5..4.5)).collect();
    let weights = (0..k * cfg.latent_channels).map(|_| inst.random_range(-1.0..1.0)).collect();
    let decays = (0..k).map(|_| inst.random_range(0.02..0.3)).collect();
    let phases = (0..k).map(|_| gen.random_range(0.0..TAU)).collect();
    let periods = (0..k).map(|_| gen.random_range(6.0..24.0)).collect();
    StemParams { freqs, phases, decays, periods, onset: 0.0, weights }
}

fn jittered<R: Rng + ?Sized>(p: &StemParams, jitter: f64, rng: &mut R) -> StemParams {
    let mut u = || rng.random_range(-1.0..1.0);
    StemParams {
        freqs: p.freqs.iter().map(|&f| f * (1.0 + jitter * u())).collect(),
        phases: p.phases.iter().map(|&ph| ph + jitter * TAU * u()).collect(),
        decays: p.decays.iter().map(|&d| d * (1.0 + jitter * u())).collect(),
        periods: p.periods.clone(),
        onset: (u() + 1.0) * 16.0 * jitter,
        weights: p.weights.iter().map(|&w| (w + jitter * u()).clamp(-1.0, 1.0)).collect(),
    }
}

fn render(p: &StemParams, cfg: &TrackConfig, length: usize) -> LatentSequence<f64> {
    let (k, ch) = (cfg.components, cfg.latent_channels);
    let scale = cfg.amplitude / k as f64;
    LatentSequence::from_fn(length, ch, |t, c| {
        let t = t as f64;
        (0..k)
            .map(|m| {
                let env = (-p.decays[m] * ((t + p.onset) % p.periods[m])).exp();
                p.weights[m * ch + c] * env * (TAU * p.freqs[m] * t / 32.0 + p.phases[m]).sin()
            })
            .sum::<f64>()
            * scale
    })
}

/// Noise-free stem for a tag pair, rendered over `length` frames.
pub fn prototype_stem(genre: usize, instrument: usize, length: usize, cfg: &TrackConfig) -> LatentSequence<f64> {
    render(&prototype(genre, instrument, cfg), cfg, length)
}

/// A jittered stem for a tag pair, as `gen_track_set` would draw it.
pub(super) fn jittered_stem<R: Rng + ?Sized>(genre: usize, instrument: usize, cfg: &TrackConfig, rng: &mut R) -> LatentSequence<f64> {
    render(&jittered(&prototype(genre, instrument, cfg), cfg.jitter, rng), cfg, cfg.length)
}

/// One multi-track example: stems with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTrackSet {
    pub seed: u64,
    pub stems: Vec<LatentSequence<f64>>,
    pub genre_ids: Vec<usize>,
    pub instrument_ids: Vec<usize>,
}

impl SynthTrackSet {
    pub fn tags(&self, stem: usize) -> Vec<String> {
        vec![format!("genre:{}", self.genre_ids[stem]), format!("instrument:{}", self.instrument_ids[stem])]
    }
}

/// Seeded track set of `num_stems` stems sharing one genre; instruments are
/// distinct while the instrument pool allows it.
pub fn gen_track_set(seed: u64, num_stems: usize, cfg: &TrackConfig) -> Result<SynthTrackSet> {
    ensure(num_stems >= 2, || format!("a track set needs at least 2 stems, got {num_stems}"))?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let genre = rng.random_range(0..cfg.num_genres);
    let instruments: Vec<usize> = if num_stems <= cfg.num_instruments {
        sample_indices(&mut rng, cfg.num_instruments, num_stems).into_vec()
    } else {
        (0..num_stems).map(|_| rng.random_range(0..cfg.num_instruments)).collect()
    };
    let stems = instruments
        .iter()
        .map(|&inst| render(&jittered(&prototype(genre, inst, cfg), cfg.jitter, &mut rng), cfg, cfg.length))
        .collect();
    Ok(SynthTrackSet { seed, stems, genre_ids: vec![genre; num_stems], instrument_ids: instruments })
}

/// Context/target example with its anti-leakage style window.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub context: LatentSequence<f64>,
    pub target: LatentSequence<f64>,
    pub target_stem: usize,
    pub context_stems: Vec<usize>,
    pub train_start: usize,
    pub style_start: usize,
    /// Target window the style embedding is computed from.
    pub style_window: LatentSequence<f64>,
}

/// Start of a style window of `window` frames. It avoids overlapping the
/// training window `[train, train + window)` when some placement allows it and
/// otherwise differs from it whenever the stem is longer than one window.
pub fn style_window_start<R: Rng + ?Sized>(length: usize, window: usize, train: usize, rng: &mut R) -> usize {
    let last = length - window;
    // starts whose window does not overlap the training window
    let left = (train + 1).saturating_sub(window);
    let right = (last + 1).saturating_sub(train + window);
    if left + right > 0 {
        let pick = rng.random_range(0..left + right);
        return if pick < left { pick } else { train + window + (pick - left) };
    }
    if last == 0 {
        return 0;
    }
    let s = rng.random_range(0..last);
    if s >= train {
        s + 1
    } else {
        s
    }
}

/// Picks a target stem, mixes a random nonempty subset of the other stems as
/// context and chooses training and style windows of `window` frames.
pub fn make_training_pair<R: Rng + ?Sized>(set: &SynthTrackSet, window: usize, cfg: &TrackConfig, rng: &mut R) -> Result<TrainingPair> {
    let usable: Vec<usize> =
        (0..set.stems.len()).filter(|&i| !cfg.exclude_instruments.contains(&set.instrument_ids[i])).collect();
    ensure(usable.len() >= 2, || "fewer than two usable stems after exclusion".into())?;
    let length = set.stems[0].len();
    ensure(window >= 1 && window <= length, || format!("window {window} does not fit stems of {length} frames"))?;
    let target_stem = usable[rng.random_range(0..usable.len())];
    let others: Vec<usize> = usable.iter().copied().filter(|&i| i != target_stem).collect();
    let take = rng.random_range(1..=others.len());
    let mut context_stems: Vec<usize> = sample_indices(rng, others.len(), take).into_iter().map(|i| others[i]).collect();
    context_stems.sort_unstable();
    let train_start = rng.random_range(0..=length - window);
    let style_start = style_window_start(length, window, train_start, rng);

    let ch = set.stems[0].channels();
    let mut mix = vec![0.0; window * ch];
    for &s in &context_stems {
        let w = set.stems[s].window(train_start, window)?;
        mix.iter_mut().zip(w.frames().data()).for_each(|(a, &b)| *a += b);
    }
    let n = context_stems.len() as f64;
    mix.iter_mut().for_each(|a| *a /= n);
    Ok(TrainingPair {
        context: LatentSequence::new(Tensor::new(vec![window, ch], mix)?)?,
        target: set.stems[target_stem].window(train_start, window)?,
        target_stem,
        context_stems,
        train_start,
        style_start,
        style_window: set.stems[target_stem].window(style_start, window)?,
    })
}
