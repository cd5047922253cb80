use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dit::LatentSequence;
use crate::embedding::{l2_normalize, Modality};
use crate::error::{ensure, Result};

use rand::Rng;

use super::tracks::{jittered_stem, TrackConfig};
use super::tag_seed;

/// DFT bins summarised per channel.
pub const SPECTRAL_BINS: usize = 4;

/// Per channel: mean, standard deviation and the magnitudes of DFT bins
/// `1..=SPECTRAL_BINS`, each normalised by the sequence length.
pub fn spectral_features(seq: &LatentSequence<f64>) -> Vec<f64> {
    let (n, ch) = (seq.len(), seq.channels());
    let nf = n as f64;
    let mut out = Vec::with_capacity(ch * (2 + SPECTRAL_BINS));
    for c in 0..ch {
        let col: Vec<f64> = (0..n).map(|t| seq.get(t, c)).collect();
        let mean = col.iter().sum::<f64>() / nf;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf).sqrt();
        out.push(mean);
        out.push(std);
        for k in 1..=SPECTRAL_BINS {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in col.iter().enumerate() {
                let a = TAU * (k * t) as f64 / nf;
                re += v * a.cos();
                im -= v * a.sin();
            }
            out.push((re * re + im * im).sqrt() / nf);
        }
    }
    out
}

pub fn feature_dim(channels: usize) -> usize {
    channels * (2 + SPECTRAL_BINS)
}

/// Renders averaged per tag pair when building its text-side features.
pub const TAG_RENDERS: usize = 16;

/// Text-side features of a tag pair: the mean spectral summary of
/// `TAG_RENDERS` seeded stems of that pair, each cut to a random `window`.
pub fn tag_features(genre: usize, instrument: usize, window: usize, cfg: &TrackConfig) -> Result<Vec<f64>> {
    ensure(window >= 1 && window <= cfg.length, || format!("window {window} does not fit stems of {} frames", cfg.length))?;
    let mut rng = ChaCha8Rng::seed_from_u64(tag_seed(&format!("text:{genre}:{instrument}")));
    let mut acc = vec![0.0; feature_dim(cfg.latent_channels)];
    for _ in 0..TAG_RENDERS {
        let stem = jittered_stem(genre, instrument, cfg, &mut rng);
        let start = rng.random_range(0..=cfg.length - window);
        let f = spectral_features(&stem.window(start, window)?);
        acc.iter_mut().zip(&f).for_each(|(a, v)| *a += v / TAG_RENDERS as f64);
    }
    Ok(acc)
}

/// Shape of the synthetic two-modality embedding space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapSpaceConfig {
    pub embed_dim: usize,
    /// Norm of the displacement between the modality centroids before renormalisation.
    pub offset_norm: f64,
    /// Half-angle (radians) of the cone both modalities occupy.
    pub cone_angle: f64,
    /// Norm of the per-modality pairing noise.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for GapSpaceConfig {
    fn default() -> Self {
        Self { embed_dim: 64, offset_norm: 0.5, cone_angle: 0.6, noise_scale: 0.05, seed: 0 }
    }
}

/// Fixed projection, cone axis and gap direction derived from a seed.
#[derive(Clone, Debug)]
pub struct GapSpace {
    pub config: GapSpaceConfig,
    feat_dim: usize,
    center: Vec<f64>,
    proj: Vec<f64>,
    axis: Vec<f64>,
    direction: Vec<f64>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    l2_normalize(&mut v).expect("gaussian draw is nonzero");
    v
}

impl GapSpace {
    pub fn new(config: GapSpaceConfig, feat_dim: usize) -> Result<Self> {
        let e = config.embed_dim;
        ensure(e >= 2 && feat_dim > 0, || "embedding and feature dims must be positive (embed_dim >= 2)".into())?;
        ensure(config.offset_norm >= 0.0 && config.noise_scale >= 0.0, || "offset_norm and noise_scale must be >= 0".into())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ tag_seed("gap-space"));
        let proj = (0..e * feat_dim).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>();
        let axis = unit_gaussian(&mut rng, e);
        let mut direction = unit_gaussian(&mut rng, e);
        let along: f64 = direction.iter().zip(&axis).map(|(a, b)| a * b).sum();
        direction.iter_mut().zip(&axis).for_each(|(d, a)| *d -= along * a);
        l2_normalize(&mut direction)?;
        Ok(Self { config, feat_dim, center: vec![0.0; feat_dim], proj, axis, direction })
    }

    /// Space whose features are centred on the mean text-side features over
    /// all tag pairs at `window` frames.
    pub fn for_tracks(config: GapSpaceConfig, tracks: &TrackConfig, window: usize) -> Result<Self> {
        tracks.validate()?;
        let mut space = Self::new(config, feature_dim(tracks.latent_channels))?;
        let count = (tracks.num_genres * tracks.num_instruments) as f64;
        for g in 0..tracks.num_genres {
            for i in 0..tracks.num_instruments {
                let f = tag_features(g, i, window, tracks)?;
                space.center.iter_mut().zip(&f).for_each(|(c, v)| *c += v / count);
            }
        }
        Ok(space)
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Unit vector in the shared cone, orthogonal to the gap direction.
    fn cone_point(&self, features: &[f64]) -> Vec<f64> {
        let e = self.config.embed_dim;
        let mut u: Vec<f64> = (0..e)
            .map(|i| self.proj[i * self.feat_dim..(i + 1) * self.feat_dim].iter().zip(features.iter().zip(&self.center)).map(|(a, (f, c))| a * (f - c)).sum())
            .collect();
        for dir in [&self.axis, &self.direction] {
            let along: f64 = u.iter().zip(dir).map(|(a, b)| a * b).sum();
            u.iter_mut().zip(dir).for_each(|(x, a)| *x -= along * a);
        }
        if l2_normalize(&mut u).is_err() {
            return self.axis.clone();
        }
        let (c, s) = (self.config.cone_angle.cos(), self.config.cone_angle.sin());
        self.axis.iter().zip(&u).map(|(a, p)| c * a + s * p).collect()
    }

    /// Embeds a feature vector as the given modality: cone point, shifted by
    /// half the offset (audio +, text -), pairing noise seeded by the input,
    /// then renormalised.
    pub fn embed(&self, features: &[f64], modality: Modality) -> Result<Vec<f64>> {
        ensure(features.len() == self.feat_dim, || format!("{} features, expected {}", features.len(), self.feat_dim))?;
        let mut v = self.cone_point(features);
        let sign = match modality {
            Modality::AudioSide => 0.5,
            Modality::TextSide => -0.5,
        };
        let shift = sign * self.config.offset_norm;
        v.iter_mut().zip(&self.direction).for_each(|(x, d)| *x += shift * d);
        if self.config.noise_scale > 0.0 {
            let mut key = String::with_capacity(features.len() * 17 + 2);
            key.push(if sign > 0.0 { 'a' } else { 't' });
            for f in features {
                key.push_str(&format!("{:016x}", f.to_bits()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ tag_seed(&key));
            let e = self.config.embed_dim as f64;
            for x in v.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *x += self.config.noise_scale * n / e.sqrt();
            }
        }
        l2_normalize(&mut v)?;
        Ok(v)
    }

    /// Audio-side embedding of a latent sequence.
    pub fn embed_audio(&self, seq: &LatentSequence<f64>) -> Result<Vec<f64>> {
        self.embed(&spectral_features(seq), Modality::AudioSide)
    }

    /// Text-side embedding of a tag pair, see [`tag_features`].
    pub fn embed_text(&self, genre: usize, instrument: usize, window: usize, tracks: &TrackConfig) -> Result<Vec<f64>> {
        self.embed(&tag_features(genre, instrument, window, tracks)?, Modality::TextSide)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::modality_gap_stats;
    use crate::embedding::{EmbeddingSet, Source};
    use crate::synth::gen_track_set;

    fn pairs(offset: f64) -> (EmbeddingSet<f64>, EmbeddingSet<f64>) {
        let tracks = TrackConfig::default();
        let space = GapSpace::for_tracks(GapSpaceConfig { offset_norm: offset, ..Default::default() }, &tracks, 32).unwrap();
        let (mut a, mut t) = (Vec::new(), Vec::new());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for seed in 0..100 {
            let set = gen_track_set(seed, 3, &tracks).unwrap();
            let s = rng.random_range(0..3);
            let start = rng.random_range(0..=32);
            a.push(space.embed_audio(&set.stems[s].window(start, 32).unwrap()).unwrap());
            t.push(space.embed_text(set.genre_ids[s], set.instrument_ids[s], 32, &tracks).unwrap());
        }
        (
            EmbeddingSet::from_rows(&t, Modality::TextSide, Source::Real).unwrap(),
            EmbeddingSet::from_rows(&a, Modality::AudioSide, Source::Real).unwrap(),
        )
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let tracks = TrackConfig::default();
        let space = GapSpace::for_tracks(GapSpaceConfig::default(), &tracks, 32).unwrap();
        let x = space.embed_text(1, 2, 32, &tracks).unwrap();
        let y = space.embed_text(1, 2, 32, &tracks).unwrap();
        assert_eq!(x, y);
        assert!((x.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gap_tracks_offset() {
        let (t0, a0) = pairs(0.0);
        let (t, a) = pairs(0.5);
        let (d0, _) = modality_gap_stats(&t0, &a0).unwrap();
        let (d, _) = modality_gap_stats(&t, &a).unwrap();
        assert!(d > d0 + 0.15, "gap {d} vs {d0}");
        assert!((0.25..=0.5).contains(&d), "centroid distance {d}");
    }

    #[test]
    fn matched_pairs_beat_random_pairs() {
        let (t, a) = pairs(0.5);
        let n = t.len();
        let cos = |i: usize, j: usize| t.row(i).iter().zip(a.row(j)).map(|(x, y)| x * y).sum::<f64>();
        let matched = (0..n).map(|i| cos(i, i)).sum::<f64>() / n as f64;
        let random = (0..n).map(|i| cos(i, (i + 37) % n)).sum::<f64>() / n as f64;
        eprintln!("matched {matched} random {random}");
        assert!(matched - random >= 0.1, "matched {matched} random {random}");
    }
}
