//! Deterministic synthetic dataset: training and held-out track sets, the
//! paired embedding space and the batches drawn from them.

use accomp_core::bridge::TextCond;
use accomp_core::dit::{CondBatch, LatentSequence};
use accomp_core::embedding::{EmbeddingSet, Modality, Source};
use accomp_core::synth::{gen_track_set, make_training_pair, tag_seed, GapSpace, SynthTrackSet};
use accomp_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Conditioning, DataConfig, StyleSource};

/// One conditioning example cut from a track set.
#[derive(Clone, Debug)]
pub struct Example {
    pub context: LatentSequence<f64>,
    pub target: LatentSequence<f64>,
    /// Audio-side embedding of a different window of the target.
    pub style_audio: Vec<f64>,
    /// Audio-side embedding of the target window itself (ground truth for CS_AA).
    pub target_audio: Vec<f64>,
    /// Text-side embedding of the target's tags.
    pub text: Vec<f64>,
}

pub struct Dataset {
    pub config: DataConfig,
    pub space: GapSpace,
    pub train: Vec<SynthTrackSet>,
    pub eval: Vec<SynthTrackSet>,
    text_table: Vec<Vec<f64>>,
}

fn split(cfg: &DataConfig, name: &str, count: usize) -> Result<Vec<SynthTrackSet>> {
    (0..count)
        .map(|i| {
            let seed = tag_seed(&format!("{name}:{}:{i}", cfg.seed));
            let stems = 2 + (seed % (cfg.max_stems as u64 - 1)) as usize;
            gen_track_set(seed, stems, &cfg.tracks)
        })
        .collect()
}

impl Dataset {
    pub fn generate(config: &DataConfig) -> Result<Self> {
        let space = GapSpace::for_tracks(config.gap.clone(), &config.tracks, config.window)?;
        let t = &config.tracks;
        let mut text_table = Vec::with_capacity(t.num_genres * t.num_instruments);
        for g in 0..t.num_genres {
            for i in 0..t.num_instruments {
                text_table.push(space.embed_text(g, i, config.window, t)?);
            }
        }
        Ok(Self {
            config: config.clone(),
            space,
            train: split(config, "train", config.train_sets)?,
            eval: split(config, "eval", config.eval_sets)?,
            text_table,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.space.embed_dim()
    }

    pub fn text_embedding(&self, genre: usize, instrument: usize) -> &[f64] {
        &self.text_table[genre * self.config.tracks.num_instruments + instrument]
    }

    pub fn example<R: Rng + ?Sized>(&self, set: &SynthTrackSet, rng: &mut R) -> Result<Example> {
        let pair = make_training_pair(set, self.config.window, &self.config.tracks, rng)?;
        let t = pair.target_stem;
        Ok(Example {
            style_audio: self.space.embed_audio(&pair.style_window)?,
            target_audio: self.space.embed_audio(&pair.target)?,
            text: self.text_embedding(set.genre_ids[t], set.instrument_ids[t]).to_vec(),
            context: pair.context,
            target: pair.target,
        })
    }

    pub fn train_examples<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<Example>> {
        (0..count).map(|_| self.example(&self.train[rng.random_range(0..self.train.len())], rng)).collect()
    }

    /// `count` held-out examples from the named stream; streams are independent
    /// of each other and of every model seed.
    pub fn eval_examples(&self, stream: &str, count: usize) -> Result<Vec<Example>> {
        let mut rng = ChaCha8Rng::seed_from_u64(tag_seed(&format!("eval-stream:{}:{stream}", self.config.seed)));
        (0..count).map(|_| self.example(&self.eval[rng.random_range(0..self.eval.len())], &mut rng)).collect()
    }

    /// Audio-side embeddings of held-out target windows.
    pub fn reference(&self, count: usize) -> Result<EmbeddingSet<f64>> {
        let ex = self.eval_examples("reference", count)?;
        audio_set(ex.iter().map(|e| e.target_audio.clone()).collect(), Source::Real)
    }

    /// Random (text, audio) pairs for the gap bridge: the audio side is a random
    /// window of a random stem, the text side that stem's tags.
    pub fn bridge_pairs<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<(Rows, Rows)> {
        let (mut text, mut audio) = (Vec::with_capacity(count), Vec::with_capacity(count));
        let w = self.config.window;
        for _ in 0..count {
            let set = &self.train[rng.random_range(0..self.train.len())];
            let s = rng.random_range(0..set.stems.len());
            let start = rng.random_range(0..=set.stems[s].len() - w);
            audio.push(self.space.embed_audio(&set.stems[s].window(start, w)?)?);
            text.push(self.text_embedding(set.genre_ids[s], set.instrument_ids[s]).to_vec());
        }
        Ok((text, audio))
    }

    /// Audio-side embeddings of generated `[batch, len, channels]` latents.
    pub fn embed_latents(&self, latents: &Tensor<f32>) -> Result<EmbeddingSet<f64>> {
        let (b, len, ch) = (latents.shape()[0], latents.shape()[1], latents.shape()[2]);
        let rows = latents
            .data()
            .chunks(len * ch)
            .take(b)
            .map(|chunk| {
                let seq = LatentSequence::new(Tensor::new(vec![len, ch], chunk.iter().map(|&v| v as f64).collect())?)?;
                self.space.embed_audio(&seq)
            })
            .collect::<Result<Vec<_>>>()?;
        audio_set(rows, Source::Generated)
    }
}

/// Embedding rows, one `Vec` per item.
pub type Rows = Vec<Vec<f64>>;

pub fn audio_set(rows: Vec<Vec<f64>>, source: Source) -> Result<EmbeddingSet<f64>> {
    EmbeddingSet::from_rows(&rows, Modality::AudioSide, source)
}

pub fn text_set(rows: Vec<Vec<f64>>) -> Result<EmbeddingSet<f64>> {
    EmbeddingSet::from_rows(&rows, Modality::TextSide, Source::Real)
}

fn stack_seqs<'a>(seqs: impl Iterator<Item = &'a LatentSequence<f64>>) -> Result<Tensor<f32>> {
    let seqs: Vec<_> = seqs.collect();
    let (len, ch) = (seqs[0].len(), seqs[0].channels());
    let data = seqs.iter().flat_map(|s| s.frames().data().iter().map(|&v| v as f32)).collect();
    Tensor::new(vec![seqs.len(), len, ch], data)
}

pub fn stack_rows(rows: &[Vec<f64>]) -> Result<Tensor<f32>> {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.iter().flatten().map(|&v| v as f32).collect())
}

/// Clean targets and full (context + audio style) conditioning for training.
pub fn training_batch(examples: &[Example]) -> Result<(Tensor<f32>, CondBatch<f32>)> {
    let clean = stack_seqs(examples.iter().map(|e| &e.target))?;
    let ctx = stack_seqs(examples.iter().map(|e| &e.context))?;
    let style: Vec<Vec<f64>> = examples.iter().map(|e| e.style_audio.clone()).collect();
    Ok((clean, CondBatch::new(Some(ctx), Some(stack_rows(&style)?), examples.len())?))
}

/// Conditioning for one evaluation setting. `style_override` replaces the
/// style rows (bridged embeddings).
pub fn cond_batch(examples: &[Example], cond: Conditioning, style_override: Option<&[Vec<f64>]>) -> Result<CondBatch<f32>> {
    let context = if cond.uses_context() { Some(stack_seqs(examples.iter().map(|e| &e.context))?) } else { None };
    let style = match (cond.style(), style_override) {
        (None, _) => None,
        (Some(_), Some(rows)) => Some(stack_rows(rows)?),
        (Some(StyleSource::Audio), None) => Some(stack_rows(&examples.iter().map(|e| e.style_audio.clone()).collect::<Vec<_>>())?),
        (Some(StyleSource::Text), None) => Some(stack_rows(&examples.iter().map(|e| e.text.clone()).collect::<Vec<_>>())?),
    };
    CondBatch::new(context, style, examples.len())
}

/// Text conditioning for the bridge; audio-style settings use the null token.
pub fn bridge_cond(examples: &[Example], cond: Conditioning) -> Result<TextCond<f32>> {
    match cond.style() {
        Some(StyleSource::Text) => TextCond::new(stack_rows(&examples.iter().map(|e| e.text.clone()).collect::<Vec<_>>())?),
        _ => Ok(TextCond::unconditional(examples.len())),
    }
}
