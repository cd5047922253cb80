//! The variant x conditioning ablation grid with real-data and noise bounds.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use accomp_core::embedding::{l2_normalize, EmbeddingSet, Source};
use accomp_core::metrics::{evaluation_protocol, AdherenceRegistry, CandidateBatch, CellStats, MetricReport, BASE_COLUMNS};
use accomp_core::synth::tag_seed;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;

use crate::config::{Conditioning, ExperimentConfig, Variant};
use crate::data::{audio_set, text_set, Dataset, Example};
use crate::error::{CliError, CliResult};
use crate::pipeline::{generate, write_file, Layout, Models};

pub const REAL_ROW: (&str, &str) = ("real", "original");
pub const NOISE_ROW: (&str, &str) = ("noise", "-");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Cell {
    Real,
    Noise,
    Model(Variant, Conditioning),
}

impl Cell {
    fn labels(self) -> (String, String) {
        match self {
            Cell::Real => (REAL_ROW.0.into(), REAL_ROW.1.into()),
            Cell::Noise => (NOISE_ROW.0.into(), NOISE_ROW.1.into()),
            Cell::Model(v, c) => (v.name().into(), c.name().into()),
        }
    }
}

/// Rows in display order: bounds first, then each variant's supported settings.
fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = vec![Cell::Real, Cell::Noise];
    for &v in &cfg.evaluation.variants {
        out.extend(cfg.conditioning.iter().filter(|&&c| v.supports(c)).map(|&c| Cell::Model(v, c)));
    }
    out
}

/// White-noise embeddings: isotropic Gaussian draws projected to the unit sphere.
pub fn noise_embeddings(data: &Dataset, count: usize, seed: u64) -> CliResult<EmbeddingSet<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = data.embed_dim();
    let rows = (0..count)
        .map(|_| {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            l2_normalize(&mut v)?;
            Ok(v)
        })
        .collect::<accomp_core::Result<Vec<_>>>()?;
    Ok(audio_set(rows, Source::Generated)?)
}

struct Batch {
    examples: Vec<Example>,
    target_audio: EmbeddingSet<f64>,
    text: EmbeddingSet<f64>,
    context: EmbeddingSet<f64>,
}

fn eval_batches(cfg: &ExperimentConfig, data: &Dataset) -> CliResult<Vec<Batch>> {
    (0..cfg.evaluation.batches)
        .map(|i| {
            let examples = data.eval_examples(&format!("batch:{i}"), cfg.evaluation.batch_size)?;
            let context = examples.iter().map(|e| data.space.embed_audio(&e.context)).collect::<Result<Vec<_>, _>>()?;
            Ok(Batch {
                target_audio: audio_set(examples.iter().map(|e| e.target_audio.clone()).collect(), Source::Real)?,
                text: text_set(examples.iter().map(|e| e.text.clone()).collect())?,
                context: audio_set(context, Source::Real)?,
                examples,
            })
        })
        .collect()
}

fn candidate(
    cfg: &ExperimentConfig,
    data: &Dataset,
    models: &Models,
    cell: Cell,
    batch: &Batch,
    index: usize,
    seed: u64,
) -> CliResult<CandidateBatch<f64>> {
    let (v, c) = cell.labels();
    let stream = tag_seed(&format!("ablate:{v}:{c}:{seed}:{index}"));
    Ok(match cell {
        Cell::Real => CandidateBatch {
            generated: batch.target_audio.clone(),
            paired_audio: None,
            paired_text: Some(batch.text.clone()),
            context: Some(batch.context.clone()),
        },
        Cell::Noise => CandidateBatch::plain(noise_embeddings(data, batch.examples.len(), stream)?),
        Cell::Model(variant, cond) => {
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            let g = generate(cfg, models, variant, cond, &batch.examples, &mut rng)?;
            CandidateBatch {
                generated: data.embed_latents(&g.latents)?,
                paired_audio: Some(batch.target_audio.clone()),
                paired_text: Some(batch.text.clone()),
                context: cond.uses_context().then(|| batch.context.clone()),
            }
        }
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_cell(
    cfg: &ExperimentConfig,
    data: &Dataset,
    models: &Models,
    batches: &[Batch],
    reference: &EmbeddingSet<f64>,
    registry: &AdherenceRegistry<f64>,
    cell: Cell,
    seed: u64,
) -> CliResult<Option<CellStats>> {
    if let Cell::Model(v, _) = cell {
        if !models.has(v) {
            log::warn!("no checkpoint for {v}; its cells are marked absent");
            return Ok(None);
        }
    }
    let mut failure: Option<CliError> = None;
    let result = evaluation_protocol(
        |i| match candidate(cfg, data, models, cell, &batches[i], i, seed) {
            Ok(b) => Ok(Some(b)),
            Err(CliError::Core(e)) => Err(e),
            Err(other) => {
                failure = Some(other);
                Ok(None)
            }
        },
        reference,
        &cfg.evaluation.protocol(),
        registry,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(Some(result?))
}

/// Evaluates every cell (in parallel) and writes `report.csv` and `report.txt`.
pub fn ablate(cfg: &ExperimentConfig, layout: &Layout, registry: &AdherenceRegistry<f64>) -> CliResult<MetricReport> {
    let data = Dataset::generate(&cfg.data)?;
    let models = Models::load(cfg, layout)?;
    let reference = data.reference(cfg.evaluation.reference_size)?;
    let batches = eval_batches(cfg, &data)?;
    let grid = cells(cfg);
    let results: Mutex<Vec<Option<CliResult<Option<CellStats>>>>> = Mutex::new((0..grid.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(grid.len());
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= grid.len() {
                    break;
                }
                let r = evaluate_cell(cfg, &data, &models, &batches, &reference, registry, grid[i], layout.seed);
                results.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let mut columns: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    columns.extend(registry.names());
    let mut report = MetricReport::new(columns);
    report.header = vec![
        ("config_hash".into(), cfg.config_hash()),
        ("data_hash".into(), cfg.data_hash()),
        ("seed".into(), layout.seed.to_string()),
        ("reference_size".into(), cfg.evaluation.reference_size.to_string()),
        ("batches".into(), format!("{}x{}", cfg.evaluation.batches, cfg.evaluation.batch_size)),
    ];
    for (cell, r) in grid.iter().zip(results.into_inner().expect("workers finished")) {
        let (v, c) = cell.labels();
        report.push(&v, &c, r.expect("every cell evaluated")?);
    }
    write_file(&layout.report_csv(), report.to_csv().as_bytes())?;
    write_file(&layout.report_table(), report.to_table().as_bytes())?;
    Ok(report)
}
