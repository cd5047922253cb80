use std::sync::Arc;

use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::frechet::frechet_distance;
use super::kernel::kernel_distance;
use super::manifold::{density_coverage, mean_paired_cosine};

/// Built-in report columns, in display order.
pub const BASE_COLUMNS: [&str; 6] = ["KD", "FAD", "Cov.", "Den.", "CS_AA", "CS_TA"];

/// One batch of generated audio-side embeddings plus whatever ground truth the
/// conditioning setting provides.
#[derive(Clone, Debug)]
pub struct CandidateBatch<T> {
    pub generated: EmbeddingSet<T>,
    /// Reference audio paired row-by-row with `generated` (for CS_AA).
    pub paired_audio: Option<EmbeddingSet<T>>,
    /// Text-side prompts paired row-by-row with `generated` (for CS_TA).
    pub paired_text: Option<EmbeddingSet<T>>,
    /// Context embeddings for adherence plugins; absent for context-free settings.
    pub context: Option<EmbeddingSet<T>>,
}

impl<T> CandidateBatch<T> {
    pub fn plain(generated: EmbeddingSet<T>) -> Self {
        Self { generated, paired_audio: None, paired_text: None, context: None }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ProtocolConfig {
    pub batches: usize,
    pub batch_size: usize,
    /// Neighbour count for density and coverage.
    pub k: usize,
}

impl ProtocolConfig {
    pub fn paper() -> Self {
        Self { batches: 5, batch_size: 1000, k: 5 }
    }

    pub fn desk() -> Self {
        Self { batches: 5, batch_size: 200, k: 5 }
    }
}

pub type AdherenceFn<T> = Arc<dyn Fn(&EmbeddingSet<T>, &EmbeddingSet<T>) -> Result<T> + Send + Sync>;

/// Named adherence metrics evaluated on (context, accompaniment) pairs.
pub struct AdherenceRegistry<T> {
    entries: Vec<(String, AdherenceFn<T>)>,
}

impl<T> Default for AdherenceRegistry<T> {
    fn default() -> Self {
        Self { entries: Vec::new() }
    }
}

impl<T> Clone for AdherenceRegistry<T> {
    fn clone(&self) -> Self {
        Self { entries: self.entries.clone() }
    }
}

impl<T: Scalar> AdherenceRegistry<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, f: AdherenceFn<T>) -> Result<()> {
        if name.is_empty() || BASE_COLUMNS.contains(&name) || self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Registration(format!("metric name {name:?} is empty or already taken")));
        }
        self.entries.push((name.to_string(), f));
        Ok(())
    }

    /// Returns whether `name` was registered.
    pub fn unregister(&mut self, name: &str) -> bool {
        let before = self.entries.len();
        self.entries.retain(|(n, _)| n != name);
        self.entries.len() != before
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }
}

/// Mean and sample standard deviation over batches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, count: values.len() })
    }
}

/// Per-column statistics of one (variant, conditioning) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellStats {
    pub columns: Vec<(String, Option<Stat>)>,
    /// Number of batch evaluations that produced the statistics.
    pub evaluations: usize,
}

impl CellStats {
    pub fn get(&self, column: &str) -> Option<Stat> {
        self.columns.iter().find(|(c, _)| c == column).and_then(|(_, s)| *s)
    }
}

/// Every built-in metric (and each plugin when context exists) for one batch.
pub fn evaluate_batch<T: Scalar>(
    batch: &CandidateBatch<T>,
    reference: &EmbeddingSet<T>,
    k: usize,
    registry: &AdherenceRegistry<T>,
) -> Result<Vec<Option<f64>>> {
    let g = &batch.generated;
    let kd = kernel_distance(reference, g)?.to_f64_lossy();
    let fad = frechet_distance(reference, g)?.to_f64_lossy();
    let (den, cov) = density_coverage(reference, g, k)?;
    let cs_aa = batch.paired_audio.as_ref().map(|a| mean_paired_cosine(g, a)).transpose()?;
    let cs_ta = batch.paired_text.as_ref().map(|t| mean_paired_cosine(g, t)).transpose()?;
    let mut out = vec![
        Some(kd),
        Some(fad),
        Some(cov.to_f64_lossy()),
        Some(den.to_f64_lossy()),
        cs_aa.map(|v| v.to_f64_lossy()),
        cs_ta.map(|v| v.to_f64_lossy()),
    ];
    for (_, f) in &registry.entries {
        out.push(batch.context.as_ref().map(|c| f(c, g).map(|v| v.to_f64_lossy())).transpose()?);
    }
    Ok(out)
}

/// Evaluates `config.batches` candidate batches against the full reference
/// set and aggregates each metric over batches. `generator(i)` returns batch
/// `i` or `None` once exhausted.
pub fn evaluation_protocol<T, G>(
    mut generator: G,
    reference: &EmbeddingSet<T>,
    config: &ProtocolConfig,
    registry: &AdherenceRegistry<T>,
) -> Result<CellStats>
where
    T: Scalar,
    G: FnMut(usize) -> Result<Option<CandidateBatch<T>>>,
{
    let mut names: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    names.extend(registry.names());
    let mut per_column: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for i in 0..config.batches {
        let Some(batch) = generator(i)? else {
            return Err(Error::PartialReport { completed: i, requested: config.batches });
        };
        for (col, v) in per_column.iter_mut().zip(evaluate_batch(&batch, reference, config.k, registry)?) {
            if let Some(v) = v {
                col.push(v);
            }
        }
    }
    Ok(CellStats {
        columns: names.into_iter().zip(per_column.iter().map(|v| Stat::of(v))).collect(),
        evaluations: config.batches,
    })
}
