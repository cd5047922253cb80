//! Distribution and pairwise metrics over embedding sets, the batched
//! evaluation protocol and the ablation report.

mod frechet;
mod kernel;
mod manifold;
mod protocol;
mod report;

pub use frechet::{frechet_distance, mean_cov, sqrtm_psd, symmetric_eigen, SquareMatrix, EIG_CLAMP};
pub use kernel::{kernel_distance, poly_kernel};
pub use manifold::{cosine_score, density_coverage, euclidean, knn_radii, mean_paired_cosine};
pub use protocol::{
    evaluate_batch, evaluation_protocol, AdherenceFn, AdherenceRegistry, CandidateBatch, CellStats, ProtocolConfig, Stat,
    BASE_COLUMNS,
};
pub use report::{MetricReport, ReportRow};
