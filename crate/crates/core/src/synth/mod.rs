//! Deterministic stand-ins for the dataset and the joint embedding model:
//! multi-stem latent tracks, context/target pairing, a two-modality embedding
//! space with a controllable gap, and analytic toy tasks.

mod gap;
mod toy;
mod tracks;

use sha2::{Digest, Sha256};

pub use gap::{feature_dim, spectral_features, tag_features, GapSpace, GapSpaceConfig, SPECTRAL_BINS, TAG_RENDERS};
pub use toy::{gaussian_batch, MixtureTask};
pub use tracks::{
    gen_track_set, make_training_pair, prototype_stem, style_window_start, SynthTrackSet, TrackConfig, TrainingPair,
};

/// Stable 64-bit seed derived from a string.
pub fn tag_seed(tag: &str) -> u64 {
    let digest = Sha256::digest(tag.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
