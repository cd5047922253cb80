use accomp_core::bridge::modality_gap_stats;
use accomp_core::embedding::{EmbeddingSet, Modality, Source};
use accomp_core::synth::{
    feature_dim, gen_track_set, make_training_pair, spectral_features, style_window_start, GapSpace, GapSpaceConfig,
    MixtureTask, TrackConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn different_seeds_give_uncorrelated_stems() {
    let cfg = TrackConfig::default();
    let mut total = 0.0;
    for i in 0..100 {
        let a = gen_track_set(2 * i, 2, &cfg).unwrap();
        let b = gen_track_set(2 * i + 1, 2, &cfg).unwrap();
        total += correlation(a.stems[0].frames().data(), b.stems[0].frames().data()).abs();
    }
    let mean = total / 100.0;
    assert!(mean < 0.5, "mean |corr| {mean}");
}

#[test]
fn style_window_never_equals_training_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut violations = 0;
    for _ in 0..10_000 {
        let window = rng.random_range(1..=32);
        let length = rng.random_range(2 * window..=128);
        let train = rng.random_range(0..=length - window);
        let style = style_window_start(length, window, train, &mut rng);
        if style == train || style + window > length {
            violations += 1;
        }
        // disjoint whenever some placement allows it
        let disjoint_possible = train >= window || length - (train + window) >= window;
        if disjoint_possible && style < train + window && train < style + window {
            violations += 1;
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn context_mix_excludes_target() {
    let cfg = TrackConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for seed in 0..100 {
        let set = gen_track_set(seed, 4, &cfg).unwrap();
        let pair = make_training_pair(&set, 16, &cfg, &mut rng).unwrap();
        assert!(!pair.context_stems.contains(&pair.target_stem));
        assert!(!pair.context_stems.is_empty());
        // the mix is the mean of the listed context windows and nothing else
        let n = pair.context_stems.len() as f64;
        for t in 0..16 {
            for c in 0..cfg.latent_channels {
                let want: f64 =
                    pair.context_stems.iter().map(|&s| set.stems[s].get(pair.train_start + t, c)).sum::<f64>() / n;
                assert!((pair.context.get(t, c) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn two_stem_context_is_the_other_stem() {
    let cfg = TrackConfig::default();
    let set = gen_track_set(3, 2, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let pair = make_training_pair(&set, 16, &cfg, &mut rng).unwrap();
        let other = 1 - pair.target_stem;
        assert_eq!(pair.context_stems, vec![other]);
        assert_eq!(pair.context, set.stems[other].window(pair.train_start, 16).unwrap());
        assert_ne!(pair.style_start, pair.train_start);
    }
}

#[test]
fn zero_gap_gives_identical_pairs() {
    let feat = feature_dim(8);
    let cfg = GapSpaceConfig { offset_norm: 0.0, noise_scale: 0.0, ..GapSpaceConfig::default() };
    let space = GapSpace::new(cfg, feat).unwrap();
    let set = gen_track_set(4, 3, &TrackConfig::default()).unwrap();
    for stem in &set.stems {
        let f = spectral_features(stem);
        assert_eq!(space.embed(&f, Modality::AudioSide).unwrap(), space.embed(&f, Modality::TextSide).unwrap());
    }
}

#[test]
fn gap_centroid_distance_over_a_thousand_pairs() {
    let tracks = TrackConfig::default();
    let space = GapSpace::for_tracks(GapSpaceConfig::default(), &tracks, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut audio, mut text) = (Vec::new(), Vec::new());
    let mut seed = 0;
    while audio.len() < 1000 {
        let set = gen_track_set(seed, 4, &tracks).unwrap();
        seed += 1;
        for _ in 0..10 {
            let pair = make_training_pair(&set, 16, &tracks, &mut rng).unwrap();
            let t = pair.target_stem;
            audio.push(space.embed_audio(&pair.target).unwrap());
            text.push(space.embed_text(set.genre_ids[t], set.instrument_ids[t], 16, &tracks).unwrap());
        }
    }
    let a = EmbeddingSet::from_rows(&audio, Modality::AudioSide, Source::Real).unwrap();
    let t = EmbeddingSet::from_rows(&text, Modality::TextSide, Source::Real).unwrap();
    let (centroid_distance, _) = modality_gap_stats(&t, &a).unwrap();
    assert!((0.25..=0.5).contains(&centroid_distance), "{centroid_distance}");
}

#[test]
fn mixture_samples_are_seeded() {
    let task = MixtureTask::new(1, 4, 4, 2, 1.0, 0.3);
    let a = task.sample::<f64, _>(8, &mut ChaCha8Rng::seed_from_u64(0));
    let b = task.sample::<f64, _>(8, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[8, 4, 2]);
}

proptest! {
    #[test]
    fn stems_are_bounded_and_reproducible(seed in any::<u64>(), stems in 2usize..6) {
        let cfg = TrackConfig::default();
        let a = gen_track_set(seed, stems, &cfg).unwrap();
        let b = gen_track_set(seed, stems, &cfg).unwrap();
        prop_assert_eq!(&a.stems, &b.stems);
        for s in &a.stems {
            prop_assert!(s.frames().data().iter().all(|v| v.abs() <= cfg.amplitude));
        }
    }

    #[test]
    fn embeddings_are_unit_and_deterministic(seed in any::<u64>()) {
        let tracks = TrackConfig::default();
        let space = GapSpace::new(GapSpaceConfig::default(), feature_dim(tracks.latent_channels)).unwrap();
        let set = gen_track_set(seed, 2, &tracks).unwrap();
        let e = space.embed_audio(&set.stems[0]).unwrap();
        prop_assert_eq!(&e, &space.embed_audio(&set.stems[0]).unwrap());
        let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
    }
}
