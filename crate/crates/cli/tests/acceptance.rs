//! Acceptance suite: one pass/fail line per criterion.
//!
//! Run with `cargo test --release -p accomp-cli --test acceptance`. Numeric
//! arguments after `--` select criteria, e.g. `-- 3 9`.
//!
//! Criteria listed in `KNOWN_FAILURES` are still run and reported as FAIL but
//! do not fail the process unless `ACCEPTANCE_STRICT=1` is set.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use accomp_core::bridge::{bridge_sample, modality_gap_stats, Bridge, BridgeConfig, TextCond};
use accomp_core::consistency::{
    consistency_loss_tape, huber_c, multistep_sample, ConsistencyDraw, ConsistencyModel, ConsistencySchedule,
    TeacherState,
};
use accomp_core::dit::{dit_param_count, CondBatch, Dit, DitConfig};
use accomp_core::edm::{denoise, diffusion_loss_tape, ode_sample, sample_training_sigma, EdmDenoiser, EdmParams, NoiseDraw};
use accomp_core::embedding::{EmbeddingSet, Modality, Source};
use accomp_core::gradcheck::grad_check_params;
use accomp_core::metrics::{density_coverage, frechet_distance, kernel_distance, MetricReport};
use accomp_core::optim::TrainSchedule;
use accomp_core::params::ParamStore;
use accomp_core::synth::{gaussian_batch, gen_track_set, make_training_pair, GapSpace, GapSpaceConfig, MixtureTask, TrackConfig};
use accomp_core::tape::{Tape, Var};
use accomp_core::train::{train_consistency, train_diffusion, Trainer};
use accomp_core::{Network, Tensor};
use anyhow::{ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const BIN: &str = env!("CARGO_BIN_EXE_accomp");

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

type Criterion = (u32, &'static str, fn() -> Result<Verdict>);

const CRITERIA: [Criterion; 10] = [
    (1, "gradient correctness", gradients),
    (2, "consistency boundary", boundary),
    (3, "metric oracles", metric_oracles),
    (4, "noise lower bound", noise_row),
    (5, "diffusion end-to-end", gaussian_toy),
    (6, "few-step quality ordering", few_step_ordering),
    (7, "gap bridging", gap_bridging),
    (8, "anti-leakage rule", anti_leakage),
    (9, "paper-config parameter count", paper_params),
    (10, "determinism", determinism),
];

/// Criteria that do not hold at desk scale (see the README).
const KNOWN_FAILURES: [u32; 1] = [6];

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = 0;
    let mut fatal = 0;
    let mut ran = 0;
    for (id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(run)) {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => Verdict { pass: false, detail: format!("error: {e:#}") },
            Err(_) => Verdict { pass: false, detail: "panicked".into() },
        };
        let tag = if outcome.pass { "PASS" } else { "FAIL" };
        let known = !outcome.pass && KNOWN_FAILURES.contains(&id);
        println!(
            "[{tag}] {id:>2} {name}: {} ({:.1}s){}",
            outcome.detail,
            start.elapsed().as_secs_f64(),
            if known { " [known failure]" } else { "" }
        );
        failed += usize::from(!outcome.pass);
        fatal += usize::from(!outcome.pass && (strict || !known));
    }
    println!("acceptance: {} of {ran} criteria passed, {} tolerated known failures", ran - failed, failed - fatal);
    if fatal == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn flat_set(t: &Tensor<f32>, source: Source) -> Result<EmbeddingSet<f64>> {
    let d = t.numel() / t.batch();
    Ok(EmbeddingSet::new(d, t.data().iter().map(|&v| v as f64).collect(), Modality::AudioSide, source)?)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn project(t: &mut Tape<f64>, y: Var) -> accomp_core::Result<Var> {
    let n = t.value(y).len();
    let w = (0..n).map(|i| ((i * 7919 % 113) as f64 / 56.0) - 1.0).collect();
    let y = t.mul_const(y, w)?;
    Ok(t.sum(y))
}

/// A few random flat indices inside every parameter tensor.
fn coords_per_tensor(store: &ParamStore<f64>, per: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::new();
    let mut offset = 0;
    for t in store.tensors() {
        let n = t.numel();
        out.extend((0..per.min(n)).map(|_| offset + rng.random_range(0..n)));
        offset += n;
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn gradients() -> Result<Verdict> {
    const TOL: f64 = 1e-4;
    const EPS: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let edm = EdmParams::default();
    let cfg = DitConfig::desk();
    let mut dit = Dit::<f64>::new(cfg.clone(), 1)?;
    dit.store_mut().randomize(0.1, &mut rng);
    let (b, len) = (2, 8);
    let x = Tensor::randn(&[b, len, cfg.latent_channels], 1.0, &mut rng);
    let ctx = Tensor::randn(&[b, len, cfg.context_channels], 1.0, &mut rng);
    let style = Tensor::randn(&[b, cfg.style_embed_dim], 0.2, &mut rng);
    let mut cond = CondBatch::new(Some(ctx), Some(style), b)?;
    cond.drop_style[1] = true;
    let coords = coords_per_tensor(dit.store(), 3, &mut rng);

    let forward = grad_check_params(dit.store(), &coords, EPS, |t, p| {
        let xin = t.constant(&x);
        let y = dit.forward_tape(t, p, xin, &[0.4, -1.1], &cond)?;
        project(t, y)
    })?;

    let draw = NoiseDraw::sample(x.shape(), &edm, &mut rng);
    let diffusion = grad_check_params(dit.store(), &coords, EPS, |t, p| {
        diffusion_loss_tape(&dit, t, p, &x, &cond, &draw, &edm)
    })?;

    let teacher = TeacherState::snapshot(dit.store());
    let mut student = dit.clone();
    student.store_mut().randomize(0.05, &mut rng);
    let cdraw = ConsistencyDraw::sample(x.shape(), 0.5, &edm, &mut rng);
    let c = huber_c(len * cfg.latent_channels);
    let consistency = grad_check_params(student.store(), &coords, EPS, |t, p| {
        let frozen = teacher.load(t);
        consistency_loss_tape(&student, t, p, &frozen, &x, &cond, &cdraw, &edm, c)
    })?;

    let bcfg = BridgeConfig::desk();
    let mut br = Bridge::<f64>::new(bcfg.clone(), 2)?;
    br.store_mut().randomize(0.1, &mut rng);
    let be = Tensor::randn(&[3, bcfg.embed_dim], 1.0, &mut rng);
    let mut tcond = TextCond::new(Tensor::randn(&[3, bcfg.embed_dim], 0.2, &mut rng))?;
    tcond.drop[2] = true;
    let bcoords = coords_per_tensor(br.store(), 3, &mut rng);
    let bridge = grad_check_params(br.store(), &bcoords, EPS, |t, p| {
        let xin = t.constant(&be);
        let y = br.forward_tape(t, p, xin, &[0.1, -0.4, 0.9], &tcond)?;
        project(t, y)
    })?;
    let bdraw = NoiseDraw::sample(be.shape(), &edm, &mut rng);
    let bridge_loss = grad_check_params(br.store(), &bcoords, EPS, |t, p| {
        diffusion_loss_tape(&br, t, p, &be, &tcond, &bdraw, &edm)
    })?;

    let worst = [forward, diffusion, consistency, bridge, bridge_loss].into_iter().fold(0.0, f64::max);
    verdict(
        worst < TOL,
        format!(
            "max rel err {worst:.2e} (dit {forward:.1e}, diffusion loss {diffusion:.1e}, consistency loss {consistency:.1e}, \
             bridge {bridge:.1e}, bridge loss {bridge_loss:.1e}) over {} + {} coordinates",
            coords.len(),
            bcoords.len()
        ),
    )
}

fn boundary() -> Result<Verdict> {
    let p = EdmParams::default();
    let cfg = DitConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut worst: f64 = 0.0;
    for draw in 0..10 {
        let mut dit = Dit::<f64>::new(cfg.clone(), draw)?;
        dit.store_mut().randomize(0.5, &mut rng);
        for _ in 0..100 {
            let ctx = Tensor::randn(&[1, 8, cfg.context_channels], 1.0, &mut rng);
            let style = Tensor::randn(&[1, cfg.style_embed_dim], 1.0, &mut rng);
            let model = ConsistencyModel::new(&dit, CondBatch::new(Some(ctx), Some(style), 1)?, &p);
            let scale = rng.random_range(0.01..10.0);
            let x = Tensor::randn(&[1, 8, cfg.latent_channels], scale, &mut rng);
            let y = model.apply(&x, p.sigma_min)?;
            worst = worst.max(y.sub(&x)?.norm_sq().sqrt() / x.norm_sq().sqrt());
        }
    }
    verdict(worst <= 1e-6, format!("max relative error {worst:.2e} over 1000 inputs and 10 weight draws"))
}

fn gaussian_rows(n: usize, d: usize, mean: f64, rng: &mut ChaCha8Rng) -> Result<EmbeddingSet<f64>> {
    let data = (0..n * d).map(|_| mean + rng.sample::<f64, _>(StandardNormal)).collect();
    Ok(EmbeddingSet::new(d, data, Modality::AudioSide, Source::Real)?)
}

fn brute_kd(x: &EmbeddingSet<f64>, y: &EmbeddingSet<f64>) -> f64 {
    let d = x.dim() as f64;
    let k = |a: &[f64], b: &[f64]| (a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / d + 1.0).powi(3);
    let within = |s: &EmbeddingSet<f64>| {
        let n = s.len();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += k(s.row(i), s.row(j));
                }
            }
        }
        acc / (n * (n - 1)) as f64
    };
    let mut xy = 0.0;
    for a in x.rows() {
        for b in y.rows() {
            xy += k(a, b);
        }
    }
    within(x) + within(y) - 2.0 * xy / (x.len() * y.len()) as f64
}

fn brute_density_coverage(real: &EmbeddingSet<f64>, gen: &EmbeddingSet<f64>, k: usize) -> (f64, f64) {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let n = real.len();
    let (mut inside, mut covered) = (0usize, 0usize);
    for i in 0..n {
        let mut ds: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist(real.row(i), real.row(j))).collect();
        ds.sort_by(f64::total_cmp);
        let hits = gen.rows().filter(|g| dist(g, real.row(i)) <= ds[k - 1]).count();
        inside += hits;
        covered += usize::from(hits > 0);
    }
    (inside as f64 / (k * gen.len()) as f64, covered as f64 / n as f64)
}

fn metric_oracles() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut kd_worst: f64 = 0.0;
    let mut dc_mismatch = 0;
    for _ in 0..100 {
        let d = rng.random_range(1..6);
        let x = gaussian_rows(rng.random_range(2..40), d, 0.0, &mut rng)?;
        let y = gaussian_rows(rng.random_range(2..40), d, 0.3, &mut rng)?;
        let (got, want) = (kernel_distance(&x, &y)?, brute_kd(&x, &y));
        kd_worst = kd_worst.max((got - want).abs() / want.abs().max(1e-12));

        let k = rng.random_range(1..=5);
        let real = gaussian_rows(rng.random_range(k + 1..=100), d, 0.0, &mut rng)?;
        let gen = gaussian_rows(rng.random_range(1..=100), d, 0.5, &mut rng)?;
        dc_mismatch += usize::from(density_coverage(&real, &gen, k)? != brute_density_coverage(&real, &gen, k));
    }
    let mut fd_worst: f64 = 0.0;
    for (d, m) in [(1, 1.0), (4, 0.5), (8, 0.5)] {
        let fd = frechet_distance(&gaussian_rows(100_000, d, 0.0, &mut rng)?, &gaussian_rows(100_000, d, m, &mut rng)?)?;
        let want = d as f64 * m * m;
        fd_worst = fd_worst.max((fd - want).abs() / want);
    }
    verdict(
        kd_worst <= 1e-10 && dc_mismatch == 0 && fd_worst < 0.03,
        format!("KD rel err {kd_worst:.1e}, density/coverage mismatches {dc_mismatch}/100, FD closed-form rel err {fd_worst:.4}"),
    )
}

fn accomp(args: &[&str]) -> Result<String> {
    let out = Command::new(BIN).args(args).env("RUST_LOG", "error").output().context("cannot run the accomp binary")?;
    ensure!(out.status.success(), "accomp {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    Ok(String::from_utf8(out.stdout)?)
}

fn noise_row() -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let out = dir.path().to_str().context("utf-8 temp path")?;
    accomp(&["gen-data", "--out", out])?;
    accomp(&["ablate", "--out", out])?;
    let report = MetricReport::from_csv(&std::fs::read_to_string(dir.path().join("seed-0/report.csv"))?)?;
    let cov = report.value("noise", "-", "Cov.").context("noise coverage missing")?;
    let den = report.value("noise", "-", "Den.").context("noise density missing")?;
    let real = report.value("real", "original", "Cov.").context("real coverage missing")?;
    verdict(
        cov.mean == 0.0 && den.mean == 0.0,
        format!(
            "noise row Cov. {:.3} Den. {:.3} over {} batches (real-data row Cov. {:.3})",
            cov.mean, den.mean, cov.count, real.mean
        ),
    )
}

fn gaussian_toy() -> Result<Verdict> {
    let steps = 2000;
    let edm = EdmParams::default();
    let mut net = Dit::<f32>::new(DitConfig::toy(2, 4), 0)?;
    let mut sch = TrainSchedule::new(steps);
    sch.base_lr = 1e-3;
    sch.warmup_steps = steps / 20;
    let mut tr = Trainer::new(&net, sch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    train_diffusion(&mut net, &mut tr, &edm, steps, &mut rng, |r| {
        Ok((gaussian_batch(1.0, 64, 4, 2, r), CondBatch::unconditional(64)))
    })?;
    // unit-variance data: E[x0 | x] = x / (1 + sigma^2)
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..500 {
        let s = sample_training_sigma(&mut rng, &edm) as f32;
        let x0: Tensor<f32> = gaussian_batch(1.0, 1, 4, 2, &mut rng);
        let n: Tensor<f32> = gaussian_batch(s as f64, 1, 4, 2, &mut rng);
        let x = x0.zip_map(&n, |a, b| a + b)?;
        let d = denoise(&net, &x, s, &CondBatch::unconditional(1), &edm)?;
        let want = x.scale(1.0 / (1.0 + s * s));
        for (a, b) in d.data().iter().zip(want.data()) {
            num += ((a - b) as f64).powi(2);
            den += (*b as f64).powi(2);
        }
    }
    let rel = (num / den).sqrt();
    let sampler = EdmDenoiser::new(&net, CondBatch::unconditional(2000), &edm, 1.0);
    let samples = ode_sample(&sampler, &[2000, 4, 2], 50, &edm, &mut rng)?;
    let fresh: Tensor<f32> = gaussian_batch(1.0, 2000, 4, 2, &mut rng);
    let fd = frechet_distance(&flat_set(&samples, Source::Generated)?, &flat_set(&fresh, Source::Real)?)?;
    verdict(rel < 0.05 && fd < 0.05, format!("posterior-mean rel L2 {rel:.4}, 50-step FD {fd:.4}"))
}

fn few_step_ordering() -> Result<Verdict> {
    // equal budgets for both objectives; 10^4 samples keep the FD bias near 0.002
    let (steps, n) = (3000, 10_000);
    let edm = EdmParams::default();
    let task = MixtureTask::new(7, 4, 4, 2, 1.0, 0.3);
    let (mut fd1, mut fd5, mut fd50) = (Vec::new(), Vec::new(), Vec::new());
    let (mut calls5, mut calls50) = (0, 0);
    for seed in 0..3u64 {
        let mut sch = TrainSchedule::new(steps);
        sch.base_lr = 1e-3;
        sch.warmup_steps = steps / 20;
        let b = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fresh = flat_set(&task.sample::<f32, _>(n, &mut rng), Source::Real)?;

        let mut cm = Dit::<f32>::new(DitConfig::toy(2, 4), seed)?;
        let mut tr = Trainer::new(&cm, sch.clone())?;
        let cs = ConsistencySchedule::new(steps);
        train_consistency(&mut cm, &mut tr, &cs, &edm, steps, &mut rng, |r| {
            Ok((task.sample(b, r), CondBatch::unconditional(b)))
        })?;
        for (k, out) in [(1, &mut fd1), (5, &mut fd5)] {
            let m = ConsistencyModel::new(&cm, CondBatch::unconditional(n), &edm);
            let s = multistep_sample(&m, &[n, 4, 2], k, &mut rng)?;
            out.push(frechet_distance(&flat_set(&s, Source::Generated)?, &fresh)?);
            if k == 5 {
                calls5 = m.calls();
            }
        }

        let mut dn = Dit::<f32>::new(DitConfig::toy(2, 4), seed)?;
        let mut tr = Trainer::new(&dn, sch)?;
        train_diffusion(&mut dn, &mut tr, &edm, steps, &mut rng, |r| Ok((task.sample(b, r), CondBatch::unconditional(b))))?;
        let den = EdmDenoiser::new(&dn, CondBatch::unconditional(n), &edm, 1.0);
        let s = ode_sample(&den, &[n, 4, 2], 50, &edm, &mut rng)?;
        fd50.push(frechet_distance(&flat_set(&s, Source::Generated)?, &fresh)?);
        calls50 = den.calls();
    }
    let (m1, m5, m50) = (median(fd1.clone()), median(fd5.clone()), median(fd50.clone()));
    let pass = m5 < m1 && m5 <= 3.0 * m50 && calls5 == 5 && calls50 == 99;
    verdict(
        pass,
        format!(
            "median FD 1-step {m1:.4}, 5-step {m5:.4}, 50-step diffusion {m50:.4} (ratio {:.2}); calls {calls5} vs {calls50}; \
             per seed 1/5/50: {fd1:.3?} {fd5:.3?} {fd50:.3?}",
            m5 / m50
        ),
    )
}

fn gap_bridging() -> Result<Verdict> {
    let steps = 2000;
    let edm = EdmParams::default();
    let tracks = TrackConfig::default();
    let window = 32;
    let space = GapSpace::for_tracks(GapSpaceConfig::default(), &tracks, window)?;
    let (train_n, held_n) = (2048, 500);
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut text, mut audio) = (Vec::new(), Vec::new());
        for k in 0..(train_n + held_n) as u64 {
            let set = gen_track_set(seed * 100_000 + k, 3, &tracks)?;
            let s = rng.random_range(0..3);
            let start = rng.random_range(0..=tracks.length - window);
            audio.push(space.embed_audio(&set.stems[s].window(start, window)?)?);
            text.push(space.embed_text(set.genre_ids[s], set.instrument_ids[s], window, &tracks)?);
        }
        let cfg = BridgeConfig { hidden_units: 128, num_blocks: 4, ..BridgeConfig::desk() };
        let e = cfg.embed_dim;
        let scale = cfg.data_scale(&edm) as f32;
        let mut br = Bridge::<f32>::new(cfg.clone(), seed)?;
        let mut sch = TrainSchedule::new(steps);
        sch.base_lr = 1e-3;
        sch.warmup_steps = steps / 20;
        let mut tr = Trainer::new(&br, sch)?;
        let b = 64;
        train_diffusion(&mut br, &mut tr, &edm, steps, &mut rng, |r| {
            let idx: Vec<usize> = (0..b).map(|_| r.random_range(0..train_n)).collect();
            let x = Tensor::new(vec![b, e], idx.iter().flat_map(|&i| audio[i].iter().map(|&v| v as f32 * scale)).collect())?;
            let t = Tensor::new(vec![b, e], idx.iter().flat_map(|&i| text[i].iter().map(|&v| v as f32)).collect())?;
            let mut c = TextCond::new(t)?;
            c.apply_dropout(cfg.cond_dropout, r);
            Ok((x, c))
        })?;

        let held_text = &text[train_n..];
        let held_audio = &audio[train_n..];
        let tcond = TextCond::new(Tensor::new(vec![held_n, e], held_text.iter().flatten().map(|&v| v as f32).collect())?)?;
        let out = bridge_sample(&br, &tcond, 50, 1.25, &edm, &mut rng)?;
        let bridged =
            EmbeddingSet::new(e, out.data().iter().map(|&v| v as f64).collect(), Modality::AudioSide, Source::Generated)?;
        let raw = EmbeddingSet::from_rows(held_text, Modality::TextSide, Source::Real)?;
        let paired = EmbeddingSet::from_rows(held_audio, Modality::AudioSide, Source::Real)?;
        let reference = EmbeddingSet::from_rows(&audio[..train_n], Modality::AudioSide, Source::Real)?;
        let (fd_raw, fd_br) = (frechet_distance(&raw, &reference)?, frechet_distance(&bridged, &reference)?);
        let (cov_raw, cov_br) = (density_coverage(&reference, &raw, 5)?.1, density_coverage(&reference, &bridged, 5)?.1);
        let (cos_raw, cos_br) = (modality_gap_stats(&raw, &paired)?.1, modality_gap_stats(&bridged, &paired)?.1);
        pass &= fd_br < fd_raw && cov_br > cov_raw && cos_br - cos_raw >= 0.05;
        lines.push(format!(
            "seed {seed}: FD {fd_raw:.3}->{fd_br:.4}, Cov {cov_raw:.3}->{cov_br:.3}, cos +{:.3}",
            cos_br - cos_raw
        ));
    }
    verdict(pass, lines.join("; "))
}

fn anti_leakage() -> Result<Verdict> {
    let cfg = TrackConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let mut violations = 0;
    let draws = 10_000;
    for i in 0..draws {
        let set = gen_track_set(i as u64 % 500, 2 + i % 5, &cfg)?;
        let window = rng.random_range(1..=cfg.length / 2);
        let pair = make_training_pair(&set, window, &cfg, &mut rng)?;
        violations += usize::from(pair.style_start == pair.train_start);
    }
    verdict(violations == 0, format!("{violations} violations over {draws} pairs"))
}

fn paper_params() -> Result<Verdict> {
    let n = dit_param_count(&DitConfig::paper_reference());
    verdict((2.2e8..=3.4e8).contains(&(n as f64)), format!("{n} parameters ({:.1}M)", n as f64 / 1e6))
}

const TINY: &str = r#"{
  "schema_version": 1,
  "model_variant": "c-dit",
  "seeds": [5],
  "data": {
    "train_sets": 64, "eval_sets": 32, "max_stems": 4, "window": 16,
    "tracks": {"latent_channels": 4, "length": 32, "components": 3, "amplitude": 1.0,
               "num_genres": 4, "num_instruments": 4, "jitter": 0.15},
    "gap": {"embed_dim": 16, "offset_norm": 0.5, "cone_angle": 0.6, "noise_scale": 0.05, "seed": 0}
  },
  "dit": {"model_dim": 32, "mlp_multiplier": 2, "num_heads": 2, "num_layers": 2, "patch_size": 2,
          "noise_embed_dim": 32, "latent_channels": 4, "context_channels": 4, "style_embed_dim": 16,
          "max_len": 16, "dw_kernel": 3, "cond_dropout": 0.1},
  "training": {"steps": 500, "diffusion_batch": 16, "consistency_batch": 16, "checkpoint_every": 250, "warmup_steps": 50},
  "bridge": {"model": {"embed_dim": 16, "hidden_units": 32, "num_blocks": 2, "cond_dropout": 0.1},
             "steps": 500, "batch": 32, "sample_steps": 10},
  "sampling": {"count": 32},
  "evaluation": {"batches": 2, "batch_size": 32, "reference_size": 64, "k": 3}
}"#;

fn pipeline(dir: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let config = dir.join("config.json");
    std::fs::write(&config, TINY)?;
    let c = config.to_str().context("utf-8 path")?;
    let o = dir.join("out");
    let o = o.to_str().context("utf-8 path")?;
    let base = ["--config", c, "--out", o];
    let with = |cmd: &str, extra: &[&str]| -> Result<String> {
        let mut args = vec![cmd];
        args.extend_from_slice(&base);
        args.extend_from_slice(extra);
        accomp(&args)
    };
    with("gen-data", &[])?;
    for v in ["dit-diffusion", "c-dit", "bridge"] {
        with("train", &["--variant", v, "--steps", "500"])?;
    }
    with("sample", &["--variant", "c-dit", "--conditioning", "style+ctx"])?;
    with("ablate", &[])?;
    let run = dir.join("out/seed-5");
    Ok((std::fs::read(run.join("report.csv"))?, std::fs::read(run.join("samples-c-dit-style+ctx.emb"))?))
}

fn determinism() -> Result<Verdict> {
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    let (report_a, samples_a) = pipeline(a.path())?;
    let (report_b, samples_b) = pipeline(b.path())?;
    let rows = String::from_utf8_lossy(&report_a).lines().filter(|l| !l.starts_with('#')).count() - 1;
    verdict(
        report_a == report_b && samples_a == samples_b,
        format!(
            "report.csv {} ({} bytes, {rows} rows), samples {}",
            if report_a == report_b { "identical" } else { "differs" },
            report_a.len(),
            if samples_a == samples_b { "identical" } else { "differ" }
        ),
    )
}
