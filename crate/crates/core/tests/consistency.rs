use accomp_core::consistency::{
    boundary_coefficients, consistency_fn, gap_at, multistep_sample, multistep_trace, one_step_sample, pseudo_huber,
    ConsistencyModel, ConsistencySchedule,
};
use accomp_core::dit::{CondBatch, Dit, DitConfig};
use accomp_core::edm::EdmParams;
use accomp_core::optim::TrainSchedule;
use accomp_core::synth::gaussian_batch;
use accomp_core::train::{train_consistency, Trainer};
use accomp_core::{Network, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn boundary_identity_for_random_inputs_and_weights() {
    let p = EdmParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut dit = Dit::<f64>::new(DitConfig::toy(2, 4), 1).unwrap();
    dit.store_mut().randomize(0.5, &mut rng);
    let model = ConsistencyModel::new(&dit, CondBatch::unconditional(1), &p);
    for _ in 0..1000 {
        let x = Tensor::randn(&[1, 4, 2], 3.0, &mut rng);
        let y = model.apply(&x, p.sigma_min).unwrap();
        let err = y.sub(&x).unwrap().norm_sq().sqrt() / x.norm_sq().sqrt();
        assert!(err <= 1e-6, "{err}");
    }
}

#[test]
fn zero_init_one_step_is_scaled_noise() {
    let p = EdmParams::default();
    let dit = Dit::<f64>::new(DitConfig::toy(2, 4), 2).unwrap();
    let model = ConsistencyModel::new(&dit, CondBatch::unconditional(3), &p);
    let mut a = ChaCha8Rng::seed_from_u64(7);
    let mut b = ChaCha8Rng::seed_from_u64(7);
    let out = one_step_sample(&model, &[3, 4, 2], &mut a).unwrap();
    let z = Tensor::randn(&[3, 4, 2], p.sigma_max, &mut b);
    let (cs, _) = boundary_coefficients(p.sigma_max, &p).unwrap();
    assert_eq!(out, z.scale(cs));
    assert!(out.data().iter().all(|v| v.abs() < 0.05));
}

#[test]
fn one_step_equals_single_step_multistep() {
    let p = EdmParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut dit = Dit::<f64>::new(DitConfig::toy(2, 4), 3).unwrap();
    dit.store_mut().randomize(0.1, &mut rng);
    let model = ConsistencyModel::new(&dit, CondBatch::unconditional(2), &p);
    let a = one_step_sample(&model, &[2, 4, 2], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = multistep_sample(&model, &[2, 4, 2], 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
    let c = multistep_sample(&model, &[2, 4, 2], 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let d = multistep_sample(&model, &[2, 4, 2], 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(c, d);
    assert_eq!(model.calls(), 1 + 1 + 5 + 5);
}

#[test]
fn pseudo_huber_quadratic_regime() {
    let c = 0.01f64;
    let r = c / 100.0;
    let d = pseudo_huber(&[r, 0.0], &[0.0, 0.0], c);
    assert!((d - r * r / (2.0 * c)).abs() / d < 1e-4);
}

/// Loss of a short consistency run on unit Gaussian data, averaged over two windows.
fn loss_ratio(seed: u64, steps: usize) -> (f64, bool, Vec<Tensor<f32>>) {
    let p = EdmParams::default();
    let mut net = Dit::<f32>::new(DitConfig::toy(2, 4), seed).unwrap();
    let mut sched = TrainSchedule::new(steps);
    sched.base_lr = 1e-3;
    sched.warmup_steps = steps / 20;
    let mut trainer = Trainer::new(&net, sched).unwrap();
    let cs = ConsistencySchedule::new(steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log = train_consistency(&mut net, &mut trainer, &cs, &p, steps, &mut rng, |r| {
        Ok((gaussian_batch(1.0, 64, 4, 2, r), CondBatch::unconditional(64)))
    })
    .unwrap();
    let early = log[90..110].iter().map(|s| s.loss).sum::<f64>() / 20.0;
    let late = log[steps - 20..].iter().map(|s| s.loss).sum::<f64>() / 20.0;
    let model = ConsistencyModel::new(&net, CondBatch::unconditional(500), &p);
    let trace = multistep_trace(&model, &[500, 4, 2], 5, &mut rng).unwrap();
    (early / late, log.iter().all(|s| s.teacher_untouched), trace)
}

#[test]
fn training_reduces_loss_and_never_touches_teacher() {
    let mut ratios = Vec::new();
    for seed in 0..3 {
        let (ratio, untouched, trace) = loss_ratio(seed, 1500);
        assert!(untouched, "teacher received gradient");
        for est in &trace {
            assert!(est.is_finite());
            for c in 0..2 {
                let vals: Vec<f64> = est.data().iter().skip(c).step_by(2).map(|&v| v as f64).collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
                assert!((0.2..=5.0).contains(&sd), "channel {c} std {sd}");
            }
        }
        ratios.push(ratio);
    }
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[1] >= 10.0, "median ratio {}", ratios[1]);
}

#[test]
fn boundary_rejects_sigma_below_min() {
    let p = EdmParams::default();
    let x = Tensor::from_vec(vec![1.0f64]);
    assert!(consistency_fn(&x, &x, 0.001, &p).is_err());
}

proptest! {
    #[test]
    fn gap_is_log_linear_and_decreasing(total in 3usize..10_000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let s = ConsistencySchedule::new(total);
        let (k1, k3) = ((a.min(b) * total as f64) as usize, (a.max(b) * total as f64) as usize);
        prop_assume!(k3 >= k1 + 2);
        let k2 = (k1 + k3) / 2;
        let (g1, g2, g3) = (gap_at(&s, k1).ln(), gap_at(&s, k2).ln(), gap_at(&s, k3).ln());
        prop_assert!(g1 > g2 && g2 > g3);
        let slope = (g3 - g1) / (k3 - k1) as f64;
        prop_assert!((g1 + slope * (k2 - k1) as f64 - g2).abs() < 1e-9);
    }

    #[test]
    fn boundary_holds_for_any_raw_output(raw in prop::collection::vec(-1e6f64..1e6, 4), x in prop::collection::vec(-10.0f64..10.0, 4)) {
        let p = EdmParams::default();
        let x = Tensor::from_vec(x);
        let out = consistency_fn(&Tensor::from_vec(raw), &x, p.sigma_min, &p).unwrap();
        prop_assert_eq!(out, x);
    }
}
