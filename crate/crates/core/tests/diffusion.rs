use proptest::prelude::*;
use shapeedit_core::diffusion::{
    editing_loss, make_schedule, normal_like, raster_to_tensor, sample, source_trajectory, tensor_to_raster,
    BlendPolicy, KeepSide, NoiseSchedule, SamplerMode, SamplerSettings, ScheduleKind,
};
use shapeedit_core::instruction::PAD;
use shapeedit_core::microworld::{render, sample_scene, AspectBucket, Mask};
use shapeedit_core::Result;
use shapeedit_numerics::{SeededRng, Tensor};

fn scene_tensor(seed: u64, bucket: AspectBucket) -> Tensor<f64> {
    raster_to_tensor(&render(&sample_scene(seed, bucket).unwrap()))
}

/// Denoiser that knows the clean image and returns the exact noise.
fn oracle(x0: Tensor<f64>, sched: NoiseSchedule) -> impl FnMut(&Tensor<f64>, &Tensor<f64>, &[usize], usize) -> Result<Tensor<f64>> {
    move |x, _, _, t| {
        let ab = sched.alpha_bar_at(t);
        let data = x.data().iter().zip(x0.data()).map(|(&xv, &x0v)| (xv - ab.sqrt() * x0v) / (1.0 - ab).sqrt()).collect();
        Ok(Tensor::new(x.shape().to_vec(), data)?)
    }
}

fn zero_model(x: &Tensor<f64>, _: &Tensor<f64>, _: &[usize], _: usize) -> Result<Tensor<f64>> {
    Ok(Tensor::zeros(x.shape()))
}

#[test]
fn zero_lambda_contributes_nothing_and_skips_the_model() {
    let sched = make_schedule(ScheduleKind::Linear, 100).unwrap();
    let x = scene_tensor(1, AspectBucket::Square);
    let eps = normal_like(x.shape(), &mut SeededRng::new(0));
    let called = std::cell::Cell::new(false);
    let model = |x: &Tensor<f64>, _: &Tensor<f64>, _: &[usize], _: usize| {
        called.set(true);
        Ok(Tensor::full(x.shape(), 1e6))
    };
    assert_eq!(editing_loss(model, &x, &x, &[], 50, &eps, &sched, 1.0, 0.0).unwrap(), 0.0);
    assert!(!called.get());
    assert!(editing_loss(zero_model, &x, &x, &[], 50, &eps, &sched, 1.0, 0.5).is_err());
}

#[test]
fn exact_noise_oracle_has_zero_loss_and_zero_model_has_unit_loss() {
    let sched = make_schedule(ScheduleKind::Cosine, 200).unwrap();
    let x0 = scene_tensor(2, AspectBucket::Square);
    assert!(x0.numel() >= 3072);
    let eps = normal_like(x0.shape(), &mut SeededRng::new(7));
    let exact = editing_loss(oracle(x0.clone(), sched.clone()), &x0, &x0, &[], 120, &eps, &sched, 1.0, 1.0).unwrap();
    assert!(exact < 1e-20, "{exact}");
    // 64x64x3 is not a bucket but the loss does not care about buckets.
    let big: Tensor<f64> = normal_like(&[64, 64, 3], &mut SeededRng::new(3));
    let zero = editing_loss(zero_model, &big, &big, &[], 10, &big, &sched, 1.0, 1.0);
    let mean_sq = big.data().iter().map(|v| v * v).sum::<f64>() / big.numel() as f64;
    assert!((zero.unwrap() - mean_sq).abs() < 1e-12);
    assert!((mean_sq - 1.0).abs() < 0.05);
}

fn settings(steps: usize, seed: u64) -> SamplerSettings {
    SamplerSettings { steps, mode: SamplerMode::Deterministic, guidance_scale: 1.0, seed }
}

#[test]
fn deterministic_sampler_with_exact_noise_recovers_the_image() {
    for (t_max, steps) in [(1000, 50), (100, 10), (50, 50)] {
        let sched = make_schedule(ScheduleKind::Linear, t_max).unwrap();
        let x0 = scene_tensor(5, AspectBucket::Landscape16x9);
        let mut m = oracle(x0.clone(), sched.clone());
        let out = sample(&mut m, &x0, &[0; 16], &sched, &settings(steps, 3), None).unwrap();
        assert!(out.latent.max_abs_diff(&x0) < 1e-6, "T={t_max}: {}", out.latent.max_abs_diff(&x0));
        assert_eq!(out.raster.dims(), tensor_to_raster(&x0).unwrap().dims());
    }
}

#[test]
fn sampling_is_reproducible_and_seed_sensitive() {
    let sched = make_schedule(ScheduleKind::Linear, 100).unwrap();
    let src = scene_tensor(6, AspectBucket::Portrait3x4);
    let run = |mode: SamplerMode, seed: u64| {
        let mut m = |x: &Tensor<f64>, _: &Tensor<f64>, _: &[usize], _: usize| Ok(x.map(|v| 0.3 * v));
        sample(&mut m, &src, &[0; 16], &sched, &SamplerSettings { mode, ..settings(20, seed) }, None).unwrap().latent
    };
    for mode in [SamplerMode::Deterministic, SamplerMode::Ancestral] {
        assert_eq!(run(mode, 4), run(mode, 4));
        assert_ne!(run(mode, 4), run(mode, 5));
    }
}

#[test]
fn guidance_calls_the_model_twice_per_step_with_padding_for_uncond() {
    let sched = make_schedule(ScheduleKind::Linear, 100).unwrap();
    let src = scene_tensor(6, AspectBucket::Square);
    let mut seen = Vec::new();
    let mut m = |x: &Tensor<f64>, _: &Tensor<f64>, toks: &[usize], _: usize| {
        seen.push(toks.to_vec());
        Ok(Tensor::zeros(x.shape()))
    };
    let toks = [5usize; 16];
    sample(&mut m, &src, &toks, &sched, &SamplerSettings { guidance_scale: 3.0, ..settings(10, 0) }, None).unwrap();
    assert_eq!(seen.len(), 20);
    assert_eq!(seen.iter().filter(|t| t.iter().all(|&v| v == PAD)).count(), 10);
}

#[test]
fn non_finite_model_output_is_an_error() {
    let sched = make_schedule(ScheduleKind::Linear, 100).unwrap();
    let src = scene_tensor(6, AspectBucket::Square);
    let mut m = |x: &Tensor<f64>, _: &Tensor<f64>, _: &[usize], t: usize| {
        let v = if t < 50 { f64::INFINITY } else { 0.0 };
        Ok(Tensor::full(x.shape(), v))
    };
    assert!(sample(&mut m, &src, &[0; 16], &sched, &settings(10, 0), None).is_err());
}

fn blended(mask: Mask, keep_side: KeepSide, tau: f64, steps: usize) -> (Tensor<f64>, Vec<usize>, Tensor<f64>) {
    let sched = make_schedule(ScheduleKind::Linear, 100).unwrap();
    let src = scene_tensor(8, AspectBucket::Square);
    let traj = source_trajectory(&src, &sched, steps, 11).unwrap();
    let mut m = |x: &Tensor<f64>, _: &Tensor<f64>, _: &[usize], _: usize| Ok(x.map(|v| 0.5 * v));
    let policy = BlendPolicy { mask, keep_side, tau };
    let out = sample(&mut m, &src, &[0; 16], &sched, &settings(steps, 2), Some((&policy, &traj))).unwrap();
    (out.latent, out.blended_steps, src)
}

#[test]
fn full_mask_from_source_reproduces_the_source() {
    let (latent, steps, src) = blended(Mask::ones(32, 32), KeepSide::InsideFromSrc, 1.0, 10);
    assert_eq!(steps, (0..10).collect::<Vec<_>>());
    assert!(latent.max_abs_diff(&src) <= 1e-6);
}

#[test]
fn empty_mask_is_bit_identical_to_no_blend() {
    let (latent, _, src) = blended(Mask::zeros(32, 32), KeepSide::InsideFromSrc, 1.0, 10);
    let sched = make_schedule(ScheduleKind::Linear, 100).unwrap();
    let mut m = |x: &Tensor<f64>, _: &Tensor<f64>, _: &[usize], _: usize| Ok(x.map(|v| 0.5 * v));
    let plain = sample(&mut m, &src, &[0; 16], &sched, &settings(10, 2), None).unwrap();
    assert_eq!(latent, plain.latent);
}

#[test]
fn tau_limits_blending_to_the_leading_steps() {
    let (_, steps, _) = blended(Mask::ones(32, 32), KeepSide::InsideFromEdit, 0.7, 10);
    assert_eq!(steps, (0..7).collect::<Vec<_>>());
}

#[test]
fn blend_rejects_mismatched_masks() {
    let sched = make_schedule(ScheduleKind::Linear, 100).unwrap();
    let src = scene_tensor(8, AspectBucket::Square);
    let traj = source_trajectory(&src, &sched, 10, 0).unwrap();
    let policy = BlendPolicy { mask: Mask::ones(28, 36), keep_side: KeepSide::InsideFromSrc, tau: 1.0 };
    assert!(sample(&mut zero_model, &src, &[0; 16], &sched, &settings(10, 0), Some((&policy, &traj))).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn blend_locality_inside_the_mask(seed in any::<u64>(), keep_inside in any::<bool>()) {
        let mut rng = SeededRng::new(seed);
        let bits: Vec<bool> = (0..32 * 32).map(|_| rng.bernoulli(0.4)).collect();
        let mask = Mask::from_fn(32, 32, |x, y| bits[y * 32 + x]);
        let side = if keep_inside { KeepSide::InsideFromSrc } else { KeepSide::InsideFromEdit };
        let (latent, _, src) = blended(mask.clone(), side, 1.0, 8);
        for p in 0..32 * 32 {
            if mask.at(p) == keep_inside {
                for c in 0..3 {
                    prop_assert!((latent.data()[p * 3 + c] - src.data()[p * 3 + c]).abs() <= 1e-6);
                }
            }
        }
    }
}
