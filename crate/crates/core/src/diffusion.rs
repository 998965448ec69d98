//! Noise schedules, the closed-form forward process, the ε-prediction editing
//! loss, and deterministic / ancestral samplers with optional masked blending.
//!
//! Images live in "data space": `2·pixel − 1`, shape `[H, W, 3]`.

use serde::{Deserialize, Serialize};
use shapeedit_numerics::{Scalar, SeededRng, Tensor};

use crate::error::{Error, Result};
use crate::microworld::{AspectBucket, Mask, Raster};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// `beta[t-1]` and `alpha_bar[t-1]` hold β_t and ᾱ_t for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

const MAX_BETA: f64 = 0.999;

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// ᾱ_t with the convention ᾱ_0 = 1.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }
}

/// Linear ramps β from 1e-4 to 0.02 at T = 1000; other T rescale both
/// endpoints by 1000/T so the total noise injected stays comparable (capped
/// below 1). Cosine follows the squared-cosine ᾱ curve with offset 0.008.
pub fn make_schedule(kind: ScheduleKind, t_max: usize) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(Error::Invalid(format!("schedule needs T >= 2, got {t_max}")));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            let scale = 1000.0 / t_max as f64;
            let (lo, hi) = (1e-4 * scale, 0.02 * scale);
            (0..t_max)
                .map(|i| (lo + (hi - lo) * i as f64 / (t_max - 1) as f64).min(MAX_BETA))
                .collect()
        }
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| (((t / t_max as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=t_max).map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, MAX_BETA)).collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { kind, beta, alpha_bar })
}

fn check_t(sched: &NoiseSchedule, t: usize) -> Result<()> {
    if t == 0 || t > sched.steps() {
        return Err(Error::Invalid(format!("timestep {t} outside 1..={}", sched.steps())));
    }
    Ok(())
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
pub fn q_sample<S: Scalar>(x0: &Tensor<S>, t: usize, eps: &Tensor<S>, sched: &NoiseSchedule) -> Result<Tensor<S>> {
    check_t(sched, t)?;
    q_sample_ab(x0, sched.alpha_bar_at(t), eps)
}

/// Forward marginal for an explicit ᾱ value.
pub fn q_sample_ab<S: Scalar>(x0: &Tensor<S>, alpha_bar: f64, eps: &Tensor<S>) -> Result<Tensor<S>> {
    if x0.shape() != eps.shape() {
        return Err(Error::Invalid(format!("q_sample shapes {:?} vs {:?}", x0.shape(), eps.shape())));
    }
    let a = S::from_f64(alpha_bar.sqrt());
    let b = S::from_f64((1.0 - alpha_bar).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

/// One step of the Markov kernel q(x_t | x_{t-1}).
pub fn q_step<S: Scalar>(x_prev: &Tensor<S>, t: usize, eps: &Tensor<S>, sched: &NoiseSchedule) -> Result<Tensor<S>> {
    check_t(sched, t)?;
    q_sample_ab(x_prev, 1.0 - sched.beta_at(t), eps)
}

/// `λ · w · mean((eps − model(x_t, x_src, text, t))²)` with `x_t` the noised target.
/// A zero λ short-circuits without calling the model.
#[allow(clippy::too_many_arguments)]
pub fn editing_loss<S, F>(
    model_fn: F,
    x_src: &Tensor<S>,
    x_tgt: &Tensor<S>,
    text_tokens: &[usize],
    t: usize,
    eps: &Tensor<S>,
    sched: &NoiseSchedule,
    w: f64,
    lambda_w: f64,
) -> Result<f64>
where
    S: Scalar,
    F: FnOnce(&Tensor<S>, &Tensor<S>, &[usize], usize) -> Result<Tensor<S>>,
{
    if x_src.shape() != x_tgt.shape() {
        return Err(Error::Invalid(format!("source {:?} vs target {:?}", x_src.shape(), x_tgt.shape())));
    }
    if lambda_w != 0.0 && lambda_w != 1.0 {
        return Err(Error::Invalid(format!("importance weight must be 0 or 1, got {lambda_w}")));
    }
    if lambda_w == 0.0 {
        return Ok(0.0);
    }
    let x_t = q_sample(x_tgt, t, eps, sched)?;
    let pred = model_fn(&x_t, x_src, text_tokens, t)?;
    if pred.shape() != eps.shape() {
        return Err(Error::Invalid(format!("prediction {:?} vs noise {:?}", pred.shape(), eps.shape())));
    }
    let mse = pred.data().iter().zip(eps.data()).map(|(&p, &e)| (e - p).as_f64().powi(2)).sum::<f64>()
        / eps.numel() as f64;
    Ok(lambda_w * w * mse)
}

/// `uncond + scale · (cond − uncond)`.
pub fn cfg_combine<S: Scalar>(uncond: &Tensor<S>, cond: &Tensor<S>, scale: f64) -> Result<Tensor<S>> {
    if uncond.shape() != cond.shape() {
        return Err(Error::Invalid(format!("cfg shapes {:?} vs {:?}", uncond.shape(), cond.shape())));
    }
    let s = S::from_f64(scale);
    let data = uncond.data().iter().zip(cond.data()).map(|(&u, &c)| u + s * (c - u)).collect();
    Ok(Tensor::new(uncond.shape().to_vec(), data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Ancestral,
    Deterministic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepSide {
    /// Inside the mask the running latent is replaced by the source trajectory.
    InsideFromSrc,
    /// Inside the mask the edit is kept; outside it the source trajectory wins.
    InsideFromEdit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlendPolicy {
    pub mask: Mask,
    pub keep_side: KeepSide,
    pub tau: f64,
}

impl BlendPolicy {
    /// Number of leading reverse steps that get blended.
    pub fn blended_steps(&self, steps: usize) -> usize {
        ((self.tau * steps as f64) - 1e-9).ceil().max(0.0) as usize
    }
}

/// Reverse-process timesteps, from high noise to low: `steps` evenly spaced
/// values in `(0, T]`, starting at `T`.
pub fn sampling_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::Invalid(format!("sampler steps {steps} must be in 1..={t_max}")));
    }
    let mut ts: Vec<usize> = (0..steps).map(|i| t_max - (i * t_max) / steps).collect();
    ts.dedup();
    Ok(ts)
}

/// Source latents aligned with the reverse steps: entry `i` sits at the noise
/// level reached after reverse step `i`, so the last entry is the clean source.
pub fn source_trajectory<S: Scalar>(
    x_src: &Tensor<S>,
    sched: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Vec<Tensor<S>>> {
    let ts = sampling_timesteps(sched.steps(), steps)?;
    let mut rng = SeededRng::labeled(seed, "source-trajectory");
    let mut out = Vec::with_capacity(ts.len());
    for i in 0..ts.len() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        if t_prev == 0 {
            out.push(x_src.clone());
        } else {
            let eps = normal_like(x_src.shape(), &mut rng);
            out.push(q_sample(x_src, t_prev, &eps, sched)?);
        }
    }
    Ok(out)
}

pub fn normal_like<S: Scalar>(shape: &[usize], rng: &mut SeededRng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| S::from_f64(rng.normal())).collect()).expect("finite normals")
}

#[derive(Clone, Debug)]
pub struct SamplerSettings {
    pub steps: usize,
    pub mode: SamplerMode,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self { steps: 50, mode: SamplerMode::Deterministic, guidance_scale: 1.0, seed: 0 }
    }
}

pub struct SampleOutput<S: Scalar> {
    pub raster: Raster,
    /// Final latent in data space, before clamping.
    pub latent: Tensor<S>,
    /// Indices of reverse steps whose latent was blended.
    pub blended_steps: Vec<usize>,
}

/// Predicts ε for `(x_t, x_src, text, t)`. Unconditional calls receive an
/// all-padding token sequence.
pub trait Denoiser<S: Scalar> {
    fn predict(&mut self, x_t: &Tensor<S>, x_src: &Tensor<S>, tokens: &[usize], t: usize) -> Result<Tensor<S>>;
}

impl<S: Scalar, F> Denoiser<S> for F
where
    F: FnMut(&Tensor<S>, &Tensor<S>, &[usize], usize) -> Result<Tensor<S>>,
{
    fn predict(&mut self, x_t: &Tensor<S>, x_src: &Tensor<S>, tokens: &[usize], t: usize) -> Result<Tensor<S>> {
        self(x_t, x_src, tokens, t)
    }
}

/// Reverse diffusion from pure noise. With `guidance_scale == 1` only the
/// conditional prediction is evaluated.
pub fn sample<S: Scalar, D: Denoiser<S>>(
    model: &mut D,
    x_src: &Tensor<S>,
    text_tokens: &[usize],
    sched: &NoiseSchedule,
    settings: &SamplerSettings,
    blend: Option<(&BlendPolicy, &[Tensor<S>])>,
) -> Result<SampleOutput<S>> {
    let shape = x_src.shape().to_vec();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Invalid(format!("sampler expects [H, W, 3], got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let bucket = AspectBucket::ALL
        .into_iter()
        .find(|b| b.dims() == (w, h))
        .ok_or_else(|| Error::Invalid(format!("{w}x{h} is not a bucket size")))?;
    let ts = sampling_timesteps(sched.steps(), settings.steps)?;
    if let Some((policy, traj)) = blend {
        if policy.mask.dims() != (w, h) {
            return Err(Error::DimMismatch { left: policy.mask.dims(), right: (w, h) });
        }
        if !(policy.tau > 0.0 && policy.tau <= 1.0) {
            return Err(Error::Invalid(format!("tau {} outside (0, 1]", policy.tau)));
        }
        if traj.len() != ts.len() || traj.iter().any(|x| x.shape() != shape.as_slice()) {
            return Err(Error::Invalid("source trajectory does not match the sampler steps".into()));
        }
    }

    let mut rng = SeededRng::labeled(settings.seed, "sampler");
    let mut x: Tensor<S> = normal_like(&shape, &mut rng);
    let uncond_tokens = vec![crate::instruction::PAD; text_tokens.len()];
    let mut blended_steps = Vec::new();

    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let cond = model.predict(&x, x_src, text_tokens, t)?;
        let eps_hat = if settings.guidance_scale == 1.0 {
            cond
        } else {
            let uncond = model.predict(&x, x_src, &uncond_tokens, t)?;
            cfg_combine(&uncond, &cond, settings.guidance_scale)?
        };
        if eps_hat.shape() != shape.as_slice() || !eps_hat.all_finite() {
            return Err(Error::Invalid(format!("model output invalid at t={t}")));
        }
        let ab = sched.alpha_bar_at(t);
        let ab_prev = sched.alpha_bar_at(t_prev);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let sigma = match settings.mode {
            SamplerMode::Deterministic => 0.0,
            SamplerMode::Ancestral => ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0).sqrt(),
        };
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let noise: Option<Tensor<S>> = (sigma > 0.0).then(|| normal_like(&shape, &mut rng));
        let mut next = Vec::with_capacity(x.numel());
        for (j, (&xv, &ev)) in x.data().iter().zip(eps_hat.data()).enumerate() {
            let (xv, ev) = (xv.as_f64(), ev.as_f64());
            let x0 = ((xv - sb * ev) / sa).clamp(-1.0, 1.0);
            let mut v = ab_prev.sqrt() * x0 + dir * ev;
            if let Some(z) = &noise {
                v += sigma * z.data()[j].as_f64();
            }
            next.push(S::from_f64(v));
        }
        let mut next = Tensor::new(shape.clone(), next)?;

        if let Some((policy, traj)) = blend {
            if i < policy.blended_steps(ts.len()) {
                let src = traj[i].data();
                let data = next.data_mut();
                for p in 0..h * w {
                    let inside = policy.mask.at(p);
                    let take_src = match policy.keep_side {
                        KeepSide::InsideFromSrc => inside,
                        KeepSide::InsideFromEdit => !inside,
                    };
                    if take_src {
                        data[p * 3..p * 3 + 3].copy_from_slice(&src[p * 3..p * 3 + 3]);
                    }
                }
                blended_steps.push(i);
            }
        }
        x = next;
    }

    let pixels = x.data().iter().map(|&v| ((v.as_f64() + 1.0) / 2.0) as f32).collect();
    Ok(SampleOutput { raster: Raster::from_data(bucket, pixels)?, latent: x, blended_steps })
}

pub fn raster_to_tensor<S: Scalar>(r: &Raster) -> Tensor<S> {
    let (w, h) = r.dims();
    Tensor::new(vec![h, w, 3], r.data().iter().map(|&v| S::from_f64(2.0 * v as f64 - 1.0)).collect())
        .expect("raster values are finite")
}

pub fn tensor_to_raster<S: Scalar>(t: &Tensor<S>) -> Result<Raster> {
    let shape = t.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Invalid(format!("expected [H, W, 3], got {shape:?}")));
    }
    let bucket = AspectBucket::ALL
        .into_iter()
        .find(|b| b.dims() == (shape[1], shape[0]))
        .ok_or_else(|| Error::Invalid(format!("{shape:?} is not a bucket size")))?;
    Raster::from_data(bucket, t.data().iter().map(|&v| ((v.as_f64() + 1.0) / 2.0) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_endpoints_at_t1000() {
        let s = make_schedule(ScheduleKind::Linear, 1000).unwrap();
        assert!((s.beta_at(1) - 1e-4).abs() < 1e-15);
        assert!((s.beta_at(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn schedule_invariants() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for t_max in [2, 10, 50, 200, 1000] {
                let s = make_schedule(kind, t_max).unwrap();
                assert!(s.beta.iter().all(|&b| b > 0.0 && b < 1.0));
                assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
                if t_max >= 10 {
                    assert!(*s.alpha_bar.last().unwrap() < 0.05, "{kind:?} T={t_max}");
                }
            }
        }
        assert!(make_schedule(ScheduleKind::Linear, 1).is_err());
    }

    #[test]
    fn alpha_bar_matches_independent_product() {
        let s = make_schedule(ScheduleKind::Linear, 10).unwrap();
        let oracle: f64 = (1..=5).map(|t| 1.0 - s.beta_at(t)).product();
        assert!((s.alpha_bar_at(5) - oracle).abs() < 1e-15);
    }

    #[test]
    fn q_sample_closed_form() {
        let x0 = Tensor::<f64>::from_fn(&[2, 2], |i| i as f64 - 1.5);
        let zeros = Tensor::zeros(&[2, 2]);
        let xt = q_sample_ab(&x0, 0.25, &zeros).unwrap();
        for (a, b) in xt.data().iter().zip(x0.data()) {
            assert!((a - 0.5 * b).abs() < 1e-15);
        }
        assert_eq!(q_sample_ab(&x0, 1.0, &Tensor::ones(&[2, 2])).unwrap(), x0);
        let s = make_schedule(ScheduleKind::Linear, 10).unwrap();
        assert!(q_sample(&x0, 0, &zeros, &s).is_err());
        assert!(q_sample(&x0, 11, &zeros, &s).is_err());
    }

    #[test]
    fn cfg_identities() {
        let u = Tensor::<f64>::from_fn(&[4], |i| i as f64);
        let c = Tensor::<f64>::from_fn(&[4], |i| 10.0 - i as f64);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        for s in [0.5, 3.0, 7.5] {
            assert_eq!(cfg_combine(&c, &c, s).unwrap(), c);
        }
    }

    #[test]
    fn timesteps_are_strictly_decreasing() {
        let ts = sampling_timesteps(200, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 200);
        assert!(ts.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(*ts.last().unwrap(), 4);
        assert_eq!(sampling_timesteps(10, 10).unwrap(), (1..=10).rev().collect::<Vec<_>>());
        assert!(sampling_timesteps(10, 11).is_err());
    }

    #[test]
    fn blend_step_count() {
        let p = BlendPolicy { mask: Mask::zeros(1, 1), keep_side: KeepSide::InsideFromSrc, tau: 0.7 };
        assert_eq!(p.blended_steps(10), 7);
        assert_eq!(BlendPolicy { tau: 1.0, ..p.clone() }.blended_steps(50), 50);
        assert_eq!(BlendPolicy { tau: 0.01, ..p }.blended_steps(50), 1);
    }
}
