//! Flat config keys. Every key can be set in the TOML file or as `--key`
//! (underscores become hyphens); flags win over the file.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;
use shapeedit_core::diffusion::{SamplerMode, ScheduleKind};
use shapeedit_core::editnet::Variant;
use shapeedit_core::evalbench::{AblationArm, AblationConfig, EvalSettings};
use shapeedit_core::pipeline::PipelineConfig;
use shapeedit_core::scoring::{ExternalScorerConfig, FilterStatistic, ScoreOptions, ScorerEndpoint};
use shapeedit_core::specialists::{CorruptionConfig, GenConfig};
use shapeedit_core::training::TrainConfig;

macro_rules! keys {
    ($( $(#[$meta:meta])* $name:ident : $ty:ty ),* $(,)?) => {
        #[derive(Args, Deserialize, Debug, Clone, Default)]
        #[serde(deny_unknown_fields)]
        pub struct Keys {
            $( $(#[$meta])* #[arg(long)] pub $name: Option<$ty>, )*
        }

        impl Keys {
            #[cfg(test)]
            pub const NAMES: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Fields set in `top` replace those in `self`.
            pub fn overlay(self, top: Keys) -> Keys {
                Keys { $( $name: top.$name.or(self.$name), )* }
            }
        }
    };
}

keys! {
    /// Directory that receives every artifact [default: out]
    out_root: PathBuf,
    /// Seed for data generation, training and sampling [default: 0]
    seed: u64,
    /// Worker threads; 0 means all available cores [default: 1]
    workers: usize,

    /// Records to generate [default: 512]
    n_records: usize,
    /// Probability that a generated record is corrupted [default: 0.3]
    p_corrupt: f64,

    /// Scorer: oracle or external [default: oracle]
    #[arg(visible_alias = "scorer")]
    #[serde(alias = "scorer")]
    endpoint: String,
    /// External scorer URL
    scorer_url: String,
    /// Environment variable that holds the scorer bearer token [default: SHAPEEDIT_SCORER_TOKEN]
    scorer_token_env: String,
    /// Model name sent to the external scorer
    scorer_model: String,
    /// Concurrent scorer requests [default: 4]
    scorer_max_in_flight: usize,
    /// Retries per scorer request [default: 3]
    scorer_max_retries: u32,
    /// First retry delay in milliseconds, doubled per retry [default: 1000]
    scorer_backoff_ms: u64,
    /// Scorer request timeout in milliseconds [default: 30000]
    scorer_timeout_ms: u64,
    /// Keep threshold on the 0-10 scale [default: 9]
    threshold: f64,
    /// Filter statistic: overall or sc_only [default: overall]
    statistic: String,
    /// Re-score records that already carry scores [default: false]
    rescore: bool,

    /// Model variant: base, editnet, controlnet, controlnet_textcontrol, channel_concat [default: editnet]
    variant: String,
    /// Transformer layers [default: 6]
    layers: usize,
    /// Hidden width [default: 96]
    hidden: usize,
    /// Attention heads [default: 4]
    heads: usize,
    /// Editing training steps [default: 2000]
    steps: usize,
    /// Batch size [default: 8]
    batch_size: usize,
    /// Adam learning rate [default: 0.001]
    lr: f64,
    /// Adam beta1 [default: 0.9]
    beta1: f64,
    /// Adam beta2 [default: 0.999]
    beta2: f64,
    /// Adam epsilon [default: 1e-8]
    adam_eps: f64,
    /// Noise schedule: linear or cosine [default: linear]
    schedule: String,
    /// Diffusion steps T [default: 1000]
    t_max: usize,
    /// Probability of dropping the instruction during training [default: 0.1]
    text_dropout: f64,
    /// Constant loss weight [default: 1]
    loss_weight: f64,
    /// Comma-separated per-bucket batch weights (7 values, bucket-table order)
    bucket_weights: String,
    /// Sample tasks uniformly [default: false]
    uniform_per_task: bool,
    /// Steps between intermediate checkpoints, 0 for none [default: 0]
    checkpoint_every: usize,
    /// Caption pretraining steps for the base model [default: 500]
    pretrain_steps: usize,

    /// Seed of the evaluation bench [default: 1234]
    bench_seed: u64,
    /// Scenes in the evaluation bench [default: 62]
    bench_scenes: usize,
    /// Reverse sampler steps [default: 50]
    sample_steps: usize,
    /// Sampler: deterministic or ancestral [default: deterministic]
    sampler: String,
    /// Classifier-free guidance scale [default: 1]
    guidance_scale: f64,
    /// Write one PPM per bench entry during eval [default: true]
    write_samples: bool,

    /// Ablation arms: sampling, architecture or all [default: sampling]
    ablate_arms: String,
    /// Comma-separated ablation seeds [default: 0,1,2]
    ablate_seeds: String,
    /// Training records per ablation arm [default: 512]
    ablate_n_train: usize,

    /// Records per task in the distillation export [default: 64]
    distill_per_task: usize,
}

/// A bad value or config file; reported as a usage error.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn load_file(path: &Path) -> Result<Keys, UsageError> {
    let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("--config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| UsageError(format!("--config {}: {e}", path.display())))
}

fn enum_value<T: serde::de::DeserializeOwned>(key: &str, v: &str) -> Result<T, UsageError> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| UsageError(format!("--{}: unknown value `{v}`", key.replace('_', "-"))))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, UsageError> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| UsageError(format!("--{}: cannot parse `{s}`", key.replace('_', "-")))))
        .collect()
}

pub struct Resolved {
    pub pipeline: PipelineConfig,
    pub ablation: AblationConfig,
    pub distill_per_task: usize,
}

pub fn resolve(k: &Keys) -> Result<Resolved, UsageError> {
    let seed = k.seed.unwrap_or(0);
    let workers = match k.workers.unwrap_or(1) {
        0 => shapeedit_core::par::available_workers(),
        n => n,
    };

    let mut corruption = CorruptionConfig::default();
    if let Some(p) = k.p_corrupt {
        corruption.p_corrupt = p;
    }
    let gen = GenConfig { n_records: k.n_records.unwrap_or(512), seed, corruption };

    let endpoint = match k.endpoint.as_deref().unwrap_or("oracle") {
        "oracle" => ScorerEndpoint::Oracle,
        "external" => {
            let d = ExternalScorerConfig::default();
            ScorerEndpoint::External(ExternalScorerConfig {
                base_url: k.scorer_url.clone().unwrap_or(d.base_url),
                token_env: k.scorer_token_env.clone().unwrap_or(d.token_env),
                model: k.scorer_model.clone().unwrap_or(d.model),
                max_in_flight: k.scorer_max_in_flight.unwrap_or(d.max_in_flight),
                max_retries: k.scorer_max_retries.unwrap_or(d.max_retries),
                backoff_base_ms: k.scorer_backoff_ms.unwrap_or(d.backoff_base_ms),
                timeout_ms: k.scorer_timeout_ms.unwrap_or(d.timeout_ms),
            })
        }
        other => return Err(UsageError(format!("--endpoint: unknown value `{other}` (oracle or external)"))),
    };
    let sd = ScoreOptions::default();
    let score = ScoreOptions {
        threshold: k.threshold.unwrap_or(sd.threshold),
        statistic: match &k.statistic {
            Some(s) => enum_value::<FilterStatistic>("statistic", s)?,
            None => sd.statistic,
        },
        rescore: k.rescore.unwrap_or(false),
    };

    let td = TrainConfig::default();
    let train = TrainConfig {
        variant: match &k.variant {
            Some(v) => Variant::parse(v).map_err(|_| UsageError(format!("--variant: unknown value `{v}`")))?,
            None => td.variant,
        },
        layers: k.layers.unwrap_or(td.layers),
        hidden: k.hidden.unwrap_or(td.hidden),
        heads: k.heads.unwrap_or(td.heads),
        steps: k.steps.unwrap_or(td.steps),
        batch_size: k.batch_size.unwrap_or(td.batch_size),
        lr: k.lr.unwrap_or(td.lr),
        beta1: k.beta1.unwrap_or(td.beta1),
        beta2: k.beta2.unwrap_or(td.beta2),
        adam_eps: k.adam_eps.unwrap_or(td.adam_eps),
        schedule: match &k.schedule {
            Some(s) => enum_value::<ScheduleKind>("schedule", s)?,
            None => td.schedule,
        },
        t_max: k.t_max.unwrap_or(td.t_max),
        text_dropout: k.text_dropout.unwrap_or(td.text_dropout),
        loss_weight: k.loss_weight.unwrap_or(td.loss_weight),
        seed,
        bucket_weights: match &k.bucket_weights {
            Some(s) => list("bucket_weights", s)?,
            None => td.bucket_weights,
        },
        uniform_per_task: k.uniform_per_task.unwrap_or(td.uniform_per_task),
        checkpoint_every: k.checkpoint_every.unwrap_or(td.checkpoint_every),
        pretrain_steps: k.pretrain_steps.unwrap_or(td.pretrain_steps),
    };
    train.validate().map_err(|e| UsageError(e.to_string()))?;

    let ed = EvalSettings::default();
    let eval = EvalSettings {
        schedule: train.schedule,
        t_max: train.t_max,
        steps: k.sample_steps.unwrap_or(ed.steps),
        mode: match &k.sampler {
            Some(s) => enum_value::<SamplerMode>("sampler", s)?,
            None => ed.mode,
        },
        guidance_scale: k.guidance_scale.unwrap_or(ed.guidance_scale),
        seed,
    };

    let pd = PipelineConfig::default();
    let pipeline = PipelineConfig {
        out_root: k.out_root.clone().unwrap_or(pd.out_root),
        gen,
        endpoint,
        score,
        train: train.clone(),
        bench_seed: k.bench_seed.unwrap_or(pd.bench_seed),
        bench_scenes: k.bench_scenes.unwrap_or(pd.bench_scenes),
        eval: eval.clone(),
        workers,
        write_samples: k.write_samples.unwrap_or(pd.write_samples),
    };

    let ad = AblationConfig::default();
    let arms = match k.ablate_arms.as_deref().unwrap_or("sampling") {
        "sampling" => AblationArm::sampling(),
        "architecture" => AblationArm::architecture(),
        "all" => {
            let mut a = AblationArm::sampling();
            for x in AblationArm::architecture() {
                if !a.contains(&x) {
                    a.push(x);
                }
            }
            a
        }
        other => return Err(UsageError(format!("--ablate-arms: unknown value `{other}`"))),
    };
    let ablation = AblationConfig {
        arms,
        seeds: match &k.ablate_seeds {
            Some(s) => list("ablate_seeds", s)?,
            None => ad.seeds,
        },
        train,
        p_corrupt: pipeline.gen.corruption.p_corrupt,
        n_train: k.ablate_n_train.unwrap_or(ad.n_train),
        bench_seed: pipeline.bench_seed,
        bench_scenes: pipeline.bench_scenes,
        eval,
        threshold: pipeline.score.threshold,
    };
    pipeline.gen.corruption.validate().map_err(|e| UsageError(e.to_string()))?;

    Ok(Resolved { pipeline, ablation, distill_per_task: k.distill_per_task.unwrap_or(64) })
}

/// Joins a relative path onto the output root, refusing anything that
/// would escape it.
pub fn under_root(root: &Path, rel: &Path) -> Result<PathBuf, UsageError> {
    use std::path::Component;
    if rel.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
        return Err(UsageError(format!("output path {} must be relative and stay inside the output root", rel.display())));
    }
    Ok(root.join(rel))
}
