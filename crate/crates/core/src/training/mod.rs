//! Generalist training on λ-weighted specialist data with bucket-homogeneous
//! batches.

mod checkpoint;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use shapeedit_numerics::{AdamConfig, AdamState, Graph, SeededRng, Tensor};

use crate::diffusion::{make_schedule, normal_like, q_sample, raster_to_tensor, NoiseSchedule, ScheduleKind};
use crate::editnet::{bind, forward, init_model, stack, Batch, ForwardOptions, ModelConfig, ModelParams, Variant};
use crate::error::{Error, Result};
use crate::instruction::{tokenize, EditTask, PAD, SEQ_LEN};
use crate::microworld::{AspectBucket, Raster};
use crate::record::EditRecord;

pub use checkpoint::{
    bucket_table_hash, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub schedule: ScheduleKind,
    pub t_max: usize,
    /// Probability of replacing a sample's instruction by padding.
    pub text_dropout: f64,
    /// Constant per-timestep loss weight.
    pub loss_weight: f64,
    pub seed: u64,
    /// Relative per-bucket batch frequencies, in bucket-table order. Empty
    /// means plain shuffled epochs.
    pub bucket_weights: Vec<f64>,
    /// Draw tasks equally often instead of in proportion to their counts.
    pub uniform_per_task: bool,
    /// Steps between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Caption-to-image steps for the base model before editing training.
    pub pretrain_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Editnet,
            layers: 6,
            hidden: 96,
            heads: 4,
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            schedule: ScheduleKind::Linear,
            t_max: 1000,
            text_dropout: 0.1,
            loss_weight: 1.0,
            seed: 0,
            bucket_weights: Vec::new(),
            uniform_per_task: false,
            checkpoint_every: 0,
            pretrain_steps: 500,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { layers: self.layers, hidden: self.hidden, heads: self.heads, variant: self.variant, ..Default::default() }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.text_dropout) {
            return Err(Error::Invalid("text_dropout must lie in [0, 1]".into()));
        }
        if !self.bucket_weights.is_empty() {
            if self.bucket_weights.len() != AspectBucket::ALL.len() {
                return Err(Error::Invalid(format!(
                    "bucket_weights needs {} entries (one per bucket), got {}",
                    AspectBucket::ALL.len(),
                    self.bucket_weights.len()
                )));
            }
            if self.bucket_weights.iter().any(|w| !(*w >= 0.0)) || self.bucket_weights.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Invalid("bucket_weights must be non-negative with a positive sum".into()));
            }
        }
        make_schedule(self.schedule, self.t_max)?;
        AdamState::new(self.adam())?;
        Ok(())
    }
}

/// One training triple in data space.
#[derive(Clone, Debug)]
pub struct Example {
    /// Keys the per-step noise draws, so they do not depend on batch mates.
    pub key: String,
    pub task: Option<EditTask>,
    pub bucket: AspectBucket,
    pub x_src: Tensor<f32>,
    pub x_tgt: Tensor<f32>,
    pub tokens: Vec<usize>,
    pub lambda: f64,
}

impl Example {
    /// Editing triple; λ is the record's weight (unscored counts as 0).
    pub fn from_record(r: &EditRecord) -> Self {
        Self {
            key: r.id.clone(),
            task: Some(r.task()),
            bucket: r.bucket(),
            x_src: raster_to_tensor(&r.src),
            x_tgt: raster_to_tensor(&r.edited),
            tokens: tokenize(&r.instruction.surface_text),
            lambda: r.weight.unwrap_or(0) as f64,
        }
    }

    /// Caption-to-image pair for base pretraining; the source is blank.
    pub fn caption(key: String, image: &Raster, caption: &str) -> Self {
        let x = raster_to_tensor(image);
        Self {
            key,
            task: None,
            bucket: image.bucket(),
            x_src: Tensor::zeros(x.shape()),
            x_tgt: x,
            tokens: tokenize(caption),
            lambda: 1.0,
        }
    }
}

/// Caption pairs from both sides of every record that carries scenes.
pub fn caption_examples(records: &[EditRecord]) -> Vec<Example> {
    let mut out = Vec::new();
    for r in records {
        if let Some(s) = &r.src_scene {
            out.push(Example::caption(format!("{}/src", r.id), &r.src, &s.caption()));
        }
        if let (Some(s), true) = (&r.edited_scene, r.is_clean()) {
            out.push(Example::caption(format!("{}/edited", r.id), &r.edited, &s.caption()));
        }
    }
    out
}

/// One epoch of bucket-homogeneous batches over `buckets[i]`: indices are
/// shuffled within each bucket, cut into batches (the last may be short),
/// and the batch order is shuffled.
pub fn bucketize(buckets: &[AspectBucket], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut rng = SeededRng::labeled(seed, "bucketize");
    let mut batches = Vec::new();
    for b in AspectBucket::ALL {
        let mut idx: Vec<usize> = (0..buckets.len()).filter(|&i| buckets[i] == b).collect();
        rng.shuffle(&mut idx);
        batches.extend(idx.chunks(batch_size).map(|c| c.to_vec()));
    }
    rng.shuffle(&mut batches);
    batches
}

/// Endless batch source over a fixed example list.
pub struct BatchStream {
    buckets: Vec<AspectBucket>,
    tasks: Vec<Option<EditTask>>,
    batch_size: usize,
    seed: u64,
    weights: Vec<f64>,
    uniform_per_task: bool,
    epoch: u64,
    queue: std::collections::VecDeque<Vec<usize>>,
    per_bucket: Vec<(Vec<usize>, usize)>,
    rng: SeededRng,
}

impl BatchStream {
    pub fn new(examples: &[Example], cfg: &TrainConfig) -> Self {
        Self {
            buckets: examples.iter().map(|e| e.bucket).collect(),
            tasks: examples.iter().map(|e| e.task).collect(),
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            weights: cfg.bucket_weights.clone(),
            uniform_per_task: cfg.uniform_per_task,
            epoch: 0,
            queue: Default::default(),
            per_bucket: Vec::new(),
            rng: SeededRng::labeled(cfg.seed, "bucket-mix"),
        }
    }

    /// Indices of one epoch: every example once, or with uniform task
    /// balancing every task padded (by repetition) to the largest task.
    fn epoch_indices(&self, rng: &mut SeededRng) -> Vec<usize> {
        if !self.uniform_per_task {
            return (0..self.buckets.len()).collect();
        }
        let mut by_task: BTreeMap<Option<EditTask>, Vec<usize>> = BTreeMap::new();
        for (i, t) in self.tasks.iter().enumerate() {
            by_task.entry(*t).or_default().push(i);
        }
        let most = by_task.values().map(Vec::len).max().unwrap_or(0);
        let mut out = Vec::new();
        for idx in by_task.values() {
            out.extend_from_slice(idx);
            for _ in idx.len()..most {
                out.push(idx[rng.below(idx.len())]);
            }
        }
        out
    }

    fn refill(&mut self) {
        let epoch_seed = self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = SeededRng::labeled(epoch_seed, "epoch");
        let idx = self.epoch_indices(&mut rng);
        let buckets: Vec<AspectBucket> = idx.iter().map(|&i| self.buckets[i]).collect();
        let batches = bucketize(&buckets, self.batch_size, epoch_seed);
        self.epoch += 1;
        if self.weights.is_empty() {
            self.queue.extend(batches.into_iter().map(|b| b.into_iter().map(|j| idx[j]).collect::<Vec<_>>()));
        } else {
            self.per_bucket = AspectBucket::ALL
                .into_iter()
                .map(|bk| {
                    let flat: Vec<usize> = batches
                        .iter()
                        .filter(|b| buckets[b[0]] == bk)
                        .flat_map(|b| b.iter().map(|&j| idx[j]))
                        .collect();
                    (flat, 0)
                })
                .collect();
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.buckets.is_empty() {
            return Vec::new();
        }
        if self.weights.is_empty() {
            if self.queue.is_empty() {
                self.refill();
            }
            return self.queue.pop_front().expect("refilled");
        }
        if self.per_bucket.is_empty() {
            self.refill();
        }
        let live: Vec<f64> = self
            .per_bucket
            .iter()
            .zip(&self.weights)
            .map(|((idx, _), w)| if idx.is_empty() { 0.0 } else { *w })
            .collect();
        if live.iter().sum::<f64>() <= 0.0 {
            // Only zero-weight buckets have data: fall back to plain epochs.
            self.weights.clear();
            return self.next_batch();
        }
        let k = self.rng.weighted_index(&live);
        let (idx, pos) = &mut self.per_bucket[k];
        let batch: Vec<usize> = (0..self.batch_size.min(idx.len())).map(|j| idx[(*pos + j) % idx.len()]).collect();
        *pos = (*pos + batch.len()) % idx.len();
        batch
    }
}

/// Per-step log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    /// Mean loss per task among the batch's samples.
    pub task: BTreeMap<String, f64>,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Optimizer state bundled with the schedule it trains against.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams<f32>,
    pub adam: AdamState,
    pub sched: NoiseSchedule,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, params: ModelParams<f32>) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        let adam = AdamState::new(config.adam())?;
        let sched = make_schedule(config.schedule, config.t_max)?;
        Ok(Self { config, params, adam, sched, step: 0 })
    }

    /// One Adam update on the examples with λ > 0; the loss is
    /// `w · Σ λᵢ·MSEᵢ / #{λᵢ > 0}`. Noise, timestep and text dropout for an
    /// example come from a stream keyed by `(seed, step, key)`.
    pub fn train_step(&mut self, batch: &[&Example]) -> Result<StepMetrics> {
        let step = self.step;
        let active: Vec<&Example> = batch.iter().copied().filter(|e| e.lambda != 0.0).collect();
        if let Some(e) = active.iter().find(|e| e.lambda != 1.0) {
            return Err(Error::Invalid(format!("example {} has λ = {}, expected 0 or 1", e.key, e.lambda)));
        }
        if active.is_empty() {
            return Err(Error::Invalid(format!("step {step}: batch has no example with λ = 1")));
        }
        let shape = active[0].x_tgt.shape().to_vec();
        if let Some(e) = active.iter().find(|e| e.x_tgt.shape() != shape.as_slice()) {
            return Err(Error::Invalid(format!("batch mixes dims {shape:?} and {:?} ({})", e.x_tgt.shape(), e.key)));
        }
        let mut x_ts = Vec::new();
        let mut epss = Vec::new();
        let mut tokens = Vec::new();
        let mut ts = Vec::new();
        for e in &active {
            let mut rng = SeededRng::labeled(self.config.seed, &format!("train/{step}/{}", e.key));
            let t = 1 + rng.below(self.sched.steps());
            let eps: Tensor<f32> = normal_like(&shape, &mut rng);
            x_ts.push(q_sample(&e.x_tgt, t, &eps, &self.sched)?);
            epss.push(eps);
            if rng.bernoulli(self.config.text_dropout) {
                tokens.extend(std::iter::repeat_n(PAD, SEQ_LEN));
            } else {
                tokens.extend_from_slice(&e.tokens);
            }
            ts.push(t);
        }
        let x_t = stack(&x_ts.iter().collect::<Vec<_>>())?;
        let x_src = stack(&active.iter().map(|e| &e.x_src).collect::<Vec<_>>())?;
        let eps = stack(&epss.iter().collect::<Vec<_>>())?;

        let mut g = Graph::new();
        let bound = bind(&mut g, &self.params, false);
        let out = forward(
            &mut g,
            &self.params.config,
            &bound,
            &Batch { x_t: &x_t, x_src: &x_src, tokens: &tokens, t: &ts },
            ForwardOptions::default(),
        )?;
        let target = g.constant(eps);
        let diff = g.sub(out.eps, target);
        let sq = g.mul(diff, diff);
        let mse = g.mean(sq);
        let loss_node = g.scale(mse, self.config.loss_weight);
        let loss = g.value(loss_node).item() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }

        let per_sample = shape.iter().product::<usize>();
        let mut task_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (i, e) in active.iter().enumerate() {
            let s = &g.value(sq).data()[i * per_sample..(i + 1) * per_sample];
            let m = s.iter().map(|&v| v as f64).sum::<f64>() / per_sample as f64 * self.config.loss_weight;
            let name = e.task.map_or("caption", |t| t.name()).to_string();
            let entry = task_sums.entry(name).or_insert((0.0, 0));
            entry.0 += m;
            entry.1 += 1;
        }

        let grads = g.backward(loss_node)?;
        let mut named = BTreeMap::new();
        let mut sq_norm = 0.0f64;
        for (name, id) in &bound {
            if let Some(gr) = grads.get(*id) {
                sq_norm += gr.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
                named.insert(name.clone(), gr.clone());
            }
        }
        if !sq_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        self.adam.step(&mut self.params.tensors, &named)?;
        self.step += 1;
        Ok(StepMetrics {
            step,
            loss,
            task: task_sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            grad_norm: sq_norm.sqrt(),
            lr: self.config.lr,
        })
    }
}

/// Runs `cfg.steps` updates over `examples` (those with λ = 0 are dropped
/// up front). `on_step` sees every step's metrics and the current
/// parameters; an error from it aborts training.
pub fn train(
    cfg: &TrainConfig,
    init: ModelParams<f32>,
    examples: &[Example],
    steps: usize,
    mut on_step: impl FnMut(&StepMetrics, &ModelParams<f32>) -> Result<()>,
) -> Result<ModelParams<f32>> {
    let kept: Vec<Example> = examples.iter().filter(|e| e.lambda != 0.0).cloned().collect();
    if kept.is_empty() {
        return Err(Error::EmptyFilteredDataset);
    }
    let mut trainer = Trainer::new(cfg.clone(), init)?;
    let mut stream = BatchStream::new(&kept, cfg);
    for _ in 0..steps {
        let idx = stream.next_batch();
        let batch: Vec<&Example> = idx.iter().map(|&i| &kept[i]).collect();
        let m = trainer.train_step(&batch)?;
        on_step(&m, &trainer.params)?;
    }
    Ok(trainer.params)
}

/// Caption-to-image pretraining of a fresh base model.
pub fn pretrain_base(
    cfg: &TrainConfig,
    captions: &[Example],
    on_step: impl FnMut(&StepMetrics, &ModelParams<f32>) -> Result<()>,
) -> Result<ModelParams<f32>> {
    let base_cfg = TrainConfig { variant: Variant::Base, ..cfg.clone() };
    let init = init_model(&base_cfg.model_config(), cfg.seed, None)?;
    train(&base_cfg, init, captions, cfg.pretrain_steps, on_step)
}

/// Initial parameters for editing training: control variants and
/// `channel_concat` start from `base` when given.
pub fn init_for_training(cfg: &TrainConfig, base: Option<&ModelParams<f32>>) -> Result<ModelParams<f32>> {
    let mc = cfg.model_config();
    match (cfg.variant, base) {
        (Variant::Base, Some(b)) => {
            if b.config != mc {
                return Err(Error::Checkpoint("base checkpoint does not match the training config".into()));
            }
            Ok(b.clone())
        }
        (_, b) => init_model(&mc, cfg.seed, b),
    }
}
