//! Resumable gen → score → filter → pretrain → train → eval run under one
//! output root.
//!
//! Every stage writes a manifest holding a hash of its inputs (config plus
//! upstream files) and of each output file. A stage whose manifest matches
//! both is skipped.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::editnet::{ModelParams, Variant};
use crate::error::{Error, IoContext, Result};
use crate::evalbench::{build_bench, evaluate, hash_hex, write_sample_grid, BenchSet, EvalReport, EvalSettings};
use crate::record::{read_dataset, write_dataset, IMAGE_DIR};
use crate::scoring::{filter_records, score_dataset, RetentionReport, ScoreOptions, ScorerEndpoint};
use crate::specialists::{generate_dataset, GenConfig};
use crate::training::{
    caption_examples, init_for_training, load_checkpoint, save_checkpoint, BatchStream, Example, StepMetrics,
    TrainConfig, Trainer,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub out_root: PathBuf,
    pub gen: GenConfig,
    pub endpoint: ScorerEndpoint,
    pub score: ScoreOptions,
    pub train: TrainConfig,
    pub bench_seed: u64,
    pub bench_scenes: usize,
    pub eval: EvalSettings,
    /// Worker threads for generation, scoring and evaluation.
    pub workers: usize,
    pub write_samples: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            out_root: PathBuf::from("out"),
            gen: GenConfig::default(),
            endpoint: ScorerEndpoint::Oracle,
            score: ScoreOptions::default(),
            train: TrainConfig::default(),
            bench_seed: 1234,
            bench_scenes: 62,
            eval: EvalSettings::default(),
            workers: 1,
            write_samples: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Gen,
    Score,
    Filter,
    Pretrain,
    Train,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Gen, Stage::Score, Stage::Filter, Stage::Pretrain, Stage::Train, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Score => "score",
            Stage::Filter => "filter",
            Stage::Pretrain => "pretrain",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }
}

/// Paths relative to the output root.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn raw(&self) -> PathBuf {
        self.root.join("data/raw.jsonl")
    }
    pub fn scored(&self) -> PathBuf {
        self.root.join("data/scored.jsonl")
    }
    pub fn filtered(&self) -> PathBuf {
        self.root.join("data/filtered.jsonl")
    }
    pub fn images(&self) -> PathBuf {
        self.root.join("data").join(IMAGE_DIR)
    }
    pub fn retention_json(&self) -> PathBuf {
        self.root.join("reports/retention.json")
    }
    pub fn retention_txt(&self) -> PathBuf {
        self.root.join("reports/retention.txt")
    }
    pub fn base_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints/base.oemc")
    }
    pub fn model_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints/model.oemc")
    }
    pub fn last_good_ckpt(&self) -> PathBuf {
        self.root.join("checkpoints/model-last-good.oemc")
    }
    pub fn step_ckpt(&self, step: usize) -> PathBuf {
        self.root.join(format!("checkpoints/model-step{step:06}.oemc"))
    }
    pub fn pretrain_log(&self) -> PathBuf {
        self.root.join("logs/pretrain.jsonl")
    }
    pub fn metrics_log(&self) -> PathBuf {
        self.root.join("logs/metrics.jsonl")
    }
    pub fn bench(&self) -> PathBuf {
        self.root.join("bench/bench.json")
    }
    pub fn eval_report(&self) -> PathBuf {
        self.root.join("reports/eval.json")
    }
    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }
    pub fn manifest(&self, stage: Stage) -> PathBuf {
        self.root.join("manifests").join(format!("{}.json", stage.name()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub inputs: String,
    /// Output path (relative to the root) → content hash.
    pub outputs: BTreeMap<String, String>,
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(hash_hex(&std::fs::read(path).at(path)?))
}

/// Hash over the sorted names and contents of every file in `dir`.
pub fn hash_dir(dir: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .at(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .at(dir)?;
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        if p.is_file() {
            h.update(p.file_name().unwrap().to_string_lossy().as_bytes());
            h.update(std::fs::read(&p).at(&p)?);
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn rel(layout: &Layout, p: &Path) -> String {
    p.strip_prefix(&layout.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn output_hash(layout: &Layout, key: &str) -> Result<String> {
    let p = layout.root.join(key);
    if key.ends_with('/') {
        hash_dir(&p)
    } else {
        hash_file(&p)
    }
}

fn inputs_hash(stage: Stage, config: &impl Serialize, files: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(stage.name().as_bytes());
    h.update(serde_json::to_vec(config)?);
    for f in files {
        h.update(hash_file(f)?.as_bytes());
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn up_to_date(layout: &Layout, stage: Stage, inputs: &str) -> bool {
    let Ok(bytes) = std::fs::read(layout.manifest(stage)) else { return false };
    let Ok(m) = serde_json::from_slice::<Manifest>(&bytes) else { return false };
    m.inputs == inputs && m.outputs.iter().all(|(k, v)| output_hash(layout, k).is_ok_and(|h| &h == v))
}

fn write_manifest(layout: &Layout, stage: Stage, inputs: String, outputs: &[String]) -> Result<()> {
    let outputs = outputs.iter().map(|k| Ok((k.clone(), output_hash(layout, k)?))).collect::<Result<_>>()?;
    let m = Manifest { stage, inputs, outputs };
    let path = layout.manifest(stage);
    std::fs::create_dir_all(path.parent().unwrap()).at(&path)?;
    let mut bytes = serde_json::to_vec_pretty(&m)?;
    bytes.push(b'\n');
    std::fs::write(&path, bytes).at(&path)
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(d) = p.parent() {
        std::fs::create_dir_all(d).at(d)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
}

pub fn stage_gen(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let l = Layout::new(&cfg.out_root);
    let inputs = inputs_hash(Stage::Gen, &cfg.gen, &[])?;
    if up_to_date(&l, Stage::Gen, &inputs) {
        return Ok(StageOutcome { stage: Stage::Gen, skipped: true });
    }
    let records = generate_dataset(&cfg.gen, cfg.workers)?;
    ensure_parent(&l.raw())?;
    write_dataset(&l.raw(), &records)?;
    write_manifest(&l, Stage::Gen, inputs, &[rel(&l, &l.raw()), format!("{}/", rel(&l, &l.images()))])?;
    Ok(StageOutcome { stage: Stage::Gen, skipped: false })
}

pub fn stage_score(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let l = Layout::new(&cfg.out_root);
    let key = (&cfg.endpoint, &cfg.score);
    let inputs = inputs_hash(Stage::Score, &key, &[l.raw()])?;
    if up_to_date(&l, Stage::Score, &inputs) {
        return Ok(StageOutcome { stage: Stage::Score, skipped: true });
    }
    let mut records = read_dataset(&l.raw())?;
    let report = score_dataset(&mut records, &cfg.endpoint, &cfg.score)?;
    write_dataset(&l.scored(), &records)?;
    write_retention(&l, &report)?;
    write_manifest(
        &l,
        Stage::Score,
        inputs,
        &[rel(&l, &l.scored()), rel(&l, &l.retention_json()), rel(&l, &l.retention_txt())],
    )?;
    Ok(StageOutcome { stage: Stage::Score, skipped: false })
}

fn write_retention(l: &Layout, report: &RetentionReport) -> Result<()> {
    ensure_parent(&l.retention_json())?;
    let mut j = serde_json::to_vec_pretty(report)?;
    j.push(b'\n');
    std::fs::write(l.retention_json(), j).at(l.retention_json())?;
    std::fs::write(l.retention_txt(), report.to_table()).at(l.retention_txt())
}

pub fn stage_filter(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let l = Layout::new(&cfg.out_root);
    let inputs = inputs_hash(Stage::Filter, &(), &[l.scored()])?;
    if up_to_date(&l, Stage::Filter, &inputs) {
        return Ok(StageOutcome { stage: Stage::Filter, skipped: true });
    }
    let records = read_dataset(&l.scored())?;
    let kept = filter_records(&records);
    write_dataset(&l.filtered(), &kept)?;
    write_manifest(&l, Stage::Filter, inputs, &[rel(&l, &l.filtered())])?;
    Ok(StageOutcome { stage: Stage::Filter, skipped: false })
}

fn metrics_writer(path: &Path) -> Result<BufWriter<File>> {
    ensure_parent(path)?;
    Ok(BufWriter::new(File::create(path).at(path)?))
}

fn log_line(w: &mut BufWriter<File>, m: &StepMetrics, path: &Path) -> Result<()> {
    serde_json::to_writer(&mut *w, m)?;
    w.write_all(b"\n").at(path)
}

/// Caption pretraining of the base model on the raw dataset's scenes.
/// Skipped (no base file) when `pretrain_steps` is 0.
pub fn stage_pretrain(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let l = Layout::new(&cfg.out_root);
    let t = &cfg.train;
    let key = (t.layers, t.hidden, t.heads, t.pretrain_steps, t.batch_size, t.lr, t.seed, (t.schedule, t.t_max, t.text_dropout));
    let inputs = inputs_hash(Stage::Pretrain, &key, &[l.raw()])?;
    if t.pretrain_steps == 0 || up_to_date(&l, Stage::Pretrain, &inputs) {
        return Ok(StageOutcome { stage: Stage::Pretrain, skipped: true });
    }
    let records = read_dataset(&l.raw())?;
    let captions = caption_examples(&records);
    let base_cfg = TrainConfig { variant: Variant::Base, ..t.clone() };
    let init = init_for_training(&base_cfg, None)?;
    let params = run_training(&base_cfg, init, &captions, t.pretrain_steps, &l.pretrain_log(), None, &l)?;
    save_checkpoint(&params, t.pretrain_steps as u64, &l.base_ckpt())?;
    write_manifest(&l, Stage::Pretrain, inputs, &[rel(&l, &l.base_ckpt()), rel(&l, &l.pretrain_log())])?;
    Ok(StageOutcome { stage: Stage::Pretrain, skipped: false })
}

/// Steps `trainer` over `examples`, logging every step. On failure the
/// parameters from before the failing step are saved as the last good
/// checkpoint and the error is returned.
fn run_training(
    cfg: &TrainConfig,
    init: ModelParams<f32>,
    examples: &[Example],
    steps: usize,
    log_path: &Path,
    cadence_ckpt: Option<usize>,
    l: &Layout,
) -> Result<ModelParams<f32>> {
    let kept: Vec<Example> = examples.iter().filter(|e| e.lambda != 0.0).cloned().collect();
    if kept.is_empty() {
        return Err(Error::EmptyFilteredDataset);
    }
    let mut trainer = Trainer::new(cfg.clone(), init)?;
    let mut stream = BatchStream::new(&kept, cfg);
    let mut log = metrics_writer(log_path)?;
    for _ in 0..steps {
        let idx = stream.next_batch();
        let batch: Vec<&Example> = idx.iter().map(|&i| &kept[i]).collect();
        match trainer.train_step(&batch) {
            Ok(m) => log_line(&mut log, &m, log_path)?,
            Err(e) => {
                log.flush().at(log_path)?;
                save_checkpoint(&trainer.params, trainer.step as u64, &l.last_good_ckpt())?;
                return Err(e);
            }
        }
        if let Some(every) = cadence_ckpt.filter(|&e| e > 0) {
            if trainer.step % every == 0 && trainer.step < steps {
                save_checkpoint(&trainer.params, trainer.step as u64, &l.step_ckpt(trainer.step))?;
            }
        }
    }
    log.flush().at(log_path)?;
    Ok(trainer.params)
}

pub fn stage_train(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let l = Layout::new(&cfg.out_root);
    let t = &cfg.train;
    let mut files = vec![l.filtered()];
    let use_base = t.pretrain_steps > 0 && t.variant != Variant::Base;
    if use_base {
        files.push(l.base_ckpt());
    }
    let inputs = inputs_hash(Stage::Train, t, &files)?;
    if up_to_date(&l, Stage::Train, &inputs) {
        return Ok(StageOutcome { stage: Stage::Train, skipped: true });
    }
    let records = read_dataset(&l.filtered())?;
    let examples: Vec<Example> = records.iter().map(Example::from_record).collect();
    if examples.iter().all(|e| e.lambda == 0.0) {
        return Err(Error::EmptyFilteredDataset);
    }
    let base = if use_base { Some(load_checkpoint::<f32>(&l.base_ckpt())?.0) } else { None };
    let init = init_for_training(t, base.as_ref())?;
    let frozen_before = init.hash_prefix("base.");
    let params = run_training(t, init, &examples, t.steps, &l.metrics_log(), Some(t.checkpoint_every), &l)?;
    if t.variant.has_control() && params.hash_prefix("base.") != frozen_before {
        return Err(Error::Invalid("frozen base parameters changed during training".into()));
    }
    save_checkpoint(&params, t.steps as u64, &l.model_ckpt())?;
    write_manifest(&l, Stage::Train, inputs, &[rel(&l, &l.model_ckpt()), rel(&l, &l.metrics_log())])?;
    Ok(StageOutcome { stage: Stage::Train, skipped: false })
}

pub fn stage_eval(cfg: &PipelineConfig) -> Result<StageOutcome> {
    let l = Layout::new(&cfg.out_root);
    let key = (cfg.bench_seed, cfg.bench_scenes, &cfg.eval, &cfg.endpoint, cfg.write_samples);
    let inputs = inputs_hash(Stage::Eval, &key, &[l.model_ckpt()])?;
    if up_to_date(&l, Stage::Eval, &inputs) {
        return Ok(StageOutcome { stage: Stage::Eval, skipped: true });
    }
    let (params, _) = load_checkpoint::<f32>(&l.model_ckpt())?;
    let bench = build_bench(cfg.bench_seed, cfg.bench_scenes)?;
    ensure_parent(&l.bench())?;
    bench.write(&l.bench())?;
    let (report, outputs) = evaluate(&params, &bench, &cfg.endpoint, &cfg.eval, cfg.workers)?;
    write_report(&l.eval_report(), &report)?;
    let mut outs = vec![rel(&l, &l.bench()), rel(&l, &l.eval_report())];
    if cfg.write_samples {
        write_sample_grid(&l.samples(), &bench, &outputs)?;
        outs.push(format!("{}/", rel(&l, &l.samples())));
    }
    write_manifest(&l, Stage::Eval, inputs, &outs)?;
    Ok(StageOutcome { stage: Stage::Eval, skipped: false })
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, report.to_json()?).at(path)
}

pub fn read_bench(path: &Path) -> Result<BenchSet> {
    BenchSet::read(path)
}

pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<StageOutcome> {
    match stage {
        Stage::Gen => stage_gen(cfg),
        Stage::Score => stage_score(cfg),
        Stage::Filter => stage_filter(cfg),
        Stage::Pretrain => stage_pretrain(cfg),
        Stage::Train => stage_train(cfg),
        Stage::Eval => stage_eval(cfg),
    }
}

/// Runs every stage in order, skipping those already complete.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Vec<StageOutcome>> {
    cfg.train.validate()?;
    cfg.gen.corruption.validate()?;
    Stage::ALL.iter().map(|&s| run_stage(cfg, s)).collect()
}
