//! Fixed editing bench, model evaluation, and ablation runs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use shapeedit_numerics::SeededRng;

use crate::diffusion::{make_schedule, raster_to_tensor, sample, NoiseSchedule, SamplerMode, SamplerSettings, ScheduleKind};
use crate::editnet::{predict, ModelParams, Variant};
use crate::error::{Error, IoContext, Result};
use crate::instruction::{tokenize, EditTask, Instruction};
use crate::microworld::{render, AspectBucket, Raster, Scene, SceneSampler};
use crate::par::parallel_map;
use crate::record::EditRecord;
use crate::scoring::{score_dataset, FilterStatistic, ScoreCard, ScoreOptions, ScorerEndpoint, DEFAULT_THRESHOLD};
use crate::specialists::{generate_dataset, synth_instruction, task_feasible, GenConfig};
use crate::training::{caption_examples, init_for_training, pretrain_base, train, Example, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub index: usize,
    pub scene_index: usize,
    pub bucket: AspectBucket,
    pub scene: Scene,
    pub instruction: Instruction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSet {
    pub seed: u64,
    pub n_scenes: usize,
    pub entries: Vec<BenchEntry>,
}

impl BenchSet {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).at(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        let b: BenchSet = serde_json::from_slice(&bytes)?;
        if b.entries.len() != b.n_scenes * EditTask::ALL.len() {
            return Err(Error::Invalid(format!("bench {} has {} entries for {} scenes", path.display(), b.entries.len(), b.n_scenes)));
        }
        Ok(b)
    }
}

/// `n_scenes` scenes spread round-robin over the buckets, each carrying one
/// instruction per task. Scenes on which some task cannot be instantiated
/// are redrawn.
pub fn build_bench(seed: u64, n_scenes: usize) -> Result<BenchSet> {
    if n_scenes == 0 {
        return Err(Error::Invalid("bench needs at least one scene".into()));
    }
    let sampler = SceneSampler::default();
    let mut entries = Vec::with_capacity(n_scenes * EditTask::ALL.len());
    for s in 0..n_scenes {
        let bucket = AspectBucket::ALL[s % AspectBucket::ALL.len()];
        let mut found = None;
        for attempt in 0..1000 {
            let mut rng = SeededRng::labeled(seed, &format!("bench/{s}/{attempt}"));
            let Ok(scene) = sampler.sample(&mut rng, bucket) else { continue };
            if !EditTask::ALL.iter().all(|&t| task_feasible(&scene, t)) {
                continue;
            }
            let base = rng.seed();
            let ins: Result<Vec<Instruction>> =
                EditTask::ALL.iter().map(|&t| synth_instruction(&scene, t, base ^ t.index() as u64)).collect();
            if let Ok(ins) = ins {
                found = Some((scene, ins));
                break;
            }
        }
        let (scene, ins) = found.ok_or_else(|| Error::Infeasible(format!("no scene supports every task for bench slot {s}")))?;
        for instruction in ins {
            entries.push(BenchEntry { index: entries.len(), scene_index: s, bucket, scene: scene.clone(), instruction });
        }
    }
    Ok(BenchSet { seed, n_scenes, entries })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub schedule: ScheduleKind,
    pub t_max: usize,
    pub steps: usize,
    pub mode: SamplerMode,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { schedule: ScheduleKind::Linear, t_max: 1000, steps: 50, mode: SamplerMode::Deterministic, guidance_scale: 1.0, seed: 0 }
    }
}

/// Runs the reverse sampler with the model as denoiser.
pub fn edit_with_model(
    params: &ModelParams<f32>,
    src: &Raster,
    text: &str,
    sched: &NoiseSchedule,
    settings: &SamplerSettings,
) -> Result<Raster> {
    let x_src = raster_to_tensor::<f32>(src);
    let tokens = tokenize(text);
    let mut model = |x: &_, s: &_, tok: &[usize], t: usize| predict(params, x, s, tok, t);
    Ok(sample(&mut model, &x_src, &tokens, sched, settings, None)?.raster)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub n: usize,
    pub sc: f64,
    pub pq: f64,
    pub o: f64,
    /// Fraction of rows with SC = 10.
    pub acc: f64,
    pub sc_unit: f64,
    pub pq_unit: f64,
    pub o_unit: f64,
}

impl TaskMetrics {
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a EvalRow>) -> Self {
        let rows: Vec<&EvalRow> = rows.into_iter().collect();
        let n = rows.len();
        if n == 0 {
            return Self::default();
        }
        let mean = |f: &dyn Fn(&EvalRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n as f64;
        let (sc, pq, o) = (mean(&|r| r.sc as f64), mean(&|r| r.pq as f64), mean(&|r| r.o));
        Self { n, sc, pq, o, acc: accuracy(rows.iter().map(|r| r.sc)), sc_unit: sc / 10.0, pq_unit: pq / 10.0, o_unit: o / 10.0 }
    }
}

/// Fraction of SC values equal to 10 (0 for no rows).
pub fn accuracy(sc: impl IntoIterator<Item = u8>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for s in sc {
        n += 1;
        hit += (s == 10) as usize;
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub index: usize,
    pub task: EditTask,
    pub bucket: AspectBucket,
    pub sc1: u8,
    pub sc2: u8,
    pub sc: u8,
    pub pq: u8,
    pub o: f64,
    pub failed: bool,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub per_task: BTreeMap<String, TaskMetrics>,
    pub avg: TaskMetrics,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn from_rows(config_hash: String, rows: Vec<EvalRow>) -> Self {
        let per_task = EditTask::ALL
            .iter()
            .filter(|t| rows.iter().any(|r| r.task == **t))
            .map(|t| (t.name().to_string(), TaskMetrics::from_rows(rows.iter().filter(|r| r.task == *t))))
            .collect();
        Self { config_hash, per_task, avg: TaskMetrics::from_rows(&rows), rows }
    }

    pub fn task(&self, task: EditTask) -> TaskMetrics {
        self.per_task.get(task.name()).cloned().unwrap_or_default()
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }
}

pub fn hash_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Scores `editor`'s output on every bench entry. An editor error or a
/// non-finite output marks the row failed with all scores 0; the run goes
/// on. Returns the report and the produced images.
pub fn evaluate_with<F>(
    bench: &BenchSet,
    endpoint: &ScorerEndpoint,
    workers: usize,
    config_hash: String,
    editor: F,
) -> Result<(EvalReport, Vec<Option<Raster>>)>
where
    F: Fn(&BenchEntry, &Raster) -> Result<Raster> + Sync,
{
    let produced: Vec<(Raster, Result<Raster>)> = parallel_map(&bench.entries, workers, |e| {
        let src = render(&e.scene).quantized();
        let out = editor(e, &src).and_then(|r| {
            if r.data().iter().all(|v| v.is_finite()) && r.bucket() == e.bucket {
                Ok(r.quantized())
            } else {
                Err(Error::Invalid("editor returned a non-finite or mis-sized image".into()))
            }
        });
        (src, out)
    });

    let mut records = Vec::new();
    let mut slots = Vec::new();
    let mut failures: BTreeMap<usize, String> = BTreeMap::new();
    let mut outputs = Vec::with_capacity(produced.len());
    for (e, (src, out)) in bench.entries.iter().zip(produced) {
        match out {
            Ok(img) => {
                slots.push(e.index);
                records.push(EditRecord {
                    id: format!("bench-{:04}", e.index),
                    src,
                    edited: img.clone(),
                    instruction: e.instruction.clone(),
                    src_scene: Some(e.scene.clone()),
                    edited_scene: None,
                    corruption_log: Vec::new(),
                    scores: None,
                    weight: None,
                    exchange: None,
                    score_error: None,
                });
                outputs.push(Some(img));
            }
            Err(err) => {
                log::warn!("bench entry {} failed: {err}", e.index);
                failures.insert(e.index, err.to_string());
                outputs.push(None);
            }
        }
    }
    let opts = ScoreOptions { threshold: DEFAULT_THRESHOLD, statistic: FilterStatistic::Overall, rescore: true };
    score_dataset(&mut records, endpoint, &opts)?;
    let mut by_index: BTreeMap<usize, EditRecord> = slots.into_iter().zip(records).collect();

    let rows = bench
        .entries
        .iter()
        .map(|e| {
            let (card, failed, note) = match by_index.remove(&e.index) {
                Some(r) => match (r.scores, r.score_error) {
                    (Some(c), _) => {
                        let note = c.reasoning.clone();
                        (c, false, note)
                    }
                    (None, err) => (ScoreCard::failed(""), true, format!("scoring failed: {}", err.unwrap_or_default())),
                },
                None => (ScoreCard::failed(""), true, failures.remove(&e.index).unwrap_or_default()),
            };
            EvalRow {
                index: e.index,
                task: e.instruction.task,
                bucket: e.bucket,
                sc1: card.sc1,
                sc2: card.sc2,
                sc: card.sc,
                pq: card.pq,
                o: card.o,
                failed,
                note,
            }
        })
        .collect();
    Ok((EvalReport::from_rows(config_hash, rows), outputs))
}

/// Evaluates a trained model; each entry samples with its own seed.
pub fn evaluate(
    params: &ModelParams<f32>,
    bench: &BenchSet,
    endpoint: &ScorerEndpoint,
    settings: &EvalSettings,
    workers: usize,
) -> Result<(EvalReport, Vec<Option<Raster>>)> {
    let sched = make_schedule(settings.schedule, settings.t_max)?;
    let mut h = serde_json::to_vec(&params.config)?;
    h.extend(serde_json::to_vec(settings)?);
    h.extend(params.hash_prefix("").as_bytes());
    h.extend(bench.seed.to_le_bytes());
    let config_hash = hash_hex(&h);
    evaluate_with(bench, endpoint, workers, config_hash, |e, src| {
        let seed = SeededRng::labeled(settings.seed, &format!("eval/{}", e.index)).seed();
        let ss = SamplerSettings { steps: settings.steps, mode: settings.mode, guidance_scale: settings.guidance_scale, seed };
        edit_with_model(params, src, &e.instruction.surface_text, &sched, &ss)
    })
}

/// One PPM per entry: `{index:04}_{task}.ppm` (failed entries are skipped).
pub fn write_sample_grid(dir: &Path, bench: &BenchSet, outputs: &[Option<Raster>]) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    for (e, out) in bench.entries.iter().zip(outputs) {
        if let Some(img) = out {
            img.write_ppm(&dir.join(format!("{:04}_{}.ppm", e.index, e.instruction.task.name())))?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataArm {
    /// The first `n_train` records with λ = 1.
    Filtered,
    /// The first `n_train` records regardless of λ.
    Unfiltered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub variant: Variant,
    pub data: DataArm,
}

impl AblationArm {
    pub fn new(variant: Variant, data: DataArm) -> Self {
        let suffix = match data {
            DataArm::Filtered => "filtered",
            DataArm::Unfiltered => "unfiltered",
        };
        Self { name: format!("{}+{suffix}", variant.name()), variant, data }
    }

    pub fn sampling() -> Vec<Self> {
        vec![Self::new(Variant::Editnet, DataArm::Filtered), Self::new(Variant::Editnet, DataArm::Unfiltered)]
    }

    pub fn architecture() -> Vec<Self> {
        [Variant::Editnet, Variant::Controlnet, Variant::ControlnetTextcontrol, Variant::ChannelConcat]
            .into_iter()
            .map(|v| Self::new(v, DataArm::Filtered))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub arms: Vec<AblationArm>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub p_corrupt: f64,
    pub n_train: usize,
    pub bench_seed: u64,
    pub bench_scenes: usize,
    pub eval: EvalSettings,
    pub threshold: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            arms: AblationArm::sampling(),
            seeds: vec![0, 1, 2],
            train: TrainConfig::default(),
            p_corrupt: 0.3,
            n_train: 512,
            bench_seed: 1234,
            bench_scenes: 62,
            eval: EvalSettings::default(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub avg: TaskMetrics,
    pub removal: TaskMetrics,
    pub train_records: usize,
    pub corrupted_in_train: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub runs: usize,
    pub acc: f64,
    pub sc: f64,
    pub pq: f64,
    pub o: f64,
    pub removal_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub summary: Vec<ArmSummary>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.summary.iter().find(|s| s.arm == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<33} {:>4} {:>6} {:>6} {:>6} {:>6} {:>11}\n", "arm", "runs", "acc", "sc", "pq", "o", "removal_acc");
        for a in &self.summary {
            s.push_str(&format!(
                "{:<33} {:>4} {:>6.3} {:>6.2} {:>6.2} {:>6.2} {:>11.3}\n",
                a.arm, a.runs, a.acc, a.sc, a.pq, a.o, a.removal_acc
            ));
        }
        s.push('\n');
        for r in &self.rows {
            match &r.error {
                Some(e) => s.push_str(&format!("{:<33} seed {:>3}: FAILED {e}\n", r.arm, r.seed)),
                None => s.push_str(&format!(
                    "{:<33} seed {:>3}: acc {:.3} o {:.2} removal_acc {:.3} ({} train records, {} corrupted)\n",
                    r.arm, r.seed, r.avg.acc, r.avg.o, r.removal.acc, r.train_records, r.corrupted_in_train
                )),
            }
        }
        s
    }
}

/// Per seed: generates and oracle-scores a pool, pretrains one base model
/// on its captions, then trains and evaluates every arm from that base on a
/// shared bench. Failed arms become error rows.
pub fn ablate(cfg: &AblationConfig, workers: usize) -> Result<AblationReport> {
    if cfg.arms.len() < 2 {
        return Err(Error::Invalid("an ablation needs at least two arms".into()));
    }
    cfg.train.validate()?;
    let bench = build_bench(cfg.bench_seed, cfg.bench_scenes)?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let pool_size = ((cfg.n_train as f64 / (1.0 - cfg.p_corrupt).max(0.05)) * 1.25).ceil() as usize + 14;
        let gen = GenConfig {
            n_records: pool_size,
            seed,
            corruption: crate::specialists::CorruptionConfig::with_rate(cfg.p_corrupt),
        };
        let mut pool = generate_dataset(&gen, workers)?;
        let opts = ScoreOptions { threshold: cfg.threshold, ..Default::default() };
        score_dataset(&mut pool, &ScorerEndpoint::Oracle, &opts)?;
        let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
        let base = if train_cfg.pretrain_steps > 0 {
            Some(pretrain_base(&train_cfg, &caption_examples(&pool), |_, _| Ok(()))?)
        } else {
            None
        };
        for arm in &cfg.arms {
            let picked: Vec<&EditRecord> = match arm.data {
                DataArm::Filtered => pool.iter().filter(|r| r.weight == Some(1)).take(cfg.n_train).collect(),
                DataArm::Unfiltered => pool.iter().take(cfg.n_train).collect(),
            };
            let corrupted = picked.iter().filter(|r| !r.is_clean()).count();
            let run = || -> Result<EvalReport> {
                if picked.len() < cfg.n_train {
                    return Err(Error::Invalid(format!("only {} records available, wanted {}", picked.len(), cfg.n_train)));
                }
                let examples: Vec<Example> =
                    picked.iter().map(|r| Example { lambda: 1.0, ..Example::from_record(r) }).collect();
                let tc = TrainConfig { variant: arm.variant, ..train_cfg.clone() };
                let base_for_arm = match arm.variant {
                    Variant::Base => None,
                    _ => base.as_ref(),
                };
                let init = init_for_training(&tc, base_for_arm)?;
                let params = train(&tc, init, &examples, tc.steps, |_, _| Ok(()))?;
                let eval = EvalSettings { seed, ..cfg.eval.clone() };
                Ok(evaluate(&params, &bench, &ScorerEndpoint::Oracle, &eval, workers)?.0)
            };
            let row = match run() {
                Ok(rep) => AblationRow {
                    arm: arm.name.clone(),
                    seed,
                    removal: rep.task(EditTask::ObjRemoval),
                    avg: rep.avg,
                    train_records: picked.len(),
                    corrupted_in_train: corrupted,
                    error: None,
                },
                Err(e) => AblationRow {
                    arm: arm.name.clone(),
                    seed,
                    avg: TaskMetrics::default(),
                    removal: TaskMetrics::default(),
                    train_records: picked.len(),
                    corrupted_in_train: corrupted,
                    error: Some(e.to_string()),
                },
            };
            log::info!("ablation {} seed {seed}: acc {:.3} o {:.2}", row.arm, row.avg.acc, row.avg.o);
            rows.push(row);
        }
    }
    let summary = cfg
        .arms
        .iter()
        .map(|arm| {
            let ok: Vec<&AblationRow> = rows.iter().filter(|r| r.arm == arm.name && r.error.is_none()).collect();
            let n = ok.len().max(1) as f64;
            ArmSummary {
                arm: arm.name.clone(),
                runs: ok.len(),
                acc: ok.iter().map(|r| r.avg.acc).sum::<f64>() / n,
                sc: ok.iter().map(|r| r.avg.sc).sum::<f64>() / n,
                pq: ok.iter().map(|r| r.avg.pq).sum::<f64>() / n,
                o: ok.iter().map(|r| r.avg.o).sum::<f64>() / n,
                removal_acc: ok.iter().map(|r| r.removal.acc).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(AblationReport { summary, rows })
}
