use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use shapeedit_numerics::SeededRng;

use crate::error::{Error, IoContext, Result};
use crate::instruction::EditTask;
use crate::par::{available_workers, parallel_map};
use crate::record::{EditRecord, ScorerExchange};

use super::external::{ExternalScorer, ExternalScorerConfig};
use super::{
    lambda_weight_with, oracle_score, pq_prompt, pq_response_text, sc_prompt, sc_response_text, FilterStatistic,
    ScoreCard, DEFAULT_THRESHOLD,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScorerEndpoint {
    Oracle,
    External(ExternalScorerConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub threshold: f64,
    pub statistic: FilterStatistic,
    /// Re-score records that already carry a card.
    pub rescore: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, statistic: FilterStatistic::Overall, rescore: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRetention {
    pub task: EditTask,
    pub pre: usize,
    pub post: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub threshold: f64,
    pub statistic: FilterStatistic,
    pub rows: Vec<TaskRetention>,
    pub total_pre: usize,
    pub total_post: usize,
    pub newly_scored: usize,
    pub unscored: usize,
    pub external_calls: usize,
}

impl RetentionReport {
    pub fn from_records(records: &[EditRecord], opts: &ScoreOptions, newly_scored: usize, external_calls: usize) -> Self {
        let mut rows: BTreeMap<EditTask, TaskRetention> = BTreeMap::new();
        for r in records {
            let row = rows.entry(r.task()).or_insert(TaskRetention { task: r.task(), pre: 0, post: 0 });
            row.pre += 1;
            if r.weight == Some(1) {
                row.post += 1;
            }
        }
        let rows: Vec<TaskRetention> = rows.into_values().collect();
        Self {
            threshold: opts.threshold,
            statistic: opts.statistic,
            total_pre: rows.iter().map(|r| r.pre).sum(),
            total_post: rows.iter().map(|r| r.post).sum(),
            rows,
            newly_scored,
            unscored: records.iter().filter(|r| r.scores.is_none()).count(),
            external_calls,
        }
    }

    pub fn retention(&self) -> f64 {
        if self.total_pre == 0 {
            0.0
        } else {
            self.total_post as f64 / self.total_pre as f64
        }
    }

    /// Plain-text table: one row per task with pre/post-filter counts.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<16} {:>10} {:>11}\n", "task", "pre-filter", "post-filter");
        for r in &self.rows {
            s.push_str(&format!("{:<16} {:>10} {:>11}\n", r.task.name(), r.pre, r.post));
        }
        s.push_str(&format!("{:<16} {:>10} {:>11}\n", "total", self.total_pre, self.total_post));
        s
    }
}

fn apply(record: &mut EditRecord, card: ScoreCard, opts: &ScoreOptions) {
    record.weight = Some(lambda_weight_with(&card, opts.threshold, opts.statistic));
    record.scores = Some(card);
    record.score_error = None;
}

/// Annotates every record with a card and λ. Records that already carry a
/// card keep it (only λ is recomputed) unless `opts.rescore` is set. Failed
/// external scoring leaves the record unscored with `score_error` set.
pub fn score_dataset(records: &mut [EditRecord], endpoint: &ScorerEndpoint, opts: &ScoreOptions) -> Result<RetentionReport> {
    let todo: Vec<usize> = (0..records.len()).filter(|&i| opts.rescore || records[i].scores.is_none()).collect();
    for r in records.iter_mut() {
        if let Some(card) = r.scores.clone() {
            apply(r, card, opts);
        }
    }
    let mut calls = 0;
    match endpoint {
        ScorerEndpoint::Oracle => {
            let results = parallel_map(&todo, available_workers(), |&i| oracle_score(&records[i]));
            for (&i, res) in todo.iter().zip(results) {
                let card = res?;
                apply(&mut records[i], card, opts);
            }
        }
        ScorerEndpoint::External(cfg) => {
            let scorer = ExternalScorer::new(cfg.clone())?;
            let results = parallel_map(&todo, cfg.max_in_flight, |&i| scorer.score(&records[i]));
            for (&i, res) in todo.iter().zip(results) {
                match res {
                    Ok((card, exchange)) => {
                        apply(&mut records[i], card, opts);
                        records[i].exchange = Some(exchange);
                    }
                    Err(e) => {
                        log::warn!("record {} left unscored: {e}", records[i].id);
                        records[i].scores = None;
                        records[i].weight = None;
                        records[i].score_error = Some(e.to_string());
                    }
                }
            }
            calls = scorer.calls();
        }
    }
    Ok(RetentionReport::from_records(records, opts, todo.len(), calls))
}

/// Records with λ = 1.
pub fn filter_records(records: &[EditRecord]) -> Vec<EditRecord> {
    records.iter().filter(|r| r.weight == Some(1)).cloned().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillationSample {
    pub record_id: String,
    pub task: EditTask,
    pub sc_prompt: String,
    pub pq_prompt: String,
    /// Image paths relative to the dataset file, in prompt order (source, edited).
    pub images: Vec<String>,
    pub sc_response: String,
    pub pq_response: String,
    pub scores: ScoreCard,
}

/// Up to `n_per_task` scored records per task, chosen by a seeded shuffle.
/// Oracle-scored records get the response text an ideal scorer would give.
pub fn export_distillation(records: &[EditRecord], n_per_task: usize, seed: u64) -> Result<Vec<DistillationSample>> {
    let mut out = Vec::new();
    for task in EditTask::ALL {
        let mut pool: Vec<&EditRecord> = records.iter().filter(|r| r.task() == task && r.scores.is_some()).collect();
        if pool.len() < n_per_task {
            log::warn!("only {} scored {} records available for export (asked for {n_per_task})", pool.len(), task);
        }
        let mut rng = SeededRng::labeled(seed, &format!("distill/{}", task.name()));
        rng.shuffle(&mut pool);
        for r in pool.into_iter().take(n_per_task) {
            let card = r.scores.clone().expect("filtered on scores");
            let ScorerExchange { sc_prompt: scp, pq_prompt: pqp, sc_response, pq_response } = match &r.exchange {
                Some(x) => x.clone(),
                None => ScorerExchange {
                    sc_prompt: sc_prompt(r)?,
                    pq_prompt: pq_prompt(r)?,
                    sc_response: sc_response_text(&card),
                    pq_response: pq_response_text(&card),
                },
            };
            out.push(DistillationSample {
                record_id: r.id.clone(),
                task,
                sc_prompt: scp,
                pq_prompt: pqp,
                images: vec![crate::record::image_path(&r.id, "src"), crate::record::image_path(&r.id, "edited")],
                sc_response,
                pq_response,
                scores: card,
            });
        }
    }
    Ok(out)
}

pub fn write_distillation(path: &Path, samples: &[DistillationSample]) -> Result<()> {
    let mut buf = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut buf, s)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).at(path)?;
    f.write_all(&buf).at(path)?;
    if samples.is_empty() {
        return Err(Error::Invalid("no scored records to export".into()));
    }
    Ok(())
}
