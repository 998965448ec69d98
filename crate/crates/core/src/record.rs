//! Edit records and their on-disk form: one JSON object per line, rasters as
//! PPM files in an `images/` directory next to the JSONL file.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::instruction::{EditTask, Instruction};
use crate::microworld::{AspectBucket, Raster, Scene};
use crate::scoring::ScoreCard;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    GhostResidual,
    WrongColor,
    OffTarget,
    GlobalNoise,
    IgnoreInstruction,
}

impl Corruption {
    pub const ALL: [Corruption; 5] = [
        Corruption::GhostResidual,
        Corruption::WrongColor,
        Corruption::OffTarget,
        Corruption::GlobalNoise,
        Corruption::IgnoreInstruction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Corruption::GhostResidual => "ghost_residual",
            Corruption::WrongColor => "wrong_color",
            Corruption::OffTarget => "off_target",
            Corruption::GlobalNoise => "global_noise",
            Corruption::IgnoreInstruction => "ignore_instruction",
        }
    }
}

/// Raw scorer exchange kept for distillation export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerExchange {
    pub sc_prompt: String,
    pub pq_prompt: String,
    pub sc_response: String,
    pub pq_response: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditRecord {
    pub id: String,
    pub src: Raster,
    pub edited: Raster,
    pub instruction: Instruction,
    pub src_scene: Option<Scene>,
    pub edited_scene: Option<Scene>,
    pub corruption_log: Vec<Corruption>,
    pub scores: Option<ScoreCard>,
    pub weight: Option<u8>,
    pub exchange: Option<ScorerExchange>,
    /// Set when scoring was attempted and failed.
    pub score_error: Option<String>,
}

impl EditRecord {
    pub fn task(&self) -> EditTask {
        self.instruction.task
    }

    pub fn bucket(&self) -> AspectBucket {
        self.src.bucket()
    }

    pub fn is_clean(&self) -> bool {
        self.corruption_log.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    task: EditTask,
    bucket: AspectBucket,
    src_path: String,
    edited_path: String,
    instruction: Instruction,
    corruption_log: Vec<Corruption>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    src_scene: Option<Scene>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edited_scene: Option<Scene>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores: Option<ScoreCard>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exchange: Option<ScorerExchange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score_error: Option<String>,
}

pub const IMAGE_DIR: &str = "images";

pub fn image_path(id: &str, side: &str) -> String {
    let safe: String = id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{IMAGE_DIR}/{safe}_{side}.ppm")
}

/// Writes `records` to `path` (JSONL) plus PPMs under `path`'s directory.
/// Image files that already hold identical bytes are left untouched.
pub fn write_dataset(path: &Path, records: &[EditRecord]) -> Result<()> {
    let root = path.parent().unwrap_or(Path::new("."));
    let img_dir = root.join(IMAGE_DIR);
    std::fs::create_dir_all(&img_dir).at(&img_dir)?;
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut out = BufWriter::new(File::create(&tmp).at(&tmp)?);
        for r in records {
            let (src_path, edited_path) = (image_path(&r.id, "src"), image_path(&r.id, "edited"));
            write_if_changed(&root.join(&src_path), &r.src.to_ppm())?;
            write_if_changed(&root.join(&edited_path), &r.edited.to_ppm())?;
            let line = RecordLine {
                id: r.id.clone(),
                task: r.task(),
                bucket: r.bucket(),
                src_path,
                edited_path,
                instruction: r.instruction.clone(),
                corruption_log: r.corruption_log.clone(),
                src_scene: r.src_scene.clone(),
                edited_scene: r.edited_scene.clone(),
                scores: r.scores.clone(),
                weight: r.weight,
                exchange: r.exchange.clone(),
                score_error: r.score_error.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n").at(&tmp)?;
        }
        out.flush().at(&tmp)?;
    }
    std::fs::rename(&tmp, path).at(path)
}

fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Ok(existing) = std::fs::read(path) {
        if existing == bytes {
            return Ok(());
        }
    }
    std::fs::write(path, bytes).at(path)
}

pub fn read_dataset(path: &Path) -> Result<Vec<EditRecord>> {
    let root: PathBuf = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let file = File::open(path).at(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let l: RecordLine = serde_json::from_str(&line)
            .map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let src = Raster::read_ppm(&root.join(&l.src_path))?;
        let edited = Raster::read_ppm(&root.join(&l.edited_path))?;
        if src.bucket() != l.bucket || edited.bucket() != l.bucket {
            return Err(Error::Invalid(format!("record {}: raster dims do not match bucket {}", l.id, l.bucket.name())));
        }
        if l.instruction.task != l.task {
            return Err(Error::Invalid(format!("record {}: task tag disagrees with instruction", l.id)));
        }
        out.push(EditRecord {
            id: l.id,
            src,
            edited,
            instruction: l.instruction,
            src_scene: l.src_scene,
            edited_scene: l.edited_scene,
            corruption_log: l.corruption_log,
            scores: l.scores,
            weight: l.weight,
            exchange: l.exchange,
            score_error: l.score_error,
        });
    }
    Ok(out)
}
