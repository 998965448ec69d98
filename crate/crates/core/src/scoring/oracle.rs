//! Exact grader for the shape world.
//!
//! The ground-truth edit is recomputed from the source scene and the
//! instruction. An output that reproduces one of the known failure modes
//! exactly (instruction ignored, wrong colour, wrong object, ghost residue,
//! additive noise) receives that mode's fixed deduction; anything else is
//! graded continuously against the ground truth.

use crate::error::{Error, Result};
use crate::instruction::{EditArgs, Instruction};
use crate::microworld::{apply_semantic_edit, dilate, object_mask, render, Mask, Raster, Scene};
use crate::record::EditRecord;
use crate::specialists::{ghost_blend, off_target_variants, wrong_color_variants, NOISE_AMPLITUDE};

use super::ScoreCard;

/// Largest per-channel deviation still counted as "the same image".
const MATCH_TOL: f32 = 2.5 / 255.0;
/// Per-channel deviation under which a pixel counts as correctly edited.
const PIXEL_TOL: f32 = 0.25;
/// Roughness excess that drives PQ to zero in the continuous rubric.
const ROUGHNESS_SCALE: f64 = 0.1;
/// Roughness excess above which a dense bounded residual is read as noise.
const NOISE_ROUGHNESS: f64 = 0.02;

fn max_dev(a: &Raster, b: &Raster) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn same(a: &Raster, b: &Raster) -> bool {
    max_dev(a, b) <= MATCH_TOL
}

/// Mean absolute difference between horizontally and vertically adjacent
/// pixels, over all channels.
pub fn roughness(r: &Raster) -> f64 {
    let (w, h) = r.dims();
    let d = r.data();
    let mut total = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) * 3;
            if x + 1 < w {
                for c in 0..3 {
                    total += (d[i + c] - d[i + 3 + c]).abs() as f64;
                }
                n += 3;
            }
            if y + 1 < h {
                let j = ((y + 1) * w + x) * 3;
                for c in 0..3 {
                    total += (d[i + c] - d[j + c]).abs() as f64;
                }
                n += 3;
            }
        }
    }
    total / n as f64
}

fn looks_like_noise(out: &Raster, gt: &Raster) -> bool {
    let n = out.width() * out.height();
    let touched = (0..n).filter(|&i| out.pixel_diff(gt, i) > 1.5 / 255.0).count();
    touched * 2 >= n
        && max_dev(out, gt) <= NOISE_AMPLITUDE + MATCH_TOL
        && roughness(out) - roughness(gt) > NOISE_ROUGHNESS
}

fn target_mask(src_scene: &Scene, instruction: &Instruction) -> Option<Mask> {
    match &instruction.args {
        EditArgs::ObjSwap { target, .. } | EditArgs::ObjRemoval { target } => object_mask(src_scene, target.id).ok(),
        _ => None,
    }
}

fn card(sc1: u8, sc2: u8, pq: u8, why: &str) -> ScoreCard {
    ScoreCard::new(sc1, sc2, pq, why).expect("scores within range")
}

/// Grades `out` as an execution of `instruction` on `src` (rendered from
/// `src_scene`).
pub fn grade_edit(src_scene: &Scene, instruction: &Instruction, src: &Raster, out: &Raster) -> Result<ScoreCard> {
    if src.dims() != out.dims() || src.bucket() != src_scene.bucket {
        return Err(Error::DimMismatch { left: src.dims(), right: out.dims() });
    }
    let gt = render(&apply_semantic_edit(src_scene, instruction)?).quantized();

    if same(out, &gt) {
        return Ok(card(10, 10, 10, "output matches the requested edit"));
    }
    if same(out, src) {
        return Ok(card(0, 10, 10, "the instruction was not carried out"));
    }
    if let Some(m) = target_mask(src_scene, instruction) {
        if same(out, &ghost_blend(src, &gt, &m).quantized()) {
            return Ok(card(10, 6, 4, "a faint copy of the original object remains"));
        }
    }
    for v in wrong_color_variants(src_scene, instruction) {
        if let Ok(s) = apply_semantic_edit(src_scene, &v) {
            if same(out, &render(&s).quantized()) {
                return Ok(card(4, 10, 10, "the edit used the wrong colour"));
            }
        }
    }
    for (_, s) in off_target_variants(src_scene, instruction) {
        if same(out, &render(&s).quantized()) {
            return Ok(card(2, 3, 10, "the edit was applied to a different object"));
        }
    }
    if looks_like_noise(out, &gt) {
        return Ok(card(10, 10, 3, "the image is covered in noise"));
    }
    Ok(continuous(src, out, &gt))
}

fn continuous(src: &Raster, out: &Raster, gt: &Raster) -> ScoreCard {
    let (w, h) = src.dims();
    let n = w * h;
    let changed = Mask::from_fn(w, h, |x, y| gt.pixel_diff(src, y * w + x) > 1.5 / 255.0);
    let region = changed.count();
    let hits = (0..n)
        .filter(|&i| changed.at(i))
        .filter(|&i| {
            let to_gt = out.pixel_diff(gt, i);
            to_gt <= PIXEL_TOL && to_gt < out.pixel_diff(src, i)
        })
        .count();
    let hit = if region == 0 { 1.0 } else { hits as f64 / region as f64 };
    let near = dilate(&changed, 1);
    let outside = n - near.count();
    let spilled = (0..n).filter(|&i| !near.at(i) && out.pixel_diff(src, i) > PIXEL_TOL).count();
    let spill = if outside == 0 { 0.0 } else { spilled as f64 / outside as f64 };
    let excess = (roughness(out) - roughness(gt)).max(0.0);

    let to10 = |v: f64| (10.0 * v.clamp(0.0, 1.0)).round() as u8;
    let sc1 = to10(hit);
    let sc2 = to10(1.0 - 2.0 * spill);
    let pq = to10(1.0 - excess / ROUGHNESS_SCALE);
    card(sc1, sc2, pq, &format!("edited-region accuracy {hit:.3}, spill {spill:.3}, roughness excess {excess:.4}"))
}

/// Grades a record; needs the source scene.
pub fn oracle_score(record: &EditRecord) -> Result<ScoreCard> {
    let scene = record.src_scene.as_ref().ok_or_else(|| Error::MissingScene(record.id.clone()))?;
    grade_edit(scene, &record.instruction, &record.src, &record.edited)
}
