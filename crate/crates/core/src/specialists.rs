//! Per-task data generators: instruction synthesis, oracle edits, the
//! corruption channel that simulates imperfect specialists, and the
//! removal-to-addition inversion.

use serde::{Deserialize, Serialize};
use shapeedit_numerics::SeededRng;

use crate::error::{Error, Result};
use crate::instruction::{EditArgs, EditTask, Instruction, ObjectRef, Region};
use crate::microworld::{
    apply_semantic_edit, dilate, distinguishable, foreground_mask, object_mask, object_palette, render, Background, Color,
    AspectBucket, Environment, Mask, Object, Raster, Scene, SceneSampler, ShapeKind, Style,
};
use crate::par::parallel_map;
use crate::record::{Corruption, EditRecord};

/// Default dilation radius for object masks, in pixels.
pub const DILATION: usize = 1;

/// Opacity of the leftover copy in the ghost-residual corruption.
pub const GHOST_OPACITY: f32 = 0.3;

/// Amplitude of the additive uniform noise corruption.
pub const NOISE_AMPLITUDE: f32 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Specialist {
    ObjectSwap,
    ObjectRemoval,
    ObjectAddition,
    AttributeModification,
    BackgroundSwap,
    EnvironmentChange,
    StyleTransfer,
}

/// Maps an instruction to the specialist responsible for it.
pub fn dispatch(instruction: &Instruction) -> Result<Specialist> {
    instruction.validate()?;
    Ok(specialist_for(instruction.task))
}

/// Same as [`dispatch`] from a raw tag; unknown tags are an error.
pub fn dispatch_tag(tag: &str) -> Result<Specialist> {
    EditTask::parse(tag).map(specialist_for)
}

fn specialist_for(task: EditTask) -> Specialist {
    match task {
        EditTask::ObjSwap => Specialist::ObjectSwap,
        EditTask::ObjRemoval => Specialist::ObjectRemoval,
        EditTask::ObjAddition => Specialist::ObjectAddition,
        EditTask::Attribute => Specialist::AttributeModification,
        EditTask::BackgroundSwap => Specialist::BackgroundSwap,
        EditTask::Environment => Specialist::EnvironmentChange,
        EditTask::Style => Specialist::StyleTransfer,
    }
}

pub const MAX_OBJECTS: usize = 5;

/// Whether `task` can be instantiated on `scene`.
pub fn task_feasible(scene: &Scene, task: EditTask) -> bool {
    match task {
        EditTask::ObjSwap | EditTask::ObjRemoval | EditTask::Attribute => !scene.objects.is_empty(),
        EditTask::ObjAddition => scene.objects.len() < MAX_OBJECTS,
        EditTask::BackgroundSwap => !background_options(scene).is_empty(),
        EditTask::Environment | EditTask::Style => true,
    }
}

fn background_options(scene: &Scene) -> Vec<Background> {
    let used: Vec<Color> = scene.objects.iter().map(|o| o.color).collect();
    let free: Vec<Color> = Color::ALL
        .into_iter()
        .filter(|&c| used.iter().all(|&u| u != c && distinguishable(c, u, scene.environment, scene.style)))
        .collect();
    let apart = |a: Color, b: Color| distinguishable(a, b, scene.environment, scene.style);
    let mut out = Vec::new();
    for &a in &free {
        out.push(Background::Solid { color: a });
        for &b in &free {
            if a != b && apart(a, b) {
                out.push(Background::TwoToneVertical { left: a, right: b });
            }
        }
    }
    // At least one half has to change visibly under the scene's look.
    let old = halves(&scene.background);
    out.retain(|b| halves(b).iter().zip(&old).any(|(&n, &o)| apart(n, o)));
    out
}

fn halves(b: &Background) -> [Color; 2] {
    match *b {
        Background::Solid { color } => [color, color],
        Background::TwoToneVertical { left, right } => [left, right],
    }
}

/// Template-based instruction for `task`, deterministic in `seed`.
pub fn synth_instruction(scene: &Scene, task: EditTask, seed: u64) -> Result<Instruction> {
    let mut rng = SeededRng::labeled(seed, &format!("instruction/{}", task.name()));
    let infeasible = || Error::Infeasible(format!("{} not possible on this scene", task.name()));
    if !task_feasible(scene, task) {
        return Err(infeasible());
    }
    let palette = object_palette(&scene.background, scene.environment, scene.style);
    let pick_object = |rng: &mut SeededRng| scene.objects[rng.below(scene.objects.len())].clone();
    let args = match task {
        EditTask::ObjSwap => {
            let target = pick_object(&mut rng);
            let mut options: Vec<(ShapeKind, Color)> = ShapeKind::ALL
                .into_iter()
                .flat_map(|s| palette.iter().map(move |&c| (s, c)))
                .filter(|&(s, c)| s != target.shape && c != target.color)
                .collect();
            rng.shuffle(&mut options);
            let mut chosen = None;
            'outer: for (shape, color) in options {
                for shrink in [1.0, 0.85, 0.7] {
                    let radius = target.radius * shrink;
                    let cand = Object { shape, color, radius, ..target.clone() };
                    if scene.placement_ok(&cand, Some(target.id)) {
                        chosen = Some((shape, color, radius));
                        break 'outer;
                    }
                }
            }
            let (new_shape, new_color, new_radius) = chosen.ok_or_else(infeasible)?;
            EditArgs::ObjSwap { target: ObjectRef::of(&target), new_shape, new_color, new_radius }
        }
        EditTask::ObjRemoval => EditArgs::ObjRemoval { target: ObjectRef::of(&pick_object(&mut rng)) },
        EditTask::ObjAddition => {
            let shape = ShapeKind::ALL[rng.below(3)];
            let color = palette[rng.below(palette.len())];
            let obj = SceneSampler::default().place(scene, &mut rng, shape, color)?;
            EditArgs::ObjAddition {
                shape,
                color,
                center: obj.center,
                radius: obj.radius,
                region: Some(Region::of_point(obj.center)),
            }
        }
        EditTask::Attribute => {
            let target = pick_object(&mut rng);
            let colors: Vec<Color> = palette
                .iter()
                .copied()
                .filter(|&c| c != target.color && distinguishable(c, target.color, scene.environment, scene.style))
                .collect();
            if colors.is_empty() {
                return Err(infeasible());
            }
            EditArgs::Attribute { target: ObjectRef::of(&target), new_color: colors[rng.below(colors.len())] }
        }
        EditTask::BackgroundSwap => {
            let options = background_options(scene);
            // Solid and two-tone targets equally likely.
            let (solid, two): (Vec<_>, Vec<_>) =
                options.into_iter().partition(|b| matches!(b, Background::Solid { .. }));
            let pool = if two.is_empty() || (!solid.is_empty() && rng.bernoulli(0.5)) { solid } else { two };
            EditArgs::BackgroundSwap { background: pool[rng.below(pool.len())].clone() }
        }
        EditTask::Environment => {
            let to = match scene.environment {
                Environment::Day => Environment::Night,
                Environment::Night => Environment::Day,
            };
            EditArgs::Environment { from: scene.environment, to }
        }
        EditTask::Style => {
            let to = match scene.style {
                Style::Plain => [Style::Sepia, Style::Posterized][rng.below(2)],
                _ => Style::Plain,
            };
            EditArgs::Style { from: scene.style, to }
        }
    };
    Ok(Instruction::new(args))
}

/// `x ⊙ (1 − M)`: masked pixels become exactly zero.
pub fn build_masked_input(x: &Raster, mask: &Mask) -> Result<Raster> {
    if x.dims() != mask.dims() {
        return Err(Error::DimMismatch { left: x.dims(), right: mask.dims() });
    }
    let mut out = x.clone();
    let w = x.width();
    for y in 0..x.height() {
        for xx in 0..w {
            if mask.get(xx, y) {
                out.set_pixel(xx, y, [0.0; 3]);
            }
        }
    }
    Ok(out)
}

/// Region the clean edit may touch. Object tasks use the dilated object
/// mask(s); background swap uses the inverse foreground; global tasks return
/// the full frame.
pub fn edit_region(src_scene: &Scene, edited_scene: &Scene, instruction: &Instruction, r: usize) -> Result<Mask> {
    let (w, h) = src_scene.bucket.dims();
    let m = match &instruction.args {
        EditArgs::ObjSwap { target, .. } => {
            dilate(&object_mask(src_scene, target.id)?.union(&object_mask(edited_scene, target.id)?), r)
        }
        EditArgs::ObjRemoval { target } | EditArgs::Attribute { target, .. } => {
            dilate(&object_mask(src_scene, target.id)?, r)
        }
        EditArgs::ObjAddition { .. } => {
            let added = edited_scene
                .objects
                .iter()
                .find(|o| src_scene.object(o.id).is_none())
                .ok_or_else(|| Error::Invalid("addition record without a new object".into()))?;
            dilate(&object_mask(edited_scene, added.id)?, r)
        }
        EditArgs::BackgroundSwap { .. } => foreground_mask(src_scene).invert(),
        EditArgs::Environment { .. } | EditArgs::Style { .. } => Mask::ones(w, h),
    };
    Ok(m)
}

/// Corruption probability and relative channel weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub p_corrupt: f64,
    pub ghost_residual: f64,
    pub wrong_color: f64,
    pub off_target: f64,
    pub global_noise: f64,
    pub ignore_instruction: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self::with_rate(0.3)
    }
}

impl CorruptionConfig {
    pub fn with_rate(p_corrupt: f64) -> Self {
        Self {
            p_corrupt,
            ghost_residual: 0.2,
            wrong_color: 0.2,
            off_target: 0.2,
            global_noise: 0.2,
            ignore_instruction: 0.2,
        }
    }

    pub fn clean() -> Self {
        Self::with_rate(0.0)
    }

    pub fn weight(&self, c: Corruption) -> f64 {
        match c {
            Corruption::GhostResidual => self.ghost_residual,
            Corruption::WrongColor => self.wrong_color,
            Corruption::OffTarget => self.off_target,
            Corruption::GlobalNoise => self.global_noise,
            Corruption::IgnoreInstruction => self.ignore_instruction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ws: Vec<f64> = Corruption::ALL.iter().map(|&c| self.weight(c)).collect();
        if !(0.0..=1.0).contains(&self.p_corrupt) || ws.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Invalid("corruption probabilities must lie in [0, 1]".into()));
        }
        if (ws.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid("corruption channel weights must sum to 1".into()));
        }
        Ok(())
    }
}

/// Channels that make sense for a task before looking at the scene.
pub fn channels_for(task: EditTask) -> &'static [Corruption] {
    use Corruption::*;
    match task {
        EditTask::ObjSwap => &[GhostResidual, WrongColor, OffTarget, GlobalNoise, IgnoreInstruction],
        EditTask::ObjRemoval => &[GhostResidual, OffTarget, GlobalNoise, IgnoreInstruction],
        EditTask::ObjAddition => &[WrongColor, GlobalNoise, IgnoreInstruction],
        EditTask::Attribute => &[WrongColor, OffTarget, GlobalNoise, IgnoreInstruction],
        EditTask::BackgroundSwap => &[WrongColor, GlobalNoise, IgnoreInstruction],
        EditTask::Environment | EditTask::Style => &[GlobalNoise, IgnoreInstruction],
    }
}

/// The instruction with its new colour moved one step around the palette
/// ring, skipping colours that would make the result ambiguous.
pub fn wrong_color_variants(src_scene: &Scene, instruction: &Instruction) -> Vec<Instruction> {
    let bg = src_scene.background.colors();
    let objects: Vec<Color> = src_scene.objects.iter().map(|o| o.color).collect();
    let mut out = Vec::new();
    let mut push = |args: EditArgs| out.push(Instruction { args, ..instruction.clone() });
    match &instruction.args {
        EditArgs::ObjSwap { target, new_shape, new_color, new_radius } => {
            let mut avoid = bg.clone();
            avoid.push(target.color);
            for c in Color::ALL.into_iter().filter(|c| c != new_color && !avoid.contains(c)) {
                push(EditArgs::ObjSwap { target: *target, new_shape: *new_shape, new_color: c, new_radius: *new_radius });
            }
        }
        EditArgs::ObjAddition { shape, color, center, radius, region } => {
            for c in Color::ALL.into_iter().filter(|c| c != color && !bg.contains(c)) {
                push(EditArgs::ObjAddition { shape: *shape, color: c, center: *center, radius: *radius, region: *region });
            }
        }
        EditArgs::Attribute { target, new_color } => {
            for c in Color::ALL.into_iter().filter(|c| c != new_color && *c != target.color && !bg.contains(c)) {
                push(EditArgs::Attribute { target: *target, new_color: c });
            }
        }
        EditArgs::BackgroundSwap { background } => {
            let ok = |c: &Color| !objects.contains(c);
            match *background {
                Background::Solid { color } => {
                    for c in Color::ALL.into_iter().filter(|c| *c != color && ok(c)) {
                        push(EditArgs::BackgroundSwap { background: Background::Solid { color: c } });
                    }
                }
                Background::TwoToneVertical { left, right } => {
                    for c in Color::ALL.into_iter().filter(|c| *c != left && *c != right && ok(c)) {
                        push(EditArgs::BackgroundSwap { background: Background::TwoToneVertical { left: c, right } });
                    }
                }
            }
        }
        _ => {}
    }
    out
}

/// The palette-adjacent variant used by the wrong-colour corruption.
fn adjacent_variant(src_scene: &Scene, instruction: &Instruction) -> Option<Instruction> {
    let variants = wrong_color_variants(src_scene, instruction);
    let new_color = match &instruction.args {
        EditArgs::ObjSwap { new_color, .. } | EditArgs::Attribute { new_color, .. } => *new_color,
        EditArgs::ObjAddition { color, .. } => *color,
        EditArgs::BackgroundSwap { background: Background::Solid { color } } => *color,
        EditArgs::BackgroundSwap { background: Background::TwoToneVertical { left, .. } } => *left,
        _ => return None,
    };
    let color_of = |i: &Instruction| match &i.args {
        EditArgs::ObjSwap { new_color, .. } | EditArgs::Attribute { new_color, .. } => *new_color,
        EditArgs::ObjAddition { color, .. } => *color,
        EditArgs::BackgroundSwap { background: Background::Solid { color } } => *color,
        EditArgs::BackgroundSwap { background: Background::TwoToneVertical { left, .. } } => *left,
        _ => unreachable!(),
    };
    let mut c = new_color.next();
    for _ in 0..Color::ALL.len() {
        if let Some(v) = variants.iter().find(|v| color_of(v) == c) {
            return Some(v.clone());
        }
        c = c.next();
    }
    None
}

/// The same kind of edit aimed at each other object in the scene, where feasible.
pub fn off_target_variants(src_scene: &Scene, instruction: &Instruction) -> Vec<(Instruction, Scene)> {
    let target_id = match &instruction.args {
        EditArgs::ObjSwap { target, .. } | EditArgs::ObjRemoval { target } | EditArgs::Attribute { target, .. } => {
            target.id
        }
        _ => return Vec::new(),
    };
    let mut out = Vec::new();
    for o in src_scene.objects.iter().filter(|o| o.id != target_id) {
        let other = ObjectRef::of(o);
        let args = match &instruction.args {
            EditArgs::ObjSwap { new_shape, new_color, .. } => {
                let fitted = [1.0, 0.85, 0.7, 0.55]
                    .into_iter()
                    .map(|f| f * o.radius)
                    .find(|&r| {
                        let cand = Object { shape: *new_shape, color: *new_color, radius: r, ..o.clone() };
                        src_scene.placement_ok(&cand, Some(o.id))
                    });
                let Some(radius) = fitted else { continue };
                if *new_color == o.color && *new_shape == o.shape {
                    continue;
                }
                EditArgs::ObjSwap { target: other, new_shape: *new_shape, new_color: *new_color, new_radius: radius }
            }
            EditArgs::ObjRemoval { .. } => EditArgs::ObjRemoval { target: other },
            EditArgs::Attribute { new_color, .. } => {
                if *new_color == o.color {
                    continue;
                }
                EditArgs::Attribute { target: other, new_color: *new_color }
            }
            _ => unreachable!(),
        };
        let ins = Instruction { args, ..instruction.clone() };
        if let Ok(scene) = apply_semantic_edit(src_scene, &ins) {
            out.push((ins, scene));
        }
    }
    out
}

/// `edited ⊙ (1 − M) + ((1 − α)·edited + α·src) ⊙ M` over the target's
/// source mask.
pub fn ghost_blend(src: &Raster, edited: &Raster, mask: &Mask) -> Raster {
    let mut out = edited.clone();
    let w = src.width();
    for y in 0..src.height() {
        for x in 0..w {
            if mask.get(x, y) {
                let (a, b) = (src.pixel(x, y), edited.pixel(x, y));
                let mix = [0, 1, 2].map(|c| (1.0 - GHOST_OPACITY) * b[c] + GHOST_OPACITY * a[c]);
                out.set_pixel(x, y, mix);
            }
        }
    }
    out
}

fn visibly_differs(a: &Raster, b: &Raster) -> bool {
    let (qa, qb) = (a.quantized(), b.quantized());
    qa.data().iter().zip(qb.data()).any(|(x, y)| (x - y).abs() > 1.5 / 255.0)
}

/// Applies one corruption channel. Returns `None` when the channel does not
/// apply to this record or would leave the clean edit unchanged.
fn corrupt(
    channel: Corruption,
    scene: &Scene,
    instruction: &Instruction,
    src: &Raster,
    clean: &Raster,
    clean_scene: &Scene,
    rng: &mut SeededRng,
) -> Option<(Raster, Scene)> {
    let out = match channel {
        Corruption::IgnoreInstruction => (src.clone(), scene.clone()),
        Corruption::GlobalNoise => {
            let mut noisy = clean.clone();
            let data: Vec<f32> = noisy
                .data()
                .iter()
                .map(|&v| v + rng.uniform_range(-NOISE_AMPLITUDE as f64, NOISE_AMPLITUDE as f64) as f32)
                .collect();
            noisy = Raster::from_data(noisy.bucket(), data).ok()?;
            (noisy, clean_scene.clone())
        }
        Corruption::GhostResidual => {
            let target = match &instruction.args {
                EditArgs::ObjSwap { target, .. } | EditArgs::ObjRemoval { target } => target.id,
                _ => return None,
            };
            let m = object_mask(scene, target).ok()?;
            (ghost_blend(src, clean, &m), clean_scene.clone())
        }
        Corruption::WrongColor => {
            let variant = adjacent_variant(scene, instruction)?;
            let s = apply_semantic_edit(scene, &variant).ok()?;
            (render(&s), s)
        }
        Corruption::OffTarget => {
            let variants = off_target_variants(scene, instruction);
            if variants.is_empty() {
                return None;
            }
            let (_, s) = variants[rng.below(variants.len())].clone();
            (render(&s), s)
        }
    };
    visibly_differs(&out.0, clean).then_some(out)
}

/// One specialist sample. The clean path renders the oracle edit; with
/// probability `p_corrupt` a corruption channel (renormalised over the ones
/// that apply) perturbs the result and is logged. Rasters are snapped to the
/// 8-bit grid so that records survive a PPM round trip unchanged.
pub fn gen_pair(
    id: &str,
    scene: &Scene,
    instruction: &Instruction,
    corruption: &CorruptionConfig,
    seed: u64,
) -> Result<EditRecord> {
    corruption.validate()?;
    dispatch(instruction)?;
    let edited_scene = apply_semantic_edit(scene, instruction)?;
    let src = render(scene);
    let clean = render(&edited_scene);
    let mut rng = SeededRng::labeled(seed, "corruption");
    let mut edited = clean.clone();
    let mut rendered_scene = edited_scene.clone();
    let mut log = Vec::new();
    if rng.bernoulli(corruption.p_corrupt) {
        let mut pool: Vec<Corruption> = channels_for(instruction.task)
            .iter()
            .copied()
            .filter(|&c| corruption.weight(c) > 0.0)
            .collect();
        while !pool.is_empty() {
            let weights: Vec<f64> = pool.iter().map(|&c| corruption.weight(c)).collect();
            let k = rng.weighted_index(&weights);
            let channel = pool.remove(k);
            if let Some((r, s)) = corrupt(channel, scene, instruction, &src, &clean, &edited_scene, &mut rng) {
                edited = r;
                rendered_scene = s;
                log.push(channel);
                break;
            }
        }
    }
    Ok(EditRecord {
        id: id.to_string(),
        src: src.quantized(),
        edited: edited.quantized(),
        instruction: instruction.clone(),
        src_scene: Some(scene.clone()),
        edited_scene: Some(rendered_scene),
        corruption_log: log,
        scores: None,
        weight: None,
        exchange: None,
        score_error: None,
    })
}

/// Exchanges source and edited sides (rasters and scenes); involutive.
pub fn swap_roles(record: &EditRecord) -> EditRecord {
    EditRecord {
        src: record.edited.clone(),
        edited: record.src.clone(),
        src_scene: record.edited_scene.clone(),
        edited_scene: record.src_scene.clone(),
        ..record.clone()
    }
}

/// Turns a removal sample into an addition sample by exchanging its sides.
pub fn invert_removal(record: &EditRecord) -> Result<EditRecord> {
    let EditArgs::ObjRemoval { target } = &record.instruction.args else {
        return Err(Error::Invalid(format!("invert_removal needs an obj_removal record, got {}", record.task())));
    };
    let removed = record
        .src_scene
        .as_ref()
        .and_then(|s| s.object(target.id))
        .ok_or_else(|| Error::MissingScene(record.id.clone()))?;
    let args = EditArgs::ObjAddition {
        shape: removed.shape,
        color: removed.color,
        center: removed.center,
        radius: removed.radius,
        region: None,
    };
    let mut out = swap_roles(record);
    out.id = format!("{}-inv", record.id);
    out.instruction = Instruction::new(args);
    out.scores = None;
    out.weight = None;
    out.exchange = None;
    out.score_error = None;
    Ok(out)
}

/// Settings for a batch of specialist samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_records: usize,
    pub seed: u64,
    pub corruption: CorruptionConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { n_records: 512, seed: 0, corruption: CorruptionConfig::default() }
    }
}

/// Record `i` gets task `i mod 7` and bucket `(i / 7) mod 7`, so both cycle
/// evenly. Scenes on which the task cannot be instantiated are redrawn.
/// Each record depends only on `(seed, i)`, never on the worker count.
pub fn generate_dataset(cfg: &GenConfig, workers: usize) -> Result<Vec<EditRecord>> {
    cfg.corruption.validate()?;
    let idx: Vec<usize> = (0..cfg.n_records).collect();
    parallel_map(&idx, workers, |&i| generate_one(cfg, i)).into_iter().collect()
}

fn generate_one(cfg: &GenConfig, i: usize) -> Result<EditRecord> {
    let task = EditTask::ALL[i % EditTask::ALL.len()];
    let bucket = AspectBucket::ALL[(i / EditTask::ALL.len()) % AspectBucket::ALL.len()];
    let sampler = SceneSampler::default();
    for attempt in 0..100 {
        let mut rng = SeededRng::labeled(cfg.seed, &format!("gen/{i}/{attempt}"));
        let scene = match sampler.sample(&mut rng, bucket) {
            Ok(s) => s,
            Err(Error::Placement { .. }) => continue,
            Err(e) => return Err(e),
        };
        let pair_seed = rng.seed();
        let instruction = match synth_instruction(&scene, task, pair_seed) {
            Ok(ins) => ins,
            Err(Error::Infeasible(_)) => continue,
            Err(e) => return Err(e),
        };
        return gen_pair(&format!("{i:06}"), &scene, &instruction, &cfg.corruption, pair_seed);
    }
    Err(Error::Infeasible(format!("no usable scene for record {i} ({task})")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microworld::{sample_scene, AspectBucket};

    fn scene_with(n: usize, seed: u64) -> Scene {
        SceneSampler::with_object_count(n).sample(&mut SeededRng::new(seed), AspectBucket::Square).unwrap()
    }

    #[test]
    fn dispatch_is_total_and_rejects_unknown_tags() {
        for t in EditTask::ALL {
            dispatch_tag(t.name()).unwrap();
        }
        assert_eq!(dispatch_tag("style").unwrap(), Specialist::StyleTransfer);
        assert_eq!(dispatch_tag("obj_removal").unwrap(), Specialist::ObjectRemoval);
        assert!(dispatch_tag("sharpen").is_err());
    }

    #[test]
    fn removal_instruction_on_single_square() {
        let mut s = scene_with(1, 3);
        s.objects[0].shape = ShapeKind::Square;
        s.objects[0].color = Color::Blue;
        s.background = Background::Solid { color: Color::White };
        let ins = synth_instruction(&s, EditTask::ObjRemoval, 0).unwrap();
        assert_eq!(ins.surface_text, "Remove the blue square from the image.");
        assert!(matches!(ins.args, EditArgs::ObjRemoval { target } if target.id == s.objects[0].id));
    }

    #[test]
    fn synth_is_deterministic_and_dispatchable() {
        for seed in 0..50 {
            let s = sample_scene(seed, AspectBucket::ALL[seed as usize % 7]).unwrap();
            for t in EditTask::ALL {
                if let Ok(a) = synth_instruction(&s, t, seed) {
                    assert_eq!(a, synth_instruction(&s, t, seed).unwrap());
                    assert_eq!(dispatch(&a).unwrap(), specialist_for(t));
                    apply_semantic_edit(&s, &a).unwrap();
                }
            }
        }
    }

    #[test]
    fn masked_input_matches_per_pixel_select() {
        let s = scene_with(3, 9);
        let x = render(&s);
        let mut rng = SeededRng::new(5);
        let m = Mask::from_fn(32, 32, |_, _| false);
        assert_eq!(build_masked_input(&x, &m).unwrap(), x);
        let all = build_masked_input(&x, &Mask::ones(32, 32)).unwrap();
        assert!(all.data().iter().all(|&v| v == 0.0));
        let bits: Vec<bool> = (0..32 * 32).map(|_| rng.bernoulli(0.5)).collect();
        let m = Mask::from_fn(32, 32, |px, py| bits[py * 32 + px]);
        let out = build_masked_input(&x, &m).unwrap();
        for py in 0..32 {
            for px in 0..32 {
                let expect = if bits[py * 32 + px] { [0.0; 3] } else { x.pixel(px, py) };
                assert_eq!(out.pixel(px, py), expect);
            }
        }
        assert!(build_masked_input(&x, &Mask::zeros(4, 4)).is_err());
    }

    #[test]
    fn ignore_instruction_returns_source() {
        let s = scene_with(2, 1);
        let ins = synth_instruction(&s, EditTask::ObjRemoval, 1).unwrap();
        let cfg = CorruptionConfig {
            p_corrupt: 1.0,
            ghost_residual: 0.0,
            wrong_color: 0.0,
            off_target: 0.0,
            global_noise: 0.0,
            ignore_instruction: 1.0,
        };
        let r = gen_pair("x", &s, &ins, &cfg, 0).unwrap();
        assert_eq!(r.edited, r.src);
        assert_eq!(r.corruption_log, vec![Corruption::IgnoreInstruction]);
    }

    #[test]
    fn invert_removal_requires_removal() {
        let s = scene_with(2, 4);
        let ins = synth_instruction(&s, EditTask::Attribute, 0).unwrap();
        let r = gen_pair("a", &s, &ins, &CorruptionConfig::clean(), 0).unwrap();
        assert!(invert_removal(&r).is_err());
    }

    #[test]
    fn inverted_removal_mentions_the_object() {
        let mut s = scene_with(2, 8);
        s.objects[0].color = Color::Red;
        s.objects[0].shape = ShapeKind::Circle;
        s.background = Background::Solid { color: Color::White };
        let ins = Instruction::new(EditArgs::ObjRemoval { target: ObjectRef::of(&s.objects[0]) });
        let r = gen_pair("r", &s, &ins, &CorruptionConfig::clean(), 0).unwrap();
        let inv = invert_removal(&r).unwrap();
        assert_eq!(inv.task(), EditTask::ObjAddition);
        assert_eq!(inv.instruction.surface_text, "Add a red circle to the image.");
        assert_eq!(swap_roles(&swap_roles(&r)), r);
    }

    #[test]
    fn corruption_config_validation() {
        CorruptionConfig::default().validate().unwrap();
        let mut c = CorruptionConfig::default();
        c.global_noise = 0.5;
        assert!(c.validate().is_err());
        c = CorruptionConfig::default();
        c.p_corrupt = 1.5;
        assert!(c.validate().is_err());
    }
}
