//! Structured edit instructions, their templated surface text, and the closed
//! word-level tokenizer used for text conditioning.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microworld::{Background, Color, Environment, Object, ShapeKind, Style};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditTask {
    ObjSwap,
    ObjRemoval,
    ObjAddition,
    Attribute,
    BackgroundSwap,
    Environment,
    Style,
}

impl EditTask {
    pub const ALL: [EditTask; 7] = [
        EditTask::ObjSwap,
        EditTask::ObjRemoval,
        EditTask::ObjAddition,
        EditTask::Attribute,
        EditTask::BackgroundSwap,
        EditTask::Environment,
        EditTask::Style,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EditTask::ObjSwap => "obj_swap",
            EditTask::ObjRemoval => "obj_removal",
            EditTask::ObjAddition => "obj_addition",
            EditTask::Attribute => "attribute",
            EditTask::BackgroundSwap => "background_swap",
            EditTask::Environment => "environment",
            EditTask::Style => "style",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        EditTask::ALL
            .into_iter()
            .find(|t| t.name() == tag)
            .ok_or_else(|| Error::UnknownTask(tag.to_string()))
    }

    pub fn index(self) -> usize {
        EditTask::ALL.iter().position(|&t| t == self).unwrap()
    }
}

impl fmt::Display for EditTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Identifies an object in the source scene by id, with its descriptor for
/// rendering text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRef {
    pub id: u32,
    pub shape: ShapeKind,
    pub color: Color,
}

impl ObjectRef {
    pub fn of(o: &Object) -> Self {
        Self { id: o.id, shape: o.shape, color: o.color }
    }

    pub fn describe(&self) -> String {
        format!("{} {}", self.color.name(), self.shape.name())
    }
}

/// Coarse image region named in addition instructions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

impl Region {
    pub fn of_point(center: [f64; 2]) -> Self {
        let [x, y] = center;
        if (x - 0.5).abs() < 0.15 && (y - 0.5).abs() < 0.15 {
            return Region::Center;
        }
        match (x < 0.5, y < 0.5) {
            (true, true) => Region::TopLeft,
            (false, true) => Region::TopRight,
            (true, false) => Region::BottomLeft,
            (false, false) => Region::BottomRight,
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            Region::TopLeft => "top left",
            Region::TopRight => "top right",
            Region::BottomLeft => "bottom left",
            Region::BottomRight => "bottom right",
            Region::Center => "center",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditArgs {
    ObjSwap { target: ObjectRef, new_shape: ShapeKind, new_color: Color, new_radius: f64 },
    ObjRemoval { target: ObjectRef },
    ObjAddition { shape: ShapeKind, color: Color, center: [f64; 2], radius: f64, region: Option<Region> },
    Attribute { target: ObjectRef, new_color: Color },
    BackgroundSwap { background: Background },
    Environment { from: Environment, to: Environment },
    Style { from: Style, to: Style },
}

impl EditArgs {
    pub fn task(&self) -> EditTask {
        match self {
            EditArgs::ObjSwap { .. } => EditTask::ObjSwap,
            EditArgs::ObjRemoval { .. } => EditTask::ObjRemoval,
            EditArgs::ObjAddition { .. } => EditTask::ObjAddition,
            EditArgs::Attribute { .. } => EditTask::Attribute,
            EditArgs::BackgroundSwap { .. } => EditTask::BackgroundSwap,
            EditArgs::Environment { .. } => EditTask::Environment,
            EditArgs::Style { .. } => EditTask::Style,
        }
    }

    /// Per-task template.
    pub fn surface_text(&self) -> String {
        match self {
            EditArgs::ObjSwap { target, new_shape, new_color, .. } => format!(
                "Replace the {} with a {} {} in the image.",
                target.describe(),
                new_color.name(),
                new_shape.name()
            ),
            EditArgs::ObjRemoval { target } => format!("Remove the {} from the image.", target.describe()),
            EditArgs::ObjAddition { shape, color, region, .. } => match region {
                Some(r) => format!("Add a {} {} to the {} of the image.", color.name(), shape.name(), r.phrase()),
                None => format!("Add a {} {} to the image.", color.name(), shape.name()),
            },
            EditArgs::Attribute { target, new_color } => format!(
                "Change the {} to a {} {}.",
                target.describe(),
                new_color.name(),
                target.shape.name()
            ),
            EditArgs::BackgroundSwap { background } => {
                format!("Replace the background with {}.", background.describe())
            }
            EditArgs::Environment { to: Environment::Night, .. } => {
                "Change the scene from daytime to nighttime.".to_string()
            }
            EditArgs::Environment { .. } => "Change the scene from nighttime to daytime.".to_string(),
            EditArgs::Style { to: Style::Plain, .. } => "Restore the plain style of the image.".to_string(),
            EditArgs::Style { to, .. } => format!("Apply a {} style to the image.", to.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub task: EditTask,
    pub args: EditArgs,
    pub surface_text: String,
}

impl Instruction {
    pub fn new(args: EditArgs) -> Self {
        Self { task: args.task(), surface_text: args.surface_text(), args }
    }

    /// Task tag agrees with args and the text is non-empty.
    pub fn validate(&self) -> Result<()> {
        if self.args.task() != self.task {
            return Err(Error::Invalid(format!(
                "task tag {} does not match args for {}",
                self.task,
                self.args.task()
            )));
        }
        if self.surface_text.trim().is_empty() {
            return Err(Error::Invalid("empty surface text".into()));
        }
        Ok(())
    }
}

pub const SEQ_LEN: usize = 16;
pub const VOCAB_SIZE: usize = 64;
pub const PAD: usize = 0;
pub const UNK: usize = 1;

const WORDS: [&str; 45] = [
    "<pad>", "<unk>", "red", "orange", "yellow", "green", "cyan", "blue", "purple", "white", "circle",
    "square", "triangle", "replace", "the", "with", "a", "in", "image", "remove", "from", "add", "to",
    "of", "top", "bottom", "left", "right", "center", "change", "background", "solid", "and",
    "two-tone", "scene", "daytime", "nighttime", "apply", "sepia", "posterized", "plain", "style",
    "restore", "on", "night",
];

/// Closed word-level tokenizer: lower-cases, strips punctuation other than
/// hyphens, pads or truncates to [`SEQ_LEN`]. Ids past the named words are
/// reserved and never produced.
pub fn tokenize(text: &str) -> Vec<usize> {
    let mut ids: Vec<usize> = text
        .split_whitespace()
        .map(|w| {
            let w: String = w
                .chars()
                .filter(|c| c.is_alphanumeric() || *c == '-')
                .flat_map(char::to_lowercase)
                .collect();
            WORDS.iter().position(|&v| v == w).unwrap_or(UNK)
        })
        .take(SEQ_LEN)
        .collect();
    ids.resize(SEQ_LEN, PAD);
    ids
}

pub fn vocabulary() -> &'static [&'static str] {
    &WORDS
}
