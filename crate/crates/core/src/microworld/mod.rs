//! Procedural shape world: scenes of coloured shapes on simple backgrounds,
//! rendered hard-edged so that masks and edits are exact.

mod edit;
mod raster;
mod render;
mod sample;

use serde::{Deserialize, Serialize};

pub use edit::apply_semantic_edit;
pub use raster::{Mask, Raster};
pub use render::{dilate, foreground_mask, label_map, object_mask, render};
pub use sample::{distinguishable, object_palette, MIN_CONTRAST, sample_scene, SceneSampler, PLACEMENT_TRIES};

use crate::error::{Error, Result};

/// Model patch size; every bucket dimension is a multiple of it.
pub const PATCH: usize = 4;

/// The eight palette colours. Declaration order is the palette ring used for
/// "adjacent colour" substitutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Orange,
    Yellow,
    Green,
    Cyan,
    Blue,
    Purple,
    White,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Orange,
        Color::Yellow,
        Color::Green,
        Color::Cyan,
        Color::Blue,
        Color::Purple,
        Color::White,
    ];

    /// | name   | R    | G    | B    |
    /// |--------|------|------|------|
    /// | red    | 0.90 | 0.10 | 0.10 |
    /// | orange | 1.00 | 0.55 | 0.00 |
    /// | yellow | 0.95 | 0.90 | 0.10 |
    /// | green  | 0.10 | 0.70 | 0.20 |
    /// | cyan   | 0.10 | 0.80 | 0.85 |
    /// | blue   | 0.15 | 0.25 | 0.90 |
    /// | purple | 0.60 | 0.20 | 0.75 |
    /// | white  | 1.00 | 1.00 | 1.00 |
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.90, 0.10, 0.10],
            Color::Orange => [1.00, 0.55, 0.00],
            Color::Yellow => [0.95, 0.90, 0.10],
            Color::Green => [0.10, 0.70, 0.20],
            Color::Cyan => [0.10, 0.80, 0.85],
            Color::Blue => [0.15, 0.25, 0.90],
            Color::Purple => [0.60, 0.20, 0.75],
            Color::White => [1.00, 1.00, 1.00],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Orange => "orange",
            Color::Yellow => "yellow",
            Color::Green => "green",
            Color::Cyan => "cyan",
            Color::Blue => "blue",
            Color::Purple => "purple",
            Color::White => "white",
        }
    }

    pub fn index(self) -> usize {
        Color::ALL.iter().position(|&c| c == self).unwrap()
    }

    /// Next colour around the palette ring.
    pub fn next(self) -> Color {
        Color::ALL[(self.index() + 1) % Color::ALL.len()]
    }

    /// First colour after `self` on the ring that is not in `avoid`.
    pub fn adjacent_avoiding(self, avoid: &[Color]) -> Option<Color> {
        let mut c = self.next();
        for _ in 0..Color::ALL.len() {
            if c != self && !avoid.contains(&c) {
                return Some(c);
            }
            c = c.next();
        }
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Circumradius as a multiple of the object's radius.
    pub fn extent(self) -> f64 {
        match self {
            ShapeKind::Circle => 1.0,
            ShapeKind::Square | ShapeKind::Triangle => std::f64::consts::SQRT_2,
        }
    }
}

/// One shape. `center` is `[x, y]` in normalised `[0,1]²` image coordinates;
/// `radius` is normalised by the shorter image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub id: u32,
    pub shape: ShapeKind,
    pub color: Color,
    pub center: [f64; 2],
    pub radius: f64,
}

impl Object {
    pub fn describe(&self) -> String {
        format!("{} {}", self.color.name(), self.shape.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Background {
    Solid { color: Color },
    /// Left half one colour, right half the other.
    TwoToneVertical { left: Color, right: Color },
}

impl Background {
    pub fn colors(&self) -> Vec<Color> {
        match *self {
            Background::Solid { color } => vec![color],
            Background::TwoToneVertical { left, right } => vec![left, right],
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            Background::Solid { color } => format!("a solid {} background", color.name()),
            Background::TwoToneVertical { left, right } => {
                format!("a {} and {} two-tone background", left.name(), right.name())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Environment {
    Day,
    Night,
}

impl Environment {
    /// Per-channel gain applied to the whole image. Night is a strict,
    /// blue-tinted darkening.
    pub fn gain(self) -> [f32; 3] {
        match self {
            Environment::Day => [1.0, 1.0, 1.0],
            Environment::Night => [0.35, 0.40, 0.60],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Plain,
    Sepia,
    Posterized,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Plain, Style::Sepia, Style::Posterized];

    pub fn name(self) -> &'static str {
        match self {
            Style::Plain => "plain",
            Style::Sepia => "sepia",
            Style::Posterized => "posterized",
        }
    }
}

/// Aspect-ratio bucket with fixed patch-aligned pixel dims of roughly 1024 px.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AspectBucket {
    #[serde(rename = "1:1")]
    Square,
    #[serde(rename = "3:4")]
    Portrait3x4,
    #[serde(rename = "4:3")]
    Landscape4x3,
    #[serde(rename = "2:3")]
    Portrait2x3,
    #[serde(rename = "3:2")]
    Landscape3x2,
    #[serde(rename = "9:16")]
    Portrait9x16,
    #[serde(rename = "16:9")]
    Landscape16x9,
}

impl AspectBucket {
    pub const ALL: [AspectBucket; 7] = [
        AspectBucket::Square,
        AspectBucket::Portrait3x4,
        AspectBucket::Landscape4x3,
        AspectBucket::Portrait2x3,
        AspectBucket::Landscape3x2,
        AspectBucket::Portrait9x16,
        AspectBucket::Landscape16x9,
    ];

    /// `(width, height)` in pixels.
    pub fn dims(self) -> (usize, usize) {
        match self {
            AspectBucket::Square => (32, 32),
            AspectBucket::Portrait3x4 => (28, 36),
            AspectBucket::Landscape4x3 => (36, 28),
            AspectBucket::Portrait2x3 => (24, 40),
            AspectBucket::Landscape3x2 => (40, 24),
            AspectBucket::Portrait9x16 => (24, 44),
            AspectBucket::Landscape16x9 => (44, 24),
        }
    }

    pub fn width(self) -> usize {
        self.dims().0
    }

    pub fn height(self) -> usize {
        self.dims().1
    }

    pub fn name(self) -> &'static str {
        match self {
            AspectBucket::Square => "1:1",
            AspectBucket::Portrait3x4 => "3:4",
            AspectBucket::Landscape4x3 => "4:3",
            AspectBucket::Portrait2x3 => "2:3",
            AspectBucket::Landscape3x2 => "3:2",
            AspectBucket::Portrait9x16 => "9:16",
            AspectBucket::Landscape16x9 => "16:9",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        AspectBucket::ALL
            .into_iter()
            .find(|b| b.name() == name)
            .ok_or_else(|| Error::Invalid(format!("unknown aspect bucket `{name}`")))
    }

    /// Shorter side in pixels; object radii are measured against it.
    pub fn min_side(self) -> usize {
        self.width().min(self.height())
    }
}

/// Ground-truth scene graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub bucket: AspectBucket,
    pub objects: Vec<Object>,
    pub background: Background,
    pub environment: Environment,
    pub style: Style,
}

impl Scene {
    pub fn object(&self, id: u32) -> Option<&Object> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn next_object_id(&self) -> u32 {
        self.objects.iter().map(|o| o.id + 1).max().unwrap_or(0)
    }

    /// Pixel-space centre `(x, y)` and radius of an object at this scene's bucket.
    pub fn pixel_geometry(&self, o: &Object) -> (f64, f64, f64) {
        let (w, h) = self.bucket.dims();
        (o.center[0] * w as f64, o.center[1] * h as f64, o.radius * self.bucket.min_side() as f64)
    }

    /// Whether `o` lies fully on canvas and keeps a ≥ 2 px gap to every
    /// object in the scene except `ignore`.
    pub fn placement_ok(&self, o: &Object, ignore: Option<u32>) -> bool {
        let (w, h) = self.bucket.dims();
        let (x, y, r) = self.pixel_geometry(o);
        let ext = r * o.shape.extent();
        if r <= 0.0 || x - ext < 0.0 || y - ext < 0.0 || x + ext > w as f64 || y + ext > h as f64 {
            return false;
        }
        self.objects.iter().filter(|p| Some(p.id) != ignore).all(|p| {
            let (px, py, pr) = self.pixel_geometry(p);
            let d = ((x - px).powi(2) + (y - py).powi(2)).sqrt();
            d >= ext + pr * p.shape.extent() + 2.0
        })
    }

    /// Short caption used to condition the text-to-image base model.
    pub fn caption(&self) -> String {
        let mut words: Vec<&str> = Vec::new();
        for o in &self.objects {
            words.push(o.color.name());
            words.push(o.shape.name());
        }
        words.push("on");
        for c in self.background.colors() {
            words.push(c.name());
        }
        if self.environment == Environment::Night {
            words.push("night");
        }
        if self.style != Style::Plain {
            words.push(self.style.name());
        }
        words.join(" ")
    }

    /// Canonical JSON with stable key order.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scene serialises")
    }
}
