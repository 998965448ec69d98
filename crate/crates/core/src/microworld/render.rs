use crate::error::{Error, Result};

use super::{Background, Environment, Mask, Object, Raster, Scene, ShapeKind, Style};

/// Whether the pixel with top-left corner `(px, py)` belongs to `o`, sampled
/// at the pixel centre.
fn covers(scene: &Scene, o: &Object, px: usize, py: usize) -> bool {
    let (cx, cy, r) = scene.pixel_geometry(o);
    let dx = px as f64 + 0.5 - cx;
    let dy = py as f64 + 0.5 - cy;
    match o.shape {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
        // Apex at (0, -r), base along y = +r spanning x ∈ [-r, r].
        ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
    }
}

/// Index into `scene.objects` of the object drawn at each pixel.
pub fn label_map(scene: &Scene) -> Vec<Option<usize>> {
    let (w, h) = scene.bucket.dims();
    let mut labels = vec![None; w * h];
    for (k, o) in scene.objects.iter().enumerate() {
        let (cx, cy, r) = scene.pixel_geometry(o);
        let ext = r * o.shape.extent() + 1.0;
        let x0 = (cx - ext).floor().max(0.0) as usize;
        let y0 = (cy - ext).floor().max(0.0) as usize;
        let x1 = ((cx + ext).ceil().max(0.0) as usize).min(w);
        let y1 = ((cy + ext).ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                if covers(scene, o, x, y) {
                    labels[y * w + x] = Some(k);
                }
            }
        }
    }
    labels
}

fn sepia(p: [f32; 3]) -> [f32; 3] {
    let [r, g, b] = p;
    [
        0.393 * r + 0.769 * g + 0.189 * b,
        0.349 * r + 0.686 * g + 0.168 * b,
        0.272 * r + 0.534 * g + 0.131 * b,
    ]
}

fn posterize(p: [f32; 3]) -> [f32; 3] {
    p.map(|v| (v * 3.0).round() / 3.0)
}

/// Applies the environment tint and then the style transform to a base colour.
pub(crate) fn finish_pixel(p: [f32; 3], env: Environment, style: Style) -> [f32; 3] {
    let gain = env.gain();
    let lit = [p[0] * gain[0], p[1] * gain[1], p[2] * gain[2]];
    let out = match style {
        Style::Plain => lit,
        Style::Sepia => sepia(lit),
        Style::Posterized => posterize(lit),
    };
    out.map(|v| v.clamp(0.0, 1.0))
}

/// Hard-edged rasterisation at the scene's bucket. Environment and style are
/// applied last, in that order.
pub fn render(scene: &Scene) -> Raster {
    let (w, h) = scene.bucket.dims();
    let labels = label_map(scene);
    let mut out = Raster::zeros(scene.bucket);
    for y in 0..h {
        for x in 0..w {
            let base = match labels[y * w + x] {
                Some(k) => scene.objects[k].color.rgb(),
                None => match scene.background {
                    Background::Solid { color } => color.rgb(),
                    Background::TwoToneVertical { left, right } => {
                        if x < w / 2 {
                            left.rgb()
                        } else {
                            right.rgb()
                        }
                    }
                },
            };
            out.set_pixel(x, y, finish_pixel(base, scene.environment, scene.style));
        }
    }
    out
}

/// Exactly the pixels the renderer assigns to object `id`.
pub fn object_mask(scene: &Scene, id: u32) -> Result<Mask> {
    let k = scene.objects.iter().position(|o| o.id == id).ok_or(Error::MissingReferent(id))?;
    let (w, h) = scene.bucket.dims();
    let labels = label_map(scene);
    Ok(Mask::from_fn(w, h, |x, y| labels[y * w + x] == Some(k)))
}

/// Union of all object masks.
pub fn foreground_mask(scene: &Scene) -> Mask {
    let (w, h) = scene.bucket.dims();
    let labels = label_map(scene);
    Mask::from_fn(w, h, |x, y| labels[y * w + x].is_some())
}

/// Morphological dilation with a `(2r+1)×(2r+1)` square, clipped at borders.
pub fn dilate(mask: &Mask, r: usize) -> Mask {
    if r == 0 {
        return mask.clone();
    }
    let (w, h) = mask.dims();
    // Separable: a square element is a horizontal pass followed by a vertical one.
    let mut horiz = Mask::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            if (lo..=hi).any(|xx| mask.get(xx, y)) {
                horiz.set(x, y, true);
            }
        }
    }
    let mut out = Mask::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            if (lo..=hi).any(|yy| horiz.get(x, yy)) {
                out.set(x, y, true);
            }
        }
    }
    out
}
