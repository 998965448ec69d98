use crate::error::{Error, Result};
use crate::instruction::{EditArgs, Instruction, ObjectRef};

use super::{Object, Scene};

fn locate(scene: &Scene, target: &ObjectRef) -> Result<usize> {
    let k = scene.objects.iter().position(|o| o.id == target.id).ok_or(Error::MissingReferent(target.id))?;
    let o = &scene.objects[k];
    if o.shape != target.shape || o.color != target.color {
        return Err(Error::Infeasible(format!(
            "object {} is a {} but the instruction refers to a {}",
            o.id,
            o.describe(),
            target.describe()
        )));
    }
    Ok(k)
}

/// The exactly-edited scene graph. Fields the instruction does not target are
/// left untouched; a replaced object keeps its id.
pub fn apply_semantic_edit(scene: &Scene, instruction: &Instruction) -> Result<Scene> {
    instruction.validate()?;
    let mut out = scene.clone();
    match &instruction.args {
        EditArgs::ObjSwap { target, new_shape, new_color, new_radius } => {
            let k = locate(scene, target)?;
            let replaced = Object { shape: *new_shape, color: *new_color, radius: *new_radius, ..scene.objects[k].clone() };
            if !scene.placement_ok(&replaced, Some(target.id)) {
                return Err(Error::Infeasible(format!("replacement {} does not fit", replaced.describe())));
            }
            out.objects[k] = replaced;
        }
        EditArgs::ObjRemoval { target } => {
            let k = locate(scene, target)?;
            out.objects.remove(k);
        }
        EditArgs::ObjAddition { shape, color, center, radius, .. } => {
            if scene.objects.len() >= 5 {
                return Err(Error::Infeasible("scene already holds five objects".into()));
            }
            let obj = Object { id: scene.next_object_id(), shape: *shape, color: *color, center: *center, radius: *radius };
            if !scene.placement_ok(&obj, None) {
                return Err(Error::Infeasible(format!("no room for {} at {:?}", obj.describe(), center)));
            }
            out.objects.push(obj);
        }
        EditArgs::Attribute { target, new_color } => {
            let k = locate(scene, target)?;
            out.objects[k].color = *new_color;
        }
        EditArgs::BackgroundSwap { background } => out.background = background.clone(),
        EditArgs::Environment { from, to } => {
            if scene.environment != *from {
                return Err(Error::Infeasible(format!("scene environment is not {from:?}")));
            }
            out.environment = *to;
        }
        EditArgs::Style { from, to } => {
            if scene.style != *from {
                return Err(Error::Infeasible(format!("scene style is not {}", from.name())));
            }
            out.style = *to;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microworld::{sample_scene, AspectBucket, Color, Style};

    fn scene() -> Scene {
        (0..).map(|s| sample_scene(s, AspectBucket::Square).unwrap()).find(|s| s.objects.len() >= 2).unwrap()
    }

    #[test]
    fn removal_drops_exactly_the_target() {
        let s = scene();
        let t = ObjectRef::of(&s.objects[0]);
        let e = apply_semantic_edit(&s, &Instruction::new(EditArgs::ObjRemoval { target: t })).unwrap();
        assert_eq!(e.objects.len(), s.objects.len() - 1);
        assert!(e.object(t.id).is_none());
        assert_eq!(e.objects[..], s.objects[1..]);
        assert_eq!((e.background.clone(), e.environment, e.style), (s.background.clone(), s.environment, s.style));
    }

    #[test]
    fn attribute_changes_only_colour() {
        let s = scene();
        let t = ObjectRef::of(&s.objects[1]);
        let new_color = Color::ALL.into_iter().find(|&c| c != t.color).unwrap();
        let e = apply_semantic_edit(&s, &Instruction::new(EditArgs::Attribute { target: t, new_color })).unwrap();
        let mut expect = s.clone();
        expect.objects[1].color = new_color;
        assert_eq!(e, expect);
    }

    #[test]
    fn style_changes_only_style() {
        let mut s = scene();
        s.style = Style::Plain;
        let e = apply_semantic_edit(&s, &Instruction::new(EditArgs::Style { from: Style::Plain, to: Style::Sepia })).unwrap();
        assert_eq!(e.objects, s.objects);
        assert_eq!(e.background, s.background);
        assert_eq!(e.style, Style::Sepia);
    }

    #[test]
    fn missing_referent_is_reported() {
        let s = scene();
        let t = ObjectRef { id: 77, ..ObjectRef::of(&s.objects[0]) };
        let err = apply_semantic_edit(&s, &Instruction::new(EditArgs::ObjRemoval { target: t })).unwrap_err();
        assert!(matches!(err, Error::MissingReferent(77)));
    }

    #[test]
    fn overlapping_addition_is_infeasible() {
        let s = scene();
        let o = &s.objects[0];
        let args = EditArgs::ObjAddition { shape: o.shape, color: o.color, center: o.center, radius: o.radius, region: None };
        assert!(matches!(apply_semantic_edit(&s, &Instruction::new(args)), Err(Error::Infeasible(_))));
    }
}
