use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "star"];
pub const COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];
pub const SIZES: [&str; 2] = ["small", "big"];
pub const POSITIONS: [&str; 3] = ["left", "center", "right"];

/// One object; every field indexes the matching attribute table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Object {
    pub shape: u8,
    pub color: u8,
    pub size: u8,
    pub position: u8,
}

impl Object {
    pub fn validate(&self) -> Result<()> {
        if self.shape as usize >= SHAPES.len()
            || self.color as usize >= COLORS.len()
            || self.size as usize >= SIZES.len()
            || self.position as usize >= POSITIONS.len()
        {
            return Err(Error::invalid(format!("object attributes out of range: {self:?}")));
        }
        Ok(())
    }

    fn words(&self) -> [&'static str; 3] {
        [
            SIZES[self.size as usize],
            COLORS[self.color as usize],
            SHAPES[self.shape as usize],
        ]
    }
}

/// 1–3 objects at distinct positions, ordered left to right.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Scene {
    pub objects: Vec<Object>,
}

/// Scene attributes a view may expose.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Attribute {
    Shape,
    Color,
    Size,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Shape, Attribute::Color, Attribute::Size];

    pub fn classes(self) -> usize {
        match self {
            Attribute::Shape => SHAPES.len(),
            Attribute::Color => COLORS.len(),
            Attribute::Size => SIZES.len(),
        }
    }

    pub fn of(self, o: &Object) -> usize {
        match self {
            Attribute::Shape => o.shape as usize,
            Attribute::Color => o.color as usize,
            Attribute::Size => o.size as usize,
        }
    }
}

/// Number of caption templates; every scene admits all of them.
pub const TEMPLATE_COUNT: usize = 5;

const COUNT_WORDS: [&str; 3] = ["one", "two", "three"];

impl Scene {
    pub fn new(mut objects: Vec<Object>) -> Result<Self> {
        if objects.is_empty() || objects.len() > 3 {
            return Err(Error::invalid(format!("a scene holds 1 to 3 objects, got {}", objects.len())));
        }
        for o in &objects {
            o.validate()?;
        }
        objects.sort_by_key(|o| o.position);
        if objects.windows(2).any(|w| w[0].position == w[1].position) {
            return Err(Error::invalid("two objects share a position"));
        }
        Ok(Scene { objects })
    }

    pub fn random(rng: &mut Rng) -> Self {
        let n = 1 + rng.below(3);
        let mut slots = [0u8, 1, 2];
        rng.shuffle(&mut slots);
        let objects = slots[..n]
            .iter()
            .map(|&position| Object {
                shape: rng.below(SHAPES.len()) as u8,
                color: rng.below(COLORS.len()) as u8,
                size: rng.below(SIZES.len()) as u8,
                position,
            })
            .collect();
        Scene::new(objects).expect("random scene is valid")
    }

    /// Object occupying a position slot.
    pub fn at(&self, position: usize) -> Option<&Object> {
        self.objects.iter().find(|o| o.position as usize == position)
    }

    /// Caption produced by template `index` (`0..TEMPLATE_COUNT`).
    pub fn caption(&self, index: usize) -> Vec<&'static str> {
        let n = self.objects.len();
        let mut out = Vec::with_capacity(16);
        let desc = |out: &mut Vec<&'static str>, o: &Object| {
            out.push("a");
            out.extend(o.words());
        };
        match index {
            0 => {
                for (i, o) in self.objects.iter().enumerate() {
                    if i > 0 {
                        out.push("and");
                    }
                    desc(&mut out, o);
                }
            }
            1 => {
                if n == 1 {
                    let o = &self.objects[0];
                    desc(&mut out, o);
                    if o.position == 1 {
                        out.extend(["in", "the", "center"]);
                    } else {
                        out.extend(["on", "the", POSITIONS[o.position as usize]]);
                    }
                } else {
                    for (i, o) in self.objects.iter().enumerate() {
                        if i > 0 {
                            out.extend(["left", "of"]);
                        }
                        desc(&mut out, o);
                    }
                }
            }
            2 => {
                out.push(COUNT_WORDS[n - 1]);
                out.push(if n == 1 { "shape" } else { "shapes" });
                for (i, o) in self.objects.iter().enumerate() {
                    if i > 0 {
                        out.push("and");
                    }
                    desc(&mut out, o);
                }
            }
            3 => {
                if n == 1 {
                    out.extend(["a", "single"]);
                    out.extend(self.objects[0].words());
                } else {
                    for (i, o) in self.objects.iter().rev().enumerate() {
                        if i > 0 {
                            out.extend(["right", "of"]);
                        }
                        desc(&mut out, o);
                    }
                }
            }
            4 => {
                if n == 1 {
                    out.push("just");
                }
                for (i, o) in self.objects.iter().enumerate() {
                    if i > 0 {
                        out.push("and");
                    }
                    out.extend(o.words());
                }
            }
            _ => panic!("template index {index} out of range"),
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(shape: u8, color: u8, size: u8, position: u8) -> Object {
        Object {
            shape,
            color,
            size,
            position,
        }
    }

    #[test]
    fn templates_render() {
        let s = Scene::new(vec![obj(1, 1, 0, 2), obj(0, 0, 1, 0)]).unwrap();
        let j = |t: usize| s.caption(t).join(" ");
        assert_eq!(j(0), "a big red circle and a small blue square");
        assert_eq!(j(1), "a big red circle left of a small blue square");
        assert_eq!(j(2), "two shapes a big red circle and a small blue square");
        assert_eq!(j(3), "a small blue square right of a big red circle");
        assert_eq!(j(4), "big red circle and small blue square");
        let one = Scene::new(vec![obj(3, 3, 1, 1)]).unwrap();
        assert_eq!(one.caption(1).join(" "), "a big yellow star in the center");
        assert_eq!(one.caption(3).join(" "), "a single big yellow star");
        assert_eq!(one.caption(4).join(" "), "just big yellow star");
    }

    #[test]
    fn captions_fit_sixteen_tokens() {
        let s = Scene::new(vec![obj(0, 0, 0, 0), obj(1, 1, 1, 1), obj(2, 2, 0, 2)]).unwrap();
        for t in 0..TEMPLATE_COUNT {
            assert!(s.caption(t).len() <= 16, "template {t}: {:?}", s.caption(t));
        }
    }

    #[test]
    fn rejects_invalid_scenes() {
        assert!(Scene::new(vec![]).is_err());
        assert!(Scene::new(vec![obj(0, 0, 0, 1), obj(1, 1, 1, 1)]).is_err());
        assert!(Scene::new(vec![obj(4, 0, 0, 0)]).is_err());
    }

    #[test]
    fn random_scenes_are_sorted_and_valid() {
        let mut rng = Rng::new(4);
        for _ in 0..200 {
            let s = Scene::random(&mut rng);
            assert!(s.objects.windows(2).all(|w| w[0].position < w[1].position));
            assert!((1..=3).contains(&s.objects.len()));
        }
    }
}
