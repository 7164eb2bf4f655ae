use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::rfnet::{EncoderOutput, ViewFeatures};

use super::scene::{Attribute, Scene, COLORS, POSITIONS, SHAPES, SIZES};

/// Attribute subsets handed to views in order: every pair first (each
/// hiding one attribute), then single attributes.
pub const INFO_MASKS: [&[Attribute]; 6] = [
    &[Attribute::Shape, Attribute::Color],
    &[Attribute::Shape, Attribute::Size],
    &[Attribute::Color, Attribute::Size],
    &[Attribute::Shape],
    &[Attribute::Color],
    &[Attribute::Size],
];

/// presence + shape + color + size one-hots + position one-hot
const SLOT_WIDTH: usize = 1 + SHAPES.len() + COLORS.len() + SIZES.len() + POSITIONS.len();

/// Fixed random map from a scene to one view's features. Annotation
/// vector `i` of `k` describes position slot `⌊3i/k⌋`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticEncoder {
    pub view: usize,
    pub cells: usize,
    pub dim: usize,
    pub info_mask: Vec<Attribute>,
    pub noise: f64,
    projection: Tensor,
}

impl SyntheticEncoder {
    pub fn new(view: usize, cells: usize, dim: usize, noise: f64, seed: u64) -> Result<Self> {
        let mask = INFO_MASKS
            .get(view)
            .ok_or_else(|| Error::invalid(format!("at most {} distinct views are supported", INFO_MASKS.len())))?;
        if cells < POSITIONS.len() {
            return Err(Error::invalid(format!(
                "view {view}: {cells} annotation cells cannot cover {} positions",
                POSITIONS.len()
            )));
        }
        if dim == 0 {
            return Err(Error::invalid(format!("view {view}: feature width must be positive")));
        }
        if !(noise >= 0.0) {
            return Err(Error::invalid("noise must be non-negative"));
        }
        let mut rng = Rng::with_stream(seed, u64::MAX - view as u64);
        let data = (0..SLOT_WIDTH * dim).map(|_| 0.5 * rng.normal()).collect();
        Ok(SyntheticEncoder {
            view,
            cells,
            dim,
            info_mask: mask.to_vec(),
            noise,
            projection: Tensor::new(SLOT_WIDTH, dim, data)?,
        })
    }

    pub fn exposes(&self, a: Attribute) -> bool {
        self.info_mask.contains(&a)
    }

    /// Slot description before projection; hidden attributes stay zero.
    pub fn slot_code(&self, scene: &Scene, position: usize) -> [f64; SLOT_WIDTH] {
        let mut code = [0.0; SLOT_WIDTH];
        let pos_base = SLOT_WIDTH - POSITIONS.len();
        code[pos_base + position] = 1.0;
        if let Some(o) = scene.at(position) {
            code[0] = 1.0;
            let mut base = 1;
            for a in Attribute::ALL {
                if self.exposes(a) {
                    code[base + a.of(o)] = 1.0;
                }
                base += a.classes();
            }
        }
        code
    }

    /// Annotation vectors plus their mean as the global vector; `rng`
    /// supplies the additive Gaussian noise.
    pub fn encode(&self, scene: &Scene, rng: &mut Rng) -> ViewFeatures {
        let codes: Vec<_> = (0..POSITIONS.len()).map(|p| self.slot_code(scene, p)).collect();
        let mut ann = Tensor::zeros(self.cells, self.dim);
        for i in 0..self.cells {
            let code = &codes[i * POSITIONS.len() / self.cells];
            let row = ann.row_slice_mut(i);
            for (j, &x) in code.iter().enumerate() {
                if x != 0.0 {
                    for (r, w) in row.iter_mut().zip(self.projection.row_slice(j)) {
                        *r += x * w;
                    }
                }
            }
            for r in row.iter_mut() {
                *r += self.noise * rng.normal();
            }
        }
        let mut global = vec![0.0; self.dim];
        for i in 0..self.cells {
            for (g, a) in global.iter_mut().zip(ann.row_slice(i)) {
                *g += a;
            }
        }
        for g in &mut global {
            *g /= self.cells as f64;
        }
        ViewFeatures {
            global,
            annotations: ann,
        }
    }
}

/// Encode a scene with every view in order.
pub fn encode_scene(encoders: &[SyntheticEncoder], scene: &Scene, rng: &mut Rng) -> EncoderOutput {
    EncoderOutput {
        views: encoders.iter().map(|e| e.encode(scene, rng)).collect(),
    }
}
