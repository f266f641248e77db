//! Browser demo over `bsfa-core`: synthetic misalignment and its inverse,
//! coarse-to-fine field accumulation, and the fusion metrics.
//!
//! Every operation also has a plain Rust entry point so it can be tested
//! natively; the `#[wasm_bindgen]` wrappers only convert errors.

use bsfa_core::data::{derive_seed, synthetic_shapes, Modality};
use bsfa_core::deformation::{accumulate_pyramid, invert_field, synthesize_deformation, warp, Interval};
use bsfa_core::{DeformationField, Image, MetricParams, MetricScores, SyntheticDeformationSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

const INVERT_ITERATIONS: usize = 30;

fn gray_rgba(img: &Image) -> Vec<u8> {
    img.luminance()
        .data()
        .iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

/// Direction as hue, magnitude (relative to `scale`) as brightness.
fn flow_rgba(field: &DeformationField, scale: f64) -> Vec<u8> {
    let scale = if scale > 0.0 { scale } else { 1.0 };
    field
        .dx()
        .iter()
        .zip(field.dy())
        .flat_map(|(&dx, &dy)| {
            let hue = (dy.atan2(dx) / std::f64::consts::TAU).rem_euclid(1.0) * 6.0;
            let v = (dx.hypot(dy) / scale).min(1.0);
            let f = hue.fract();
            let (r, g, b) = match hue as u32 {
                0 => (1.0, f, 0.0),
                1 => (1.0 - f, 1.0, 0.0),
                2 => (0.0, 1.0, f),
                3 => (0.0, 1.0 - f, 1.0),
                4 => (f, 0.0, 1.0),
                _ => (1.0, 0.0, 1.0 - f),
            };
            let c = |x: f64| (255.0 * v * x).round() as u8;
            [c(r), c(g), c(b), 255]
        })
        .collect()
}

/// A reference image, its misaligned copy and the copy pulled back through
/// the approximate inverse field.
#[wasm_bindgen]
pub struct Misalignment {
    size: usize,
    reference: Image,
    moving: Image,
    restored: Image,
    field: DeformationField,
}

impl Misalignment {
    pub fn new(size: usize, seed: u64, rotation_deg: f64, translation: f64, amplitude: f64) -> bsfa_core::Result<Self> {
        let pair = synthetic_shapes(Modality::Ct, 1, size, seed)?.remove(0);
        let spec = SyntheticDeformationSpec {
            rotation_deg: Interval::symmetric(rotation_deg),
            translation_x: Interval::symmetric(translation),
            translation_y: Interval::symmetric(translation),
            elastic_grid: 4,
            elastic_amplitude: amplitude,
            seed,
        };
        let field = synthesize_deformation(&spec, size, size)?;
        let moving = warp(&pair.other, &field)?;
        let restored = warp(&moving, &invert_field(&field, INVERT_ITERATIONS)?)?;
        Ok(Self {
            size,
            reference: pair.other,
            moving,
            restored,
            field,
        })
    }

    /// Mean absolute difference between the restored and reference images,
    /// ignoring a border as wide as the largest displacement.
    pub fn interior_error(&self) -> f64 {
        let m = (self.field.max_norm().ceil() as usize + 1).min(self.size / 2);
        let mut sum = 0.0;
        let mut n = 0;
        for y in m..self.size - m {
            for x in m..self.size - m {
                sum += (self.restored.get(x, y) - self.reference.get(x, y)).abs();
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

#[wasm_bindgen]
impl Misalignment {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn reference(&self) -> Vec<u8> {
        gray_rgba(&self.reference)
    }

    pub fn moving(&self) -> Vec<u8> {
        gray_rgba(&self.moving)
    }

    pub fn restored(&self) -> Vec<u8> {
        gray_rgba(&self.restored)
    }

    pub fn flow(&self) -> Vec<u8> {
        flow_rgba(&self.field, self.field.max_norm())
    }

    pub fn max_displacement(&self) -> f64 {
        self.field.max_norm()
    }

    #[wasm_bindgen(js_name = interiorError)]
    pub fn interior_error_js(&self) -> f64 {
        self.interior_error()
    }
}

#[wasm_bindgen]
pub fn misalign(size: usize, seed: u32, rotation_deg: f64, translation: f64, amplitude: f64) -> Result<Misalignment, JsError> {
    Misalignment::new(size, seed as u64, rotation_deg, translation, amplitude).map_err(|e| JsError::new(&e.to_string()))
}

/// Per-level residual fields, coarsest first, and their full-resolution sum.
#[wasm_bindgen]
pub struct Pyramid {
    levels: Vec<DeformationField>,
    total: DeformationField,
}

impl Pyramid {
    /// `levels` fields whose finest grid is `size × size`; each level draws a
    /// small translation plus elastic residual of `amplitude` pixels on its
    /// own grid.
    pub fn new(levels: usize, size: usize, seed: u64, amplitude: f64) -> bsfa_core::Result<Self> {
        if levels == 0 || size >> (levels - 1) < 2 {
            return Err(bsfa_core::Error::InvalidInput(format!("{levels} levels do not fit a {size} px grid")));
        }
        let fields = (0..levels)
            .map(|i| {
                let s = size >> (levels - 1 - i);
                let spec = SyntheticDeformationSpec {
                    rotation_deg: Interval::ZERO,
                    translation_x: Interval::symmetric(amplitude),
                    translation_y: Interval::symmetric(amplitude),
                    elastic_grid: 3,
                    elastic_amplitude: amplitude,
                    seed: derive_seed(seed, i as u64, 0),
                };
                Ok(synthesize_deformation(&spec, s, s)?.with_level(i as u32 + 1))
            })
            .collect::<bsfa_core::Result<Vec<_>>>()?;
        let total = accumulate_pyramid(&fields)?;
        Ok(Self { levels: fields, total })
    }

    pub fn total(&self) -> &DeformationField {
        &self.total
    }
}

#[wasm_bindgen]
impl Pyramid {
    pub fn count(&self) -> usize {
        self.levels.len()
    }

    pub fn level_size(&self, i: usize) -> usize {
        self.levels.get(i).map(|f| f.width()).unwrap_or(0)
    }

    /// Level `i` on its own grid, coloured against the total's peak.
    pub fn level_flow(&self, i: usize) -> Vec<u8> {
        self.levels
            .get(i)
            .map(|f| flow_rgba(f, self.total.max_norm()))
            .unwrap_or_default()
    }

    pub fn total_flow(&self) -> Vec<u8> {
        flow_rgba(&self.total, self.total.max_norm())
    }

    pub fn max_displacement(&self) -> f64 {
        self.total.max_norm()
    }
}

#[wasm_bindgen]
pub fn pyramid(levels: usize, size: usize, seed: u32, amplitude: f64) -> Result<Pyramid, JsError> {
    Pyramid::new(levels, size, seed as u64, amplitude).map_err(|e| JsError::new(&e.to_string()))
}

/// A weighted-average fusion of a synthetic pair with optional noise, and its
/// five quality scores.
#[wasm_bindgen]
pub struct Fusion {
    a: Image,
    b: Image,
    fused: Image,
    scores: MetricScores,
}

impl Fusion {
    pub fn new(size: usize, seed: u64, weight: f64, noise: f64) -> bsfa_core::Result<Self> {
        let pair = synthetic_shapes(Modality::Pet, 1, size, seed)?.remove(0);
        let (a, b) = (pair.mri.luminance(), pair.other.luminance());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| weight * x + (1.0 - weight) * y + noise * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        let fused = Image::from_clamped(1, size, size, data)?;
        let scores = MetricScores::compute(&a, &b, &fused, &MetricParams::default())?;
        Ok(Self { a, b, fused, scores })
    }

    pub fn scores(&self) -> &MetricScores {
        &self.scores
    }
}

#[wasm_bindgen]
impl Fusion {
    pub fn source_a(&self) -> Vec<u8> {
        gray_rgba(&self.a)
    }

    pub fn source_b(&self) -> Vec<u8> {
        gray_rgba(&self.b)
    }

    pub fn fused(&self) -> Vec<u8> {
        gray_rgba(&self.fused)
    }

    /// Scores in the order of [`metric_names`].
    pub fn values(&self) -> Vec<f64> {
        self.scores.values().to_vec()
    }
}

#[wasm_bindgen]
pub fn metric_names() -> Vec<String> {
    MetricScores::NAMES.iter().map(|s| s.to_string()).collect()
}

#[wasm_bindgen]
pub fn fuse(size: usize, seed: u32, weight: f64, noise: f64) -> Result<Fusion, JsError> {
    Fusion::new(size, seed as u64, weight, noise).map_err(|e| JsError::new(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restoring_a_misalignment_recovers_the_interior() {
        let m = Misalignment::new(64, 3, 5.0, 3.0, 2.0).unwrap();
        assert_eq!(m.reference().len(), 64 * 64 * 4);
        assert!(m.max_displacement() > 0.0);
        let before = m.moving.mean_abs_diff(&m.reference).unwrap();
        assert!(m.interior_error() < 0.5 * before, "{} vs {before}", m.interior_error());
    }

    #[test]
    fn pyramid_total_is_full_resolution() {
        let p = Pyramid::new(4, 64, 1, 1.0).unwrap();
        assert_eq!(p.count(), 4);
        assert_eq!((0..4).map(|i| p.level_size(i)).collect::<Vec<_>>(), [8, 16, 32, 64]);
        assert_eq!(p.total().dims(), (64, 64));
        assert_eq!(p.total_flow().len(), 64 * 64 * 4);
        assert!(Pyramid::new(8, 64, 1, 1.0).is_err());
    }

    #[test]
    fn noise_lowers_structural_scores() {
        let clean = Fusion::new(32, 2, 0.5, 0.0).unwrap();
        let noisy = Fusion::new(32, 2, 0.5, 0.2).unwrap();
        assert!(noisy.scores().q_ssim < clean.scores().q_ssim);
        assert!(noisy.scores().q_abf < clean.scores().q_abf);
        assert_eq!(clean.values().len(), metric_names().len());
    }

    #[test]
    fn flow_colours_encode_direction() {
        let right = DeformationField::constant(2, 2, 0, 1.0, 0.0).unwrap();
        assert_eq!(flow_rgba(&right, 1.0)[..4], [255, 0, 0, 255]);
        let down = DeformationField::constant(2, 2, 0, 0.0, 0.5).unwrap();
        assert_eq!(flow_rgba(&down, 1.0)[..4], [64, 128, 0, 255]);
        let zero = DeformationField::zeros(2, 2, 0);
        assert_eq!(flow_rgba(&zero, 0.0)[..4], [0, 0, 0, 255]);
    }
}
