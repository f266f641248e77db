//! Dense displacement fields: backward warping, per-level unit conversion,
//! additive pyramid accumulation, smoothness regularization and synthetic
//! deformation generation.
//!
//! A field stores two planes, `dx` (positive rightward) then `dy` (positive
//! downward), in pixels of its own grid. Warping is backward:
//! `out(p) = src(p + φ(p))`, bilinear, with sample coordinates clamped to the
//! image rectangle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, Error, Result};
use crate::imaging::{resample_plane, Planar, Scale};

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    height: usize,
    width: usize,
    level: u32,
    data: Vec<f64>,
}

impl DeformationField {
    /// `data` holds the `dx` plane followed by the `dy` plane. Values must be
    /// finite and smaller in magnitude than the larger grid side.
    pub fn new(height: usize, width: usize, level: u32, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("empty deformation field".into()));
        }
        if data.len() != 2 * height * width {
            return Err(Error::DimensionMismatch(format!(
                "buffer of {} values for a 2x{height}x{width} field",
                data.len()
            )));
        }
        let bound = height.max(width) as f64;
        if let Some(v) = data.iter().find(|v| !v.is_finite() || v.abs() >= bound) {
            return Err(Error::InvalidInput(format!(
                "displacement {v} violates the |d| < {bound} sanity bound"
            )));
        }
        Ok(Self {
            height,
            width,
            level,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, level: u32) -> Self {
        Self {
            height,
            width,
            level,
            data: vec![0.0; 2 * height * width],
        }
    }

    pub fn constant(height: usize, width: usize, level: u32, dx: f64, dy: f64) -> Result<Self> {
        let n = height * width;
        let mut data = vec![dx; 2 * n];
        data[n..].fill(dy);
        Self::new(height, width, level, data)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        level: u32,
        f: impl Fn(usize, usize) -> (f64, f64),
    ) -> Result<Self> {
        let n = height * width;
        let mut data = vec![0.0; 2 * n];
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(x, y);
                data[y * width + x] = dx;
                data[n + y * width + x] = dy;
            }
        }
        Self::new(height, width, level, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Pyramid level index, counted from the coarsest grid (1) upwards;
    /// 0 means "untagged / full resolution".
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn with_level(mut self, level: u32) -> Self {
        self.level = level;
        self
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn dx(&self) -> &[f64] {
        &self.data[..self.height * self.width]
    }

    pub fn dy(&self) -> &[f64] {
        &self.data[self.height * self.width..]
    }

    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.data[i], self.data[self.height * self.width + i])
    }

    /// Largest displacement magnitude.
    pub fn max_norm(&self) -> f64 {
        self.dx()
            .iter()
            .zip(self.dy())
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch(format!(
                "fields {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// The top-left `h × w` window.
    pub fn crop(&self, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || h > self.height || w > self.width {
            return Err(Error::InvalidInput(format!(
                "cannot crop {}x{} field to {h}x{w}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(2 * h * w);
        for plane in [self.dx(), self.dy()] {
            for y in 0..h {
                data.extend_from_slice(&plane[y * self.width..y * self.width + w]);
            }
        }
        Self::new(h, w, self.level, data)
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.level,
            self.data.iter().map(|v| v * k).collect(),
        )
    }

    /// Serializes into the flat little-endian container:
    /// magic `DFLD`, `u32` version, `u32` height, `u32` width, `u32` level,
    /// then `2·h·w` `f64` values (dx plane, dy plane).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * self.data.len());
        out.extend_from_slice(FIELD_MAGIC);
        out.extend_from_slice(&FIELD_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.level.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != FIELD_MAGIC {
            return Err(Error::FieldFormat("missing DFLD header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != FIELD_VERSION {
            return Err(Error::FieldFormat(format!("unsupported version {version}")));
        }
        let (h, w, level) = (word(8) as usize, word(12) as usize, word(16));
        let body = &bytes[20..];
        if body.len() != 16 * h * w {
            return Err(Error::FieldFormat(format!(
                "expected {} payload bytes, found {}",
                16 * h * w,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(h, w, level, data)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const FIELD_MAGIC: &[u8; 4] = b"DFLD";
const FIELD_VERSION: u32 = 1;

/// Scalar kernels shared with the autodiff backend. All buffers are
/// row-major planes of one sample.
pub mod kernel {
    use num_traits::Float;

    struct Tap<T> {
        x0: usize,
        x1: usize,
        y0: usize,
        y1: usize,
        ax: T,
        ay: T,
        // Whether the unclamped coordinate lay inside the rectangle; the
        // derivative w.r.t. the field vanishes when it was clamped.
        live_x: bool,
        live_y: bool,
    }

    fn tap<T: Float>(x: usize, y: usize, dx: T, dy: T, h: usize, w: usize) -> Tap<T> {
        let max_x = T::from(w - 1).unwrap();
        let max_y = T::from(h - 1).unwrap();
        let sx = T::from(x).unwrap() + dx;
        let sy = T::from(y).unwrap() + dy;
        let live_x = sx >= T::zero() && sx < max_x;
        let live_y = sy >= T::zero() && sy < max_y;
        let cx = sx.max(T::zero()).min(max_x);
        let cy = sy.max(T::zero()).min(max_y);
        let x0 = cx.floor().to_usize().unwrap();
        let y0 = cy.floor().to_usize().unwrap();
        Tap {
            x0,
            x1: (x0 + 1).min(w - 1),
            y0,
            y1: (y0 + 1).min(h - 1),
            ax: cx - T::from(x0).unwrap(),
            ay: cy - T::from(y0).unwrap(),
            live_x,
            live_y,
        }
    }

    /// `out[c](p) = src[c](p + (dx(p), dy(p)))` for `channels` planes.
    pub fn warp_forward<T: Float>(
        src: &[T],
        channels: usize,
        h: usize,
        w: usize,
        dx: &[T],
        dy: &[T],
        out: &mut [T],
    ) {
        let n = h * w;
        let one = T::one();
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let t = tap(x, y, dx[p], dy[p], h, w);
                let (w00, w01) = ((one - t.ax) * (one - t.ay), t.ax * (one - t.ay));
                let (w10, w11) = ((one - t.ax) * t.ay, t.ax * t.ay);
                for c in 0..channels {
                    let s = &src[c * n..(c + 1) * n];
                    out[c * n + p] = s[t.y0 * w + t.x0] * w00
                        + s[t.y0 * w + t.x1] * w01
                        + s[t.y1 * w + t.x0] * w10
                        + s[t.y1 * w + t.x1] * w11;
                }
            }
        }
    }

    /// Vector-Jacobian product of [`warp_forward`]: accumulates into
    /// `grad_src` and writes `grad_dx`, `grad_dy`.
    #[allow(clippy::too_many_arguments)]
    pub fn warp_backward<T: Float>(
        src: &[T],
        channels: usize,
        h: usize,
        w: usize,
        dx: &[T],
        dy: &[T],
        grad_out: &[T],
        grad_src: &mut [T],
        grad_dx: &mut [T],
        grad_dy: &mut [T],
    ) {
        let n = h * w;
        let one = T::one();
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let t = tap(x, y, dx[p], dy[p], h, w);
                let (w00, w01) = ((one - t.ax) * (one - t.ay), t.ax * (one - t.ay));
                let (w10, w11) = ((one - t.ax) * t.ay, t.ax * t.ay);
                let (i00, i01, i10, i11) = (
                    t.y0 * w + t.x0,
                    t.y0 * w + t.x1,
                    t.y1 * w + t.x0,
                    t.y1 * w + t.x1,
                );
                let mut gx = T::zero();
                let mut gy = T::zero();
                for c in 0..channels {
                    let g = grad_out[c * n + p];
                    let s = &src[c * n..(c + 1) * n];
                    let gs = &mut grad_src[c * n..(c + 1) * n];
                    gs[i00] = gs[i00] + g * w00;
                    gs[i01] = gs[i01] + g * w01;
                    gs[i10] = gs[i10] + g * w10;
                    gs[i11] = gs[i11] + g * w11;
                    if t.live_x {
                        gx = gx + g * ((one - t.ay) * (s[i01] - s[i00]) + t.ay * (s[i11] - s[i10]));
                    }
                    if t.live_y {
                        gy = gy + g * ((one - t.ax) * (s[i10] - s[i00]) + t.ax * (s[i11] - s[i01]));
                    }
                }
                grad_dx[p] = gx;
                grad_dy[p] = gy;
            }
        }
    }
}

/// Backward-warps every plane of `src` by `field`.
pub fn warp<T: Planar>(src: &T, field: &DeformationField) -> Result<T> {
    let (h, w) = src.plane_dims();
    if (h, w) != field.dims() {
        return Err(Error::DimensionMismatch(format!(
            "source {h}x{w} vs field {}x{}",
            field.height, field.width
        )));
    }
    let mut out = vec![0.0; src.planes().len()];
    kernel::warp_forward(
        src.planes(),
        src.plane_count(),
        h,
        w,
        field.dx(),
        field.dy(),
        &mut out,
    );
    Ok(src.with_planes(h, w, out, Scale::IDENTITY))
}

/// Resamples a field by `scale` and converts its displacements into pixels of
/// the new grid (multiplies them by the same factor).
pub fn scale_field(field: &DeformationField, scale: Scale) -> Result<DeformationField> {
    let (h, w) = field.dims();
    let (oh, ow) = (scale.apply(h)?, scale.apply(w)?);
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidInput("scale_field produces an empty grid".into()));
    }
    let k = scale.value();
    let mut data = resample_plane(field.dx(), h, w, oh, ow);
    data.extend(resample_plane(field.dy(), h, w, oh, ow));
    data.iter_mut().for_each(|v| *v *= k);
    let level = (field.level as i32 + scale.exponent()).max(0) as u32;
    DeformationField::new(oh, ow, level, data)
}

pub fn add_fields(a: &DeformationField, b: &DeformationField) -> Result<DeformationField> {
    a.check_same(b)?;
    DeformationField::new(
        a.height,
        a.width,
        a.level,
        a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    )
}

/// Elementwise `a − b`.
pub fn subtract_fields(a: &DeformationField, b: &DeformationField) -> Result<DeformationField> {
    a.check_same(b)?;
    DeformationField::new(
        a.height,
        a.width,
        a.level,
        a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
    )
}

/// Sums per-level fields into one full-resolution field. `fields[i]` (0-based)
/// must sit on the grid `H / 2^(K-1-i)`; each is upsampled by `2^(K-1-i)`
/// with its displacements scaled by the same factor.
pub fn accumulate_pyramid(fields: &[DeformationField]) -> Result<DeformationField> {
    let k = fields.len();
    if k == 0 {
        return Err(Error::InvalidInput("empty field pyramid".into()));
    }
    let (fh, fw) = fields[k - 1].dims();
    let mut total = DeformationField::zeros(fh, fw, k as u32);
    for (i, f) in fields.iter().enumerate() {
        let shift = (k - 1 - i) as u32;
        let expect = (fh >> shift, fw >> shift);
        if f.dims() != expect || (expect.0 << shift, expect.1 << shift) != (fh, fw) {
            return Err(Error::DimensionMismatch(format!(
                "level {} is {}x{}, expected {}x{}",
                i + 1,
                f.height,
                f.width,
                expect.0,
                expect.1
            )));
        }
        let up = scale_field(f, Scale::pow2(shift as i32))?;
        total = add_fields(&total, &up)?;
    }
    Ok(total.with_level(k as u32))
}

/// Mean per-pixel Frobenius norm of the forward-difference Jacobian. The
/// difference past the last row/column is taken as zero.
pub fn gradient_norm(field: &DeformationField) -> f64 {
    let (h, w) = field.dims();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let mut sq = 0.0;
            for plane in [field.dx(), field.dy()] {
                let v = plane[y * w + x];
                if x + 1 < w {
                    sq += (plane[y * w + x + 1] - v).powi(2);
                }
                if y + 1 < h {
                    sq += (plane[(y + 1) * w + x] - v).powi(2);
                }
            }
            total += sq.sqrt();
        }
    }
    total / (h * w) as f64
}

/// `Σ_i 10^(i−K) (‖∇φ_A^i‖ + ‖∇φ_B^i‖)` over `K` levels, coarsest first.
pub fn smoothness_loss(fields_a: &[DeformationField], fields_b: &[DeformationField]) -> Result<f64> {
    if fields_a.len() != fields_b.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} forward levels vs {} reverse levels",
            fields_a.len(),
            fields_b.len()
        )));
    }
    let k = fields_a.len() as i32;
    Ok(fields_a
        .iter()
        .zip(fields_b)
        .enumerate()
        .map(|(i, (a, b))| 10f64.powi(i as i32 + 1 - k) * (gradient_norm(a) + gradient_norm(b)))
        .sum())
}

/// Closed interval sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const ZERO: Interval = Interval { lo: 0.0, hi: 0.0 };

    pub fn symmetric(r: f64) -> Self {
        Self { lo: -r, hi: r }
    }

    pub fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        let u: f64 = rng.random();
        self.lo + u * (self.hi - self.lo)
    }
}

/// Parameters of the rigid + elastic misalignment applied to training pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDeformationSpec {
    pub rotation_deg: Interval,
    pub translation_x: Interval,
    pub translation_y: Interval,
    /// Control-grid side length (≥ 2).
    pub elastic_grid: usize,
    /// Peak per-component elastic displacement in pixels.
    pub elastic_amplitude: f64,
    pub seed: u64,
}

impl Default for SyntheticDeformationSpec {
    fn default() -> Self {
        Self {
            rotation_deg: Interval::symmetric(10.0),
            translation_x: Interval::symmetric(10.0),
            translation_y: Interval::symmetric(10.0),
            elastic_grid: 8,
            elastic_amplitude: 10.0,
            seed: 0,
        }
    }
}

impl SyntheticDeformationSpec {
    /// No deformation at all.
    pub fn identity() -> Self {
        Self {
            rotation_deg: Interval::ZERO,
            translation_x: Interval::ZERO,
            translation_y: Interval::ZERO,
            elastic_grid: 2,
            elastic_amplitude: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, iv) in [
            ("rotation", self.rotation_deg),
            ("translation_x", self.translation_x),
            ("translation_y", self.translation_y),
        ] {
            if !(iv.lo <= iv.hi) || !iv.lo.is_finite() || !iv.hi.is_finite() {
                return Err(Error::InvalidInput(format!("{name} interval is empty or non-finite")));
            }
        }
        if self.elastic_grid < 2 {
            return Err(Error::InvalidInput("elastic grid must be at least 2x2".into()));
        }
        if !(self.elastic_amplitude >= 0.0) {
            return Err(Error::InvalidInput("elastic amplitude must be >= 0".into()));
        }
        Ok(())
    }
}

/// Displacement of a rotation by `theta_deg` about the image centre followed
/// by a translation: `R(θ)(p − c) − (p − c) + t`.
pub fn affine_field(h: usize, w: usize, theta_deg: f64, tx: f64, ty: f64) -> Result<DeformationField> {
    let (s, c) = theta_deg.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    DeformationField::from_fn(h, w, 0, |x, y| {
        let (px, py) = (x as f64 - cx, y as f64 - cy);
        (c * px - s * py - px + tx, s * px + c * py - py + ty)
    })
}

/// Draws a rigid + elastic field on an `h × w` grid; deterministic in `spec.seed`.
pub fn synthesize_deformation(spec: &SyntheticDeformationSpec, h: usize, w: usize) -> Result<DeformationField> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let theta = spec.rotation_deg.sample(&mut rng);
    let tx = spec.translation_x.sample(&mut rng);
    let ty = spec.translation_y.sample(&mut rng);
    let rigid = affine_field(h, w, theta, tx, ty)?;
    if spec.elastic_amplitude == 0.0 {
        return Ok(rigid);
    }
    let g = spec.elastic_grid;
    let mut elastic = Vec::with_capacity(2 * h * w);
    for _ in 0..2 {
        let grid: Vec<f64> = (0..g * g)
            .map(|_| spec.elastic_amplitude * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        elastic.extend(resample_plane(&grid, g, g, h, w));
    }
    add_fields(&rigid, &DeformationField::new(h, w, 0, elastic)?)
}

/// Approximate inverse under backward warping: returns `g` with
/// `g(p) = −f(p + g(p))`, so that `warp(warp(x, f), g) ≈ x`.
pub fn invert_field(field: &DeformationField, iterations: usize) -> Result<DeformationField> {
    let (h, w) = field.dims();
    let mut inv = field.scaled(-1.0)?;
    for _ in 0..iterations {
        let mut next = vec![0.0; 2 * h * w];
        kernel::warp_forward(field.data(), 2, h, w, inv.dx(), inv.dy(), &mut next);
        next.iter_mut().for_each(|v| *v = -*v);
        inv = DeformationField::new(h, w, field.level, next)?;
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Image;

    fn texture(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |x, y| {
            0.5 + 0.4 * ((x as f64 * 0.7).sin() * (y as f64 * 0.45).cos())
        })
        .unwrap()
    }

    #[test]
    fn zero_field_warp_is_bit_exact() {
        let img = texture(12, 10);
        let out = warp(&img, &DeformationField::zeros(12, 10, 0)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn constant_shift_samples_to_the_right() {
        let img = texture(12, 16);
        let f = DeformationField::constant(12, 16, 0, 3.0, 0.0).unwrap();
        let out = warp(&img, &f).unwrap();
        for y in 0..12 {
            for x in 0..13 {
                assert!((out.get(x, y) - img.get(x + 3, y)).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn translations_compose_on_the_interior() {
        let img = texture(16, 16);
        let t1 = DeformationField::constant(16, 16, 0, 2.0, 0.0).unwrap();
        let t2 = DeformationField::constant(16, 16, 0, -1.0, 1.0).unwrap();
        let two_step = warp(&warp(&img, &t1).unwrap(), &t2).unwrap();
        let one_step = warp(&img, &add_fields(&t1, &t2).unwrap()).unwrap();
        // t2 reads x−1 and y+1, t1 then reads x+2: keep x in [1, 13], y in [0, 14].
        for y in 0..15 {
            for x in 1..14 {
                assert!((two_step.get(x, y) - one_step.get(x, y)).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn warp_rejects_mismatched_field() {
        let img = texture(8, 8);
        assert!(warp(&img, &DeformationField::zeros(8, 4, 0)).is_err());
    }

    #[test]
    fn scale_field_examples() {
        let f = DeformationField::constant(8, 8, 1, 1.0, 0.0).unwrap();
        let up = scale_field(&f, Scale::up(4).unwrap()).unwrap();
        assert_eq!(up.dims(), (32, 32));
        assert!(up.dx().iter().all(|&v| v == 4.0) && up.dy().iter().all(|&v| v == 0.0));

        let z = scale_field(&DeformationField::zeros(8, 8, 0), Scale::up(2).unwrap()).unwrap();
        assert_eq!(z.max_norm(), 0.0);

        let g = DeformationField::constant(16, 16, 0, 4.0, 2.0).unwrap();
        let d = scale_field(&g, Scale::down(2).unwrap()).unwrap();
        assert_eq!(d.dims(), (8, 8));
        assert!(d.dx().iter().all(|&v| v == 2.0) && d.dy().iter().all(|&v| v == 1.0));

        assert!(scale_field(&DeformationField::zeros(6, 6, 0), Scale::down(4).unwrap()).is_err());
    }

    #[test]
    fn accumulate_two_levels() {
        let l1 = DeformationField::constant(8, 8, 1, 1.0, 0.0).unwrap();
        let l2 = DeformationField::zeros(16, 16, 2);
        let acc = accumulate_pyramid(&[l1.clone(), l2]).unwrap();
        assert_eq!(acc.dims(), (16, 16));
        assert!(acc.dx().iter().all(|&v| v == 2.0));

        let l2 = DeformationField::constant(16, 16, 2, 0.5, 0.0).unwrap();
        let acc = accumulate_pyramid(&[l1, l2]).unwrap();
        assert!(acc.dx().iter().all(|&v| v == 2.5) && acc.dy().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn accumulate_rejects_bad_level_dims() {
        let l1 = DeformationField::zeros(8, 8, 1);
        let l2 = DeformationField::zeros(12, 12, 2);
        assert!(accumulate_pyramid(&[l1, l2]).is_err());
        assert!(accumulate_pyramid(&[]).is_err());
    }

    #[test]
    fn subtract_examples() {
        let a = DeformationField::constant(4, 4, 0, 2.0, 0.0).unwrap();
        let b = DeformationField::constant(4, 4, 0, -1.0, 0.0).unwrap();
        let d = subtract_fields(&a, &b).unwrap();
        assert!(d.dx().iter().all(|&v| v == 3.0));
        assert_eq!(subtract_fields(&a, &a).unwrap().max_norm(), 0.0);
        assert!(subtract_fields(&a, &DeformationField::zeros(4, 5, 0)).is_err());
    }

    #[test]
    fn smoothness_of_unit_step() {
        // dx steps from 0 to 1 between columns 3 and 4: one column of unit
        // forward differences out of 8.
        let f = DeformationField::from_fn(6, 8, 1, |x, _| (if x >= 4 { 1.0 } else { 0.0 }, 0.0)).unwrap();
        let zero = DeformationField::zeros(6, 8, 1);
        let loss = smoothness_loss(&[f.clone()], &[zero.clone()]).unwrap();
        assert!((loss - 1.0 / 8.0).abs() < 1e-15);
        let loss2 = smoothness_loss(&[f.scaled(2.0).unwrap()], &[zero]).unwrap();
        assert!((loss2 - 2.0 * loss).abs() < 1e-15);
    }

    #[test]
    fn smoothness_weights_levels_by_powers_of_ten() {
        let step = |h, w| DeformationField::from_fn(h, w, 0, |x, _| (if x >= w / 2 { 1.0 } else { 0.0 }, 0.0)).unwrap();
        let fa = vec![step(4, 4), step(8, 8)];
        let fb = vec![DeformationField::zeros(4, 4, 0), DeformationField::zeros(8, 8, 0)];
        let loss = smoothness_loss(&fa, &fb).unwrap();
        assert!((loss - (0.1 * 0.25 + 0.125)).abs() < 1e-15);
    }

    #[test]
    fn smoothness_of_constants_is_zero() {
        let a = DeformationField::constant(4, 4, 1, 3.0, -1.0).unwrap();
        let b = DeformationField::constant(8, 8, 2, 0.5, 0.5).unwrap();
        assert_eq!(smoothness_loss(&[a.clone(), b.clone()], &[a, b]).unwrap(), 0.0);
    }

    #[test]
    fn synthesis_examples() {
        let z = synthesize_deformation(&SyntheticDeformationSpec::identity(), 16, 16).unwrap();
        assert_eq!(z.max_norm(), 0.0);

        let mut spec = SyntheticDeformationSpec::identity();
        spec.translation_x = Interval::fixed(5.0);
        let t = synthesize_deformation(&spec, 16, 16).unwrap();
        assert!(t.dx().iter().all(|&v| (v - 5.0).abs() < 1e-12));
        assert!(t.dy().iter().all(|&v| v.abs() < 1e-12));

        let mut spec = SyntheticDeformationSpec::identity();
        spec.rotation_deg = Interval::fixed(10.0);
        let r = synthesize_deformation(&spec, 9, 11).unwrap();
        let th = 10f64.to_radians();
        for y in 0..9 {
            for x in 0..11 {
                let (px, py) = (x as f64 - 5.0, y as f64 - 4.0);
                let ex = th.cos() * px - th.sin() * py - px;
                let ey = th.sin() * px + th.cos() * py - py;
                let (dx, dy) = r.get(x, y);
                assert!((dx - ex).abs() < 1e-12 && (dy - ey).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn synthesis_is_seeded() {
        let spec = SyntheticDeformationSpec::default().with_seed(42);
        let a = synthesize_deformation(&spec, 32, 32).unwrap();
        let b = synthesize_deformation(&spec, 32, 32).unwrap();
        assert_eq!(a, b);
        let c = synthesize_deformation(&spec.clone().with_seed(43), 32, 32).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthesis_rejects_bad_spec() {
        let mut spec = SyntheticDeformationSpec::default();
        spec.elastic_grid = 1;
        assert!(synthesize_deformation(&spec, 8, 8).is_err());
        let mut spec = SyntheticDeformationSpec::default();
        spec.elastic_amplitude = -1.0;
        assert!(synthesize_deformation(&spec, 8, 8).is_err());
    }

    #[test]
    fn inverse_of_translation_is_negation() {
        let f = DeformationField::constant(8, 8, 0, 1.5, -0.5).unwrap();
        let g = invert_field(&f, 10).unwrap();
        assert!(g.dx().iter().all(|&v| v == -1.5) && g.dy().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn inverse_undoes_mild_elastic_warp() {
        let mut spec = SyntheticDeformationSpec::identity();
        spec.elastic_amplitude = 2.0;
        spec.elastic_grid = 4;
        spec.seed = 3;
        let f = synthesize_deformation(&spec, 32, 32).unwrap();
        let g = invert_field(&f, 30).unwrap();
        let img = texture(32, 32);
        let round = warp(&warp(&img, &f).unwrap(), &g).unwrap();
        let mut err = 0.0;
        let mut n = 0;
        for y in 4..28 {
            for x in 4..28 {
                err += (round.get(x, y) - img.get(x, y)).abs();
                n += 1;
            }
        }
        assert!(err / (n as f64) < 0.02, "mean error {}", err / n as f64);
    }

    #[test]
    fn field_bytes_round_trip() {
        let spec = SyntheticDeformationSpec::default().with_seed(7);
        let f = synthesize_deformation(&spec, 16, 8).unwrap().with_level(3);
        let bytes = f.to_bytes();
        assert_eq!(bytes.len(), 20 + 16 * 16 * 8);
        assert_eq!(DeformationField::from_bytes(&bytes).unwrap(), f);
        assert!(DeformationField::from_bytes(&bytes[..30]).is_err());
    }

    #[test]
    fn sanity_bound_is_enforced() {
        assert!(DeformationField::constant(4, 4, 0, 4.0, 0.0).is_err());
        assert!(DeformationField::constant(4, 4, 0, f64::NAN, 0.0).is_err());
    }
}
