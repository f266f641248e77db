//! Image containers and the low-level raster operations every other module
//! builds on: bilinear resampling, Sobel gradients and SSIM.
//!
//! Rasters are stored channel-major (`c × h × w`) as `f64`. Interpolation
//! follows the `align_corners = false` convention: output pixel `i` samples
//! source coordinate `(i + 0.5) / s - 0.5`, clamped to the valid range.

use crate::error::{Error, Result};

/// Single- or three-channel raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image, rejecting wrong lengths, unsupported channel counts and
    /// values outside `[0, 1]`.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("empty image".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::DimensionMismatch(format!(
                "buffer of {} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds an image by clamping every value into `[0, 1]` (NaN maps to 0).
    pub fn from_clamped(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let data = data
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(channels, height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(1, height, width, vec![value; height * width])
    }

    /// Single-channel image from a function of `(x, y)`; values are clamped.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::from_clamped(1, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn is_color(&self) -> bool {
        self.channels == 3
    }

    fn same_shape(&self, data: Vec<f64>) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Errors unless `height` and `width` are multiples of `m`.
    pub fn check_divisible(&self, m: usize) -> Result<()> {
        if self.height % m != 0 || self.width % m != 0 {
            return Err(Error::InvalidInput(format!(
                "{}x{} is not divisible by {m}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Replicate-pads bottom/right edges up to the next multiple of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Self {
        let h = self.height.div_ceil(m) * m;
        let w = self.width.div_ceil(m) * m;
        if h == self.height && w == self.width {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            let p = self.plane(c);
            for y in 0..h {
                let sy = y.min(self.height - 1);
                for x in 0..w {
                    data.push(p[sy * self.width + x.min(self.width - 1)]);
                }
            }
        }
        Self {
            channels: self.channels,
            height: h,
            width: w,
            data,
        }
    }

    /// The top-left `h × w` window; undoes [`Image::pad_to_multiple`].
    pub fn crop(&self, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || h > self.height || w > self.width {
            return Err(Error::InvalidInput(format!(
                "cannot crop {}x{} to {h}x{w}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            let p = self.plane(c);
            for y in 0..h {
                data.extend_from_slice(&p[y * self.width..y * self.width + w]);
            }
        }
        Image::new(self.channels, h, w, data)
    }

    /// Single-channel luminance. Grayscale images are returned unchanged.
    pub fn luminance(&self) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        let (y, _, _) = self.to_ycbcr();
        y
    }

    /// Splits a colour image into full-range BT.601 Y, Cb, Cr planes, each
    /// stored as a single-channel image in `[0, 1]`.
    pub fn to_ycbcr(&self) -> (Self, Self, Self) {
        assert_eq!(self.channels, 3, "to_ycbcr needs a colour image");
        let n = self.height * self.width;
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        let mut y = Vec::with_capacity(n);
        let mut cb = Vec::with_capacity(n);
        let mut cr = Vec::with_capacity(n);
        for i in 0..n {
            let yy = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
            y.push(yy.clamp(0.0, 1.0));
            cb.push((0.5 + (b[i] - yy) * 0.564).clamp(0.0, 1.0));
            cr.push((0.5 + (r[i] - yy) * 0.713).clamp(0.0, 1.0));
        }
        let mk = |data| Self {
            channels: 1,
            height: self.height,
            width: self.width,
            data,
        };
        (mk(y), mk(cb), mk(cr))
    }

    /// Inverse of [`Image::to_ycbcr`].
    pub fn from_ycbcr(y: &Self, cb: &Self, cr: &Self) -> Result<Self> {
        if y.dims() != cb.dims() || y.dims() != cr.dims() {
            return Err(Error::DimensionMismatch("Y/Cb/Cr planes differ in size".into()));
        }
        let n = y.height * y.width;
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            let (yy, u, v) = (y.data[i], cb.data[i] - 0.5, cr.data[i] - 0.5);
            let r = yy + v / 0.713;
            let b = yy + u / 0.564;
            let g = (yy - 0.299 * r - 0.114 * b) / 0.587;
            data[i] = r;
            data[n + i] = g;
            data[2 * n + i] = b;
        }
        Self::from_clamped(3, y.height, y.width, data)
    }

    /// Single-channel image from one channel of this one.
    pub fn channel(&self, c: usize) -> Self {
        Self {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.plane(c).to_vec(),
        }
    }

    /// Pixelwise maximum of two single-channel images.
    pub fn max(&self, other: &Self) -> Result<Self> {
        check_same(self, other)?;
        Ok(self.same_shape(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a.max(*b))
                .collect(),
        ))
    }

    /// Mean absolute difference.
    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64> {
        check_same(self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len() as f64)
    }
}

/// A `c × h × w` feature tensor tagged with its pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Downsampling exponent `s` relative to full resolution (`h = H / 2^s`).
    pub level: u32,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, level: u32, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::DimensionMismatch(format!(
                "buffer of {} values for a {channels}x{height}x{width} feature map",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            level,
            data,
        })
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Power-of-two scale factor `2^exp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scale {
    exp: i32,
}

impl Scale {
    pub const IDENTITY: Scale = Scale { exp: 0 };

    pub fn pow2(exp: i32) -> Self {
        Self { exp }
    }

    pub fn up(factor: usize) -> Result<Self> {
        Self::from_factor(factor).map(|exp| Self { exp })
    }

    pub fn down(factor: usize) -> Result<Self> {
        Self::from_factor(factor).map(|exp| Self { exp: -exp })
    }

    fn from_factor(factor: usize) -> Result<i32> {
        if factor == 0 || !factor.is_power_of_two() {
            return Err(Error::InvalidInput(format!(
                "scale factor {factor} is not a power of two"
            )));
        }
        Ok(factor.trailing_zeros() as i32)
    }

    pub fn exponent(self) -> i32 {
        self.exp
    }

    pub fn value(self) -> f64 {
        2f64.powi(self.exp)
    }

    pub fn inverse(self) -> Self {
        Self { exp: -self.exp }
    }

    /// Output length for an input of `n` samples.
    pub fn apply(self, n: usize) -> Result<usize> {
        if self.exp >= 0 {
            Ok(n << self.exp)
        } else {
            let d = 1usize << (-self.exp);
            if n % d != 0 {
                return Err(Error::InvalidInput(format!(
                    "length {n} is not divisible by {d}"
                )));
            }
            Ok(n / d)
        }
    }
}

/// Bilinear sampling positions for one axis: `(i0, i1, frac)` per output index.
pub fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let s = n_out as f64 / n_in as f64;
    let max = (n_in - 1) as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) / s - 0.5).clamp(0.0, max);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinearly resamples one `h × w` plane to `oh × ow`.
pub fn resample_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let xt = axis_taps(w, ow);
    let yt = axis_taps(h, oh);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (x, &(x0, x1, f)) in xt.iter().enumerate() {
            rows[y * ow + x] = row[x0] + f * (row[x1] - row[x0]);
        }
    }
    let mut out = vec![0.0; oh * ow];
    for (y, &(y0, y1, f)) in yt.iter().enumerate() {
        for x in 0..ow {
            let a = rows[y0 * ow + x];
            let b = rows[y1 * ow + x];
            out[y * ow + x] = a + f * (b - a);
        }
    }
    out
}

/// Anything stored as a stack of equally sized planes.
pub trait Planar: Sized {
    fn plane_dims(&self) -> (usize, usize);
    fn plane_count(&self) -> usize;
    fn planes(&self) -> &[f64];
    /// Rebuild with new planes; `scale` is the spatial change that produced them.
    fn with_planes(&self, h: usize, w: usize, data: Vec<f64>, scale: Scale) -> Self;
}

impl Planar for Image {
    fn plane_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    fn plane_count(&self) -> usize {
        self.channels
    }
    fn planes(&self) -> &[f64] {
        &self.data
    }
    fn with_planes(&self, h: usize, w: usize, data: Vec<f64>, _scale: Scale) -> Self {
        Self {
            channels: self.channels,
            height: h,
            width: w,
            data,
        }
    }
}

impl Planar for FeatureMap {
    fn plane_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    fn plane_count(&self) -> usize {
        self.channels
    }
    fn planes(&self) -> &[f64] {
        &self.data
    }
    fn with_planes(&self, h: usize, w: usize, data: Vec<f64>, scale: Scale) -> Self {
        Self {
            channels: self.channels,
            height: h,
            width: w,
            level: (self.level as i32 - scale.exponent()).max(0) as u32,
            data,
        }
    }
}

/// Bilinear resampling by a power-of-two factor.
pub fn resample<T: Planar>(src: &T, scale: Scale) -> Result<T> {
    let (h, w) = src.plane_dims();
    let (oh, ow) = (scale.apply(h)?, scale.apply(w)?);
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidInput("resample produces an empty grid".into()));
    }
    let n = h * w;
    let mut out = Vec::with_capacity(src.plane_count() * oh * ow);
    for plane in src.planes().chunks(n) {
        out.extend(resample_plane(plane, h, w, oh, ow));
    }
    Ok(src.with_planes(oh, ow, out, scale))
}

/// Unnormalized 3×3 Sobel derivatives of one plane with replicate padding.
pub fn sobel_plane(src: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        src[yc * w + xc]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            gy[i] = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        }
    }
    (gx, gy)
}

/// Per-pixel Sobel magnitude `sqrt(gx² + gy²)`.
///
/// The result is not clamped to `[0, 1]` (a unit step already reaches 4), so
/// it is returned as a raw plane.
pub fn gradient_magnitude(img: &Image) -> Result<Vec<f64>> {
    if img.channels != 1 {
        return Err(Error::InvalidInput("gradient_magnitude needs one channel".into()));
    }
    let (gx, gy) = sobel_plane(&img.data, img.height, img.width);
    Ok(gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable 'valid' filtering of one plane with a symmetric kernel.
pub fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                acc += kj * src[y * w + x + j];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                acc += kj * tmp[(y + j) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, oh, ow)
}

/// Mean SSIM with the default parameters.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

/// Mean of the local SSIM map over all fully-covered window positions.
pub fn ssim_with(a: &Image, b: &Image, p: &SsimParams) -> Result<f64> {
    check_same(a, b)?;
    if a.channels != 1 {
        return Err(Error::InvalidInput("ssim needs single-channel images".into()));
    }
    ssim_planes(&a.data, &b.data, a.height, a.width, p)
}

pub(crate) fn ssim_planes(a: &[f64], b: &[f64], h: usize, w: usize, p: &SsimParams) -> Result<f64> {
    if h < p.window || w < p.window {
        return Err(Error::InvalidInput(format!(
            "{h}x{w} image is smaller than the {}-pixel SSIM window",
            p.window
        )));
    }
    let k = gaussian_kernel(p.window, p.sigma);
    let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mu_a, _, _) = filter_valid(a, h, w, &k);
    let (mu_b, _, _) = filter_valid(b, h, w, &k);
    let (aa, _, _) = filter_valid(&prod(a, a), h, w, &k);
    let (bb, _, _) = filter_valid(&prod(b, b), h, w, &k);
    let (ab, _, _) = filter_valid(&prod(a, b), h, w, &k);
    let (c1, c2) = (p.c1(), p.c2());
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

pub(crate) fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.channels != b.channels || a.height != b.height || a.width != b.width {
        return Err(Error::DimensionMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.channels, a.height, a.width, b.channels, b.height, b.width
        )));
    }
    Ok(())
}
