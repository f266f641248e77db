//! Fusion-quality metrics (Q_AB/F, Q_CV, Q_VIF, Q_S, Q_SSIM) and the
//! endpoint error used to score predicted deformation fields.
//!
//! Every metric takes `(a, b, f)`: the registered source, the reference (MRI)
//! and the fused image, all single-channel and equally sized. Parameters are
//! plain structs so reports can echo them verbatim.

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::deformation::DeformationField;
use crate::error::{Error, Result};
use crate::imaging::{check_same, filter_valid, gaussian_kernel, sobel_plane, ssim_planes, Image, SsimParams};

/// Sigmoid constants of the edge-preservation metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QabfParams {
    pub gamma_g: f64,
    pub kappa_g: f64,
    pub sigma_g: f64,
    pub gamma_a: f64,
    pub kappa_a: f64,
    pub sigma_a: f64,
    /// Exponent applied to edge strength when forming pixel weights.
    pub weight_exponent: f64,
}

impl QabfParams {
    /// Published constants. With these, perfectly preserved edges score
    /// `0.9994 / (1 + e^-7.5) · 0.9879 / (1 + e^-4.4) ≈ 0.975`.
    pub fn literature() -> Self {
        Self {
            gamma_g: 0.9994,
            kappa_g: -15.0,
            sigma_g: 0.5,
            gamma_a: 0.9879,
            kappa_a: -22.0,
            sigma_a: 0.8,
            weight_exponent: 1.0,
        }
    }
}

impl Default for QabfParams {
    /// Same sigmoid shapes as [`QabfParams::literature`], with the gains chosen
    /// so that perfect preservation scores exactly 1.
    fn default() -> Self {
        let lit = Self::literature();
        Self {
            gamma_g: 1.0 + (lit.kappa_g * (1.0 - lit.sigma_g)).exp(),
            gamma_a: 1.0 + (lit.kappa_a * (1.0 - lit.sigma_a)).exp(),
            ..lit
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QcvParams {
    /// Side of the non-overlapping analysis regions.
    pub window: usize,
    /// Exponent on edge strength in the regional saliency.
    pub alpha: f64,
    /// Mannos–Sakrison CSF `a (b + c r) exp(−(c r)^d)`.
    pub csf_a: f64,
    pub csf_b: f64,
    pub csf_c: f64,
    pub csf_d: f64,
    /// Cycles-per-image that map to one cycle per degree.
    pub cycles_per_degree_scale: f64,
    /// Intensities are multiplied by this before scoring (255 gives 8-bit units).
    pub intensity_scale: f64,
}

impl Default for QcvParams {
    fn default() -> Self {
        Self {
            window: 16,
            alpha: 1.0,
            csf_a: 2.6,
            csf_b: 0.0192,
            csf_c: 0.114,
            csf_d: 1.1,
            cycles_per_degree_scale: 4.0,
            intensity_scale: 255.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QvifParams {
    /// Visual noise variance in `[0, 1]` intensity units.
    pub noise_var: f64,
    pub scale_weights: [f64; 4],
    /// Additive constant per pixel in the information sums.
    pub c: f64,
}

impl Default for QvifParams {
    fn default() -> Self {
        Self {
            noise_var: 0.005,
            scale_weights: [1.0 / 2.15, 0.0, 0.15 / 2.15, 1.0 / 2.15],
            c: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QsParams {
    /// Side of the sliding window.
    pub window: usize,
}

impl Default for QsParams {
    fn default() -> Self {
        Self { window: 8 }
    }
}

/// All metric parameters, echoed into every report.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricParams {
    pub qabf: QabfParams,
    pub qcv: QcvParams,
    pub qvif: QvifParams,
    pub qs: QsParams,
    pub ssim: SsimParams,
}

impl fmt::Display for MetricParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = &self.qabf;
        let c = &self.qcv;
        let v = &self.qvif;
        write!(
            f,
            "qabf(gamma_g={},kappa_g={},sigma_g={},gamma_a={},kappa_a={},sigma_a={},L={}) \
             qcv(window={},alpha={},csf=[{},{},{},{}],cpd_scale={},intensity_scale={}) \
             qvif(noise_var={},weights={:?},c={}) qs(window={}) \
             ssim(window={},sigma={},k1={},k2={},L={})",
            q.gamma_g, q.kappa_g, q.sigma_g, q.gamma_a, q.kappa_a, q.sigma_a, q.weight_exponent,
            c.window, c.alpha, c.csf_a, c.csf_b, c.csf_c, c.csf_d, c.cycles_per_degree_scale, c.intensity_scale,
            v.noise_var, v.scale_weights, v.c, self.qs.window,
            self.ssim.window, self.ssim.sigma, self.ssim.k1, self.ssim.k2, self.ssim.dynamic_range
        )
    }
}

fn check_triple(a: &Image, b: &Image, f: &Image) -> Result<()> {
    check_same(a, b)?;
    check_same(a, f)?;
    if a.channels() != 1 {
        return Err(Error::InvalidInput("metrics need single-channel images".into()));
    }
    Ok(())
}

struct EdgeField {
    strength: Vec<f64>,
    orientation: Vec<f64>,
}

fn edges(img: &Image) -> EdgeField {
    let (gx, gy) = sobel_plane(img.data(), img.height(), img.width());
    let strength = gx.iter().zip(&gy).map(|(x, y)| x.hypot(*y)).collect();
    let orientation = gx
        .iter()
        .zip(&gy)
        .map(|(x, y)| if *x == 0.0 { FRAC_PI_2 } else { (y / x).atan() })
        .collect();
    EdgeField { strength, orientation }
}

fn edge_preservation(src: &EdgeField, fused: &EdgeField, i: usize, p: &QabfParams) -> f64 {
    let (gs, gf) = (src.strength[i], fused.strength[i]);
    let g = if gs > gf {
        gf / gs
    } else if gf > 0.0 {
        gs / gf
    } else {
        1.0
    };
    let a = 1.0 - (src.orientation[i] - fused.orientation[i]).abs() / FRAC_PI_2;
    let qg = p.gamma_g / (1.0 + (p.kappa_g * (g - p.sigma_g)).exp());
    let qa = p.gamma_a / (1.0 + (p.kappa_a * (a - p.sigma_a)).exp());
    qg * qa
}

/// Gradient-based edge-information transfer (Xydeas–Petrović). Images
/// without any edges score 0.
pub fn q_abf(a: &Image, b: &Image, f: &Image) -> Result<f64> {
    q_abf_with(a, b, f, &QabfParams::default())
}

pub fn q_abf_with(a: &Image, b: &Image, f: &Image, p: &QabfParams) -> Result<f64> {
    check_triple(a, b, f)?;
    let (ea, eb, ef) = (edges(a), edges(b), edges(f));
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..ea.strength.len() {
        let wa = ea.strength[i].powf(p.weight_exponent);
        let wb = eb.strength[i].powf(p.weight_exponent);
        num += edge_preservation(&ea, &ef, i, p) * wa + edge_preservation(&eb, &ef, i, p) * wb;
        den += wa + wb;
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

fn fft2(data: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
    if inverse {
        let s = 1.0 / (h * w) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Signed frequency (cycles per image) of DFT bin `k` out of `n`.
pub fn signed_frequency(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Contrast sensitivity at DFT bin `(ky, kx)`.
pub fn csf_weight(ky: usize, kx: usize, h: usize, w: usize, p: &QcvParams) -> f64 {
    let u = signed_frequency(kx, w) / p.cycles_per_degree_scale;
    let v = signed_frequency(ky, h) / p.cycles_per_degree_scale;
    let r = u.hypot(v);
    p.csf_a * (p.csf_b + p.csf_c * r) * (-(p.csf_c * r).powf(p.csf_d)).exp()
}

fn csf_filtered_difference(x: &Image, f: &Image, p: &QcvParams) -> Vec<f64> {
    let (h, w) = x.dims();
    let mut buf: Vec<Complex<f64>> = x
        .data()
        .iter()
        .zip(f.data())
        .map(|(a, b)| Complex::new((a - b) * p.intensity_scale, 0.0))
        .collect();
    fft2(&mut buf, h, w, false);
    for ky in 0..h {
        for kx in 0..w {
            buf[ky * w + kx] *= csf_weight(ky, kx, h, w, p);
        }
    }
    fft2(&mut buf, h, w, true);
    buf.into_iter().map(|c| c.re).collect()
}

/// Region tiling used by Q_CV: `(y0, y1, x0, x1)` half-open, partial regions
/// at the bottom/right edges included.
pub fn regions(h: usize, w: usize, size: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for y0 in (0..h).step_by(size) {
        for x0 in (0..w).step_by(size) {
            out.push((y0, (y0 + size).min(h), x0, (x0 + size).min(w)));
        }
    }
    out
}

/// Chen–Varshney perceptual distortion (lower is better, 0 when `f`
/// reproduces both sources). When neither source has any edges the regional
/// distortions are averaged unweighted.
pub fn q_cv(a: &Image, b: &Image, f: &Image) -> Result<f64> {
    q_cv_with(a, b, f, &QcvParams::default())
}

pub fn q_cv_with(a: &Image, b: &Image, f: &Image, p: &QcvParams) -> Result<f64> {
    check_triple(a, b, f)?;
    let (h, w) = a.dims();
    let sal = |img: &Image| {
        edges(img)
            .strength
            .into_iter()
            .map(|g| (g * p.intensity_scale).powf(p.alpha))
            .collect::<Vec<_>>()
    };
    let (ga, gb) = (sal(a), sal(b));
    let (da, db) = (csf_filtered_difference(a, f, p), csf_filtered_difference(b, f, p));
    let mut num = 0.0;
    let mut den = 0.0;
    let mut plain = 0.0;
    let regs = regions(h, w, p.window);
    for &(y0, y1, x0, x1) in &regs {
        let (mut la, mut lb, mut ma, mut mb) = (0.0, 0.0, 0.0, 0.0);
        for y in y0..y1 {
            for x in x0..x1 {
                let i = y * w + x;
                la += ga[i];
                lb += gb[i];
                ma += da[i] * da[i];
                mb += db[i] * db[i];
            }
        }
        let n = ((y1 - y0) * (x1 - x0)) as f64;
        let (ma, mb) = (ma / n, mb / n);
        num += la * ma + lb * mb;
        den += la + lb;
        plain += 0.5 * (ma + mb);
    }
    Ok(if den > 0.0 { num / den } else { plain / regs.len() as f64 })
}

struct VifScale {
    vid: Vec<f64>,
    vind: Vec<f64>,
    gain: Vec<f64>,
}

fn downsample2(src: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(oh * ow);
    for y in (0..h).step_by(2) {
        for x in (0..w).step_by(2) {
            out.push(src[y * w + x]);
        }
    }
    (out, oh, ow)
}

/// Window side for VIF scale `s` (1-based): `2^(5−s) + 1`.
pub fn vif_window(scale: usize) -> usize {
    (1 << (5 - scale)) + 1
}

fn vif_scales(reference: &Image, dist: &Image, p: &QvifParams) -> Vec<Option<VifScale>> {
    let (mut r, mut d) = (reference.data().to_vec(), dist.data().to_vec());
    let (mut h, mut w) = reference.dims();
    let mut out = Vec::with_capacity(4);
    for scale in 1..=4 {
        let n = vif_window(scale);
        let k = gaussian_kernel(n, n as f64 / 5.0);
        if scale > 1 {
            if h < n || w < n {
                // The pyramid cannot shrink further; coarser scales are gone too.
                out.resize_with(4, || None);
                break;
            }
            let (rf, fh, fw) = filter_valid(&r, h, w, &k);
            let (df, _, _) = filter_valid(&d, h, w, &k);
            let (rs, sh, sw) = downsample2(&rf, fh, fw);
            let (ds, _, _) = downsample2(&df, fh, fw);
            r = rs;
            d = ds;
            h = sh;
            w = sw;
        }
        if h < n || w < n {
            out.push(None);
            continue;
        }
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).collect::<Vec<_>>();
        let (mu1, _, _) = filter_valid(&r, h, w, &k);
        let (mu2, _, _) = filter_valid(&d, h, w, &k);
        let (rr, _, _) = filter_valid(&prod(&r, &r), h, w, &k);
        let (dd, _, _) = filter_valid(&prod(&d, &d), h, w, &k);
        let (rd, _, _) = filter_valid(&prod(&r, &d), h, w, &k);
        let m = mu1.len();
        let mut s = VifScale {
            vid: Vec::with_capacity(m),
            vind: Vec::with_capacity(m),
            gain: Vec::with_capacity(m),
        };
        for i in 0..m {
            let (g, s1, sv) = vif_gain(mu1[i], mu2[i], rr[i], dd[i], rd[i]);
            s.vid.push((1.0 + g * g * s1 / (sv + p.noise_var)).log10());
            s.vind.push((1.0 + s1 / p.noise_var).log10());
            s.gain.push(g);
        }
        out.push(Some(s));
    }
    out
}

/// Gain `g`, source variance and distortion variance of the local
/// `dist = g·ref + v` channel model, with the usual degenerate-case rules.
pub fn vif_gain(mu1: f64, mu2: f64, e11: f64, e22: f64, e12: f64) -> (f64, f64, f64) {
    const EPS: f64 = 1e-10;
    let mut s1 = (e11 - mu1 * mu1).max(0.0);
    let s2 = (e22 - mu2 * mu2).max(0.0);
    let s12 = e12 - mu1 * mu2;
    let mut g = s12 / (s1 + EPS);
    let mut sv = s2 - g * s12;
    if s1 < EPS {
        g = 0.0;
        sv = s2;
        s1 = 0.0;
    }
    if s2 < EPS {
        g = 0.0;
        sv = 0.0;
    }
    if g < 0.0 {
        sv = s2;
        g = 0.0;
    }
    if sv <= EPS {
        sv = EPS;
    }
    (g, s1, sv)
}

/// Multi-scale visual-information-fidelity fusion metric (Han et al.). At
/// each position the source whose local gain into `f` is larger supplies the
/// information terms. Scales too small for their window are dropped and the
/// remaining weights renormalized.
pub fn q_vif(a: &Image, b: &Image, f: &Image) -> Result<f64> {
    q_vif_with(a, b, f, &QvifParams::default())
}

pub fn q_vif_with(a: &Image, b: &Image, f: &Image, p: &QvifParams) -> Result<f64> {
    check_triple(a, b, f)?;
    let sa = vif_scales(a, f, p);
    let sb = vif_scales(b, f, p);
    let mut total = 0.0;
    let mut weight = 0.0;
    for (s, (xa, xb)) in sa.iter().zip(&sb).enumerate() {
        let (Some(xa), Some(xb)) = (xa, xb) else { continue };
        let mut vid = 0.0;
        let mut vind = 0.0;
        for i in 0..xa.vid.len() {
            let (d, n) = if xb.gain[i] > xa.gain[i] {
                (xb.vid[i], xb.vind[i])
            } else {
                (xa.vid[i], xa.vind[i])
            };
            vid += d + p.c;
            vind += n + p.c;
        }
        total += p.scale_weights[s] * vid / vind;
        weight += p.scale_weights[s];
    }
    if weight == 0.0 {
        return Err(Error::InvalidInput("image too small for any VIF scale".into()));
    }
    Ok(total / weight)
}

/// Summed-area table with a zero guard row/column.
struct Integral {
    w: usize,
    t: Vec<f64>,
}

impl Integral {
    fn new(src: &[f64], h: usize, w: usize) -> Self {
        let mut t = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += src[y * w + x];
                t[(y + 1) * (w + 1) + x + 1] = t[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w: w + 1, t }
    }

    fn sum(&self, y0: usize, x0: usize, n: usize) -> f64 {
        let (y1, x1) = (y0 + n, x0 + n);
        self.t[y1 * self.w + x1] - self.t[y0 * self.w + x1] - self.t[y1 * self.w + x0] + self.t[y0 * self.w + x0]
    }
}

/// Variance floor below which a window is treated as flat.
pub const FLAT_VARIANCE: f64 = 1e-12;

/// Universal image quality index from window moments.
pub fn uiqi(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    let lum = mx * mx + my * my;
    let con = vx + vy;
    if con < FLAT_VARIANCE {
        if lum == 0.0 {
            1.0
        } else {
            2.0 * mx * my / lum
        }
    } else if lum == 0.0 {
        2.0 * cxy / con
    } else {
        4.0 * cxy * mx * my / (con * lum)
    }
}

/// Piella's saliency-weighted fusion quality index.
pub fn q_s(a: &Image, b: &Image, f: &Image) -> Result<f64> {
    q_s_with(a, b, f, &QsParams::default())
}

pub fn q_s_with(a: &Image, b: &Image, f: &Image, p: &QsParams) -> Result<f64> {
    check_triple(a, b, f)?;
    let (h, w) = a.dims();
    let n = p.window;
    if h < n || w < n {
        return Err(Error::InvalidInput(format!("{h}x{w} is smaller than the Q_S window")));
    }
    let sq = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (da, db, df) = (a.data(), b.data(), f.data());
    let ia = Integral::new(da, h, w);
    let ib = Integral::new(db, h, w);
    let iff = Integral::new(df, h, w);
    let iaa = Integral::new(&sq(da, da), h, w);
    let ibb = Integral::new(&sq(db, db), h, w);
    let iff2 = Integral::new(&sq(df, df), h, w);
    let iaf = Integral::new(&sq(da, df), h, w);
    let ibf = Integral::new(&sq(db, df), h, w);
    let area = (n * n) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - n {
        for x in 0..=w - n {
            let (ma, mb, mf) = (ia.sum(y, x, n) / area, ib.sum(y, x, n) / area, iff.sum(y, x, n) / area);
            let va = (iaa.sum(y, x, n) / area - ma * ma).max(0.0);
            let vb = (ibb.sum(y, x, n) / area - mb * mb).max(0.0);
            let vf = (iff2.sum(y, x, n) / area - mf * mf).max(0.0);
            let caf = iaf.sum(y, x, n) / area - ma * mf;
            let cbf = ibf.sum(y, x, n) / area - mb * mf;
            let lambda = if va + vb > FLAT_VARIANCE { va / (va + vb) } else { 0.5 };
            total += lambda * uiqi(ma, mf, va, vf, caf) + (1.0 - lambda) * uiqi(mb, mf, vb, vf, cbf);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean of the SSIMs between the fused image and each source.
pub fn q_ssim(a: &Image, b: &Image, f: &Image) -> Result<f64> {
    q_ssim_with(a, b, f, &SsimParams::default())
}

pub fn q_ssim_with(a: &Image, b: &Image, f: &Image, p: &SsimParams) -> Result<f64> {
    check_triple(a, b, f)?;
    let (h, w) = a.dims();
    let fa = ssim_planes(f.data(), a.data(), h, w, p)?;
    let fb = ssim_planes(f.data(), b.data(), h, w, p)?;
    Ok(0.5 * (fa + fb))
}

/// Mean Euclidean distance between two fields, in pixels.
pub fn endpoint_error(pred: &DeformationField, truth: &DeformationField) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::DimensionMismatch(format!(
            "fields {:?} vs {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    let n = pred.dx().len();
    let mut total = 0.0;
    for i in 0..n {
        total += (pred.dx()[i] - truth.dx()[i]).hypot(pred.dy()[i] - truth.dy()[i]);
    }
    Ok(total / n as f64)
}

/// One row of a metric report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricScores {
    pub q_abf: f64,
    pub q_cv: f64,
    pub q_ssim: f64,
    pub q_vif: f64,
    pub q_s: f64,
}

impl MetricScores {
    pub const NAMES: [&'static str; 5] = ["Q_AB/F", "Q_CV", "Q_SSIM", "Q_VIF", "Q_S"];

    pub fn compute(a: &Image, b: &Image, f: &Image, p: &MetricParams) -> Result<Self> {
        Ok(Self {
            q_abf: q_abf_with(a, b, f, &p.qabf)?,
            q_cv: q_cv_with(a, b, f, &p.qcv)?,
            q_ssim: q_ssim_with(a, b, f, &p.ssim)?,
            q_vif: q_vif_with(a, b, f, &p.qvif)?,
            q_s: q_s_with(a, b, f, &p.qs)?,
        })
    }

    pub fn values(&self) -> [f64; 5] {
        [self.q_abf, self.q_cv, self.q_ssim, self.q_vif, self.q_s]
    }
}

/// Scores for one test image. `label_scores` uses the ground-truth aligned
/// source as `A`; `registered_scores` uses the pipeline's own warped source.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub registered: MetricScores,
    pub label: MetricScores,
    pub endpoint_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub params: MetricParams,
    pub rows: Vec<MetricRow>,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl MetricReport {
    pub fn header() -> String {
        let mut cols = vec!["id".to_string()];
        for variant in ["registered", "label"] {
            for name in MetricScores::NAMES {
                cols.push(format!("{variant}:{name}"));
            }
        }
        cols.push("EPE_px".into());
        cols.join(",")
    }

    fn columns(&self) -> Vec<Vec<f64>> {
        let mut cols = vec![Vec::new(); 11];
        for r in &self.rows {
            for (i, v) in r.registered.values().into_iter().chain(r.label.values()).enumerate() {
                cols[i].push(v);
            }
            cols[10].push(r.endpoint_error.unwrap_or(f64::NAN));
        }
        cols
    }

    /// CSV with `#` comment lines carrying `comments` and the metric
    /// parameters, one row per image, then `mean` and `median` rows.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str(&format!("# metric_params: {}\n", self.params));
        out.push_str(&Self::header());
        out.push('\n');
        let fmt = |v: f64| if v.is_nan() { String::new() } else { format!("{v:.6}") };
        for r in &self.rows {
            let mut cells = vec![r.id.clone()];
            cells.extend(r.registered.values().iter().chain(&r.label.values()).map(|v| fmt(*v)));
            cells.push(r.endpoint_error.map(fmt).unwrap_or_default());
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        if !self.rows.is_empty() {
            let cols = self.columns();
            for (name, agg) in [("mean", mean as fn(&[f64]) -> f64), ("median", median)] {
                let mut cells = vec![name.to_string()];
                for c in &cols {
                    let finite: Vec<f64> = c.iter().copied().filter(|v| !v.is_nan()).collect();
                    cells.push(if finite.is_empty() { String::new() } else { fmt(agg(&finite)) });
                }
                out.push_str(&cells.join(","));
                out.push('\n');
            }
        }
        out
    }
}
