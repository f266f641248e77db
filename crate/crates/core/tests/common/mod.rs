//! Slow, literal re-implementations of the fusion metrics used as test
//! oracles. Everything works on plain `Vec<f64>` planes with explicit 2D
//! windows and a naive DFT, sharing no code with the library.

#![allow(dead_code)]

use std::f64::consts::PI;

pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Plane {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.v[y * self.w + x]
    }

    fn clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.max(0).min(self.w as isize - 1) as usize;
        let y = y.max(0).min(self.h as isize - 1) as usize;
        self.at(x, y)
    }
}

/// Deterministic 32x32 test scenes with edges, gradients and flat areas.
pub fn fixture(kind: usize) -> Plane {
    let (h, w) = (32, 32);
    let mut v = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            v[y * w + x] = match kind {
                0 => {
                    let disc = if (fx - 15.5).powi(2) + (fy - 13.0).powi(2) < 70.0 { 0.6 } else { 0.1 };
                    disc + 0.2 * fy / 31.0
                }
                1 => {
                    let bar = if (10..20).contains(&x) { 0.7 } else { 0.2 };
                    bar + 0.1 * (fx * 0.7 + fy * 0.3).sin()
                }
                2 => 0.5 + 0.4 * (fx * 0.4).sin() * (fy * 0.25).cos(),
                _ => ((x * 7 + y * 13) % 17) as f64 / 16.0,
            };
        }
    }
    Plane { h, w, v }
}

pub fn average(a: &Plane, b: &Plane) -> Plane {
    Plane {
        h: a.h,
        w: a.w,
        v: a.v.iter().zip(&b.v).map(|(x, y)| 0.5 * (x + y)).collect(),
    }
}

pub fn sobel(p: &Plane) -> (Vec<f64>, Vec<f64>) {
    const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let mut gx = vec![0.0; p.h * p.w];
    let mut gy = vec![0.0; p.h * p.w];
    for y in 0..p.h {
        for x in 0..p.w {
            let (mut sx, mut sy) = (0.0, 0.0);
            for j in 0..3 {
                for i in 0..3 {
                    let val = p.clamped(x as isize + i as isize - 1, y as isize + j as isize - 1);
                    sx += KX[j][i] * val;
                    sy += KX[i][j] * val;
                }
            }
            gx[y * p.w + x] = sx;
            gy[y * p.w + x] = sy;
        }
    }
    (gx, gy)
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<Vec<f64>> {
    let c = (n / 2) as f64;
    let mut win = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    for (j, row) in win.iter_mut().enumerate() {
        for (i, cell) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            *cell = (-d2 / (2.0 * sigma * sigma)).exp();
            total += *cell;
        }
    }
    for row in win.iter_mut() {
        for cell in row.iter_mut() {
            *cell /= total;
        }
    }
    win
}

/// Weighted local moments `(mx, my, vx, vy, cxy)` of a window at `(x0, y0)`.
fn moments(a: &Plane, b: &Plane, win: &[Vec<f64>], x0: usize, y0: usize) -> (f64, f64, f64, f64, f64) {
    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (j, row) in win.iter().enumerate() {
        for (i, &k) in row.iter().enumerate() {
            let (u, v) = (a.at(x0 + i, y0 + j), b.at(x0 + i, y0 + j));
            mx += k * u;
            my += k * v;
            xx += k * u * u;
            yy += k * v * v;
            xy += k * u * v;
        }
    }
    (mx, my, xx - mx * mx, yy - my * my, xy - mx * my)
}

pub fn ssim(a: &Plane, b: &Plane) -> f64 {
    let win = gaussian_window(11, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0.0;
    for y in 0..=a.h - 11 {
        for x in 0..=a.w - 11 {
            let (mx, my, vx, vy, cxy) = moments(a, b, &win, x, y);
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    total / count
}

pub fn q_ssim(a: &Plane, b: &Plane, f: &Plane) -> f64 {
    0.5 * (ssim(f, a) + ssim(f, b))
}

pub fn q_abf(a: &Plane, b: &Plane, f: &Plane) -> f64 {
    let (kg, sg, ka, sa) = (-15.0f64, 0.5, -22.0f64, 0.8);
    let gg = 1.0 + (kg * (1.0 - sg)).exp();
    let ga = 1.0 + (ka * (1.0 - sa)).exp();
    let info = |p: &Plane| {
        let (gx, gy) = sobel(p);
        let g: Vec<f64> = (0..gx.len()).map(|i| (gx[i] * gx[i] + gy[i] * gy[i]).sqrt()).collect();
        let alpha: Vec<f64> = (0..gx.len())
            .map(|i| if gx[i] == 0.0 { PI / 2.0 } else { (gy[i] / gx[i]).atan() })
            .collect();
        (g, alpha)
    };
    let (ga_, aa) = info(a);
    let (gb_, ab) = info(b);
    let (gf, af) = info(f);
    let q = |gs: f64, as_: f64, gf: f64, af: f64| {
        let rel = if gs == 0.0 && gf == 0.0 { 1.0 } else { gs.min(gf) / gs.max(gf) };
        let ang = 1.0 - (as_ - af).abs() / (PI / 2.0);
        gg / (1.0 + (kg * (rel - sg)).exp()) * ga / (1.0 + (ka * (ang - sa)).exp())
    };
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..gf.len() {
        num += q(ga_[i], aa[i], gf[i], af[i]) * ga_[i] + q(gb_[i], ab[i], gf[i], af[i]) * gb_[i];
        den += ga_[i] + gb_[i];
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn naive_dft(re: &[f64], im: &[f64], h: usize, w: usize, sign: f64) -> (Vec<f64>, Vec<f64>) {
    let mut ore = vec![0.0; h * w];
    let mut oim = vec![0.0; h * w];
    for v in 0..h {
        for u in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let t = sign * 2.0 * PI * ((u * x) as f64 / w as f64 + (v * y) as f64 / h as f64);
                    let (s, c) = t.sin_cos();
                    let (a, b) = (re[y * w + x], im[y * w + x]);
                    sr += a * c - b * s;
                    si += a * s + b * c;
                }
            }
            ore[v * w + u] = sr;
            oim[v * w + u] = si;
        }
    }
    (ore, oim)
}

fn csf_filter(diff: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (re, im) = naive_dft(diff, &vec![0.0; h * w], h, w, -1.0);
    let freq = |k: usize, n: usize| if 2 * k < n { k as f64 } else { k as f64 - n as f64 };
    let mut fre = re.clone();
    let mut fim = im.clone();
    for v in 0..h {
        for u in 0..w {
            let r = (freq(u, w) / 4.0).hypot(freq(v, h) / 4.0);
            let s = 2.6 * (0.0192 + 0.114 * r) * (-(0.114 * r).powf(1.1)).exp();
            fre[v * w + u] *= s;
            fim[v * w + u] *= s;
        }
    }
    let (out, _) = naive_dft(&fre, &fim, h, w, 1.0);
    out.into_iter().map(|x| x / (h * w) as f64).collect()
}

pub fn q_cv(a: &Plane, b: &Plane, f: &Plane) -> f64 {
    let (h, w) = (a.h, a.w);
    let sal = |p: &Plane| {
        let (gx, gy) = sobel(p);
        (0..gx.len()).map(|i| 255.0 * (gx[i] * gx[i] + gy[i] * gy[i]).sqrt()).collect::<Vec<_>>()
    };
    let diff = |p: &Plane| {
        let d: Vec<f64> = p.v.iter().zip(&f.v).map(|(x, y)| 255.0 * (x - y)).collect();
        csf_filter(&d, h, w)
    };
    let (sa, sb) = (sal(a), sal(b));
    let (da, db) = (diff(a), diff(b));
    let (mut num, mut den, mut plain, mut count) = (0.0, 0.0, 0.0, 0.0);
    let mut y0 = 0;
    while y0 < h {
        let mut x0 = 0;
        while x0 < w {
            let (mut la, mut lb, mut ma, mut mb, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..(y0 + 16).min(h) {
                for x in x0..(x0 + 16).min(w) {
                    let i = y * w + x;
                    la += sa[i];
                    lb += sb[i];
                    ma += da[i].powi(2);
                    mb += db[i].powi(2);
                    n += 1.0;
                }
            }
            num += la * ma / n + lb * mb / n;
            den += la + lb;
            plain += 0.5 * (ma + mb) / n;
            count += 1.0;
            x0 += 16;
        }
        y0 += 16;
    }
    if den > 0.0 {
        num / den
    } else {
        plain / count
    }
}

fn filter_2d(p: &Plane, win: &[Vec<f64>]) -> Plane {
    let n = win.len();
    let (h, w) = (p.h + 1 - n, p.w + 1 - n);
    let mut v = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, row) in win.iter().enumerate() {
                for (i, k) in row.iter().enumerate() {
                    acc += k * p.at(x + i, y + j);
                }
            }
            v[y * w + x] = acc;
        }
    }
    Plane { h, w, v }
}

fn decimate(p: &Plane) -> Plane {
    let (h, w) = (p.h.div_ceil(2), p.w.div_ceil(2));
    let mut v = Vec::new();
    for y in 0..h {
        for x in 0..w {
            v.push(p.at(2 * x, 2 * y));
        }
    }
    Plane { h, w, v }
}

/// Per-window `(gain, VID, VIND)` terms of one scale.
fn vif_terms(r: &Plane, d: &Plane, win: &[Vec<f64>]) -> Vec<(f64, f64, f64)> {
    let n = win.len();
    let noise = 0.005;
    let mut out = Vec::new();
    for y in 0..=r.h - n {
        for x in 0..=r.w - n {
            let (_, _, mut s1, s2, s12) = moments(r, d, win, x, y);
            s1 = s1.max(0.0);
            let s2 = s2.max(0.0);
            let eps = 1e-10;
            let (mut g, mut sv);
            if s1 < eps {
                s1 = 0.0;
                g = 0.0;
                sv = s2;
            } else {
                g = s12 / (s1 + eps);
                sv = s2 - g * s12;
            }
            if s2 < eps {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                g = 0.0;
                sv = s2;
            }
            sv = sv.max(eps);
            out.push((g, (1.0 + g * g * s1 / (sv + noise)).log10(), (1.0 + s1 / noise).log10()));
        }
    }
    out
}

pub fn q_vif(a: &Plane, b: &Plane, f: &Plane) -> f64 {
    let weights = [1.0, 0.0, 0.15, 1.0];
    let c = 1e-7;
    let mut pa = Plane { h: a.h, w: a.w, v: a.v.clone() };
    let mut pb = Plane { h: b.h, w: b.w, v: b.v.clone() };
    let mut pf = Plane { h: f.h, w: f.w, v: f.v.clone() };
    let (mut total, mut wsum) = (0.0, 0.0);
    for s in 0..4 {
        let n = (1usize << (4 - s)) + 1;
        let win = gaussian_window(n, n as f64 / 5.0);
        if s > 0 {
            if pa.h < n || pa.w < n {
                break;
            }
            pa = decimate(&filter_2d(&pa, &win));
            pb = decimate(&filter_2d(&pb, &win));
            pf = decimate(&filter_2d(&pf, &win));
        }
        if pa.h < n || pa.w < n {
            continue;
        }
        let ta = vif_terms(&pa, &pf, &win);
        let tb = vif_terms(&pb, &pf, &win);
        let (mut num, mut den) = (0.0, 0.0);
        for (x, y) in ta.iter().zip(&tb) {
            let pick = if y.0 > x.0 { y } else { x };
            num += pick.1 + c;
            den += pick.2 + c;
        }
        total += weights[s] * num / den;
        wsum += weights[s];
    }
    total / wsum
}

fn uiqi(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    let lum = mx * mx + my * my;
    let con = vx + vy;
    match (con < 1e-12, lum == 0.0) {
        (true, true) => 1.0,
        (true, false) => 2.0 * mx * my / lum,
        (false, true) => 2.0 * cxy / con,
        (false, false) => 4.0 * cxy * mx * my / (con * lum),
    }
}

pub fn q_s(a: &Plane, b: &Plane, f: &Plane) -> f64 {
    let n = 8;
    let win = vec![vec![1.0 / 64.0; n]; n];
    let (mut total, mut count) = (0.0, 0.0);
    for y in 0..=a.h - n {
        for x in 0..=a.w - n {
            let (ma, mf, va, vf, caf) = moments(a, f, &win, x, y);
            let (mb, _, vb, _, cbf) = moments(b, f, &win, x, y);
            let (va, vb, vf) = (va.max(0.0), vb.max(0.0), vf.max(0.0));
            let lambda = if va + vb > 1e-12 { va / (va + vb) } else { 0.5 };
            total += lambda * uiqi(ma, mf, va, vf, caf) + (1.0 - lambda) * uiqi(mb, mf, vb, vf, cbf);
            count += 1.0;
        }
    }
    total / count
}
