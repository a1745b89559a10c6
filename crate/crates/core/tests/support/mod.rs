#![allow(clippy::needless_range_loop)]

//! Brute-force reference implementations of the frozen metric definitions and
//! shared fixtures. Written for clarity rather than speed, with no code shared
//! with the library.

#![allow(dead_code)]

use physdiff_core::image::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth random image with some texture, every sample strictly inside (0, 1).
pub fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
    let freq: [f64; 3] = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
    let noise: Vec<f64> = (0..3 * h * w).map(|_| rng.random_range(-0.15..0.15)).collect();
    Image::from_fn(h, w, |c, y, x| {
        let wave = 0.2 * ((y as f64 * freq[c]).sin() * (x as f64 * freq[(c + 1) % 3]).cos());
        (base[c] + wave + noise[(c * h + y) * w + x]).clamp(0.01, 0.99)
    })
    .unwrap()
}

fn gray(img: &Image, y: usize, x: usize) -> f64 {
    let [r, g, b] = img.rgb(y, x);
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mut se = 0.0;
    let mut n = 0.0;
    for c in 0..3 {
        for y in 0..a.height() {
            for x in 0..a.width() {
                se += (a.get(c, y, x) - b.get(c, y, x)).powi(2);
                n += 1.0;
            }
        }
    }
    if se == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * (se / n).log10()
    }
}

/// Direct 2-D windowed SSIM on luminance.
pub fn ssim(a: &Image, b: &Image) -> f64 {
    let (h, w) = a.dims();
    let mut win = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut count = 0.0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = win[i][j] / total;
                    let (p, q) = (gray(a, y0 + i, x0 + j), gray(b, y0 + i, x0 + j));
                    ma += k * p;
                    mb += k * q;
                    saa += k * p * p;
                    sbb += k * q * q;
                    sab += k * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    acc / count
}

fn lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = |c: f64| if c > 0.04045 { ((c + 0.055) / 1.055).powf(2.4) } else { c / 12.92 };
    let (r, g, b) = (lin(rgb[0]), lin(rgb[1]), lin(rgb[2]));
    let m = [[0.4124564, 0.3575761, 0.1804375], [0.2126729, 0.7151522, 0.0721750], [0.0193339, 0.1191920, 0.9503041]];
    let white = [0.95047, 1.0, 1.08883];
    let mut f = [0.0; 3];
    for k in 0..3 {
        let t = (m[k][0] * r + m[k][1] * g + m[k][2] * b) / white[k];
        f[k] = if t > 216.0 / 24389.0 { t.powf(1.0 / 3.0) } else { (24389.0 / 27.0 * t + 16.0) / 116.0 };
    }
    [(116.0 * f[1] - 16.0) / 100.0, 500.0 * (f[0] - f[1]) / 100.0, 200.0 * (f[1] - f[2]) / 100.0]
}

pub fn uciqe(img: &Image) -> f64 {
    let mut ls = Vec::new();
    let mut cs = Vec::new();
    let mut ss = Vec::new();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let [l, a, b] = lab(img.rgb(y, x));
            let c = a.hypot(b);
            ls.push(l);
            cs.push(c);
            ss.push(if l > 0.0 { c / l } else { 0.0 });
        }
    }
    let n = ls.len() as f64;
    let mc = cs.iter().sum::<f64>() / n;
    let sc = (cs.iter().map(|c| (c - mc) * (c - mc)).sum::<f64>() / n).sqrt();
    ls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((n / 100.0).ceil() as usize).max(1);
    let top: f64 = ls.iter().rev().take(k).sum();
    let bottom: f64 = ls.iter().take(k).sum();
    0.4680 * sc + 0.2745 * (top - bottom) / k as f64 + 0.2576 * ss.iter().sum::<f64>() / n
}

fn trimmed(mut v: Vec<f64>) -> (f64, f64) {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = v.len();
    let low = (0.1 * k as f64).ceil() as usize;
    let high = (0.1 * k as f64).floor() as usize;
    let kept: Vec<f64> = v.iter().copied().skip(low).take(k - low - high).collect();
    let mu = kept.iter().sum::<f64>() / kept.len() as f64;
    let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / k as f64;
    (mu, var)
}

pub fn uicm(img: &Image) -> f64 {
    let mut rg = Vec::new();
    let mut yb = Vec::new();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let [r, g, b] = img.rgb(y, x).map(|v| v * 255.0);
            rg.push(r - g);
            yb.push(0.5 * (r + g) - b);
        }
    }
    let (m1, v1) = trimmed(rg);
    let (m2, v2) = trimmed(yb);
    -0.0268 * (m1 * m1 + m2 * m2).sqrt() + 0.1586 * (v1 + v2).sqrt()
}

fn mirror(i: i64, n: usize) -> usize {
    let last = n as i64 - 1;
    (last - (last - i.abs()).abs()) as usize
}

fn sobel(plane: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (h, w) = (plane.len(), plane[0].len());
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let mut out = vec![vec![0.0; w]; h];
    for y in 0..h {
        for x in 0..w {
            let (mut gx, mut gy) = (0.0, 0.0);
            for i in 0..3 {
                for j in 0..3 {
                    let v = plane[mirror(y as i64 + i as i64 - 1, h)][mirror(x as i64 + j as i64 - 1, w)];
                    gx += kx[i][j] * v;
                    gy += kx[j][i] * v;
                }
            }
            out[y][x] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

fn blocks(plane: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for by in 0..plane.len() / 8 {
        for bx in 0..plane[0].len() / 8 {
            let vals: Vec<f64> = (0..64).map(|k| plane[by * 8 + k / 8][bx * 8 + k % 8]).collect();
            let lo = vals.iter().cloned().fold(f64::MAX, f64::min);
            let hi = vals.iter().cloned().fold(f64::MIN, f64::max);
            out.push((lo, hi));
        }
    }
    out
}

pub fn uism(img: &Image) -> f64 {
    let weights = [0.299, 0.587, 0.114];
    let mut total = 0.0;
    for c in 0..3 {
        let plane: Vec<Vec<f64>> =
            (0..img.height()).map(|y| (0..img.width()).map(|x| img.get(c, y, x)).collect()).collect();
        let e = sobel(&plane);
        let edge: Vec<Vec<f64>> =
            e.iter().zip(&plane).map(|(er, pr)| er.iter().zip(pr).map(|(a, b)| a * b).collect()).collect();
        let bl = blocks(&edge);
        let s: f64 = bl.iter().map(|&(lo, hi)| if lo > 1e-12 && hi > lo { (hi / lo).ln() } else { 0.0 }).sum();
        total += weights[c] * 2.0 * s / bl.len() as f64;
    }
    total
}

pub fn uiconm(img: &Image) -> f64 {
    let plane: Vec<Vec<f64>> = (0..img.height()).map(|y| (0..img.width()).map(|x| gray(img, y, x)).collect()).collect();
    let bl = blocks(&plane);
    let s: f64 = bl
        .iter()
        .map(|&(lo, hi)| {
            if hi + lo > 0.0 && hi > lo {
                let r = (hi - lo) / (hi + lo);
                r * r.ln()
            } else {
                0.0
            }
        })
        .sum();
    -s / bl.len() as f64
}

pub fn uiqm(img: &Image) -> f64 {
    0.0282 * uicm(img) + 0.2953 * uism(img) + 3.5753 * uiconm(img)
}
