//! Full-reference (PSNR, SSIM) and no-reference (UCIQE, UIQM) image quality scores.
//!
//! The exact definitions, including the normalisations and the treatment of
//! degenerate blocks, are listed in `docs/metrics.md`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::Image;

/// Peak signal-to-noise ratio in dB for intensities in `[0, 1]`; `+∞` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// Luminance `0.299 R + 0.587 G + 0.114 B`.
pub fn luminance(img: &Image) -> Vec<f64> {
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    (0..img.pixels()).map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).collect()
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" filtering with the SSIM window.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for xo in 0..wo {
            rows[y * wo + xo] = k.iter().enumerate().map(|(i, kv)| kv * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for yo in 0..ho {
        for xo in 0..wo {
            out[yo * wo + xo] = k.iter().enumerate().map(|(i, kv)| kv * rows[(yo + i) * wo + xo]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luminance planes over all valid 11×11 Gaussian windows.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidParameter(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let (x, y) = (luminance(a), luminance(b));
    let k = gaussian_kernel();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &k));
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// sRGB (D65) to CIELab with `L*`, `a*`, `b*` divided by 100.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| if c <= 0.04045 { c / 12.92 } else { ((c + 0.055) / 1.055).powf(2.4) });
    let [r, g, b] = lin;
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let f = |t: f64| {
        let d: f64 = 6.0 / 29.0;
        if t > d.powi(3) {
            t.cbrt()
        } else {
            t / (3.0 * d * d) + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(x / 0.95047), f(y), f(z / 1.08883));
    [(116.0 * fy - 16.0) / 100.0, 5.0 * (fx - fy), 2.0 * (fy - fz)]
}

pub const UCIQE_WEIGHTS: [f64; 3] = [0.4680, 0.2745, 0.2576];

/// Number of samples averaged at each end of the sorted luminance for the contrast term.
fn tail_count(n: usize) -> usize {
    (n as f64 * 0.01).ceil().max(1.0) as usize
}

pub fn uciqe(img: &Image) -> f64 {
    let n = img.pixels();
    let mut l = Vec::with_capacity(n);
    let mut chroma = Vec::with_capacity(n);
    let mut sat_sum = 0.0;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let [lv, a, b] = srgb_to_lab(img.rgb(y, x));
            let c = (a * a + b * b).sqrt();
            sat_sum += if lv > 0.0 { c / lv } else { 0.0 };
            l.push(lv);
            chroma.push(c);
        }
    }
    let mean_c = chroma.iter().sum::<f64>() / n as f64;
    let sd_c = (chroma.iter().map(|c| (c - mean_c).powi(2)).sum::<f64>() / n as f64).sqrt();
    l.sort_by(f64::total_cmp);
    let k = tail_count(n);
    let contrast = (l[n - k..].iter().sum::<f64>() - l[..k].iter().sum::<f64>()) / k as f64;
    let sat = sat_sum / n as f64;
    UCIQE_WEIGHTS[0] * sd_c + UCIQE_WEIGHTS[1] * contrast + UCIQE_WEIGHTS[2] * sat
}

pub const UIQM_WEIGHTS: [f64; 3] = [0.0282, 0.2953, 3.5753];
pub const BLOCK: usize = 8;
const TRIM: f64 = 0.1;

/// Asymmetric alpha-trimmed mean and the variance about it over all samples.
fn trimmed_stats(mut v: Vec<f64>) -> (f64, f64) {
    let k = v.len();
    v.sort_by(f64::total_cmp);
    let lo = (TRIM * k as f64).ceil() as usize;
    let hi = (TRIM * k as f64).floor() as usize;
    let kept = &v[lo..k - hi];
    let mu = kept.iter().sum::<f64>() / kept.len() as f64;
    let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / k as f64;
    (mu, var)
}

/// Colourfulness on the 0–255 scale.
pub fn uicm(img: &Image) -> f64 {
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let rg: Vec<f64> = (0..img.pixels()).map(|i| 255.0 * (r[i] - g[i])).collect();
    let yb: Vec<f64> = (0..img.pixels()).map(|i| 255.0 * ((r[i] + g[i]) / 2.0 - b[i])).collect();
    let (mu_rg, var_rg) = trimmed_stats(rg);
    let (mu_yb, var_yb) = trimmed_stats(yb);
    -0.0268 * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt() + 0.1586 * (var_rg + var_yb).sqrt()
}

/// Index with reflection about the edge sample (`-1 → 1`, `n → n-2`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// Sobel gradient magnitude.
pub fn sobel_magnitude(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| p[reflect(y, h) * w + reflect(x, w)];
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Visits each complete `BLOCK×BLOCK` block (top-left crop) as `(min, max)`.
fn block_extrema(p: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    let (k1, k2) = (h / BLOCK, w / BLOCK);
    let mut out = Vec::with_capacity(k1 * k2);
    for by in 0..k1 {
        for bx in 0..k2 {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for y in by * BLOCK..(by + 1) * BLOCK {
                for &v in &p[y * w + bx * BLOCK..y * w + (bx + 1) * BLOCK] {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            out.push((lo, hi));
        }
    }
    out
}

/// Edge magnitudes at or below this are Sobel round-off on flat regions.
pub const EME_FLOOR: f64 = 1e-12;

fn eme(p: &[f64], h: usize, w: usize) -> f64 {
    let blocks = block_extrema(p, h, w);
    let sum: f64 = blocks
        .iter()
        .map(|&(lo, hi)| if lo <= EME_FLOOR || hi <= EME_FLOOR || hi == lo { 0.0 } else { (hi / lo).ln() })
        .sum();
    2.0 * sum / blocks.len() as f64
}

pub const UISM_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Sharpness: weighted EME of each channel's Sobel-edge map.
pub fn uism(img: &Image) -> f64 {
    let (h, w) = img.dims();
    (0..3)
        .map(|c| {
            let ch = img.plane(c);
            let edges: Vec<f64> = sobel_magnitude(ch, h, w).iter().zip(ch).map(|(e, v)| e * v).collect();
            UISM_WEIGHTS[c] * eme(&edges, h, w)
        })
        .sum()
}

/// Contrast: block Michelson-contrast entropy of the luminance.
pub fn uiconm(img: &Image) -> f64 {
    let (h, w) = img.dims();
    let blocks = block_extrema(&luminance(img), h, w);
    let sum: f64 = blocks
        .iter()
        .map(|&(lo, hi)| {
            let den = hi + lo;
            if den <= 0.0 || hi == lo {
                0.0
            } else {
                let rho = (hi - lo) / den;
                rho * rho.ln()
            }
        })
        .sum();
    -sum / blocks.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UiqmScore {
    pub uiqm: f64,
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
}

pub fn uiqm(img: &Image) -> Result<UiqmScore> {
    if img.height() < BLOCK || img.width() < BLOCK {
        return Err(Error::InvalidParameter(format!(
            "UIQM needs at least one {BLOCK}x{BLOCK} block, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    let (uicm, uism, uiconm) = (uicm(img), uism(img), uiconm(img));
    let uiqm = UIQM_WEIGHTS[0] * uicm + UIQM_WEIGHTS[1] * uism + UIQM_WEIGHTS[2] * uiconm;
    Ok(UiqmScore { uiqm, uicm, uism, uiconm })
}

/// Scores for one image; the full-reference fields are `None` without a reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub uciqe: f64,
    pub uiqm: f64,
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
}

pub fn evaluate(img: &Image, reference: Option<&Image>) -> Result<MetricReport> {
    let (psnr, ssim) = match reference {
        Some(r) => (Some(psnr(img, r)?), Some(ssim(img, r)?)),
        None => (None, None),
    };
    let q = uiqm(img)?;
    Ok(MetricReport { psnr, ssim, uciqe: uciqe(img), uiqm: q.uiqm, uicm: q.uicm, uism: q.uism, uiconm: q.uiconm })
}

/// Field-wise mean; a full-reference field is kept only when every report has it.
pub fn mean_report(reports: &[MetricReport]) -> Option<MetricReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: fn(&MetricReport) -> Option<f64>| -> Option<f64> {
        let v: Option<Vec<f64>> = reports.iter().map(f).collect();
        v.map(|v| v.iter().sum::<f64>() / n)
    };
    Some(MetricReport {
        psnr: mean_opt(|r| r.psnr),
        ssim: mean_opt(|r| r.ssim),
        uciqe: mean(|r| r.uciqe),
        uiqm: mean(|r| r.uiqm),
        uicm: mean(|r| r.uicm),
        uism: mean(|r| r.uism),
        uiconm: mean(|r| r.uiconm),
    })
}
