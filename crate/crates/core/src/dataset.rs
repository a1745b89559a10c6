//! PNG codecs, resizing, paired-dataset layout and synthetic degradation.
//!
//! A paired dataset lives under one root: `raw/<stem>.png` holds degraded
//! inputs and `reference/<stem>.png` their clean counterparts. Synthetic sets
//! add `manifest.jsonl`, one JSON object per pair with the sampled physics.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::networks::checkpoint::write_atomic;
use crate::physics::{degrade, AmbientLight, AttenuationParams, Depth};

pub const RAW_DIR: &str = "raw";
pub const REFERENCE_DIR: &str = "reference";
pub const MANIFEST: &str = "manifest.jsonl";

/// Reads an 8- or 16-bit RGB PNG into `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let mut data = vec![0.0; CHANNELS * w * h];
    let mut put = |i: usize, px: [f64; 3]| {
        for c in 0..CHANNELS {
            data[c * w * h + i] = px[c];
        }
    };
    match decoded {
        DynamicImage::ImageRgb8(img) => {
            for (i, p) in img.pixels().enumerate() {
                put(i, p.0.map(|v| v as f64 / 255.0));
            }
        }
        DynamicImage::ImageRgb16(img) => {
            for (i, p) in img.pixels().enumerate() {
                put(i, p.0.map(|v| v as f64 / 65535.0));
            }
        }
        other => {
            return Err(Error::Dataset(format!(
                "{}: expected a 3-channel PNG, found {:?}",
                path.display(),
                other.color()
            )))
        }
    }
    Image::new(h, w, data)
}

/// Quantises with round-half-up to 8 bits.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes an 8-bit RGB PNG atomically.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = img.dims();
    let mut buf = RgbImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        p.0 = img.rgb(y as usize, x as usize).map(quantize);
    }
    let mut bytes = Vec::new();
    buf.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    write_atomic(path, &bytes)
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidParameter(format!("resize target {height}x{width} must be positive")));
    }
    let (h, w) = img.dims();
    if (h, w) == (height, width) {
        return Ok(img.clone());
    }
    let axis = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let scale = src as f64 / out as f64;
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(height, h), axis(width, w));
    let mut data = Vec::with_capacity(CHANNELS * height * width);
    for c in 0..CHANNELS {
        let p = img.plane(c);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Image::from_unclamped(height, width, data)
}

/// Closed interval sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }

    fn check(&self, what: &str, lo: f64, hi: f64) -> Result<()> {
        if !(self.0.is_finite() && self.1.is_finite() && lo <= self.0 && self.0 <= self.1 && self.1 <= hi) {
            return Err(Error::Config(format!("{what} range {}..{} must lie within {lo}..{hi}", self.0, self.1)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase", tag = "kind")]
pub enum DepthModel {
    /// One distance for the whole image.
    Scalar { range: Range },
    /// Linear in the row index from `top` to `bottom`.
    Ramp { top: Range, bottom: Range },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    /// Ambient range per channel (R, G, B).
    pub ambient: [Range; 3],
    /// Sort the sampled ambient so that blue ≥ green ≥ red.
    pub ambient_blue_bias: bool,
    pub beta_d: [Range; 3],
    /// Backscatter ranges; `None` reuses the sampled direct coefficients.
    pub beta_b: Option<[Range; 3]>,
    pub depth: DepthModel,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            ambient: [Range(0.1, 0.5); 3],
            ambient_blue_bias: true,
            beta_d: [Range(0.3, 0.8), Range(0.1, 0.4), Range(0.05, 0.3)],
            beta_b: None,
            depth: DepthModel::Scalar { range: Range(1.0, 8.0) },
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        for r in &self.ambient {
            r.check("ambient", 0.0, 1.0)?;
        }
        for r in self.beta_d.iter().chain(self.beta_b.iter().flatten()) {
            r.check("attenuation", 0.0, f64::INFINITY)?;
        }
        match &self.depth {
            DepthModel::Scalar { range } => range.check("depth", 0.0, f64::INFINITY),
            DepthModel::Ramp { top, bottom } => {
                top.check("depth", 0.0, f64::INFINITY)?;
                bottom.check("depth", 0.0, f64::INFINITY)
            }
        }
    }
}

/// Sampled depth, compact enough for the manifest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DepthSample {
    Scalar { d: f64 },
    Ramp { top: f64, bottom: f64 },
}

impl DepthSample {
    pub fn to_depth(&self, height: usize, width: usize) -> Depth {
        match *self {
            DepthSample::Scalar { d } => Depth::Uniform(d),
            DepthSample::Ramp { top, bottom } => {
                let mut values = Vec::with_capacity(height * width);
                for y in 0..height {
                    let f = if height > 1 { y as f64 / (height - 1) as f64 } else { 0.0 };
                    values.extend(std::iter::repeat_n(top + (bottom - top) * f, width));
                }
                Depth::Map { height, width, values }
            }
        }
    }
}

/// The physics sampled for one synthetic pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stem: String,
    pub ambient: [f64; 3],
    pub beta_d: [f64; 3],
    pub beta_b: [f64; 3],
    pub depth: DepthSample,
}

impl ManifestEntry {
    pub fn ambient(&self) -> Result<AmbientLight> {
        AmbientLight::new(self.ambient)
    }

    pub fn params(&self, height: usize, width: usize) -> AttenuationParams {
        AttenuationParams { beta_d: self.beta_d, beta_b: self.beta_b, depth: self.depth.to_depth(height, width) }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub raw: Image,
    pub reference: Image,
    pub entry: ManifestEntry,
}

/// Degrades every clean image with physics drawn from `cfg`, in input order.
pub fn synth_degrade(clean: &[(String, Image)], cfg: &SynthesisConfig) -> Result<Vec<SyntheticPair>> {
    if clean.is_empty() {
        return Err(Error::Dataset("no clean images to degrade".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    clean
        .iter()
        .map(|(stem, img)| {
            let mut ambient = cfg.ambient.map(|r| r.sample(&mut rng));
            if cfg.ambient_blue_bias {
                ambient.sort_by(f64::total_cmp);
            }
            let beta_d = cfg.beta_d.map(|r| r.sample(&mut rng));
            let beta_b = match &cfg.beta_b {
                Some(ranges) => ranges.map(|r| r.sample(&mut rng)),
                None => beta_d,
            };
            let depth = match &cfg.depth {
                DepthModel::Scalar { range } => DepthSample::Scalar { d: range.sample(&mut rng) },
                DepthModel::Ramp { top, bottom } => {
                    DepthSample::Ramp { top: top.sample(&mut rng), bottom: bottom.sample(&mut rng) }
                }
            };
            let entry = ManifestEntry { stem: stem.clone(), ambient, beta_d, beta_b, depth };
            let (h, w) = img.dims();
            let raw = degrade(img, &entry.ambient()?, &entry.params(h, w))?;
            Ok(SyntheticPair { raw, reference: img.clone(), entry })
        })
        .collect()
}

/// Stem-matched `(raw, reference)` file pairs under a dataset root.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub root: PathBuf,
    pub pairs: Vec<PairPaths>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPaths {
    pub stem: String,
    pub raw: PathBuf,
    pub reference: PathBuf,
}

/// PNG files in `dir` keyed by stem, in sorted order.
pub fn list_pngs(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            if let Some(stem) = path.file_stem() {
                out.insert(stem.to_string_lossy().into_owned(), path);
            }
        }
    }
    Ok(out)
}

impl PairedDataset {
    /// Requires every raw image to have a reference with the same stem and vice versa.
    pub fn open(root: &Path) -> Result<Self> {
        let raws = list_pngs(&root.join(RAW_DIR))?;
        let refs = list_pngs(&root.join(REFERENCE_DIR))?;
        if let Some(stem) = raws.keys().find(|k| !refs.contains_key(*k)) {
            return Err(Error::Dataset(format!("raw image {stem} has no reference")));
        }
        if let Some(stem) = refs.keys().find(|k| !raws.contains_key(*k)) {
            return Err(Error::Dataset(format!("reference image {stem} has no raw counterpart")));
        }
        if raws.is_empty() {
            return Err(Error::Dataset(format!("{} holds no image pairs", root.display())));
        }
        let pairs = raws
            .into_iter()
            .map(|(stem, raw)| {
                let reference = refs[&stem].clone();
                PairPaths { stem, raw, reference }
            })
            .collect();
        Ok(Self { root: root.to_path_buf(), pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Loads `(raw, reference)` images, resized to `size×size`.
    pub fn load(&self, pairs: &[PairPaths], size: usize) -> Result<Vec<(Image, Image)>> {
        pairs
            .iter()
            .map(|p| {
                let raw = resize(&load_image(&p.raw)?, size, size)?;
                let reference = resize(&load_image(&p.reference)?, size, size)?;
                Ok((raw, reference))
            })
            .collect()
    }

    pub fn read_manifest(&self) -> Result<Vec<ManifestEntry>> {
        read_manifest(&self.root.join(MANIFEST))
    }
}

/// Writes pairs under `root` in the paired layout plus the manifest.
pub fn write_synthetic(root: &Path, pairs: &[SyntheticPair]) -> Result<PairedDataset> {
    for dir in [RAW_DIR, REFERENCE_DIR] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = String::new();
    for p in pairs {
        save_image(&p.raw, &root.join(RAW_DIR).join(format!("{}.png", p.entry.stem)))?;
        save_image(&p.reference, &root.join(REFERENCE_DIR).join(format!("{}.png", p.entry.stem)))?;
        manifest.push_str(&serde_json::to_string(&p.entry).map_err(|e| Error::Dataset(e.to_string()))?);
        manifest.push('\n');
    }
    write_atomic(&root.join(MANIFEST), manifest.as_bytes())?;
    PairedDataset::open(root)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Seeded shuffle then split; `round(n·fraction)` items go to the first part, and each
/// part keeps at least one item.
pub fn make_splits<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!("train fraction {train_fraction} must be in (0, 1)")));
    }
    if items.len() < 2 {
        return Err(Error::Dataset(format!("cannot split {} item(s)", items.len())));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((items.len() as f64 * train_fraction).round() as usize).clamp(1, items.len() - 1);
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// A random clean "scene": a smooth colour gradient overlaid with a few solid shapes.
pub fn procedural_scene(size: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut color = || [0; 3].map(|_: i32| rng.random_range(0.15..0.95f64));
    let (c0, c1) = (color(), color());
    let angle: f64 = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed).random_range(0.0..std::f64::consts::TAU);
    let mut shapes = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for _ in 0..rng.random_range(2..5) {
        let center = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let radius = rng.random_range(0.08..0.3);
        let square = rng.random_bool(0.5);
        let fill = [0; 3].map(|_: i32| rng.random_range(0.05..1.0f64));
        shapes.push((center, radius, square, fill));
    }
    let (ca, sa) = (angle.cos(), angle.sin());
    let n = size as f64;
    Image::from_fn(size, size, |c, y, x| {
        let (u, v) = ((x as f64 + 0.5) / n, (y as f64 + 0.5) / n);
        let t = ((u - 0.5) * ca + (v - 0.5) * sa + 0.5).clamp(0.0, 1.0);
        let mut val = c0[c] * (1.0 - t) + c1[c] * t;
        for &((cx, cy), r, square, fill) in &shapes {
            let inside = if square {
                (u - cx).abs() <= r && (v - cy).abs() <= r
            } else {
                (u - cx).powi(2) + (v - cy).powi(2) <= r * r
            };
            if inside {
                val = fill[c];
            }
        }
        val
    })
}
