//! Underwater image formation and its inverse.
//!
//! A raw observation mixes the attenuated scene radiance with backscattered
//! ambient light:
//!
//! ```text
//! I_c = D_c · exp(-β_c^D · d) + A_c · (1 - exp(-β_c^B · d))
//! ```
//!
//! Restoration uses the simplified inverse that assumes `β^D ≈ β^B`:
//!
//! ```text
//! D_c = (I_c - A_c) · exp(β_c^D · d) + A_c
//! ```
//!
//! Functions suffixed `_unclamped` work on raw planar buffers and never
//! clamp, so compositions stay exactly invertible. The `Image` variants
//! clamp at the boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

/// Spatially constant per-channel ambient light.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmbientLight(pub [f64; 3]);

impl AmbientLight {
    pub fn new(rgb: [f64; 3]) -> Result<Self> {
        if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParameter(format!("ambient light {rgb:?} outside [0, 1]")));
        }
        Ok(Self(rgb))
    }

    pub fn gray(v: f64) -> Result<Self> {
        Self::new([v; 3])
    }
}

/// Distance from camera to scene, in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Depth {
    Uniform(f64),
    /// Row-major `height × width` map.
    Map {
        height: usize,
        width: usize,
        values: Vec<f64>,
    },
}

impl Depth {
    fn at(&self, i: usize) -> f64 {
        match self {
            Depth::Uniform(d) => *d,
            Depth::Map { values, .. } => values[i],
        }
    }

    fn check(&self, height: usize, width: usize) -> Result<()> {
        let values: &[f64] = match self {
            Depth::Uniform(d) => std::slice::from_ref(d),
            Depth::Map { height: h, width: w, values } => {
                if (*h, *w) != (height, width) || values.len() != h * w {
                    return Err(Error::ShapeMismatch(format!(
                        "depth map {h}x{w} ({} values) for a {height}x{width} image",
                        values.len()
                    )));
                }
                values
            }
        };
        if let Some(bad) = values.iter().find(|d| !d.is_finite() || **d < 0.0) {
            return Err(Error::InvalidParameter(format!("depth {bad} must be finite and non-negative")));
        }
        Ok(())
    }
}

/// Wavelength-dependent attenuation of the water column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttenuationParams {
    /// Direct-transmission coefficient per channel, 1/m.
    pub beta_d: [f64; 3],
    /// Backscatter coefficient per channel, 1/m.
    pub beta_b: [f64; 3],
    pub depth: Depth,
}

impl AttenuationParams {
    /// Equal direct and backscatter coefficients.
    pub fn matched(beta: [f64; 3], depth: Depth) -> Self {
        Self { beta_d: beta, beta_b: beta, depth }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for b in self.beta_d.iter().chain(&self.beta_b) {
            if !b.is_finite() || *b < 0.0 {
                return Err(Error::InvalidParameter(format!("attenuation coefficient {b} must be finite and >= 0")));
            }
        }
        self.depth.check(height, width)
    }
}

/// Which coefficient set a transmission map is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coefficients {
    Direct,
    Backscatter,
}

/// Per-pixel values stored as 1 (broadcast) or 3 planes.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelField {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl PixelField {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != CHANNELS {
            return Err(Error::ShapeMismatch(format!("field must have 1 or 3 channels, got {channels}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!("{} values for a {channels}x{height}x{width} field", data.len())));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, channels: 1, data: vec![value; height * width] }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Value for channel `c` at flat pixel index `i`, broadcasting single-plane fields.
    pub fn at(&self, c: usize, i: usize) -> f64 {
        let plane = if self.channels == 1 { 0 } else { c };
        self.data[plane * self.height * self.width + i]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        let plane = if self.channels == 1 { 0 } else { c };
        &self.data[plane * n..(plane + 1) * n]
    }

    pub fn reciprocal(&self) -> PixelField {
        PixelField { data: self.data.iter().map(|v| 1.0 / v).collect(), ..self.clone() }
    }
}

/// Fraction of light surviving the water path, `exp(-β·d)`, in `(0, 1]`.
pub type TransmissionMap = PixelField;

/// Restoration multiplier `exp(β^D·d)`, always `>= 1`.
pub type InverseTransmission = PixelField;

pub fn transmission(
    params: &AttenuationParams,
    which: Coefficients,
    height: usize,
    width: usize,
) -> Result<TransmissionMap> {
    params.validate(height, width)?;
    let beta = match which {
        Coefficients::Direct => params.beta_d,
        Coefficients::Backscatter => params.beta_b,
    };
    let n = height * width;
    let mut data = Vec::with_capacity(CHANNELS * n);
    for b in beta {
        data.extend((0..n).map(|i| (-b * params.depth.at(i)).exp()));
    }
    PixelField::new(height, width, CHANNELS, data)
}

/// The exact inverse multiplier `exp(β^D·d)` for known parameters.
pub fn inverse_transmission(params: &AttenuationParams, height: usize, width: usize) -> Result<InverseTransmission> {
    params.validate(height, width)?;
    let n = height * width;
    let mut data = Vec::with_capacity(CHANNELS * n);
    for b in params.beta_d {
        data.extend((0..n).map(|i| (b * params.depth.at(i)).exp()));
    }
    PixelField::new(height, width, CHANNELS, data)
}

/// Forward formation on a planar buffer without clamping.
pub fn degrade_unclamped(
    clean: &[f64],
    (height, width): (usize, usize),
    ambient: &AmbientLight,
    params: &AttenuationParams,
) -> Result<Vec<f64>> {
    let n = height * width;
    if clean.len() != CHANNELS * n {
        return Err(Error::ShapeMismatch(format!("{} samples for a {height}x{width} RGB buffer", clean.len())));
    }
    let direct = transmission(params, Coefficients::Direct, height, width)?;
    let back = transmission(params, Coefficients::Backscatter, height, width)?;
    let mut out = Vec::with_capacity(clean.len());
    for c in 0..CHANNELS {
        let a = ambient.0[c];
        for i in 0..n {
            out.push(clean[c * n + i] * direct.at(c, i) + a * (1.0 - back.at(c, i)));
        }
    }
    Ok(out)
}

pub fn degrade(clean: &Image, ambient: &AmbientLight, params: &AttenuationParams) -> Result<Image> {
    let (h, w) = clean.dims();
    let raw = degrade_unclamped(clean.data(), (h, w), ambient, params)?;
    Image::from_unclamped(h, w, raw)
}

/// Inverse formation on a planar buffer without clamping.
pub fn restore_unclamped(
    raw: &[f64],
    (height, width): (usize, usize),
    ambient: &AmbientLight,
    inv_transmission: &InverseTransmission,
) -> Result<Vec<f64>> {
    let n = height * width;
    if raw.len() != CHANNELS * n {
        return Err(Error::ShapeMismatch(format!("{} samples for a {height}x{width} RGB buffer", raw.len())));
    }
    if inv_transmission.dims() != (height, width) {
        let (th, tw) = inv_transmission.dims();
        return Err(Error::ShapeMismatch(format!("transmission {th}x{tw} for a {height}x{width} image")));
    }
    let mut out = Vec::with_capacity(raw.len());
    for c in 0..CHANNELS {
        let a = ambient.0[c];
        for i in 0..n {
            out.push((raw[c * n + i] - a) * inv_transmission.at(c, i) + a);
        }
    }
    Ok(out)
}

pub fn restore(raw: &Image, ambient: &AmbientLight, inv_transmission: &InverseTransmission) -> Result<Image> {
    let (h, w) = raw.dims();
    let out = restore_unclamped(raw.data(), (h, w), ambient, inv_transmission)?;
    Image::from_unclamped(h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_params(beta_d: f64, beta_b: f64, d: f64) -> AttenuationParams {
        AttenuationParams { beta_d: [beta_d; 3], beta_b: [beta_b; 3], depth: Depth::Uniform(d) }
    }

    #[test]
    fn transmission_examples() {
        let t = transmission(&scalar_params(0.5, 0.5, 0.0), Coefficients::Direct, 1, 1).unwrap();
        assert_eq!(t.at(0, 0), 1.0);
        let t = transmission(&scalar_params(0.0, 0.0, 10.0), Coefficients::Direct, 1, 1).unwrap();
        assert_eq!(t.at(0, 0), 1.0);
        let t = transmission(&scalar_params(0.5, 0.5, 1.0), Coefficients::Direct, 1, 1).unwrap();
        assert!((t.at(0, 0) - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn transmission_rejects_non_finite_inputs() {
        assert!(transmission(&scalar_params(f64::NAN, 0.1, 1.0), Coefficients::Direct, 1, 1).is_err());
        assert!(transmission(&scalar_params(0.1, 0.1, f64::INFINITY), Coefficients::Direct, 1, 1).is_err());
        assert!(transmission(&scalar_params(-0.1, 0.1, 1.0), Coefficients::Direct, 1, 1).is_err());
    }

    #[test]
    fn degrade_examples() {
        let clean = Image::filled(2, 2, [0.8, 0.3, 0.1]).unwrap();
        let ambient = AmbientLight::new([0.2, 0.5, 0.7]).unwrap();
        assert_eq!(degrade(&clean, &ambient, &scalar_params(0.5, 0.5, 0.0)).unwrap(), clean);

        let far = degrade(&clean, &ambient, &scalar_params(0.5, 0.5, 1e6)).unwrap();
        for c in 0..3 {
            assert!(far.plane(c).iter().all(|&v| (v - ambient.0[c]).abs() < 1e-12));
        }

        let one = Image::filled(1, 1, [0.8; 3]).unwrap();
        let out = degrade(&one, &AmbientLight::gray(0.2).unwrap(), &scalar_params(0.5, 0.5, 1.0)).unwrap();
        assert!((out.get(0, 0, 0) - 0.5639).abs() < 1e-4);
    }

    #[test]
    fn degrade_rejects_depth_shape_mismatch() {
        let clean = Image::filled(2, 2, [0.5; 3]).unwrap();
        let params = AttenuationParams::matched([0.1; 3], Depth::Map { height: 3, width: 2, values: vec![1.0; 6] });
        assert!(matches!(degrade(&clean, &AmbientLight::gray(0.1).unwrap(), &params), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn restore_examples() {
        let raw = Image::filled(2, 2, [0.4, 0.3, 0.9]).unwrap();
        let ambient = AmbientLight::gray(0.3).unwrap();
        let same = restore(&raw, &ambient, &PixelField::uniform(2, 2, 1.0)).unwrap();
        assert!(same.data().iter().zip(raw.data()).all(|(a, b)| (a - b).abs() < 1e-15));

        let raw = Image::filled(1, 1, [0.5639; 3]).unwrap();
        let inv = PixelField::uniform(1, 1, 0.5f64.exp());
        let out = restore(&raw, &AmbientLight::gray(0.2).unwrap(), &inv).unwrap();
        assert!((out.get(0, 0, 0) - 0.8).abs() < 1e-4);
    }

    #[test]
    fn restore_inverts_degrade_with_matched_coefficients_and_depth_map() {
        let (h, w) = (4, 5);
        let clean = Image::from_fn(h, w, |c, y, x| 0.1 + 0.8 * ((c + y * w + x) % 9) as f64 / 8.0).unwrap();
        let ambient = AmbientLight::new([0.15, 0.35, 0.45]).unwrap();
        let depth = Depth::Map { height: h, width: w, values: (0..h * w).map(|i| 0.5 + i as f64 * 0.2).collect() };
        let params = AttenuationParams::matched([0.6, 0.25, 0.1], depth);
        let raw = degrade_unclamped(clean.data(), (h, w), &ambient, &params).unwrap();
        let inv = inverse_transmission(&params, h, w).unwrap();
        let back = restore_unclamped(&raw, (h, w), &ambient, &inv).unwrap();
        for (a, b) in back.iter().zip(clean.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_exact_before_clamping(
            pixels in proptest::collection::vec(0.0f64..=1.0, 3 * 6),
            ambient in proptest::array::uniform3(0.01f64..0.99),
            beta in proptest::array::uniform3(0.01f64..1.0),
            depth in 0.0f64..8.0,
        ) {
            let params = AttenuationParams::matched(beta, Depth::Uniform(depth));
            let ambient = AmbientLight::new(ambient).unwrap();
            let raw = degrade_unclamped(&pixels, (2, 3), &ambient, &params).unwrap();
            let inv = inverse_transmission(&params, 2, 3).unwrap();
            let back = restore_unclamped(&raw, (2, 3), &ambient, &inv).unwrap();
            for (a, b) in back.iter().zip(&pixels) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn deeper_water_moves_toward_ambient(
            d in 0.8f64..1.0,
            a in 0.0f64..0.5,
            beta in 0.05f64..1.0,
            depth in 0.0f64..10.0,
            extra in 0.01f64..5.0,
        ) {
            let clean = Image::filled(1, 1, [d; 3]).unwrap();
            let ambient = AmbientLight::gray(a).unwrap();
            let near = degrade(&clean, &ambient, &AttenuationParams::matched([beta; 3], Depth::Uniform(depth))).unwrap();
            let far = degrade(&clean, &ambient, &AttenuationParams::matched([beta; 3], Depth::Uniform(depth + extra))).unwrap();
            prop_assert!(far.get(0, 0, 0) <= near.get(0, 0, 0));
            prop_assert!(far.get(0, 0, 0) >= a);
        }

        #[test]
        fn transmission_in_unit_interval(beta in 0.0f64..2.0, depth in 0.0f64..20.0) {
            let t = transmission(&AttenuationParams::matched([beta; 3], Depth::Uniform(depth)), Coefficients::Direct, 1, 1).unwrap();
            prop_assert!(t.at(0, 0) > 0.0 && t.at(0, 0) <= 1.0);
        }

        #[test]
        fn restore_expands_away_from_ambient(i in 0.0f64..1.0, a in 0.0f64..1.0, k in 1.0f64..5.0) {
            let raw = Image::filled(1, 1, [i; 3]).unwrap();
            let out = restore_unclamped(raw.data(), (1, 1), &AmbientLight::gray(a).unwrap(), &PixelField::uniform(1, 1, k)).unwrap();
            prop_assert!((out[0] - a).abs() >= (i - a).abs() - 1e-12);
        }
    }
}
