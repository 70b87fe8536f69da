//! Digital numbers to surface reflectance.
//!
//! DN is calibrated to radiance `L = gain * DN + offset`, converted to apparent
//! top-of-atmosphere reflectance `rho* = pi * L / (F0 * cos(theta_s))`, and then
//! inverted through the Lambertian coupling
//!
//! ```text
//! rho* = a + b * rho_s / (1 - S * rho_s)
//! ```
//!
//! where `a` is the gaseous-transmitted path reflectance, `b` the combined gaseous
//! and two-way scattering transmittance and `S` the spherical albedo. The three
//! coefficients come from a 5-D look-up table over (water vapour, ozone, AOT at
//! 550 nm, elevation, sun zenith), interpolated multilinearly at the scene-mean
//! atmosphere.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster_store::{
    self, io_err, read_json, write_json, BandStack, RasterError, Samples, ValueKind, BAND_COUNT,
};

/// Number of LUT axes.
pub const LUT_AXES: usize = 5;
/// Axis names in storage order.
pub const AXIS_NAMES: [&str; LUT_AXES] =
    ["water_vapour", "ozone", "aot550", "elevation", "theta_s"];
/// Coefficients stored per node per band: (a, b, S).
const COEFFS_PER_NODE: usize = 3;

/// Reflectance values produced by the inversion are clamped to this range.
pub const REFLECTANCE_RANGE: (f64, f64) = (0.0, 2.0);

#[derive(Debug, Error)]
pub enum CorrectionError {
    #[error("expected value kind {expected:?}, got {found:?}")]
    WrongValueKind {
        expected: ValueKind,
        found: ValueKind,
    },
    #[error("sun zenith {0} deg is at or below the horizon")]
    SunBelowHorizon(f64),
    #[error("invalid calibration: {0}")]
    Calibration(String),
    #[error("invalid LUT: {0}")]
    InvalidLut(String),
    #[error("atmosphere state has NaN in `{0}`")]
    NanState(&'static str),
    #[error("coefficient b must be positive, got {0}")]
    NonPositiveB(f64),
    #[error("forward model undefined: S * rho_s = {0} >= 1")]
    Singular(f64),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T, E = CorrectionError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandCalibration {
    /// Radiance per DN.
    pub gain: f64,
    /// Radiance at DN = 0.
    pub offset: f64,
    /// Exo-atmospheric solar irradiance, W m^-2 um^-1.
    pub f0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiometricCalibration {
    pub bands: [BandCalibration; BAND_COUNT],
}

impl RadiometricCalibration {
    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.bands.iter().enumerate() {
            if !(b.gain > 0.0) || !(b.f0 > 0.0) || !b.offset.is_finite() {
                return Err(CorrectionError::Calibration(format!(
                    "band {i}: gain and F0 must be positive, got gain={} F0={}",
                    b.gain, b.f0
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolarGeometry {
    /// Sun zenith, degrees.
    pub theta_s: f64,
    /// View zenith, degrees.
    pub theta_v: f64,
    /// Relative azimuth, degrees.
    pub delta_phi: f64,
}

impl SolarGeometry {
    pub fn mu_s(&self) -> Result<f64> {
        if !(0.0..90.0).contains(&self.theta_s) {
            return Err(CorrectionError::SunBelowHorizon(self.theta_s));
        }
        Ok(self.theta_s.to_radians().cos())
    }
}

/// Scene-mean atmosphere at which the LUT is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtmosphereState {
    /// g/cm^2
    pub water_vapour: f64,
    /// cm-atm
    pub ozone: f64,
    pub aot550: f64,
    /// km
    pub elevation: f64,
    /// degrees
    pub theta_s: f64,
}

impl AtmosphereState {
    pub fn as_axes(&self) -> [f64; LUT_AXES] {
        [
            self.water_vapour,
            self.ozone,
            self.aot550,
            self.elevation,
            self.theta_s,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coeffs {
    pub a: f64,
    pub b: f64,
    pub s: f64,
}

impl Coeffs {
    pub const IDENTITY: Coeffs = Coeffs {
        a: 0.0,
        b: 1.0,
        s: 0.0,
    };
}

/// Calibration, geometry and atmosphere of one scene, stored as a JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub calibration: RadiometricCalibration,
    pub geometry: SolarGeometry,
    pub atmosphere: AtmosphereState,
}

impl SceneMeta {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(read_json(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(write_json(path, self)?)
    }
}

/// DN -> apparent TOA reflectance. Nodata stays nodata (NaN in the output).
pub fn dn_to_toa(
    stack: &BandStack,
    cal: &RadiometricCalibration,
    geom: &SolarGeometry,
) -> Result<BandStack> {
    if stack.value_kind != ValueKind::Dn {
        return Err(CorrectionError::WrongValueKind {
            expected: ValueKind::Dn,
            found: stack.value_kind,
        });
    }
    cal.validate()?;
    let mu_s = geom.mu_s()?;
    let n = stack.plane_len();
    let mut out = Vec::with_capacity(BAND_COUNT * n);
    for (band, c) in cal.bands.iter().enumerate() {
        let scale = PI / (c.f0 * mu_s);
        out.extend((0..n).map(|i| match stack.samples.get(band * n + i) {
            Some(dn) => ((c.gain * dn + c.offset) * scale) as f32,
            None => f32::NAN,
        }));
    }
    let toa = BandStack::new(
        stack.width,
        stack.height,
        Samples::F32 {
            values: out,
            nodata: f32::NAN,
        },
        stack.geo.clone(),
        ValueKind::ToaReflectance,
    )?;
    Ok(toa.with_chunk_shape(stack.chunk_shape.0, stack.chunk_shape.1)?)
}

/// `rho* = a + b * rho_s / (1 - S * rho_s)`.
pub fn forward_model(rho_s: f64, c: Coeffs) -> Result<f64> {
    let sr = c.s * rho_s;
    if sr >= 1.0 {
        return Err(CorrectionError::Singular(sr));
    }
    Ok(c.a + c.b * rho_s / (1.0 - sr))
}

/// Result of inverting one reflectance value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Inversion {
    Value(f64),
    /// Inverted value fell outside [`REFLECTANCE_RANGE`] and was clamped.
    Clamped(f64),
    /// `1 + S * z == 0`.
    Singular,
}

/// Inverse of [`forward_model`]: `z = (rho* - a) / b`, `rho_s = z / (1 + S z)`.
#[inline]
pub fn invert_reflectance(rho_star: f64, c: Coeffs) -> Inversion {
    let z = (rho_star - c.a) / c.b;
    let denom = 1.0 + c.s * z;
    if denom == 0.0 {
        return Inversion::Singular;
    }
    let rho_s = z / denom;
    let (lo, hi) = REFLECTANCE_RANGE;
    if rho_s < lo || rho_s > hi || rho_s.is_nan() {
        Inversion::Clamped(if rho_s > hi { hi } else { lo })
    } else {
        Inversion::Value(rho_s)
    }
}

#[derive(Debug, Clone)]
pub struct CorrectionOutcome {
    pub boa: BandStack,
    /// Samples clamped into [`REFLECTANCE_RANGE`].
    pub clamped: usize,
    /// Samples where the inversion was singular; written as nodata.
    pub singular: usize,
}

/// TOA -> BOA with one coefficient triple per band.
pub fn apply_correction(toa: &BandStack, coeffs: &[Coeffs]) -> Result<CorrectionOutcome> {
    if toa.value_kind != ValueKind::ToaReflectance {
        return Err(CorrectionError::WrongValueKind {
            expected: ValueKind::ToaReflectance,
            found: toa.value_kind,
        });
    }
    if coeffs.len() != BAND_COUNT {
        return Err(CorrectionError::InvalidLut(format!(
            "need {BAND_COUNT} coefficient triples, got {}",
            coeffs.len()
        )));
    }
    if let Some(c) = coeffs.iter().find(|c| !(c.b > 0.0)) {
        return Err(CorrectionError::NonPositiveB(c.b));
    }
    let n = toa.plane_len();
    let (mut clamped, mut singular) = (0, 0);
    let mut out = Vec::with_capacity(BAND_COUNT * n);
    for (band, &c) in coeffs.iter().enumerate() {
        for i in 0..n {
            let v = match toa.samples.get(band * n + i) {
                None => f32::NAN,
                Some(rho_star) => match invert_reflectance(rho_star, c) {
                    Inversion::Value(v) => v as f32,
                    Inversion::Clamped(v) => {
                        clamped += 1;
                        v as f32
                    }
                    Inversion::Singular => {
                        singular += 1;
                        f32::NAN
                    }
                },
            };
            out.push(v);
        }
    }
    if clamped > 0 {
        log::warn!("{clamped} reflectance samples clamped to {REFLECTANCE_RANGE:?}");
    }
    if singular > 0 {
        log::warn!("{singular} samples had a singular inversion and were set to nodata");
    }
    let boa = BandStack::new(
        toa.width,
        toa.height,
        Samples::F32 {
            values: out,
            nodata: f32::NAN,
        },
        toa.geo.clone(),
        ValueKind::BoaReflectance,
    )?
    .with_chunk_shape(toa.chunk_shape.0, toa.chunk_shape.1)?;
    Ok(CorrectionOutcome {
        boa,
        clamped,
        singular,
    })
}

/// 5-D grid of per-band (a, b, S). Storage is C-order over
/// `[wv][o3][aot][elev][theta_s][band][coef]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionLut {
    axes: [Vec<f64>; LUT_AXES],
    wavelengths: Vec<f64>,
    values: Vec<f64>,
}

impl CorrectionLut {
    pub fn new(
        axes: [Vec<f64>; LUT_AXES],
        wavelengths: Vec<f64>,
        values: Vec<f64>,
    ) -> Result<Self> {
        for (name, axis) in AXIS_NAMES.iter().zip(&axes) {
            if axis.len() < 2 {
                return Err(CorrectionError::InvalidLut(format!(
                    "axis {name} needs >= 2 nodes"
                )));
            }
            if axis.iter().any(|v| !v.is_finite()) || axis.windows(2).any(|w| w[1] <= w[0]) {
                return Err(CorrectionError::InvalidLut(format!(
                    "axis {name} must be finite and strictly increasing"
                )));
            }
        }
        if wavelengths.len() != BAND_COUNT {
            return Err(CorrectionError::InvalidLut(format!(
                "need {BAND_COUNT} band wavelengths, got {}",
                wavelengths.len()
            )));
        }
        let nodes: usize = axes.iter().map(Vec::len).product();
        let expected = nodes * BAND_COUNT * COEFFS_PER_NODE;
        if values.len() != expected {
            return Err(CorrectionError::InvalidLut(format!(
                "expected {expected} coefficient values, got {}",
                values.len()
            )));
        }
        for node in values.chunks_exact(COEFFS_PER_NODE) {
            if !(node[1] > 0.0) {
                return Err(CorrectionError::InvalidLut(format!(
                    "b = {} is not positive",
                    node[1]
                )));
            }
            if !(0.0..1.0).contains(&node[2]) {
                return Err(CorrectionError::InvalidLut(format!(
                    "S = {} outside [0, 1)",
                    node[2]
                )));
            }
            if !node[0].is_finite() {
                return Err(CorrectionError::InvalidLut("non-finite a".into()));
            }
        }
        Ok(Self {
            axes,
            wavelengths,
            values,
        })
    }

    pub fn axes(&self) -> &[Vec<f64>; LUT_AXES] {
        &self.axes
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn node_count(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    fn node_offset(&self, idx: &[usize; LUT_AXES]) -> usize {
        let mut flat = 0;
        for (axis, &i) in self.axes.iter().zip(idx) {
            flat = flat * axis.len() + i;
        }
        flat * BAND_COUNT * COEFFS_PER_NODE
    }

    /// Stored coefficients at a grid node.
    pub fn node(&self, idx: [usize; LUT_AXES], band: usize) -> Coeffs {
        let o = self.node_offset(&idx) + band * COEFFS_PER_NODE;
        Coeffs {
            a: self.values[o],
            b: self.values[o + 1],
            s: self.values[o + 2],
        }
    }

    pub fn save(&self, header_path: &Path) -> Result<()> {
        let stem = header_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "lut".into());
        let payload = format!("{stem}.bin");
        let header = LutHeader {
            axis_names: AXIS_NAMES.iter().map(|s| s.to_string()).collect(),
            axes: self.axes.to_vec(),
            bands: raster_store::BAND_NAMES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            wavelengths: self.wavelengths.clone(),
            coefficients: vec!["a".into(), "b".into(), "s".into()],
            payload: payload.clone(),
        };
        write_json(header_path, &header)?;
        let path = header_path.with_file_name(payload);
        let bytes: Vec<u8> = self.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&path, bytes).map_err(|e| CorrectionError::Raster(io_err(&path)(e)))
    }

    pub fn load(header_path: &Path) -> Result<Self> {
        let header: LutHeader = read_json(header_path)?;
        let axes: [Vec<f64>; LUT_AXES] = header.axes.try_into().map_err(|v: Vec<Vec<f64>>| {
            CorrectionError::InvalidLut(format!("expected {LUT_AXES} axes, got {}", v.len()))
        })?;
        let path = header_path.with_file_name(&header.payload);
        let bytes = fs::read(&path).map_err(|e| CorrectionError::Raster(io_err(&path)(e)))?;
        if bytes.len() % 8 != 0 {
            return Err(CorrectionError::InvalidLut(
                "payload is not a whole number of f64".into(),
            ));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        Self::new(axes, header.wavelengths, values)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LutHeader {
    axis_names: Vec<String>,
    axes: Vec<Vec<f64>>,
    bands: Vec<String>,
    wavelengths: Vec<f64>,
    coefficients: Vec<String>,
    payload: String,
}

/// Cell index and fractional position of `x` on `axis`, clamped to the edges.
fn locate(axis: &[f64], x: f64) -> (usize, f64, bool) {
    let last = axis.len() - 1;
    if x <= axis[0] {
        return (0, 0.0, x < axis[0]);
    }
    if x >= axis[last] {
        return (last - 1, 1.0, x > axis[last]);
    }
    // First node strictly greater than x; the cell starts one before it.
    let hi = axis.partition_point(|&v| v <= x);
    let lo = hi - 1;
    (lo, (x - axis[lo]) / (axis[hi] - axis[lo]), false)
}

/// Multilinear interpolation over the 32 enclosing nodes, per band.
/// States outside the grid are clamped to the edge with a warning.
pub fn interpolate_coeffs(lut: &CorrectionLut, state: &AtmosphereState) -> Result<Vec<Coeffs>> {
    let x = state.as_axes();
    for (name, v) in AXIS_NAMES.iter().zip(x) {
        if v.is_nan() {
            return Err(CorrectionError::NanState(name));
        }
    }
    let mut cell = [0usize; LUT_AXES];
    let mut frac = [0f64; LUT_AXES];
    for k in 0..LUT_AXES {
        let (i, t, clamped) = locate(&lut.axes[k], x[k]);
        if clamped {
            log::warn!(
                "{} = {} outside LUT range [{}, {}], clamping",
                AXIS_NAMES[k],
                x[k],
                lut.axes[k][0],
                lut.axes[k][lut.axes[k].len() - 1]
            );
        }
        cell[k] = i;
        frac[k] = t;
    }
    let mut out = vec![
        Coeffs {
            a: 0.0,
            b: 0.0,
            s: 0.0
        };
        BAND_COUNT
    ];
    for corner in 0..(1usize << LUT_AXES) {
        let mut w = 1.0;
        let mut idx = cell;
        for k in 0..LUT_AXES {
            if corner >> k & 1 == 1 {
                idx[k] += 1;
                w *= frac[k];
            } else {
                w *= 1.0 - frac[k];
            }
        }
        if w == 0.0 {
            continue;
        }
        for (band, acc) in out.iter_mut().enumerate() {
            let c = lut.node(idx, band);
            acc.a += w * c.a;
            acc.b += w * c.b;
            acc.s += w * c.s;
        }
    }
    Ok(out)
}

/// One LUT axis: `nodes` evenly spaced values over `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub min: f64,
    pub max: f64,
    pub nodes: usize,
}

impl AxisSpec {
    fn grid(&self) -> Vec<f64> {
        if self.nodes < 2 {
            return vec![self.min];
        }
        let step = (self.max - self.min) / (self.nodes - 1) as f64;
        (0..self.nodes)
            .map(|i| {
                if i + 1 == self.nodes {
                    self.max
                } else {
                    self.min + step * i as f64
                }
            })
            .collect()
    }
}

/// Analytic coefficient field used to fill a synthetic LUT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientField {
    Constant(Coeffs),
    /// Each coefficient affine in every axis: `base + sum_k gradient[k] * x_k`.
    Affine {
        base: Coeffs,
        gradient: [Coeffs; LUT_AXES],
    },
    /// Smooth physically flavoured field: path reflectance linear in AOT with a
    /// Rayleigh term, transmittance decaying exponentially with water vapour, ozone
    /// and optical depth over the sun path.
    Smooth,
}

impl CoefficientField {
    pub fn eval(&self, wavelength_um: f64, x: &[f64; LUT_AXES]) -> Coeffs {
        match self {
            CoefficientField::Constant(c) => *c,
            CoefficientField::Affine { base, gradient } => {
                let mut c = *base;
                for (g, v) in gradient.iter().zip(x) {
                    c.a += g.a * v;
                    c.b += g.b * v;
                    c.s += g.s * v;
                }
                c
            }
            CoefficientField::Smooth => smooth_field(wavelength_um, x),
        }
    }
}

fn smooth_field(lambda: f64, x: &[f64; LUT_AXES]) -> Coeffs {
    let [wv, o3, aot, elev, theta_s] = *x;
    let mu_s = theta_s.to_radians().cos().max(0.05);
    let pressure = (-elev / 8.0).exp();
    let rayleigh = 0.008 * (0.55 / lambda).powi(4) * pressure;
    let aerosol = aot * (0.55 / lambda).powf(1.3);
    let gas = (-0.012 * wv * (lambda / 0.8).powi(2) - 0.03 * o3 * (0.6 / lambda)).exp();
    let path = gas * (rayleigh + 0.12 * aerosol) / mu_s.sqrt();
    let trans = gas * (-(rayleigh + 0.6 * aerosol) * (1.0 + 1.0 / mu_s)).exp();
    Coeffs {
        a: path,
        b: trans,
        s: (0.5 * rayleigh + 0.15 * aerosol).min(0.9),
    }
}

/// Axis ranges, node counts and coefficient field of a synthetic LUT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLutSpec {
    pub axes: [AxisSpec; LUT_AXES],
    pub wavelengths: Vec<f64>,
    pub field: CoefficientField,
}

impl Default for SyntheticLutSpec {
    fn default() -> Self {
        Self {
            axes: [
                AxisSpec {
                    min: 0.0,
                    max: 5.0,
                    nodes: 6,
                },
                AxisSpec {
                    min: 0.2,
                    max: 0.5,
                    nodes: 4,
                },
                AxisSpec {
                    min: 0.0,
                    max: 1.0,
                    nodes: 6,
                },
                AxisSpec {
                    min: 0.0,
                    max: 2.0,
                    nodes: 3,
                },
                AxisSpec {
                    min: 0.0,
                    max: 70.0,
                    nodes: 8,
                },
            ],
            wavelengths: vec![0.485, 0.555, 0.650, 0.815],
            field: CoefficientField::Smooth,
        }
    }
}

/// Fills a LUT by evaluating `f(band, wavelength, node_coordinates)` at every node.
pub fn lut_from_fn(
    axes: [Vec<f64>; LUT_AXES],
    wavelengths: Vec<f64>,
    mut f: impl FnMut(usize, f64, &[f64; LUT_AXES]) -> Coeffs,
) -> Result<CorrectionLut> {
    let dims: Vec<usize> = axes.iter().map(Vec::len).collect();
    let nodes: usize = dims.iter().product();
    let mut values = Vec::with_capacity(nodes * BAND_COUNT * COEFFS_PER_NODE);
    for flat in 0..nodes {
        let mut rem = flat;
        let mut x = [0f64; LUT_AXES];
        for k in (0..LUT_AXES).rev() {
            x[k] = axes[k][rem % dims[k]];
            rem /= dims[k];
        }
        for (band, &lambda) in wavelengths.iter().enumerate() {
            let c = f(band, lambda, &x);
            values.extend_from_slice(&[c.a, c.b, c.s]);
        }
    }
    CorrectionLut::new(axes, wavelengths, values)
}

/// Deterministic LUT from an analytic field.
pub fn generate_synthetic_lut(spec: &SyntheticLutSpec) -> Result<CorrectionLut> {
    for (name, a) in AXIS_NAMES.iter().zip(&spec.axes) {
        if a.nodes < 2 || !(a.max > a.min) {
            return Err(CorrectionError::InvalidLut(format!(
                "degenerate axis {name}: [{}, {}] with {} nodes",
                a.min, a.max, a.nodes
            )));
        }
    }
    let axes = spec.axes.map(|a| a.grid());
    lut_from_fn(axes, spec.wavelengths.clone(), |_, lambda, x| {
        spec.field.eval(lambda, x)
    })
}
