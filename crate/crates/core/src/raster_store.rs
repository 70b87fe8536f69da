//! Multi-band raster container with georeferencing, nodata handling and chunked storage.
//!
//! On disk a raster is a UTF-8 JSON header plus a little-endian, band-sequential
//! payload. The payload is either one flat file next to the header or a directory
//! of independent chunk files named `c<row>_<col>`, each holding every band of one
//! chunk region (band-sequential inside the chunk, edge chunks truncated).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maskgen::ClassEncoding;

/// Number of spectral planes in every [`BandStack`].
pub const BAND_COUNT: usize = 4;
/// Band order used everywhere: Blue, Green, Red, NIR.
pub const BAND_NAMES: [&str; BAND_COUNT] = ["blue", "green", "red", "nir"];

/// Index of a spectral plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Blue = 0,
    Green = 1,
    Red = 2,
    Nir = 3,
}

/// CRS identifiers treated as geographic (degrees). Everything else is assumed metric.
const GEOGRAPHIC_CRS: [&str; 5] = ["EPSG:4326", "EPSG:4269", "EPSG:4258", "OGC:CRS84", "CRS84"];

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("payload size mismatch for {path}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },
    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),
    #[error("invalid geotransform: {0}")]
    InvalidGeo(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("crs `{0}` is not metric")]
    NonMetricCrs(String),
}

pub type Result<T, E = RasterError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RasterError + '_ {
    move |source| RasterError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Affine north-up transform. `origin` is the upper-left corner of pixel (0, 0);
/// rows grow southwards, so world y decreases with the row index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size_x: f64,
    pub pixel_size_y: f64,
    pub crs_id: String,
}

impl GeoTransform {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        pixel_size_x: f64,
        pixel_size_y: f64,
        crs_id: impl Into<String>,
    ) -> Result<Self> {
        let geo = Self {
            origin_x,
            origin_y,
            pixel_size_x,
            pixel_size_y,
            crs_id: crs_id.into(),
        };
        geo.validate()?;
        Ok(geo)
    }

    /// Unit-pixel transform whose world coordinates are `(col, -row)`.
    pub fn identity() -> Self {
        Self {
            origin_x: 0.0,
            origin_y: 0.0,
            pixel_size_x: 1.0,
            pixel_size_y: 1.0,
            crs_id: "LOCAL".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.pixel_size_x) || !ok(self.pixel_size_y) {
            return Err(RasterError::InvalidGeo(format!(
                "pixel sizes must be finite and positive, got {} x {}",
                self.pixel_size_x, self.pixel_size_y
            )));
        }
        if !self.origin_x.is_finite() || !self.origin_y.is_finite() {
            return Err(RasterError::InvalidGeo("non-finite origin".into()));
        }
        Ok(())
    }

    /// World coordinate of the upper-left corner of pixel `(row, col)`.
    pub fn pixel_to_world(&self, row: f64, col: f64) -> (f64, f64) {
        (
            self.origin_x + col * self.pixel_size_x,
            self.origin_y - row * self.pixel_size_y,
        )
    }

    /// Fractional `(row, col)` of a world coordinate.
    pub fn world_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (self.origin_y - y) / self.pixel_size_y,
            (x - self.origin_x) / self.pixel_size_x,
        )
    }

    /// Integer pixel containing a world coordinate, when it lies on the grid.
    pub fn pixel_of(&self, x: f64, y: f64, width: usize, height: usize) -> Option<(usize, usize)> {
        let (r, c) = self.world_to_pixel(x, y);
        if r < 0.0 || c < 0.0 {
            return None;
        }
        let (r, c) = (r.floor() as usize, c.floor() as usize);
        (r < height && c < width).then_some((r, c))
    }

    pub fn is_metric(&self) -> bool {
        let id = self.crs_id.trim().to_ascii_uppercase();
        !GEOGRAPHIC_CRS.iter().any(|g| *g == id)
    }

    /// Transform of a window whose upper-left pixel is `(row, col)` of this grid.
    pub fn offset(&self, row: usize, col: usize) -> Self {
        let (x, y) = self.pixel_to_world(row as f64, col as f64);
        Self {
            origin_x: x,
            origin_y: y,
            ..self.clone()
        }
    }
}

/// Ground area of one pixel in square metres.
pub fn pixel_area(geo: &GeoTransform) -> Result<f64> {
    if !geo.is_metric() {
        return Err(RasterError::NonMetricCrs(geo.crs_id.clone()));
    }
    Ok(geo.pixel_size_x * geo.pixel_size_y)
}

/// What the sample values of a stack mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Dn,
    ToaReflectance,
    BoaReflectance,
}

impl ValueKind {
    pub fn is_reflectance(self) -> bool {
        !matches!(self, ValueKind::Dn)
    }
}

/// Band-sequential sample storage with its nodata sentinel.
#[derive(Debug, Clone)]
pub enum Samples {
    U16 { values: Vec<u16>, nodata: u16 },
    F32 { values: Vec<f32>, nodata: f32 },
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::U16 { values, .. } => values.len(),
            Samples::F32 { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> &'static str {
        match self {
            Samples::U16 { .. } => "uint16",
            Samples::F32 { .. } => "float32",
        }
    }

    /// Value at a flat index, `None` for nodata.
    #[inline]
    pub fn get(&self, idx: usize) -> Option<f64> {
        match self {
            Samples::U16 { values, nodata } => {
                let v = values[idx];
                (v != *nodata).then_some(v as f64)
            }
            Samples::F32 { values, nodata } => {
                let v = values[idx];
                (!f32_is_nodata(v, *nodata)).then_some(v as f64)
            }
        }
    }

    fn empty_like(&self, len: usize) -> Samples {
        match self {
            Samples::U16 { nodata, .. } => Samples::U16 {
                values: Vec::with_capacity(len),
                nodata: *nodata,
            },
            Samples::F32 { nodata, .. } => Samples::F32 {
                values: Vec::with_capacity(len),
                nodata: *nodata,
            },
        }
    }

    fn extend_from(&mut self, other: &Samples, range: std::ops::Range<usize>) {
        match (self, other) {
            (Samples::U16 { values, .. }, Samples::U16 { values: src, .. }) => {
                values.extend_from_slice(&src[range])
            }
            (Samples::F32 { values, .. }, Samples::F32 { values: src, .. }) => {
                values.extend_from_slice(&src[range])
            }
            _ => unreachable!("sample dtypes always match within one stack"),
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            Samples::U16 { values, .. } => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
            Samples::F32 { values, .. } => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    fn bit_eq(&self, other: &Samples) -> bool {
        match (self, other) {
            (
                Samples::U16 {
                    values: a,
                    nodata: na,
                },
                Samples::U16 {
                    values: b,
                    nodata: nb,
                },
            ) => na == nb && a == b,
            (
                Samples::F32 {
                    values: a,
                    nodata: na,
                },
                Samples::F32 {
                    values: b,
                    nodata: nb,
                },
            ) => {
                na.to_bits() == nb.to_bits()
                    && a.len() == b.len()
                    && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

#[inline]
pub(crate) fn f32_is_nodata(v: f32, nodata: f32) -> bool {
    if nodata.is_nan() {
        v.is_nan()
    } else {
        v == nodata
    }
}

/// Four co-registered planes (B, G, R, NIR).
#[derive(Debug, Clone)]
pub struct BandStack {
    pub width: usize,
    pub height: usize,
    pub chunk_shape: (usize, usize),
    pub geo: GeoTransform,
    pub value_kind: ValueKind,
    pub samples: Samples,
}

/// Default chunk edge, matching the training patch size.
pub const DEFAULT_CHUNK: usize = 256;

impl BandStack {
    pub fn new(
        width: usize,
        height: usize,
        samples: Samples,
        geo: GeoTransform,
        value_kind: ValueKind,
    ) -> Result<Self> {
        let stack = Self {
            width,
            height,
            chunk_shape: (
                DEFAULT_CHUNK.min(height.max(1)),
                DEFAULT_CHUNK.min(width.max(1)),
            ),
            geo,
            value_kind,
            samples,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn with_chunk_shape(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(RasterError::Shape("chunk shape must be positive".into()));
        }
        self.chunk_shape = (rows, cols);
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        self.geo.validate()?;
        let expected = BAND_COUNT * self.width * self.height;
        if self.samples.len() != expected {
            return Err(RasterError::Shape(format!(
                "expected {expected} samples for {}x{}x{BAND_COUNT}, got {}",
                self.width,
                self.height,
                self.samples.len()
            )));
        }
        if self.chunk_shape.0 == 0 || self.chunk_shape.1 == 0 {
            return Err(RasterError::Shape("chunk shape must be positive".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    /// Sample of `band` at flat pixel index `idx`, `None` for nodata.
    #[inline]
    pub fn value(&self, band: Band, idx: usize) -> Option<f64> {
        self.samples.get(band as usize * self.plane_len() + idx)
    }

    /// A pixel is missing when any band holds nodata.
    pub fn is_missing(&self, idx: usize) -> bool {
        let n = self.plane_len();
        (0..BAND_COUNT).any(|b| self.samples.get(b * n + idx).is_none())
    }

    /// Reflectance planes as f32 with NaN marking missing samples.
    pub fn to_f32_planes(&self) -> Vec<f32> {
        (0..self.samples.len())
            .map(|i| self.samples.get(i).map_or(f32::NAN, |v| v as f32))
            .collect()
    }

    /// Bitwise equality of all metadata and samples (NaN payloads included).
    pub fn bit_eq(&self, other: &BandStack) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.chunk_shape == other.chunk_shape
            && self.geo == other.geo
            && self.value_kind == other.value_kind
            && self.samples.bit_eq(&other.samples)
    }

    /// Number of chunks along (rows, cols).
    pub fn chunk_grid(&self) -> (usize, usize) {
        (
            self.height.div_ceil(self.chunk_shape.0),
            self.width.div_ceil(self.chunk_shape.1),
        )
    }

    fn chunk_bounds(&self, chunk_row: usize, chunk_col: usize) -> (usize, usize, usize, usize) {
        let r0 = chunk_row * self.chunk_shape.0;
        let c0 = chunk_col * self.chunk_shape.1;
        let r1 = (r0 + self.chunk_shape.0).min(self.height);
        let c1 = (c0 + self.chunk_shape.1).min(self.width);
        (r0, r1, c0, c1)
    }

    /// Band-sequential samples of one chunk region.
    pub fn chunk_samples(&self, chunk_row: usize, chunk_col: usize) -> Samples {
        let (r0, r1, c0, c1) = self.chunk_bounds(chunk_row, chunk_col);
        let mut out = self.samples.empty_like(BAND_COUNT * (r1 - r0) * (c1 - c0));
        let n = self.plane_len();
        for b in 0..BAND_COUNT {
            for r in r0..r1 {
                let start = b * n + r * self.width;
                out.extend_from(&self.samples, start + c0..start + c1);
            }
        }
        out
    }
}

/// Plane of f32 values (NaN = nodata) on a georeferenced grid.
#[derive(Debug, Clone)]
pub struct ScalarPlane {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub geo: GeoTransform,
}

/// Per-pixel NDVI, NaN where either band is nodata or NIR + Red == 0.
pub fn compute_ndvi(stack: &BandStack) -> ScalarPlane {
    if !stack.value_kind.is_reflectance() {
        log::warn!("computing NDVI on raw digital numbers");
    }
    let values = (0..stack.plane_len())
        .map(
            |i| match (stack.value(Band::Nir, i), stack.value(Band::Red, i)) {
                (Some(nir), Some(red)) if nir + red != 0.0 => ((nir - red) / (nir + red)) as f32,
                _ => f32::NAN,
            },
        )
        .collect();
    ScalarPlane {
        width: stack.width,
        height: stack.height,
        values,
        geo: stack.geo.clone(),
    }
}

/// Single-plane class-id raster.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRaster {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<u8>,
    pub encoding: ClassEncoding,
    pub geo: GeoTransform,
}

impl LabelRaster {
    pub fn new(
        width: usize,
        height: usize,
        ids: Vec<u8>,
        encoding: ClassEncoding,
        geo: GeoTransform,
    ) -> Result<Self> {
        if ids.len() != width * height {
            return Err(RasterError::Shape(format!(
                "expected {} ids, got {}",
                width * height,
                ids.len()
            )));
        }
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= encoding.len()) {
            return Err(RasterError::Shape(format!(
                "class id {bad} not in encoding"
            )));
        }
        Ok(Self {
            width,
            height,
            ids,
            encoding,
            geo,
        })
    }

    /// Pixel counts per class id.
    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.encoding.len()];
        for &id in &self.ids {
            counts[id as usize] += 1;
        }
        counts
    }
}

// ---------------------------------------------------------------------------
// Serialization

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Layout {
    Flat,
    Chunked,
}

/// JSON cannot carry NaN, so the f32 sentinel NaN is written as the string "NaN".
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum NodataValue {
    Number(f64),
    Text(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct RasterHeader {
    width: usize,
    height: usize,
    dtype: String,
    bands: Vec<String>,
    nodata: NodataValue,
    chunk_shape: [usize; 2],
    geo: GeoTransform,
    value_kind: ValueKind,
    layout: Layout,
    payload: String,
}

fn sibling(header_path: &Path, suffix: &str) -> (PathBuf, String) {
    let stem = header_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "raster".into());
    let name = format!("{stem}.{suffix}");
    (header_path.with_file_name(&name), name)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string_pretty(value).expect("header types always serialize");
    fs::write(path, text).map_err(io_err(path))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| RasterError::MalformedHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn read_exact_len(path: &Path, expected: u64) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() as u64 != expected {
        return Err(RasterError::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

/// Writes `values` as little-endian f32.
pub fn write_f32_payload(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads exactly `len` little-endian f32 values.
pub fn read_f32_payload(path: &Path, len: usize) -> Result<Vec<f32>> {
    let bytes = read_exact_len(path, 4 * len as u64)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn decode_samples(path: &Path, dtype: &str, nodata: &NodataValue, bytes: &[u8]) -> Result<Samples> {
    let malformed = |reason: String| RasterError::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    match dtype {
        "uint16" => {
            let nodata = match nodata {
                NodataValue::Number(v) if v.fract() == 0.0 && (0.0..=65535.0).contains(v) => {
                    *v as u16
                }
                other => return Err(malformed(format!("invalid uint16 nodata {other:?}"))),
            };
            let values = bytes
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]))
                .collect();
            Ok(Samples::U16 { values, nodata })
        }
        "float32" => {
            let nodata = match nodata {
                NodataValue::Number(v) => *v as f32,
                NodataValue::Text(t) if t.eq_ignore_ascii_case("nan") => f32::NAN,
                other => return Err(malformed(format!("invalid float32 nodata {other:?}"))),
            };
            let values = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(Samples::F32 { values, nodata })
        }
        other => Err(RasterError::UnsupportedDtype(other.to_string())),
    }
}

fn dtype_bytes(dtype: &str) -> Result<usize> {
    match dtype {
        "uint16" => Ok(2),
        "float32" => Ok(4),
        other => Err(RasterError::UnsupportedDtype(other.to_string())),
    }
}

fn header_for(stack: &BandStack, layout: Layout, payload: String) -> RasterHeader {
    let nodata = match &stack.samples {
        Samples::U16 { nodata, .. } => NodataValue::Number(*nodata as f64),
        Samples::F32 { nodata, .. } if nodata.is_nan() => NodataValue::Text("NaN".into()),
        Samples::F32 { nodata, .. } => NodataValue::Number(*nodata as f64),
    };
    RasterHeader {
        width: stack.width,
        height: stack.height,
        dtype: stack.samples.dtype().into(),
        bands: BAND_NAMES.iter().map(|s| s.to_string()).collect(),
        nodata,
        chunk_shape: [stack.chunk_shape.0, stack.chunk_shape.1],
        geo: stack.geo.clone(),
        value_kind: stack.value_kind,
        layout,
        payload,
    }
}

/// Writes header + one flat band-sequential payload (`<stem>.bin`).
pub fn save_raster(stack: &BandStack, header_path: &Path) -> Result<()> {
    let (payload_path, name) = sibling(header_path, "bin");
    write_json(header_path, &header_for(stack, Layout::Flat, name))?;
    fs::write(&payload_path, stack.samples.to_le_bytes()).map_err(io_err(&payload_path))
}

/// Writes header + a `<stem>.chunks/` directory with one file per chunk.
pub fn save_raster_chunked(stack: &BandStack, header_path: &Path) -> Result<()> {
    let (dir, name) = sibling(header_path, "chunks");
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    write_json(header_path, &header_for(stack, Layout::Chunked, name))?;
    let (rows, cols) = stack.chunk_grid();
    for cr in 0..rows {
        for cc in 0..cols {
            let path = dir.join(format!("c{cr}_{cc}"));
            fs::write(&path, stack.chunk_samples(cr, cc).to_le_bytes()).map_err(io_err(&path))?;
        }
    }
    Ok(())
}

fn validate_header(path: &Path, h: &RasterHeader) -> Result<()> {
    let malformed = |reason: String| RasterError::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    if h.width == 0 || h.height == 0 {
        return Err(malformed("zero raster dimension".into()));
    }
    if h.bands.len() != BAND_COUNT
        || h.bands
            .iter()
            .zip(BAND_NAMES.iter())
            .any(|(a, b)| !a.eq_ignore_ascii_case(b))
    {
        return Err(malformed(format!(
            "band order must be {BAND_NAMES:?}, got {:?}",
            h.bands
        )));
    }
    if h.chunk_shape[0] == 0 || h.chunk_shape[1] == 0 {
        return Err(malformed("chunk shape must be positive".into()));
    }
    h.geo.validate()
}

/// Reads a raster written by [`save_raster`] or [`save_raster_chunked`].
pub fn load_raster(header_path: &Path) -> Result<BandStack> {
    let header: RasterHeader = read_json(header_path)?;
    validate_header(header_path, &header)?;
    let elem = dtype_bytes(&header.dtype)?;
    let payload = header_path.with_file_name(&header.payload);
    let samples = match header.layout {
        Layout::Flat => {
            let expected = (BAND_COUNT * header.width * header.height * elem) as u64;
            let bytes = read_exact_len(&payload, expected)?;
            decode_samples(header_path, &header.dtype, &header.nodata, &bytes)?
        }
        Layout::Chunked => assemble_chunks(header_path, &header, &payload, elem)?,
    };
    BandStack::new(
        header.width,
        header.height,
        samples,
        header.geo,
        header.value_kind,
    )?
    .with_chunk_shape(header.chunk_shape[0], header.chunk_shape[1])
}

fn assemble_chunks(path: &Path, h: &RasterHeader, dir: &Path, elem: usize) -> Result<Samples> {
    let n = h.width * h.height;
    let (ch, cw) = (h.chunk_shape[0], h.chunk_shape[1]);
    let mut out = vec![0u8; BAND_COUNT * n * elem];
    for cr in 0..h.height.div_ceil(ch) {
        for cc in 0..h.width.div_ceil(cw) {
            let (r0, c0) = (cr * ch, cc * cw);
            let (rh, rw) = ((r0 + ch).min(h.height) - r0, (c0 + cw).min(h.width) - c0);
            let file = dir.join(format!("c{cr}_{cc}"));
            let bytes = read_exact_len(&file, (BAND_COUNT * rh * rw * elem) as u64)?;
            for b in 0..BAND_COUNT {
                for r in 0..rh {
                    let src = ((b * rh + r) * rw) * elem;
                    let dst = (b * n + (r0 + r) * h.width + c0) * elem;
                    out[dst..dst + rw * elem].copy_from_slice(&bytes[src..src + rw * elem]);
                }
            }
        }
    }
    decode_samples(path, &h.dtype, &h.nodata, &out)
}

/// Reads a single chunk of a chunked raster without touching the others.
pub fn load_chunk(header_path: &Path, chunk_row: usize, chunk_col: usize) -> Result<Samples> {
    let header: RasterHeader = read_json(header_path)?;
    validate_header(header_path, &header)?;
    if header.layout != Layout::Chunked {
        return Err(RasterError::MalformedHeader {
            path: header_path.to_path_buf(),
            reason: "raster is not stored chunked".into(),
        });
    }
    let elem = dtype_bytes(&header.dtype)?;
    let (ch, cw) = (header.chunk_shape[0], header.chunk_shape[1]);
    let (r0, c0) = (chunk_row * ch, chunk_col * cw);
    if r0 >= header.height || c0 >= header.width {
        return Err(RasterError::Shape(format!(
            "chunk ({chunk_row}, {chunk_col}) out of range"
        )));
    }
    let (rh, rw) = (
        (r0 + ch).min(header.height) - r0,
        (c0 + cw).min(header.width) - c0,
    );
    let file = header_path
        .with_file_name(&header.payload)
        .join(format!("c{chunk_row}_{chunk_col}"));
    let bytes = read_exact_len(&file, (BAND_COUNT * rh * rw * elem) as u64)?;
    decode_samples(header_path, &header.dtype, &header.nodata, &bytes)
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelHeader {
    width: usize,
    height: usize,
    dtype: String,
    encoding: ClassEncoding,
    geo: GeoTransform,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    palette: Option<Vec<[u8; 3]>>,
    payload: String,
}

/// Writes a label raster (u8 ids) with an optional RGB palette indexed by id.
pub fn save_labels(
    labels: &LabelRaster,
    header_path: &Path,
    palette: Option<&[[u8; 3]]>,
) -> Result<()> {
    let (payload_path, name) = sibling(header_path, "bin");
    let header = LabelHeader {
        width: labels.width,
        height: labels.height,
        dtype: "uint8".into(),
        encoding: labels.encoding.clone(),
        geo: labels.geo.clone(),
        palette: palette.map(|p| p.to_vec()),
        payload: name,
    };
    write_json(header_path, &header)?;
    fs::write(&payload_path, &labels.ids).map_err(io_err(&payload_path))
}

pub fn load_labels(header_path: &Path) -> Result<LabelRaster> {
    let header: LabelHeader = read_json(header_path)?;
    if header.dtype != "uint8" {
        return Err(RasterError::UnsupportedDtype(header.dtype));
    }
    let payload = header_path.with_file_name(&header.payload);
    let ids = read_exact_len(&payload, (header.width * header.height) as u64)?;
    LabelRaster::new(
        header.width,
        header.height,
        ids,
        header.encoding,
        header.geo,
    )
}
