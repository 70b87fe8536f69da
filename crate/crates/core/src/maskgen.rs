//! Vector labels to a single multi-class label raster.
//!
//! Polygons are filled by an even-odd scanline over pixel centres, polylines are
//! buffered by an exact point-to-segment distance, vegetation comes from an NDVI
//! threshold, and the per-class binary masks are merged with a max rule over a
//! dominance-ordered class encoding (abundant classes get low ids, so minorities win
//! overlaps).

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::raster_store::{GeoTransform, LabelRaster, ScalarPlane};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("malformed GeoJSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid GeoJSON: {0}")]
    Invalid(String),
    #[error("feature {0} has no geometry")]
    MissingGeometry(usize),
    #[error("mask grid mismatch: {0}")]
    GridMismatch(String),
    #[error("class `{0}` is not in the encoding")]
    UnknownClass(String),
    #[error("invalid class encoding: {0}")]
    Encoding(String),
}

pub type Result<T, E = MaskError> = std::result::Result<T, E>;

/// Name of the background class; always id 0.
pub const OTHER: &str = "other";

/// Class names indexed by id. Id 0 is always [`OTHER`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassEncoding {
    names: Vec<String>,
}

impl Default for ClassEncoding {
    /// other=0, trees=1, buildings=2, roads=3, water=4.
    fn default() -> Self {
        Self::new(["other", "trees", "buildings", "roads", "water"]).expect("valid default")
    }
}

impl ClassEncoding {
    /// Names in id order; the first must be [`OTHER`].
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.first().map(String::as_str) != Some(OTHER) {
            return Err(MaskError::Encoding(format!("id 0 must be `{OTHER}`")));
        }
        if names.len() > u8::MAX as usize + 1 {
            return Err(MaskError::Encoding("more than 256 classes".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(MaskError::Encoding(format!("duplicate class `{n}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| i as u8)
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

impl TryFrom<Vec<String>> for ClassEncoding {
    type Error = MaskError;
    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<ClassEncoding> for Vec<String> {
    fn from(e: ClassEncoding) -> Self {
        e.names
    }
}

pub type Coord = [f64; 2];
/// Closed ring, first point == last point.
pub type Ring = Vec<Coord>;

#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    LineString(Vec<Coord>),
    /// Exterior ring followed by holes.
    Polygon(Vec<Ring>),
    MultiPolygon(Vec<Vec<Ring>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub geometry: Geometry,
    pub class_name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorLayer {
    pub features: Vec<Feature>,
    pub crs_id: Option<String>,
}

impl VectorLayer {
    pub fn of_class<'a>(&'a self, class: &'a str) -> impl Iterator<Item = &'a Feature> + 'a {
        self.features.iter().filter(move |f| f.class_name == class)
    }

    /// Subset holding only the features of one class.
    pub fn filter_class(&self, class: &str) -> VectorLayer {
        VectorLayer {
            features: self.of_class(class).cloned().collect(),
            crs_id: self.crs_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedLayer {
    pub layer: VectorLayer,
    /// Features of an unsupported geometry type.
    pub skipped_unsupported: usize,
    /// Supported features whose geometry violates ring/point-count rules.
    pub skipped_invalid: usize,
}

fn coord(v: &Value) -> Option<Coord> {
    let a = v.as_array()?;
    if a.len() < 2 {
        return None;
    }
    Some([a[0].as_f64()?, a[1].as_f64()?])
}

fn coords(v: &Value) -> Option<Vec<Coord>> {
    v.as_array()?.iter().map(coord).collect()
}

fn rings(v: &Value) -> Option<Vec<Ring>> {
    v.as_array()?.iter().map(coords).collect()
}

fn valid_ring(r: &Ring) -> bool {
    r.len() >= 4 && r.first() == r.last()
}

enum Parsed {
    Ok(Geometry),
    Unsupported,
    Invalid,
}

fn parse_geometry(g: &Value) -> Parsed {
    let kind = g.get("type").and_then(Value::as_str).unwrap_or("");
    let c = g.get("coordinates").unwrap_or(&Value::Null);
    match kind {
        "LineString" => match coords(c) {
            Some(pts) if pts.len() >= 2 => Parsed::Ok(Geometry::LineString(pts)),
            _ => Parsed::Invalid,
        },
        "Polygon" => match rings(c) {
            Some(rs) if !rs.is_empty() && rs.iter().all(valid_ring) => {
                Parsed::Ok(Geometry::Polygon(rs))
            }
            _ => Parsed::Invalid,
        },
        "MultiPolygon" => {
            let polys: Option<Vec<Vec<Ring>>> =
                c.as_array().and_then(|a| a.iter().map(rings).collect());
            match polys {
                Some(ps)
                    if !ps.is_empty()
                        && ps
                            .iter()
                            .all(|rs| !rs.is_empty() && rs.iter().all(valid_ring)) =>
                {
                    Parsed::Ok(Geometry::MultiPolygon(ps))
                }
                _ => Parsed::Invalid,
            }
        }
        _ => Parsed::Unsupported,
    }
}

/// Parses a FeatureCollection of LineString / Polygon / MultiPolygon features. The
/// class of each feature is read from the string property `class_key`.
pub fn parse_geojson(text: &str, class_key: &str) -> Result<ParsedLayer> {
    let root: Value = serde_json::from_str(text)?;
    if root.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(MaskError::Invalid(
            "top-level object is not a FeatureCollection".into(),
        ));
    }
    let crs_id = root
        .pointer("/crs/properties/name")
        .and_then(Value::as_str)
        .map(str::to_string);
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| MaskError::Invalid("missing `features` array".into()))?;
    let mut out = ParsedLayer {
        layer: VectorLayer {
            features: Vec::with_capacity(features.len()),
            crs_id,
        },
        skipped_unsupported: 0,
        skipped_invalid: 0,
    };
    for (i, f) in features.iter().enumerate() {
        let geometry = match f.get("geometry") {
            None | Some(Value::Null) => return Err(MaskError::MissingGeometry(i)),
            Some(g) => g,
        };
        let class_name = f
            .pointer(&format!("/properties/{class_key}"))
            .and_then(Value::as_str)
            .unwrap_or(OTHER)
            .to_string();
        match parse_geometry(geometry) {
            Parsed::Ok(geometry) => out.layer.features.push(Feature {
                geometry,
                class_name,
            }),
            Parsed::Unsupported => out.skipped_unsupported += 1,
            Parsed::Invalid => out.skipped_invalid += 1,
        }
    }
    if out.skipped_unsupported > 0 {
        log::warn!(
            "skipped {} features of unsupported geometry type",
            out.skipped_unsupported
        );
    }
    if out.skipped_invalid > 0 {
        log::warn!("skipped {} malformed geometries", out.skipped_invalid);
    }
    Ok(out)
}

fn ring_json(r: &Ring) -> Value {
    Value::Array(r.iter().map(|c| serde_json::json!([c[0], c[1]])).collect())
}

/// Serializes a layer as a FeatureCollection with the class under `class_key`.
pub fn to_geojson(layer: &VectorLayer, class_key: &str) -> String {
    let features: Vec<Value> = layer
        .features
        .iter()
        .map(|f| {
            let geometry = match &f.geometry {
                Geometry::LineString(pts) => {
                    serde_json::json!({"type": "LineString", "coordinates": ring_json(pts)})
                }
                Geometry::Polygon(rs) => serde_json::json!({
                    "type": "Polygon",
                    "coordinates": rs.iter().map(ring_json).collect::<Vec<_>>(),
                }),
                Geometry::MultiPolygon(ps) => serde_json::json!({
                    "type": "MultiPolygon",
                    "coordinates": ps
                        .iter()
                        .map(|rs| rs.iter().map(ring_json).collect::<Vec<_>>())
                        .collect::<Vec<_>>(),
                }),
            };
            let mut props = serde_json::Map::new();
            props.insert(class_key.to_string(), Value::String(f.class_name.clone()));
            serde_json::json!({"type": "Feature", "properties": props, "geometry": geometry})
        })
        .collect();
    let mut root = serde_json::json!({"type": "FeatureCollection", "features": features});
    if let Some(crs) = &layer.crs_id {
        root["crs"] = serde_json::json!({"type": "name", "properties": {"name": crs}});
    }
    serde_json::to_string(&root).expect("geojson values always serialize")
}

/// Per-class presence mask on a raster grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
    pub geo: GeoTransform,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize, geo: GeoTransform) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
            geo,
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn same_grid(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height && self.geo == other.geo
    }

    /// In-place union with a mask on the same grid.
    pub fn union_with(&mut self, other: &BinaryMask) -> Result<()> {
        if !self.same_grid(other) {
            return Err(MaskError::GridMismatch(
                "union of masks on different grids".into(),
            ));
        }
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

fn to_pixel_space(geo: &GeoTransform, pts: &[Coord]) -> Vec<(f64, f64)> {
    // (x, y) in pixel space: x = column coordinate, y = row coordinate.
    pts.iter()
        .map(|p| {
            let (r, c) = geo.world_to_pixel(p[0], p[1]);
            (c, r)
        })
        .collect()
}

/// Even-odd fill of one polygon (exterior + holes) into `mask`.
fn fill_polygon(mask: &mut BinaryMask, rings: &[Ring]) {
    let rings: Vec<Vec<(f64, f64)>> = rings.iter().map(|r| to_pixel_space(&mask.geo, r)).collect();
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in rings.iter().flatten() {
        ymin = ymin.min(p.1);
        ymax = ymax.max(p.1);
    }
    if !(ymin < ymax) {
        return;
    }
    let h = mask.height as i64;
    let w = mask.width as i64;
    let r_lo = ((ymin - 0.5).floor() as i64).max(0);
    let r_hi = ((ymax - 0.5).ceil() as i64).min(h - 1);
    let mut xs = Vec::new();
    for r in r_lo..=r_hi {
        let yc = r as f64 + 0.5;
        xs.clear();
        for ring in &rings {
            for e in ring.windows(2) {
                let (p, q) = (e[0], e[1]);
                if (p.1 > yc) != (q.1 > yc) {
                    xs.push(p.0 + (yc - p.1) * (q.0 - p.0) / (q.1 - p.1));
                }
            }
        }
        xs.sort_by(f64::total_cmp);
        for span in xs.chunks_exact(2) {
            // Centre x = c + 0.5 is inside iff span[0] <= x < span[1].
            let mut c0 = (span[0] - 0.5).ceil() as i64;
            while (c0 as f64 + 0.5) < span[0] {
                c0 += 1;
            }
            while ((c0 - 1) as f64 + 0.5) >= span[0] {
                c0 -= 1;
            }
            let mut c1 = (span[1] - 0.5).ceil() as i64;
            while (c1 as f64 + 0.5) < span[1] {
                c1 += 1;
            }
            while ((c1 - 1) as f64 + 0.5) >= span[1] {
                c1 -= 1;
            }
            let (c0, c1) = (c0.max(0), c1.min(w));
            let row = r as usize * mask.width;
            for c in c0..c1 {
                mask.bits[row + c as usize] = true;
            }
        }
    }
}

/// Fills every Polygon / MultiPolygon of `layer`: a pixel is set iff its centre is
/// inside (even-odd, holes respected). LineStrings are ignored.
pub fn rasterize_polygons(
    layer: &VectorLayer,
    geo: &GeoTransform,
    width: usize,
    height: usize,
) -> BinaryMask {
    let mut mask = BinaryMask::empty(width, height, geo.clone());
    for f in &layer.features {
        match &f.geometry {
            Geometry::Polygon(rings) => fill_polygon(&mut mask, rings),
            Geometry::MultiPolygon(polys) => {
                for rings in polys {
                    fill_polygon(&mut mask, rings);
                }
            }
            Geometry::LineString(_) => {}
        }
    }
    mask
}

/// Squared distance from `p` to segment `ab`.
#[inline]
pub fn point_segment_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    (p.0 - cx).powi(2) + (p.1 - cy).powi(2)
}

/// Buffers every LineString: a pixel is set iff its centre is within `buffer_px`
/// (pixel units) of the polyline. Polygons are ignored.
pub fn rasterize_lines(
    layer: &VectorLayer,
    geo: &GeoTransform,
    width: usize,
    height: usize,
    buffer_px: f64,
) -> BinaryMask {
    let mut mask = BinaryMask::empty(width, height, geo.clone());
    let b = buffer_px.max(0.0);
    let b2 = b * b;
    for f in &layer.features {
        let Geometry::LineString(pts) = &f.geometry else {
            continue;
        };
        let pts = to_pixel_space(geo, pts);
        let segments: Vec<((f64, f64), (f64, f64))> = if pts.len() == 1 {
            vec![(pts[0], pts[0])]
        } else {
            pts.windows(2).map(|s| (s[0], s[1])).collect()
        };
        for (a, e) in segments {
            let c_lo = ((a.0.min(e.0) - b - 0.5).floor() as i64).max(0);
            let c_hi = ((a.0.max(e.0) + b - 0.5).ceil() as i64).min(width as i64 - 1);
            let r_lo = ((a.1.min(e.1) - b - 0.5).floor() as i64).max(0);
            let r_hi = ((a.1.max(e.1) + b - 0.5).ceil() as i64).min(height as i64 - 1);
            for r in r_lo..=r_hi {
                let row = r as usize * width;
                for c in c_lo..=c_hi {
                    let centre = (c as f64 + 0.5, r as f64 + 0.5);
                    if point_segment_dist2(centre, a, e) <= b2 {
                        mask.bits[row + c as usize] = true;
                    }
                }
            }
        }
    }
    mask
}

/// Vegetation mask: set iff NDVI >= threshold (nodata never set).
pub fn ndvi_mask(ndvi: &ScalarPlane, threshold: f64) -> BinaryMask {
    BinaryMask {
        width: ndvi.width,
        height: ndvi.height,
        bits: ndvi
            .values
            .iter()
            .map(|&v| !v.is_nan() && v as f64 >= threshold)
            .collect(),
        geo: ndvi.geo.clone(),
    }
}

/// Merges class masks: each pixel gets the largest id among the classes present,
/// or 0 ("other") when none is.
pub fn merge_masks(masks: &[(String, BinaryMask)], enc: &ClassEncoding) -> Result<LabelRaster> {
    let Some((_, first)) = masks.first() else {
        return Err(MaskError::GridMismatch("no masks to merge".into()));
    };
    let (width, height, geo) = (first.width, first.height, first.geo.clone());
    let mut ids = vec![0u8; width * height];
    for (name, mask) in masks {
        if !mask.same_grid(first) {
            return Err(MaskError::GridMismatch(format!(
                "mask `{name}` is on a different grid"
            )));
        }
        let id = enc
            .id(name)
            .ok_or_else(|| MaskError::UnknownClass(name.clone()))?;
        for (slot, &set) in ids.iter_mut().zip(&mask.bits) {
            if set && id > *slot {
                *slot = id;
            }
        }
    }
    LabelRaster::new(width, height, ids, enc.clone(), geo)
        .map_err(|e| MaskError::GridMismatch(e.to_string()))
}
