//! Merging patch predictions, thresholding, scoring against truth, and class-area
//! change reporting.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chipper::PatchGrid;
use crate::maskgen::{BinaryMask, ClassEncoding, OTHER};
use crate::raster_store::{
    self, pixel_area, read_f32_payload, read_json, write_f32_payload, write_json, GeoTransform,
    LabelRaster, RasterError,
};
use crate::trainer::PatchProbs;

#[derive(Debug, Error)]
pub enum PostprocError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("patch origin {origin:?} lies outside the {height}x{width} scene")]
    OriginOutside {
        origin: (usize, usize),
        height: usize,
        width: usize,
    },
    #[error("threshold must lie in (0, 1), got {0}")]
    Threshold(f64),
    #[error("class {0} out of range")]
    Class(usize),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T, E = PostprocError> = std::result::Result<T, E>;

/// Default cut-off for turning probabilities into binary masks.
pub const DEFAULT_THRESHOLD: f64 = 0.4;

/// Scene-sized class probabilities, class-sequential; NaN where no patch covers.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityRaster {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub values: Vec<f32>,
    pub geo: GeoTransform,
}

impl ProbabilityRaster {
    pub fn plane(&self, k: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.values[k * n..(k + 1) * n]
    }

    fn same_grid(&self, other: &ProbabilityRaster) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.classes == other.classes
            && self.geo == other.geo
    }

    /// Byte equality including NaN payloads.
    pub fn bit_eq(&self, other: &ProbabilityRaster) -> bool {
        self.same_grid(other)
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Per-pixel, per-class maximum over every patch covering the pixel.
pub fn merge_predictions(
    grid: &PatchGrid,
    patches: &[PatchProbs],
    geo: &GeoTransform,
) -> Result<ProbabilityRaster> {
    let (h, w) = (grid.parent_height, grid.parent_width);
    let classes = patches
        .first()
        .map_or(crate::ssl::NUM_CLASSES, |p| p.classes);
    let n = h * w;
    let mut values = vec![f32::NAN; classes * n];
    for p in patches {
        if p.origin.0 >= h || p.origin.1 >= w {
            return Err(PostprocError::OriginOutside {
                origin: p.origin,
                height: h,
                width: w,
            });
        }
        if p.classes != classes || p.size != grid.patch_size {
            return Err(PostprocError::GridMismatch(format!(
                "patch at {:?} is {}x{} with {} classes",
                p.origin, p.size, p.size, p.classes
            )));
        }
        let pn = p.size * p.size;
        let rows = p.size.min(h - p.origin.0);
        let cols = p.size.min(w - p.origin.1);
        for k in 0..classes {
            let src = &p.probs[k * pn..(k + 1) * pn];
            let dst = &mut values[k * n..(k + 1) * n];
            for r in 0..rows {
                let srow = &src[r * p.size..r * p.size + cols];
                let d0 = (p.origin.0 + r) * w + p.origin.1;
                for (d, &v) in dst[d0..d0 + cols].iter_mut().zip(srow) {
                    if !v.is_nan() && (d.is_nan() || v > *d) {
                        *d = v;
                    }
                }
            }
        }
    }
    Ok(ProbabilityRaster {
        width: w,
        height: h,
        classes,
        values,
        geo: geo.clone(),
    })
}

/// Mean of two probability rasters; nodata where either is.
pub fn ensemble(a: &ProbabilityRaster, b: &ProbabilityRaster) -> Result<ProbabilityRaster> {
    if !a.same_grid(b) {
        return Err(PostprocError::GridMismatch(
            "ensemble of rasters on different grids".into(),
        ));
    }
    let mut out = a.clone();
    for (o, &v) in out.values.iter_mut().zip(&b.values) {
        *o = (*o + v) / 2.0;
    }
    Ok(out)
}

/// Set where the class probability is `>= threshold`; nodata is unset.
pub fn threshold_mask(
    probs: &ProbabilityRaster,
    class: usize,
    threshold: f64,
) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(PostprocError::Threshold(threshold));
    }
    if class >= probs.classes {
        return Err(PostprocError::Class(class));
    }
    let t = threshold as f32;
    Ok(BinaryMask {
        width: probs.width,
        height: probs.height,
        bits: probs.plane(class).iter().map(|&v| v >= t).collect(),
        geo: probs.geo.clone(),
    })
}

/// One mask per class id.
pub fn threshold_all(probs: &ProbabilityRaster, threshold: f64) -> Result<Vec<BinaryMask>> {
    (0..probs.classes)
        .map(|k| threshold_mask(probs, k, threshold))
        .collect()
}

/// Class with the highest probability per pixel; uncovered pixels become class 0.
pub fn argmax_map(probs: &ProbabilityRaster, encoding: &ClassEncoding) -> Result<LabelRaster> {
    let n = probs.width * probs.height;
    let ids = (0..n)
        .map(|i| {
            let mut best = 0u8;
            let mut best_v = f32::NEG_INFINITY;
            for k in 0..probs.classes {
                let v = probs.values[k * n + i];
                if v > best_v {
                    best = k as u8;
                    best_v = v;
                }
            }
            best
        })
        .collect();
    Ok(LabelRaster::new(
        probs.width,
        probs.height,
        ids,
        encoding.clone(),
        probs.geo.clone(),
    )?)
}

/// Display colours by class name; unknown classes are gray.
pub fn class_palette(encoding: &ClassEncoding) -> Vec<[u8; 3]> {
    encoding
        .names()
        .iter()
        .map(|n| match n.as_str() {
            "buildings" => [255, 0, 0],
            "trees" => [0, 160, 0],
            "roads" => [0, 0, 0],
            "water" => [0, 0, 255],
            _ => [128, 128, 128],
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub name: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    /// `None` when the class is absent from the truth.
    pub recall: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Named classes in encoding order, "other" excluded.
    pub classes: Vec<ClassScore>,
    pub average_recall: Option<f64>,
    pub miou: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Confusion counts, recall and IoU of each named class's binary mask against the
/// truth ids. `masks[k]` is the mask of class id `k`.
pub fn evaluate(masks: &[BinaryMask], truth: &LabelRaster) -> Result<EvalReport> {
    let enc = &truth.encoding;
    if masks.len() != enc.len() {
        return Err(PostprocError::GridMismatch(format!(
            "{} masks for {} classes",
            masks.len(),
            enc.len()
        )));
    }
    let mut classes = Vec::new();
    for (k, m) in masks.iter().enumerate() {
        let name = enc.name(k as u8).unwrap_or_default().to_string();
        if name == OTHER {
            continue;
        }
        if m.width != truth.width || m.height != truth.height || m.geo != truth.geo {
            return Err(PostprocError::GridMismatch(format!(
                "mask of {name} vs truth"
            )));
        }
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for (&p, &id) in m.bits.iter().zip(&truth.ids) {
            match (p, id as usize == k) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let applicable = tp + fn_ > 0;
        classes.push(ClassScore {
            name,
            tp,
            fp,
            fn_,
            tn,
            recall: applicable.then(|| tp as f64 / (tp + fn_) as f64),
            iou: applicable.then(|| tp as f64 / (tp + fp + fn_) as f64),
        });
    }
    Ok(EvalReport {
        average_recall: mean(classes.iter().filter_map(|c| c.recall)),
        miou: mean(classes.iter().filter_map(|c| c.iou)),
        classes,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl EvalReport {
    pub fn recall_of(&self, name: &str) -> Option<f64> {
        self.classes
            .iter()
            .find(|c| c.name == name)
            .and_then(|c| c.recall)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,tp,fp,fn,tn,recall,iou\n");
        let opt = |v: Option<f64>| v.map_or_else(|| "N/A".into(), |x| format!("{x:.6}"));
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                c.name,
                c.tp,
                c.fp,
                c.fn_,
                c.tn,
                opt(c.recall),
                opt(c.iou)
            );
        }
        let _ = writeln!(
            s,
            "average,,,,,{},{}",
            opt(self.average_recall),
            opt(self.miou)
        );
        s
    }

    /// Classes across, recall and IoU rows in percent, average last.
    pub fn to_table(&self, model: &str) -> String {
        let mut head = format!("{:<24} | {:<6}", "Model", "Metric");
        for c in &self.classes {
            let _ = write!(head, " | {:>9}", c.name);
        }
        head.push_str(" |   Average");
        let mut s = format!("{head}\n{}\n", "-".repeat(head.len()));
        let mut row = |label: &str, metric: &str, vals: Vec<Option<f64>>, avg: Option<f64>| {
            let _ = write!(s, "{label:<24} | {metric:<6}");
            for v in vals {
                let _ = write!(s, " | {:>9}", pct(v));
            }
            let _ = writeln!(s, " | {:>9}", pct(avg));
        };
        row(
            model,
            "Recall",
            self.classes.iter().map(|c| c.recall).collect(),
            self.average_recall,
        );
        row(
            "",
            "MIoU",
            self.classes.iter().map(|c| c.iou).collect(),
            self.miou,
        );
        s
    }
}

/// `set pixels * pixel area / 1e6`, in km^2.
pub fn class_area(mask: &BinaryMask) -> Result<f64> {
    Ok(mask.count() as f64 * pixel_area(&mask.geo)? / 1e6)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRow {
    pub name: String,
    pub area_t1: f64,
    pub area_t2: f64,
    pub delta: f64,
    /// `None` when the class had no area at t1.
    pub percent_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeReport {
    pub rows: Vec<ChangeRow>,
}

/// Change rows from per-class areas (km^2) at two dates.
pub fn change_from_areas(areas: &[(&str, f64, f64)]) -> ChangeReport {
    ChangeReport {
        rows: areas
            .iter()
            .map(|&(name, a1, a2)| {
                let delta = a2 - a1;
                ChangeRow {
                    name: name.to_string(),
                    area_t1: a1,
                    area_t2: a2,
                    delta,
                    percent_change: (a1 != 0.0).then(|| 100.0 * delta / a1),
                }
            })
            .collect(),
    }
}

/// Class areas of two dates' masks (indexed by class id), "other" excluded.
pub fn change_report(
    masks_t1: &[BinaryMask],
    masks_t2: &[BinaryMask],
    encoding: &ClassEncoding,
) -> Result<ChangeReport> {
    if masks_t1.len() != encoding.len() || masks_t2.len() != encoding.len() {
        return Err(PostprocError::GridMismatch(
            "one mask per class expected at both dates".into(),
        ));
    }
    let mut areas = Vec::new();
    for (k, name) in encoding.names().iter().enumerate() {
        if name == OTHER {
            continue;
        }
        if !masks_t1[k].same_grid(&masks_t2[k]) {
            return Err(PostprocError::GridMismatch(format!(
                "{name} masks differ in grid"
            )));
        }
        areas.push((
            name.as_str(),
            class_area(&masks_t1[k])?,
            class_area(&masks_t2[k])?,
        ));
    }
    Ok(change_from_areas(&areas))
}

impl ChangeReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,area_t1_km2,area_t2_km2,delta_km2,percent_change\n");
        for r in &self.rows {
            let p = r
                .percent_change
                .map_or_else(|| "N/A".into(), |p| format!("{p:.4}"));
            let _ = writeln!(
                s,
                "{},{:.4},{:.4},{:.4},{p}",
                r.name, r.area_t1, r.area_t2, r.delta
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<10} | {:>16} | {:>16} | {:>16} | {:>9}\n",
            "Classes", "t1 area (km2)", "t2 area (km2)", "Gained/Lost", "% Change"
        );
        s.push_str(&"-".repeat(s.len() - 1));
        s.push('\n');
        for r in &self.rows {
            let p = r
                .percent_change
                .map_or_else(|| "N/A".into(), |p| format!("{p:.4}%"));
            let _ = writeln!(
                s,
                "{:<10} | {:>16.4} | {:>16.4} | {:>16.4} | {:>9}",
                r.name, r.area_t1, r.area_t2, r.delta, p
            );
        }
        s
    }
}

#[derive(Serialize, Deserialize)]
struct ProbHeader {
    width: usize,
    height: usize,
    classes: usize,
    dtype: String,
    nodata: String,
    geo: GeoTransform,
    payload: String,
}

/// JSON header plus `<stem>.bin` of little-endian f32 class planes.
pub fn save_probabilities(probs: &ProbabilityRaster, header_path: &Path) -> Result<()> {
    let stem = header_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("probs");
    let payload = format!("{stem}.bin");
    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
    write_f32_payload(&dir.join(&payload), &probs.values)?;
    write_json(
        header_path,
        &ProbHeader {
            width: probs.width,
            height: probs.height,
            classes: probs.classes,
            dtype: "float32".into(),
            nodata: "NaN".into(),
            geo: probs.geo.clone(),
            payload,
        },
    )?;
    Ok(())
}

pub fn load_probabilities(header_path: &Path) -> Result<ProbabilityRaster> {
    let h: ProbHeader = read_json(header_path)?;
    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
    let values = read_f32_payload(&dir.join(&h.payload), h.classes * h.width * h.height)?;
    Ok(ProbabilityRaster {
        width: h.width,
        height: h.height,
        classes: h.classes,
        values,
        geo: h.geo,
    })
}

/// Argmax class map saved as an 8-bit label raster carrying the class palette.
pub fn save_class_map(
    probs: &ProbabilityRaster,
    encoding: &ClassEncoding,
    header_path: &Path,
) -> Result<()> {
    let map = argmax_map(probs, encoding)?;
    raster_store::save_labels(&map, header_path, Some(&class_palette(encoding)))?;
    Ok(())
}
