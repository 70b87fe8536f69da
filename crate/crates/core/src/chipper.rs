//! Patch extraction for training (filtered, non-overlapping) and evaluation
//! (overlapping sliding window, unfiltered, padded at the edges).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster_store::{
    self, read_json, write_json, BandStack, GeoTransform, LabelRaster, RasterError, Samples,
    ValueKind, BAND_COUNT,
};

/// Edge length of training and evaluation patches.
pub const PATCH_SIZE: usize = 256;

#[derive(Debug, Error)]
pub enum ChipError {
    #[error("image and label grids differ: {0}")]
    GridMismatch(String),
    #[error("stride must be in 1..={max}, got {stride}")]
    InvalidStride { stride: usize, max: usize },
    #[error("invalid filter policy: {0}")]
    Policy(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T, E = ChipError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChipFilterPolicy {
    /// Discard a patch when more than this fraction of pixels is missing.
    pub max_missing_frac: f64,
    /// Discard a patch when more than this fraction of pixels is "other".
    pub max_other_frac: f64,
    pub patch_size: usize,
}

impl Default for ChipFilterPolicy {
    fn default() -> Self {
        Self {
            max_missing_frac: 0.5,
            max_other_frac: 0.65,
            patch_size: PATCH_SIZE,
        }
    }
}

impl ChipFilterPolicy {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.max_missing_frac) || !unit.contains(&self.max_other_frac) {
            return Err(ChipError::Policy("fractions must lie in [0, 1]".into()));
        }
        if self.patch_size == 0 {
            return Err(ChipError::Policy("patch size must be positive".into()));
        }
        Ok(())
    }

    /// Keep rule: discard iff missing > max_missing OR other > max_other.
    pub fn keeps(&self, missing_frac: f64, other_frac: f64) -> bool {
        missing_frac <= self.max_missing_frac && other_frac <= self.max_other_frac
    }
}

/// A window of the parent raster. Pixels past the parent edge (or nodata in any
/// band) hold NaN in every band.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    /// Band-sequential, `BAND_COUNT * size * size`.
    pub image: Vec<f32>,
    /// Class ids, present for training patches.
    pub label: Option<Vec<u8>>,
    /// Upper-left pixel in the parent raster.
    pub origin: (usize, usize),
    /// True where the window extends past the parent raster.
    pub pad_mask: Vec<bool>,
}

impl Patch {
    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    /// Usable pixels: inside the parent and finite in every band.
    pub fn valid_mask(&self) -> Vec<bool> {
        let n = self.pixels();
        (0..n)
            .map(|i| !self.pad_mask[i] && (0..BAND_COUNT).all(|b| !self.image[b * n + i].is_nan()))
            .collect()
    }
}

fn extract(
    stack: &BandStack,
    labels: Option<&LabelRaster>,
    origin: (usize, usize),
    size: usize,
) -> Patch {
    let n = size * size;
    let plane = stack.plane_len();
    let mut image = vec![f32::NAN; BAND_COUNT * n];
    let mut pad_mask = vec![true; n];
    let mut label = labels.map(|_| vec![0u8; n]);
    let rows = size.min(stack.height.saturating_sub(origin.0));
    let cols = size.min(stack.width.saturating_sub(origin.1));
    for r in 0..rows {
        let src_row = (origin.0 + r) * stack.width + origin.1;
        for c in 0..cols {
            let src = src_row + c;
            let dst = r * size + c;
            pad_mask[dst] = false;
            for b in 0..BAND_COUNT {
                if let Some(v) = stack.samples.get(b * plane + src) {
                    image[b * n + dst] = v as f32;
                }
            }
            if let (Some(out), Some(l)) = (label.as_mut(), labels) {
                out[dst] = l.ids[src];
            }
        }
    }
    Patch {
        size,
        image,
        label,
        origin,
        pad_mask,
    }
}

/// Missing and "other" fractions of a labelled patch, both over all patch pixels.
/// Padding counts as missing.
pub fn patch_fractions(patch: &Patch) -> (f64, f64) {
    let n = patch.pixels() as f64;
    let valid = patch.valid_mask();
    let missing = valid.iter().filter(|&&v| !v).count() as f64;
    let other = patch
        .label
        .as_ref()
        .map(|l| {
            l.iter()
                .zip(&patch.pad_mask)
                .filter(|&(&id, &pad)| id == 0 && !pad)
                .count()
        })
        .unwrap_or(0) as f64;
    (missing / n, other / n)
}

/// Outcome for one candidate training tile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileDecision {
    pub origin: (usize, usize),
    pub missing_frac: f64,
    pub other_frac: f64,
    pub kept: bool,
}

#[derive(Debug, Clone)]
pub struct TrainingChips {
    pub patches: Vec<Patch>,
    /// Every candidate tile in row-major order, kept or not.
    pub decisions: Vec<TileDecision>,
}

fn same_grid(stack: &BandStack, labels: &LabelRaster) -> Result<()> {
    if stack.width != labels.width || stack.height != labels.height || stack.geo != labels.geo {
        return Err(ChipError::GridMismatch(format!(
            "image {}x{} vs labels {}x{}",
            stack.width, stack.height, labels.width, labels.height
        )));
    }
    Ok(())
}

/// Non-overlapping tiling at stride `patch_size`, filtered by `policy`.
pub fn chip_training(
    stack: &BandStack,
    labels: &LabelRaster,
    policy: &ChipFilterPolicy,
) -> Result<TrainingChips> {
    policy.validate()?;
    same_grid(stack, labels)?;
    let size = policy.patch_size;
    let mut out = TrainingChips {
        patches: Vec::new(),
        decisions: Vec::new(),
    };
    for r in (0..stack.height).step_by(size) {
        for c in (0..stack.width).step_by(size) {
            let patch = extract(stack, Some(labels), (r, c), size);
            let (missing_frac, other_frac) = patch_fractions(&patch);
            let kept = policy.keeps(missing_frac, other_frac);
            out.decisions.push(TileDecision {
                origin: (r, c),
                missing_frac,
                other_frac,
                kept,
            });
            if kept {
                out.patches.push(patch);
            }
        }
    }
    Ok(out)
}

/// Sliding-window layout over a parent raster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub parent_height: usize,
    pub parent_width: usize,
    pub patch_size: usize,
    pub stride: usize,
    /// Row-major.
    pub origins: Vec<(usize, usize)>,
}

impl PatchGrid {
    /// Windows start at every multiple of `stride` inside the parent.
    pub fn new(
        parent_height: usize,
        parent_width: usize,
        patch_size: usize,
        stride: usize,
    ) -> Result<Self> {
        if stride == 0 || stride > patch_size {
            return Err(ChipError::InvalidStride {
                stride,
                max: patch_size,
            });
        }
        let starts = |dim: usize| (0..dim.max(1)).step_by(stride).collect::<Vec<_>>();
        let rows = starts(parent_height);
        let cols = starts(parent_width);
        let origins = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect();
        Ok(Self {
            parent_height,
            parent_width,
            patch_size,
            stride,
            origins,
        })
    }
}

/// Overlapping evaluation patches covering the whole raster.
pub fn chip_eval(stack: &BandStack, stride: usize) -> Result<(PatchGrid, Vec<Patch>)> {
    let grid = PatchGrid::new(stack.height, stack.width, PATCH_SIZE, stride)?;
    let patches = eval_patches(stack, &grid);
    Ok((grid, patches))
}

/// Re-extracts the patches of an existing grid.
pub fn eval_patches(stack: &BandStack, grid: &PatchGrid) -> Vec<Patch> {
    grid.origins
        .iter()
        .map(|&o| extract(stack, None, o, grid.patch_size))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct PatchIndex {
    parent_height: usize,
    parent_width: usize,
    patch_size: usize,
    tiles: Vec<TileDecision>,
    /// Header file of each kept patch, in the order of the kept tiles.
    files: Vec<String>,
}

/// Persists kept training patches (image + label containers) and an index of every
/// tile decision under `dir`.
pub fn save_training_chips(
    chips: &TrainingChips,
    parent: &BandStack,
    labels: &LabelRaster,
    dir: &Path,
) -> Result<()> {
    let size = chips.patches.first().map_or(PATCH_SIZE, |p| p.size);
    let mut files = Vec::with_capacity(chips.patches.len());
    for p in &chips.patches {
        let geo = parent.geo.offset(p.origin.0, p.origin.1);
        let name = format!("img_{}_{}.json", p.origin.0, p.origin.1);
        let image = BandStack::new(
            size,
            size,
            Samples::F32 {
                values: p.image.clone(),
                nodata: f32::NAN,
            },
            geo.clone(),
            parent.value_kind,
        )?;
        raster_store::save_raster(&image, &dir.join(&name))?;
        let lab = LabelRaster::new(
            size,
            size,
            p.label.clone().unwrap_or_else(|| vec![0; size * size]),
            labels.encoding.clone(),
            geo,
        )?;
        raster_store::save_labels(
            &lab,
            &dir.join(format!("lbl_{}_{}.json", p.origin.0, p.origin.1)),
            None,
        )?;
        files.push(name);
    }
    let index = PatchIndex {
        parent_height: parent.height,
        parent_width: parent.width,
        patch_size: size,
        tiles: chips.decisions.clone(),
        files,
    };
    Ok(write_json(&dir.join("index.json"), &index)?)
}

/// Loads the patches written by [`save_training_chips`].
pub fn load_training_chips(dir: &Path) -> Result<(Vec<Patch>, Vec<TileDecision>, GeoTransform)> {
    let index: PatchIndex = read_json(&dir.join("index.json"))?;
    let kept: Vec<&TileDecision> = index.tiles.iter().filter(|t| t.kept).collect();
    if kept.len() != index.files.len() {
        return Err(ChipError::Raster(RasterError::MalformedHeader {
            path: dir.join("index.json"),
            reason: "kept tiles and patch files disagree".into(),
        }));
    }
    let mut patches = Vec::with_capacity(kept.len());
    let mut parent_geo = None;
    for (tile, name) in kept.iter().zip(&index.files) {
        let image = raster_store::load_raster(&dir.join(name))?;
        if image.value_kind == ValueKind::Dn {
            log::warn!("training patch {name} holds raw digital numbers");
        }
        let lbl_name = name.replacen("img_", "lbl_", 1);
        let label = raster_store::load_labels(&dir.join(lbl_name))?;
        let (r, c) = tile.origin;
        if parent_geo.is_none() {
            let (x, y) = image.geo.pixel_to_world(-(r as f64), -(c as f64));
            parent_geo = Some(GeoTransform {
                origin_x: x,
                origin_y: y,
                ..image.geo.clone()
            });
        }
        let size = index.patch_size;
        let pad_mask = (0..size * size)
            .map(|i| r + i / size >= index.parent_height || c + i % size >= index.parent_width)
            .collect();
        patches.push(Patch {
            size,
            image: image.to_f32_planes(),
            label: Some(label.ids),
            origin: tile.origin,
            pad_mask,
        });
    }
    Ok((
        patches,
        index.tiles,
        parent_geo.unwrap_or_else(GeoTransform::identity),
    ))
}

pub fn save_grid(grid: &PatchGrid, path: &Path) -> Result<()> {
    Ok(write_json(path, grid)?)
}

pub fn load_grid(path: &Path) -> Result<PatchGrid> {
    Ok(read_json(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskgen::ClassEncoding;

    fn scene(w: usize, h: usize) -> BandStack {
        BandStack::new(
            w,
            h,
            Samples::F32 {
                values: vec![0.2; BAND_COUNT * w * h],
                nodata: f32::NAN,
            },
            GeoTransform::identity(),
            ValueKind::BoaReflectance,
        )
        .unwrap()
    }

    fn labels(w: usize, h: usize, id: u8) -> LabelRaster {
        LabelRaster::new(
            w,
            h,
            vec![id; w * h],
            ClassEncoding::default(),
            GeoTransform::identity(),
        )
        .unwrap()
    }

    fn set_missing_rows(stack: &mut BandStack, rows: usize) {
        let Samples::F32 { values, .. } = &mut stack.samples else {
            unreachable!()
        };
        for v in values.iter_mut().take(rows * stack.width) {
            *v = f32::NAN;
        }
    }

    #[test]
    fn sixty_percent_missing_is_discarded() {
        let mut s = scene(256, 256);
        // 154 of 256 rows missing in the blue band = 60.2 %.
        set_missing_rows(&mut s, 154);
        let chips = chip_training(&s, &labels(256, 256, 1), &ChipFilterPolicy::default()).unwrap();
        assert!(chips.patches.is_empty());
        assert!(chips.decisions[0].missing_frac > 0.5);
    }

    #[test]
    fn other_exactly_at_limit_is_kept() {
        let s = scene(20, 20);
        let mut l = labels(20, 20, 1);
        let policy = ChipFilterPolicy {
            patch_size: 20,
            ..Default::default()
        };
        l.ids[..260].fill(0);
        assert_eq!(260.0 / 400.0, 0.65);
        let chips = chip_training(&s, &l, &policy).unwrap();
        assert_eq!(chips.patches.len(), 1);
        l.ids[260] = 0;
        let chips = chip_training(&s, &l, &policy).unwrap();
        assert!(chips.patches.is_empty());
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        assert!(matches!(
            chip_training(
                &scene(256, 256),
                &labels(128, 256, 1),
                &ChipFilterPolicy::default()
            ),
            Err(ChipError::GridMismatch(_))
        ));
    }

    #[test]
    fn eval_single_window() {
        let (grid, patches) = chip_eval(&scene(256, 256), 256).unwrap();
        assert_eq!(grid.origins, vec![(0, 0)]);
        assert!(patches[0].pad_mask.iter().all(|&p| !p));
    }

    #[test]
    fn eval_300_by_128_gives_nine() {
        let (grid, patches) = chip_eval(&scene(300, 300), 128).unwrap();
        assert_eq!(grid.origins.len(), 9);
        assert_eq!(grid.origins[8], (256, 256));
        let last = &patches[8];
        // 44x44 real pixels in the corner window.
        assert_eq!(last.pad_mask.iter().filter(|&&p| !p).count(), 44 * 44);
    }

    #[test]
    fn small_raster_is_padded() {
        let (_, patches) = chip_eval(&scene(100, 100), 128).unwrap();
        assert_eq!(patches.len(), 1);
        let p = &patches[0];
        for i in 0..p.pixels() {
            let inside = i / 256 < 100 && i % 256 < 100;
            assert_eq!(p.pad_mask[i], !inside);
            assert_eq!(p.image[i].is_nan(), !inside);
        }
    }

    #[test]
    fn stride_bounds() {
        assert!(chip_eval(&scene(10, 10), 0).is_err());
        assert!(chip_eval(&scene(10, 10), 257).is_err());
    }

    #[test]
    fn training_chips_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = scene(300, 256);
        let l = labels(300, 256, 2);
        let chips = chip_training(&s, &l, &ChipFilterPolicy::default()).unwrap();
        // Second tile is 44/256 wide: mostly padding, discarded.
        assert_eq!(chips.decisions.len(), 2);
        assert_eq!(chips.patches.len(), 1);
        save_training_chips(&chips, &s, &l, dir.path()).unwrap();
        let (patches, decisions, geo) = load_training_chips(dir.path()).unwrap();
        assert_eq!(decisions, chips.decisions);
        assert_eq!(patches, chips.patches);
        assert_eq!(geo, s.geo);
    }
}
