//! Deterministic synthetic scenes: a road grid with blocks of buildings, tree
//! stands and ponds, rendered to DN through the forward atmospheric model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atmocorrect::{
    forward_model, generate_synthetic_lut, interpolate_coeffs, AtmosphereState, BandCalibration,
    CorrectionError, CorrectionLut, RadiometricCalibration, SceneMeta, SolarGeometry,
    SyntheticLutSpec,
};
use crate::maskgen::{rasterize_lines, rasterize_polygons, Coord, Feature, Geometry, VectorLayer};
use crate::raster_store::{BandStack, GeoTransform, RasterError, Samples, ValueKind, BAND_COUNT};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic scene parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Correction(#[from] CorrectionError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

/// Surface reflectance (blue, green, red, NIR) of each rendered class.
pub const SPECTRA: [(&str, [f64; BAND_COUNT]); 5] = [
    ("other", [0.15, 0.18, 0.22, 0.28]),
    ("trees", [0.04, 0.08, 0.05, 0.45]),
    ("buildings", [0.35, 0.35, 0.38, 0.40]),
    ("roads", [0.08, 0.09, 0.10, 0.11]),
    ("water", [0.08, 0.06, 0.04, 0.02]),
];

/// Reserved DN marking nodata.
pub const DN_NODATA: u16 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub gsd: f64,
    pub crs_id: String,
    pub origin_x: f64,
    pub origin_y: f64,
    pub seed: u64,
    /// Fraction of building polygons left out of the sparse vector layer.
    pub building_sparsity: f64,
    pub road_spacing: usize,
    pub road_buffer_px: f64,
    /// Cells per block side; each cell holds at most one structure.
    pub cells_per_block: usize,
    pub noise_sigma: f64,
    pub atmosphere: AtmosphereState,
    pub geometry: SolarGeometry,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 1024,
            height: 1024,
            gsd: 1.134,
            crs_id: "EPSG:32644".into(),
            origin_x: 300_000.0,
            origin_y: 1_930_000.0,
            seed: 42,
            building_sparsity: 0.5,
            road_spacing: 128,
            road_buffer_px: 3.0,
            cells_per_block: 3,
            noise_sigma: 0.01,
            atmosphere: AtmosphereState {
                water_vapour: 2.0,
                ozone: 0.3,
                aot550: 0.25,
                elevation: 0.5,
                theta_s: 30.0,
            },
            geometry: SolarGeometry {
                theta_s: 30.0,
                theta_v: 0.0,
                delta_phi: 0.0,
            },
        }
    }
}

pub fn default_calibration() -> RadiometricCalibration {
    let band = |gain, f0| BandCalibration {
        gain,
        offset: 0.0,
        f0,
    };
    RadiometricCalibration {
        bands: [
            band(0.05, 1950.0),
            band(0.05, 1840.0),
            band(0.04, 1550.0),
            band(0.03, 1040.0),
        ],
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub dn: BandStack,
    pub meta: SceneMeta,
    pub lut: CorrectionLut,
    /// Roads, water and every building.
    pub full: VectorLayer,
    /// As `full` without the dropped buildings.
    pub sparse: VectorLayer,
    /// Rendered class id per pixel, in [`SPECTRA`] order.
    pub rendered: Vec<u8>,
    pub buildings_total: usize,
    pub buildings_dropped: usize,
}

fn rect(geo: &GeoTransform, r0: f64, c0: f64, r1: f64, c1: f64) -> Geometry {
    let p = |r, c| {
        let (x, y) = geo.pixel_to_world(r, c);
        [x, y]
    };
    Geometry::Polygon(vec![vec![
        p(r0, c0),
        p(r0, c1),
        p(r1, c1),
        p(r1, c0),
        p(r0, c0),
    ]])
}

/// Star-shaped blob around a pixel-space centre.
fn blob(
    geo: &GeoTransform,
    rng: &mut ChaCha8Rng,
    cr: f64,
    cc: f64,
    radius: f64,
    wobble: f64,
) -> Geometry {
    let n = 20;
    let mut ring: Vec<Coord> = (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            let r = radius * (1.0 + rng.random_range(-wobble..=wobble));
            let (x, y) = geo.pixel_to_world(cr + r * a.sin(), cc + r * a.cos());
            [x, y]
        })
        .collect();
    ring.push(ring[0]);
    Geometry::Polygon(vec![ring])
}

fn feature(geometry: Geometry, class: &str) -> Feature {
    Feature {
        geometry,
        class_name: class.into(),
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthScene> {
    if cfg.width == 0 || cfg.height == 0 || cfg.road_spacing < 16 || cfg.cells_per_block == 0 {
        return Err(SynthError::Params(
            "degenerate scene size, road spacing or cell count".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.building_sparsity) || !(cfg.noise_sigma >= 0.0) {
        return Err(SynthError::Params(
            "sparsity must lie in [0, 1] and noise >= 0".into(),
        ));
    }
    let geo = GeoTransform::new(
        cfg.origin_x,
        cfg.origin_y,
        cfg.gsd,
        cfg.gsd,
        cfg.crs_id.clone(),
    )?;
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sp = cfg.road_spacing;
    let half = sp / 2;

    let mut roads = Vec::new();
    let mut c = half;
    while c < w {
        let (x0, y0) = geo.pixel_to_world(0.0, c as f64 + 0.5);
        let (x1, y1) = geo.pixel_to_world(h as f64, c as f64 + 0.5);
        roads.push(feature(
            Geometry::LineString(vec![[x0, y0], [x1, y1]]),
            "roads",
        ));
        c += sp;
    }
    let mut r = half;
    while r < h {
        let (x0, y0) = geo.pixel_to_world(r as f64 + 0.5, 0.0);
        let (x1, y1) = geo.pixel_to_world(r as f64 + 0.5, w as f64);
        roads.push(feature(
            Geometry::LineString(vec![[x0, y0], [x1, y1]]),
            "roads",
        ));
        r += sp;
    }

    // Block interiors between road centre lines, leaving a margin to the buffer.
    let margin = cfg.road_buffer_px.ceil() as usize + 3;
    let bounds = |n: usize| -> Vec<(usize, usize)> {
        let mut cuts = vec![0usize];
        let mut k = half;
        while k < n {
            cuts.push(k);
            k += sp;
        }
        cuts.push(n);
        cuts.windows(2)
            .map(|p| {
                (
                    if p[0] == 0 { 2 } else { p[0] + margin },
                    if p[1] == n { n - 2 } else { p[1] - margin },
                )
            })
            .filter(|(a, b)| b > a && b - a >= 12)
            .collect()
    };
    let (rows, cols) = (bounds(h), bounds(w));
    let (mut buildings, mut trees, mut water) = (Vec::new(), Vec::new(), Vec::new());
    let k = cfg.cells_per_block;
    for &(r0, r1) in &rows {
        for &(c0, c1) in &cols {
            let (ch, cw) = ((r1 - r0) as f64 / k as f64, (c1 - c0) as f64 / k as f64);
            for i in 0..k {
                for j in 0..k {
                    let (cr0, cc0) = (r0 as f64 + i as f64 * ch, c0 as f64 + j as f64 * cw);
                    let (cr, cc) = (cr0 + ch / 2.0, cc0 + cw / 2.0);
                    let size = ch.min(cw);
                    let pick: f64 = rng.random();
                    if pick < 0.45 {
                        let bh = size * rng.random_range(0.6..0.85);
                        let bw = size * rng.random_range(0.6..0.85);
                        let (r_a, c_a) = ((cr - bh / 2.0).round(), (cc - bw / 2.0).round());
                        buildings.push(feature(
                            rect(&geo, r_a, c_a, r_a + bh.round(), c_a + bw.round()),
                            "buildings",
                        ));
                    } else if pick < 0.78 {
                        let rad = size * rng.random_range(0.36..0.44);
                        trees.push(feature(blob(&geo, &mut rng, cr, cc, rad, 0.08), "trees"));
                    } else if pick < 0.93 {
                        let rad = size * rng.random_range(0.34..0.42);
                        water.push(feature(blob(&geo, &mut rng, cr, cc, rad, 0.12), "water"));
                    }
                }
            }
        }
    }

    let layer = |fs: Vec<Feature>| VectorLayer {
        features: fs,
        crs_id: Some(cfg.crs_id.clone()),
    };
    let road_mask = rasterize_lines(&layer(roads.clone()), &geo, w, h, cfg.road_buffer_px);
    let tree_mask = rasterize_polygons(&layer(trees), &geo, w, h);
    let water_mask = rasterize_polygons(&layer(water.clone()), &geo, w, h);
    let building_mask = rasterize_polygons(&layer(buildings.clone()), &geo, w, h);
    let mut rendered = vec![0u8; w * h];
    for (id, m) in [
        (1u8, &tree_mask),
        (4, &water_mask),
        (2, &building_mask),
        (3, &road_mask),
    ] {
        for (slot, &b) in rendered.iter_mut().zip(&m.bits) {
            if b {
                *slot = id;
            }
        }
    }

    let lut = generate_synthetic_lut(&SyntheticLutSpec::default())?;
    let coeffs = interpolate_coeffs(&lut, &cfg.atmosphere)?;
    let cal = default_calibration();
    let mu_s = cfg.geometry.mu_s()?;
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("positive sigma");
    // Per-band object brightness jitter keeps classes from being single points.
    let n = w * h;
    let mut jitter = vec![0.0f64; n];
    let mut jrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a09_e667_f3bc_c908);
    let block = 16;
    let grid_w = w.div_ceil(block);
    let tiles: Vec<f64> = (0..grid_w * h.div_ceil(block))
        .map(|_| jrng.random_range(-0.015..0.015))
        .collect();
    for (i, j) in jitter.iter_mut().enumerate() {
        *j = tiles[(i / w / block) * grid_w + (i % w) / block];
    }
    let mut values = vec![DN_NODATA; BAND_COUNT * n];
    for b in 0..BAND_COUNT {
        let bc = cal.bands[b];
        let scale = bc.f0 * mu_s / std::f64::consts::PI;
        for i in 0..n {
            let base = SPECTRA[rendered[i] as usize].1[b];
            let rho = (base
                + jitter[i]
                + if cfg.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                })
            .clamp(0.001, 0.95);
            let toa = forward_model(rho, coeffs[b])?;
            let dn = ((toa * scale - bc.offset) / bc.gain)
                .round()
                .clamp(1.0, u16::MAX as f64);
            values[b * n + i] = dn as u16;
        }
    }
    let dn = BandStack::new(
        w,
        h,
        Samples::U16 {
            values,
            nodata: DN_NODATA,
        },
        geo,
        ValueKind::Dn,
    )?;

    let buildings_total = buildings.len();
    let drop = (cfg.building_sparsity * buildings_total as f64).round() as usize;
    let mut idx: Vec<usize> = (0..buildings_total).collect();
    idx.shuffle(&mut rng);
    let mut keep = vec![true; buildings_total];
    for &i in &idx[..drop] {
        keep[i] = false;
    }
    let mut full = roads.clone();
    full.extend(water.iter().cloned());
    full.extend(buildings.iter().cloned());
    let mut sparse = roads;
    sparse.extend(water);
    sparse.extend(
        buildings
            .into_iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(f, _)| f),
    );

    Ok(SynthScene {
        dn,
        meta: SceneMeta {
            calibration: cal,
            geometry: cfg.geometry,
            atmosphere: cfg.atmosphere,
        },
        lut,
        full: layer(full),
        sparse: layer(sparse),
        rendered,
        buildings_total,
        buildings_dropped: drop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            width: 256,
            height: 256,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert!(a.dn.bit_eq(&b.dn));
        assert_eq!(a.sparse, b.sparse);
        let c = generate(&SynthConfig { seed: 4, ..small() }).unwrap();
        assert!(!a.dn.bit_eq(&c.dn));
    }

    #[test]
    fn sparsity_drops_buildings_only() {
        let full = generate(&SynthConfig {
            building_sparsity: 0.0,
            ..small()
        })
        .unwrap();
        assert_eq!(full.sparse, full.full);
        let s = generate(&SynthConfig {
            building_sparsity: 0.5,
            ..small()
        })
        .unwrap();
        let count = |l: &VectorLayer, c: &str| l.of_class(c).count();
        assert!(s.buildings_total > 4);
        assert_eq!(count(&s.full, "buildings"), s.buildings_total);
        assert_eq!(
            count(&s.sparse, "buildings"),
            s.buildings_total - s.buildings_dropped
        );
        assert_eq!(
            s.buildings_dropped,
            (0.5 * s.buildings_total as f64).round() as usize
        );
        assert_eq!(count(&s.sparse, "roads"), count(&s.full, "roads"));
        assert_eq!(count(&s.sparse, "water"), count(&s.full, "water"));
        // Dropped buildings are still in the imagery.
        assert_eq!(s.rendered, full.rendered);
    }

    #[test]
    fn every_class_is_rendered() {
        let s = generate(&small()).unwrap();
        for id in 0..5u8 {
            let frac =
                s.rendered.iter().filter(|&&r| r == id).count() as f64 / s.rendered.len() as f64;
            assert!(frac > 0.01, "class {id}: {frac}");
        }
    }
}
