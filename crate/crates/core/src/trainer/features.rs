use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chipper::Patch;
use crate::raster_store::BAND_COUNT;

/// Features per pixel: four bands, NDVI, and the 3x3 box mean of each band.
pub const NUM_FEATURES: usize = 2 * BAND_COUNT + 1;

/// Identifies the feature layout; stored in checkpoints.
pub const FEATURE_SPEC: &str = "bands4+ndvi+box3x3-valid-mean/v1";

/// Per-feature standardisation fitted on training pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; NUM_FEATURES],
            std: vec![1.0; NUM_FEATURES],
        }
    }

    /// Mean and standard deviation over every valid pixel of `patches`.
    pub fn fit(patches: &[Patch]) -> Self {
        let mut sum = [0.0f64; NUM_FEATURES];
        let mut sq = [0.0f64; NUM_FEATURES];
        let mut n = 0u64;
        for p in patches {
            let (raw, valid) = raw_features(p);
            let px = p.pixels();
            for i in (0..px).filter(|&i| valid[i]) {
                for f in 0..NUM_FEATURES {
                    let v = raw[f * px + i] as f64;
                    sum[f] += v;
                    sq[f] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self::identity();
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / nf - m * m).max(0.0);
                if var.sqrt() > 1e-6 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    /// SHA-256 of the feature layout together with the fitted statistics.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(FEATURE_SPEC.as_bytes());
        for v in self.mean.iter().chain(&self.std) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Standardised features of one patch, ready for the linear heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures {
    pub size: usize,
    /// Feature-sequential, `NUM_FEATURES * size * size`; zero at invalid pixels.
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
    pub label: Option<Vec<u8>>,
    pub origin: (usize, usize),
}

impl PatchFeatures {
    pub fn new(patch: &Patch, norm: &FeatureNorm) -> Self {
        let (mut values, valid) = raw_features(patch);
        let n = patch.pixels();
        for f in 0..NUM_FEATURES {
            let (m, s) = (norm.mean[f], norm.std[f]);
            for i in 0..n {
                values[f * n + i] = if valid[i] {
                    ((values[f * n + i] as f64 - m) / s) as f32
                } else {
                    0.0
                };
            }
        }
        Self {
            size: patch.size,
            values,
            valid,
            label: patch.label.clone(),
            origin: patch.origin,
        }
    }

    pub fn pixels(&self) -> usize {
        self.size * self.size
    }
}

fn ndvi(red: f32, nir: f32) -> f32 {
    let d = nir + red;
    if d == 0.0 {
        0.0
    } else {
        (nir - red) / d
    }
}

/// Unnormalised features and the validity mask. Box means average only the valid
/// pixels of the 3x3 neighbourhood that lie inside the patch.
pub fn raw_features(patch: &Patch) -> (Vec<f32>, Vec<bool>) {
    let s = patch.size;
    let n = s * s;
    let valid = patch.valid_mask();
    let mut out = vec![0.0f32; NUM_FEATURES * n];
    for b in 0..BAND_COUNT {
        let band = &patch.image[b * n..(b + 1) * n];
        for i in (0..n).filter(|&i| valid[i]) {
            out[b * n + i] = band[i];
        }
        for r in 0..s {
            for c in 0..s {
                let i = r * s + c;
                if !valid[i] {
                    continue;
                }
                let (mut sum, mut cnt) = (0.0f32, 0u32);
                for rr in r.saturating_sub(1)..(r + 2).min(s) {
                    for cc in c.saturating_sub(1)..(c + 2).min(s) {
                        let j = rr * s + cc;
                        if valid[j] {
                            sum += band[j];
                            cnt += 1;
                        }
                    }
                }
                out[(BAND_COUNT + 1 + b) * n + i] = sum / cnt as f32;
            }
        }
    }
    for i in (0..n).filter(|&i| valid[i]) {
        out[BAND_COUNT * n + i] = ndvi(patch.image[2 * n + i], patch.image[3 * n + i]);
    }
    (out, valid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(size: usize, f: impl Fn(usize, usize) -> f32) -> Patch {
        let n = size * size;
        let image = (0..BAND_COUNT * n).map(|j| f(j / n, j % n)).collect();
        Patch {
            size,
            image,
            label: None,
            origin: (0, 0),
            pad_mask: vec![false; n],
        }
    }

    #[test]
    fn single_pixel_features() {
        let p = patch(1, |b, _| [0.1, 0.2, 0.3, 0.5][b]);
        let (f, valid) = raw_features(&p);
        assert!(valid[0]);
        assert_eq!(&f[..4], &[0.1, 0.2, 0.3, 0.5]);
        assert!((f[4] - 0.25).abs() < 1e-7);
        assert_eq!(&f[5..], &[0.1, 0.2, 0.3, 0.5]);
    }

    #[test]
    fn box_mean_skips_invalid_and_padding() {
        let mut p = patch(3, |b, i| if b == 0 { i as f32 } else { 1.0 });
        p.pad_mask[8] = true;
        p.image[4] = f32::NAN;
        let (f, valid) = raw_features(&p);
        assert!(!valid[4] && !valid[8]);
        // Centre-adjacent pixel 0 sees {0, 1, 3}.
        assert!((f[(BAND_COUNT + 1) * 9] - 4.0 / 3.0).abs() < 1e-6);
        assert_eq!(f[4], 0.0);
    }

    #[test]
    fn norm_standardises() {
        let p = patch(4, |b, i| (b * 16 + i) as f32 * 0.01);
        let norm = FeatureNorm::fit(std::slice::from_ref(&p));
        let feats = PatchFeatures::new(&p, &norm);
        for f in 0..NUM_FEATURES {
            let col = &feats.values[f * 16..(f + 1) * 16];
            let m: f64 = col.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-5, "feature {f} mean {m}");
        }
        assert_ne!(norm.hash(), FeatureNorm::identity().hash());
    }
}
