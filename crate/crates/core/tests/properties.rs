use lulc_core::chipper::PatchGrid;
use lulc_core::maskgen::{rasterize_lines, Feature, Geometry, VectorLayer};
use lulc_core::postproc::{change_report, merge_predictions, threshold_mask};
use lulc_core::raster_store::{
    compute_ndvi, load_chunk, load_raster, save_raster, save_raster_chunked, Samples, ValueKind,
};
use lulc_core::ssl::{dist_weights, rampup, soft_dice, LogitsBatch, TargetsBatch};
use lulc_core::trainer::PatchProbs;
use lulc_core::{BandStack, BinaryMask, ClassEncoding, GeoTransform, ProbabilityRaster};
use proptest::prelude::*;

fn utm() -> GeoTransform {
    GeoTransform::new(300_000.0, 1_930_000.0, 2.0, 2.0, "EPSG:32644").unwrap()
}

fn f32_stack() -> impl Strategy<Value = BandStack> {
    (1usize..12, 1usize..12, 1usize..6, 1usize..6).prop_flat_map(|(w, h, cr, cc)| {
        prop::collection::vec(
            prop_oneof![9 => 0.0f32..1.5, 1 => Just(f32::NAN)],
            4 * w * h,
        )
        .prop_map(move |v| {
            BandStack::new(
                w,
                h,
                Samples::F32 {
                    values: v,
                    nodata: f32::NAN,
                },
                utm(),
                ValueKind::BoaReflectance,
            )
            .unwrap()
            .with_chunk_shape(cr, cc)
            .unwrap()
        })
    })
}

fn u16_stack() -> impl Strategy<Value = BandStack> {
    (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
        prop::collection::vec(any::<u16>(), 4 * w * h).prop_map(move |v| {
            BandStack::new(
                w,
                h,
                Samples::U16 {
                    values: v,
                    nodata: 0,
                },
                utm(),
                ValueKind::Dn,
            )
            .unwrap()
        })
    })
}

fn samples_bits(s: &Samples) -> Vec<u32> {
    match s {
        Samples::U16 { values, .. } => values.iter().map(|&v| v as u32).collect(),
        Samples::F32 { values, .. } => values.iter().map(|v| v.to_bits()).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn flat_raster_roundtrips(stack in u16_stack()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        save_raster(&stack, &path).unwrap();
        prop_assert!(load_raster(&path).unwrap().bit_eq(&stack));
    }

    #[test]
    fn chunked_raster_matches_flat(stack in f32_stack()) {
        let dir = tempfile::tempdir().unwrap();
        let (flat, chunked) = (dir.path().join("f.json"), dir.path().join("c.json"));
        save_raster(&stack, &flat).unwrap();
        save_raster_chunked(&stack, &chunked).unwrap();
        let a = load_raster(&flat).unwrap();
        let b = load_raster(&chunked).unwrap();
        prop_assert!(a.bit_eq(&b));
        prop_assert!(b.bit_eq(&stack));
        let (rows, cols) = stack.chunk_grid();
        for r in 0..rows {
            for c in 0..cols {
                let lazy = load_chunk(&chunked, r, c).unwrap();
                prop_assert_eq!(samples_bits(&lazy), samples_bits(&stack.chunk_samples(r, c)));
            }
        }
    }

    #[test]
    fn ndvi_lies_in_unit_range(stack in f32_stack()) {
        let ndvi = compute_ndvi(&stack);
        prop_assert!(ndvi.values.iter().all(|v| v.is_nan() || (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn wider_buffer_gives_superset(
        pts in prop::collection::vec((0.0f64..32.0, -32.0f64..0.0), 1..5),
        b1 in 0.0f64..4.0,
        extra in 0.0f64..4.0,
    ) {
        let layer = VectorLayer {
            features: vec![Feature {
                geometry: Geometry::LineString(pts.iter().map(|&(x, y)| [x, y]).collect()),
                class_name: "roads".into(),
            }],
            crs_id: None,
        };
        let geo = GeoTransform::identity();
        let narrow = rasterize_lines(&layer, &geo, 32, 32, b1);
        let wide = rasterize_lines(&layer, &geo, 32, 32, b1 + extra);
        prop_assert!(narrow.is_subset_of(&wide));
    }

    #[test]
    fn merged_value_dominates_every_covering_patch(
        h in 4usize..24,
        w in 4usize..24,
        stride in 1usize..=6,
        seed in any::<u64>(),
    ) {
        let size = 6;
        let grid = PatchGrid::new(h, w, size, stride).unwrap();
        let mut x = seed | 1;
        let mut next = move || {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x % 1000) as f32 / 1000.0
        };
        let patches: Vec<PatchProbs> = grid
            .origins
            .iter()
            .map(|&origin| PatchProbs { origin, size, classes: 2, probs: (0..2 * size * size).map(|_| next()).collect() })
            .collect();
        let merged = merge_predictions(&grid, &patches, &GeoTransform::identity()).unwrap();
        for p in &patches {
            for k in 0..2 {
                for r in 0..size.min(h - p.origin.0) {
                    for c in 0..size.min(w - p.origin.1) {
                        let m = merged.values[k * h * w + (p.origin.0 + r) * w + p.origin.1 + c];
                        prop_assert!(m >= p.probs[k * size * size + r * size + c]);
                    }
                }
            }
        }
        // Every pixel is covered by at least one window.
        prop_assert!(merged.values.iter().all(|v| !v.is_nan()));
    }

    #[test]
    fn lower_threshold_gives_superset(
        values in prop::collection::vec(0.0f32..=1.0, 64),
        t1 in 0.01f64..0.99,
        t2 in 0.01f64..0.99,
    ) {
        let probs = ProbabilityRaster { width: 8, height: 8, classes: 1, values, geo: GeoTransform::identity() };
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let a = threshold_mask(&probs, 0, hi).unwrap();
        let b = threshold_mask(&probs, 0, lo).unwrap();
        prop_assert!(a.is_subset_of(&b));
    }

    #[test]
    fn change_is_antisymmetric(bits1 in prop::collection::vec(any::<bool>(), 5 * 36), bits2 in prop::collection::vec(any::<bool>(), 5 * 36)) {
        let masks = |bits: &[bool]| -> Vec<BinaryMask> {
            bits.chunks(36)
                .map(|c| BinaryMask { width: 6, height: 6, bits: c.to_vec(), geo: utm() })
                .collect()
        };
        let enc = ClassEncoding::default();
        let fwd = change_report(&masks(&bits1), &masks(&bits2), &enc).unwrap();
        let back = change_report(&masks(&bits2), &masks(&bits1), &enc).unwrap();
        for (a, b) in fwd.rows.iter().zip(&back.rows) {
            prop_assert_eq!(a.delta, -b.delta);
            prop_assert_eq!(a.area_t1, b.area_t2);
        }
    }

    #[test]
    fn rampup_is_monotone_and_capped(r in 0usize..60, total in 1usize..80) {
        let mut prev = 0.0;
        for t in 0..=total + 10 {
            let v = rampup(r, t, total);
            prop_assert!((0.0..=0.1).contains(&v));
            if r <= total {
                prop_assert!(v >= prev);
            }
            prev = v;
        }
    }

    #[test]
    fn soft_dice_lies_in_unit_range(
        logits in prop::collection::vec(-5.0f64..5.0, 5 * 16),
        ids in prop::collection::vec(0u8..5, 16),
    ) {
        let l = LogitsBatch::new(1, 5, 4, 4, logits, vec![true; 16]).unwrap();
        let t = TargetsBatch::new(1, 4, 4, ids).unwrap();
        let d = soft_dice(&l.softmax(), &t, 1e-8).unwrap();
        prop_assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn dist_weights_are_normalised(counts in prop::collection::vec(0u64..100_000, 2..6)) {
        let w = dist_weights(&counts).0;
        prop_assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(w.contains(&1.0));
    }

    #[test]
    fn softmax_rows_sum_to_one(logits in prop::collection::vec(-50.0f64..50.0, 5 * 9)) {
        let p = LogitsBatch::new(1, 5, 3, 3, logits, vec![true; 9]).unwrap().softmax();
        for i in 0..9 {
            let s: f64 = (0..5).map(|k| p.values[k * 9 + i]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
