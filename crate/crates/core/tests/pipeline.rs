//! Library-level chain from a synthetic scene to an evaluation report.

use lulc_core::atmocorrect::{apply_correction, dn_to_toa, interpolate_coeffs};
use lulc_core::chipper::{chip_eval, chip_training};
use lulc_core::maskgen::{merge_masks, ndvi_mask, rasterize_lines, rasterize_polygons};
use lulc_core::postproc::{evaluate, merge_predictions, threshold_all};
use lulc_core::raster_store::compute_ndvi;
use lulc_core::synth::{generate, SynthConfig};
use lulc_core::trainer::{predict, train, Regime};
use lulc_core::{ChipFilterPolicy, ClassEncoding, LabelRaster, TrainConfig, VectorLayer};

fn labels(boa: &lulc_core::BandStack, layer: &VectorLayer) -> LabelRaster {
    let (w, h, geo) = (boa.width, boa.height, &boa.geo);
    let ndvi = compute_ndvi(boa);
    let masks = vec![
        ("trees".to_string(), ndvi_mask(&ndvi, 0.3)),
        (
            "buildings".to_string(),
            rasterize_polygons(&layer.filter_class("buildings"), geo, w, h),
        ),
        (
            "roads".to_string(),
            rasterize_lines(&layer.filter_class("roads"), geo, w, h, 3.0),
        ),
        (
            "water".to_string(),
            rasterize_polygons(&layer.filter_class("water"), geo, w, h),
        ),
    ];
    merge_masks(&masks, &ClassEncoding::default()).unwrap()
}

#[test]
fn synthetic_scene_to_report() {
    let scene = generate(&SynthConfig {
        width: 256,
        height: 256,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    let toa = dn_to_toa(&scene.dn, &scene.meta.calibration, &scene.meta.geometry).unwrap();
    let coeffs = interpolate_coeffs(&scene.lut, &scene.meta.atmosphere).unwrap();
    let boa = apply_correction(&toa, &coeffs).unwrap();
    assert_eq!((boa.clamped, boa.singular), (0, 0));
    let boa = boa.boa;

    // Correction recovers the rendered surface classes: the NDVI mask matches
    // the rendered trees almost everywhere.
    let ndvi = ndvi_mask(&compute_ndvi(&boa), 0.3);
    let agree = ndvi
        .bits
        .iter()
        .zip(&scene.rendered)
        .filter(|&(&b, &r)| b == (r == 1))
        .count();
    assert!(agree as f64 / ndvi.bits.len() as f64 > 0.99);

    let sparse = labels(&boa, &scene.sparse);
    let truth = labels(&boa, &scene.full);
    let counts = |l: &LabelRaster| l.class_counts()[2];
    assert!(counts(&sparse) < counts(&truth));

    let policy = ChipFilterPolicy {
        patch_size: 128,
        max_other_frac: 0.9,
        ..Default::default()
    };
    let chips = chip_training(&boa, &sparse, &policy).unwrap();
    assert!(!chips.patches.is_empty());
    let config = TrainConfig {
        regime: Regime::Cps,
        epochs: 15,
        lr: 0.05,
        seed: 2,
        ..Default::default()
    };
    let out = train(config, &chips.patches).unwrap();
    let (grid, patches) = chip_eval(&boa, 128).unwrap();
    let probs = predict(&out.checkpoint, &patches).unwrap();
    let merged = merge_predictions(&grid, &probs, &boa.geo).unwrap();
    let report = evaluate(&threshold_all(&merged, 0.4).unwrap(), &truth).unwrap();
    for c in &report.classes {
        assert!(c.recall.unwrap() > 0.7, "{}: {:?}", c.name, c.recall);
    }
}
