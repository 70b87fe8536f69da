use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use lulc_core::atmocorrect::{apply_correction, dn_to_toa, interpolate_coeffs};
use lulc_core::chipper::{chip_eval, chip_training};
use lulc_core::maskgen::{merge_masks, rasterize_lines, rasterize_polygons};
use lulc_core::postproc::merge_predictions;
use lulc_core::ssl::{euclidean_dt, ClassWeights, TargetDistances, TargetsBatch, NUM_CLASSES};
use lulc_core::synth::{generate, SynthConfig, SynthScene};
use lulc_core::trainer::{
    head_seed, objective, FeatureNorm, Head, PatchFeatures, PatchProbs, Regime, StepInput,
};
use lulc_core::{BandStack, ChipFilterPolicy, ClassEncoding, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

const SIZE: usize = 512;

fn scene() -> (SynthScene, BandStack) {
    let scene = generate(&SynthConfig {
        width: SIZE,
        height: SIZE,
        ..Default::default()
    })
    .unwrap();
    let toa = dn_to_toa(&scene.dn, &scene.meta.calibration, &scene.meta.geometry).unwrap();
    let coeffs = interpolate_coeffs(&scene.lut, &scene.meta.atmosphere).unwrap();
    let boa = apply_correction(&toa, &coeffs).unwrap().boa;
    (scene, boa)
}

fn correction(c: &mut Criterion) {
    let (scene, _) = scene();
    let toa = dn_to_toa(&scene.dn, &scene.meta.calibration, &scene.meta.geometry).unwrap();
    c.bench_function("interpolate_coeffs", |b| {
        b.iter(|| {
            interpolate_coeffs(black_box(&scene.lut), black_box(&scene.meta.atmosphere)).unwrap()
        })
    });
    let coeffs = interpolate_coeffs(&scene.lut, &scene.meta.atmosphere).unwrap();
    c.bench_function("apply_correction_512", |b| {
        b.iter(|| apply_correction(black_box(&toa), &coeffs).unwrap())
    });
}

fn rasterize(c: &mut Criterion) {
    let (scene, boa) = scene();
    let geo = &boa.geo;
    let polys = scene.full.filter_class("buildings");
    let roads = scene.full.filter_class("roads");
    c.bench_function("rasterize_polygons_512", |b| {
        b.iter(|| rasterize_polygons(black_box(&polys), geo, SIZE, SIZE))
    });
    c.bench_function("rasterize_lines_512", |b| {
        b.iter(|| rasterize_lines(black_box(&roads), geo, SIZE, SIZE, 3.0))
    });
}

fn edt(c: &mut Criterion) {
    let (scene, _) = scene();
    let mask: Vec<bool> = scene.rendered[..256 * SIZE]
        .chunks(SIZE)
        .flat_map(|row| row[..256].iter().map(|&k| k == 2))
        .collect();
    c.bench_function("euclidean_dt_256", |b| {
        b.iter(|| euclidean_dt(black_box(&mask), 256, 256))
    });
}

fn training_step(c: &mut Criterion) {
    let (scene, boa) = scene();
    let enc = ClassEncoding::default();
    let masks: Vec<(String, _)> = ["buildings", "roads", "water"]
        .iter()
        .map(|&name| {
            let layer = scene.sparse.filter_class(name);
            let m = if name == "roads" {
                rasterize_lines(&layer, &boa.geo, SIZE, SIZE, 3.0)
            } else {
                rasterize_polygons(&layer, &boa.geo, SIZE, SIZE)
            };
            (name.to_string(), m)
        })
        .collect();
    let labels = merge_masks(&masks, &enc).unwrap();
    let policy = ChipFilterPolicy {
        max_other_frac: 1.0,
        ..Default::default()
    };
    let chips = chip_training(&boa, &labels, &policy).unwrap();
    let norm = FeatureNorm::fit(&chips.patches);
    let feats: Vec<PatchFeatures> = chips
        .patches
        .iter()
        .map(|p| PatchFeatures::new(p, &norm))
        .collect();
    let dists: Vec<TargetDistances> = feats
        .iter()
        .map(|x| {
            let t = TargetsBatch::new(1, x.size, x.size, x.label.clone().unwrap()).unwrap();
            TargetDistances::new(&t, &x.valid, NUM_CLASSES)
        })
        .collect();
    let batch: Vec<StepInput> = feats
        .iter()
        .zip(&dists)
        .map(|(features, d)| StepInput {
            features,
            distances: Some(d),
        })
        .collect();
    let config = TrainConfig {
        regime: Regime::Cps,
        ..Default::default()
    };
    let heads = vec![Head::init(head_seed(1, 0)), Head::init(head_seed(1, 1))];
    let weights = vec![ClassWeights::uniform(NUM_CLASSES); 2];
    c.bench_function("cps_objective_batch", |b| {
        b.iter(|| objective(&config, black_box(&heads), &batch, &weights, 0.05, None).unwrap())
    });
    c.bench_function("head_forward_256", |b| {
        b.iter(|| heads[0].forward(black_box(&feats[0])))
    });
}

fn merge(c: &mut Criterion) {
    let (_, boa) = scene();
    let (grid, patches) = chip_eval(&boa, 128).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let probs: Vec<PatchProbs> = patches
        .iter()
        .map(|p| {
            let n = NUM_CLASSES * p.size * p.size;
            PatchProbs {
                origin: p.origin,
                size: p.size,
                classes: NUM_CLASSES,
                probs: (0..n).map(|_| rng.random()).collect(),
            }
        })
        .collect();
    c.bench_function("merge_predictions_512", |b| {
        b.iter_batched(
            || probs.clone(),
            |p| merge_predictions(&grid, &p, &boa.geo).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = correction, rasterize, edt, training_step, merge
}
criterion_main!(benches);
