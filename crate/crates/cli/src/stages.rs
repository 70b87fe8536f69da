use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use lulc_core::atmocorrect::{
    apply_correction, dn_to_toa, interpolate_coeffs, CorrectionLut, SceneMeta,
};
use lulc_core::chipper::{
    chip_training, eval_patches, load_grid, load_training_chips, save_grid, save_training_chips,
};
use lulc_core::maskgen::{
    merge_masks, ndvi_mask, parse_geojson, rasterize_lines, rasterize_polygons, to_geojson,
};
use lulc_core::postproc::{
    change_report, evaluate, load_probabilities, merge_predictions, save_class_map,
    save_probabilities, threshold_all,
};
use lulc_core::raster_store::{
    compute_ndvi, load_labels, load_raster, read_f32_payload, save_labels, save_raster,
    save_raster_chunked, write_f32_payload,
};
use lulc_core::synth;
use lulc_core::trainer::{
    load_checkpoint, metrics_csv, predict, save_checkpoint, train, weights_csv, PatchProbs,
};
use lulc_core::{BandStack, ClassEncoding, GeoTransform, LabelRaster, PatchGrid, VectorLayer};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::manifest::{self, Manifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Ac,
    Rasterize,
    Chip,
    Train,
    Predict,
    Merge,
    Eval,
    Change,
}

impl Stage {
    /// Pipeline order.
    pub const ALL: [Stage; 9] = [
        Stage::Synth,
        Stage::Ac,
        Stage::Rasterize,
        Stage::Chip,
        Stage::Train,
        Stage::Predict,
        Stage::Merge,
        Stage::Eval,
        Stage::Change,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ac => "ac",
            Stage::Rasterize => "rasterize",
            Stage::Chip => "chip",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Merge => "merge",
            Stage::Eval => "eval",
            Stage::Change => "change",
        }
    }
}

/// Well-known artifact locations inside the workdir.
pub mod files {
    pub const BOA: &str = "ac/boa.json";
    pub const LABELS: &str = "rasterize/labels.json";
    pub const TRUTH: &str = "rasterize/truth.json";
    pub const CHIPS: &str = "chip/train";
    pub const GRID: &str = "chip/grid.json";
    pub const CHECKPOINT: &str = "train/model.ckpt";
    pub const PATCH_PROBS: &str = "predict/patches.json";
    pub const MERGED: &str = "merge/merged.json";
    pub const EVAL_CSV: &str = "eval/eval.csv";
    pub const CHANGE_CSV: &str = "change/change.csv";
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
}

fn ctx<T, E: Into<anyhow::Error>>(
    r: std::result::Result<T, E>,
    what: impl FnOnce() -> String,
) -> Result<T> {
    r.map_err(|e| CliError::Other(e.into().context(what())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    ctx(fs::write(path, text), || {
        format!("writing {}", path.display())
    })
}

fn require(path: &Path) -> Result<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(CliError::Precondition(format!(
            "missing upstream artifact {}; run the stage that produces it first",
            path.display()
        )))
    }
}

fn read_layer(path: &Path, class_key: &str) -> Result<(VectorLayer, usize)> {
    let text = ctx(fs::read_to_string(path), || {
        format!("reading {}", path.display())
    })?;
    let parsed = ctx(parse_geojson(&text, class_key), || {
        format!("parsing {}", path.display())
    })?;
    let skipped = parsed.skipped_invalid + parsed.skipped_unsupported;
    if skipped > 0 {
        log::warn!(
            "{}: skipped {skipped} features with unusable geometry",
            path.display()
        );
    }
    Ok((parsed.layer, skipped))
}

/// Inputs and parameters that determine a stage's outputs.
fn declare(cfg: &PipelineConfig, stage: Stage) -> Result<(BTreeMap<String, PathBuf>, Value)> {
    let w = |p: &str| cfg.workdir.join(p);
    let mut inputs = BTreeMap::new();
    let params = match stage {
        Stage::Synth => json!({ "synth": cfg.synth, "class_key": cfg.class_key }),
        Stage::Ac => {
            inputs.insert("scene".into(), cfg.scene_path());
            inputs.insert("scene_meta".into(), cfg.scene_meta_path());
            inputs.insert("lut".into(), cfg.lut_path());
            json!({})
        }
        Stage::Rasterize => {
            inputs.insert("boa".into(), w(files::BOA));
            inputs.insert("vectors".into(), cfg.vectors_path());
            inputs.insert("truth_vectors".into(), cfg.truth_vectors_path());
            json!({
                "encoding": cfg.encoding,
                "class_key": cfg.class_key,
                "ndvi_class": cfg.ndvi_class,
                "ndvi_threshold": cfg.ndvi_threshold,
                "road_buffer_px": cfg.road_buffer_px,
            })
        }
        Stage::Chip => {
            inputs.insert("boa".into(), w(files::BOA));
            inputs.insert("labels".into(), w(files::LABELS));
            json!({ "chip_policy": cfg.chip_policy, "eval_stride": cfg.eval_stride })
        }
        Stage::Train => {
            inputs.insert("chips".into(), w(files::CHIPS));
            json!({ "train": cfg.train })
        }
        Stage::Predict => {
            inputs.insert("checkpoint".into(), w(files::CHECKPOINT));
            inputs.insert("boa".into(), w(files::BOA));
            inputs.insert("grid".into(), w(files::GRID));
            json!({})
        }
        Stage::Merge => {
            inputs.insert("patch_probs".into(), w(files::PATCH_PROBS));
            inputs.insert("grid".into(), w(files::GRID));
            json!({ "encoding": cfg.encoding })
        }
        Stage::Eval => {
            inputs.insert("merged".into(), w(files::MERGED));
            inputs.insert("truth".into(), w(files::TRUTH));
            json!({ "threshold": cfg.threshold, "regime": cfg.train.regime })
        }
        Stage::Change => {
            inputs.insert("merged".into(), w(files::MERGED));
            if let Some(b) = &cfg.paths.baseline {
                inputs.insert("baseline".into(), b.clone());
            }
            json!({ "threshold": cfg.threshold, "encoding": cfg.encoding })
        }
    };
    Ok((inputs, params))
}

/// Runs one stage unless its manifest shows the same inputs and parameters.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage, force: bool) -> Result<StageOutcome> {
    let name = stage.name();
    let dir = cfg.stage_dir(name);
    let (paths, params) = declare(cfg, stage)?;
    let mut digests = BTreeMap::new();
    for (k, p) in &paths {
        require(p)?;
        digests.insert(k.clone(), manifest::digest(p)?);
    }
    if !force && manifest::is_fresh(&dir, name, &digests, &params) {
        log::info!("{name}: up to date");
        return Ok(StageOutcome {
            stage,
            skipped: true,
        });
    }
    if dir.exists() {
        ctx(fs::remove_dir_all(&dir), || {
            format!("clearing {}", dir.display())
        })?;
    }
    ctx(fs::create_dir_all(&dir), || {
        format!("creating {}", dir.display())
    })?;
    log::info!("{name}: running");
    let info = execute(cfg, stage, &dir, &paths)?;
    let m = Manifest {
        stage: name.into(),
        inputs: digests,
        params,
        outputs: manifest::output_digests(&dir)?,
        info,
    };
    manifest::save(&dir, &m)?;
    Ok(StageOutcome {
        stage,
        skipped: false,
    })
}

/// Runs every stage in order.
pub fn run_all(cfg: &PipelineConfig, force: bool) -> Result<Vec<StageOutcome>> {
    let synthetic = cfg.paths.scene.is_none();
    Stage::ALL
        .iter()
        .filter(|&&s| synthetic || s != Stage::Synth)
        .map(|&s| run_stage(cfg, s, force))
        .collect()
}

fn execute(
    cfg: &PipelineConfig,
    stage: Stage,
    dir: &Path,
    inputs: &BTreeMap<String, PathBuf>,
) -> Result<Value> {
    let input = |k: &str| inputs[k].as_path();
    match stage {
        Stage::Synth => run_synth(cfg, dir),
        Stage::Ac => run_ac(input("scene"), input("scene_meta"), input("lut"), dir),
        Stage::Rasterize => run_rasterize(
            cfg,
            input("boa"),
            input("vectors"),
            input("truth_vectors"),
            dir,
        ),
        Stage::Chip => run_chip(cfg, input("boa"), input("labels"), dir),
        Stage::Train => run_train(cfg, input("chips"), dir),
        Stage::Predict => run_predict(input("checkpoint"), input("boa"), input("grid"), dir),
        Stage::Merge => run_merge(&cfg.encoding, input("patch_probs"), input("grid"), dir),
        Stage::Eval => run_eval(cfg, input("merged"), input("truth"), dir),
        Stage::Change => {
            let baseline = inputs
                .get("baseline")
                .map_or(input("merged"), |p| p.as_path());
            run_change(cfg, baseline, input("merged"), dir)
        }
    }
}

fn run_synth(cfg: &PipelineConfig, dir: &Path) -> Result<Value> {
    let scene = ctx(synth::generate(&cfg.synth), || {
        "generating synthetic scene".into()
    })?;
    ctx(save_raster(&scene.dn, &dir.join("scene.json")), || {
        "saving scene".into()
    })?;
    ctx(scene.meta.save(&dir.join("scene_meta.json")), || {
        "saving scene metadata".into()
    })?;
    ctx(scene.lut.save(&dir.join("lut.json")), || {
        "saving LUT".into()
    })?;
    write(
        &dir.join("vectors_sparse.geojson"),
        &to_geojson(&scene.sparse, &cfg.class_key),
    )?;
    write(
        &dir.join("vectors_full.geojson"),
        &to_geojson(&scene.full, &cfg.class_key),
    )?;
    log::info!(
        "synth: {}x{} scene, {} of {} buildings withheld from the sparse vectors",
        scene.dn.width,
        scene.dn.height,
        scene.buildings_dropped,
        scene.buildings_total
    );
    Ok(
        json!({ "buildings_total": scene.buildings_total, "buildings_dropped": scene.buildings_dropped }),
    )
}

fn run_ac(scene: &Path, meta: &Path, lut: &Path, dir: &Path) -> Result<Value> {
    let dn = ctx(load_raster(scene), || {
        format!("loading {}", scene.display())
    })?;
    let meta = ctx(SceneMeta::load(meta), || {
        format!("loading {}", meta.display())
    })?;
    let lut = ctx(CorrectionLut::load(lut), || {
        format!("loading {}", lut.display())
    })?;
    let toa = ctx(dn_to_toa(&dn, &meta.calibration, &meta.geometry), || {
        "DN to TOA".into()
    })?;
    let coeffs = ctx(interpolate_coeffs(&lut, &meta.atmosphere), || {
        "interpolating LUT".into()
    })?;
    let out = ctx(apply_correction(&toa, &coeffs), || {
        "atmospheric correction".into()
    })?;
    if out.clamped > 0 || out.singular > 0 {
        log::warn!(
            "ac: {} samples clamped, {} singular",
            out.clamped,
            out.singular
        );
    }
    ctx(save_raster_chunked(&out.boa, &dir.join("boa.json")), || {
        "saving BOA raster".into()
    })?;
    Ok(json!({ "clamped": out.clamped, "singular": out.singular }))
}

/// Vector classes burnt in (polygons filled, lines buffered) plus the NDVI class,
/// merged with the larger id winning.
pub fn label_raster(
    boa: &BandStack,
    layer: &VectorLayer,
    enc: &ClassEncoding,
    ndvi_class: &str,
    ndvi_threshold: f64,
    road_buffer_px: f64,
) -> Result<LabelRaster> {
    let (w, h, geo) = (boa.width, boa.height, &boa.geo);
    let ndvi = compute_ndvi(boa);
    let mut masks = Vec::new();
    for name in enc
        .names()
        .iter()
        .filter(|n| *n != lulc_core::maskgen::OTHER)
    {
        let sub = layer.filter_class(name);
        let mut m = rasterize_polygons(&sub, geo, w, h);
        ctx(
            m.union_with(&rasterize_lines(&sub, geo, w, h, road_buffer_px)),
            || "line mask".into(),
        )?;
        if name == ndvi_class {
            ctx(m.union_with(&ndvi_mask(&ndvi, ndvi_threshold)), || {
                "NDVI mask".into()
            })?;
        }
        masks.push((name.clone(), m));
    }
    ctx(merge_masks(&masks, enc), || "merging class masks".into())
}

fn run_rasterize(
    cfg: &PipelineConfig,
    boa: &Path,
    vectors: &Path,
    truth: &Path,
    dir: &Path,
) -> Result<Value> {
    let boa = ctx(load_raster(boa), || format!("loading {}", boa.display()))?;
    let mut info = serde_json::Map::new();
    for (src, out) in [(vectors, "labels.json"), (truth, "truth.json")] {
        let (layer, skipped) = read_layer(src, &cfg.class_key)?;
        let labels = label_raster(
            &boa,
            &layer,
            &cfg.encoding,
            &cfg.ndvi_class,
            cfg.ndvi_threshold,
            cfg.road_buffer_px,
        )?;
        let counts = labels.class_counts();
        let palette = lulc_core::postproc::class_palette(&cfg.encoding);
        ctx(save_labels(&labels, &dir.join(out), Some(&palette)), || {
            format!("saving {out}")
        })?;
        info.insert(
            out.into(),
            json!({ "skipped_features": skipped, "class_counts": counts }),
        );
    }
    Ok(Value::Object(info))
}

fn run_chip(cfg: &PipelineConfig, boa: &Path, labels: &Path, dir: &Path) -> Result<Value> {
    let boa = ctx(load_raster(boa), || format!("loading {}", boa.display()))?;
    let labels = ctx(load_labels(labels), || {
        format!("loading {}", labels.display())
    })?;
    let chips = ctx(chip_training(&boa, &labels, &cfg.chip_policy), || {
        "chipping".into()
    })?;
    let kept = chips.patches.len();
    let total = chips.decisions.len();
    log::info!("chip: kept {kept} of {total} training tiles");
    ctx(
        save_training_chips(&chips, &boa, &labels, &dir.join("train")),
        || "saving chips".into(),
    )?;
    let grid = ctx(
        PatchGrid::new(
            boa.height,
            boa.width,
            cfg.chip_policy.patch_size,
            cfg.eval_stride,
        ),
        || "evaluation grid".into(),
    )?;
    ctx(save_grid(&grid, &dir.join("grid.json")), || {
        "saving grid".into()
    })?;
    Ok(json!({ "kept": kept, "tiles": total, "eval_patches": grid.origins.len() }))
}

fn run_train(cfg: &PipelineConfig, chips: &Path, dir: &Path) -> Result<Value> {
    let (patches, _, _) = ctx(load_training_chips(chips), || {
        format!("loading {}", chips.display())
    })?;
    let out = train(cfg.train.clone(), &patches)?;
    ctx(
        save_checkpoint(&out.checkpoint, &dir.join("model.ckpt")),
        || "saving checkpoint".into(),
    )?;
    write(&dir.join("metrics.csv"), &metrics_csv(&out.metrics))?;
    write(&dir.join("weights.csv"), &weights_csv(&out.metrics))?;
    let last = out.metrics.last().map(|m| m.loss_total);
    Ok(json!({ "patches": patches.len(), "final_loss": last }))
}

#[derive(Debug, Serialize, Deserialize)]
struct PatchProbsIndex {
    size: usize,
    classes: usize,
    geo: GeoTransform,
    origins: Vec<(usize, usize)>,
    payload: String,
}

fn run_predict(ck: &Path, boa: &Path, grid: &Path, dir: &Path) -> Result<Value> {
    let ck = ctx(load_checkpoint(ck), || format!("loading {}", ck.display()))?;
    let boa = ctx(load_raster(boa), || format!("loading {}", boa.display()))?;
    let grid = ctx(load_grid(grid), || format!("loading {}", grid.display()))?;
    let patches = eval_patches(&boa, &grid);
    let probs = predict(&ck, &patches)?;
    let classes = probs.first().map_or(0, |p| p.classes);
    let values: Vec<f32> = probs.iter().flat_map(|p| p.probs.iter().copied()).collect();
    ctx(write_f32_payload(&dir.join("patches.bin"), &values), || {
        "saving patch probabilities".into()
    })?;
    let index = PatchProbsIndex {
        size: grid.patch_size,
        classes,
        geo: boa.geo.clone(),
        origins: probs.iter().map(|p| p.origin).collect(),
        payload: "patches.bin".into(),
    };
    write(
        &dir.join("patches.json"),
        &serde_json::to_string_pretty(&index).map_err(CliError::other)?,
    )?;
    Ok(json!({ "patches": probs.len() }))
}

fn load_patch_probs(path: &Path) -> Result<(PatchProbsIndex, Vec<PatchProbs>)> {
    let text = ctx(fs::read_to_string(path), || {
        format!("reading {}", path.display())
    })?;
    let index: PatchProbsIndex = ctx(serde_json::from_str(&text), || {
        format!("parsing {}", path.display())
    })?;
    let per = index.classes * index.size * index.size;
    let payload = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&index.payload);
    let values = ctx(
        read_f32_payload(&payload, per * index.origins.len()),
        || "reading payload".into(),
    )?;
    let patches = index
        .origins
        .iter()
        .zip(values.chunks_exact(per.max(1)))
        .map(|(&origin, v)| PatchProbs {
            origin,
            size: index.size,
            classes: index.classes,
            probs: v.to_vec(),
        })
        .collect();
    Ok((index, patches))
}

fn run_merge(enc: &ClassEncoding, patch_probs: &Path, grid: &Path, dir: &Path) -> Result<Value> {
    let (index, patches) = load_patch_probs(patch_probs)?;
    let grid = ctx(load_grid(grid), || format!("loading {}", grid.display()))?;
    let merged = ctx(merge_predictions(&grid, &patches, &index.geo), || {
        "merging predictions".into()
    })?;
    ctx(
        save_probabilities(&merged, &dir.join("merged.json")),
        || "saving merged raster".into(),
    )?;
    ctx(
        save_class_map(&merged, enc, &dir.join("class_map.json")),
        || "saving class map".into(),
    )?;
    Ok(json!({ "width": merged.width, "height": merged.height }))
}

fn run_eval(cfg: &PipelineConfig, merged: &Path, truth: &Path, dir: &Path) -> Result<Value> {
    let probs = ctx(load_probabilities(merged), || {
        format!("loading {}", merged.display())
    })?;
    let truth = ctx(load_labels(truth), || {
        format!("loading {}", truth.display())
    })?;
    let masks = ctx(threshold_all(&probs, cfg.threshold), || {
        "thresholding".into()
    })?;
    let report = ctx(evaluate(&masks, &truth), || "evaluating".into())?;
    let model = serde_json::to_value(cfg.train.regime)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default();
    write(&dir.join("eval.csv"), &report.to_csv())?;
    write(&dir.join("eval.txt"), &report.to_table(&model))?;
    eprint!("{}", report.to_table(&model));
    Ok(json!({ "average_recall": report.average_recall, "miou": report.miou }))
}

fn run_change(cfg: &PipelineConfig, baseline: &Path, current: &Path, dir: &Path) -> Result<Value> {
    let load = |p: &Path| -> Result<_> {
        let probs = ctx(load_probabilities(p), || format!("loading {}", p.display()))?;
        ctx(threshold_all(&probs, cfg.threshold), || {
            "thresholding".into()
        })
    };
    let (t1, t2) = (load(baseline)?, load(current)?);
    let report = ctx(change_report(&t1, &t2, &cfg.encoding), || {
        "change report".into()
    })?;
    write(&dir.join("change.csv"), &report.to_csv())?;
    write(&dir.join("change.txt"), &report.to_table())?;
    Ok(json!({}))
}

/// Reads a stage artifact, mapping absence to a precondition error.
pub fn read_artifact(cfg: &PipelineConfig, rel: &str) -> Result<String> {
    let p = require(&cfg.workdir.join(rel))?;
    fs::read_to_string(&p)
        .with_context(|| format!("reading {}", p.display()))
        .map_err(CliError::Other)
}
