use std::fs;
use std::path::{Path, PathBuf};

use lulc_core::synth::SynthConfig;
use lulc_core::{ChipFilterPolicy, ClassEncoding, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

/// External inputs. Unset entries fall back to the `synth` stage outputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    /// DN raster header.
    pub scene: Option<PathBuf>,
    /// Calibration, geometry and atmosphere sidecar.
    pub scene_meta: Option<PathBuf>,
    pub lut: Option<PathBuf>,
    /// Training vectors, possibly incomplete.
    pub vectors: Option<PathBuf>,
    /// Evaluation vectors. Defaults to the full synthetic layer, or to `vectors`
    /// when a real scene is configured.
    pub truth_vectors: Option<PathBuf>,
    /// Merged probability raster of the earlier date for `change`.
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub workdir: PathBuf,
    pub paths: InputPaths,
    pub encoding: ClassEncoding,
    /// GeoJSON property holding the class name.
    pub class_key: String,
    /// Class labelled from NDVI instead of vectors.
    pub ndvi_class: String,
    pub ndvi_threshold: f64,
    pub road_buffer_px: f64,
    pub chip_policy: ChipFilterPolicy,
    pub train: TrainConfig,
    pub eval_stride: usize,
    pub threshold: f64,
    /// Overrides both the synthetic scene seed and the training seed.
    pub seed: Option<u64>,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("work"),
            paths: InputPaths::default(),
            encoding: ClassEncoding::default(),
            class_key: "class".into(),
            ndvi_class: "trees".into(),
            ndvi_threshold: 0.3,
            road_buffer_px: 3.0,
            chip_policy: ChipFilterPolicy::default(),
            train: TrainConfig::default(),
            eval_stride: 128,
            threshold: 0.4,
            seed: None,
            synth: SynthConfig::default(),
        }
    }
}

/// Sets `a.b.c = value` in a JSON object tree, creating objects on the way.
fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            CliError::Precondition(format!("`{key}`: `{part}` is not inside an object"))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Parses a `key=value` override. Values that are not valid JSON are taken as strings.
pub fn parse_override(arg: &str) -> Result<(String, Value), CliError> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Precondition(format!("override `{arg}` is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl PipelineConfig {
    /// Reads a JSON config, applies overrides, and resolves relative paths against
    /// the config file's directory.
    pub fn load(path: &Path, overrides: &[(String, Value)]) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Precondition(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut root: Value = serde_json::from_str(&text).map_err(|e| {
            CliError::Precondition(format!("config {} is not valid JSON: {e}", path.display()))
        })?;
        for (k, v) in overrides {
            set_path(&mut root, k, v.clone())?;
        }
        let mut cfg: PipelineConfig = serde_json::from_value(root)
            .map_err(|e| CliError::Precondition(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_relative(base);
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.workdir);
        let paths = &mut self.paths;
        for p in [
            &mut paths.scene,
            &mut paths.scene_meta,
            &mut paths.lut,
            &mut paths.vectors,
            &mut paths.truth_vectors,
            &mut paths.baseline,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.synth.seed = s;
            self.train.seed = s;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Precondition(m));
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        if self.road_buffer_px.is_nan() || self.road_buffer_px < 0.0 {
            return bad("road_buffer_px must be >= 0".into());
        }
        if self.encoding.id(&self.ndvi_class).is_none() {
            return bad(format!(
                "ndvi_class `{}` is not in the encoding",
                self.ndvi_class
            ));
        }
        if self.eval_stride == 0 || self.eval_stride > self.chip_policy.patch_size {
            return bad(format!(
                "eval_stride must lie in 1..={}",
                self.chip_policy.patch_size
            ));
        }
        self.chip_policy
            .validate()
            .map_err(|e| CliError::Precondition(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| CliError::Precondition(e.to_string()))?;
        Ok(())
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.workdir.join(stage)
    }

    fn synth_or(&self, p: &Option<PathBuf>, file: &str) -> PathBuf {
        p.clone()
            .unwrap_or_else(|| self.stage_dir("synth").join(file))
    }

    pub fn scene_path(&self) -> PathBuf {
        self.synth_or(&self.paths.scene, "scene.json")
    }

    pub fn scene_meta_path(&self) -> PathBuf {
        self.synth_or(&self.paths.scene_meta, "scene_meta.json")
    }

    pub fn lut_path(&self) -> PathBuf {
        self.synth_or(&self.paths.lut, "lut.json")
    }

    pub fn vectors_path(&self) -> PathBuf {
        self.synth_or(&self.paths.vectors, "vectors_sparse.geojson")
    }

    pub fn truth_vectors_path(&self) -> PathBuf {
        match (&self.paths.truth_vectors, &self.paths.scene) {
            (Some(p), _) => p.clone(),
            (None, Some(_)) => self.vectors_path(),
            (None, None) => self.stage_dir("synth").join("vectors_full.geojson"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"workdir": "w", "train": {"epochs": 3}}"#).unwrap();
        let ov = vec![
            parse_override("train.lr=0.5").unwrap(),
            parse_override("seed=9").unwrap(),
        ];
        let cfg = PipelineConfig::load(&path, &ov).unwrap();
        assert_eq!(cfg.workdir, dir.path().join("w"));
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!((cfg.train.seed, cfg.synth.seed), (9, 9));
        assert_eq!(cfg.scene_path(), dir.path().join("w/synth/scene.json"));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"wrkdir": "w"}"#).unwrap();
        assert!(matches!(
            PipelineConfig::load(&path, &[]),
            Err(CliError::Precondition(_))
        ));
        fs::write(&path, r#"{"threshold": 1.5}"#).unwrap();
        assert!(matches!(
            PipelineConfig::load(&path, &[]),
            Err(CliError::Precondition(_))
        ));
    }

    #[test]
    fn override_values_fall_back_to_strings() {
        assert_eq!(
            parse_override("a.b=cps").unwrap().1,
            Value::String("cps".into())
        );
        assert_eq!(parse_override("a=3").unwrap().1, Value::from(3));
        assert!(parse_override("novalue").is_err());
    }
}
