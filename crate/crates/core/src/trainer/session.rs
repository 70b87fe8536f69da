use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{config_hash, Checkpoint};
use super::features::{FeatureNorm, PatchFeatures};
use super::model::{head_seed, mix_seed, poly_lr, AdamState, Head};
use super::objective::{objective, StepInput};
use super::{Regime, Result, SupervisedLoss, TrainConfig, TrainError, WeightSource};
use crate::chipper::Patch;
use crate::ssl::{
    argmax_targets, dist_weights, inverse_frequency_weights, rampup_with, ClassWeights, DiceSums,
    TargetDistances, TargetsBatch, WeightState, NUM_CLASSES,
};

/// Shuffling stream, kept apart from the head-initialisation streams.
const ORDER_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub loss_total: f64,
    pub loss_supervised: f64,
    pub loss_unsupervised: f64,
    /// Soft dice of the weight-tracking head (head 0 when no head uses Diff).
    pub dice: Vec<f64>,
    pub dist_weights: Vec<f64>,
    pub diff_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Per-patch class probabilities of one head (or head ensemble).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchProbs {
    pub origin: (usize, usize),
    pub size: usize,
    pub classes: usize,
    /// Class-sequential `classes * size * size`; NaN at invalid pixels.
    pub probs: Vec<f32>,
}

fn uses_hausdorff(c: &TrainConfig) -> bool {
    match c.regime {
        Regime::Supervised => c.supervised_loss == SupervisedLoss::HausdorffWce,
        Regime::Cps | Regime::CpsDyn => true,
        Regime::Genssl => c.genssl_hausdorff,
    }
}

fn label_counts(data: &[PatchFeatures]) -> Vec<u64> {
    let mut counts = vec![0u64; NUM_CLASSES];
    for x in data {
        if let Some(l) = &x.label {
            for (&id, &v) in l.iter().zip(&x.valid) {
                if v && (id as usize) < NUM_CLASSES {
                    counts[id as usize] += 1;
                }
            }
        }
    }
    counts
}

/// Stateful training loop; one call of [`Trainer::run_epoch`] per epoch.
pub struct Trainer {
    data: Vec<PatchFeatures>,
    distances: Vec<Option<TargetDistances>>,
    static_weights: ClassWeights,
    ck: Checkpoint,
}

impl Trainer {
    pub fn new(config: TrainConfig, patches: &[Patch]) -> Result<Self> {
        config.validate()?;
        let norm = FeatureNorm::fit(patches);
        let mut t = Self::prepare(&config, patches, &norm)?;
        let counts = label_counts(&t.data);
        let mut weights = WeightState::new(
            NUM_CLASSES,
            config.ema_beta,
            config.tau,
            config.epsilon,
            config.alpha_exp,
        )?;
        weights.diff_base = config.diff_base;
        weights.literal_logs = config.literal_logs;
        weights.dist_ema = dist_weights(&counts).0;
        weights.base_weights = t.static_weights.0.clone();
        let heads: Vec<Head> = (0..config.regime.heads())
            .map(|h| Head::init(head_seed(config.seed, h)))
            .collect();
        let adam = heads
            .iter()
            .map(|h| AdamState::new(h.params.len()))
            .collect();
        t.ck = Checkpoint {
            config_hash: config_hash(&config),
            feature_hash: norm.hash(),
            config,
            norm,
            epoch: 0,
            heads,
            adam,
            weights,
        };
        Ok(t)
    }

    /// Continues from `ck`; the configuration and training data must be the ones
    /// that produced it.
    pub fn resume(config: TrainConfig, patches: &[Patch], ck: Checkpoint) -> Result<Self> {
        config.validate()?;
        let hash = config_hash(&config);
        if hash != ck.config_hash {
            return Err(TrainError::Mismatch(format!(
                "config hash {hash} vs checkpoint {}",
                ck.config_hash
            )));
        }
        let refit = FeatureNorm::fit(patches).hash();
        if refit != ck.feature_hash {
            return Err(TrainError::Mismatch(
                "training data differ from the checkpoint's".into(),
            ));
        }
        let mut t = Self::prepare(&config, patches, &ck.norm)?;
        t.ck = ck;
        Ok(t)
    }

    fn prepare(config: &TrainConfig, patches: &[Patch], norm: &FeatureNorm) -> Result<Self> {
        if patches.is_empty() {
            return Err(TrainError::EmptyData);
        }
        if let Some(p) = patches.iter().find(|p| p.label.is_none()) {
            return Err(TrainError::MissingLabels(p.origin));
        }
        let data: Vec<PatchFeatures> = patches
            .iter()
            .map(|p| PatchFeatures::new(p, norm))
            .collect();
        let distances = data
            .iter()
            .map(|x| {
                uses_hausdorff(config).then(|| {
                    let t = TargetsBatch::new(1, x.size, x.size, x.label.clone().expect("checked"))
                        .expect("square");
                    TargetDistances::new(&t, &x.valid, NUM_CLASSES)
                })
            })
            .collect();
        let static_weights = inverse_frequency_weights(&label_counts(&data));
        Ok(Self {
            data,
            distances,
            static_weights,
            ck: Checkpoint {
                config: config.clone(),
                config_hash: String::new(),
                feature_hash: String::new(),
                norm: norm.clone(),
                epoch: 0,
                heads: Vec::new(),
                adam: Vec::new(),
                weights: WeightState::with_defaults(NUM_CLASSES),
            },
        })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ck
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.ck
    }

    pub fn epoch(&self) -> usize {
        self.ck.epoch
    }

    pub fn finished(&self) -> bool {
        self.ck.epoch >= self.ck.config.epochs
    }

    pub fn static_weights(&self) -> &ClassWeights {
        &self.static_weights
    }

    fn head_weights(&self, sources: &[WeightSource]) -> Vec<ClassWeights> {
        sources
            .iter()
            .enumerate()
            .map(|(h, s)| match s {
                WeightSource::Static if self.ck.config.regime == Regime::Genssl && h == 2 => {
                    ClassWeights::uniform(NUM_CLASSES)
                }
                WeightSource::Static => self.static_weights.clone(),
                WeightSource::Dist => self.ck.weights.dist(),
                WeightSource::Diff => self.ck.weights.diff(),
            })
            .collect()
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        if self.finished() {
            return Err(TrainError::Config(format!(
                "all {} epochs already run",
                self.ck.config.epochs
            )));
        }
        let cfg = self.ck.config.clone();
        let t = self.ck.epoch;
        let lr = poly_lr(cfg.lr, t, cfg.epochs, cfg.poly_power);
        let lambda = match cfg.regime {
            Regime::Cps | Regime::CpsDyn => {
                cfg.lambda_scale * rampup_with(cfg.ramp_mode, cfg.ramp_length, t, cfg.epochs)
            }
            _ => 0.0,
        };
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            cfg.seed,
            ORDER_STREAM + t as u64,
        )));
        let sources = cfg.weight_sources();
        let dist_head = sources.iter().position(|&s| s == WeightSource::Dist);
        let diff_head = sources.iter().position(|&s| s == WeightSource::Diff);
        let mut dice = vec![DiceSums::new(NUM_CLASSES); sources.len()];
        let (mut total, mut sup, mut unsup) = (0.0, 0.0, 0.0);
        let batches = order.chunks(cfg.batch_size).count();
        for chunk in order.chunks(cfg.batch_size) {
            if let Some(h) = dist_head {
                let mut counts = vec![0u64; NUM_CLASSES];
                for &i in chunk {
                    let x = &self.data[i];
                    let pred = argmax_targets(&self.ck.heads[h].forward(x));
                    for (&k, &v) in pred.iter().zip(&x.valid) {
                        if v {
                            counts[k as usize] += 1;
                        }
                    }
                }
                self.ck.weights.ema_update(&dist_weights(&counts))?;
            }
            let weights = self.head_weights(&sources);
            let batch: Vec<StepInput> = chunk
                .iter()
                .map(|&i| StepInput {
                    features: &self.data[i],
                    distances: self.distances[i].as_ref(),
                })
                .collect();
            let out = objective(
                &cfg,
                &self.ck.heads,
                &batch,
                &weights,
                lambda,
                Some(&mut dice),
            )?;
            if !out.total.is_finite() {
                return Err(TrainError::Divergence {
                    epoch: t,
                    detail: format!(
                        "loss {} (supervised {}, unsupervised {})",
                        out.total, out.supervised, out.unsupervised
                    ),
                });
            }
            for ((head, adam), g) in self
                .ck
                .heads
                .iter_mut()
                .zip(&mut self.ck.adam)
                .zip(&out.grads)
            {
                adam.update(&mut head.params, g, lr);
                if !head.is_finite() {
                    return Err(TrainError::Divergence {
                        epoch: t,
                        detail: "non-finite parameters after the update".into(),
                    });
                }
            }
            total += out.total / batches as f64;
            sup += out.supervised / batches as f64;
            unsup += out.unsupervised / batches as f64;
        }
        let dice: Vec<Vec<f64>> = dice.iter().map(|d| d.dice(cfg.epsilon)).collect();
        if let Some(h) = diff_head {
            self.ck.weights.push_dice(&dice[h])?;
            if self.ck.weights.dice_history.len() >= 2 {
                self.ck.weights.advance_diff()?;
            }
        }
        self.ck.epoch += 1;
        let metrics = EpochMetrics {
            epoch: t,
            lr,
            lambda,
            loss_total: total,
            loss_supervised: sup,
            loss_unsupervised: unsup,
            dice: dice[diff_head.unwrap_or(0)].clone(),
            dist_weights: self.ck.weights.dist_ema.clone(),
            diff_weights: self.ck.weights.base_weights.clone(),
        };
        log::info!(
            "epoch {t}: loss {:.6} (sup {:.6}, unsup {:.6}) lr {:.3e} lambda {:.4}",
            metrics.loss_total,
            metrics.loss_supervised,
            metrics.loss_unsupervised,
            lr,
            lambda
        );
        Ok(metrics)
    }
}

/// Trains every remaining epoch from scratch.
pub fn train(config: TrainConfig, patches: &[Patch]) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, patches)?;
    let mut metrics = Vec::new();
    while !trainer.finished() {
        metrics.push(trainer.run_epoch()?);
    }
    Ok(TrainOutcome {
        checkpoint: trainer.into_checkpoint(),
        metrics,
    })
}

fn train_as(regime: Regime, config: TrainConfig, patches: &[Patch]) -> Result<TrainOutcome> {
    if config.regime != regime {
        return Err(TrainError::Config(format!(
            "expected regime {regime:?}, got {:?}",
            config.regime
        )));
    }
    train(config, patches)
}

pub fn train_supervised(config: TrainConfig, patches: &[Patch]) -> Result<TrainOutcome> {
    train_as(Regime::Supervised, config, patches)
}

pub fn train_cps(config: TrainConfig, patches: &[Patch]) -> Result<TrainOutcome> {
    train_as(Regime::Cps, config, patches)
}

pub fn train_cps_dyn(config: TrainConfig, patches: &[Patch]) -> Result<TrainOutcome> {
    train_as(Regime::CpsDyn, config, patches)
}

pub fn train_genssl(config: TrainConfig, patches: &[Patch]) -> Result<TrainOutcome> {
    train_as(Regime::Genssl, config, patches)
}

/// Softmax maps per patch: the single head, the mean of both CPS models, or the
/// GenSSL ensemble head.
pub fn predict(ck: &Checkpoint, patches: &[Patch]) -> Result<Vec<PatchProbs>> {
    if ck.norm.hash() != ck.feature_hash {
        return Err(TrainError::Mismatch(
            "feature statistics do not match the checkpoint's feature hash".into(),
        ));
    }
    if ck.heads.len() != ck.config.regime.heads() {
        return Err(TrainError::Mismatch(format!(
            "{} heads for regime {:?}",
            ck.heads.len(),
            ck.config.regime
        )));
    }
    let use_heads: Vec<&Head> = match ck.config.regime {
        Regime::Supervised => vec![&ck.heads[0]],
        Regime::Cps | Regime::CpsDyn => vec![&ck.heads[0], &ck.heads[1]],
        Regime::Genssl => vec![&ck.heads[2]],
    };
    let scale = 1.0 / use_heads.len() as f64;
    Ok(patches
        .iter()
        .map(|p| {
            let x = PatchFeatures::new(p, &ck.norm);
            let n = x.pixels();
            let mut acc = vec![0.0f64; NUM_CLASSES * n];
            for h in &use_heads {
                let probs = h.forward(&x).softmax();
                for (a, v) in acc.iter_mut().zip(&probs.values) {
                    *a += scale * v;
                }
            }
            let probs = acc
                .iter()
                .enumerate()
                .map(|(j, &v)| if x.valid[j % n] { v as f32 } else { f32::NAN })
                .collect();
            PatchProbs {
                origin: p.origin,
                size: p.size,
                classes: NUM_CLASSES,
                probs,
            }
        })
        .collect())
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.9}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// One row per epoch: losses, lambda, dice and both weight vectors.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,lr,lambda,loss_total,loss_supervised,loss_unsupervised");
    for prefix in ["dice", "dist_w", "diff_w"] {
        for k in 0..NUM_CLASSES {
            let _ = write!(s, ",{prefix}_{k}");
        }
    }
    s.push('\n');
    for m in metrics {
        let _ = writeln!(
            s,
            "{},{:.9e},{:.9},{:.9},{:.9},{:.9},{},{},{}",
            m.epoch,
            m.lr,
            m.lambda,
            m.loss_total,
            m.loss_supervised,
            m.loss_unsupervised,
            join(&m.dice),
            join(&m.dist_weights),
            join(&m.diff_weights)
        );
    }
    s
}

/// Long format: `epoch,class,dist_w,diff_w,dice`.
pub fn weights_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,class,dist_w,diff_w,dice\n");
    for m in metrics {
        for k in 0..m.dice.len() {
            let _ = writeln!(
                s,
                "{},{k},{:.9},{:.9},{:.9}",
                m.epoch, m.dist_weights[k], m.diff_weights[k], m.dice[k]
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster_store::BAND_COUNT;
    use crate::trainer::WeightingMode;

    /// Two spectrally separated classes in vertical halves.
    fn separable(size: usize, shift: usize) -> Patch {
        let n = size * size;
        let mut image = vec![0.0f32; BAND_COUNT * n];
        let mut label = vec![0u8; n];
        for i in 0..n {
            let trees = (i % size + shift) % size < size / 2;
            let spec = if trees {
                [0.04, 0.08, 0.05, 0.45]
            } else {
                [0.15, 0.18, 0.22, 0.28]
            };
            for b in 0..BAND_COUNT {
                image[b * n + i] = spec[b] + 0.002 * ((i * 7 + b) % 5) as f32;
            }
            label[i] = if trees { 1 } else { 0 };
        }
        Patch {
            size,
            image,
            label: Some(label),
            origin: (0, shift),
            pad_mask: vec![false; n],
        }
    }

    fn fixture() -> Vec<Patch> {
        (0..4).map(|s| separable(8, s)).collect()
    }

    #[test]
    fn supervised_loss_decreases_and_is_deterministic() {
        let config = TrainConfig {
            epochs: 30,
            lr: 0.05,
            batch_size: 2,
            seed: 11,
            ..Default::default()
        };
        let a = train_supervised(config.clone(), &fixture()).unwrap();
        let losses: Vec<f64> = a.metrics.iter().map(|m| m.loss_total).collect();
        assert!(losses[5..].windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
        let b = train_supervised(config, &fixture()).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let config = TrainConfig {
            epochs: 3,
            lr: 0.0,
            ..Default::default()
        };
        let out = train(config.clone(), &fixture()).unwrap();
        assert_eq!(
            out.checkpoint.heads[0],
            Head::init(head_seed(config.seed, 0))
        );
    }

    #[test]
    fn prediction_recovers_trees_class() {
        let config = TrainConfig {
            epochs: 30,
            lr: 0.05,
            batch_size: 2,
            seed: 2,
            ..Default::default()
        };
        let patches = fixture();
        let out = train(config, &patches).unwrap();
        let probs = predict(&out.checkpoint, &patches).unwrap();
        let (mut tp, mut pos) = (0, 0);
        for (p, pr) in patches.iter().zip(&probs) {
            let n = p.pixels();
            for i in 0..n {
                if p.label.as_ref().unwrap()[i] == 1 {
                    pos += 1;
                    let best = (0..NUM_CLASSES)
                        .max_by(|&a, &b| pr.probs[a * n + i].total_cmp(&pr.probs[b * n + i]))
                        .unwrap();
                    tp += (best == 1) as usize;
                }
            }
        }
        assert!(tp as f64 / pos as f64 >= 0.9);
        assert_eq!(probs, predict(&out.checkpoint, &patches).unwrap());
    }

    #[test]
    fn cps_epoch_zero_has_no_cps_term_and_ramp_caps() {
        let config = TrainConfig {
            regime: Regime::Cps,
            epochs: 6,
            ramp_length: 2,
            ..Default::default()
        };
        let out = train_cps(config, &fixture()).unwrap();
        assert_eq!(out.metrics[0].lambda, 0.0);
        assert_eq!(out.metrics[5].lambda, 0.1);
        assert_ne!(out.checkpoint.heads[0], out.checkpoint.heads[1]);
    }

    #[test]
    fn cps_without_lambda_equals_two_supervised_heads() {
        let base = TrainConfig {
            epochs: 4,
            lr: 0.02,
            seed: 5,
            supervised_loss: SupervisedLoss::HausdorffWce,
            ..Default::default()
        };
        let cps = TrainConfig {
            regime: Regime::Cps,
            lambda_scale: 0.0,
            ..base.clone()
        };
        let a = train(cps, &fixture()).unwrap();
        let s = train(base, &fixture()).unwrap();
        assert_eq!(a.checkpoint.heads[0], s.checkpoint.heads[0]);
    }

    #[test]
    fn static_dyn_equals_cps() {
        let cps = TrainConfig {
            regime: Regime::Cps,
            epochs: 3,
            seed: 9,
            ..Default::default()
        };
        let dynw = TrainConfig {
            regime: Regime::CpsDyn,
            weighting: WeightingMode::None,
            ..cps.clone()
        };
        let a = train(cps, &fixture()).unwrap();
        let b = train(dynw, &fixture()).unwrap();
        assert_eq!(a.checkpoint.heads, b.checkpoint.heads);
        assert_eq!(
            a.metrics.iter().map(|m| m.loss_total).collect::<Vec<_>>(),
            b.metrics.iter().map(|m| m.loss_total).collect::<Vec<_>>()
        );
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let config = TrainConfig {
            regime: Regime::CpsDyn,
            weighting: WeightingMode::DistDiff,
            epochs: 6,
            tau: 2,
            lr: 0.01,
            ..Default::default()
        };
        let patches = fixture();
        let full = train(config.clone(), &patches).unwrap();
        let mut t = Trainer::new(config.clone(), &patches).unwrap();
        for _ in 0..3 {
            t.run_epoch().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        crate::trainer::save_checkpoint(t.checkpoint(), &path).unwrap();
        let mut t = Trainer::resume(
            config.clone(),
            &patches,
            crate::trainer::load_checkpoint(&path).unwrap(),
        )
        .unwrap();
        while !t.finished() {
            t.run_epoch().unwrap();
        }
        assert_eq!(t.into_checkpoint(), full.checkpoint);
        let other = TrainConfig { seed: 1, ..config };
        assert!(matches!(
            Trainer::resume(other, &patches, full.checkpoint),
            Err(TrainError::Mismatch(_))
        ));
    }

    #[test]
    fn genssl_trains_three_heads() {
        let config = TrainConfig {
            regime: Regime::Genssl,
            epochs: 4,
            tau: 2,
            lr: 0.02,
            ..Default::default()
        };
        let out = train_genssl(config, &fixture()).unwrap();
        assert_eq!(out.checkpoint.heads.len(), 3);
        assert!(out.metrics.iter().all(|m| m.loss_total.is_finite()));
        assert!(out.checkpoint.weights.base_weights.contains(&1.0));
        let csv = metrics_csv(&out.metrics);
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(
            weights_csv(&out.metrics).lines().count(),
            1 + 4 * NUM_CLASSES
        );
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(
            train(TrainConfig::default(), &[]),
            Err(TrainError::EmptyData)
        ));
        let mut p = fixture();
        p[1].label = None;
        assert!(matches!(
            train(TrainConfig::default(), &p),
            Err(TrainError::MissingLabels(_))
        ));
        let c = TrainConfig {
            weighting: WeightingMode::Dist,
            ..Default::default()
        };
        assert!(matches!(train(c, &fixture()), Err(TrainError::Config(_))));
        assert!(matches!(
            train_cps(TrainConfig::default(), &fixture()),
            Err(TrainError::Config(_))
        ));
    }

    #[test]
    fn predict_rejects_tampered_features() {
        let out = train(
            TrainConfig {
                epochs: 1,
                ..Default::default()
            },
            &fixture(),
        )
        .unwrap();
        let mut ck = out.checkpoint;
        ck.norm.mean[0] += 1.0;
        assert!(matches!(
            predict(&ck, &fixture()),
            Err(TrainError::Mismatch(_))
        ));
    }
}
