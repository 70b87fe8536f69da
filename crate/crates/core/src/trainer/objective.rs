use super::features::PatchFeatures;
use super::model::Head;
use super::{EnsTarget, HdDistance, Regime, Result, SupervisedLoss, TrainConfig, TrainError};
use crate::ssl::{
    argmax_targets, cps_loss_grad, hausdorff_dt_loss_grad, weighted_cross_entropy_grad,
    ClassWeights, DiceSums, LogitsBatch, TargetDistances, TargetsBatch,
};

/// One labelled patch of a batch, with optional cached target distance maps.
pub struct StepInput<'a> {
    pub features: &'a PatchFeatures,
    pub distances: Option<&'a TargetDistances>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutput {
    pub total: f64,
    /// Supervised part (all heads trained against labels).
    pub supervised: f64,
    /// CPS term before lambda, or the ensemble-head loss for GenSSL.
    pub unsupervised: f64,
    /// Gradient per head, laid out like [`Head::params`].
    pub grads: Vec<Vec<f64>>,
}

fn targets_of(x: &PatchFeatures) -> Result<TargetsBatch> {
    let label = x
        .label
        .as_ref()
        .ok_or(TrainError::MissingLabels(x.origin))?;
    Ok(TargetsBatch::new(1, x.size, x.size, label.clone())?)
}

fn add(acc: &mut [f64], g: &[f64], scale: f64) {
    for (a, &v) in acc.iter_mut().zip(g) {
        *a += scale * v;
    }
}

/// Hausdorff-DT plus half WCE of one head, gradient added into `d`.
fn hd_wce(
    l: &LogitsBatch,
    t: &TargetsBatch,
    dist: Option<&TargetDistances>,
    w: &ClassWeights,
    unit: HdDistance,
    d: &mut [f64],
) -> Result<f64> {
    let hd = hausdorff_dt_loss_grad(l, t, dist, w, unit.dist2_scale(l.width))?;
    let ce = weighted_cross_entropy_grad(l, t, w)?;
    add(d, &hd.d_logits, 1.0);
    add(d, &ce.d_logits, 0.5);
    Ok(hd.value + 0.5 * ce.value)
}

fn wce(l: &LogitsBatch, t: &TargetsBatch, w: &ClassWeights, d: &mut [f64]) -> Result<f64> {
    let ce = weighted_cross_entropy_grad(l, t, w)?;
    add(d, &ce.d_logits, 1.0);
    Ok(ce.value)
}

/// Cross-entropy of `l` against soft per-pixel targets `q` (same layout as the
/// logits), normalised by the pixel count.
fn soft_cross_entropy(l: &LogitsBatch, q: &LogitsBatch, d: &mut [f64]) -> f64 {
    let p = l.softmax();
    let n = l.pixels();
    let scale = 1.0 / l.norm();
    let mut value = 0.0;
    for i in (0..n).filter(|&i| l.valid[i]) {
        for k in 0..l.classes {
            let idx = l.index(0, k, i);
            let qk = q.values[idx];
            if qk > 0.0 {
                value -= scale * qk * p.values[idx].max(f64::MIN_POSITIVE).ln();
            }
            d[idx] += scale * (p.values[idx] - qk);
        }
    }
    value
}

/// Regime loss of one batch and its gradient for every head. `weights[h]` weighs
/// head `h`'s supervised and CPS terms; `lambda` scales the CPS term. When `dice`
/// is given, `dice[h]` accumulates head `h`'s soft dice before the update.
pub fn objective(
    config: &TrainConfig,
    heads: &[Head],
    batch: &[StepInput<'_>],
    weights: &[ClassWeights],
    lambda: f64,
    mut dice: Option<&mut [DiceSums]>,
) -> Result<ObjectiveOutput> {
    let nh = config.regime.heads();
    if heads.len() != nh || weights.len() != nh {
        return Err(TrainError::Config(format!(
            "{:?} needs {nh} heads and weight vectors, got {} and {}",
            config.regime,
            heads.len(),
            weights.len()
        )));
    }
    let mut grads = vec![vec![0.0; heads[0].params.len()]; nh];
    let (mut sup, mut unsup) = (0.0, 0.0);
    let scale = 1.0 / batch.len().max(1) as f64;
    for item in batch {
        let x = item.features;
        let t = targets_of(x)?;
        let logits: Vec<LogitsBatch> = heads.iter().map(|h| h.forward(x)).collect();
        if let Some(d) = dice.as_deref_mut() {
            for (sums, l) in d.iter_mut().zip(&logits) {
                sums.add(&l.softmax(), &t);
            }
        }
        let mut d: Vec<Vec<f64>> = logits.iter().map(|l| vec![0.0; l.values.len()]).collect();
        let (s, u) = match config.regime {
            Regime::Supervised => {
                let s = match config.supervised_loss {
                    SupervisedLoss::Wce => wce(&logits[0], &t, &weights[0], &mut d[0])?,
                    SupervisedLoss::HausdorffWce => hd_wce(
                        &logits[0],
                        &t,
                        item.distances,
                        &weights[0],
                        config.hd_distance,
                        &mut d[0],
                    )?,
                };
                (s, 0.0)
            }
            Regime::Cps | Regime::CpsDyn => {
                let s = hd_wce(
                    &logits[0],
                    &t,
                    item.distances,
                    &weights[0],
                    config.hd_distance,
                    &mut d[0],
                )? + hd_wce(
                    &logits[1],
                    &t,
                    item.distances,
                    &weights[1],
                    config.hd_distance,
                    &mut d[1],
                )?;
                let mut u = 0.0;
                if lambda != 0.0 {
                    let c = cps_loss_grad(&logits[0], &logits[1], &weights[0], &weights[1])?;
                    add(&mut d[0], &c.d_l1, lambda);
                    add(&mut d[1], &c.d_l2, lambda);
                    u = c.value;
                }
                (s, u)
            }
            Regime::Genssl => {
                let (d01, d2) = d.split_at_mut(2);
                let (d0, d1) = d01.split_at_mut(1);
                let s = if config.genssl_hausdorff {
                    hd_wce(
                        &logits[0],
                        &t,
                        item.distances,
                        &weights[0],
                        config.hd_distance,
                        &mut d0[0],
                    )? + hd_wce(
                        &logits[1],
                        &t,
                        item.distances,
                        &weights[1],
                        config.hd_distance,
                        &mut d1[0],
                    )?
                } else {
                    wce(&logits[0], &t, &weights[0], &mut d0[0])?
                        + wce(&logits[1], &t, &weights[1], &mut d1[0])?
                };
                let (p0, p1) = (logits[0].softmax(), logits[1].softmax());
                let mut avg = p0.clone();
                for (a, &b) in avg.values.iter_mut().zip(&p1.values) {
                    *a = 0.5 * (*a + b);
                }
                let u = match config.ens_target {
                    EnsTarget::Hard => {
                        let ens = TargetsBatch::new(1, x.size, x.size, argmax_targets(&avg))?;
                        wce(&logits[2], &ens, &weights[2], &mut d2[0])?
                    }
                    EnsTarget::Soft => soft_cross_entropy(&logits[2], &avg, &mut d2[0]),
                };
                (s, u)
            }
        };
        sup += scale * s;
        unsup += scale * u;
        for ((h, g), dl) in heads.iter().zip(grads.iter_mut()).zip(&d) {
            h.backward(x, dl, scale, g);
        }
    }
    let total = if config.regime == Regime::Genssl {
        sup + unsup
    } else {
        sup + lambda * unsup
    };
    Ok(ObjectiveOutput {
        total,
        supervised: sup,
        unsupervised: unsup,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssl::NUM_CLASSES;
    use crate::trainer::features::NUM_FEATURES;
    use crate::trainer::WeightingMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_patch(rng: &mut ChaCha8Rng, size: usize) -> PatchFeatures {
        let n = size * size;
        PatchFeatures {
            size,
            values: (0..NUM_FEATURES * n)
                .map(|_| rng.random_range(-1.5f32..1.5))
                .collect(),
            valid: (0..n).map(|i| i != 5).collect(),
            label: Some(
                (0..n)
                    .map(|_| rng.random_range(0..NUM_CLASSES as u8))
                    .collect(),
            ),
            origin: (0, 0),
        }
    }

    fn random_head(rng: &mut ChaCha8Rng) -> Head {
        let mut h = Head::zeros(NUM_CLASSES, NUM_FEATURES);
        h.params
            .iter_mut()
            .for_each(|p| *p = rng.random_range(-0.8..0.8));
        h
    }

    fn check_fd(config: &TrainConfig, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nh = config.regime.heads();
        let patches: Vec<PatchFeatures> = (0..2).map(|_| random_patch(&mut rng, 4)).collect();
        let batch: Vec<StepInput> = patches
            .iter()
            .map(|p| StepInput {
                features: p,
                distances: None,
            })
            .collect();
        let heads: Vec<Head> = (0..nh).map(|_| random_head(&mut rng)).collect();
        let weights: Vec<ClassWeights> = (0..nh)
            .map(|_| {
                ClassWeights(
                    (0..NUM_CLASSES)
                        .map(|_| rng.random_range(0.1..1.0))
                        .collect(),
                )
            })
            .collect();
        let lambda = 0.7;
        let out = objective(config, &heads, &batch, &weights, lambda, None).unwrap();
        let h = 1e-6;
        for hi in 0..nh {
            for pi in 0..heads[hi].params.len() {
                // Soft ensemble targets are detached, so the Dist/Diff heads only
                // see the supervised part through their own parameters.
                let detached = config.ens_target == EnsTarget::Soft && hi < 2;
                let eval = |delta: f64| {
                    let mut hs = heads.clone();
                    hs[hi].params[pi] += delta;
                    let o = objective(config, &hs, &batch, &weights, lambda, None).unwrap();
                    if detached {
                        o.supervised
                    } else {
                        o.total
                    }
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = out.grads[hi][pi];
                let tol = 1e-4 * fd.abs().max(an.abs()).max(1e-3);
                assert!(
                    (fd - an).abs() <= tol,
                    "{config:?} head {hi} param {pi}: fd {fd} analytic {an}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_in_every_regime() {
        let configs = [
            TrainConfig::default(),
            TrainConfig {
                supervised_loss: SupervisedLoss::HausdorffWce,
                ..Default::default()
            },
            TrainConfig {
                regime: Regime::Cps,
                ..Default::default()
            },
            TrainConfig {
                regime: Regime::CpsDyn,
                weighting: WeightingMode::DistDiff,
                ..Default::default()
            },
            TrainConfig {
                regime: Regime::Genssl,
                ..Default::default()
            },
            TrainConfig {
                regime: Regime::Genssl,
                ens_target: EnsTarget::Soft,
                genssl_hausdorff: true,
                ..Default::default()
            },
        ];
        for (i, c) in configs.iter().enumerate() {
            check_fd(c, 100 + i as u64);
        }
    }

    #[test]
    fn zero_lambda_decouples_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let config = TrainConfig {
            regime: Regime::Cps,
            ..Default::default()
        };
        let p = random_patch(&mut rng, 4);
        let batch = [StepInput {
            features: &p,
            distances: None,
        }];
        let w = vec![ClassWeights::uniform(NUM_CLASSES); 2];
        let h0 = random_head(&mut rng);
        let a = objective(
            &config,
            &[h0.clone(), random_head(&mut rng)],
            &batch,
            &w,
            0.0,
            None,
        )
        .unwrap();
        let b = objective(&config, &[h0, random_head(&mut rng)], &batch, &w, 0.0, None).unwrap();
        assert_eq!(a.grads[0], b.grads[0]);
    }

    #[test]
    fn head_count_is_checked() {
        let config = TrainConfig {
            regime: Regime::Genssl,
            ..Default::default()
        };
        let h = Head::zeros(NUM_CLASSES, NUM_FEATURES);
        assert!(objective(
            &config,
            &[h],
            &[],
            &[ClassWeights::uniform(NUM_CLASSES)],
            0.0,
            None
        )
        .is_err());
    }
}
