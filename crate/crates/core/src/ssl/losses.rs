use super::edt::squared_edt;
use super::{ClassWeights, LogitsBatch, Result, SslError, TargetsBatch};

/// Loss value with its gradient with respect to the logits (same layout).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub d_logits: Vec<f64>,
}

fn check_weights(w: &ClassWeights, logits: &LogitsBatch) -> Result<()> {
    if w.len() != logits.classes {
        return Err(SslError::Shape(format!(
            "{} weights for {} classes",
            w.len(),
            logits.classes
        )));
    }
    Ok(())
}

/// `log(sum_k exp(z_k))` and the softmax of one pixel, written into `p`.
#[inline]
fn pixel_softmax(logits: &LogitsBatch, b: usize, i: usize, p: &mut [f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for (k, pk) in p.iter_mut().enumerate() {
        *pk = logits.values[logits.index(b, k, i)];
        m = m.max(*pk);
    }
    let mut sum = 0.0;
    for pk in p.iter_mut() {
        *pk = (*pk - m).exp();
        sum += *pk;
    }
    for pk in p.iter_mut() {
        *pk /= sum;
    }
    m + sum.ln()
}

/// Accumulates `alpha_t * (-log softmax(z)[t])` for fixed per-pixel targets into
/// `value` and, when given, its logit gradient. `scale` is applied to both.
fn accumulate_ce(
    logits: &LogitsBatch,
    target_of: impl Fn(usize, usize) -> Option<usize>,
    weights: &[f64],
    scale: f64,
    value: &mut f64,
    mut grad: Option<&mut [f64]>,
) {
    let n = logits.pixels();
    let mut p = vec![0.0; logits.classes];
    for b in 0..logits.batch {
        for i in 0..n {
            if !logits.valid[b * n + i] {
                continue;
            }
            let Some(t) = target_of(b, i) else { continue };
            let alpha = weights[t];
            if alpha == 0.0 {
                continue;
            }
            let lse = pixel_softmax(logits, b, i, &mut p);
            *value += scale * alpha * (lse - logits.values[logits.index(b, t, i)]);
            if let Some(g) = grad.as_deref_mut() {
                for (k, &pk) in p.iter().enumerate() {
                    let delta = if k == t { 1.0 } else { 0.0 };
                    g[logits.index(b, k, i)] += scale * alpha * (pk - delta);
                }
            }
        }
    }
}

/// Weighted pixel-wise cross-entropy normalised by `batch * height * width`.
pub fn weighted_cross_entropy(
    logits: &LogitsBatch,
    targets: &TargetsBatch,
    weights: &ClassWeights,
) -> Result<f64> {
    Ok(weighted_cross_entropy_grad(logits, targets, weights)?.value)
}

pub fn weighted_cross_entropy_grad(
    logits: &LogitsBatch,
    targets: &TargetsBatch,
    weights: &ClassWeights,
) -> Result<LossGrad> {
    targets.check(logits)?;
    check_weights(weights, logits)?;
    if !logits.valid.iter().any(|&v| v) {
        log::warn!("cross-entropy over a batch with no valid pixel");
    }
    let n = logits.pixels();
    let mut value = 0.0;
    let mut d_logits = vec![0.0; logits.values.len()];
    accumulate_ce(
        logits,
        |b, i| Some(targets.ids[b * n + i] as usize),
        weights.as_slice(),
        1.0 / logits.norm(),
        &mut value,
        Some(&mut d_logits),
    );
    Ok(LossGrad { value, d_logits })
}

/// Squared distance maps of every (batch item, class) target mask. Empty masks map
/// to `None` and contribute a zero distance field to the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistances {
    pub batch: usize,
    pub classes: usize,
    maps: Vec<Option<Vec<f64>>>,
}

impl TargetDistances {
    pub fn new(targets: &TargetsBatch, valid: &[bool], classes: usize) -> Self {
        let n = targets.height * targets.width;
        let mut maps = Vec::with_capacity(targets.batch * classes);
        for b in 0..targets.batch {
            let ids = &targets.ids[b * n..(b + 1) * n];
            let ok = &valid[b * n..(b + 1) * n];
            for k in 0..classes {
                let mask: Vec<bool> = ids
                    .iter()
                    .zip(ok)
                    .map(|(&id, &v)| v && id as usize == k)
                    .collect();
                maps.push(squared_edt(&mask, targets.width, targets.height));
            }
        }
        Self {
            batch: targets.batch,
            classes,
            maps,
        }
    }

    /// Distance maps of single-patch targets concatenated into one batch.
    pub fn concat(parts: &[&TargetDistances]) -> Self {
        let classes = parts.first().map_or(0, |p| p.classes);
        Self {
            batch: parts.iter().map(|p| p.batch).sum(),
            classes,
            maps: parts.iter().flat_map(|p| p.maps.iter().cloned()).collect(),
        }
    }

    fn get(&self, b: usize, k: usize) -> Option<&[f64]> {
        self.maps[b * self.classes + k].as_deref()
    }
}

/// Distance-transform Hausdorff loss:
/// `(1/N) sum_b sum_k alpha_k sum_i (p_k - y_k)^2 (dt(y_k)^2 + dt(p_k > 0.5)^2)`.
pub fn hausdorff_dt_loss(
    logits: &LogitsBatch,
    targets: &TargetsBatch,
    weights: &ClassWeights,
) -> Result<f64> {
    Ok(hausdorff_dt_loss_grad(logits, targets, None, weights, 1.0)?.value)
}

/// As [`hausdorff_dt_loss`]; `target_dt` may carry precomputed target distance maps
/// and every squared distance is multiplied by `dist2_scale`. The prediction
/// distance map is a piecewise-constant weight: no gradient flows through the 0.5
/// threshold.
pub fn hausdorff_dt_loss_grad(
    logits: &LogitsBatch,
    targets: &TargetsBatch,
    target_dt: Option<&TargetDistances>,
    weights: &ClassWeights,
    dist2_scale: f64,
) -> Result<LossGrad> {
    targets.check(logits)?;
    check_weights(weights, logits)?;
    let owned;
    let tdt = match target_dt {
        Some(t) => {
            if t.batch != logits.batch || t.classes != logits.classes {
                return Err(SslError::Shape(
                    "target distance maps disagree with logits".into(),
                ));
            }
            t
        }
        None => {
            owned = TargetDistances::new(targets, &logits.valid, logits.classes);
            &owned
        }
    };
    let probs = logits.softmax();
    let (n, kk) = (logits.pixels(), logits.classes);
    let scale = 1.0 / logits.norm();
    let mut value = 0.0;
    let mut d_logits = vec![0.0; logits.values.len()];
    // dL/dp, per (b, k, i), before the softmax Jacobian.
    let mut d_probs = vec![0.0; logits.values.len()];
    let mut pred_mask = vec![false; n];
    for b in 0..logits.batch {
        let valid = &logits.valid[b * n..(b + 1) * n];
        let ids = &targets.ids[b * n..(b + 1) * n];
        for k in 0..kk {
            let alpha = weights.0[k];
            if alpha == 0.0 {
                continue;
            }
            let base = logits.index(b, k, 0);
            for i in 0..n {
                pred_mask[i] = valid[i] && probs.values[base + i] > 0.5;
            }
            let pdt = squared_edt(&pred_mask, logits.width, logits.height);
            let ydt = tdt.get(b, k);
            for i in 0..n {
                if !valid[i] {
                    continue;
                }
                let dist =
                    dist2_scale * (ydt.map_or(0.0, |d| d[i]) + pdt.as_ref().map_or(0.0, |d| d[i]));
                if dist == 0.0 {
                    continue;
                }
                let y = if ids[i] as usize == k { 1.0 } else { 0.0 };
                let r = probs.values[base + i] - y;
                value += scale * alpha * r * r * dist;
                d_probs[base + i] = 2.0 * scale * alpha * r * dist;
            }
        }
        // Softmax Jacobian: dz_j = p_j (g_j - sum_k g_k p_k).
        for i in 0..n {
            if !valid[i] {
                continue;
            }
            let mut dot = 0.0;
            for k in 0..kk {
                let idx = logits.index(b, k, i);
                dot += d_probs[idx] * probs.values[idx];
            }
            for k in 0..kk {
                let idx = logits.index(b, k, i);
                d_logits[idx] = probs.values[idx] * (d_probs[idx] - dot);
            }
        }
    }
    Ok(LossGrad { value, d_logits })
}

/// `L_HF(l1) + L_HF(l2) + 0.5 * (L_WCE(l1) + L_WCE(l2))`.
pub fn supervised_loss(
    l1: &LogitsBatch,
    l2: &LogitsBatch,
    targets: &TargetsBatch,
    weights: &ClassWeights,
) -> Result<f64> {
    let hd = hausdorff_dt_loss(l1, targets, weights)? + hausdorff_dt_loss(l2, targets, weights)?;
    let wce = weighted_cross_entropy(l1, targets, weights)?
        + weighted_cross_entropy(l2, targets, weights)?;
    Ok(hd + 0.5 * wce)
}

/// First index of the largest logit at every pixel.
pub fn argmax_targets(logits: &LogitsBatch) -> Vec<u8> {
    let n = logits.pixels();
    let mut out = vec![0u8; logits.batch * n];
    for b in 0..logits.batch {
        for i in 0..n {
            let mut best = 0;
            let mut best_v = logits.values[logits.index(b, 0, i)];
            for k in 1..logits.classes {
                let v = logits.values[logits.index(b, k, i)];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            out[b * n + i] = best as u8;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpsGrad {
    pub value: f64,
    pub d_l1: Vec<f64>,
    pub d_l2: Vec<f64>,
}

/// Cross pseudo supervision:
/// `(1/N) sum alpha [ce(P1, onehot(argmax P2)) + ce(P2, onehot(argmax P1))]`.
pub fn cps_loss(l1: &LogitsBatch, l2: &LogitsBatch, weights: &ClassWeights) -> Result<f64> {
    Ok(cps_loss_grad(l1, l2, weights, weights)?.value)
}

/// As [`cps_loss`] with separate weights for the two directions: `w1` weighs the
/// term supervising model 1, `w2` the term supervising model 2. Pseudo-labels are
/// constants.
pub fn cps_loss_grad(
    l1: &LogitsBatch,
    l2: &LogitsBatch,
    w1: &ClassWeights,
    w2: &ClassWeights,
) -> Result<CpsGrad> {
    if !l1.same_shape(l2) || l1.valid != l2.valid {
        return Err(SslError::Shape("CPS logits disagree".into()));
    }
    check_weights(w1, l1)?;
    check_weights(w2, l2)?;
    let y1 = argmax_targets(l1);
    let y2 = argmax_targets(l2);
    let n = l1.pixels();
    let scale = 1.0 / l1.norm();
    let (mut v1, mut v2) = (0.0, 0.0);
    let mut d_l1 = vec![0.0; l1.values.len()];
    let mut d_l2 = vec![0.0; l2.values.len()];
    accumulate_ce(
        l1,
        |b, i| Some(y2[b * n + i] as usize),
        w1.as_slice(),
        scale,
        &mut v1,
        Some(&mut d_l1),
    );
    accumulate_ce(
        l2,
        |b, i| Some(y1[b * n + i] as usize),
        w2.as_slice(),
        scale,
        &mut v2,
        Some(&mut d_l2),
    );
    Ok(CpsGrad {
        value: v1 + v2,
        d_l1,
        d_l2,
    })
}

/// Which ratio drives the ramp exponent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampMode {
    /// `exp(-5 (1 - t/T)^2)` over total epochs `T`.
    #[default]
    TotalEpochs,
    /// `exp(-5 (1 - t/r)^2)` over the ramp length `r`.
    RampLength,
}

/// Sigmoid ramp of the CPS weight: 0 at t = 0, `0.1 exp(-5 (1 - t/T)^2)` for
/// `1 <= t <= r`, 0.1 afterwards.
pub fn rampup(ramp_length: usize, epoch: usize, total_epochs: usize) -> f64 {
    rampup_with(RampMode::TotalEpochs, ramp_length, epoch, total_epochs)
}

pub fn rampup_with(mode: RampMode, ramp_length: usize, epoch: usize, total_epochs: usize) -> f64 {
    if epoch == 0 {
        return 0.0;
    }
    if epoch > ramp_length {
        return 0.1;
    }
    let denom = match mode {
        RampMode::TotalEpochs => total_epochs.max(1),
        RampMode::RampLength => ramp_length.max(1),
    } as f64;
    let x = 1.0 - epoch as f64 / denom;
    0.1 * (-5.0 * x * x).exp()
}

/// `L_total = L_sup + lambda * L_cps`.
pub fn total_loss(supervised: f64, cps: f64, lambda: f64) -> f64 {
    supervised + lambda * cps
}

/// Running soft-dice sums per class over valid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceSums {
    pub intersection: Vec<f64>,
    pub prob_sum: Vec<f64>,
    pub target_sum: Vec<f64>,
}

impl DiceSums {
    pub fn new(classes: usize) -> Self {
        Self {
            intersection: vec![0.0; classes],
            prob_sum: vec![0.0; classes],
            target_sum: vec![0.0; classes],
        }
    }

    /// Adds a probability batch against integer targets.
    pub fn add(&mut self, probs: &LogitsBatch, targets: &TargetsBatch) {
        let n = probs.pixels();
        for b in 0..probs.batch {
            for i in 0..n {
                if !probs.valid[b * n + i] {
                    continue;
                }
                let t = targets.ids[b * n + i] as usize;
                for k in 0..probs.classes {
                    let p = probs.values[probs.index(b, k, i)];
                    self.prob_sum[k] += p;
                    if k == t {
                        self.intersection[k] += p;
                        self.target_sum[k] += 1.0;
                    }
                }
            }
        }
    }

    /// `(2 sum p y + eps) / (sum p + sum y + eps)` per class.
    pub fn dice(&self, eps: f64) -> Vec<f64> {
        self.intersection
            .iter()
            .zip(&self.prob_sum)
            .zip(&self.target_sum)
            .map(|((&i, &p), &y)| (2.0 * i + eps) / (p + y + eps))
            .collect()
    }
}

/// Soft dice per class of a probability batch.
pub fn soft_dice(probs: &LogitsBatch, targets: &TargetsBatch, eps: f64) -> Result<Vec<f64>> {
    targets.check(probs)?;
    let mut sums = DiceSums::new(probs.classes);
    sums.add(probs, targets);
    Ok(sums.dice(eps))
}

#[cfg(test)]
mod tests {
    use super::*;

    const K: usize = 5;

    fn batch_from(pixels: &[[f64; K]], h: usize, w: usize) -> LogitsBatch {
        let n = h * w;
        let batch = pixels.len() / n;
        let mut values = vec![0.0; batch * K * n];
        for (p, z) in pixels.iter().enumerate() {
            let (b, i) = (p / n, p % n);
            for k in 0..K {
                values[(b * K + k) * n + i] = z[k];
            }
        }
        LogitsBatch::new(batch, K, h, w, values, vec![true; batch * n]).unwrap()
    }

    fn one_hot(t: usize, margin: f64) -> [f64; K] {
        let mut z = [0.0; K];
        z[t] = margin;
        z
    }

    #[test]
    fn saturated_correct_prediction_has_no_ce() {
        let targets = TargetsBatch::new(1, 1, 3, vec![0, 2, 4]).unwrap();
        let logits = batch_from(
            &[one_hot(0, 30.0), one_hot(2, 30.0), one_hot(4, 30.0)],
            1,
            3,
        );
        let l = weighted_cross_entropy(&logits, &targets, &ClassWeights::uniform(K)).unwrap();
        assert!(l < 1e-9, "{l}");
    }

    #[test]
    fn uniform_logits_give_ln5() {
        let targets = TargetsBatch::new(2, 2, 2, vec![0, 1, 2, 3, 4, 0, 1, 2]).unwrap();
        let logits = batch_from(&[[0.0; K]; 8], 2, 2);
        let l = weighted_cross_entropy(&logits, &targets, &ClassWeights::uniform(K)).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_annihilates_and_invalid_still_normalises() {
        let targets = TargetsBatch::new(1, 1, 2, vec![1, 3]).unwrap();
        let mut logits = batch_from(&[[0.0; K]; 2], 1, 2);
        let mut w = ClassWeights::uniform(K);
        w.0[1] = 0.0;
        let l = weighted_cross_entropy(&logits, &targets, &w).unwrap();
        assert!((l - 5f64.ln() / 2.0).abs() < 1e-12);
        logits.valid[1] = false;
        assert_eq!(weighted_cross_entropy(&logits, &targets, &w).unwrap(), 0.0);
    }

    #[test]
    fn hausdorff_zero_when_exact() {
        let targets = TargetsBatch::new(1, 1, 3, vec![1, 1, 0]).unwrap();
        // Extremely saturated logits put p within rounding of y.
        let logits = batch_from(
            &[one_hot(1, 800.0), one_hot(1, 800.0), one_hot(0, 800.0)],
            1,
            3,
        );
        assert_eq!(
            hausdorff_dt_loss(&logits, &targets, &ClassWeights::uniform(K)).unwrap(),
            0.0
        );
    }

    #[test]
    fn hausdorff_single_pixel_target_by_hand() {
        // 8x8, target class 1 at (2, 3), everything else class 0, uniform p = 0.2.
        let (h, w) = (8usize, 8usize);
        let mut ids = vec![0u8; h * w];
        ids[2 * w + 3] = 1;
        let targets = TargetsBatch::new(1, h, w, ids.clone()).unwrap();
        let logits = batch_from(&vec![[0.0; K]; h * w], h, w);
        let got = hausdorff_dt_loss(&logits, &targets, &ClassWeights::uniform(K)).unwrap();
        // Prediction masks are empty (p = 0.2 < 0.5): only target distances count.
        // Class 1: dt^2 to (2,3); class 0: dt^2 to nearest other pixel (0 except (2,3),
        // whose nearest class-0 neighbour is at distance 1). Classes 2..4: empty.
        let mut sum = 0.0;
        for r in 0..h {
            for c in 0..w {
                let d1 = ((r as f64 - 2.0).powi(2) + (c as f64 - 3.0).powi(2)) * (0.2f64).powi(2);
                let is_t = r == 2 && c == 3;
                let d0 = if is_t { 1.0 * (0.2f64).powi(2) } else { 0.0 };
                sum += d1 + d0;
            }
        }
        assert!((got - sum / 64.0).abs() < 1e-12, "{got} vs {}", sum / 64.0);
    }

    #[test]
    fn hausdorff_empty_class_with_zero_prob_contributes_nothing() {
        let targets = TargetsBatch::new(1, 1, 2, vec![0, 0]).unwrap();
        let logits = batch_from(&[one_hot(0, 800.0), one_hot(0, 800.0)], 1, 2);
        assert_eq!(
            hausdorff_dt_loss(&logits, &targets, &ClassWeights::uniform(K)).unwrap(),
            0.0
        );
    }

    #[test]
    fn cps_agreement_and_symmetry() {
        let a = batch_from(&[one_hot(1, 30.0), one_hot(3, 30.0)], 1, 2);
        assert!(cps_loss(&a, &a, &ClassWeights::uniform(K)).unwrap() < 1e-9);
        let b = batch_from(&[one_hot(2, 30.0), one_hot(0, 30.0)], 1, 2);
        let w = ClassWeights::uniform(K);
        let ab = cps_loss(&a, &b, &w).unwrap();
        assert_eq!(ab, cps_loss(&b, &a, &w).unwrap());
        // Each direction costs ~ margin 30 per pixel.
        let per_dir = 30.0 + (1.0 + 4.0 * (-30f64).exp()).ln();
        assert!((ab - 2.0 * per_dir).abs() < 1e-9, "{ab}");
    }

    #[test]
    fn ramp_branches() {
        assert_eq!(rampup(30, 0, 100), 0.0);
        assert_eq!(rampup(30, 31, 100), 0.1);
        assert!((rampup(30, 10, 100) - 0.001_742_2).abs() < 1e-7);
        assert!((rampup_with(RampMode::RampLength, 30, 30, 100) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.0, 2.0, 0.0), 1.0);
        assert!((total_loss(1.0, 2.0, 0.1) - 1.2).abs() < 1e-15);
        assert!((total_loss(1.0, 2.0, rampup(5, 6, 10)) - 1.2).abs() < 1e-15);
    }

    fn probs_batch(pixels: &[[f64; K]], h: usize, w: usize) -> LogitsBatch {
        batch_from(pixels, h, w)
    }

    #[test]
    fn dice_cases() {
        let targets = TargetsBatch::new(1, 1, 4, vec![1, 1, 0, 0]).unwrap();
        let exact = probs_batch(
            &[
                one_hot(1, 1.0),
                one_hot(1, 1.0),
                one_hot(0, 1.0),
                one_hot(0, 1.0),
            ],
            1,
            4,
        );
        let d = soft_dice(&exact, &targets, 1e-8).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12);
        let disjoint = probs_batch(&[one_hot(2, 1.0); 4], 1, 4);
        let d = soft_dice(&disjoint, &targets, 1e-8).unwrap();
        assert!(d[1] < 1e-8);
        // p = 0.5 on class 1 everywhere; y covers half: (2*1 + e)/(2 + 2 + e).
        let mut half = [0.0; K];
        half[1] = 0.5;
        half[0] = 0.5;
        let d = soft_dice(&probs_batch(&[half; 4], 1, 4), &targets, 1e-8).unwrap();
        assert!((d[1] - (2.0 + 1e-8) / (4.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let logits = batch_from(&[[0.0; K]; 2], 1, 2);
        let targets = TargetsBatch::new(1, 1, 3, vec![0; 3]).unwrap();
        assert!(weighted_cross_entropy(&logits, &targets, &ClassWeights::uniform(K)).is_err());
        let targets = TargetsBatch::new(1, 1, 2, vec![0, 9]).unwrap();
        assert!(weighted_cross_entropy(&logits, &targets, &ClassWeights::uniform(K)).is_err());
        let targets = TargetsBatch::new(1, 1, 2, vec![0, 1]).unwrap();
        assert!(weighted_cross_entropy(&logits, &targets, &ClassWeights::uniform(3)).is_err());
    }
}
