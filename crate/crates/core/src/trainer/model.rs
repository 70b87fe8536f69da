use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{PatchFeatures, NUM_FEATURES};
use crate::ssl::{LogitsBatch, NUM_CLASSES};

/// Linear softmax head: `logits_k = sum_f w[k * F + f] x_f + b_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub classes: usize,
    pub features: usize,
    /// `classes * features` weights followed by `classes` biases.
    pub params: Vec<f64>,
}

/// Seed of head `index` under a master seed.
pub fn head_seed(seed: u64, index: usize) -> u64 {
    mix_seed(seed, index as u64)
}

/// Independent stream `stream` of a master seed (splitmix64 finaliser).
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Head {
    pub fn zeros(classes: usize, features: usize) -> Self {
        Self {
            classes,
            features,
            params: vec![0.0; classes * features + classes],
        }
    }

    /// Weights uniform in `+-1/sqrt(F)`, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut h = Self::zeros(NUM_CLASSES, NUM_FEATURES);
        let bound = 1.0 / (NUM_FEATURES as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut h.params[..NUM_CLASSES * NUM_FEATURES] {
            *w = rng.random_range(-bound..bound);
        }
        h
    }

    #[inline]
    pub fn weight(&self, k: usize, f: usize) -> f64 {
        self.params[k * self.features + f]
    }

    #[inline]
    pub fn bias(&self, k: usize) -> f64 {
        self.params[self.classes * self.features + k]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Logits of one patch; invalid pixels get zero logits and are flagged.
    pub fn forward(&self, x: &PatchFeatures) -> LogitsBatch {
        let n = x.pixels();
        let mut values = vec![0.0; self.classes * n];
        for k in 0..self.classes {
            let out = &mut values[k * n..(k + 1) * n];
            let b = self.bias(k);
            for (i, o) in out.iter_mut().enumerate() {
                if x.valid[i] {
                    *o = b;
                }
            }
            for f in 0..self.features {
                let w = self.weight(k, f);
                let col = &x.values[f * n..(f + 1) * n];
                for (o, &v) in out.iter_mut().zip(col) {
                    *o += w * v as f64;
                }
            }
        }
        LogitsBatch::new(1, self.classes, x.size, x.size, values, x.valid.clone())
            .expect("consistent shapes")
    }

    /// Adds `scale * dL/dparams` given `dL/dlogits` of one patch.
    pub fn backward(&self, x: &PatchFeatures, d_logits: &[f64], scale: f64, grad: &mut [f64]) {
        let n = x.pixels();
        let (kk, ff) = (self.classes, self.features);
        for k in 0..kk {
            let d = &d_logits[k * n..(k + 1) * n];
            let mut gb = 0.0;
            for (i, &di) in d.iter().enumerate() {
                if x.valid[i] {
                    gb += di;
                }
            }
            grad[kk * ff + k] += scale * gb;
            for f in 0..ff {
                let col = &x.values[f * n..(f + 1) * n];
                let mut g = 0.0;
                for (&di, &v) in d.iter().zip(col) {
                    g += di * v as f64;
                }
                grad[k * ff + f] += scale * g;
            }
        }
    }
}

/// Adam moments for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// `lr0 (1 - epoch / total)^power`.
pub fn poly_lr(lr0: f64, epoch: usize, total: usize, power: f64) -> f64 {
    let frac = (1.0 - epoch as f64 / total.max(1) as f64).max(0.0);
    lr0 * frac.powf(power)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(size: usize, vals: impl Fn(usize, usize) -> f32) -> PatchFeatures {
        let n = size * size;
        PatchFeatures {
            size,
            values: (0..NUM_FEATURES * n).map(|j| vals(j / n, j % n)).collect(),
            valid: vec![true; n],
            label: None,
            origin: (0, 0),
        }
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let x = features(2, |f, i| (f + i) as f32);
        let p = Head::zeros(NUM_CLASSES, NUM_FEATURES).forward(&x).softmax();
        assert!(p.values.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn hand_computed_logits() {
        let x = features(1, |f, _| f as f32 + 1.0);
        let mut h = Head::zeros(NUM_CLASSES, NUM_FEATURES);
        // Class 2: weights 0.5 on feature 0 and -1 on feature 8, bias 0.25.
        h.params[2 * NUM_FEATURES] = 0.5;
        h.params[2 * NUM_FEATURES + 8] = -1.0;
        h.params[NUM_CLASSES * NUM_FEATURES + 2] = 0.25;
        let l = h.forward(&x);
        assert_eq!(l.values, vec![0.0, 0.0, 0.5 - 9.0 + 0.25, 0.0, 0.0]);
    }

    #[test]
    fn permuting_rows_permutes_logits() {
        let x = features(2, |f, i| ((f * 7 + i * 3) % 5) as f32 - 2.0);
        let h = Head::init(3);
        let mut swapped = h.clone();
        let ff = NUM_FEATURES;
        for f in 0..ff {
            swapped.params.swap(f, 3 * ff + f);
        }
        swapped.params.swap(NUM_CLASSES * ff, NUM_CLASSES * ff + 3);
        let (a, b) = (h.forward(&x), swapped.forward(&x));
        assert_eq!(&a.values[..4], &b.values[12..16]);
        assert_eq!(&a.values[12..16], &b.values[..4]);
        assert_eq!(&a.values[4..12], &b.values[4..12]);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        assert_eq!(Head::init(1), Head::init(1));
        assert_ne!(Head::init(head_seed(9, 0)), Head::init(head_seed(9, 1)));
        let bound = 1.0 / (NUM_FEATURES as f64).sqrt();
        assert!(Head::init(5).params.iter().all(|p| p.abs() <= bound));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0, -1.0];
        let mut s = AdamState::new(2);
        s.update(&mut p, &[0.3, -2.0], 0.01);
        assert!((p[0] - 0.99).abs() < 1e-9 && (p[1] + 0.99).abs() < 1e-9);
        let before = p.clone();
        s.update(&mut p, &[0.3, -2.0], 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0.001, 0, 50, 0.9), 0.001);
        assert_eq!(poly_lr(0.001, 50, 50, 0.9), 0.0);
        let lrs: Vec<f64> = (0..=50).map(|e| poly_lr(0.001, e, 50, 0.9)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }
}
