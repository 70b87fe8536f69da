use serde::{Deserialize, Serialize};

use super::{ClassWeights, Result, SslError};

/// Static weights inversely proportional to class abundance, scaled to max 1.
/// Classes with no pixel get weight 1.
pub fn inverse_frequency_weights(counts: &[u64]) -> ClassWeights {
    let present: Vec<f64> = counts
        .iter()
        .map(|&n| if n > 0 { 1.0 / n as f64 } else { 0.0 })
        .collect();
    let max = present.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        log::warn!("no labelled pixel: uniform class weights");
        return ClassWeights::uniform(counts.len());
    }
    ClassWeights(
        present
            .iter()
            .map(|&w| if w > 0.0 { w / max } else { 1.0 })
            .collect(),
    )
}

/// Distribution-aware weights: `R_k = max N / max(N_k, 1)`, `w_k = ln R_k / max ln R`.
/// The most abundant class gets 0; equal or all-zero counts give uniform weights.
pub fn dist_weights(counts: &[u64]) -> ClassWeights {
    let max_n = counts.iter().copied().max().unwrap_or(0);
    if max_n == 0 {
        log::warn!("all class counts are zero: uniform distribution weights");
        return ClassWeights::uniform(counts.len());
    }
    let logs: Vec<f64> = counts
        .iter()
        .map(|&n| (max_n as f64 / n.max(1) as f64).ln())
        .collect();
    let max_log = logs.iter().copied().fold(0.0, f64::max);
    if max_log == 0.0 {
        return ClassWeights::uniform(counts.len());
    }
    ClassWeights(logs.iter().map(|l| l / max_log).collect())
}

/// What `w_lambda` multiplies by the difficulty term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffBase {
    /// The previous difficulty weights.
    #[default]
    PreviousWeight,
    /// `1 - dice` of the latest epoch.
    OneMinusDice,
}

/// Dynamic weighting state carried across epochs and checkpointed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightState {
    pub dist_ema: Vec<f64>,
    pub beta: f64,
    /// Oldest first, at most `tau + 1` epochs of per-class dice.
    pub dice_history: Vec<Vec<f64>>,
    pub tau: usize,
    pub epsilon: f64,
    pub alpha_exp: f64,
    pub base_weights: Vec<f64>,
    pub diff_base: DiffBase,
    /// Sum signed log ratios instead of their magnitudes.
    pub literal_logs: bool,
}

impl WeightState {
    pub fn new(
        classes: usize,
        beta: f64,
        tau: usize,
        epsilon: f64,
        alpha_exp: f64,
    ) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(SslError::Hyperparameter(format!(
                "beta must lie in (0, 1), got {beta}"
            )));
        }
        if tau == 0 || !(epsilon > 0.0) || !alpha_exp.is_finite() {
            return Err(SslError::Hyperparameter(format!(
                "tau {tau}, epsilon {epsilon}, alpha {alpha_exp}"
            )));
        }
        Ok(Self {
            dist_ema: vec![1.0; classes],
            beta,
            dice_history: Vec::new(),
            tau,
            epsilon,
            alpha_exp,
            base_weights: vec![1.0; classes],
            diff_base: DiffBase::default(),
            literal_logs: false,
        })
    }

    pub fn with_defaults(classes: usize) -> Self {
        Self::new(classes, 0.9, 5, 1e-8, 1.0).expect("default hyperparameters")
    }

    pub fn classes(&self) -> usize {
        self.dist_ema.len()
    }

    pub fn dist(&self) -> ClassWeights {
        ClassWeights(self.dist_ema.clone())
    }

    pub fn diff(&self) -> ClassWeights {
        ClassWeights(self.base_weights.clone())
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.classes() {
            return Err(SslError::Shape(format!(
                "{n} values for {} classes",
                self.classes()
            )));
        }
        Ok(())
    }

    /// `W <- beta W_prev + (1 - beta) W_new`.
    pub fn ema_update(&mut self, new: &ClassWeights) -> Result<()> {
        self.check_len(new.len())?;
        for (w, &n) in self.dist_ema.iter_mut().zip(new.as_slice()) {
            *w = self.beta * *w + (1.0 - self.beta) * n;
        }
        Ok(())
    }

    pub fn push_dice(&mut self, dice: &[f64]) -> Result<()> {
        self.check_len(dice.len())?;
        self.dice_history.push(dice.to_vec());
        let keep = self.tau + 1;
        if self.dice_history.len() > keep {
            self.dice_history.drain(..self.dice_history.len() - keep);
        }
        Ok(())
    }

    /// Per-class difficulty `d_k = (du_k + eps) / (dl_k + eps)` over the window.
    pub fn difficulty(&self) -> Result<Vec<f64>> {
        if self.dice_history.len() < 2 {
            return Err(SslError::InsufficientHistory(self.dice_history.len()));
        }
        let eps = self.epsilon;
        let d = (0..self.classes())
            .map(|k| {
                let (mut du, mut dl) = (0.0, 0.0);
                for pair in self.dice_history.windows(2) {
                    let prev = pair[0][k].max(eps);
                    let cur = pair[1][k].max(eps);
                    let r = (cur / prev).ln();
                    let r = if self.literal_logs { r } else { r.abs() };
                    if cur - prev <= 0.0 {
                        du += r;
                    } else {
                        dl += r;
                    }
                }
                (du + eps) / (dl + eps)
            })
            .collect();
        Ok(d)
    }

    /// Difficulty-aware weights `w_lambda * d^alpha`, scaled to max 1. Pure.
    pub fn diff_weights(&self) -> Result<ClassWeights> {
        let d = self.difficulty()?;
        let base: Vec<f64> = match self.diff_base {
            DiffBase::PreviousWeight => self.base_weights.clone(),
            DiffBase::OneMinusDice => {
                let last = self.dice_history.last().expect("history checked");
                last.iter().map(|&l| (1.0 - l).clamp(0.0, 1.0)).collect()
            }
        };
        let w: Vec<f64> = base
            .iter()
            .zip(&d)
            .map(|(&b, &dk)| {
                let v = b * dk.powf(self.alpha_exp);
                if v.is_finite() && v > 0.0 {
                    v
                } else {
                    0.0
                }
            })
            .collect();
        Ok(ClassWeights(w).normalized_to_max())
    }

    /// Computes [`Self::diff_weights`] and makes them the next base weights.
    pub fn advance_diff(&mut self) -> Result<ClassWeights> {
        let w = self.diff_weights()?;
        self.base_weights = w.0.clone();
        Ok(w)
    }
}
