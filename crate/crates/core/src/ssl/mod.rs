//! Segmentation losses and dynamic class weighting.
//!
//! All losses share the normalisation `1 / (batch * height * width)` and exclude
//! invalid (padded or nodata) pixels from their sums. Every loss has a `*_grad`
//! twin returning the analytic gradient with respect to the logits.

mod edt;
mod losses;
mod weights;

pub use edt::{euclidean_dt, squared_edt, NO_FEATURE_DISTANCE};
pub use losses::{
    argmax_targets, cps_loss, cps_loss_grad, hausdorff_dt_loss, hausdorff_dt_loss_grad, rampup,
    rampup_with, soft_dice, supervised_loss, total_loss, weighted_cross_entropy,
    weighted_cross_entropy_grad, CpsGrad, DiceSums, LossGrad, RampMode, TargetDistances,
};
pub use weights::{dist_weights, inverse_frequency_weights, DiffBase, WeightState};

use thiserror::Error;

/// Number of land-cover classes, "other" included.
pub const NUM_CLASSES: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum SslError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("difficulty weights need at least 2 epochs of dice history, have {0}")]
    InsufficientHistory(usize),
    #[error("invalid hyperparameter: {0}")]
    Hyperparameter(String),
}

pub type Result<T, E = SslError> = std::result::Result<T, E>;

/// Per-class maps for a batch: `values[((b * classes + k) * height + r) * width + c]`.
/// Holds logits, or probabilities after [`LogitsBatch::softmax`].
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBatch {
    pub batch: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// `batch * height * width`; false for padding and nodata pixels.
    pub valid: Vec<bool>,
}

impl LogitsBatch {
    pub fn new(
        batch: usize,
        classes: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let hw = height * width;
        if values.len() != batch * classes * hw || valid.len() != batch * hw {
            return Err(SslError::Shape(format!(
                "batch {batch}x{classes}x{height}x{width}: got {} values, {} validity flags",
                values.len(),
                valid.len()
            )));
        }
        Ok(Self {
            batch,
            classes,
            height,
            width,
            values,
            valid,
        })
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// `batch * height * width`, the loss normaliser.
    #[inline]
    pub fn norm(&self) -> f64 {
        (self.batch * self.pixels()) as f64
    }

    #[inline]
    pub fn index(&self, b: usize, k: usize, i: usize) -> usize {
        (b * self.classes + k) * self.pixels() + i
    }

    pub fn same_shape(&self, other: &LogitsBatch) -> bool {
        self.batch == other.batch
            && self.classes == other.classes
            && self.height == other.height
            && self.width == other.width
    }

    /// Max-subtracted softmax over the class axis.
    pub fn softmax(&self) -> LogitsBatch {
        let mut out = self.clone();
        let n = self.pixels();
        let mut z = vec![0.0; self.classes];
        for b in 0..self.batch {
            for i in 0..n {
                for k in 0..self.classes {
                    z[k] = self.values[self.index(b, k, i)];
                }
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in z.iter_mut() {
                    *v = (*v - m).exp();
                    sum += *v;
                }
                for k in 0..self.classes {
                    let idx = self.index(b, k, i);
                    out.values[idx] = z[k] / sum;
                }
            }
        }
        out
    }
}

/// Ground-truth class ids, `batch * height * width`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetsBatch {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u8>,
}

impl TargetsBatch {
    pub fn new(batch: usize, height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != batch * height * width {
            return Err(SslError::Shape(format!(
                "{batch}x{height}x{width} targets, got {} ids",
                ids.len()
            )));
        }
        Ok(Self {
            batch,
            height,
            width,
            ids,
        })
    }

    pub(crate) fn check(&self, logits: &LogitsBatch) -> Result<()> {
        if self.batch != logits.batch || self.height != logits.height || self.width != logits.width
        {
            return Err(SslError::Shape("targets and logits disagree".into()));
        }
        for (&id, &v) in self.ids.iter().zip(&logits.valid) {
            if v && id as usize >= logits.classes {
                return Err(SslError::Shape(format!(
                    "target id {id} >= {} classes",
                    logits.classes
                )));
            }
        }
        Ok(())
    }
}

/// Non-negative per-class loss weights.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0; classes])
    }

    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(SslError::Hyperparameter(format!(
                "weights must be finite and >= 0: {alpha:?}"
            )));
        }
        Ok(Self(alpha))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Scales so the largest weight is 1; all-zero weights become uniform.
    pub fn normalized_to_max(mut self) -> Self {
        let max = self.0.iter().copied().fold(0.0, f64::max);
        if max > 0.0 && max.is_finite() {
            self.0.iter_mut().for_each(|w| *w /= max);
        } else {
            self.0.iter_mut().for_each(|w| *w = 1.0);
        }
        self
    }
}
