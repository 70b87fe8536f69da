//! Per-pixel linear classifiers trained with hand-written gradients and Adam under
//! four regimes: supervised, cross pseudo supervision (CPS), CPS with dynamic class
//! weights, and a shared-feature three-head variant (GenSSL).

mod checkpoint;
mod features;
mod model;
mod objective;
mod session;

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint};
pub use features::{raw_features, FeatureNorm, PatchFeatures, FEATURE_SPEC, NUM_FEATURES};
pub use model::{head_seed, poly_lr, AdamState, Head, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use objective::{objective, ObjectiveOutput, StepInput};
pub use session::{
    metrics_csv, predict, train, train_cps, train_cps_dyn, train_genssl, train_supervised,
    weights_csv, EpochMetrics, PatchProbs, TrainOutcome, Trainer,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ssl::{DiffBase, RampMode, SslError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training patches")]
    EmptyData,
    #[error("training patch at {0:?} has no labels")]
    MissingLabels((usize, usize)),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error("checkpoint does not match: {0}")]
    Mismatch(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Ssl(#[from] SslError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[default]
    Supervised,
    Cps,
    CpsDyn,
    Genssl,
}

impl Regime {
    pub fn heads(self) -> usize {
        match self {
            Regime::Supervised => 1,
            Regime::Cps | Regime::CpsDyn => 2,
            Regime::Genssl => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    #[default]
    None,
    Dist,
    Diff,
    DistDiff,
}

/// Loss of the single-model baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisedLoss {
    /// Plain weighted cross-entropy.
    Wce,
    /// Hausdorff-DT plus half the weighted cross-entropy, as in the CPS family.
    #[default]
    HausdorffWce,
}

/// Unit of the distances inside the Hausdorff-DT term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HdDistance {
    Pixels,
    /// Pixels divided by the patch edge, keeping the term on the scale of the
    /// cross-entropy.
    #[default]
    PatchEdge,
}

impl HdDistance {
    /// Multiplier of squared pixel distances for a patch of edge `size`.
    pub fn dist2_scale(self, size: usize) -> f64 {
        match self {
            HdDistance::Pixels => 1.0,
            HdDistance::PatchEdge => 1.0 / (size.max(1) * size.max(1)) as f64,
        }
    }
}

/// Target of the GenSSL ensemble head.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsTarget {
    /// One-hot argmax of the averaged Dist/Diff softmax.
    #[default]
    Hard,
    /// The averaged softmax itself.
    Soft,
}

/// Where a head's class weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSource {
    Static,
    Dist,
    Diff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub weighting: WeightingMode,
    pub lr: f64,
    pub poly_power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ramp_length: usize,
    pub ramp_mode: RampMode,
    /// Multiplies the ramp; 0 switches the CPS term off.
    pub lambda_scale: f64,
    pub supervised_loss: SupervisedLoss,
    /// Adds the Hausdorff-DT term to the GenSSL Dist and Diff heads.
    pub genssl_hausdorff: bool,
    pub hd_distance: HdDistance,
    pub ens_target: EnsTarget,
    pub ema_beta: f64,
    pub tau: usize,
    pub epsilon: f64,
    pub alpha_exp: f64,
    pub diff_base: DiffBase,
    pub literal_logs: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Supervised,
            weighting: WeightingMode::None,
            lr: 0.001,
            poly_power: 0.9,
            epochs: 50,
            batch_size: 4,
            ramp_length: 20,
            ramp_mode: RampMode::TotalEpochs,
            lambda_scale: 1.0,
            supervised_loss: SupervisedLoss::HausdorffWce,
            genssl_hausdorff: true,
            hd_distance: HdDistance::PatchEdge,
            ens_target: EnsTarget::Hard,
            ema_beta: 0.9,
            tau: 5,
            epsilon: 1e-8,
            alpha_exp: 1.0,
            diff_base: DiffBase::PreviousWeight,
            literal_logs: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.poly_power > 0.0) || !(self.lambda_scale >= 0.0) {
            return bad("poly_power must be > 0 and lambda_scale >= 0".into());
        }
        match (self.regime, self.weighting) {
            (Regime::Supervised, WeightingMode::None) | (Regime::Cps, WeightingMode::None) => {}
            (Regime::Supervised | Regime::Cps, w) => {
                return bad(format!("weighting {w:?} needs regime cps_dyn or genssl"));
            }
            _ => {}
        }
        crate::ssl::WeightState::new(1, self.ema_beta, self.tau, self.epsilon, self.alpha_exp)?;
        Ok(())
    }

    /// Weight source per head.
    pub fn weight_sources(&self) -> Vec<WeightSource> {
        use WeightSource::*;
        match self.regime {
            Regime::Supervised | Regime::Cps => vec![Static; self.regime.heads()],
            Regime::CpsDyn => match self.weighting {
                WeightingMode::None => vec![Static, Static],
                WeightingMode::Dist => vec![Dist, Dist],
                WeightingMode::Diff => vec![Diff, Diff],
                WeightingMode::DistDiff => vec![Dist, Diff],
            },
            // Dist head, Diff head, ensemble head (uniform weights).
            Regime::Genssl => vec![Dist, Diff, Static],
        }
    }
}
