//! Tversky index, Tversky loss with its exact analytic gradient, and the
//! Dice / Tanimoto / F-beta special cases.
//!
//! The index over soft predictions is
//!
//! ```text
//! T = (sum p0*g0 + eps) / (sum p0*g0 + alpha*sum p0*g1 + beta*sum p1*g0 + eps)
//! ```
//!
//! and the loss is 1 - T, so loss lives in [0, 1) and the empty/empty case
//! evaluates to loss 0. The gradient here is the exact derivative of this
//! expression (quotient rule, epsilon included); its correctness is owned by
//! the finite-difference suite rather than by transcription.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ConfusionCounts;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// The five (alpha, beta) penalty pairs of the standard sweep, from balanced
/// Dice weighting to a strong false-negative emphasis.
pub const PENALTY_PAIRS: [(f64, f64); 5] = [
    (0.5, 0.5),
    (0.4, 0.6),
    (0.3, 0.7),
    (0.2, 0.8),
    (0.1, 0.9),
];

/// False-positive penalty `alpha`, false-negative penalty `beta`, and the
/// smoothing term added to numerator and denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TverskyParams {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl TverskyParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let p = TverskyParams {
            alpha,
            beta,
            epsilon: DEFAULT_EPSILON,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        self.epsilon = epsilon;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::config(format!(
                "alpha and beta must be nonnegative, got ({}, {})",
                self.alpha, self.beta
            )));
        }
        if self.alpha + self.beta <= 0.0 {
            return Err(Error::config("alpha + beta must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Dice: alpha = beta = 0.5. Equal FP/FN weighting, equals the F1 score.
    pub fn dice() -> Self {
        TverskyParams {
            alpha: 0.5,
            beta: 0.5,
            epsilon: DEFAULT_EPSILON,
        }
    }

    /// Tanimoto (Jaccard): alpha = beta = 1.
    pub fn tanimoto() -> Self {
        TverskyParams {
            alpha: 1.0,
            beta: 1.0,
            epsilon: DEFAULT_EPSILON,
        }
    }

    /// F-beta weighting: alpha + beta = 1 with beta/alpha = b^2, so the index
    /// on hard counts equals the F_b score.
    pub fn f_beta(b: f64) -> Result<Self> {
        if !(b > 0.0) {
            return Err(Error::config(format!("f_beta needs b > 0, got {b}")));
        }
        let b2 = b * b;
        TverskyParams::new(1.0 / (1.0 + b2), b2 / (1.0 + b2))
    }

    /// Parses `dice`, `tanimoto`, or `f_beta(b)`.
    pub fn from_name(name: &str) -> Result<Self> {
        let name = name.trim();
        match name {
            "dice" => Ok(Self::dice()),
            "tanimoto" => Ok(Self::tanimoto()),
            _ => {
                if let Some(arg) = name
                    .strip_prefix("f_beta(")
                    .and_then(|rest| rest.strip_suffix(')'))
                {
                    let b: f64 = arg.trim().parse().map_err(|_| {
                        Error::config(format!("f_beta argument is not a number: {arg:?}"))
                    })?;
                    Self::f_beta(b)
                } else {
                    Err(Error::config(format!(
                        "unknown special case {name:?}; expected dice, tanimoto, or f_beta(b)"
                    )))
                }
            }
        }
    }
}

/// One-hot ground-truth planes: g0 marks lesion voxels, g1 non-lesion.
#[derive(Debug, Clone)]
pub struct LabelPlanes {
    g0: Tensor,
    g1: Tensor,
}

impl LabelPlanes {
    pub fn new(g0: Tensor, g1: Tensor) -> Result<Self> {
        if g0.shape() != g1.shape() {
            return Err(Error::shape_mismatch("label planes", g0.shape(), g1.shape()));
        }
        if !g0.is_binary() || !g1.is_binary() {
            return Err(Error::config("label planes must be 0/1 valued"));
        }
        for (&a, &b) in g0.iter().zip(g1.iter()) {
            if a + b != 1.0 {
                return Err(Error::config(
                    "label planes must be one-hot: g0 + g1 = 1 at every voxel",
                ));
            }
        }
        Ok(LabelPlanes { g0, g1 })
    }

    /// Builds the one-hot pair from a single binary lesion mask.
    pub fn from_mask(labels: &Tensor) -> Result<Self> {
        if !labels.is_binary() {
            return Err(Error::config("label mask must be 0/1 valued"));
        }
        let g1 = labels.map(|v| 1.0 - v);
        Ok(LabelPlanes {
            g0: labels.clone(),
            g1,
        })
    }

    pub fn g0(&self) -> &Tensor {
        &self.g0
    }

    pub fn g1(&self) -> &Tensor {
        &self.g1
    }
}

/// Per-voxel class probabilities: p0 lesion, p1 non-lesion.
#[derive(Debug, Clone)]
pub struct PredictionPlanes {
    p0: Tensor,
    p1: Tensor,
}

impl PredictionPlanes {
    /// Accepts any pair of same-shaped probability planes. The softmax
    /// invariant p0 + p1 = 1 is this type's usual provenance but is not
    /// enforced here, so the two partial derivatives stay independently
    /// probeable.
    pub fn new(p0: Tensor, p1: Tensor) -> Result<Self> {
        if p0.shape() != p1.shape() {
            return Err(Error::shape_mismatch(
                "prediction planes",
                p0.shape(),
                p1.shape(),
            ));
        }
        for plane in [&p0, &p1] {
            if plane.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::config(
                    "prediction planes must lie in [0, 1] and be finite",
                ));
            }
        }
        Ok(PredictionPlanes { p0, p1 })
    }

    /// Splits a (D, H, W, 2) softmax output into planes; channel 0 is lesion.
    pub fn from_softmax_output(p: &Tensor) -> Result<Self> {
        let s = p.shape();
        if s.len() != 4 || s[3] != 2 {
            return Err(Error::shape_mismatch(
                "softmax output",
                "(d, h, w, 2)",
                s,
            ));
        }
        let spatial = vec![s[0], s[1], s[2]];
        let mut p0 = vec![0.0; p.len() / 2];
        let mut p1 = vec![0.0; p.len() / 2];
        for (i, voxel) in p.data().chunks_exact(2).enumerate() {
            if (voxel[0] + voxel[1] - 1.0).abs() > 1e-9 {
                return Err(Error::config(
                    "softmax output channels must sum to 1 per voxel",
                ));
            }
            p0[i] = voxel[0];
            p1[i] = voxel[1];
        }
        Ok(PredictionPlanes {
            p0: Tensor::new(spatial.clone(), p0)?,
            p1: Tensor::new(spatial, p1)?,
        })
    }

    pub fn p0(&self) -> &Tensor {
        &self.p0
    }

    pub fn p1(&self) -> &Tensor {
        &self.p1
    }
}

/// Forward evaluation, keeping the individual sums for diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub loss: f64,
    pub index: f64,
    pub intersection: f64,
    pub fp_soft: f64,
    pub fn_soft: f64,
}

/// Set-form Tversky index on hard confusion counts:
/// (TP + eps) / (TP + alpha*FP + beta*FN + eps).
pub fn tversky_index_sets(counts: &ConfusionCounts, params: &TverskyParams) -> f64 {
    let tp = counts.true_pos as f64;
    let fp = counts.false_pos as f64;
    let fneg = counts.false_neg as f64;
    (tp + params.epsilon) / (tp + params.alpha * fp + params.beta * fneg + params.epsilon)
}

fn check_loss_inputs(pred: &PredictionPlanes, labels: &LabelPlanes) -> Result<()> {
    if pred.p0.shape() != labels.g0.shape() {
        return Err(Error::shape_mismatch(
            "loss planes",
            labels.g0.shape(),
            pred.p0.shape(),
        ));
    }
    if !pred.p0.all_finite() || !pred.p1.all_finite() {
        return Err(Error::NonFinite {
            context: "prediction planes".into(),
        });
    }
    Ok(())
}

/// Soft Tversky index over prediction planes and its loss, 1 - T.
pub fn tversky_loss_forward(
    pred: &PredictionPlanes,
    labels: &LabelPlanes,
    params: &TverskyParams,
) -> Result<LossTerms> {
    params.validate()?;
    check_loss_inputs(pred, labels)?;
    let mut intersection = 0.0;
    let mut fp_soft = 0.0;
    let mut fn_soft = 0.0;
    for i in 0..pred.p0.len() {
        let (p0, p1) = (pred.p0.data()[i], pred.p1.data()[i]);
        let (g0, g1) = (labels.g0.data()[i], labels.g1.data()[i]);
        intersection += p0 * g0;
        fp_soft += p0 * g1;
        fn_soft += p1 * g0;
    }
    let num = intersection + params.epsilon;
    let den = intersection + params.alpha * fp_soft + params.beta * fn_soft + params.epsilon;
    let index = num / den;
    Ok(LossTerms {
        loss: 1.0 - index,
        index,
        intersection,
        fp_soft,
        fn_soft,
    })
}

/// Exact gradient of the loss in `tversky_loss_forward` with respect to the
/// two prediction planes, treated as independent variables.
pub fn tversky_loss_backward(
    pred: &PredictionPlanes,
    labels: &LabelPlanes,
    params: &TverskyParams,
) -> Result<(Tensor, Tensor)> {
    let terms = tversky_loss_forward(pred, labels, params)?;
    let num = terms.intersection + params.epsilon;
    let den = terms.intersection
        + params.alpha * terms.fp_soft
        + params.beta * terms.fn_soft
        + params.epsilon;
    let den_sq = den * den;

    let shape = pred.p0.shape().to_vec();
    let n = pred.p0.len();
    let mut d_p0 = vec![0.0; n];
    let mut d_p1 = vec![0.0; n];
    for i in 0..n {
        let (g0, g1) = (labels.g0.data()[i], labels.g1.data()[i]);
        // dT/dp0 = (g0*den - num*(g0 + alpha*g1)) / den^2; loss = 1 - T
        d_p0[i] = -(g0 * den - num * (g0 + params.alpha * g1)) / den_sq;
        // dT/dp1 = -num*beta*g0 / den^2
        d_p1[i] = num * params.beta * g0 / den_sq;
    }
    Ok((Tensor::new(shape.clone(), d_p0)?, Tensor::new(shape, d_p1)?))
}
