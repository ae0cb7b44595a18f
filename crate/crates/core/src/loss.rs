//! Spatially balanced training loss and its analytic gradient.
//!
//! L = L_s + Σ_heads L_d, with
//! L_s = (λ_s/2) Σ_c (ŷ_s − y_s)² and
//! L_d = (λ/2) Σ_c Σ_α (1 + λ_I · A(c)^f) (ŷ − y)².
//!
//! Sums run over cells in index order with a fixed pairwise reduction, so
//! results are reproducible bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchor::{LabelTensors, SpatialWeightMap};
use crate::tensor::{pairwise_sum, Tensor3};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("head {0} is missing (zero channels)")]
    MissingHead(&'static str),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_static: f64,
    pub lambda_iou: f64,
    pub lambda_dw: f64,
    pub lambda_dl: f64,
    pub lambda_dphi: f64,
    /// λ_I: extra weight on foreground cells.
    pub foreground_gain: f64,
    pub focus_iou: f64,
    pub focus_dw: f64,
    pub focus_dl: f64,
    pub focus_dphi: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_static: 0.5,
            lambda_iou: 1.0,
            lambda_dw: 0.01,
            lambda_dl: 0.05,
            lambda_dphi: 0.25,
            foreground_gain: 400.0,
            focus_iou: 4.0,
            focus_dw: 1.0,
            focus_dl: 1.0,
            focus_dphi: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [
            self.lambda_static,
            self.lambda_iou,
            self.lambda_dw,
            self.lambda_dl,
            self.lambda_dphi,
            self.foreground_gain,
            self.focus_iou,
            self.focus_dw,
            self.focus_dl,
            self.focus_dphi,
        ];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(LossError::InvalidConfig("weights, gain and focus must be finite and ≥ 0".into()))
        }
    }

    /// (name, λ, f) of the four detection heads in container order.
    fn dynamic_heads(&self) -> [(&'static str, f64, f64); 4] {
        [
            ("iou", self.lambda_iou, self.focus_iou),
            ("d_width", self.lambda_dw, self.focus_dw),
            ("d_length", self.lambda_dl, self.focus_dl),
            ("d_orient", self.lambda_dphi, self.focus_dphi),
        ]
    }
}

/// Per-cell weight 1 + λ_I · a^f, with 0^0 = 1.
#[inline]
pub fn cell_weight(a: f64, foreground_gain: f64, focus: f64) -> f64 {
    let p = if focus == 0.0 { 1.0 } else { a.powf(focus) };
    1.0 + foreground_gain * p
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub static_term: f64,
    pub iou: f64,
    pub d_width: f64,
    pub d_length: f64,
    pub d_orient: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.static_term + self.iou + self.d_width + self.d_length + self.d_orient
    }
}

fn check_same(name: &str, pred: &Tensor3<f64>, label: &Tensor3<f64>) -> Result<(), LossError> {
    if pred.same_shape(label) {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch(format!(
            "{name}: prediction {:?} vs label {:?}",
            pred.shape(),
            label.shape()
        )))
    }
}

fn check_map(name: &str, t: &Tensor3<f64>, a: &SpatialWeightMap) -> Result<(), LossError> {
    if t.cell_count() == a.a.len() {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch(format!(
            "{name}: {} cells vs weight map of {}",
            t.cell_count(),
            a.a.len()
        )))
    }
}

/// (λ_s/2) Σ_c (ŷ_s(c) − y_s(c))².
pub fn static_loss(pred: &[f64], label: &[f64], lambda_static: f64) -> Result<f64, LossError> {
    if pred.len() != label.len() {
        return Err(LossError::ShapeMismatch(format!(
            "static map: prediction {} vs label {}",
            pred.len(),
            label.len()
        )));
    }
    let sq: Vec<f64> = pred.iter().zip(label).map(|(p, y)| (p - y) * (p - y)).collect();
    Ok(0.5 * lambda_static * pairwise_sum(&sq))
}

/// (λ/2) Σ_c Σ_α (1 + λ_I · a(c)^f) (ŷ(c,α) − y(c,α))².
pub fn dynamic_loss_term(
    pred: &Tensor3<f64>,
    label: &Tensor3<f64>,
    a_map: &SpatialWeightMap,
    lambda: f64,
    foreground_gain: f64,
    focus: f64,
) -> Result<f64, LossError> {
    check_same("dynamic head", pred, label)?;
    check_map("dynamic head", pred, a_map)?;
    let per_cell: Vec<f64> = (0..pred.cell_count())
        .map(|c| {
            let sq: f64 = pred
                .cell(c)
                .iter()
                .zip(label.cell(c))
                .map(|(p, y)| (p - y) * (p - y))
                .sum();
            cell_weight(a_map.a[c], foreground_gain, focus) * sq
        })
        .collect();
    Ok(0.5 * lambda * pairwise_sum(&per_cell))
}

fn check_heads(preds: &LabelTensors, labels: &LabelTensors, a_map: &SpatialWeightMap) -> Result<(), LossError> {
    const NAMES: [&str; 5] = ["iou", "d_width", "d_length", "d_orient", "static_map"];
    for ((name, p), y) in NAMES.iter().zip(preds.heads()).zip(labels.heads()) {
        if p.channels() == 0 || y.channels() == 0 {
            return Err(LossError::MissingHead(name));
        }
        check_same(name, p, y)?;
        check_map(name, p, a_map)?;
    }
    Ok(())
}

/// Total loss and its per-head breakdown.
pub fn total_loss(
    preds: &LabelTensors,
    labels: &LabelTensors,
    a_map: &SpatialWeightMap,
    cfg: &LossConfig,
) -> Result<(f64, LossBreakdown), LossError> {
    cfg.validate()?;
    check_heads(preds, labels, a_map)?;
    let static_term = static_loss(
        preds.static_map.as_slice(),
        labels.static_map.as_slice(),
        cfg.lambda_static,
    )?;
    let p = preds.heads();
    let y = labels.heads();
    let mut terms = [0.0; 4];
    for (i, (_, lambda, focus)) in cfg.dynamic_heads().into_iter().enumerate() {
        terms[i] = dynamic_loss_term(p[i], y[i], a_map, lambda, cfg.foreground_gain, focus)?;
    }
    let b = LossBreakdown {
        static_term,
        iou: terms[0],
        d_width: terms[1],
        d_length: terms[2],
        d_orient: terms[3],
    };
    Ok((b.total(), b))
}

/// ∂L/∂ŷ for every prediction, in the shape of the predictions.
pub fn loss_gradient(
    preds: &LabelTensors,
    labels: &LabelTensors,
    a_map: &SpatialWeightMap,
    cfg: &LossConfig,
) -> Result<LabelTensors, LossError> {
    cfg.validate()?;
    check_heads(preds, labels, a_map)?;
    let mut grad = preds.clone();
    let y = labels.heads();
    let p = preds.heads();
    let heads = cfg.dynamic_heads();
    for (i, g) in grad.heads_mut().into_iter().enumerate() {
        let scale = |c: usize| match heads.get(i) {
            Some(&(_, lambda, focus)) => lambda * cell_weight(a_map.a[c], cfg.foreground_gain, focus),
            None => cfg.lambda_static,
        };
        for c in 0..g.cell_count() {
            let w = scale(c);
            for (k, out) in g.cell_mut(c).iter_mut().enumerate() {
                *out = w * (p[i].get(c, k) - y[i].get(c, k));
            }
        }
    }
    Ok(grad)
}
