//! Task-head data types and decoding of raw head outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential::{constrain_raw_to_nig, nig_uncertainties, sigmoid, NigParams, UncertaintyTriple};
use crate::nn::Tensor2D;

/// A moment in normalized video time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentSpan {
    pub start: f64,
    pub end: f64,
}

impl MomentSpan {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite() && 0.0 <= start && start <= end && end <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "span [{start}, {end}] violates 0 <= start <= end <= 1"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t <= self.end
    }
}

/// Center of clip `i` of `n` in normalized time.
pub fn clip_center(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

/// Foreground indicator: clip centers inside the span.
pub fn foreground_mask(span: &MomentSpan, n_clips: usize) -> Vec<bool> {
    (0..n_clips).map(|i| span.contains(clip_center(i, n_clips))).collect()
}

/// Everything the moment-retrieval and evidential heads emit for one clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipPrediction {
    pub clip_index: usize,
    pub center: f64,
    pub foreground_logit: f64,
    /// `(left, right)` distances from the clip center, both `>= 0`.
    pub offsets: (f64, f64),
    pub nig_start: NigParams,
    pub nig_end: NigParams,
}

impl ClipPrediction {
    pub fn score(&self) -> f64 {
        sigmoid(self.foreground_logit)
    }

    /// Span from the offsets, clipped to `[0, 1]`.
    pub fn decoded_span(&self) -> MomentSpan {
        let (start, end) = decode_offsets(self.center, self.offsets.0, self.offsets.1);
        MomentSpan { start, end }
    }

    /// Mean of the start and end epistemic uncertainties.
    pub fn epistemic(&self) -> Result<f64> {
        let (s, e) = self.uncertainties()?;
        Ok(0.5 * (s.epistemic + e.epistemic))
    }

    pub fn aleatoric(&self) -> Result<f64> {
        let (s, e) = self.uncertainties()?;
        Ok(0.5 * (s.aleatoric + e.aleatoric))
    }

    pub fn uncertainties(&self) -> Result<(UncertaintyTriple, UncertaintyTriple)> {
        Ok((nig_uncertainties(&self.nig_start)?, nig_uncertainties(&self.nig_end)?))
    }

    /// Mean absolute error of the evidential boundary estimates.
    pub fn evidential_error(&self, gt: &MomentSpan) -> f64 {
        0.5 * ((gt.start - self.nig_start.gamma).abs() + (gt.end - self.nig_end.gamma).abs())
    }
}

pub(crate) fn decode_offsets(center: f64, left: f64, right: f64) -> (f64, f64) {
    ((center - left).max(0.0), (center + right).min(1.0))
}

/// Assembles per-clip predictions from the three head outputs
/// (`L x 1` logits, `L x 2` nonnegative offsets, `L x 8` raw evidential values
/// ordered start-(gamma, upsilon, alpha, beta) then end-(...)).
pub fn mr_head_forward(logits: &Tensor2D, offsets: &Tensor2D, evidential_raw: &Tensor2D) -> Result<Vec<ClipPrediction>> {
    let n = logits.rows();
    if logits.cols() != 1 || offsets.shape() != (n, 2) || evidential_raw.shape() != (n, 8) {
        return Err(Error::InvalidInput(format!(
            "head outputs disagree: logits {:?}, offsets {:?}, evidential {:?}",
            logits.shape(),
            offsets.shape(),
            evidential_raw.shape()
        )));
    }
    (0..n)
        .map(|i| {
            let raw = evidential_raw.row(i);
            Ok(ClipPrediction {
                clip_index: i,
                center: clip_center(i, n),
                foreground_logit: logits.get(i, 0),
                offsets: (offsets.get(i, 0), offsets.get(i, 1)),
                nig_start: constrain_raw_to_nig([raw[0], raw[1], raw[2], raw[3]])?,
                nig_end: constrain_raw_to_nig([raw[4], raw[5], raw[6], raw[7]])?,
            })
        })
        .collect()
}

/// A query with some tokens replaced by the mask token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedQuery {
    pub tokens: Vec<usize>,
    pub mask_positions: Vec<usize>,
    pub targets: Vec<usize>,
}

impl MaskedQuery {
    pub fn new(tokens: Vec<usize>, mask_positions: Vec<usize>, targets: Vec<usize>) -> Result<Self> {
        if mask_positions.len() != targets.len() {
            return Err(Error::InvalidInput("mask positions and targets differ in length".into()));
        }
        let mut seen = vec![false; tokens.len()];
        for &p in &mask_positions {
            if p >= tokens.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidInput(format!("invalid or repeated mask position {p}")));
            }
        }
        Ok(Self {
            tokens,
            mask_positions,
            targets,
        })
    }

    pub fn unmasked(tokens: Vec<usize>) -> Self {
        Self {
            tokens,
            mask_positions: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn n_masked(&self) -> usize {
        self.mask_positions.len()
    }
}

/// Loss weights of the moment-retrieval and evidential objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_iou: f64,
    pub lambda_nll: f64,
    pub lambda_geom: f64,
    pub lambda_reg: f64,
    pub lambda_der: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l1: 1.0,
            lambda_iou: 1.0,
            lambda_nll: 1.0,
            lambda_geom: 1e-2,
            lambda_reg: 1e-2,
            lambda_der: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_l1: 0.0,
            lambda_iou: 0.0,
            lambda_nll: 0.0,
            lambda_geom: 0.0,
            lambda_reg: 0.0,
            lambda_der: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_l1", self.lambda_l1),
            ("lambda_iou", self.lambda_iou),
            ("lambda_nll", self.lambda_nll),
            ("lambda_geom", self.lambda_geom),
            ("lambda_reg", self.lambda_reg),
            ("lambda_der", self.lambda_der),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0; got {v}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_invariants() {
        assert!(MomentSpan::new(0.2, 0.1).is_err());
        assert!(MomentSpan::new(-0.1, 0.1).is_err());
        assert!(MomentSpan::new(0.2, 1.1).is_err());
        assert!(MomentSpan::new(0.3, 0.3).is_ok());
    }

    #[test]
    fn foreground_by_center() {
        let s = MomentSpan::new(0.25, 0.5).unwrap();
        let mask = foreground_mask(&s, 8);
        assert_eq!(mask, vec![false, false, true, true, false, false, false, false]);
    }

    #[test]
    fn head_output_count_matches_clips() {
        let n = 6;
        let preds = mr_head_forward(&Tensor2D::zeros(n, 1), &Tensor2D::filled(n, 2, 0.1), &Tensor2D::zeros(n, 8)).unwrap();
        assert_eq!(preds.len(), n);
        for p in &preds {
            let s = p.decoded_span();
            assert!(s.start <= s.end && s.start >= 0.0 && s.end <= 1.0);
            assert_eq!(p.score(), 0.5);
        }
        assert!(mr_head_forward(&Tensor2D::zeros(n, 1), &Tensor2D::zeros(n, 2), &Tensor2D::zeros(n, 4)).is_err());
    }

    #[test]
    fn masked_query_validation() {
        assert!(MaskedQuery::new(vec![1, 2, 3], vec![0, 0], vec![1, 1]).is_err());
        assert!(MaskedQuery::new(vec![1, 2, 3], vec![3], vec![1]).is_err());
        assert!(MaskedQuery::new(vec![1, 2, 3], vec![1], vec![]).is_err());
        assert_eq!(MaskedQuery::new(vec![0, 2, 3], vec![0], vec![1]).unwrap().n_masked(), 1);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            lambda_der: -1.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }
}
