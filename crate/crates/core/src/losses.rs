//! Moment-retrieval, query-reconstruction and evidential losses.
//!
//! Every loss comes in a value form and a `*_with_grad` form returning the
//! gradient with respect to the head outputs it consumes; the model feeds
//! those gradients back through the tape.

use crate::error::{Error, Result};
use crate::evidential::{
    constrain_raw_to_nig, nll_gradients, raw_gradients, sigmoid, softplus, student_t_nll, NigParams,
};
use crate::heads::{clip_center, decode_offsets, LossWeights, MaskedQuery, MomentSpan};
use crate::nn::{softmax_rows, Tensor2D};
use crate::regularizers::{
    evidence_pair, geom_regularizer, vanilla_regularizer, BatchScale, EvidencePair, NormalizedPair, RegularizerMode,
};

/// Huber loss with threshold 1.
pub fn smooth_l1(pred: f64, target: f64) -> f64 {
    let x = pred - target;
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Derivative of [`smooth_l1`] with respect to `pred`.
pub fn smooth_l1_grad(pred: f64, target: f64) -> f64 {
    let x = pred - target;
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// `1 - gIoU` of two intervals, with gradient with respect to the predicted
/// `(start, end)`.
pub fn giou_loss_1d_with_grad(pred: &MomentSpan, gt: &MomentSpan) -> Result<(f64, [f64; 2])> {
    let (ps, pe, gs, ge) = (pred.start, pred.end, gt.start, gt.end);
    let hull = pe.max(ge) - ps.min(gs);
    if hull <= 0.0 {
        if ps == gs && pe == ge {
            return Ok((0.0, [0.0, 0.0]));
        }
        return Err(Error::InvalidInput("gIoU undefined for a zero-length hull".into()));
    }
    let lo = ps.max(gs);
    let hi = pe.min(ge);
    let inter = (hi - lo).max(0.0);
    let union = (pe - ps) + (ge - gs) - inter;

    let (d_inter_s, d_inter_e) = if hi > lo {
        (if ps > gs { -1.0 } else { 0.0 }, if pe < ge { 1.0 } else { 0.0 })
    } else {
        (0.0, 0.0)
    };
    let d_union_s = -1.0 - d_inter_s;
    let d_union_e = 1.0 - d_inter_e;
    let d_hull_s = if ps < gs { -1.0 } else { 0.0 };
    let d_hull_e = if pe > ge { 1.0 } else { 0.0 };

    let (iou, d_iou_s, d_iou_e) = if union > 0.0 {
        let u2 = union * union;
        (
            inter / union,
            (d_inter_s * union - inter * d_union_s) / u2,
            (d_inter_e * union - inter * d_union_e) / u2,
        )
    } else {
        (0.0, 0.0, 0.0)
    };
    let h2 = hull * hull;
    // gIoU = IoU - 1 + union / hull
    let giou = iou - (hull - union) / hull;
    let d_s = d_iou_s + (d_union_s * hull - union * d_hull_s) / h2;
    let d_e = d_iou_e + (d_union_e * hull - union * d_hull_e) / h2;
    Ok((1.0 - giou, [-d_s, -d_e]))
}

pub fn giou_loss_1d(pred: &MomentSpan, gt: &MomentSpan) -> Result<f64> {
    giou_loss_1d_with_grad(pred, gt).map(|(l, _)| l)
}

/// Moment-retrieval loss of one video and its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct MrLoss {
    pub value: f64,
    pub regression: f64,
    pub bce: f64,
    /// `L x 1`.
    pub d_logits: Tensor2D,
    /// `L x 2`, with respect to the nonnegative offsets.
    pub d_offsets: Tensor2D,
}

/// Regression terms averaged over foreground clips plus binary cross-entropy
/// of the foreground logits averaged over all clips.
pub fn mr_loss_with_grad(
    logits: &Tensor2D,
    offsets: &Tensor2D,
    gt: &MomentSpan,
    fg_mask: &[bool],
    w: &LossWeights,
) -> Result<MrLoss> {
    let n = logits.rows();
    if fg_mask.len() != n || offsets.shape() != (n, 2) || logits.cols() != 1 {
        return Err(Error::InvalidInput(format!(
            "mr loss inputs disagree: {n} logits, offsets {:?}, {} mask entries",
            offsets.shape(),
            fg_mask.len()
        )));
    }
    let mut d_logits = Tensor2D::zeros(n, 1);
    let mut d_offsets = Tensor2D::zeros(n, 2);

    let mut bce = 0.0;
    for (i, &fg) in fg_mask.iter().enumerate() {
        let z = logits.get(i, 0);
        let f = if fg { 1.0 } else { 0.0 };
        // -[f log s(z) + (1-f) log(1 - s(z))] = softplus(z) - f z
        bce += softplus(z) - f * z;
        d_logits.set(i, 0, (sigmoid(z) - f) / n as f64);
    }
    bce /= n as f64;

    let n_fg = fg_mask.iter().filter(|&&f| f).count();
    let mut regression = 0.0;
    if n_fg > 0 {
        let inv = 1.0 / n_fg as f64;
        for i in (0..n).filter(|&i| fg_mask[i]) {
            let c = clip_center(i, n);
            let (left, right) = (offsets.get(i, 0), offsets.get(i, 1));
            let (tl, tr) = (c - gt.start, gt.end - c);
            let l1 = smooth_l1(left, tl) + smooth_l1(right, tr);
            let (s, e) = decode_offsets(c, left, right);
            let (giou, [gs, ge]) = giou_loss_1d_with_grad(&MomentSpan { start: s, end: e }, gt)?;
            regression += inv * (w.lambda_l1 * l1 + w.lambda_iou * giou);
            let ds_dleft = if c - left > 0.0 { -1.0 } else { 0.0 };
            let de_dright = if c + right < 1.0 { 1.0 } else { 0.0 };
            d_offsets.set(i, 0, inv * (w.lambda_l1 * smooth_l1_grad(left, tl) + w.lambda_iou * gs * ds_dleft));
            d_offsets.set(i, 1, inv * (w.lambda_l1 * smooth_l1_grad(right, tr) + w.lambda_iou * ge * de_dright));
        }
    }
    Ok(MrLoss {
        value: regression + bce,
        regression,
        bce,
        d_logits,
        d_offsets,
    })
}

pub fn mr_loss(logits: &Tensor2D, offsets: &Tensor2D, gt: &MomentSpan, fg_mask: &[bool], w: &LossWeights) -> Result<f64> {
    mr_loss_with_grad(logits, offsets, gt, fg_mask, w).map(|l| l.value)
}

/// Mean cross-entropy of the masked-token logits (`l x |vocab|`) and its
/// gradient. An empty mask contributes zero.
pub fn qr_loss_with_grad(logits: &Tensor2D, mq: &MaskedQuery, vocab_size: usize) -> Result<(f64, Tensor2D)> {
    if logits.cols() != vocab_size {
        return Err(Error::InvalidInput(format!(
            "qr logits have {} columns but the vocabulary has {vocab_size} tokens",
            logits.cols()
        )));
    }
    if logits.rows() != mq.n_masked() {
        return Err(Error::InvalidInput(format!(
            "{} logit rows for {} masked positions",
            logits.rows(),
            mq.n_masked()
        )));
    }
    let l = mq.n_masked();
    if l == 0 {
        return Ok((0.0, Tensor2D::zeros(0, vocab_size)));
    }
    let mut probs = softmax_rows(logits);
    let mut loss = 0.0;
    for (k, &t) in mq.targets.iter().enumerate() {
        if t >= vocab_size {
            return Err(Error::InvalidInput(format!("target token {t} outside vocabulary")));
        }
        let row = logits.row(k);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        loss += lse - row[t];
        let g = probs.row_mut(k);
        g[t] -= 1.0;
        g.iter_mut().for_each(|v| *v /= l as f64);
    }
    Ok((loss / l as f64, probs))
}

pub fn qr_loss(logits: &Tensor2D, mq: &MaskedQuery, vocab_size: usize) -> Result<f64> {
    qr_loss_with_grad(logits, mq, vocab_size).map(|(l, _)| l)
}

/// Evidential loss of one boundary observation given its already-normalized
/// pair.
pub fn evidential_loss(b: f64, p: &NigParams, np: NormalizedPair, w: &LossWeights, mode: RegularizerMode) -> f64 {
    match mode {
        RegularizerMode::None => 0.0,
        RegularizerMode::NllOnly => w.lambda_nll * student_t_nll(b, p),
        RegularizerMode::Vanilla => {
            w.lambda_nll * student_t_nll(b, p) + w.lambda_reg * vanilla_regularizer(evidence_pair(b, p)).0
        }
        RegularizerMode::Geom => w.lambda_nll * student_t_nll(b, p) + w.lambda_geom * geom_regularizer(np).0,
    }
}

/// Evidential loss of one observation with raw-space gradients split by
/// destination: the likelihood part flows into the whole network, the
/// regularizer part only into the evidential head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvidentialTerm {
    pub value: f64,
    pub nll: f64,
    pub reg: f64,
    pub d_raw_nll: [f64; 4],
    pub d_raw_reg: [f64; 4],
}

pub fn evidential_term(
    b: f64,
    raw: [f64; 4],
    scale: Option<&BatchScale>,
    w: &LossWeights,
    mode: RegularizerMode,
) -> Result<EvidentialTerm> {
    let p = constrain_raw_to_nig(raw)?;
    if mode == RegularizerMode::None {
        return Ok(EvidentialTerm {
            value: 0.0,
            nll: 0.0,
            reg: 0.0,
            d_raw_nll: [0.0; 4],
            d_raw_reg: [0.0; 4],
        });
    }
    let nll = student_t_nll(b, &p);
    let g = nll_gradients(b, &p);
    let d_nll = [g[0] * w.lambda_nll, g[1] * w.lambda_nll, g[2] * w.lambda_nll, g[3] * w.lambda_nll];
    let pair = evidence_pair(b, &p);
    let sign = if p.gamma > b { 1.0 } else if p.gamma < b { -1.0 } else { 0.0 };
    let (reg, d_reg) = match mode {
        RegularizerMode::Vanilla => {
            let (loss, d_phi) = vanilla_regularizer(pair);
            // d/dgamma of delta * phi = phi * sign(gamma - b)
            let k = w.lambda_reg;
            (k * loss, [k * pair.phi * sign, k * 2.0 * d_phi, k * d_phi, 0.0])
        }
        RegularizerMode::Geom => {
            let scale = scale.ok_or_else(|| Error::InvalidInput("geom regularizer needs batch scale".into()))?;
            let np = scale.apply(pair);
            let (loss, d_phi_bar) = geom_regularizer(np);
            let k = w.lambda_geom;
            let d_phi = d_phi_bar / scale.phi_denominator();
            let d_delta = d_phi_bar / scale.delta_denominator();
            (k * loss, [k * d_delta * sign, k * 2.0 * d_phi, k * d_phi, 0.0])
        }
        _ => (0.0, [0.0; 4]),
    };
    Ok(EvidentialTerm {
        value: w.lambda_nll * nll + reg,
        nll,
        reg,
        d_raw_nll: raw_gradients(raw, d_nll),
        d_raw_reg: raw_gradients(raw, d_reg),
    })
}

/// Batch statistics for the geometric regularizer over raw head outputs.
pub fn batch_scale(observations: &[(f64, [f64; 4])]) -> Result<BatchScale> {
    let pairs = observations
        .iter()
        .map(|(b, raw)| Ok(evidence_pair(*b, &constrain_raw_to_nig(*raw)?)))
        .collect::<Result<Vec<EvidencePair>>>()?;
    BatchScale::of(&pairs)
}

/// Per-clip evidential weight: `2/N` for the geometric objective and `1/N`
/// for the baseline objectives.
pub fn evidential_factor(mode: RegularizerMode, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidInput("evidential average over zero clips".into()));
    }
    Ok(match mode {
        RegularizerMode::Geom => 2.0 / n as f64,
        _ => 1.0 / n as f64,
    })
}

/// Components entering the total objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossParts {
    pub mr: f64,
    /// One entry per supervised clip (start + end terms).
    pub evidential: Vec<f64>,
    pub qr: f64,
    /// QR term active (first stage).
    pub qr_active: bool,
    pub mode: RegularizerMode,
    pub lambda_der: f64,
}

pub fn total_loss(parts: &LossParts) -> Result<f64> {
    let factor = evidential_factor(parts.mode, parts.evidential.len())?;
    let ev: f64 = parts.evidential.iter().sum();
    let qr = if parts.qr_active { parts.qr } else { 0.0 };
    Ok(parts.mr + parts.lambda_der * factor * ev + qr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(s: f64, e: f64) -> MomentSpan {
        MomentSpan::new(s, e).unwrap()
    }

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1(0.0, 0.0), 0.0);
        assert_eq!(smooth_l1(0.5, 0.0), 0.125);
        assert_eq!(smooth_l1(2.0, 0.0), 1.5);
        assert_eq!(smooth_l1_grad(-3.0, 0.0), -1.0);
    }

    #[test]
    fn giou_examples() {
        // [0,10] vs [5,15], rescaled by 1/15
        let l = giou_loss_1d(&span(0.0, 10.0 / 15.0), &span(5.0 / 15.0, 1.0)).unwrap();
        assert!((l - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(giou_loss_1d(&span(0.2, 0.6), &span(0.2, 0.6)).unwrap(), 0.0);
        let l = giou_loss_1d(&span(0.0, 0.2), &span(0.8, 1.0)).unwrap();
        assert!((l - 1.6).abs() < 1e-12);
        assert_eq!(giou_loss_1d(&span(0.4, 0.4), &span(0.4, 0.4)).unwrap(), 0.0);
    }

    #[test]
    fn giou_gradient_matches_differences() {
        let gt = span(0.3, 0.7);
        for (s, e) in [(0.1, 0.5), (0.35, 0.6), (0.2, 0.9), (0.75, 0.9), (0.0, 0.2)] {
            let (_, g) = giou_loss_1d_with_grad(&span(s, e), &gt).unwrap();
            let h = 1e-6;
            let fs = (giou_loss_1d(&span(s + h, e), &gt).unwrap() - giou_loss_1d(&span((s - h).max(0.0), e), &gt).unwrap())
                / (s + h - (s - h).max(0.0));
            let fe = (giou_loss_1d(&span(s, e + h), &gt).unwrap() - giou_loss_1d(&span(s, e - h), &gt).unwrap()) / (2.0 * h);
            assert!((g[0] - fs).abs() < 1e-6, "start {s},{e}: {} vs {fs}", g[0]);
            assert!((g[1] - fe).abs() < 1e-6, "end {s},{e}: {} vs {fe}", g[1]);
        }
    }

    #[test]
    fn qr_uniform_is_log_vocab() {
        let mq = MaskedQuery::new(vec![0, 5, 6], vec![0], vec![3]).unwrap();
        let l = qr_loss(&Tensor2D::zeros(1, 32), &mq, 32).unwrap();
        assert!((l - 32f64.ln()).abs() < 1e-10);
        assert!((l - 3.4657).abs() < 1e-4);
        assert!(qr_loss(&Tensor2D::zeros(1, 31), &mq, 32).is_err());
    }

    #[test]
    fn qr_confident_goes_to_zero() {
        let mq = MaskedQuery::new(vec![0, 5], vec![0], vec![2]).unwrap();
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut z = Tensor2D::zeros(1, 8);
            z.set(0, 2, margin);
            let l = qr_loss(&z, &mq, 8).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-19);
    }

    #[test]
    fn qr_two_positions_is_mean() {
        let mut z = Tensor2D::zeros(2, 4);
        z.set(0, 1, 2.0);
        z.set(1, 3, -1.0);
        let both = MaskedQuery::new(vec![0, 0], vec![0, 1], vec![1, 2]).unwrap();
        let first = MaskedQuery::new(vec![0, 9], vec![0], vec![1]).unwrap();
        let second = MaskedQuery::new(vec![9, 0], vec![1], vec![2]).unwrap();
        let l = qr_loss(&z, &both, 4).unwrap();
        let l1 = qr_loss(&z.select_rows(&[0]), &first, 4).unwrap();
        let l2 = qr_loss(&z.select_rows(&[1]), &second, 4).unwrap();
        assert!((l - 0.5 * (l1 + l2)).abs() < 1e-14);
        let empty = MaskedQuery::unmasked(vec![1, 2]);
        assert_eq!(qr_loss(&Tensor2D::zeros(0, 4), &empty, 4).unwrap(), 0.0);
    }

    #[test]
    fn evidential_modes() {
        let p = NigParams::new(0.4, 1.2, 2.5, 0.3).unwrap();
        let w = LossWeights::default();
        let on_line = NormalizedPair {
            delta_bar: 0.25,
            phi_bar: 0.75,
        };
        assert_eq!(evidential_loss(0.9, &p, on_line, &w, RegularizerMode::None), 0.0);
        let nll = student_t_nll(0.9, &p);
        assert!((evidential_loss(0.9, &p, on_line, &w, RegularizerMode::Geom) - nll).abs() < 1e-15);
        assert!((evidential_loss(0.4, &p, on_line, &w, RegularizerMode::Vanilla) - student_t_nll(0.4, &p)).abs() < 1e-15);
    }

    #[test]
    fn total_loss_weights() {
        let mut parts = LossParts {
            mr: 0.7,
            evidential: vec![1.0, 3.0],
            qr: 2.0,
            qr_active: true,
            mode: RegularizerMode::Geom,
            lambda_der: 0.0,
        };
        assert_eq!(total_loss(&parts).unwrap(), 2.7);
        parts.lambda_der = 0.5;
        assert!((total_loss(&parts).unwrap() - (0.7 + 0.5 * (2.0 / 2.0) * 4.0 + 2.0)).abs() < 1e-12);
        parts.mode = RegularizerMode::Vanilla;
        parts.qr_active = false;
        assert!((total_loss(&parts).unwrap() - (0.7 + 0.5 * 0.5 * 4.0)).abs() < 1e-12);
        parts.evidential.clear();
        assert!(total_loss(&parts).is_err());
    }
}
