//! Retrieval metrics and uncertainty diagnostics.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::heads::MomentSpan;

pub const DEFAULT_NMS_THRESHOLD: f64 = 0.7;

/// IoU thresholds of the averaged mAP: 0.5, 0.55, ..., 0.95.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Detection {
    pub span: MomentSpan,
    pub score: f64,
}

impl Detection {
    pub fn new(span: MomentSpan, score: f64) -> Result<Self> {
        if !score.is_finite() {
            return Err(Error::InvalidInput(format!("detection score {score} is not finite")));
        }
        Ok(Self { span, score })
    }
}

/// Intersection over union; two zero-length spans at the same point score 1.
pub fn iou_1d(a: &MomentSpan, b: &MomentSpan) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = (a.end - a.start) + (b.end - b.start) - inter;
    if union <= 0.0 {
        return if a.start == b.start { 1.0 } else { 0.0 };
    }
    inter / union
}

/// Greedy non-maximum suppression. Detections are visited by descending
/// score (ties by input order); one is kept iff its IoU with every kept
/// detection is at most `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidInput(format!("nms threshold {iou_threshold} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.iter().all(|k| iou_1d(&k.span, &dets[i].span) <= iou_threshold) {
            kept.push(dets[i]);
        }
    }
    Ok(kept)
}

fn check_lengths(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidInput(format!("{what}: {a} predictions for {b} ground truths")));
    }
    Ok(())
}

/// Fraction of samples whose top-1 detection reaches `tau` IoU. `None`
/// counts as a miss.
pub fn recall_at_iou(top1: &[Option<MomentSpan>], gts: &[MomentSpan], tau: f64) -> Result<f64> {
    check_lengths("recall", top1.len(), gts.len())?;
    if gts.is_empty() {
        return Err(Error::InvalidInput("recall over zero samples".into()));
    }
    let hits = top1
        .iter()
        .zip(gts)
        .filter(|(p, g)| p.is_some_and(|p| iou_1d(&p, g) >= tau))
        .count();
    Ok(hits as f64 / gts.len() as f64)
}

/// Average precision at one IoU threshold over detections pooled across
/// samples and ranked by score, one ground truth per sample. A detection is a
/// true positive when it is the first for its sample to reach `tau`. Uses the
/// precision envelope over the exact ranked list.
pub fn average_precision(preds: &[Vec<Detection>], gts: &[MomentSpan], tau: f64) -> Result<f64> {
    check_lengths("average precision", preds.len(), gts.len())?;
    if gts.is_empty() {
        return Err(Error::InvalidInput("average precision over zero samples".into()));
    }
    let mut pooled: Vec<(f64, usize, usize)> = preds
        .iter()
        .enumerate()
        .flat_map(|(s, ds)| ds.iter().enumerate().map(move |(k, d)| (d.score, s, k)))
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut matched = vec![false; gts.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(pooled.len());
    for &(_, s, k) in &pooled {
        if !matched[s] && iou_1d(&preds[s][k].span, &gts[s]) >= tau {
            matched[s] = true;
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((tp as f64 / gts.len() as f64, tp as f64 / (tp + fp) as f64));
    }
    // Envelope: precision at each rank becomes the max precision at any later rank.
    let mut best = 0.0f64;
    for point in curve.iter_mut().rev() {
        best = best.max(point.1);
        point.1 = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in curve {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// `(mean AP over 0.5:0.05:0.95, AP at 0.75)`.
pub fn mean_ap(preds: &[Vec<Detection>], gts: &[MomentSpan]) -> Result<(f64, f64)> {
    let aps = map_thresholds()
        .into_iter()
        .map(|t| average_precision(preds, gts, t))
        .collect::<Result<Vec<_>>>()?;
    Ok((aps.iter().sum::<f64>() / aps.len() as f64, average_precision(preds, gts, 0.75)?))
}

/// Mean IoU of the top-1 detections (misses count 0).
pub fn mean_iou(top1: &[Option<MomentSpan>], gts: &[MomentSpan]) -> Result<f64> {
    check_lengths("mean IoU", top1.len(), gts.len())?;
    if gts.is_empty() {
        return Err(Error::InvalidInput("mean IoU over zero samples".into()));
    }
    Ok(top1
        .iter()
        .zip(gts)
        .map(|(p, g)| p.map_or(0.0, |p| iou_1d(&p, g)))
        .sum::<f64>()
        / gts.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    /// Keys are thresholds formatted with two decimals.
    pub r1_at: BTreeMap<String, f64>,
    pub map_avg: f64,
    pub map_at_075: f64,
    pub miou: f64,
    pub n_samples: usize,
}

/// Metrics from post-NMS ranked detections per sample.
pub fn metric_report(ranked: &[Vec<Detection>], gts: &[MomentSpan]) -> Result<MetricReport> {
    let top1: Vec<Option<MomentSpan>> = ranked.iter().map(|d| d.first().map(|d| d.span)).collect();
    let mut r1_at = BTreeMap::new();
    for tau in [0.3, 0.5, 0.7] {
        r1_at.insert(format!("{tau:.2}"), recall_at_iou(&top1, gts, tau)?);
    }
    let (map_avg, map_at_075) = mean_ap(ranked, gts)?;
    Ok(MetricReport {
        r1_at,
        map_avg,
        map_at_075,
        miou: mean_iou(&top1, gts)?,
        n_samples: gts.len(),
    })
}

/// Average ranks (1-based) with ties sharing their mean rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = 0.5 * (i + j) as f64 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman rank correlation; 0 when either input is constant.
pub fn spearman(errors: &[f64], uncertainties: &[f64]) -> Result<f64> {
    if errors.len() != uncertainties.len() {
        return Err(Error::InvalidInput(format!(
            "spearman inputs differ in length ({} vs {})",
            errors.len(),
            uncertainties.len()
        )));
    }
    if errors.len() < 3 {
        return Err(Error::InvalidInput(format!("spearman needs >= 3 points; got {}", errors.len())));
    }
    if errors.iter().chain(uncertainties).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("spearman input contains non-finite values".into()));
    }
    Ok(pearson(&average_ranks(errors), &average_ranks(uncertainties)))
}

/// Population variance.
pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ModalityVariance {
    pub var_vis: f64,
    pub var_text: f64,
    pub delta_var: f64,
}

/// Variance across noise levels of the per-level mean uncertainty, for each
/// modality.
pub fn modality_variance(visual_level_means: &[f64], text_level_means: &[f64]) -> Result<ModalityVariance> {
    if visual_level_means.is_empty() || text_level_means.is_empty() {
        return Err(Error::InvalidInput("modality variance needs a non-empty ladder per modality".into()));
    }
    let var_vis = population_variance(visual_level_means);
    let var_text = population_variance(text_level_means);
    Ok(ModalityVariance {
        var_vis,
        var_text,
        delta_var: (var_vis - var_text).abs(),
    })
}

/// Mean OOD uncertainty over mean in-distribution uncertainty.
pub fn ood_uncertainty_contrast(iid: &[f64], ood: &[f64]) -> Result<f64> {
    if iid.is_empty() || ood.is_empty() {
        return Err(Error::InvalidInput("OOD contrast needs non-empty splits".into()));
    }
    let mi = iid.iter().sum::<f64>() / iid.len() as f64;
    let mo = ood.iter().sum::<f64>() / ood.len() as f64;
    if !(mi > 0.0 && mi.is_finite() && mo.is_finite()) {
        return Err(Error::Numerical(format!("OOD contrast undefined for means {mo} / {mi}")));
    }
    Ok(mo / mi)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationBin {
    pub error_lo: f64,
    pub error_hi: f64,
    pub count: usize,
    pub mean_aleatoric: f64,
    pub mean_epistemic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub spearman_aleatoric: f64,
    pub spearman_epistemic: f64,
    pub n_samples: usize,
    /// Samples binned by error quantile.
    pub bins: Vec<CalibrationBin>,
}

/// Rank correlation of per-sample errors with both uncertainties, plus a
/// table of mean uncertainty per error-quantile bin.
pub fn calibration_report(errors: &[f64], aleatoric: &[f64], epistemic: &[f64], n_bins: usize) -> Result<CalibrationReport> {
    if aleatoric.len() != errors.len() {
        return Err(Error::InvalidInput("aleatoric and error lists differ in length".into()));
    }
    let spearman_aleatoric = spearman(errors, aleatoric)?;
    let spearman_epistemic = spearman(errors, epistemic)?;
    let n_bins = n_bins.clamp(1, errors.len());
    let mut idx: Vec<usize> = (0..errors.len()).collect();
    idx.sort_by(|&a, &b| errors[a].total_cmp(&errors[b]).then(a.cmp(&b)));
    let bins = (0..n_bins)
        .map(|b| {
            let part = &idx[b * idx.len() / n_bins..(b + 1) * idx.len() / n_bins];
            let mean = |xs: &[f64]| part.iter().map(|&i| xs[i]).sum::<f64>() / part.len().max(1) as f64;
            CalibrationBin {
                error_lo: part.first().map_or(0.0, |&i| errors[i]),
                error_hi: part.last().map_or(0.0, |&i| errors[i]),
                count: part.len(),
                mean_aleatoric: mean(aleatoric),
                mean_epistemic: mean(epistemic),
            }
        })
        .collect();
    Ok(CalibrationReport {
        spearman_aleatoric,
        spearman_epistemic,
        n_samples: errors.len(),
        bins,
    })
}
