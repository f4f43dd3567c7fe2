mod common;

use common::{ap_reference, nms_exhaustive, random_instance, recall_reference, rng};
use evmr::heads::MomentSpan;
use evmr::metrics::{
    average_precision, iou_1d, map_thresholds, mean_ap, nms, recall_at_iou, spearman, Detection,
};
use proptest::prelude::*;

fn span() -> impl Strategy<Value = MomentSpan> {
    (0.0..1.0f64, 0.0..1.0f64).prop_map(|(a, b)| MomentSpan::new(a.min(b), a.max(b)).unwrap())
}

fn detections(max: usize) -> impl Strategy<Value = Vec<Detection>> {
    prop::collection::vec((span(), 0.0..1.0f64), 0..max)
        .prop_map(|v| v.into_iter().map(|(s, c)| Detection::new(s, c).unwrap()).collect())
}

/// IoU from a dense grid of sample points, accurate to about 1e-4.
fn iou_by_counting(a: &MomentSpan, b: &MomentSpan) -> f64 {
    let n = 20_000;
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..n {
        let t = (i as f64 + 0.5) / n as f64;
        let (ia, ib) = (a.start <= t && t < a.end, b.start <= t && t < b.end);
        inter += (ia && ib) as usize;
        union += (ia || ib) as usize;
    }
    if union == 0 {
        f64::NAN
    } else {
        inter as f64 / union as f64
    }
}

#[test]
fn nms_matches_exhaustive_reference() {
    let mut r = rng(21);
    for _ in 0..200 {
        let (preds, _) = random_instance(&mut r);
        let dets: Vec<Detection> = preds.into_iter().flatten().collect();
        for thr in [0.3, 0.5, 0.7] {
            let ours = nms(&dets, thr).unwrap();
            let reference: Vec<Detection> = nms_exhaustive(&dets, thr).into_iter().map(|i| dets[i]).collect();
            assert_eq!(ours, reference);
        }
    }
}

#[test]
fn recall_matches_reference() {
    let mut r = rng(22);
    for _ in 0..200 {
        let (preds, gts) = random_instance(&mut r);
        let top1: Vec<Option<MomentSpan>> = preds.iter().map(|d| d.first().map(|d| d.span)).collect();
        for tau in [0.3, 0.5, 0.7] {
            assert_eq!(recall_at_iou(&top1, &gts, tau).unwrap(), recall_reference(&top1, &gts, tau));
        }
    }
}

#[test]
fn average_precision_matches_reference() {
    let mut r = rng(23);
    for _ in 0..200 {
        let (preds, gts) = random_instance(&mut r);
        let mut ref_sum = 0.0;
        for tau in map_thresholds() {
            let ours = average_precision(&preds, &gts, tau).unwrap();
            let reference = ap_reference(&preds, &gts, tau);
            assert!((ours - reference).abs() <= 1e-10, "tau {tau}: {ours} vs {reference}");
            ref_sum += reference;
        }
        let (avg, at075) = mean_ap(&preds, &gts).unwrap();
        assert!((avg - ref_sum / 10.0).abs() <= 1e-10);
        assert!((at075 - ap_reference(&preds, &gts, 0.75)).abs() <= 1e-10);
    }
}

#[test]
fn perfect_ranking_has_unit_ap() {
    let gts: Vec<MomentSpan> = (0..5).map(|i| MomentSpan::new(0.1 * i as f64, 0.1 * i as f64 + 0.3).unwrap()).collect();
    let preds: Vec<Vec<Detection>> = gts.iter().map(|g| vec![Detection::new(*g, 0.9).unwrap()]).collect();
    for tau in map_thresholds() {
        assert_eq!(average_precision(&preds, &gts, tau).unwrap(), 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_is_symmetric_bounded_and_reflexive(a in span(), b in span()) {
        let x = iou_1d(&a, &b);
        prop_assert_eq!(x, iou_1d(&b, &a));
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(iou_1d(&a, &a), 1.0);
    }

    #[test]
    fn iou_agrees_with_counting(a in span(), b in span()) {
        prop_assume!(a.length() > 0.01 && b.length() > 0.01);
        prop_assert!((iou_1d(&a, &b) - iou_by_counting(&a, &b)).abs() < 2e-3);
    }

    #[test]
    fn nms_output_is_a_non_overlapping_subset(dets in detections(12), thr in 0.1..1.0f64) {
        let kept = nms(&dets, thr).unwrap();
        prop_assert!(kept.iter().all(|k| dets.contains(k)));
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                prop_assert!(iou_1d(&kept[i].span, &kept[j].span) <= thr);
                prop_assert!(kept[i].score >= kept[j].score);
            }
        }
        if !dets.is_empty() {
            let best = dets.iter().map(|d| d.score).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(kept[0].score, best);
        }
    }

    #[test]
    fn recall_is_monotone_in_tau(
        pairs in prop::collection::vec((prop::option::of(span()), span()), 1..20),
        t1 in 0.0..1.0f64,
        t2 in 0.0..1.0f64,
    ) {
        let (top1, gts): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        prop_assert!(recall_at_iou(&top1, &gts, lo).unwrap() >= recall_at_iou(&top1, &gts, hi).unwrap());
    }

    #[test]
    fn spearman_is_invariant_to_monotone_transforms(
        xs in prop::collection::vec(-5.0..5.0f64, 3..30),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        use rand::Rng;
        let ys: Vec<f64> = xs.iter().map(|x| x + r.random_range(-2.0..2.0)).collect();
        let base = spearman(&xs, &ys).unwrap();
        let tx: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        let ty: Vec<f64> = ys.iter().map(|y| 3.0 * y.powi(3) + 1.0).collect();
        prop_assert!((spearman(&tx, &ty).unwrap() - base).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&base));
        prop_assert!((spearman(&xs, &xs).unwrap() - 1.0).abs() < 1e-12);
    }
}
