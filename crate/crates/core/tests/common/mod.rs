//! Reference implementations and random instance generators shared by the
//! oracle, property and acceptance tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, StudentsT};

use evmr::evidential::NigParams;
use evmr::heads::MomentSpan;
use evmr::metrics::{iou_1d, Detection};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `-ln p(b)` from a library Student-t density with `2 alpha` degrees of
/// freedom, location `gamma` and scale `sqrt(beta (1 + upsilon) / (upsilon alpha))`.
pub fn student_t_oracle(b: f64, p: &NigParams) -> f64 {
    let scale = (p.beta * (1.0 + p.upsilon) / (p.upsilon * p.alpha)).sqrt();
    let t = StudentsT::new(p.gamma, scale, 2.0 * p.alpha).expect("valid Student-t");
    -t.ln_pdf(b)
}

/// Relative error with a unit floor, for values that may sit near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central difference of `f` along coordinate `k`.
pub fn central_diff<const N: usize>(f: impl Fn([f64; N]) -> f64, x: [f64; N], k: usize, h: f64) -> f64 {
    let (mut xp, mut xm) = (x, x);
    xp[k] += h;
    xm[k] -= h;
    (f(xp) - f(xm)) / (2.0 * h)
}

/// Random raw evidential head output in a range where the softplus floors
/// stay well away from their limits.
pub fn random_raw(r: &mut ChaCha8Rng) -> [f64; 4] {
    [
        r.random_range(-2.0..2.0),
        r.random_range(-3.0..3.0),
        r.random_range(-3.0..3.0),
        r.random_range(-3.0..3.0),
    ]
}

/// Span with endpoints on a 0.05 grid, so equal IoUs and exact threshold
/// hits occur often.
pub fn grid_span(r: &mut ChaCha8Rng) -> MomentSpan {
    let a = r.random_range(0..=20) as f64 * 0.05;
    let b = r.random_range(0..=20) as f64 * 0.05;
    MomentSpan::new(a.min(b), a.max(b)).unwrap()
}

/// Scores on a coarse grid, so ties occur.
pub fn grid_score(r: &mut ChaCha8Rng) -> f64 {
    r.random_range(0..8) as f64 / 8.0
}

/// Priority order used by every ranking in the crate: score descending,
/// then input position.
fn outranks(dets: &[Detection], j: usize, i: usize) -> bool {
    dets[j].score > dets[i].score || (dets[j].score == dets[i].score && j < i)
}

/// Greedy NMS characterized as the unique subset `S` with
/// `i in S <=> no j in S outranks i with IoU(i, j) > threshold`, found by
/// enumerating every subset. Returns kept indices in priority order.
pub fn nms_exhaustive(dets: &[Detection], threshold: f64) -> Vec<usize> {
    let n = dets.len();
    assert!(n <= 16, "exhaustive NMS is exponential");
    let mut found: Option<u32> = None;
    for mask in 0u32..(1 << n) {
        let inside = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let suppressed =
                (0..n).any(|j| j != i && inside(j) && outranks(dets, j, i) && iou_1d(&dets[i].span, &dets[j].span) > threshold);
            inside(i) == !suppressed
        });
        if consistent {
            assert!(found.is_none(), "fixed point is not unique");
            found = Some(mask);
        }
    }
    let mask = found.expect("a fixed point exists");
    let mut kept: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
    kept.sort_by(|&a, &b| if outranks(dets, a, b) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    kept
}

pub fn recall_reference(top1: &[Option<MomentSpan>], gts: &[MomentSpan], tau: f64) -> f64 {
    let mut hits = 0usize;
    for i in 0..gts.len() {
        if let Some(p) = top1[i] {
            if iou_1d(&p, &gts[i]) >= tau {
                hits += 1;
            }
        }
    }
    hits as f64 / gts.len() as f64
}

/// AP as a sum over true positives of `1/G` times the best precision at or
/// after that rank, with the true-positive set recomputed from scratch for
/// every cutoff.
pub fn ap_reference(preds: &[Vec<Detection>], gts: &[MomentSpan], tau: f64) -> f64 {
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (s, ds) in preds.iter().enumerate() {
        for k in 0..ds.len() {
            ranked.push((s, k));
        }
    }
    // Insertion sort: score descending, then sample, then position.
    for i in 1..ranked.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (ranked[j - 1], ranked[j]);
            let (sa, sb) = (preds[a.0][a.1].score, preds[b.0][b.1].score);
            if sb > sa || (sb == sa && b < a) {
                ranked.swap(j - 1, j);
                j -= 1;
            } else {
                break;
            }
        }
    }
    let g = gts.len() as f64;
    let n = ranked.len();
    let tp_within = |cut: usize| -> Vec<bool> {
        let mut matched = vec![false; gts.len()];
        ranked[..cut]
            .iter()
            .map(|&(s, k)| {
                let hit = !matched[s] && iou_1d(&preds[s][k].span, &gts[s]) >= tau;
                if hit {
                    matched[s] = true;
                }
                hit
            })
            .collect()
    };
    let precision: Vec<f64> = (1..=n)
        .map(|cut| tp_within(cut).iter().filter(|&&t| t).count() as f64 / cut as f64)
        .collect();
    let flags = tp_within(n);
    let mut ap = 0.0;
    for k in 0..n {
        if flags[k] {
            let best = precision[k..].iter().cloned().fold(0.0, f64::max);
            ap += best / g;
        }
    }
    ap
}

/// A random small retrieval instance: 1..=4 samples, at most 12 detections.
pub fn random_instance(r: &mut ChaCha8Rng) -> (Vec<Vec<Detection>>, Vec<MomentSpan>) {
    let n = r.random_range(1..=4);
    let gts: Vec<MomentSpan> = (0..n).map(|_| grid_span(r)).collect();
    let mut budget = 12usize;
    let preds = (0..n)
        .map(|_| {
            let k = r.random_range(0..=budget.min(4));
            budget -= k;
            (0..k).map(|_| Detection::new(grid_span(r), grid_score(r)).unwrap()).collect()
        })
        .collect();
    (preds, gts)
}
