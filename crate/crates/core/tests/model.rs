mod common;

use common::rng;
use evmr::checkpoint::Checkpoint;
use evmr::config::RunConfig;
use evmr::data::{generate_dataset, BiasSpec, SynthConfig};
use evmr::fusion::{RffOptions, RffStack};
use evmr::heads::{clip_center, foreground_mask, LossWeights, MaskedQuery, MomentSpan};
use evmr::losses::{giou_loss_1d, mr_loss, mr_loss_with_grad, qr_loss, qr_loss_with_grad, total_loss, LossParts};
use evmr::model::ModelConfig;
use evmr::nn::{Affine, Embedding, Mlp2, ParamStore, Tape, Tensor2D};
use evmr::regularizers::RegularizerMode;
use evmr::train::train;
use proptest::prelude::*;
use rand::Rng;

fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor2D {
    let mut r = rng(seed);
    Tensor2D::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn weighted_sum(t: &Tensor2D, w: &Tensor2D) -> f64 {
    t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn permute_rows(t: &Tensor2D, perm: &[usize]) -> Tensor2D {
    t.select_rows(perm)
}

fn assert_close(a: &Tensor2D, b: &Tensor2D, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

/// Max relative error between tape gradients and a five-point stencil.
/// The stencil at `h = 1e-3` has truncation near 1e-12 and roundoff near
/// 1e-13, so it resolves gradients that central differences at 1e-5 cannot.
fn stencil_check(store: &mut ParamStore, mut loss: impl FnMut(&mut ParamStore, bool) -> f64) -> (f64, String) {
    store.zero_grads();
    loss(store, true);
    let analytic: Vec<Tensor2D> = store.iter().map(|p| p.grad.clone()).collect();
    let ids: Vec<_> = store.ids().collect();
    let h = 1e-3;
    let mut worst = (0.0, String::new());
    for (id, grad) in ids.into_iter().zip(&analytic) {
        for k in 0..grad.len() {
            let x = store.get(id).value.data()[k];
            let mut at = |d: f64| {
                store.get_mut(id).value.data_mut()[k] = x + d;
                loss(store, false)
            };
            let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            store.get_mut(id).value.data_mut()[k] = x;
            let err = evmr::nn::relative_error(grad.data()[k], numeric);
            if err > worst.0 {
                worst = (err, format!("{}[{k}]: {} vs {numeric}", store.get(id).name, grad.data()[k]));
            }
        }
    }
    worst
}

/// Loss `<out, C>` of a small network mixing every layer kind, with
/// gradients from the tape.
#[test]
fn layer_composition_gradients_match_finite_differences() {
    for seed in 0..6 {
        let (dim, lv, vocab) = (3, 4, 5);
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, "emb", vocab, dim, seed).unwrap();
        let stack = RffStack::new(
            &mut store,
            "rff",
            dim,
            2,
            RffOptions {
                residual: seed % 2 == 0,
                value_init_scale: 1.0,
            },
            seed,
        )
        .unwrap();
        let mlp = Mlp2::new(&mut store, "mlp", dim, 4, 2, seed).unwrap();
        let aff = Affine::new(&mut store, "aff", dim, 2, seed).unwrap();
        for p in store.iter_mut() {
            let mut r = rng(seed ^ p.value.len() as u64);
            p.value.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.8..0.8));
        }
        let video = random_tensor(lv, dim, seed + 100);
        let tokens = vec![1usize, 4, 0];
        let cv = random_tensor(lv, 2, seed + 200);
        let ct = random_tensor(tokens.len(), 2, seed + 300);
        let (err, at) = stencil_check(&mut store, |st, with_grad| {
            let mut tape = Tape::new();
            let v = tape.input(video.clone());
            let t = emb.forward(&mut tape, st, &tokens).unwrap();
            let fused = stack.forward(&mut tape, st, v, t).unwrap();
            let ov = mlp.forward(&mut tape, st, fused.video).unwrap();
            let ot = aff.forward(&mut tape, st, fused.text).unwrap();
            let value = weighted_sum(tape.value(ov), &cv) + weighted_sum(tape.value(ot), &ct);
            if with_grad {
                tape.backward(&[(ov, cv.clone()), (ot, ct.clone())], st).unwrap();
            }
            value
        });
        assert!(err < 1e-4, "seed {seed}: {err} at {at}");
    }
}

fn stack(dim: usize, n: usize, residual: bool, seed: u64) -> (ParamStore, RffStack) {
    let mut store = ParamStore::new();
    let s = RffStack::new(
        &mut store,
        "rff",
        dim,
        n,
        RffOptions {
            residual,
            value_init_scale: 1.0,
        },
        seed,
    )
    .unwrap();
    (store, s)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fusion_preserves_shapes(lv in 1usize..10, lq in 1usize..8, dim in 1usize..6, n in 1usize..4, residual: bool, seed in 0u64..1000) {
        let (store, s) = stack(dim, n, residual, seed);
        let out = s.evaluate(&store, &random_tensor(lv, dim, seed), &random_tensor(lq, dim, seed + 1)).unwrap();
        prop_assert_eq!(out.video.shape(), (lv, dim));
        prop_assert_eq!(out.text.shape(), (lq, dim));
        prop_assert_eq!(out.layer_index, n);
        prop_assert!(out.video.is_finite() && out.text.is_finite());
    }

    #[test]
    fn fusion_is_permutation_equivariant(lv in 2usize..8, lq in 2usize..6, residual: bool, seed in 0u64..1000) {
        let dim = 4;
        let (store, s) = stack(dim, 2, residual, seed);
        let video = random_tensor(lv, dim, seed);
        let text = random_tensor(lq, dim, seed + 1);
        let base = s.evaluate(&store, &video, &text).unwrap();
        let mut pv: Vec<usize> = (0..lv).collect();
        pv.rotate_left(1);
        pv.swap(0, lv - 1);
        let mut pt: Vec<usize> = (0..lq).rev().collect();
        pt.rotate_left(1);
        let out = s.evaluate(&store, &permute_rows(&video, &pv), &permute_rows(&text, &pt)).unwrap();
        assert_close(&out.video, &permute_rows(&base.video, &pv), 1e-12);
        assert_close(&out.text, &permute_rows(&base.text, &pt), 1e-12);
    }

    #[test]
    fn mr_loss_matches_direct_summation(
        n in 2usize..12,
        a in 0.0..1.0f64,
        b in 0.0..1.0f64,
        seed in 0u64..1000,
    ) {
        let gt = MomentSpan::new(a.min(b), a.max(b)).unwrap();
        let mut r = rng(seed);
        let logits = Tensor2D::from_vec(n, 1, (0..n).map(|_| r.random_range(-4.0..4.0)).collect()).unwrap();
        let offsets = Tensor2D::from_vec(n, 2, (0..2 * n).map(|_| r.random_range(0.0..0.8)).collect()).unwrap();
        let fg = foreground_mask(&gt, n);
        let w = LossWeights { lambda_l1: r.random_range(0.1..2.0), lambda_iou: r.random_range(0.1..2.0), ..LossWeights::default() };

        let mut bce = 0.0;
        for i in 0..n {
            let s = 1.0 / (1.0 + (-logits.get(i, 0)).exp());
            bce -= if fg[i] { s.ln() } else { (1.0 - s).ln() };
        }
        bce /= n as f64;
        let huber = |x: f64| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 };
        let fg_idx: Vec<usize> = (0..n).filter(|&i| fg[i]).collect();
        let mut reg = 0.0;
        for &i in &fg_idx {
            let c = clip_center(i, n);
            let (l, rr) = (offsets.get(i, 0), offsets.get(i, 1));
            let pred = MomentSpan::new((c - l).max(0.0), (c + rr).min(1.0)).unwrap();
            let inter = (pred.end.min(gt.end) - pred.start.max(gt.start)).max(0.0);
            let union = pred.length() + gt.length() - inter;
            let hull = pred.end.max(gt.end) - pred.start.min(gt.start);
            let giou = if union > 0.0 { inter / union } else { 0.0 } - (hull - union) / hull;
            prop_assert!((giou_loss_1d(&pred, &gt).unwrap() - (1.0 - giou)).abs() < 1e-12);
            reg += w.lambda_l1 * (huber(l - (c - gt.start)) + huber(rr - (gt.end - c))) + w.lambda_iou * (1.0 - giou);
        }
        if !fg_idx.is_empty() {
            reg /= fg_idx.len() as f64;
        }
        let ours = mr_loss(&logits, &offsets, &gt, &fg, &w).unwrap();
        prop_assert!((ours - (bce + reg)).abs() <= 1e-10 * (bce + reg).max(1.0), "{} vs {}", ours, bce + reg);
    }

    #[test]
    fn mr_loss_gradients_match_finite_differences(n in 2usize..10, seed in 0u64..1000) {
        let mut r = rng(seed);
        let a = r.random_range(0.05..0.5);
        let gt = MomentSpan::new(a, a + r.random_range(0.2..0.45)).unwrap();
        let fg = foreground_mask(&gt, n);
        let logits = Tensor2D::from_vec(n, 1, (0..n).map(|_| r.random_range(-3.0..3.0)).collect()).unwrap();
        let offsets = Tensor2D::from_vec(n, 2, (0..2 * n).map(|_| r.random_range(0.01..0.6)).collect()).unwrap();
        let w = LossWeights::default();
        let g = mr_loss_with_grad(&logits, &offsets, &gt, &fg, &w).unwrap();
        let h = 1e-6;
        for i in 0..n {
            let mut lp = logits.clone();
            let mut lm = logits.clone();
            lp.set(i, 0, logits.get(i, 0) + h);
            lm.set(i, 0, logits.get(i, 0) - h);
            let num = (mr_loss(&lp, &offsets, &gt, &fg, &w).unwrap() - mr_loss(&lm, &offsets, &gt, &fg, &w).unwrap()) / (2.0 * h);
            prop_assert!((num - g.d_logits.get(i, 0)).abs() < 1e-6);
            for k in 0..2 {
                let mut op = offsets.clone();
                let mut om = offsets.clone();
                op.set(i, k, offsets.get(i, k) + h);
                om.set(i, k, offsets.get(i, k) - h);
                let fp = mr_loss(&logits, &op, &gt, &fg, &w).unwrap();
                let fm = mr_loss(&logits, &om, &gt, &fg, &w).unwrap();
                let f0 = g.value;
                // Skip entries sitting on a kink of the clipped decoding or gIoU.
                if ((fp - f0) - (f0 - fm)).abs() > 1e-3 * h {
                    continue;
                }
                let num = (fp - fm) / (2.0 * h);
                prop_assert!((num - g.d_offsets.get(i, k)).abs() < 1e-6, "clip {} offset {}: {} vs {}", i, k, num, g.d_offsets.get(i, k));
            }
        }
    }

    #[test]
    fn qr_loss_gradients_match_finite_differences(seed in 0u64..1000) {
        let vocab = 7;
        let mq = MaskedQuery::new(vec![0, 1, 2, 3], vec![1, 3], vec![5, 2]).unwrap();
        let logits = random_tensor(2, vocab, seed);
        let (value, g) = qr_loss_with_grad(&logits, &mq, vocab).unwrap();
        prop_assert!(value > 0.0);
        for k in 0..logits.len() {
            let mut p = logits.clone();
            let mut m = logits.clone();
            p.data_mut()[k] += 1e-6;
            m.data_mut()[k] -= 1e-6;
            let num = (qr_loss(&p, &mq, vocab).unwrap() - qr_loss(&m, &mq, vocab).unwrap()) / 2e-6;
            prop_assert!((num - g.data()[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn total_loss_composition(
        mr in 0.0..5.0f64,
        ev in prop::collection::vec(-3.0..10.0f64, 1..20),
        qr in 0.0..5.0f64,
        qr_active: bool,
        geom: bool,
        lambda_der in 0.0..1.0f64,
    ) {
        let mode = if geom { RegularizerMode::Geom } else { RegularizerMode::Vanilla };
        let parts = LossParts { mr, evidential: ev.clone(), qr, qr_active, mode, lambda_der };
        let factor = if geom { 2.0 } else { 1.0 } / ev.len() as f64;
        let expected = mr + lambda_der * factor * ev.iter().sum::<f64>() + if qr_active { qr } else { 0.0 };
        prop_assert!((total_loss(&parts).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn config_json_round_trip(
        seed in any::<u64>(),
        lr in 1e-6..1e-1f64,
        n_rff in 1usize..6,
        residual: bool,
        mode_idx in 0usize..4,
        lambda_geom in 0.0..1.0f64,
    ) {
        let mut cfg = RunConfig::default().with_seed(seed);
        cfg.train.lr = lr;
        cfg.model.n_rff = n_rff;
        cfg.model.residual = residual;
        cfg.mode = RegularizerMode::ALL[mode_idx];
        cfg.loss.lambda_geom = lambda_geom;
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn checkpoint_round_trip(values in prop::collection::vec(-1e3..1e3f64, 12), hash: u64, epoch in 0u64..100) {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor2D::from_vec(3, 2, values[..6].to_vec()).unwrap()).unwrap();
        let b = store.insert("b", Tensor2D::from_vec(1, 6, values[6..].to_vec()).unwrap()).unwrap();
        let ck = Checkpoint::from_store(&store, hash, epoch);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        let mut restored = store.clone();
        restored.get_mut(a).value.fill(0.0);
        back.restore_into(&mut restored).unwrap();
        for (id, range) in [(a, 0..6), (b, 6..12)] {
            for (x, y) in restored.value(id).data().iter().zip(&values[range]) {
                prop_assert_eq!(*x, *y as f32 as f64);
            }
        }
        let mut corrupt = bytes.clone();
        let mid = corrupt.len() / 2;
        corrupt[mid] ^= 0x40;
        prop_assert!(Checkpoint::from_bytes(&corrupt).is_err());
    }
}

fn tiny_run(qr_epochs: usize, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth = SynthConfig {
        n_samples: 24,
        ..SynthConfig::default()
    };
    cfg.model = ModelConfig {
        n_rff: 1,
        ..ModelConfig::default()
    };
    cfg.train.qr_epochs = qr_epochs;
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 8;
    cfg
}

#[test]
fn reconstruction_head_is_frozen_in_stage_two() {
    let data = generate_dataset(&tiny_run(1, 0).synth, &BiasSpec::default()).unwrap();
    let stage1 = train(&tiny_run(1, 0), &data, None, None).unwrap();
    let both = train(&tiny_run(1, 2), &data, None, None).unwrap();
    let qr = stage1.model.arch.qr_params();
    assert!(!qr.is_empty());
    for &id in &qr {
        assert_eq!(stage1.model.store.value(id), both.model.store.value(id), "{}", stage1.model.store.get(id).name);
    }
    let ev = stage1.model.arch.evidential_params()[0];
    assert_ne!(stage1.model.store.value(ev), both.model.store.value(ev));
    assert!(both.log.iter().filter(|l| l.stage == 2).all(|l| l.qr == 0.0));
    assert!(both.log.iter().filter(|l| l.stage == 1).all(|l| l.qr > 0.0));
}
