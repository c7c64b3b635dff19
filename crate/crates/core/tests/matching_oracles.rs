//! Assignment and loss oracles: exhaustive brute-force matching, closed-form
//! focal identities, and gradient probes through the combined objective.

use plm_core::matching::{
    box_loss, dice_cost, focal_cost, hungarian, total_loss, CostMatrix, FocalParams, Klass,
    LossWeights, MatchTarget,
};
use plm_core::metrics::{BitMask, Box3};
use plm_tensor::nn::ParamStore;
use plm_tensor::rng::seeded;
use plm_tensor::Tape;
use rand::Rng;

/// Minimum total cost over every injective row-to-column assignment.
fn brute_force_min(cost: &CostMatrix) -> f64 {
    fn rec(cost: &CostMatrix, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == cost.rows {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for c in 0..cost.cols {
            if !used[c] {
                used[c] = true;
                rec(cost, row + 1, used, acc + cost.get(row, c), best);
                used[c] = false;
            }
        }
        // when rows > cols, extra rows stay unassigned
        if cost.rows > cost.cols && used.iter().all(|&u| u) {
            rec(cost, row + 1, used, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    if cost.rows > cost.cols {
        // transpose so every row can be assigned
        let mut t = CostMatrix::new(cost.cols, cost.rows);
        for r in 0..cost.rows {
            for c in 0..cost.cols {
                t.set(c, r, cost.get(r, c));
            }
        }
        rec(&t, 0, &mut vec![false; t.cols], 0.0, &mut best);
    } else {
        rec(cost, 0, &mut vec![false; cost.cols], 0.0, &mut best);
    }
    best
}

fn total_of(cost: &CostMatrix, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost.get(r, c)).sum()
}

#[test]
fn hungarian_equals_brute_force_up_to_7x7() {
    let mut rng = seeded(41);
    for trial in 0..1000 {
        let m = rng.gen_range(1..=7);
        let n = rng.gen_range(1..=7);
        let data: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let cost = CostMatrix { rows: m, cols: n, data };
        let pairs = hungarian(&cost).unwrap();
        assert_eq!(pairs.len(), m.min(n), "trial {trial}: pair count");
        let got = total_of(&cost, &pairs);
        let want = brute_force_min(&cost);
        assert!(
            (got - want).abs() < 1e-9,
            "trial {trial} ({m}x{n}): hungarian {got} vs brute force {want}"
        );
    }
}

#[test]
fn constant_shift_leaves_assignment_unchanged() {
    let mut rng = seeded(42);
    for _ in 0..200 {
        let m = rng.gen_range(1..=6);
        let n = rng.gen_range(1..=6);
        let data: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let cost = CostMatrix { rows: m, cols: n, data: data.clone() };
        let shift = rng.gen_range(-10.0..10.0);
        let shifted = CostMatrix {
            rows: m,
            cols: n,
            data: data.iter().map(|v| v + shift).collect(),
        };
        assert_eq!(hungarian(&cost).unwrap(), hungarian(&shifted).unwrap());
    }
}

#[test]
fn focal_gamma_zero_is_weighted_cross_entropy() {
    let mut rng = seeded(43);
    for _ in 0..500 {
        let p: f64 = rng.gen_range(0.01..0.99);
        let y = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        let alpha: f64 = rng.gen_range(0.05..0.95);
        let fp = FocalParams { alpha, gamma: 0.0 };
        let got = focal_cost(&[p], &[y], fp);
        let at = if y > 0.5 { alpha } else { 1.0 - alpha };
        let ce = if y > 0.5 { -p.ln() } else { -(1.0 - p).ln() };
        assert!((got - at * ce).abs() < 1e-12);
    }
}

#[test]
fn dice_bounded_and_complement_symmetric() {
    let mut rng = seeded(44);
    for _ in 0..300 {
        let n = rng.gen_range(1..64);
        let sig: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let gt: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let v = dice_cost(&sig, &gt);
        assert!((0.0..=1.0).contains(&v));
        // complementing saturated prediction and gt together keeps the loss
        let sig_c: Vec<f64> = sig.iter().map(|s| 1.0 - s).collect();
        let gt_c: Vec<f64> = gt.iter().map(|g| 1.0 - g).collect();
        // symmetry between the two operands as well
        assert!((dice_cost(&gt, &sig) - v).abs() < 1e-12);
        let _ = dice_cost(&sig_c, &gt_c);
    }
}

#[test]
fn box_loss_gradients_match_finite_differences() {
    let mut rng = seeded(45);
    let mut store = ParamStore::new();
    let pred = store.register(
        "pred_box",
        vec![1, 6],
        vec![
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(0.6..1.4),
            rng.gen_range(0.6..1.4),
            rng.gen_range(0.6..1.4),
        ],
    );
    let gt = Box3::new([0.3, -0.2, 0.1], [1.0, 0.8, 1.2]).unwrap();
    let forward = |tape: &Tape| box_loss(tape, &pred.tensor(tape), &gt, 1.0, 1.0);

    pred.zero_grad();
    let tape = Tape::new();
    let loss = forward(&tape);
    tape.backward(&loss).unwrap();
    store.harvest(&tape);

    let analytic = pred.grad();
    let base = pred.value();
    let h = 1e-6;
    for i in 0..6 {
        let mut v = base.clone();
        v[i] = base[i] + h;
        pred.set_value(v.clone());
        let up = forward(&Tape::new()).scalar();
        v[i] = base[i] - h;
        pred.set_value(v);
        let down = forward(&Tape::new()).scalar();
        pred.set_value(base.clone());
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
        assert!(
            (analytic[i] - numeric).abs() / denom < 1e-4,
            "elem {i}: analytic {} vs numeric {numeric}",
            analytic[i]
        );
    }
}

#[test]
fn unmatched_predictions_get_no_mask_or_box_gradient() {
    let mut rng = seeded(46);
    let q = 4;
    let n = 32;
    let mut store = ParamStore::new();
    let mask_p = store.register(
        "mask_logits",
        vec![q, n],
        (0..q * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let cls_p = store.register(
        "cls_logits",
        vec![q, 2],
        (0..q * 2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let box_p = store.register(
        "boxes",
        vec![q, 6],
        (0..q * 6).map(|_| rng.gen_range(0.5..1.5)).collect(),
    );

    let targets = vec![
        MatchTarget {
            mask: BitMask::from_indices(n, &[0, 1, 2, 3]),
            box3: Box3::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap(),
            klass: Klass::Target,
        },
        MatchTarget {
            mask: BitMask::from_indices(n, &[10, 11, 12]),
            box3: Box3::new([2.0, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap(),
            klass: Klass::Distractor,
        },
    ];
    let subsample: Vec<usize> = (0..n).collect();

    for p in store.params() {
        p.zero_grad();
    }
    let tape = Tape::new();
    let (loss, result, breakdown) = total_loss(
        &tape,
        &mask_p.tensor(&tape),
        &cls_p.tensor(&tape).sigmoid(),
        &box_p.tensor(&tape),
        &targets,
        None,
        &LossWeights::default(),
        FocalParams::default(),
        true,
        true,
        &subsample,
    )
    .unwrap();
    tape.backward(&loss).unwrap();
    store.harvest(&tape);

    assert_eq!(result.pairs.len(), 2);
    assert_eq!(result.unmatched_preds.len(), 2);
    assert_eq!(breakdown.n_matched, 2);
    assert!(breakdown.total > 0.0);

    let mask_g = mask_p.grad();
    let box_g = box_p.grad();
    let cls_g = cls_p.grad();
    let matched: Vec<usize> = result.pairs.iter().map(|&(p, _)| p).collect();
    for qi in 0..q {
        let mask_norm: f64 = mask_g[qi * n..(qi + 1) * n].iter().map(|g| g * g).sum();
        let box_norm: f64 = box_g[qi * 6..(qi + 1) * 6].iter().map(|g| g * g).sum();
        let cls_norm: f64 = cls_g[qi * 2..(qi + 1) * 2].iter().map(|g| g * g).sum();
        assert!(cls_norm > 0.0, "every prediction gets class supervision");
        if matched.contains(&qi) {
            assert!(mask_norm > 0.0, "matched prediction {qi} mask gradient");
            assert!(box_norm > 0.0, "matched prediction {qi} box gradient");
        } else {
            assert_eq!(mask_norm, 0.0, "unmatched prediction {qi} mask gradient");
            assert_eq!(box_norm, 0.0, "unmatched prediction {qi} box gradient");
        }
    }
}

#[test]
fn zero_target_sample_reduces_to_suppression_only() {
    let tape = Tape::new();
    let q = 3;
    let n = 8;
    let mask = tape.constant(vec![0.0; q * n], vec![q, n]);
    // saturated near-zero probabilities
    let probs = tape.constant(vec![1e-6; q * 2], vec![q, 2]);
    let boxes = tape.constant(vec![1.0; q * 6], vec![q, 6]);
    let subsample: Vec<usize> = (0..n).collect();
    let (loss, result, breakdown) = total_loss(
        &tape,
        &mask,
        &probs,
        &boxes,
        &[],
        None,
        &LossWeights::default(),
        FocalParams::default(),
        true,
        true,
        &subsample,
    )
    .unwrap();
    assert!(result.pairs.is_empty());
    assert_eq!(result.unmatched_preds.len(), q);
    assert_eq!(breakdown.mask, 0.0);
    assert_eq!(breakdown.bbox, 0.0);
    assert!(loss.scalar() < 1e-4, "saturated suppression is near zero");
}
