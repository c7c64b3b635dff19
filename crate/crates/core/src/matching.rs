//! Set matching and the loss stack: Hungarian assignment, focal/DICE/mask
//! losses, L1+GIoU box regression, the combined objective, and the LR
//! schedule.

use serde::{Deserialize, Serialize};

use plm_tensor::{Tape, Tensor};

use crate::metrics::{BitMask, Box3};
use crate::CoreError;

/// Supervision class of a matchable object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Klass {
    Target,
    Distractor,
}

/// One matchable ground-truth object (target or distractor).
#[derive(Clone, Debug)]
pub struct MatchTarget {
    pub mask: BitMask,
    pub box3: Box3,
    pub klass: Klass,
}

/// One-to-one assignment between predictions and match targets.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// (prediction index, match-target index), sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cls: f64,
    pub dice: f64,
    pub maskfocal: f64,
    pub l1: f64,
    pub giou: f64,
    pub lm: f64,
    /// Weight of the classification term inside the assignment cost only.
    /// Kept separate from `cls` so a strong classification loss cannot
    /// destabilize the matching once probabilities saturate.
    pub cost_cls: f64,
    /// Weight of the per-token grounding loss.
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 2.0,
            dice: 5.0,
            maskfocal: 5.0,
            l1: 1.0,
            giou: 1.0,
            lm: 1.0,
            cost_cls: 2.0,
            aux: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 0.25, gamma: 2.0 }
    }
}

/// Dense rectangular cost matrix.
#[derive(Clone, Debug)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        CostMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }
}

/// Exact minimum-cost one-to-one assignment (Jonker-Volgenant style shortest
/// augmenting paths, O(n^3)). Returns min(rows, cols) pairs sorted by row.
pub fn hungarian(cost: &CostMatrix) -> Result<Vec<(usize, usize)>, CoreError> {
    if cost.data.iter().any(|v| v.is_nan()) {
        return Err(CoreError::Data("NaN in assignment cost matrix".into()));
    }
    if cost.rows == 0 || cost.cols == 0 {
        return Ok(Vec::new());
    }
    if cost.rows > cost.cols {
        // solve on the transpose and swap pair order back
        let mut t = CostMatrix::new(cost.cols, cost.rows);
        for r in 0..cost.rows {
            for c in 0..cost.cols {
                t.set(c, r, cost.get(r, c));
            }
        }
        let mut pairs: Vec<(usize, usize)> =
            hungarian(&t)?.into_iter().map(|(r, c)| (c, r)).collect();
        pairs.sort_unstable();
        return Ok(pairs);
    }

    let (m, n) = (cost.rows, cost.cols);
    // potentials and column assignment, 1-indexed with a virtual column 0
    let mut u = vec![0.0f64; m + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut assigned_row = vec![0usize; n + 1]; // row assigned to each column
    let mut way = vec![0usize; n + 1];

    for i in 1..=m {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        // augment along the found path
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| assigned_row[j] != 0)
        .map(|j| (assigned_row[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}

const PROB_EPS: f64 = 1e-7;

/// Focal loss on probabilities against 0/1 targets, mean over elements.
pub fn focal_loss(tape: &Tape, p: &Tensor, y: &[f64], fp: FocalParams) -> Tensor {
    assert_eq!(p.len(), y.len());
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let yt = tape.constant(y.to_vec(), p.shape().to_vec());
    let y_inv = tape.constant(y.iter().map(|v| 1.0 - v).collect(), p.shape().to_vec());
    // p_t = p*y + (1-p)*(1-y); alpha_t is a constant given y
    let pt = pc.mul(&yt).add(&pc.neg().add_scalar(1.0).mul(&y_inv));
    let alpha_t = tape.constant(
        y.iter().map(|&v| fp.alpha * v + (1.0 - fp.alpha) * (1.0 - v)).collect(),
        p.shape().to_vec(),
    );
    let modulator = pt.neg().add_scalar(1.0).powf(fp.gamma);
    alpha_t.mul(&modulator).mul(&pt.ln()).mean_all().neg()
}

/// Plain-f64 twin of [`focal_loss`] for cost matrices.
pub fn focal_cost(p: &[f64], y: &[f64], fp: FocalParams) -> f64 {
    assert_eq!(p.len(), y.len());
    let mut total = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        let pc = pi.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let pt = pc * yi + (1.0 - pc) * (1.0 - yi);
        let at = fp.alpha * yi + (1.0 - fp.alpha) * (1.0 - yi);
        total += -at * (1.0 - pt).powf(fp.gamma) * pt.ln();
    }
    total / p.len() as f64
}

const DICE_EPS: f64 = 1.0;

/// DICE loss on mask logits against a binary ground-truth mask.
pub fn dice_loss(tape: &Tape, logits: &Tensor, gt: &[f64]) -> Tensor {
    assert_eq!(logits.len(), gt.len());
    let s = logits.sigmoid();
    let g = tape.constant(gt.to_vec(), logits.shape().to_vec());
    let gt_sum: f64 = gt.iter().sum();
    let num = s.mul(&g).sum_all().scale(2.0).add_scalar(DICE_EPS);
    let den = s.sum_all().add_scalar(gt_sum + DICE_EPS);
    num.div(&den).neg().add_scalar(1.0)
}

/// Plain-f64 twin of [`dice_loss`] on sigmoid probabilities.
pub fn dice_cost(sig: &[f64], gt: &[f64]) -> f64 {
    let num: f64 = 2.0 * sig.iter().zip(gt).map(|(s, g)| s * g).sum::<f64>() + DICE_EPS;
    let den: f64 = sig.iter().sum::<f64>() + gt.iter().sum::<f64>() + DICE_EPS;
    1.0 - num / den
}

/// Per-point binary focal loss on mask logits, mean-reduced.
pub fn mask_focal_loss(tape: &Tape, logits: &Tensor, gt: &[f64], fp: FocalParams) -> Tensor {
    focal_loss(tape, &logits.sigmoid(), gt, fp)
}

/// Plain-f64 twin of [`mask_focal_loss`] on sigmoid probabilities.
pub fn mask_focal_cost(sig: &[f64], gt: &[f64], fp: FocalParams) -> f64 {
    focal_cost(sig, gt, fp)
}

fn prod3(t: &Tensor) -> Tensor {
    t.slice_cols(0, 1)
        .mul(&t.slice_cols(1, 1))
        .mul(&t.slice_cols(2, 1))
}

/// Differentiable 3D GIoU between a predicted box tensor [1,6] (center,
/// size; size already positive) and a fixed ground-truth box.
pub fn box_giou3_diff(tape: &Tape, pred: &Tensor, gt: &Box3) -> Tensor {
    let center = pred.slice_cols(0, 3);
    let half = pred.slice_cols(3, 3).scale(0.5);
    let lo = center.sub(&half);
    let hi = center.add(&half);
    let glo = tape.constant(gt.min_corner().to_vec(), vec![1, 3]);
    let ghi = tape.constant(gt.max_corner().to_vec(), vec![1, 3]);

    let inter_dims = hi.minimum(&ghi).sub(&lo.maximum(&glo)).clamp_min(0.0);
    let inter = prod3(&inter_dims);
    let vol_pred = prod3(&pred.slice_cols(3, 3));
    let union = vol_pred.add_scalar(gt.volume()).sub(&inter);
    let hull_dims = hi.maximum(&ghi).sub(&lo.minimum(&glo));
    let hull = prod3(&hull_dims);
    inter.div(&union).sub(&hull.sub(&union).div(&hull))
}

/// L1 + GIoU box regression for one matched pair.
pub fn box_loss(tape: &Tape, pred: &Tensor, gt: &Box3, w_l1: f64, w_giou: f64) -> Tensor {
    let gt_vec: Vec<f64> = gt.center.iter().chain(gt.size.iter()).cloned().collect();
    let gt_t = tape.constant(gt_vec, vec![1, 6]);
    let l1 = pred.sub(&gt_t).abs().sum_all();
    let giou_term = box_giou3_diff(tape, pred, gt).neg().add_scalar(1.0);
    l1.scale(w_l1).add(&giou_term.scale(w_giou).reshape(vec![1]))
}

fn klass_onehot(k: Klass) -> [f64; 2] {
    match k {
        Klass::Target => [1.0, 0.0],
        Klass::Distractor => [0.0, 1.0],
    }
}

fn subsampled(mask: &BitMask, indices: &[usize]) -> Vec<f64> {
    indices.iter().map(|&i| if mask.get(i) { 1.0 } else { 0.0 }).collect()
}

/// Matching cost between every prediction and every match target, computed
/// on detached values over `subsample` point indices.
pub fn matching_cost(
    class_probs: &[f64],
    mask_logits: &[f64],
    n_points: usize,
    targets: &[MatchTarget],
    w: &LossWeights,
    fp: FocalParams,
    subsample: &[usize],
) -> CostMatrix {
    let q = class_probs.len() / 2;
    let mut cm = CostMatrix::new(q, targets.len());
    // sigmoid of the subsampled logits, once per prediction
    let sig: Vec<Vec<f64>> = (0..q)
        .map(|i| {
            subsample
                .iter()
                .map(|&pi| 1.0 / (1.0 + (-mask_logits[i * n_points + pi]).exp()))
                .collect()
        })
        .collect();
    let gt_sub: Vec<Vec<f64>> = targets.iter().map(|t| subsampled(&t.mask, subsample)).collect();
    for i in 0..q {
        let probs = &class_probs[i * 2..(i + 1) * 2];
        for (j, t) in targets.iter().enumerate() {
            let y = klass_onehot(t.klass);
            let c = w.cost_cls * focal_cost(probs, &y, fp)
                + w.dice * dice_cost(&sig[i], &gt_sub[j])
                + w.maskfocal * mask_focal_cost(&sig[i], &gt_sub[j], fp);
            cm.set(i, j, c);
        }
    }
    cm
}

/// Per-term loss readout for logging.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub mask: f64,
    pub bbox: f64,
    pub lm: f64,
    pub n_matched: usize,
}

/// The combined objective for one sample: matched pairs get class + mask +
/// box losses, unmatched predictions are pushed toward (0,0), and the LM
/// loss is added with its own weight.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &Tape,
    mask_logits: &Tensor,
    class_probs: &Tensor,
    boxes: &Tensor,
    targets: &[MatchTarget],
    lm_loss: Option<&Tensor>,
    w: &LossWeights,
    fp: FocalParams,
    use_box_loss: bool,
    distractor_box_loss: bool,
    subsample: &[usize],
) -> Result<(Tensor, MatchResult, LossBreakdown), CoreError> {
    let q = class_probs.rows();
    let n_points = mask_logits.cols();

    let cm = matching_cost(
        &class_probs.data(),
        &mask_logits.data(),
        n_points,
        targets,
        w,
        fp,
        subsample,
    );
    let pairs = hungarian(&cm)?;
    let matched_preds: std::collections::BTreeSet<usize> = pairs.iter().map(|&(p, _)| p).collect();
    let unmatched: Vec<usize> = (0..q).filter(|i| !matched_preds.contains(i)).collect();

    let mut cls_terms: Vec<Tensor> = Vec::new();
    let mut mask_terms: Vec<Tensor> = Vec::new();
    let mut box_terms: Vec<Tensor> = Vec::new();

    for &(pi, tj) in &pairs {
        let t = &targets[tj];
        let y = klass_onehot(t.klass);
        let probs_row = class_probs.slice_rows(pi, 1);
        cls_terms.push(focal_loss(tape, &probs_row, &y, fp).scale(w.cls));

        let logits_row = mask_logits.slice_rows(pi, 1);
        let gt_full: Vec<f64> = (0..n_points).map(|i| if t.mask.get(i) { 1.0 } else { 0.0 }).collect();
        let dice = dice_loss(tape, &logits_row, &gt_full).scale(w.dice);
        let mf = mask_focal_loss(tape, &logits_row, &gt_full, fp).scale(w.maskfocal);
        mask_terms.push(dice.add(&mf));

        if use_box_loss && (t.klass == Klass::Target || distractor_box_loss) {
            let box_row = boxes.slice_rows(pi, 1);
            box_terms.push(box_loss(tape, &box_row, &t.box3, w.l1, w.giou));
        }
    }
    for &pi in &unmatched {
        let probs_row = class_probs.slice_rows(pi, 1);
        cls_terms.push(focal_loss(tape, &probs_row, &[0.0, 0.0], fp).scale(w.cls));
    }

    let zero = tape.constant(vec![0.0], vec![1]);
    let sum = |terms: &[Tensor]| -> Tensor {
        terms.iter().fold(zero.clone(), |acc, t| acc.add(t))
    };
    let cls_sum = sum(&cls_terms);
    let mask_sum = sum(&mask_terms);
    let box_sum = sum(&box_terms);
    let mut total = cls_sum.add(&mask_sum).add(&box_sum);
    let mut lm_val = 0.0;
    if let Some(lml) = lm_loss {
        total = total.add(&lml.scale(w.lm));
        lm_val = lml.scalar();
    }

    let breakdown = LossBreakdown {
        total: total.scalar(),
        cls: cls_sum.scalar(),
        mask: mask_sum.scalar(),
        bbox: box_sum.scalar(),
        lm: lm_val,
        n_matched: pairs.len(),
    };
    Ok((
        total,
        MatchResult { pairs, unmatched_preds: unmatched },
        breakdown,
    ))
}

/// Linear warmup over the first 2% of steps, then linear decay to zero.
pub fn lr_schedule(step: u64, total_steps: u64, peak: f64) -> f64 {
    assert!(step <= total_steps);
    let warmup = ((0.02 * total_steps as f64).round() as u64).max(1);
    if step <= warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (1.0 - (step - warmup) as f64 / (total_steps - warmup) as f64)
    }
}
