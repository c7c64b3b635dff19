//! Geometric primitives and evaluation metrics: binary point masks, 3D
//! axis-aligned boxes with IoU/GIoU, per-scene mIoU, and AP at fixed IoU
//! thresholds.

use serde::{Deserialize, Serialize};

use crate::CoreError;

/// Fixed-length bit set over the points of one scene.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMask {
    len: usize,
    words: Vec<u64>,
}

impl BitMask {
    pub fn zeros(len: usize) -> Self {
        BitMask {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn from_indices(len: usize, indices: &[usize]) -> Self {
        let mut m = Self::zeros(len);
        for &i in indices {
            m.set(i, true);
        }
        m
    }

    /// Threshold a logit vector at sigmoid(x) > 0.5, i.e. x > 0.
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut m = Self::zeros(logits.len());
        for (i, &v) in logits.iter().enumerate() {
            if v > 0.0 {
                m.set(i, true);
            }
        }
        m
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn set(&mut self, i: usize, v: bool) {
        assert!(i < self.len);
        if v {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn intersection_count(&self, other: &BitMask) -> usize {
        assert_eq!(self.len, other.len);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn union_count(&self, other: &BitMask) -> usize {
        assert_eq!(self.len, other.len);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum()
    }

    pub fn union_with(&mut self, other: &BitMask) {
        assert_eq!(self.len, other.len);
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.len).filter(|&i| self.get(i)).collect()
    }
}

/// |a∩b| / |a∪b|; both empty is defined as 1 (rewards correct zero-target
/// rejections).
pub fn mask_iou(a: &BitMask, b: &BitMask) -> f64 {
    assert_eq!(a.len(), b.len(), "mask length mismatch");
    let union = a.union_count(b);
    if union == 0 {
        return 1.0;
    }
    a.intersection_count(b) as f64 / union as f64
}

/// Axis-aligned 3D box: center plus width/height/depth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl Box3 {
    pub fn new(center: [f64; 3], size: [f64; 3]) -> Result<Self, CoreError> {
        if size.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(CoreError::Data(format!("non-positive box size {size:?}")));
        }
        Ok(Box3 { center, size })
    }

    /// Tight bound of a point set (xyz triples); at least one point required.
    pub fn tight(points: impl Iterator<Item = [f64; 3]>) -> Result<Self, CoreError> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for p in points {
            any = true;
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        if !any {
            return Err(CoreError::Data("tight box of empty point set".into()));
        }
        let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
        // degenerate extents get a hair of thickness so volume stays positive
        let size = [
            (hi[0] - lo[0]).max(1e-6),
            (hi[1] - lo[1]).max(1e-6),
            (hi[2] - lo[2]).max(1e-6),
        ];
        Box3::new(center, size)
    }

    pub fn min_corner(&self) -> [f64; 3] {
        [
            self.center[0] - self.size[0] / 2.0,
            self.center[1] - self.size[1] / 2.0,
            self.center[2] - self.size[2] / 2.0,
        ]
    }

    pub fn max_corner(&self) -> [f64; 3] {
        [
            self.center[0] + self.size[0] / 2.0,
            self.center[1] + self.size[1] / 2.0,
            self.center[2] + self.size[2] / 2.0,
        ]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn overlaps(&self, other: &Box3) -> bool {
        let (alo, ahi) = (self.min_corner(), self.max_corner());
        let (blo, bhi) = (other.min_corner(), other.max_corner());
        (0..3).all(|k| alo[k] < bhi[k] && blo[k] < ahi[k])
    }
}

pub fn box_iou3(a: &Box3, b: &Box3) -> f64 {
    let (alo, ahi) = (a.min_corner(), a.max_corner());
    let (blo, bhi) = (b.min_corner(), b.max_corner());
    let mut inter = 1.0;
    for k in 0..3 {
        inter *= (ahi[k].min(bhi[k]) - alo[k].max(blo[k])).max(0.0);
    }
    let union = a.volume() + b.volume() - inter;
    inter / union
}

/// IoU minus the normalized hull slack; in (-1, 1] for finite boxes.
pub fn box_giou3(a: &Box3, b: &Box3) -> f64 {
    let (alo, ahi) = (a.min_corner(), a.max_corner());
    let (blo, bhi) = (b.min_corner(), b.max_corner());
    let mut inter = 1.0;
    let mut hull = 1.0;
    for k in 0..3 {
        inter *= (ahi[k].min(bhi[k]) - alo[k].max(blo[k])).max(0.0);
        hull *= ahi[k].max(bhi[k]) - alo[k].min(blo[k]);
    }
    let union = a.volume() + b.volume() - inter;
    inter / union - (hull - union) / hull
}

/// Mean over samples of IoU between predicted and target mask unions.
/// Used for the referring tasks, where each sample has one prompt.
pub fn miou_referring(pairs: &[(BitMask, BitMask)]) -> Result<f64, CoreError> {
    if pairs.is_empty() {
        return Err(CoreError::Data("empty evaluation set".into()));
    }
    Ok(pairs.iter().map(|(p, g)| mask_iou(p, g)).sum::<f64>() / pairs.len() as f64)
}

/// Per-category IoU over concatenated points, averaged over categories.
/// Items carry (category, predicted union, target union) per prompt.
pub fn miou_semantic(items: &[(u32, BitMask, BitMask)]) -> Result<f64, CoreError> {
    if items.is_empty() {
        return Err(CoreError::Data("empty evaluation set".into()));
    }
    use std::collections::BTreeMap;
    let mut acc: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (cat, pred, gt) in items {
        let e = acc.entry(*cat).or_insert((0, 0));
        e.0 += pred.intersection_count(gt);
        e.1 += pred.union_count(gt);
    }
    let mut total = 0.0;
    for (inter, union) in acc.values() {
        total += if *union == 0 { 1.0 } else { *inter as f64 / *union as f64 };
    }
    Ok(total / acc.len() as f64)
}

/// One scored instance prediction.
#[derive(Clone, Debug)]
pub struct ScoredMask {
    pub confidence: f64,
    pub mask: BitMask,
}

/// Average precision at mask-IoU threshold `t` over one set of predictions
/// and ground-truth instances.
///
/// Protocol: predictions sorted by descending confidence (ties by original
/// index); each greedily matches the unmatched GT of highest IoU and counts
/// as TP if that IoU >= t, else FP (duplicates against an already-matched GT
/// are FPs). AP is the area under the all-point interpolated PR curve.
pub fn average_precision(preds: &[ScoredMask], gts: &[BitMask], t: f64) -> f64 {
    if gts.is_empty() {
        return if preds.is_empty() { 1.0 } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut matched = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(preds.len());
    for &pi in &order {
        let mut best = (0.0, None);
        for (gi, g) in gts.iter().enumerate() {
            if matched[gi] {
                continue;
            }
            let iou = mask_iou(&preds[pi].mask, g);
            if iou > best.0 {
                best = (iou, Some(gi));
            }
        }
        match best {
            (iou, Some(gi)) if iou >= t => {
                matched[gi] = true;
                tp_flags.push(true);
            }
            _ => tp_flags.push(false),
        }
    }
    ap_from_tp_flags(&tp_flags, gts.len())
}

/// All-point interpolated AP from ranked TP/FP flags.
pub fn ap_from_tp_flags(tp_flags: &[bool], n_gt: usize) -> f64 {
    assert!(n_gt > 0);
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (rank, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // precision envelope: max precision at any recall >= r
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..envelope.len() {
        if recalls[i] > prev_recall {
            ap += (recalls[i] - prev_recall) * envelope[i];
            prev_recall = recalls[i];
        }
    }
    ap
}

/// Macro-averaged AP over categories (skips categories with no GT).
pub fn average_precision_macro(
    per_category: &[(u32, Vec<ScoredMask>, Vec<BitMask>)],
    t: f64,
) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (_, preds, gts) in per_category {
        if gts.is_empty() {
            continue;
        }
        total += average_precision(preds, gts, t);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}
