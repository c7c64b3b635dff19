//! Query-based mask decoder: learned queries refined by self-attention,
//! cross-attention to the LM's segmentation hidden state, and
//! cross-attention to the OC tokens; mask, box, and target heads; positive
//! selection. Also the single-mask ablation path that skips the decoder.

use rand_chacha::ChaCha8Rng;

use plm_tensor::nn::{
    xavier_uniform, AttnMask, FeedForward, LayerNorm, Linear, MultiHeadAttention, Param,
    ParamStore,
};
use plm_tensor::ops::concat_cols;
use plm_tensor::{Tape, Tensor};

use crate::config::RunConfig;
use crate::metrics::{BitMask, Box3};
use crate::CoreError;

struct GrdBlock {
    self_attn: MultiHeadAttention,
    ln1: LayerNorm,
    seg_attn: MultiHeadAttention,
    ln2: LayerNorm,
    oc_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ffn: FeedForward,
    ln4: LayerNorm,
}

pub struct Grd {
    pub q_queries: usize,
    pub d_dec: usize,
    pub d_point: usize,
    queries: Param,
    seg_proj: Linear,
    oc_proj: Linear,
    blocks: Vec<GrdBlock>,
    mask_proj: Linear,
    box_head: FeedForward,
    cls_query: FeedForward,
    cls_seg: Linear,
    cls_bias: Param,
    ground_oc: Linear,
    ground_seg: Linear,
    ground_bias: Param,
    mark: Param,
    nodec_proj: Linear,
}

/// Per-query raw outputs for one sample.
pub struct GrdOutput {
    /// Q x N mask logits.
    pub mask_logits: Tensor,
    /// Q x 2 independent sigmoid probabilities (targetness, distractorness).
    pub class_probs: Tensor,
    /// Q x 6 boxes: center, then strictly positive sizes.
    pub boxes: Tensor,
}

impl Grd {
    pub fn new(store: &mut ParamStore, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_dec;
        let blocks = (0..cfg.dec_blocks)
            .map(|i| GrdBlock {
                self_attn: MultiHeadAttention::new(store, &format!("grd.block{i}.self"), d, cfg.dec_heads, rng),
                ln1: LayerNorm::new(store, &format!("grd.block{i}.ln1"), d),
                seg_attn: MultiHeadAttention::new(store, &format!("grd.block{i}.seg"), d, cfg.dec_heads, rng),
                ln2: LayerNorm::new(store, &format!("grd.block{i}.ln2"), d),
                oc_attn: MultiHeadAttention::new(store, &format!("grd.block{i}.oc"), d, cfg.dec_heads, rng),
                ln3: LayerNorm::new(store, &format!("grd.block{i}.ln3"), d),
                ffn: FeedForward::new(store, &format!("grd.block{i}.ffn"), d, 4 * d, d, rng),
                ln4: LayerNorm::new(store, &format!("grd.block{i}.ln4"), d),
            })
            .collect();
        Grd {
            q_queries: cfg.q_queries,
            d_dec: d,
            d_point: cfg.d_point,
            queries: store.register(
                "grd.queries",
                vec![cfg.q_queries, d],
                xavier_uniform(rng, cfg.q_queries, d, cfg.q_queries * d),
            ),
            seg_proj: Linear::new(store, "grd.seg_proj", cfg.d_lm, d, rng),
            oc_proj: Linear::new(store, "grd.oc_proj", cfg.d_lm, d, rng),
            blocks,
            mask_proj: Linear::new(store, "grd.mask_proj", d, cfg.d_point, rng),
            box_head: FeedForward::new(store, "grd.box_head", d, d, 6, rng),
            cls_query: FeedForward::new(store, "grd.cls_query", d, d, 2 * d, rng),
            cls_seg: Linear::new(store, "grd.cls_seg", cfg.d_lm, 2 * d, rng),
            cls_bias: store.register("grd.cls_bias", vec![1, 2], vec![0.0; 2]),
            ground_oc: Linear::new(store, "grd.ground_oc", cfg.d_lm, d, rng),
            ground_seg: Linear::new(store, "grd.ground_seg", cfg.d_lm, d, rng),
            ground_bias: store.register("grd.ground_bias", vec![1, 1], vec![0.0]),
            // zero-initialized so marking starts as a no-op
            mark: store.register("grd.mark", vec![1, d], vec![0.0; d]),
            nodec_proj: Linear::new(store, "grd.nodec_proj", cfg.d_lm, cfg.d_point, rng),
        }
    }

    /// Per-token referent probability: a bilinear match between the
    /// segmentation hidden state and each object token, shape K x 1. Trained
    /// directly against token/referent overlap, this is the dense grounding
    /// signal that teaches the language side which objects the phrase picks
    /// out.
    pub fn ground_tokens(&self, tape: &Tape, y_seg: &Tensor, f_oc: &Tensor) -> Tensor {
        let a = self.ground_oc.forward(tape, f_oc); // K x d
        let s = self.ground_seg.forward(tape, y_seg); // 1 x d
        let scale = 1.0 / (self.d_dec as f64).sqrt();
        a.matmul(&s.t())
            .scale(scale)
            .add_rowvec(&self.ground_bias.tensor(tape))
            .sigmoid()
    }

    /// Refined queries, shape Q x d_dec. Object tokens are marked with their
    /// grounding probability (a learned vector scaled per token) before the
    /// queries attend to them, so downstream heads can read referent-ness
    /// straight off the tokens.
    pub fn decode(&self, tape: &Tape, y_seg: &Tensor, f_oc: &Tensor) -> Tensor {
        let seg = self.seg_proj.forward(tape, y_seg);
        let g = self.ground_tokens(tape, y_seg, f_oc);
        let oc = self
            .oc_proj
            .forward(tape, f_oc)
            .add(&g.matmul(&self.mark.tensor(tape)));
        let mut q = self.queries.tensor(tape);
        for b in &self.blocks {
            let sa = b.self_attn.forward(tape, &q, &q, &q, AttnMask::None);
            q = b.ln1.forward(tape, &q.add(&sa));
            let ga = b.seg_attn.forward(tape, &q, &seg, &seg, AttnMask::None);
            q = b.ln2.forward(tape, &q.add(&ga));
            let oa = b.oc_attn.forward(tape, &q, &oc, &oc, AttnMask::None);
            q = b.ln3.forward(tape, &q.add(&oa));
            let ff = b.ffn.forward(tape, &q);
            q = b.ln4.forward(tape, &q.add(&ff));
        }
        q
    }

    /// Mask logits: projected queries dotted with the point features.
    pub fn predict_masks(
        &self,
        tape: &Tape,
        y_hat: &Tensor,
        f_point: &Tensor,
    ) -> Result<Tensor, CoreError> {
        if f_point.cols() != self.d_point {
            return Err(CoreError::Config(format!(
                "point feature width {} does not match the mask projection ({})",
                f_point.cols(),
                self.d_point
            )));
        }
        Ok(self.mask_proj.forward(tape, y_hat).matmul(&f_point.t()))
    }

    /// Boxes with exp-parameterized sizes, shape Q x 6.
    pub fn predict_boxes(&self, tape: &Tape, y_hat: &Tensor) -> Tensor {
        let raw = self.box_head.forward(tape, y_hat);
        let center = raw.slice_cols(0, 3);
        let size = raw.slice_cols(3, 3).exp();
        concat_cols(&[&center, &size])
    }

    /// Target/distractor probabilities from a bilinear match between each
    /// query and the segmentation hidden state. A dot product (rather than
    /// an additive mix) is what lets different queries receive different
    /// language evidence: anything additive in y_seg shifts every query
    /// identically.
    pub fn classify_targets(&self, tape: &Tape, y_hat: &Tensor, y_seg: &Tensor) -> Tensor {
        let d = self.d_dec;
        let qp = self.cls_query.forward(tape, y_hat); // Q x 2d
        let sp = self.cls_seg.forward(tape, y_seg); // 1 x 2d
        let scale = 1.0 / (d as f64).sqrt();
        let t_logit = qp
            .slice_cols(0, d)
            .matmul(&sp.slice_cols(0, d).t())
            .scale(scale);
        let d_logit = qp
            .slice_cols(d, d)
            .matmul(&sp.slice_cols(d, d).t())
            .scale(scale);
        concat_cols(&[&t_logit, &d_logit])
            .add_rowvec(&self.cls_bias.tensor(tape))
            .sigmoid()
    }

    /// Full per-sample forward: decode then all three heads.
    pub fn forward(
        &self,
        tape: &Tape,
        y_seg: &Tensor,
        f_oc: &Tensor,
        f_point: &Tensor,
    ) -> Result<GrdOutput, CoreError> {
        let y_hat = self.decode(tape, y_seg, f_oc);
        let mask_logits = self.predict_masks(tape, &y_hat, f_point)?;
        let boxes = self.predict_boxes(tape, &y_hat);
        let class_probs = self.classify_targets(tape, &y_hat, y_seg);
        Ok(GrdOutput { mask_logits, class_probs, boxes })
    }

    /// Ablation path: a single mask straight from the LM hidden state,
    /// shape 1 x N.
    pub fn no_decoder_mask(
        &self,
        tape: &Tape,
        y_seg: &Tensor,
        f_point: &Tensor,
    ) -> Result<Tensor, CoreError> {
        if f_point.cols() != self.d_point {
            return Err(CoreError::Config("point feature width mismatch".into()));
        }
        Ok(self.nodec_proj.forward(tape, y_seg).matmul(&f_point.t()))
    }
}

/// One selected instance prediction.
#[derive(Clone, Debug)]
pub struct InstancePrediction {
    pub query: usize,
    pub mask: BitMask,
    pub box3: Box3,
    pub targetness: f64,
    pub distractorness: f64,
}

/// Masks whose targetness exceeds the threshold; may be empty.
pub fn select_positive(out: &GrdOutput, tau: f64) -> Result<Vec<InstancePrediction>, CoreError> {
    let q = out.class_probs.rows();
    let n = out.mask_logits.cols();
    let probs = out.class_probs.data();
    let logits = out.mask_logits.data();
    let boxes = out.boxes.data();
    let mut picks = Vec::new();
    for i in 0..q {
        let targetness = probs[i * 2];
        if targetness <= tau {
            continue;
        }
        let b = &boxes[i * 6..(i + 1) * 6];
        picks.push(InstancePrediction {
            query: i,
            mask: BitMask::from_logits(&logits[i * n..(i + 1) * n]),
            box3: Box3::new([b[0], b[1], b[2]], [b[3], b[4], b[5]])?,
            targetness,
            distractorness: probs[i * 2 + 1],
        });
    }
    Ok(picks)
}
