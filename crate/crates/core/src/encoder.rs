//! Frozen proposal encoder: a point network with k-nearest-neighbor max
//! pooling plus learned proposal queries refined by cross-attention. It is
//! pretrained on class-agnostic instance masks and then frozen; downstream
//! stages only consume its outputs (f_point, f_q).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use plm_tensor::nn::{
    xavier_uniform, AttnMask, FeedForward, LayerNorm, Linear, MultiHeadAttention, Param,
    ParamStore,
};
use plm_tensor::ops::concat_cols;
use plm_tensor::optim::Adam;
use plm_tensor::rng::{seeded, split};
use plm_tensor::{Tape, Tensor};

use crate::config::RunConfig;
use crate::corpus::Corpus;
use crate::matching::{
    hungarian, matching_cost, FocalParams, Klass, LossWeights, MatchTarget,
};
use crate::metrics::{mask_iou, BitMask};
use crate::scene::Scene;
use crate::CoreError;

/// Scale applied to raw coordinates so inputs are O(1).
const COORD_SCALE: f64 = 1.0 / 3.0;

/// k nearest neighbors (by xyz distance) per point, row-major N x k.
/// A point is not its own neighbor.
pub fn knn_indices(scene: &Scene, k: usize) -> Result<Vec<u32>, CoreError> {
    let n = scene.n_points;
    if n <= k {
        return Err(CoreError::Config(format!(
            "scene has {n} points but kNN needs more than k={k}"
        )));
    }
    let xyz: Vec<[f64; 3]> = (0..n).map(|i| scene.xyz(i)).collect();
    let mut out = Vec::with_capacity(n * k);
    let mut scratch: Vec<(f64, u32)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        scratch.clear();
        let p = xyz[i];
        for (j, q) in xyz.iter().enumerate() {
            if j == i {
                continue;
            }
            let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            scratch.push((d, j as u32));
        }
        scratch.select_nth_unstable_by(k - 1, |a, b| {
            a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
        });
        let mut picked: Vec<(f64, u32)> = scratch[..k].to_vec();
        picked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.extend(picked.iter().map(|&(_, j)| j));
    }
    Ok(out)
}

/// Max over each point's k neighbors, per channel; gradient flows to the
/// argmax neighbor only.
pub fn knn_maxpool(tape: &Tape, h: &Tensor, nbrs: &[u32], k: usize) -> Tensor {
    let n = h.rows();
    let d = h.cols();
    assert_eq!(nbrs.len(), n * k, "neighbor table does not match input");
    let data = h.data();
    let mut out = vec![f64::NEG_INFINITY; n * d];
    let mut argmax = vec![0u32; n * d];
    for i in 0..n {
        for &j in &nbrs[i * k..(i + 1) * k] {
            let row = &data[j as usize * d..(j as usize + 1) * d];
            for c in 0..d {
                if row[c] > out[i * d + c] {
                    out[i * d + c] = row[c];
                    argmax[i * d + c] = j;
                }
            }
        }
    }
    tape.op(
        &[h],
        out,
        vec![n, d],
        Box::new(move |g| {
            let mut gh = vec![0.0; n * d];
            for i in 0..n {
                for c in 0..d {
                    gh[argmax[i * d + c] as usize * d + c] += g[i * d + c];
                }
            }
            vec![Some(gh)]
        }),
    )
}

/// The encoder network. All parameters carry the `encoder.` prefix so they
/// can be frozen and checksummed as one unit.
pub struct ProposalEncoder {
    pub d: usize,
    pub knn_k: usize,
    pub k_proposals: usize,
    input: FeedForward,
    pool_proj: [Linear; 2],
    res_mlp: FeedForward,
    seeds: Param,
    attn: [MultiHeadAttention; 2],
    attn_ln: [LayerNorm; 2],
    ffn: [FeedForward; 2],
    ffn_ln: [LayerNorm; 2],
    mask_proj: Linear,
}

impl ProposalEncoder {
    pub fn new(store: &mut ParamStore, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_point;
        let heads = 4;
        ProposalEncoder {
            d,
            knn_k: cfg.knn_k,
            k_proposals: cfg.k_proposals,
            input: FeedForward::new(store, "encoder.input", 9, d, d, rng),
            pool_proj: [
                Linear::new(store, "encoder.pool0", 2 * d, d, rng),
                Linear::new(store, "encoder.pool1", 2 * d, d, rng),
            ],
            res_mlp: FeedForward::new(store, "encoder.res", d, d, d, rng),
            seeds: store.register(
                "encoder.seeds",
                vec![cfg.k_proposals, d],
                xavier_uniform(rng, cfg.k_proposals, d, cfg.k_proposals * d),
            ),
            attn: [
                MultiHeadAttention::new(store, "encoder.attn0", d, heads, rng),
                MultiHeadAttention::new(store, "encoder.attn1", d, heads, rng),
            ],
            attn_ln: [
                LayerNorm::new(store, "encoder.attn0_ln", d),
                LayerNorm::new(store, "encoder.attn1_ln", d),
            ],
            ffn: [
                FeedForward::new(store, "encoder.ffn0", d, 2 * d, d, rng),
                FeedForward::new(store, "encoder.ffn1", d, 2 * d, d, rng),
            ],
            ffn_ln: [
                LayerNorm::new(store, "encoder.ffn0_ln", d),
                LayerNorm::new(store, "encoder.ffn1_ln", d),
            ],
            mask_proj: Linear::new(store, "encoder.mask_proj", d, d, rng),
        }
    }

    /// Per-point input features: scaled xyz, rgb, centroid-centered xyz.
    fn input_features(scene: &Scene) -> Vec<f64> {
        let n = scene.n_points;
        let mut centroid = [0.0; 3];
        for i in 0..n {
            let p = scene.xyz(i);
            for d in 0..3 {
                centroid[d] += p[d] / n as f64;
            }
        }
        let mut feats = Vec::with_capacity(n * 9);
        for i in 0..n {
            let o = i * 6;
            let p = &scene.points[o..o + 6];
            feats.extend_from_slice(&[
                p[0] * COORD_SCALE,
                p[1] * COORD_SCALE,
                p[2] * COORD_SCALE,
                p[3],
                p[4],
                p[5],
                (p[0] - centroid[0]) * COORD_SCALE,
                (p[1] - centroid[1]) * COORD_SCALE,
                (p[2] - centroid[2]) * COORD_SCALE,
            ]);
        }
        feats
    }

    /// Dense point features f_point, shape N x d.
    pub fn encode_points(
        &self,
        tape: &Tape,
        scene: &Scene,
        nbrs: &[u32],
    ) -> Result<Tensor, CoreError> {
        let n = scene.n_points;
        if n <= self.knn_k {
            return Err(CoreError::Config("too few points for the kNN width".into()));
        }
        let x = tape.constant(Self::input_features(scene), vec![n, 9]);
        let mut h = self.input.forward(tape, &x).relu();
        for round in 0..2 {
            let pooled = knn_maxpool(tape, &h, nbrs, self.knn_k);
            let fused = self.pool_proj[round]
                .forward(tape, &concat_cols(&[&h, &pooled]))
                .relu();
            h = h.add(&fused);
        }
        Ok(h.add(&self.res_mlp.forward(tape, &h)))
    }

    /// Proposal queries f_q, shape K x d.
    pub fn propose(&self, tape: &Tape, f_point: &Tensor) -> Tensor {
        let mut q = self.seeds.tensor(tape);
        for round in 0..2 {
            let att = self.attn[round].forward(tape, &q, f_point, f_point, AttnMask::None);
            q = self.attn_ln[round].forward(tape, &q.add(&att));
            let ff = self.ffn[round].forward(tape, &q);
            q = self.ffn_ln[round].forward(tape, &q.add(&ff));
        }
        q
    }

    /// Auxiliary pretraining mask head: proj(f_q) . f_point^T, shape K x N.
    pub fn proposal_mask_logits(&self, tape: &Tape, f_q: &Tensor, f_point: &Tensor) -> Tensor {
        self.mask_proj.forward(tape, f_q).matmul(&f_point.t())
    }
}

/// Fraction of GT instances covered by some proposal at mask IoU >= 0.5.
pub fn proposal_recall(
    encoder: &ProposalEncoder,
    scenes: &[(&Scene, &[u32])],
) -> Result<f64, CoreError> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for (scene, nbrs) in scenes {
        let tape = Tape::new();
        let f_point = encoder.encode_points(&tape, scene, nbrs)?;
        let f_q = encoder.propose(&tape, &f_point);
        let logits = encoder.proposal_mask_logits(&tape, &f_q, &f_point);
        let data = logits.data();
        let n = scene.n_points;
        let masks: Vec<BitMask> = (0..encoder.k_proposals)
            .map(|q| BitMask::from_logits(&data[q * n..(q + 1) * n]))
            .collect();
        for inst in &scene.instances {
            let gt = scene.instance_mask(inst.instance_id)?;
            total += 1;
            if masks.iter().any(|m| mask_iou(m, &gt) >= 0.5) {
                hit += 1;
            }
        }
    }
    if total == 0 {
        return Err(CoreError::Data("no instances to measure recall on".into()));
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub steps_run: u64,
    pub val_recall: f64,
    pub losses: Vec<f64>,
}

/// Class-agnostic pretraining of the proposal machinery. Returns the store
/// (with every parameter under `encoder.`), the model, and a report.
pub fn pretrain_proposals(
    corpus: &Corpus,
    cfg: &RunConfig,
) -> Result<(ParamStore, ProposalEncoder, PretrainReport), CoreError> {
    let mut store = ParamStore::new();
    let mut rng = seeded(split(cfg.seed, "encoder-init"));
    let encoder = ProposalEncoder::new(&mut store, cfg, &mut rng);
    let mut data_rng = seeded(split(cfg.seed, "encoder-data"));

    let train_scene_ids: Vec<usize> = (0..corpus.meta.n_train_scenes).collect();
    let val_scene_ids: Vec<usize> = (corpus.meta.n_train_scenes..corpus.scenes.len()).collect();
    if train_scene_ids.is_empty() {
        return Err(CoreError::Data("corpus has no train scenes".into()));
    }

    // neighbor tables, computed once per touched scene
    let mut nbr_cache: std::collections::BTreeMap<usize, Vec<u32>> = Default::default();
    let mut nbrs_for = |scene_id: usize, corpus: &Corpus| -> Result<Vec<u32>, CoreError> {
        if let Some(n) = nbr_cache.get(&scene_id) {
            return Ok(n.clone());
        }
        let n = knn_indices(&corpus.scenes[scene_id], cfg.knn_k)?;
        nbr_cache.insert(scene_id, n.clone());
        Ok(n)
    };

    // class labels are ignored during pretraining, so the classification
    // cost term is weighted zero
    let weights = LossWeights { cls: 0.0, lm: 0.0, l1: 0.0, giou: 0.0, ..LossWeights::default() };
    let fp = FocalParams::default();
    let mut adam = Adam::new(Some(cfg.grad_clip));
    let mut losses = Vec::new();
    let mut recall = 0.0;
    let mut steps_run = 0;

    for step in 1..=cfg.pretrain_steps {
        let scene_id = train_scene_ids[data_rng.gen_range(0..train_scene_ids.len())];
        let scene = &corpus.scenes[scene_id];
        if scene.instances.is_empty() {
            continue;
        }
        let nbrs = nbrs_for(scene_id, corpus)?;

        let tape = Tape::new();
        let f_point = encoder.encode_points(&tape, scene, &nbrs)?;
        let f_q = encoder.propose(&tape, &f_point);
        let logits = encoder.proposal_mask_logits(&tape, &f_q, &f_point);

        let targets: Vec<MatchTarget> = scene
            .instances
            .iter()
            .map(|inst| {
                Ok(MatchTarget {
                    mask: scene.instance_mask(inst.instance_id)?,
                    box3: inst.box3,
                    klass: Klass::Target,
                })
            })
            .collect::<Result<_, CoreError>>()?;

        let n = scene.n_points;
        let sub: Vec<usize> = if n > cfg.cost_subsample {
            (0..cfg.cost_subsample)
                .map(|_| data_rng.gen_range(0..n))
                .collect()
        } else {
            (0..n).collect()
        };
        let dummy_probs = vec![0.5; encoder.k_proposals * 2];
        let cm = matching_cost(&dummy_probs, &logits.data(), n, &targets, &weights, fp, &sub);
        let pairs = hungarian(&cm)?;

        let zero = tape.constant(vec![0.0], vec![1]);
        let mut loss = zero;
        for &(pi, tj) in &pairs {
            let row = logits.slice_rows(pi, 1);
            let gt: Vec<f64> = (0..n)
                .map(|i| if targets[tj].mask.get(i) { 1.0 } else { 0.0 })
                .collect();
            loss = loss
                .add(&crate::matching::dice_loss(&tape, &row, &gt).scale(weights.dice))
                .add(&crate::matching::mask_focal_loss(&tape, &row, &gt, fp).scale(weights.maskfocal));
        }
        let loss = loss.scale(1.0 / pairs.len().max(1) as f64);
        let loss_val = loss.scalar();
        if !loss_val.is_finite() {
            return Err(CoreError::Divergence(format!(
                "pretraining loss became non-finite at step {step}"
            )));
        }
        losses.push(loss_val);

        tape.backward(&loss)?;
        store.harvest(&tape);
        adam.step(store.params(), cfg.pretrain_lr)?;
        steps_run = step;

        if step % 250 == 0 || step == cfg.pretrain_steps {
            let eval_ids = if val_scene_ids.is_empty() { &train_scene_ids } else { &val_scene_ids };
            let mut pairs_eval = Vec::new();
            for &sid in eval_ids.iter().take(8) {
                let nb = nbrs_for(sid, corpus)?;
                pairs_eval.push((sid, nb));
            }
            let refs: Vec<(&Scene, &[u32])> = pairs_eval
                .iter()
                .map(|(sid, nb)| (&corpus.scenes[*sid], nb.as_slice()))
                .collect();
            recall = proposal_recall(&encoder, &refs)?;
            if recall >= 0.9 {
                break;
            }
        }
    }

    store.freeze_prefix("encoder.");
    Ok((
        store,
        encoder,
        PretrainReport { steps_run, val_recall: recall, losses },
    ))
}
