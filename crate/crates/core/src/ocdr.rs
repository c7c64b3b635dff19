//! Object-centric token fusion: proposal queries cross-attend over dense
//! point features and are projected to the LM width. Also the dense
//! patch-tokenizer used as an ablation baseline.

use rand_chacha::ChaCha8Rng;

use plm_tensor::nn::{
    AttnMask, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore,
};
use plm_tensor::{Tape, Tensor};

use crate::config::RunConfig;
use crate::scene::Scene;
use crate::CoreError;

/// Trainable fusion of (f_q, f_point) into K LM-width tokens.
pub struct OcdrFusion {
    pub d_in: usize,
    pub d_lm: usize,
    pub use_ffn: bool,
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
    proj: Linear,
}

impl OcdrFusion {
    pub fn new(store: &mut ParamStore, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_point;
        OcdrFusion {
            d_in: d,
            d_lm: cfg.d_lm,
            use_ffn: true,
            attn: MultiHeadAttention::new(store, "ocdr.attn", d, 4, rng),
            ln1: LayerNorm::new(store, "ocdr.ln1", d),
            ffn: FeedForward::new(store, "ocdr.ffn", d, 2 * d, d, rng),
            ln2: LayerNorm::new(store, "ocdr.ln2", d),
            proj: Linear::new(store, "ocdr.proj", d, cfg.d_lm, rng),
        }
    }

    /// f_OC = proj(block(f_q cross-attending f_point)), shape K x d_lm.
    pub fn fuse(&self, tape: &Tape, f_q: &Tensor, f_point: &Tensor) -> Result<Tensor, CoreError> {
        if f_q.cols() != self.d_in || f_point.cols() != self.d_in {
            return Err(CoreError::Config(format!(
                "fusion width mismatch: got {} and {}, expected {}",
                f_q.cols(),
                f_point.cols(),
                self.d_in
            )));
        }
        let att = self.attn.forward(tape, f_q, f_point, f_point, AttnMask::None);
        let mut q = self.ln1.forward(tape, &f_q.add(&att));
        if self.use_ffn {
            let ff = self.ffn.forward(tape, &q);
            q = self.ln2.forward(tape, &q.add(&ff));
        }
        Ok(self.proj.forward(tape, &q))
    }
}

/// Farthest-point sampling over scene coordinates; deterministic, seeded by
/// starting at point 0. Returns the chosen point indices.
pub fn farthest_point_sample(scene: &Scene, n: usize) -> Result<Vec<usize>, CoreError> {
    let total = scene.n_points;
    if n == 0 || n > total {
        return Err(CoreError::Config(format!(
            "cannot sample {n} centers from {total} points"
        )));
    }
    let mut chosen = Vec::with_capacity(n);
    let mut best = vec![f64::INFINITY; total];
    let mut cur = 0usize;
    chosen.push(cur);
    for _ in 1..n {
        let c = scene.xyz(cur);
        let mut far_i = 0;
        let mut far_d = f64::NEG_INFINITY;
        for (i, b) in best.iter_mut().enumerate() {
            let p = scene.xyz(i);
            let d = (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>();
            if d < *b {
                *b = d;
            }
            if *b > far_d {
                far_d = *b;
                far_i = i;
            }
        }
        cur = far_i;
        chosen.push(cur);
    }
    Ok(chosen)
}

/// ViT-style patch surrogate: each token is an MLP over the pooled features
/// of the points nearest its sampled center.
pub struct PatchTokenizer {
    pub d_lm: usize,
    mlp: FeedForward,
}

impl PatchTokenizer {
    pub fn new(store: &mut ParamStore, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Self {
        // per-patch features: center xyz, mean offset xyz, mean rgb, count share
        PatchTokenizer {
            d_lm: cfg.d_lm,
            mlp: FeedForward::new(store, "patch.mlp", 10, cfg.d_lm, cfg.d_lm, rng),
        }
    }

    pub fn tokenize(
        &self,
        tape: &Tape,
        scene: &Scene,
        n_tokens: usize,
    ) -> Result<Tensor, CoreError> {
        let centers = farthest_point_sample(scene, n_tokens)?;
        let n = scene.n_points;
        // assign every point to its nearest center
        let cxyz: Vec<[f64; 3]> = centers.iter().map(|&c| scene.xyz(c)).collect();
        let mut sums = vec![[0.0f64; 7]; n_tokens]; // xyz offset, rgb, count
        for i in 0..n {
            let p = scene.xyz(i);
            let mut bi = 0;
            let mut bd = f64::INFINITY;
            for (j, c) in cxyz.iter().enumerate() {
                let d = (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>();
                if d < bd {
                    bd = d;
                    bi = j;
                }
            }
            let o = i * 6;
            for k in 0..3 {
                sums[bi][k] += p[k] - cxyz[bi][k];
                sums[bi][3 + k] += scene.points[o + 3 + k];
            }
            sums[bi][6] += 1.0;
        }
        let mut feats = Vec::with_capacity(n_tokens * 10);
        for (j, s) in sums.iter().enumerate() {
            let cnt = s[6].max(1.0);
            feats.extend_from_slice(&[
                cxyz[j][0] / 3.0,
                cxyz[j][1] / 3.0,
                cxyz[j][2] / 3.0,
                s[0] / cnt,
                s[1] / cnt,
                s[2] / cnt,
                s[3] / cnt,
                s[4] / cnt,
                s[5] / cnt,
                s[6] / n as f64,
            ]);
        }
        let x = tape.constant(feats, vec![n_tokens, 10]);
        Ok(self.mlp.forward(tape, &x))
    }
}
