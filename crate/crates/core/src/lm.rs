//! Tiny decoder-only language model: closed-vocabulary tokenizer with the
//! reserved [point] and [SEG] tokens, causal transformer backbone, OC-token
//! expansion of the [point] position, response supervision, and a low-rank
//! adapter for linear layers.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use plm_tensor::nn::{
    AttnMask, Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention, Param, ParamStore,
};
use plm_tensor::ops::concat_rows;
use plm_tensor::{Tape, Tensor};

use crate::config::RunConfig;
use crate::scene::COLOR_BUCKETS;
use crate::taxonomy::Taxonomy;
use crate::CoreError;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const POINT: usize = 3;
pub const SEG: usize = 4;

const RESERVED: [&str; 5] = ["[PAD]", "[BOS]", "[EOS]", "[point]", "[SEG]"];

/// Every non-category word the prompt and response templates can emit.
const TEMPLATE_WORDS: &[&str] = &[
    "can", "you", "segment", "the", "objects", "in", "this", "point", "cloud", "?", "where",
    "is", "object", ":", ".", ",", "described", "leftmost", "largest", "next", "to", "sure",
    "segmented", "nothing",
];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    by_str: BTreeMap<String, usize>,
}

impl Vocab {
    /// Closed vocabulary: reserved tokens, template words, category-name
    /// words, color-bucket names.
    pub fn build(tax: &Taxonomy) -> Vocab {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let push = |w: &str, tokens: &mut Vec<String>| {
            let w = w.to_lowercase();
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        };
        for w in TEMPLATE_WORDS {
            push(w, &mut tokens);
        }
        for c in &tax.categories {
            for w in c.name.split_whitespace() {
                push(w, &mut tokens);
            }
        }
        for (name, _) in COLOR_BUCKETS {
            push(name, &mut tokens);
        }
        let mut v = Vocab { tokens, by_str: BTreeMap::new() };
        v.rebuild_index();
        v
    }

    pub fn rebuild_index(&mut self) {
        self.by_str = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> Option<usize> {
        self.by_str.get(tok).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Word-level tokenization with [BOS] prepended. Words are matched
    /// case-insensitively; punctuation must be space-separated.
    pub fn tokenize_prompt(&self, text: &str) -> Result<Vec<usize>, CoreError> {
        let mut ids = vec![BOS];
        for w in text.split_whitespace() {
            if w == "[point]" {
                ids.push(POINT);
                continue;
            }
            let id = self
                .id(&w.to_lowercase())
                .ok_or_else(|| CoreError::Data(format!("word not in vocabulary: {w}")))?;
            ids.push(id);
        }
        Ok(ids)
    }

    /// Inverse of `tokenize_prompt` up to case.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != BOS && i != PAD)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// The fixed supervised response: "Sure, segmented [SEG]." then [EOS].
    pub fn response_ids(&self) -> Vec<usize> {
        vec![
            self.id("sure").unwrap(),
            self.id(",").unwrap(),
            self.id("segmented").unwrap(),
            SEG,
            self.id(".").unwrap(),
            EOS,
        ]
    }

    /// Supervised response that echoes the referent phrase before [SEG]:
    /// "sure , segmented {phrase} [SEG] ." then [EOS]. Predicting the echo
    /// forces the model to commit to a referent before the [SEG] state is
    /// read out.
    pub fn response_ids_for(&self, phrase: &str) -> Result<Vec<usize>, CoreError> {
        let mut ids = vec![
            self.id("sure").unwrap(),
            self.id(",").unwrap(),
            self.id("segmented").unwrap(),
        ];
        for w in phrase.split_whitespace() {
            let id = self
                .id(&w.to_lowercase())
                .ok_or_else(|| CoreError::Data(format!("word not in vocabulary: {w}")))?;
            ids.push(id);
        }
        ids.push(SEG);
        ids.push(self.id(".").unwrap());
        ids.push(EOS);
        Ok(ids)
    }
}

/// Low-rank adapter around a linear layer: base(x) + (alpha/r) * (x A) B,
/// with B zero-initialized so the wrap starts as the identity.
#[derive(Clone)]
pub struct LoraLinear {
    pub base: Linear,
    pub a: Param,
    pub b: Param,
    pub rank: usize,
    pub alpha: f64,
    pub enabled: bool,
}

impl LoraLinear {
    pub fn wrap(
        store: &mut ParamStore,
        name: &str,
        base: Linear,
        rank: usize,
        alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, CoreError> {
        if rank == 0 || rank > base.d_in.min(base.d_out) {
            return Err(CoreError::Config(format!(
                "adapter rank {rank} invalid for a {}x{} layer",
                base.d_in, base.d_out
            )));
        }
        let a = store.register(
            &format!("{name}.lora_a"),
            vec![base.d_in, rank],
            plm_tensor::nn::xavier_uniform(rng, base.d_in, rank, base.d_in * rank),
        );
        let b = store.register(
            &format!("{name}.lora_b"),
            vec![rank, base.d_out],
            vec![0.0; rank * base.d_out],
        );
        Ok(LoraLinear { base, a, b, rank, alpha, enabled: true })
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Tensor {
        let base = self.base.forward(tape, x);
        if !self.enabled {
            return base;
        }
        let delta = x
            .matmul(&self.a.tensor(tape))
            .matmul(&self.b.tensor(tape))
            .scale(self.alpha / self.rank as f64);
        base.add(&delta)
    }

    /// Adapter-only training mode: base weights frozen.
    pub fn freeze_base(&self) {
        self.base.w.set_trainable(false);
        self.base.b.set_trainable(false);
    }
}

struct LmBlock {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ff: FeedForward,
    ln2: LayerNorm,
}

/// Decoder-only causal transformer over the mixed text/OC embedding
/// sequence.
pub struct LmModel {
    pub d: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
    tok: Embedding,
    pos: Embedding,
    blocks: Vec<LmBlock>,
    final_ln: LayerNorm,
    head: Linear,
}

/// Training-forward output: response cross-entropy and the [SEG] hidden
/// state (1 x d_lm).
pub struct LmTrainOut {
    pub lm_loss: Tensor,
    pub y_seg: Tensor,
}

impl LmModel {
    pub fn new(
        store: &mut ParamStore,
        cfg: &RunConfig,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.d_lm;
        let blocks = (0..cfg.lm_layers)
            .map(|i| LmBlock {
                attn: MultiHeadAttention::new(store, &format!("lm.block{i}.attn"), d, cfg.lm_heads, rng),
                ln1: LayerNorm::new(store, &format!("lm.block{i}.ln1"), d),
                ff: FeedForward::new(store, &format!("lm.block{i}.ff"), d, 4 * d, d, rng),
                ln2: LayerNorm::new(store, &format!("lm.block{i}.ln2"), d),
            })
            .collect();
        LmModel {
            d,
            max_seq: cfg.max_seq,
            vocab_size,
            tok: Embedding::new(store, "lm.tok", vocab_size, d, rng),
            pos: Embedding::new(store, "lm.pos", cfg.max_seq, d, rng),
            blocks,
            final_ln: LayerNorm::new(store, "lm.final_ln", d),
            head: Linear::new(store, "lm.head", d, vocab_size, rng),
        }
    }

    /// Embed token ids, replacing the single [point] position with all K OC
    /// rows. Returns the embedding sequence and a map from original token
    /// position to expanded position.
    pub fn embed_and_pad(
        &self,
        tape: &Tape,
        ids: &[usize],
        oc: &Tensor,
    ) -> Result<(Tensor, Vec<usize>), CoreError> {
        let n_point = ids.iter().filter(|&&i| i == POINT).count();
        if n_point != 1 {
            return Err(CoreError::Data(format!(
                "prompt must contain exactly one [point] token, found {n_point}"
            )));
        }
        let p_idx = ids.iter().position(|&i| i == POINT).unwrap();
        let k = oc.rows();
        let t_len = ids.len() - 1 + k;
        if t_len > self.max_seq {
            return Err(CoreError::Config(format!(
                "sequence length {t_len} exceeds the position table ({})",
                self.max_seq
            )));
        }

        let before = self.tok.forward(tape, &ids[..p_idx]);
        let after = self.tok.forward(tape, &ids[p_idx + 1..]);
        let cat = if p_idx == 0 && p_idx + 1 == ids.len() {
            oc.clone()
        } else if p_idx == 0 {
            concat_rows(&[oc, &after])
        } else if p_idx + 1 == ids.len() {
            concat_rows(&[&before, oc])
        } else {
            concat_rows(&[&before, oc, &after])
        };
        let positions: Vec<usize> = (0..t_len).collect();
        let emb = cat.add(&self.pos.forward(tape, &positions));

        let map: Vec<usize> = (0..ids.len())
            .map(|j| if j <= p_idx { j } else { j + k - 1 })
            .collect();
        Ok((emb, map))
    }

    fn backbone(&self, tape: &Tape, emb: &Tensor) -> Tensor {
        let mut h = emb.clone();
        for b in &self.blocks {
            let att = b.attn.forward(tape, &h, &h, &h, AttnMask::Causal);
            h = b.ln1.forward(tape, &h.add(&att));
            let ff = b.ff.forward(tape, &h);
            h = b.ln2.forward(tape, &h.add(&ff));
        }
        self.final_ln.forward(tape, &h)
    }

    /// Final-layer hidden states for a full token sequence (teacher forcing
    /// or re-scoring a generated sequence).
    pub fn hidden_states(
        &self,
        tape: &Tape,
        ids: &[usize],
        oc: &Tensor,
    ) -> Result<(Tensor, Vec<usize>), CoreError> {
        let (emb, map) = self.embed_and_pad(tape, ids, oc)?;
        Ok((self.backbone(tape, &emb), map))
    }

    /// Teacher-forced forward over prompt + response. The response tokens
    /// are the supervised positions; y_seg is the hidden state where the
    /// [SEG] token sits in the input.
    pub fn forward_train(
        &self,
        tape: &Tape,
        prompt_ids: &[usize],
        response_ids: &[usize],
        oc: &Tensor,
    ) -> Result<LmTrainOut, CoreError> {
        let mut full: Vec<usize> = prompt_ids.to_vec();
        full.extend_from_slice(response_ids);
        // input drops the final token; each position predicts its successor
        let input = &full[..full.len() - 1];
        let (hidden, map) = self.hidden_states(tape, input, oc)?;
        let logits = self.head.forward(tape, &hidden);
        let logp = logits.log_softmax_rows();

        // positions predicting each response token
        let mut picks = Vec::with_capacity(response_ids.len());
        for (r, &target) in response_ids.iter().enumerate() {
            let full_idx = prompt_ids.len() + r;
            let input_pos = map[full_idx - 1];
            picks.push((input_pos, target));
        }
        let lm_loss = logp
            .gather_elems(&picks)
            .sum_all()
            .scale(-1.0 / picks.len() as f64);

        let seg_full = full
            .iter()
            .position(|&t| t == SEG)
            .ok_or_else(|| CoreError::Data("response has no [SEG] token".into()))?;
        let y_seg = hidden.slice_rows(map[seg_full], 1);
        Ok(LmTrainOut { lm_loss, y_seg })
    }

    /// Greedy decoding from a prompt until [EOS] or the length limit.
    /// Returns the generated ids (prompt excluded).
    pub fn generate(
        &self,
        prompt_ids: &[usize],
        oc_data: &[f64],
        max_new: usize,
    ) -> Result<Vec<usize>, CoreError> {
        assert_eq!(oc_data.len() % self.d, 0, "OC buffer width mismatch");
        let k = oc_data.len() / self.d;
        let mut ids = prompt_ids.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if ids.len() - 1 + k >= self.max_seq {
                break;
            }
            let tape = Tape::new();
            let oc = tape.constant(oc_data.to_vec(), vec![k, self.d]);
            let (hidden, map) = self.hidden_states(&tape, &ids, &oc)?;
            let last = map[ids.len() - 1];
            let logits = self.head.forward(&tape, &hidden.slice_rows(last, 1));
            let row = logits.data();
            // structural placeholders are never valid generations
            let next = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != PAD && i != BOS && i != POINT)
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            out.push(next);
            if next == EOS {
                break;
            }
            ids.push(next);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use plm_tensor::rng::seeded;

    fn vocab() -> Vocab {
        Vocab::build(&Taxonomy::default_taxonomy())
    }

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.d_lm = 32;
        cfg.lm_layers = 2;
        cfg.lm_heads = 2;
        cfg.max_seq = 64;
        cfg
    }

    #[test]
    fn vocabulary_covers_all_generated_prompts() {
        let v = vocab();
        let tax = Taxonomy::default_taxonomy();
        let gc = crate::scene::SceneGenConfig { n_points: 256, min_instances: 3, max_instances: 6 };
        let corpus = crate::corpus::generate_corpus(
            1,
            6,
            &gc,
            &tax,
            crate::config::DistractorMode::Semantic,
            "x",
        )
        .unwrap();
        for s in &corpus.samples {
            let ids = v.tokenize_prompt(&s.prompt).unwrap();
            assert_eq!(ids[0], BOS);
            assert_eq!(ids.iter().filter(|&&i| i == POINT).count(), 1);
            // round trip up to case
            assert_eq!(v.detokenize(&ids), s.prompt.to_lowercase());
        }
    }

    #[test]
    fn oov_word_is_reported() {
        let v = vocab();
        let err = v.tokenize_prompt("[point] segment the zeppelin").unwrap_err();
        assert!(err.to_string().contains("zeppelin"));
    }

    #[test]
    fn point_alone_tokenizes_to_bos_point() {
        let v = vocab();
        assert_eq!(v.tokenize_prompt("[point]").unwrap(), vec![BOS, POINT]);
    }

    #[test]
    fn response_supervises_six_positions() {
        let v = vocab();
        let r = v.response_ids();
        assert_eq!(r.len(), 6);
        assert_eq!(r[3], SEG);
        assert_eq!(*r.last().unwrap(), EOS);
        assert_eq!(r.iter().filter(|&&t| t == SEG).count(), 1);
    }

    #[test]
    fn embed_and_pad_expands_point_position() {
        let cfg = small_cfg();
        let v = vocab();
        let mut store = ParamStore::new();
        let mut rng = seeded(2);
        let lm = LmModel::new(&mut store, &cfg, v.len(), &mut rng);
        let tape = Tape::new();
        let k = 5;
        let oc = tape.constant(vec![0.1; k * cfg.d_lm], vec![k, cfg.d_lm]);
        let ids = v.tokenize_prompt("[point] can you segment the chair objects in this point cloud ?").unwrap();
        let (emb, map) = lm.embed_and_pad(&tape, &ids, &oc).unwrap();
        assert_eq!(emb.rows(), ids.len() - 1 + k);
        assert_eq!(map[0], 0);
        assert_eq!(map[1], 1); // the [point] position itself
        assert_eq!(map[2], 1 + k); // first token after the expansion

        // K=1 leaves the length unchanged
        let oc1 = tape.constant(vec![0.1; cfg.d_lm], vec![1, cfg.d_lm]);
        let (emb1, _) = lm.embed_and_pad(&tape, &ids, &oc1).unwrap();
        assert_eq!(emb1.rows(), ids.len());

        // zero or two [point] markers are contract errors
        let no_point: Vec<usize> = ids.iter().cloned().filter(|&i| i != POINT).collect();
        assert!(lm.embed_and_pad(&tape, &no_point, &oc).is_err());
        let mut two = ids.clone();
        two.push(POINT);
        assert!(lm.embed_and_pad(&tape, &two, &oc).is_err());
    }

    #[test]
    fn untrained_loss_near_log_vocab() {
        let cfg = small_cfg();
        let v = vocab();
        let mut store = ParamStore::new();
        let mut rng = seeded(3);
        let lm = LmModel::new(&mut store, &cfg, v.len(), &mut rng);
        let tape = Tape::new();
        let oc = tape.constant(vec![0.05; 4 * cfg.d_lm], vec![4, cfg.d_lm]);
        let ids = v.tokenize_prompt("[point] can you segment the sofa objects in this point cloud ?").unwrap();
        let out = lm.forward_train(&tape, &ids, &v.response_ids(), &oc).unwrap();
        let loss = out.lm_loss.scalar();
        let baseline = (v.len() as f64).ln();
        assert!(
            (loss - baseline).abs() / baseline < 0.25,
            "untrained loss {loss:.3} vs ln|V| {baseline:.3}"
        );
        assert_eq!(out.y_seg.shape(), &[1, cfg.d_lm]);
    }

    #[test]
    fn causality_logits_invariant_to_future_tokens() {
        let cfg = small_cfg();
        let v = vocab();
        let mut store = ParamStore::new();
        let mut rng = seeded(4);
        let lm = LmModel::new(&mut store, &cfg, v.len(), &mut rng);
        let k = 3;

        let base = v.tokenize_prompt("[point] can you segment the chair objects in this point cloud ?").unwrap();
        let mut altered = base.clone();
        let last = altered.len() - 1;
        altered[last] = v.id("table").unwrap();

        let tape = Tape::new();
        let oc = tape.constant(vec![0.2; k * cfg.d_lm], vec![k, cfg.d_lm]);
        let (h0, map0) = lm.hidden_states(&tape, &base, &oc).unwrap();
        let (h1, _) = lm.hidden_states(&tape, &altered, &oc).unwrap();
        let upto = map0[last]; // expanded position of the changed token
        let d = cfg.d_lm;
        let a = h0.data();
        let b = h1.data();
        assert_eq!(a[..upto * d], b[..upto * d], "past must be bitwise unaffected");
        assert!(a[upto * d..] != b[upto * d..]);
    }

    #[test]
    fn gradient_reaches_oc_tokens() {
        let cfg = small_cfg();
        let v = vocab();
        let mut store = ParamStore::new();
        let mut rng = seeded(5);
        let lm = LmModel::new(&mut store, &cfg, v.len(), &mut rng);
        let tape = Tape::new();
        let k = 4;
        let oc = tape.leaf(vec![0.1; k * cfg.d_lm], vec![k, cfg.d_lm], true);
        let ids = v.tokenize_prompt("[point] can you segment the lamp objects in this point cloud ?").unwrap();
        let out = lm.forward_train(&tape, &ids, &v.response_ids(), &oc).unwrap();
        tape.backward(&out.lm_loss).unwrap();
        let g = tape.grad_of(&oc).unwrap();
        assert!(g.iter().any(|&x| x != 0.0), "no gradient reached the OC embeddings");
    }

    #[test]
    fn adapter_at_init_is_bitwise_identity() {
        let mut store = ParamStore::new();
        let mut rng = seeded(6);
        let base = Linear::new(&mut store, "probe", 8, 6, &mut rng);
        let wrapped = LoraLinear::wrap(&mut store, "probe_ad", base.clone(), 4, 16.0, &mut rng).unwrap();
        let tape = Tape::new();
        let x = tape.constant((0..24).map(|i| (i as f64 * 0.7).sin()).collect(), vec![3, 8]);
        let y0 = base.forward(&tape, &x).to_vec();
        let y1 = wrapped.forward(&tape, &x).to_vec();
        assert!(y0.iter().zip(&y1).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!((wrapped.alpha / wrapped.rank as f64 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn adapter_invalid_rank_rejected() {
        let mut store = ParamStore::new();
        let mut rng = seeded(7);
        let base = Linear::new(&mut store, "probe", 8, 6, &mut rng);
        assert!(LoraLinear::wrap(&mut store, "bad", base.clone(), 0, 16.0, &mut rng).is_err());
        assert!(LoraLinear::wrap(&mut store, "bad2", base, 7, 16.0, &mut rng).is_err());
    }

    #[test]
    fn full_rank_adapter_fits_a_target_delta() {
        // with r = min dim the adapter spans every delta; fit one by descent
        let mut store = ParamStore::new();
        let mut rng = seeded(8);
        let d_in = 5;
        let d_out = 4;
        let base = Linear::new(&mut store, "probe", d_in, d_out, &mut rng);
        let wrapped =
            LoraLinear::wrap(&mut store, "ad", base.clone(), d_in.min(d_out), 16.0, &mut rng)
                .unwrap();
        wrapped.freeze_base();

        let delta: Vec<f64> = (0..d_in * d_out).map(|i| (i as f64 * 0.31).cos() * 0.5).collect();
        let probes: Vec<f64> = (0..8 * d_in).map(|i| (i as f64 * 0.17).sin()).collect();
        let mut adam = plm_tensor::optim::Adam::new(None);
        for _ in 0..4000 {
            let tape = Tape::new();
            let x = tape.constant(probes.clone(), vec![8, d_in]);
            let want = x
                .matmul(&tape.constant(delta.clone(), vec![d_in, d_out]))
                .add(&base.forward(&tape, &x));
            let got = wrapped.forward(&tape, &x);
            let diff = got.sub(&want);
            let loss = diff.mul(&diff).mean_all();
            tape.backward(&loss).unwrap();
            store.harvest(&tape);
            adam.step(store.params(), 5e-3).unwrap();
        }
        let tape = Tape::new();
        let x = tape.constant(probes.clone(), vec![8, d_in]);
        let want = x
            .matmul(&tape.constant(delta.clone(), vec![d_in, d_out]))
            .add(&base.forward(&tape, &x));
        let got = wrapped.forward(&tape, &x);
        let max_err = got
            .to_vec()
            .iter()
            .zip(want.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-6, "adapter fit max abs err {max_err}");
    }

    #[test]
    fn generate_emits_tokens_and_stops_on_eos() {
        let cfg = small_cfg();
        let v = vocab();
        let mut store = ParamStore::new();
        let mut rng = seeded(9);
        let lm = LmModel::new(&mut store, &cfg, v.len(), &mut rng);
        let oc = vec![0.1; 2 * cfg.d_lm];
        let ids = v.tokenize_prompt("[point] can you segment the oven objects in this point cloud ?").unwrap();
        let out = lm.generate(&ids, &oc, 10).unwrap();
        assert!(!out.is_empty());
        assert!(out.len() <= 10);
    }
}
