//! Parameters and the small set of layers the models are built from.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng as _;
use rand_chacha::ChaCha8Rng;

use crate::ops::concat_cols;
use crate::tape::{Tape, Tensor};

pub(crate) struct ParamInner {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
    /// Leaf created on the current tape, cleared on harvest.
    pub node: Option<(Tape, usize)>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// A named, persistent parameter. Cloning shares the underlying storage.
#[derive(Clone)]
pub struct Param {
    pub(crate) inner: Rc<RefCell<ParamInner>>,
}

impl Param {
    /// Leaf tensor for this parameter on `tape`. Repeated calls within the
    /// same tape return the same leaf so gradients accumulate in one place.
    pub fn tensor(&self, tape: &Tape) -> Tensor {
        let mut p = self.inner.borrow_mut();
        if let Some((ptape, id)) = &p.node {
            if ptape.same_tape(tape) {
                return tape.tensor_by_id(*id);
            }
        }
        let t = tape.leaf(p.value.clone(), p.shape.clone(), p.trainable);
        p.node = Some((tape.clone(), t.node_id()));
        t
    }

    pub fn name(&self) -> String {
        self.inner.borrow().name.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Vec<f64> {
        self.inner.borrow().value.clone()
    }

    pub fn set_value(&self, v: Vec<f64>) {
        let mut p = self.inner.borrow_mut();
        assert_eq!(v.len(), p.value.len(), "set_value length mismatch for {}", p.name);
        p.value = v;
    }

    pub fn grad(&self) -> Vec<f64> {
        self.inner.borrow().grad.clone()
    }

    pub fn trainable(&self) -> bool {
        self.inner.borrow().trainable
    }

    pub fn set_trainable(&self, t: bool) {
        self.inner.borrow_mut().trainable = t;
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Registry of every parameter in a model, keyed by name.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: Vec<usize>, value: Vec<f64>) -> Param {
        assert_eq!(value.len(), shape.iter().product::<usize>());
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let n = value.len();
        let p = Param {
            inner: Rc::new(RefCell::new(ParamInner {
                name: name.to_string(),
                shape,
                value,
                grad: vec![0.0; n],
                trainable: true,
                node: None,
                m: vec![0.0; n],
                v: vec![0.0; n],
            })),
        };
        self.by_name.insert(name.to_string(), self.params.len());
        self.params.push(p.clone());
        p
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.by_name.keys()
    }

    /// Mark every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&self, prefix: &str) {
        for p in &self.params {
            if p.name().starts_with(prefix) {
                p.set_trainable(false);
            }
        }
    }

    /// Pull gradients off the tape into the parameters' grad buffers.
    pub fn harvest(&self, tape: &Tape) {
        for p in &self.params {
            let mut inner = p.inner.borrow_mut();
            let node = inner.node.take();
            if let Some((ptape, id)) = node {
                if !ptape.same_tape(tape) || !inner.trainable {
                    continue;
                }
                if let Some(g) = tape.grad_by_id(id) {
                    for (acc, gi) in inner.grad.iter_mut().zip(&g) {
                        *acc += gi;
                    }
                }
            }
        }
    }

    /// Fingerprint of the values of all parameters under `prefix`, used to
    /// verify freeze contracts.
    pub fn checksum_prefix(&self, prefix: &str) -> u64 {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for name in self.by_name.keys() {
            if !name.starts_with(prefix) {
                continue;
            }
            let p = self.get(name).unwrap();
            h.update(name.as_bytes());
            for v in p.value() {
                h.update(v.to_le_bytes());
            }
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

/// Scaled uniform init, limit sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// Fully-connected layer; weight stored as [in, out] so forward is x @ w + b.
#[derive(Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.register(
            &format!("{name}.w"),
            vec![d_in, d_out],
            xavier_uniform(rng, d_in, d_out, d_in * d_out),
        );
        let b = store.register(&format!("{name}.b"), vec![d_out], vec![0.0; d_out]);
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Tensor {
        x.matmul(&self.w.tensor(tape)).add_rowvec(&self.b.tensor(tape))
    }
}

/// Layer normalization with learned affine.
#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.register(&format!("{name}.gamma"), vec![d], vec![1.0; d]),
            beta: store.register(&format!("{name}.beta"), vec![d], vec![0.0; d]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Tensor {
        x.layer_norm_rows(self.eps)
            .mul_rowvec(&self.gamma.tensor(tape))
            .add_rowvec(&self.beta.tensor(tape))
    }
}

/// Attention masking mode.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    None,
    /// Query position i attends only to key positions <= i.
    Causal,
}

const MASK_NEG: f64 = -1e30;

/// Multi-head scaled dot-product attention with output projection.
#[derive(Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(d % heads == 0, "model width {d} not divisible by heads {heads}");
        MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.q"), d, d, rng),
            wk: Linear::new(store, &format!("{name}.k"), d, d, rng),
            wv: Linear::new(store, &format!("{name}.v"), d, d, rng),
            wo: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
            d,
        }
    }

    pub fn forward(&self, tape: &Tape, q: &Tensor, k: &Tensor, v: &Tensor, mask: AttnMask) -> Tensor {
        let lq = q.rows();
        let lk = k.rows();
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let qp = self.wq.forward(tape, q);
        let kp = self.wk.forward(tape, k);
        let vp = self.wv.forward(tape, v);

        let bias = match mask {
            AttnMask::None => None,
            AttnMask::Causal => {
                let mut m = vec![0.0; lq * lk];
                for i in 0..lq {
                    for j in 0..lk {
                        if j > i {
                            m[i * lk + j] = MASK_NEG;
                        }
                    }
                }
                Some(tape.constant(m, vec![lq, lk]))
            }
        };

        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = qp.slice_cols(h * dh, dh);
            let kh = kp.slice_cols(h * dh, dh);
            let vh = vp.slice_cols(h * dh, dh);
            let mut scores = qh.matmul(&kh.t()).scale(scale);
            if let Some(b) = &bias {
                scores = scores.add(b);
            }
            let attn = scores.softmax_rows();
            head_outs.push(attn.matmul(&vh));
        }
        let refs: Vec<&Tensor> = head_outs.iter().collect();
        self.wo.forward(tape, &concat_cols(&refs))
    }
}

/// Token/position lookup table.
#[derive(Clone)]
pub struct Embedding {
    pub weight: Param,
    pub d: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, n: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Embedding {
            weight: store.register(&format!("{name}.w"), vec![n, d], xavier_uniform(rng, n, d, n * d)),
            d,
        }
    }

    pub fn forward(&self, tape: &Tape, ids: &[usize]) -> Tensor {
        self.weight.tensor(tape).gather_rows(ids)
    }
}

/// Two-layer MLP with ReLU.
#[derive(Clone)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            l1: Linear::new(store, &format!("{name}.1"), d, hidden, rng),
            l2: Linear::new(store, &format!("{name}.2"), hidden, d_out, rng),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Tensor {
        self.l2.forward(tape, &self.l1.forward(tape, x).relu())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn param_leaf_is_shared_within_tape() {
        let mut store = ParamStore::new();
        let p = store.register("w", vec![2], vec![1.0, 2.0]);
        let tape = Tape::new();
        let a = p.tensor(&tape);
        let b = p.tensor(&tape);
        let loss = a.add(&b).sum_all();
        tape.backward(&loss).unwrap();
        store.harvest(&tape);
        // both uses flow into the same leaf
        assert_eq!(p.grad(), vec![2.0, 2.0]);
    }

    #[test]
    fn frozen_param_gets_no_grad() {
        let mut store = ParamStore::new();
        let p = store.register("enc.w", vec![2], vec![1.0, 2.0]);
        store.freeze_prefix("enc.");
        let tape = Tape::new();
        let loss = p.tensor(&tape).sum_all();
        tape.backward(&loss).unwrap();
        store.harvest(&tape);
        assert_eq!(p.grad(), vec![0.0, 0.0]);
    }

    #[test]
    fn attention_uniform_when_keys_identical() {
        let mut store = ParamStore::new();
        let mut rng = seeded(1);
        let d = 8;
        let mha = MultiHeadAttention::new(&mut store, "attn", d, 2, &mut rng);
        let tape = Tape::new();
        let q = tape.constant(vec![0.3; d], vec![1, d]);
        // three identical keys/values: attention output equals attending to one
        let key_row: Vec<f64> = (0..d).map(|i| i as f64 * 0.1).collect();
        let mut keys = Vec::new();
        for _ in 0..3 {
            keys.extend_from_slice(&key_row);
        }
        let k3 = tape.constant(keys.clone(), vec![3, d]);
        let v3 = tape.constant(keys.clone(), vec![3, d]);
        let k1 = tape.constant(key_row.clone(), vec![1, d]);
        let v1 = tape.constant(key_row, vec![1, d]);
        let out3 = mha.forward(&tape, &q, &k3, &v3, AttnMask::None).to_vec();
        let out1 = mha.forward(&tape, &q, &k1, &v1, AttnMask::None).to_vec();
        for (a, b) in out3.iter().zip(&out1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_blocks_future_exactly() {
        let mut store = ParamStore::new();
        let mut rng = seeded(2);
        let d = 8;
        let mha = MultiHeadAttention::new(&mut store, "attn", d, 2, &mut rng);
        let tape = Tape::new();
        let base: Vec<f64> = (0..3 * d).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut perturbed = base.clone();
        for v in &mut perturbed[2 * d..] {
            *v += 10.0; // change only token 2
        }
        let x0 = tape.constant(base, vec![3, d]);
        let x1 = tape.constant(perturbed, vec![3, d]);
        let y0 = mha.forward(&tape, &x0, &x0, &x0, AttnMask::Causal).to_vec();
        let y1 = mha.forward(&tape, &x1, &x1, &x1, AttnMask::Causal).to_vec();
        // positions 0 and 1 must be bitwise unchanged
        assert_eq!(&y0[..2 * d], &y1[..2 * d]);
    }
}
