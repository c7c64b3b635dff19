//! Full model assembly: frozen proposal encoder, object-centric token
//! fusion, the language model, and the mask decoder in one parameter store,
//! with the training forward, the generation-driven inference path, and
//! checkpoint round-tripping.

use std::path::Path;

use serde::{Deserialize, Serialize};

use plm_tensor::nn::ParamStore;
use plm_tensor::rng::{seeded, split};
use plm_tensor::{ckpt, Tape, Tensor};

use crate::config::RunConfig;
use crate::encoder::{knn_indices, ProposalEncoder};
use crate::grd::{select_positive, Grd, GrdOutput, InstancePrediction};
use crate::lm::{LmModel, Vocab, SEG};
use crate::metrics::{BitMask, Box3};
use crate::ocdr::{OcdrFusion, PatchTokenizer};
use crate::scene::Scene;
use crate::CoreError;

/// Which token stream feeds the language model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenArm {
    /// K fused object-centric tokens (the default).
    Oc,
    /// Dense pooled-patch tokens, the ablation/benchmark baseline.
    Patch { tokens: usize },
}

/// Frozen per-scene encoder outputs, cacheable because the encoder never
/// trains during the main stage.
pub struct SceneFeatures {
    pub n_points: usize,
    /// N x d_point, row-major.
    pub f_point: Vec<f64>,
    /// K x d_point, row-major.
    pub f_q: Vec<f64>,
}

pub struct PlmModel {
    pub cfg: RunConfig,
    pub vocab: Vocab,
    pub token_arm: TokenArm,
    pub encoder: ProposalEncoder,
    pub fusion: OcdrFusion,
    pub lm: LmModel,
    pub grd: Grd,
    pub patch: PatchTokenizer,
}

/// Training-forward output for one sample.
pub struct TrainForward {
    pub lm_loss: Tensor,
    pub y_seg: Tensor,
    /// Set-prediction heads when the decoder is enabled.
    pub grd: Option<GrdOutput>,
    /// The single direct mask (1 x N) in the no-decoder arm.
    pub nodec_mask: Option<Tensor>,
    /// Per-object-token grounding probabilities (K x 1), present in the
    /// decoder arm when the OC token stream is active.
    pub aux_probs: Option<Tensor>,
}

/// Inference output for one prompt.
pub struct Inference {
    /// Generated token ids, prompt excluded, [EOS] included when reached.
    pub generated: Vec<usize>,
    /// How many [SEG] tokens the generation produced.
    pub seg_count: usize,
    /// Selected instances; empty unless exactly one [SEG] was generated.
    pub predictions: Vec<InstancePrediction>,
}

impl PlmModel {
    /// Fresh model with all submodules registered in one store. The encoder
    /// starts untrained; load pretrained values with `adopt_encoder`.
    pub fn new(cfg: &RunConfig, vocab: Vocab, token_arm: TokenArm) -> (ParamStore, PlmModel) {
        let mut store = ParamStore::new();
        let mut rng = seeded(split(cfg.seed, "model"));
        let model = PlmModel {
            cfg: cfg.clone(),
            token_arm,
            encoder: ProposalEncoder::new(&mut store, cfg, &mut rng),
            fusion: OcdrFusion::new(&mut store, cfg, &mut rng),
            lm: LmModel::new(&mut store, cfg, vocab.len(), &mut rng),
            grd: Grd::new(&mut store, cfg, &mut rng),
            patch: PatchTokenizer::new(&mut store, cfg, &mut rng),
            vocab,
        };
        (store, model)
    }

    /// Copy pretrained encoder values in by name and freeze them.
    pub fn adopt_encoder(store: &ParamStore, pretrained: &ParamStore) -> Result<(), CoreError> {
        for name in pretrained.names() {
            if !name.starts_with("encoder.") {
                continue;
            }
            let src = pretrained.get(name).unwrap();
            let dst = store.get(name).ok_or_else(|| {
                CoreError::Config(format!("pretrained parameter {name} has no slot"))
            })?;
            if dst.shape() != src.shape() {
                return Err(CoreError::Config(format!(
                    "pretrained parameter {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.set_value(src.value());
        }
        store.freeze_prefix("encoder.");
        Ok(())
    }

    /// Run the frozen encoder once for a scene; the result is cacheable.
    pub fn encode_scene(&self, scene: &Scene) -> Result<SceneFeatures, CoreError> {
        let nbrs = knn_indices(scene, self.cfg.knn_k)?;
        let tape = Tape::new();
        let f_point = self.encoder.encode_points(&tape, scene, &nbrs)?;
        let f_q = self.encoder.propose(&tape, &f_point);
        Ok(SceneFeatures {
            n_points: scene.n_points,
            f_point: f_point.to_vec(),
            f_q: f_q.to_vec(),
        })
    }

    fn feature_tensors(&self, tape: &Tape, feats: &SceneFeatures) -> (Tensor, Tensor) {
        let d = self.cfg.d_point;
        let f_point = tape.constant(feats.f_point.clone(), vec![feats.n_points, d]);
        let f_q = tape.constant(feats.f_q.clone(), vec![feats.f_q.len() / d, d]);
        (f_point, f_q)
    }

    /// The LM input tokens for this sample's point cloud, per the active arm.
    pub fn lm_tokens(
        &self,
        tape: &Tape,
        scene: &Scene,
        feats: &SceneFeatures,
    ) -> Result<(Tensor, Tensor), CoreError> {
        let (f_point, f_q) = self.feature_tensors(tape, feats);
        let tokens = match self.token_arm {
            TokenArm::Oc => self.fusion.fuse(tape, &f_q, &f_point)?,
            TokenArm::Patch { tokens } => self.patch.tokenize(tape, scene, tokens)?,
        };
        Ok((tokens, f_point))
    }

    /// Teacher-forced forward producing the LM loss and the head outputs.
    pub fn forward_train(
        &self,
        tape: &Tape,
        scene: &Scene,
        feats: &SceneFeatures,
        prompt_ids: &[usize],
        response_ids: &[usize],
    ) -> Result<TrainForward, CoreError> {
        let (oc, f_point) = self.lm_tokens(tape, scene, feats)?;
        let lm_out = self.lm.forward_train(tape, prompt_ids, response_ids, &oc)?;
        let (grd, nodec_mask, aux_probs) = if self.cfg.use_decoder {
            let y_hat = self.grd.decode(tape, &lm_out.y_seg, &oc);
            let out = crate::grd::GrdOutput {
                mask_logits: self.grd.predict_masks(tape, &y_hat, &f_point)?,
                class_probs: self.grd.classify_targets(tape, &y_hat, &lm_out.y_seg),
                boxes: self.grd.predict_boxes(tape, &y_hat),
            };
            // grounding labels are per-proposal, so only the OC arm trains it
            let aux = match self.token_arm {
                TokenArm::Oc => Some(self.grd.ground_tokens(tape, &lm_out.y_seg, &oc)),
                TokenArm::Patch { .. } => None,
            };
            (Some(out), None, aux)
        } else {
            (None, Some(self.grd.no_decoder_mask(tape, &lm_out.y_seg, &f_point)?), None)
        };
        Ok(TrainForward { lm_loss: lm_out.lm_loss, y_seg: lm_out.y_seg, grd, nodec_mask, aux_probs })
    }

    /// Generate a response, then condition the decoder on the [SEG] hidden
    /// state. Anything but exactly one generated [SEG] yields no instances.
    pub fn infer(
        &self,
        scene: &Scene,
        feats: &SceneFeatures,
        prompt_ids: &[usize],
    ) -> Result<Inference, CoreError> {
        let oc_data = {
            let tape = Tape::new();
            self.lm_tokens(&tape, scene, feats)?.0.to_vec()
        };
        let generated = self.lm.generate(prompt_ids, &oc_data, 24)?;
        let seg_count = generated.iter().filter(|&&t| t == SEG).count();
        if seg_count != 1 {
            return Ok(Inference { generated, seg_count, predictions: Vec::new() });
        }
        let seg_pos = generated.iter().position(|&t| t == SEG).unwrap();
        let mut ids = prompt_ids.to_vec();
        ids.extend_from_slice(&generated[..=seg_pos]);

        let tape = Tape::new();
        let (oc, f_point) = self.lm_tokens(&tape, scene, feats)?;
        let (hidden, map) = self.lm.hidden_states(&tape, &ids, &oc)?;
        let y_seg = hidden.slice_rows(map[ids.len() - 1], 1);

        let predictions = if self.cfg.use_decoder {
            let out = self.grd.forward(&tape, &y_seg, &oc, &f_point)?;
            select_positive(&out, 0.5)?
        } else {
            let logits = self.grd.no_decoder_mask(&tape, &y_seg, &f_point)?;
            let row = logits.to_vec();
            let mask = BitMask::from_logits(&row);
            let box3 = Box3::tight(mask.indices().into_iter().map(|i| scene.xyz(i)))
                .unwrap_or(Box3 { center: [0.0; 3], size: [1e-3; 3] });
            vec![InstancePrediction {
                query: 0,
                mask,
                box3,
                targetness: 1.0,
                distractorness: 0.0,
            }]
        };
        Ok(Inference { generated, seg_count, predictions })
    }

    /// Write all parameters plus enough metadata to rebuild the model.
    pub fn save_checkpoint(
        &self,
        store: &ParamStore,
        path: &Path,
        extra: serde_json::Value,
    ) -> Result<(), CoreError> {
        let meta = serde_json::json!({
            "config": self.cfg,
            "config_hash": self.cfg.hash(),
            "vocab": self.vocab,
            "token_arm": self.token_arm,
            "extra": extra,
        });
        ckpt::save(store, &meta, path).map_err(CoreError::from)
    }

    /// Rebuild a model and its store from a checkpoint file.
    pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, PlmModel), CoreError> {
        let loaded = ckpt::load(path)?;
        let cfg: RunConfig = serde_json::from_value(loaded.meta["config"].clone())
            .map_err(|e| CoreError::Io(path.display().to_string(), e.to_string()))?;
        cfg.validate()?;
        let mut vocab: Vocab = serde_json::from_value(loaded.meta["vocab"].clone())
            .map_err(|e| CoreError::Io(path.display().to_string(), e.to_string()))?;
        vocab.rebuild_index();
        let token_arm: TokenArm = serde_json::from_value(loaded.meta["token_arm"].clone())
            .map_err(|e| CoreError::Io(path.display().to_string(), e.to_string()))?;
        let (store, model) = PlmModel::new(&cfg, vocab, token_arm);
        ckpt::restore(&store, &loaded)?;
        store.freeze_prefix("encoder.");
        Ok((store, model))
    }
}
