//! Main training stage: frozen-feature caching, batched steps over the
//! train split, set-prediction plus LM losses, warmup/decay schedule,
//! JSON-lines step logs, and periodic checkpoints with a frozen-encoder
//! checksum guard.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use plm_tensor::nn::ParamStore;
use plm_tensor::optim::Adam;
use plm_tensor::rng::{seeded, split};
use plm_tensor::Tape;

use crate::config::{DistractorMode, RunConfig};
use crate::corpus::{Corpus, Sample};
use crate::lm::Vocab;
use crate::matching::{
    dice_loss, focal_loss, lr_schedule, mask_focal_loss, total_loss, Klass, MatchTarget,
};
use crate::metrics::BitMask;
use crate::model::{PlmModel, SceneFeatures, TokenArm};
use crate::scene::{select_distractors, Scene};
use crate::CoreError;

/// One training-step record, also the JSONL log line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub total: f64,
    pub cls: f64,
    pub mask: f64,
    pub bbox: f64,
    pub lm: f64,
    #[serde(default)]
    pub aux: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub struct TrainReport {
    pub steps_run: u64,
    pub records: Vec<StepRecord>,
    pub encoder_checksum: u64,
    pub last_checkpoint: Option<PathBuf>,
}

/// The matchable set for one sample: its targets as class 0 and its
/// distractors (chosen under `mode`) as class 1.
pub fn build_match_targets(
    scene: &Scene,
    sample: &Sample,
    corpus: &Corpus,
    mode: DistractorMode,
    sample_idx: usize,
    seed: u64,
) -> Result<Vec<MatchTarget>, CoreError> {
    let mut out = Vec::new();
    for &id in &sample.targets {
        let inst = scene.instance(id)?;
        out.push(MatchTarget {
            mask: scene.instance_mask(id)?,
            box3: inst.box3,
            klass: Klass::Target,
        });
    }
    // the corpus bakes in semantic-mode distractors; other modes recompute
    let distractors: Vec<u32> = if mode == DistractorMode::Semantic {
        sample.distractors.clone()
    } else {
        let mut rng = seeded(split(split(seed, "distractors"), &sample_idx.to_string()));
        select_distractors(scene, &sample.targets, &corpus.taxonomy, mode, &mut rng)?
    };
    for id in distractors {
        let inst = scene.instance(id)?;
        out.push(MatchTarget {
            mask: scene.instance_mask(id)?,
            box3: inst.box3,
            klass: Klass::Distractor,
        });
    }
    Ok(out)
}

fn mask_to_f64(m: &crate::metrics::BitMask) -> Vec<f64> {
    (0..m.len()).map(|i| if m.get(i) { 1.0 } else { 0.0 }).collect()
}

fn append_jsonl(path: &Path, rec: &StepRecord) -> Result<(), CoreError> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CoreError::Io(path.display().to_string(), e.to_string()))?;
    let line = serde_json::to_string(rec).expect("record serializes");
    writeln!(f, "{line}").map_err(|e| CoreError::Io(path.display().to_string(), e.to_string()))
}

/// Run the main training stage. `encoder_store` carries pretrained encoder
/// values; when absent the randomly initialized encoder is frozen as-is
/// (useful for fast tests). Artifacts (log + checkpoints) are written when
/// `out_dir` is given.
pub fn train(
    corpus: &Corpus,
    cfg: &RunConfig,
    token_arm: TokenArm,
    encoder_store: Option<&ParamStore>,
    out_dir: Option<&Path>,
) -> Result<(ParamStore, PlmModel, TrainReport), CoreError> {
    train_prefix(corpus, cfg, token_arm, encoder_store, out_dir, None)
}

/// Like [`train`], but optionally stops after `stop_after` steps while
/// keeping the learning-rate schedule of the full `cfg.steps` horizon —
/// the resulting step records are a bit-exact prefix of the full run's.
pub fn train_prefix(
    corpus: &Corpus,
    cfg: &RunConfig,
    token_arm: TokenArm,
    encoder_store: Option<&ParamStore>,
    out_dir: Option<&Path>,
    stop_after: Option<u64>,
) -> Result<(ParamStore, PlmModel, TrainReport), CoreError> {
    cfg.validate()?;
    let vocab = Vocab::build(&corpus.taxonomy);
    let (store, model) = PlmModel::new(cfg, vocab, token_arm);
    if let Some(pre) = encoder_store {
        PlmModel::adopt_encoder(&store, pre)?;
    } else {
        store.freeze_prefix("encoder.");
    }
    let encoder_checksum = store.checksum_prefix("encoder.");

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::Io(dir.display().to_string(), e.to_string()))?;
    }
    let log_path = out_dir.map(|d| d.join("train_log.jsonl"));
    if let Some(p) = &log_path {
        // fresh log per run
        let _ = std::fs::remove_file(p);
    }

    // frozen features once per scene
    let feats: Vec<SceneFeatures> = corpus
        .scenes
        .iter()
        .map(|s| model.encode_scene(s))
        .collect::<Result<_, _>>()?;

    // frozen proposal masks once per scene, for the grounding labels
    let prop_masks: Vec<Vec<BitMask>> = feats
        .iter()
        .map(|f| {
            let tape = Tape::new();
            let d = cfg.d_point;
            let f_point = tape.constant(f.f_point.clone(), vec![f.n_points, d]);
            let f_q = tape.constant(f.f_q.clone(), vec![f.f_q.len() / d, d]);
            let logits = model.encoder.proposal_mask_logits(&tape, &f_q, &f_point);
            let data = logits.data();
            (0..f.f_q.len() / d)
                .map(|q| BitMask::from_logits(&data[q * f.n_points..(q + 1) * f.n_points]))
                .collect()
        })
        .collect();

    // per-sample static data for the train split
    let train_ids = corpus.train_samples();
    if train_ids.is_empty() {
        return Err(CoreError::Data("corpus has no training samples".into()));
    }
    let mut prompts = Vec::with_capacity(train_ids.len());
    let mut responses = Vec::with_capacity(train_ids.len());
    let mut targets = Vec::with_capacity(train_ids.len());
    for &si in &train_ids {
        let sample = &corpus.samples[si];
        prompts.push(model.vocab.tokenize_prompt(&sample.prompt)?);
        responses.push(model.vocab.response_ids_for(&sample.phrase)?);
        targets.push(build_match_targets(
            &corpus.scenes[sample.scene],
            sample,
            corpus,
            cfg.distractor_mode,
            si,
            cfg.seed,
        )?);
    }

    // grounding labels: per proposal, the fraction of its (frozen) mask that
    // lies inside the referent union; all zero for zero-target samples
    let mut ground_labels = Vec::with_capacity(train_ids.len());
    for &si in &train_ids {
        let sample = &corpus.samples[si];
        let masks = &prop_masks[sample.scene];
        let labels: Vec<f64> = if sample.targets.is_empty() {
            vec![0.0; masks.len()]
        } else {
            let union = corpus.scenes[sample.scene].union_mask(&sample.targets)?;
            masks
                .iter()
                .map(|m| {
                    let idx = m.indices();
                    if idx.is_empty() {
                        return 0.0;
                    }
                    let inter = idx.iter().filter(|&&i| union.get(i)).count();
                    inter as f64 / idx.len() as f64
                })
                .collect()
        };
        ground_labels.push(labels);
    }

    let mut order: Vec<usize> = (0..train_ids.len()).collect();
    let mut order_rng = seeded(split(cfg.seed, "batch-order"));
    order.shuffle(&mut order_rng);
    let mut cursor = 0usize;
    let mut cost_rng = seeded(split(cfg.seed, "cost-subsample"));

    let mut adam = Adam::new(Some(cfg.grad_clip));
    let mut records = Vec::with_capacity(cfg.steps as usize);
    let mut last_checkpoint: Option<PathBuf> = None;
    let n_points = cfg.n_points;

    let last_step = stop_after.map_or(cfg.steps, |s| s.min(cfg.steps));
    for step in 1..=last_step {
        let t0 = Instant::now();
        for p in store.params() {
            p.zero_grad();
        }
        let tape = Tape::new();
        let mut loss_sum = None;
        let mut agg = StepRecord {
            step,
            total: 0.0,
            cls: 0.0,
            mask: 0.0,
            bbox: 0.0,
            lm: 0.0,
            aux: 0.0,
            lr: 0.0,
            seconds: 0.0,
        };
        for _ in 0..cfg.batch_size {
            if cursor == train_ids.len() {
                cursor = 0;
                order.shuffle(&mut order_rng);
            }
            let k = order[cursor];
            cursor += 1;
            let sample = &corpus.samples[train_ids[k]];
            let scene = &corpus.scenes[sample.scene];
            let fwd = model.forward_train(&tape, scene, &feats[sample.scene], &prompts[k], &responses[k])?;
            let subsample: Vec<usize> = (0..cfg.cost_subsample.min(n_points))
                .map(|_| cost_rng.gen_range(0..scene.n_points))
                .collect();
            let sample_loss = if let Some(grd) = &fwd.grd {
                let (loss, _m, br) = total_loss(
                    &tape,
                    &grd.mask_logits,
                    &grd.class_probs,
                    &grd.boxes,
                    &targets[k],
                    Some(&fwd.lm_loss),
                    &cfg.weights,
                    cfg.focal,
                    cfg.use_box_loss,
                    cfg.distractor_box_loss,
                    &subsample,
                )?;
                agg.cls += br.cls;
                agg.mask += br.mask;
                agg.bbox += br.bbox;
                agg.lm += br.lm;
                loss
            } else {
                // single-mask arm: supervise toward the union of targets
                let logits = fwd.nodec_mask.as_ref().expect("no-decoder arm output");
                let union = mask_to_f64(&scene.union_mask(&sample.targets)?);
                let dice = dice_loss(&tape, logits, &union);
                let mf = mask_focal_loss(&tape, logits, &union, cfg.focal);
                let mask_term = dice
                    .scale(cfg.weights.dice)
                    .add(&mf.scale(cfg.weights.maskfocal));
                agg.mask += mask_term.scalar();
                agg.lm += fwd.lm_loss.scalar();
                mask_term.add(&fwd.lm_loss.scale(cfg.weights.lm))
            };
            loss_sum = Some(match loss_sum {
                None => sample_loss,
                Some(acc) => sample_loss.add(&acc),
            });
        }
        let loss = loss_sum.unwrap().scale(1.0 / cfg.batch_size as f64);
        let total = loss.scalar();
        if !total.is_finite() {
            return Err(CoreError::Divergence(format!(
                "non-finite loss at step {step}; last good checkpoint: {}",
                last_checkpoint
                    .as_deref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "none".into())
            )));
        }
        tape.backward(&loss)?;
        store.harvest(&tape);
        let lr = lr_schedule(step, cfg.steps, cfg.peak_lr);
        adam.step(store.params(), lr)?;

        let b = cfg.batch_size as f64;
        agg.total = total;
        agg.cls /= b;
        agg.mask /= b;
        agg.bbox /= b;
        agg.lm /= b;
        agg.lr = lr;
        agg.seconds = t0.elapsed().as_secs_f64();
        if let Some(p) = &log_path {
            append_jsonl(p, &agg)?;
        }
        records.push(agg);

        let due = step % cfg.checkpoint_every == 0 || step == last_step;
        if due {
            if store.checksum_prefix("encoder.") != encoder_checksum {
                return Err(CoreError::Divergence(format!(
                    "frozen encoder drifted by step {step}"
                )));
            }
            if let Some(dir) = out_dir {
                let path = dir.join(format!("step_{step:06}.ckpt"));
                model.save_checkpoint(&store, &path, serde_json::json!({"step": step}))?;
                last_checkpoint = Some(path);
            }
        }
    }
    if store.checksum_prefix("encoder.") != encoder_checksum {
        return Err(CoreError::Divergence("frozen encoder drifted during training".into()));
    }

    Ok((
        store,
        model,
        TrainReport {
            steps_run: last_step,
            records,
            encoder_checksum,
            last_checkpoint,
        },
    ))
}
