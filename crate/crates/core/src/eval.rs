//! Task evaluation harness (instance / semantic / referring / generalized
//! referring), the ablation runner, and the token-budget latency benchmark.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use plm_tensor::nn::ParamStore;

use crate::config::{DistractorMode, RunConfig};
use crate::corpus::{Corpus, Split, Task};
use crate::metrics::{
    average_precision_macro, miou_referring, miou_semantic, BitMask, ScoredMask,
};
use crate::model::{PlmModel, SceneFeatures, TokenArm};
use crate::trainer::train;
use crate::CoreError;

/// What a predictor produced for one prompt.
pub struct PredOutcome {
    pub masks: Vec<ScoredMask>,
    /// Number of generated [SEG] tokens, for models that generate; harness
    /// predictors leave it unset.
    pub seg_count: Option<usize>,
}

/// Anything that can answer a corpus sample with scored masks.
pub trait Predictor {
    fn predict(&self, corpus: &Corpus, sample_idx: usize) -> Result<PredOutcome, CoreError>;
}

/// The trained model, with pre-computed frozen features per scene.
pub struct ModelPredictor<'a> {
    pub model: &'a PlmModel,
    pub feats: &'a [SceneFeatures],
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, corpus: &Corpus, sample_idx: usize) -> Result<PredOutcome, CoreError> {
        let sample = &corpus.samples[sample_idx];
        let scene = &corpus.scenes[sample.scene];
        let prompt = self.model.vocab.tokenize_prompt(&sample.prompt)?;
        let inf = self.model.infer(scene, &self.feats[sample.scene], &prompt)?;
        Ok(PredOutcome {
            masks: inf
                .predictions
                .into_iter()
                .map(|p| ScoredMask { confidence: p.targetness, mask: p.mask })
                .collect(),
            seg_count: Some(inf.seg_count),
        })
    }
}

/// Upper-bound harness check: emits the ground-truth target masks.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, corpus: &Corpus, sample_idx: usize) -> Result<PredOutcome, CoreError> {
        let sample = &corpus.samples[sample_idx];
        let scene = &corpus.scenes[sample.scene];
        let masks = sample
            .targets
            .iter()
            .map(|&id| {
                Ok(ScoredMask { confidence: 1.0, mask: scene.instance_mask(id)? })
            })
            .collect::<Result<_, CoreError>>()?;
        Ok(PredOutcome { masks, seg_count: None })
    }
}

/// Predicts nothing; zero-target samples score 1, everything else 0.
pub struct EmptyPredictor;

impl Predictor for EmptyPredictor {
    fn predict(&self, _corpus: &Corpus, _sample_idx: usize) -> Result<PredOutcome, CoreError> {
        Ok(PredOutcome { masks: Vec::new(), seg_count: None })
    }
}

/// Adversarial harness check: the complement of each target mask.
pub struct ComplementPredictor;

impl Predictor for ComplementPredictor {
    fn predict(&self, corpus: &Corpus, sample_idx: usize) -> Result<PredOutcome, CoreError> {
        let sample = &corpus.samples[sample_idx];
        let scene = &corpus.scenes[sample.scene];
        let masks = sample
            .targets
            .iter()
            .map(|&id| {
                let m = scene.instance_mask(id)?;
                let mut flipped = BitMask::zeros(m.len());
                for i in 0..m.len() {
                    flipped.set(i, !m.get(i));
                }
                Ok(ScoredMask { confidence: 1.0, mask: flipped })
            })
            .collect::<Result<_, CoreError>>()?;
        Ok(PredOutcome { masks, seg_count: None })
    }
}

/// Per-split metrics; a task missing from the split stays `None`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n_samples: usize,
    pub res_miou: Option<f64>,
    pub gres_miou: Option<f64>,
    pub gres_zero_rejection: Option<f64>,
    pub ovis_ap25: Option<f64>,
    pub ovis_ap50: Option<f64>,
    pub ovss_miou: Option<f64>,
    /// Fraction of generations containing exactly one [SEG] (model
    /// predictors only).
    pub seg_exactly_one_rate: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
    pub corpus_hash: String,
}

fn union_of(masks: &[ScoredMask], n: usize) -> BitMask {
    let mut u = BitMask::zeros(n);
    for m in masks {
        u.union_with(&m.mask);
    }
    u
}

/// Run a predictor over one split of the corpus and score every task.
pub fn evaluate(
    corpus: &Corpus,
    split: Split,
    predictor: &dyn Predictor,
    cfg: &RunConfig,
) -> Result<EvalReport, CoreError> {
    let ids: Vec<usize> = corpus
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == split)
        .map(|(i, _)| i)
        .collect();
    if ids.is_empty() {
        return Err(CoreError::Data("evaluation split is empty".into()));
    }

    let mut res_pairs = Vec::new();
    let mut gres_pairs = Vec::new();
    let mut gres_zero = (0usize, 0usize); // (rejected, total)
    let mut ovis = Vec::new();
    let mut ovss = Vec::new();
    let mut seg = (0usize, 0usize); // (exactly one, counted)

    for &si in &ids {
        let sample = &corpus.samples[si];
        let scene = &corpus.scenes[sample.scene];
        let out = predictor.predict(corpus, si)?;
        if let Some(c) = out.seg_count {
            seg.1 += 1;
            if c == 1 {
                seg.0 += 1;
            }
        }
        let pred_union = union_of(&out.masks, scene.n_points);
        let gt_union = scene.union_mask(&sample.targets)?;
        match sample.task {
            Task::Res => res_pairs.push((pred_union, gt_union)),
            Task::Gres => {
                if sample.targets.is_empty() {
                    gres_zero.1 += 1;
                    if pred_union.count() == 0 {
                        gres_zero.0 += 1;
                    }
                }
                gres_pairs.push((pred_union, gt_union));
            }
            Task::Ovis => {
                let gts = scene
                    .instances
                    .iter()
                    .filter(|i| i.category_id == sample.category_id)
                    .map(|i| scene.instance_mask(i.instance_id))
                    .collect::<Result<Vec<_>, _>>()?;
                ovis.push((sample.category_id, out.masks, gts));
            }
            Task::Ovss => ovss.push((sample.category_id, pred_union, gt_union)),
        }
    }

    let opt = |v: Result<f64, CoreError>| -> Option<f64> { v.ok() };
    Ok(EvalReport {
        split: match split {
            Split::Train => "train".into(),
            Split::Val => "val".into(),
        },
        n_samples: ids.len(),
        res_miou: opt(miou_referring(&res_pairs)),
        gres_miou: opt(miou_referring(&gres_pairs)),
        gres_zero_rejection: (gres_zero.1 > 0)
            .then(|| gres_zero.0 as f64 / gres_zero.1 as f64),
        ovis_ap25: (!ovis.is_empty()).then(|| average_precision_macro(&ovis, 0.25)),
        ovis_ap50: (!ovis.is_empty()).then(|| average_precision_macro(&ovis, 0.50)),
        ovss_miou: opt(miou_semantic(&ovss)),
        seg_exactly_one_rate: (seg.1 > 0).then(|| seg.0 as f64 / seg.1 as f64),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        corpus_hash: corpus.meta.config_hash.clone(),
    })
}

/// Convenience: evaluate a model (computes the frozen feature cache).
pub fn evaluate_model(
    corpus: &Corpus,
    split: Split,
    model: &PlmModel,
) -> Result<EvalReport, CoreError> {
    let feats: Vec<SceneFeatures> = corpus
        .scenes
        .iter()
        .map(|s| model.encode_scene(s))
        .collect::<Result<_, _>>()?;
    let pred = ModelPredictor { model, feats: &feats };
    evaluate(corpus, split, &pred, &model.cfg)
}

/// One trained-and-evaluated ablation arm.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub diverged: bool,
    pub report: Option<EvalReport>,
}

/// Apply an arm name to a base config; returns the config and token arm.
pub fn arm_config(base: &RunConfig, arm: &str) -> Result<(RunConfig, TokenArm), CoreError> {
    let mut cfg = base.clone();
    let mut token_arm = TokenArm::Oc;
    match arm {
        "full" => {}
        "no_distractor" => cfg.distractor_mode = DistractorMode::None,
        "random_distractor" => cfg.distractor_mode = DistractorMode::Random,
        "no_decoder" => cfg.use_decoder = false,
        "no_box_loss" => cfg.use_box_loss = false,
        "patch_512" => {
            token_arm = TokenArm::Patch { tokens: 512 };
            cfg.max_seq = 512 + 64;
        }
        "patch_1024" => {
            token_arm = TokenArm::Patch { tokens: 1024 };
            cfg.max_seq = 1024 + 64;
        }
        _ => {
            if let Some(n) = arm.strip_prefix("depth_") {
                cfg.dec_blocks = n
                    .parse()
                    .map_err(|_| CoreError::Config(format!("bad ablation arm {arm}")))?;
            } else if let Some(q) = arm.strip_prefix("queries_") {
                cfg.q_queries = q
                    .parse()
                    .map_err(|_| CoreError::Config(format!("bad ablation arm {arm}")))?;
            } else {
                return Err(CoreError::Config(format!("unknown ablation arm {arm}")));
            }
        }
    }
    cfg.validate()?;
    Ok((cfg, token_arm))
}

/// Train and evaluate each arm on the shared corpus with a compute-matched
/// budget. A diverging arm is recorded, not fatal.
pub fn run_ablation(
    corpus: &Corpus,
    base: &RunConfig,
    arms: &[String],
    encoder_store: Option<&ParamStore>,
) -> Result<Vec<ArmResult>, CoreError> {
    let mut results = Vec::new();
    for arm in arms {
        let (cfg, token_arm) = arm_config(base, arm)?;
        match train(corpus, &cfg, token_arm, encoder_store, None) {
            Ok((_store, model, _rep)) => {
                let report = evaluate_model(corpus, Split::Val, &model)?;
                results.push(ArmResult { arm: arm.clone(), diverged: false, report: Some(report) });
            }
            Err(CoreError::Divergence(_)) => {
                results.push(ArmResult { arm: arm.clone(), diverged: true, report: None });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(results)
}

/// Markdown table over ablation arms. Orderings here are directional
/// comparisons between arms of this run, never absolute claims.
pub fn ablation_markdown(results: &[ArmResult]) -> String {
    let mut s = String::from(
        "Directional ablation comparison (orderings between arms of this run only).\n\n\
         | arm | RES mIoU | GRES mIoU | GRES zero rejection | OVIS AP@25 | OVSS mIoU |\n\
         |---|---|---|---|---|---|\n",
    );
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    for r in results {
        match &r.report {
            Some(rep) => {
                s.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} |\n",
                    r.arm,
                    fmt(rep.res_miou),
                    fmt(rep.gres_miou),
                    fmt(rep.gres_zero_rejection),
                    fmt(rep.ovis_ap25),
                    fmt(rep.ovss_miou),
                ));
            }
            None => s.push_str(&format!("| {} | diverged | - | - | - | - |\n", r.arm)),
        }
    }
    s
}

/// One latency-bench row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatencyRow {
    pub mode: String,
    pub tokens: usize,
    pub runs: usize,
    pub median_s: f64,
    pub p10_s: f64,
    pub p90_s: f64,
    /// Rough feasible-batch estimate from a 1 GiB activation budget;
    /// indicative only at desk scale.
    pub feasible_batch_estimate: usize,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Median single-sample inference wall time per token mode.
pub fn run_token_budget_bench(
    base: &RunConfig,
    corpus: &Corpus,
    runs: usize,
) -> Result<Vec<LatencyRow>, CoreError> {
    if corpus.scenes.is_empty() {
        return Err(CoreError::Data("bench needs at least one scene".into()));
    }
    let scene = &corpus.scenes[0];
    let prompt_text = crate::corpus::class_prompt("chair");
    let mut rows = Vec::new();
    for (mode, arm) in [
        ("oc_k".to_string(), TokenArm::Oc),
        ("patch_512".to_string(), TokenArm::Patch { tokens: 512 }),
        ("patch_1024".to_string(), TokenArm::Patch { tokens: 1024 }),
    ] {
        let mut cfg = base.clone();
        if let TokenArm::Patch { tokens } = arm {
            cfg.max_seq = tokens + 64;
        }
        let vocab = crate::lm::Vocab::build(&corpus.taxonomy);
        let (_store, model) = PlmModel::new(&cfg, vocab, arm);
        let feats = model.encode_scene(scene)?;
        let prompt = model.vocab.tokenize_prompt(&prompt_text)?;
        // warm-up, not timed
        model.infer(scene, &feats, &prompt)?;
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            let t0 = Instant::now();
            model.infer(scene, &feats, &prompt)?;
            times.push(t0.elapsed().as_secs_f64());
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let tokens = match arm {
            TokenArm::Oc => cfg.k_proposals,
            TokenArm::Patch { tokens } => tokens,
        };
        // activations per sample ~ seq_len * d_lm * layers * a handful of
        // intermediates, in f64
        let seq = tokens + 24;
        let per_sample = seq * cfg.d_lm * cfg.lm_layers * 16 * 8;
        rows.push(LatencyRow {
            mode,
            tokens,
            runs,
            median_s: percentile(&times, 0.5),
            p10_s: percentile(&times, 0.1),
            p90_s: percentile(&times, 0.9),
            feasible_batch_estimate: ((1usize << 30) / per_sample).max(1),
        });
    }
    Ok(rows)
}

/// Write `report.json` beside a Markdown twin.
pub fn write_report<T: Serialize>(
    dir: &Path,
    json_name: &str,
    value: &T,
    markdown: Option<(&str, &str)>,
) -> Result<(), CoreError> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::Io(dir.display().to_string(), e.to_string()))?;
    let jp = dir.join(json_name);
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| CoreError::Io(jp.display().to_string(), e.to_string()))?;
    std::fs::write(&jp, body).map_err(|e| CoreError::Io(jp.display().to_string(), e.to_string()))?;
    if let Some((name, text)) = markdown {
        let mp = dir.join(name);
        std::fs::write(&mp, text)
            .map_err(|e| CoreError::Io(mp.display().to_string(), e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_corpus;
    use crate::scene::SceneGenConfig;
    use crate::taxonomy::Taxonomy;
    use crate::trainer::train;

    fn tiny_cfg() -> RunConfig {
        let mut c = RunConfig::default();
        c.seed = 31;
        c.n_points = 192;
        c.knn_k = 8;
        c.k_proposals = 6;
        c.d_point = 12;
        c.d_lm = 24;
        c.lm_layers = 1;
        c.lm_heads = 2;
        c.max_seq = 64;
        c.q_queries = 4;
        c.d_dec = 16;
        c.dec_heads = 2;
        c.dec_blocks = 1;
        c.steps = 4;
        c.batch_size = 2;
        c.checkpoint_every = 4;
        c.cost_subsample = 64;
        c
    }

    fn tiny_corpus(cfg: &RunConfig, n: usize) -> Corpus {
        let gc = SceneGenConfig { n_points: cfg.n_points, min_instances: 2, max_instances: 4 };
        generate_corpus(
            cfg.seed,
            n,
            &gc,
            &Taxonomy::default_taxonomy(),
            cfg.distractor_mode,
            &cfg.hash(),
        )
        .unwrap()
    }

    #[test]
    fn oracle_predictor_is_perfect_everywhere() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(&cfg, 8);
        let rep = evaluate(&corpus, Split::Val, &OraclePredictor, &cfg).unwrap();
        assert_eq!(rep.res_miou, Some(1.0));
        assert_eq!(rep.gres_miou, Some(1.0));
        assert_eq!(rep.ovss_miou, Some(1.0));
        if let Some(ap) = rep.ovis_ap25 {
            assert_eq!(ap, 1.0);
        }
        assert_eq!(rep.ovis_ap50, rep.ovis_ap25);
        if let Some(z) = rep.gres_zero_rejection {
            assert_eq!(z, 1.0);
        }
    }

    #[test]
    fn empty_predictor_scores_only_zero_target_samples() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(&cfg, 8);
        let rep = evaluate(&corpus, Split::Val, &EmptyPredictor, &cfg).unwrap();
        // RES always has exactly one target, so the empty answer scores 0
        assert_eq!(rep.res_miou, Some(0.0));
        if let Some(z) = rep.gres_zero_rejection {
            assert_eq!(z, 1.0);
        }
        let n_zero = corpus
            .samples
            .iter()
            .filter(|s| s.split == Split::Val && s.task == Task::Gres && s.targets.is_empty())
            .count();
        let n_gres = corpus
            .samples
            .iter()
            .filter(|s| s.split == Split::Val && s.task == Task::Gres)
            .count();
        let expected = n_zero as f64 / n_gres as f64;
        assert!((rep.gres_miou.unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn complement_predictor_scores_zero_on_res() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(&cfg, 6);
        let rep = evaluate(&corpus, Split::Val, &ComplementPredictor, &cfg).unwrap();
        assert_eq!(rep.res_miou, Some(0.0));
    }

    #[test]
    fn model_predictor_end_to_end_smoke() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(&cfg, 4);
        let (_store, model, _rep) = train(&corpus, &cfg, TokenArm::Oc, None, None).unwrap();
        let rep = evaluate_model(&corpus, Split::Val, &model).unwrap();
        assert!(rep.seg_exactly_one_rate.is_some());
        assert!(rep.res_miou.unwrap() >= 0.0 && rep.res_miou.unwrap() <= 1.0);
    }

    #[test]
    fn arm_configs_apply() {
        let base = tiny_cfg();
        assert_eq!(arm_config(&base, "no_distractor").unwrap().0.distractor_mode, DistractorMode::None);
        assert!(!arm_config(&base, "no_decoder").unwrap().0.use_decoder);
        assert_eq!(arm_config(&base, "depth_5").unwrap().0.dec_blocks, 5);
        assert_eq!(arm_config(&base, "queries_24").unwrap().0.q_queries, 24);
        assert_eq!(
            arm_config(&base, "patch_512").unwrap().1,
            TokenArm::Patch { tokens: 512 }
        );
        assert!(arm_config(&base, "bogus").is_err());
    }

    #[test]
    fn ablation_runner_emits_rows_and_markdown() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus(&cfg, 3);
        let arms = vec!["full".to_string(), "no_decoder".to_string()];
        let rows = run_ablation(&corpus, &cfg, &arms, None).unwrap();
        assert_eq!(rows.len(), 2);
        let md = ablation_markdown(&rows);
        assert!(md.contains("| full |"));
        assert!(md.contains("| no_decoder |"));
    }
}
