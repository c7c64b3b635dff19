//! Operator entry point: corpus generation, proposal pretraining, main
//! training, evaluation, ablations, the latency benchmark, single-shot
//! inference, and PLY export.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use plm_core::config::RunConfig;
use plm_core::corpus::{generate_corpus, load_corpus, save_corpus, Split};
use plm_core::encoder::pretrain_proposals;
use plm_core::eval::{
    ablation_markdown, evaluate_model, run_ablation, run_token_budget_bench, write_report,
};
use plm_core::model::{PlmModel, TokenArm};
use plm_core::scene::{Scene, SceneGenConfig};
use plm_core::taxonomy::Taxonomy;
use plm_core::trainer::train;
use plm_core::CoreError;
use plm_tensor::ckpt;
use plm_tensor::nn::ParamStore;

#[derive(Parser)]
#[command(name = "plm", about = "Language-instructed 3D point-cloud segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural scene corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
        /// Also dump the first N scenes as standalone JSON files.
        #[arg(long, default_value_t = 0)]
        dump_scene_json: usize,
    },
    /// Pretrain the frozen proposal encoder on a corpus.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Main training stage (produces checkpoints and a step log).
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pretrained encoder checkpoint from `pretrain`.
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a corpus split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and compare ablation arms on a shared corpus.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated arm names, e.g. full,no_distractor,no_decoder.
        #[arg(long)]
        arms: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Token-budget latency benchmark across token modes.
    Bench {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 60)]
        runs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Single-shot inference: one scene, one prompt, prediction JSON.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene JSON file (see gen-data --dump-scene-json) ...
        #[arg(long)]
        scene: Option<PathBuf>,
        /// ... or a corpus directory plus --scene-index.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        scene_index: Option<usize>,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run inference and write a colored PLY point cloud.
    ExportPly {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        scene_index: Option<usize>,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = check_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// All heavy work is single-threaded; PLM_THREADS is validated and acts as
/// an upper bound (so 1 is always honored).
fn check_threads() -> Result<(), CoreError> {
    if let Ok(v) = std::env::var("PLM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CoreError::Config(format!("PLM_THREADS must be a number, got {v:?}")))?;
        if n == 0 {
            return Err(CoreError::Config("PLM_THREADS must be at least 1".into()));
        }
    }
    Ok(())
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, CoreError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CoreError::Io(p.display().to_string(), e.to_string()))?;
            RunConfig::from_toml(&text)
        }
    }
}

fn store_from_checkpoint(path: &Path) -> Result<ParamStore, CoreError> {
    let loaded = ckpt::load(path)?;
    let mut store = ParamStore::new();
    for (name, (shape, data)) in &loaded.params {
        store.register(name, shape.clone(), data.clone());
    }
    Ok(store)
}

fn load_scene(
    scene: &Option<PathBuf>,
    corpus: &Option<PathBuf>,
    scene_index: &Option<usize>,
) -> Result<Scene, CoreError> {
    match (scene, corpus, scene_index) {
        (Some(p), None, None) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CoreError::Io(p.display().to_string(), e.to_string()))?;
            serde_json::from_str(&text)
                .map_err(|e| CoreError::Io(p.display().to_string(), e.to_string()))
        }
        (None, Some(dir), Some(i)) => {
            let corpus = load_corpus(dir)?;
            corpus
                .scenes
                .get(*i)
                .cloned()
                .ok_or_else(|| {
                    CoreError::Data(format!("scene index {i} out of range ({} scenes)", corpus.scenes.len()))
                })
        }
        _ => Err(CoreError::Config(
            "give either --scene <file> or --corpus <dir> --scene-index <n>".into(),
        )),
    }
}

fn infer_once(
    checkpoint: &Path,
    scene: &Scene,
    prompt: &str,
) -> Result<(PlmModel, plm_core::model::Inference), CoreError> {
    let (_store, model) = PlmModel::load_checkpoint(checkpoint)?;
    let feats = model.encode_scene(scene)?;
    let prompt_ids = model.vocab.tokenize_prompt(prompt)?;
    let inf = model.infer(scene, &feats, &prompt_ids)?;
    Ok((model, inf))
}

fn prediction_json(model: &PlmModel, inf: &plm_core::model::Inference) -> serde_json::Value {
    serde_json::json!({
        "generated": model.vocab.detokenize(&inf.generated),
        "seg_count": inf.seg_count,
        "config_hash": model.cfg.hash(),
        "seed": model.cfg.seed,
        "instances": inf.predictions.iter().map(|p| serde_json::json!({
            "points": p.mask.indices(),
            "box": {"center": p.box3.center, "size": p.box3.size},
            "targetness": p.targetness,
            "distractorness": p.distractorness,
        })).collect::<Vec<_>>(),
    })
}

const PALETTE: [[u8; 3]; 10] = [
    [230, 57, 70],
    [46, 139, 87],
    [65, 105, 225],
    [255, 165, 0],
    [148, 0, 211],
    [0, 206, 209],
    [255, 105, 180],
    [154, 205, 50],
    [210, 105, 30],
    [70, 130, 180],
];

fn write_ply(
    path: &Path,
    scene: &Scene,
    predictions: &[plm_core::grd::InstancePrediction],
) -> Result<(), CoreError> {
    let mut colors = vec![[128u8, 128, 128]; scene.n_points];
    for (k, p) in predictions.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        for i in p.mask.indices() {
            colors[i] = c;
        }
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    s.push_str(&format!("element vertex {}\n", scene.n_points));
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    s.push_str("end_header\n");
    for i in 0..scene.n_points {
        let p = scene.xyz(i);
        let c = colors[i];
        s.push_str(&format!(
            "{} {} {} {} {} {}\n",
            p[0], p[1], p[2], c[0], c[1], c[2]
        ));
    }
    std::fs::write(path, s).map_err(|e| CoreError::Io(path.display().to_string(), e.to_string()))
}

fn emit_json(out: &Option<PathBuf>, value: &serde_json::Value) -> Result<(), CoreError> {
    let body = serde_json::to_string_pretty(value).expect("json serializes");
    match out {
        Some(p) => std::fs::write(p, body)
            .map_err(|e| CoreError::Io(p.display().to_string(), e.to_string())),
        None => {
            println!("{body}");
            Ok(())
        }
    }
}

fn run(cmd: Cmd) -> Result<(), CoreError> {
    match cmd {
        Cmd::GenData { out, config, seed, scenes, points, dump_scene_json } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = scenes {
                cfg.n_scenes = n;
            }
            if let Some(n) = points {
                cfg.n_points = n;
            }
            cfg.validate()?;
            let gc = SceneGenConfig {
                n_points: cfg.n_points,
                min_instances: 4,
                max_instances: 8,
            };
            let tax = Taxonomy::default_taxonomy();
            let corpus = generate_corpus(
                cfg.seed,
                cfg.n_scenes,
                &gc,
                &tax,
                cfg.distractor_mode,
                &cfg.hash(),
            )?;
            save_corpus(&corpus, &out)?;
            if dump_scene_json > 0 {
                let dir = out.join("scenes");
                std::fs::create_dir_all(&dir)
                    .map_err(|e| CoreError::Io(dir.display().to_string(), e.to_string()))?;
                for (i, s) in corpus.scenes.iter().take(dump_scene_json).enumerate() {
                    let p = dir.join(format!("scene_{i:04}.json"));
                    let body = serde_json::to_string(s)
                        .map_err(|e| CoreError::Io(p.display().to_string(), e.to_string()))?;
                    std::fs::write(&p, body)
                        .map_err(|e| CoreError::Io(p.display().to_string(), e.to_string()))?;
                }
            }
            println!(
                "wrote corpus: {} scenes, {} samples, config hash {}",
                corpus.scenes.len(),
                corpus.samples.len(),
                cfg.hash()
            );
            Ok(())
        }
        Cmd::Pretrain { corpus, out, config, steps } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = steps {
                cfg.pretrain_steps = s;
            }
            cfg.validate()?;
            let corpus = load_corpus(&corpus)?;
            let (store, _encoder, report) = pretrain_proposals(&corpus, &cfg)?;
            let meta = serde_json::json!({
                "config": cfg,
                "config_hash": cfg.hash(),
                "seed": cfg.seed,
                "steps_run": report.steps_run,
                "val_recall": report.val_recall,
            });
            ckpt::save(&store, &meta, &out)?;
            println!(
                "pretrained encoder: {} steps, val proposal recall {:.3}, saved {}",
                report.steps_run,
                report.val_recall,
                out.display()
            );
            Ok(())
        }
        Cmd::Train { corpus, out, config, encoder, steps, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let corpus = load_corpus(&corpus)?;
            let enc_store = encoder.as_deref().map(store_from_checkpoint).transpose()?;
            let (_store, model, report) =
                train(&corpus, &cfg, TokenArm::Oc, enc_store.as_ref(), Some(&out))?;
            let eval_report = evaluate_model(&corpus, Split::Val, &model)?;
            write_report(&out, "eval_val.json", &eval_report, None)?;
            println!(
                "trained {} steps; final loss {:.4}; val RES mIoU {:?}; checkpoint {}",
                report.steps_run,
                report.records.last().map(|r| r.total).unwrap_or(f64::NAN),
                eval_report.res_miou,
                report
                    .last_checkpoint
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "none".into())
            );
            Ok(())
        }
        Cmd::Eval { checkpoint, corpus, split, out } => {
            let split = match split.as_str() {
                "val" => Split::Val,
                "train" => Split::Train,
                other => {
                    return Err(CoreError::Config(format!(
                        "unknown split {other:?}; use train or val"
                    )))
                }
            };
            let corpus = load_corpus(&corpus)?;
            let (_store, model) = PlmModel::load_checkpoint(&checkpoint)?;
            let report = evaluate_model(&corpus, split, &model)?;
            if let Some(dir) = &out {
                write_report(dir, "report.json", &report, None)?;
            }
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
        Cmd::Ablate { corpus, arms, config, encoder, out, steps } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            cfg.validate()?;
            let corpus = load_corpus(&corpus)?;
            let enc_store = encoder.as_deref().map(store_from_checkpoint).transpose()?;
            let arm_list: Vec<String> = arms.split(',').map(|s| s.trim().to_string()).collect();
            let results = run_ablation(&corpus, &cfg, &arm_list, enc_store.as_ref())?;
            let md = ablation_markdown(&results);
            if let Some(dir) = &out {
                write_report(dir, "report.json", &results, Some(("ablation.md", &md)))?;
            }
            print!("{md}");
            Ok(())
        }
        Cmd::Bench { corpus, config, runs, out } => {
            let cfg = load_config(&config)?;
            let corpus = load_corpus(&corpus)?;
            let rows = run_token_budget_bench(&cfg, &corpus, runs)?;
            let mut md = String::from(
                "| mode | tokens | runs | median s | p10 s | p90 s | feasible batch (est.) |\n\
                 |---|---|---|---|---|---|---|\n",
            );
            for r in &rows {
                md.push_str(&format!(
                    "| {} | {} | {} | {:.4} | {:.4} | {:.4} | {} |\n",
                    r.mode, r.tokens, r.runs, r.median_s, r.p10_s, r.p90_s,
                    r.feasible_batch_estimate
                ));
            }
            if let Some(dir) = &out {
                write_report(dir, "report.json", &rows, Some(("bench.md", &md)))?;
            }
            print!("{md}");
            Ok(())
        }
        Cmd::Infer { checkpoint, scene, corpus, scene_index, prompt, out } => {
            let scene = load_scene(&scene, &corpus, &scene_index)?;
            let (model, inf) = infer_once(&checkpoint, &scene, &prompt)?;
            emit_json(&out, &prediction_json(&model, &inf))
        }
        Cmd::ExportPly { checkpoint, scene, corpus, scene_index, prompt, out } => {
            let scene = load_scene(&scene, &corpus, &scene_index)?;
            let (_model, inf) = infer_once(&checkpoint, &scene, &prompt)?;
            write_ply(&out, &scene, &inf.predictions)?;
            println!(
                "wrote {} ({} instances highlighted)",
                out.display(),
                inf.predictions.len()
            );
            Ok(())
        }
    }
}
