//! The eight release gates, exercised end to end and printed one line each.
//!
//! Every gate is checked against an independent reference: exhaustive
//! enumeration for the assignment solver, central differences for
//! gradients, hand-derived closed forms for the losses, constructed
//! predictors for the metric harness, and directional orderings (never
//! absolute numbers) for the trained-model comparisons.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use plm_core::config::RunConfig;
use plm_core::corpus::{generate_corpus, Corpus, Split};
use plm_core::encoder::pretrain_proposals;
use plm_core::eval::{evaluate, evaluate_model, run_ablation, run_token_budget_bench, EvalReport, OraclePredictor};
use plm_core::grd::Grd;
use plm_core::lm::LoraLinear;
use plm_core::matching::{
    box_loss, dice_loss, focal_loss, hungarian, CostMatrix, FocalParams,
};
use plm_core::metrics::{average_precision, BitMask, Box3, ScoredMask};
use plm_core::model::TokenArm;
use plm_core::scene::SceneGenConfig;
use plm_core::taxonomy::Taxonomy;
use plm_core::trainer::{train, train_prefix, TrainReport};
use plm_tensor::nn::{Linear, ParamStore};
use plm_tensor::rng::seeded;
use plm_tensor::{Tape, Tensor};

// ---------------------------------------------------------------- helpers

fn rand_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Exhaustive minimum assignment cost (reference for the solver).
fn brute_force_min(c: &CostMatrix) -> f64 {
    fn rec(c: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == c.rows.min(c.cols) {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for col in 0..c.cols {
            if !used[col] {
                used[col] = true;
                rec(c, row + 1, used, acc + c.data[row * c.cols + col], best);
                used[col] = false;
            }
        }
    }
    // transpose if more rows than columns so every row gets a column
    if c.rows > c.cols {
        let mut t = vec![0.0; c.rows * c.cols];
        for i in 0..c.rows {
            for j in 0..c.cols {
                t[j * c.rows + i] = c.data[i * c.cols + j];
            }
        }
        return brute_force_min(&CostMatrix { rows: c.cols, cols: c.rows, data: t });
    }
    let mut best = f64::INFINITY;
    rec(c, 0, &mut vec![false; c.cols], 0.0, &mut best);
    best
}

/// Central-difference gradient comparison for all trainable parameters.
fn gradcheck(store: &ParamStore, forward: &dyn Fn(&Tape) -> Tensor, label: &str) -> Result<(), String> {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    for p in store.params() {
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = forward(&tape);
    tape.backward(&loss).map_err(|e| format!("{label}: {e}"))?;
    store.harvest(&tape);
    for p in store.params() {
        if !p.trainable() {
            continue;
        }
        let analytic = p.grad();
        let base = p.value();
        let stride = (base.len() / 8).max(1);
        for i in (0..base.len()).step_by(stride) {
            let mut v = base.clone();
            v[i] = base[i] + H;
            p.set_value(v.clone());
            let up = forward(&Tape::new()).scalar();
            v[i] = base[i] - H;
            p.set_value(v);
            let down = forward(&Tape::new()).scalar();
            p.set_value(base.clone());
            let numeric = (up - down) / (2.0 * H);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            if (a - numeric).abs() / denom >= TOL {
                return Err(format!(
                    "{label}: param {} elem {i}: analytic {a} vs numeric {numeric}",
                    p.name()
                ));
            }
        }
    }
    Ok(())
}

fn desk_corpus(cfg: &RunConfig, n_scenes: usize) -> Corpus {
    let gc = SceneGenConfig {
        n_points: cfg.n_points,
        min_instances: 4,
        max_instances: 8,
    };
    generate_corpus(
        cfg.seed,
        n_scenes,
        &gc,
        &Taxonomy::default_taxonomy(),
        cfg.distractor_mode,
        &cfg.hash(),
    )
    .expect("corpus generation")
}

// -------------------------------------------------------------- criteria

/// 1: solver equals exhaustive enumeration on random matrices of every
/// shape up to 7x7, in under ten seconds.
fn c1_assignment_oracle() -> Result<String, String> {
    let t0 = Instant::now();
    let mut rng = seeded(4101);
    let trials_per_shape = 1000;
    let mut checked = 0u64;
    for rows in 1..=7 {
        for cols in 1..=7 {
            for _ in 0..trials_per_shape {
                let data = rand_vec(&mut rng, rows * cols, -10.0, 10.0);
                let cm = CostMatrix { rows, cols, data };
                let pairs = hungarian(&cm).map_err(|e| e.to_string())?;
                let got: f64 = pairs.iter().map(|&(i, j)| cm.data[i * cm.cols + j]).sum();
                let want = brute_force_min(&cm);
                if (got - want).abs() > 1e-9 {
                    return Err(format!("{rows}x{cols}: solver {got} vs exhaustive {want}"));
                }
                checked += 1;
            }
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    if dt >= 10.0 {
        return Err(format!("{checked} matrices verified but took {dt:.1}s (limit 10s)"));
    }
    Ok(format!("{checked} random matrices across 49 shapes in {dt:.1}s"))
}

/// 2: central-difference gradients for the op inventory, the losses, and a
/// 1-block decoder, all in under a minute.
fn c2_gradient_suite() -> Result<String, String> {
    let t0 = Instant::now();
    let mut rng = seeded(4102);

    // elementwise / unary / reduction / shape ops in one composite each
    {
        let mut store = ParamStore::new();
        let a = store.register("a", vec![3, 4], rand_vec(&mut rng, 12, 0.4, 2.0));
        let b = store.register("b", vec![3, 4], rand_vec(&mut rng, 12, 2.2, 3.5));
        let f = |tape: &Tape| {
            let x = a.tensor(tape);
            let y = b.tensor(tape);
            let w = tape.constant((0..12).map(|i| 0.2 + 0.3 * i as f64).collect(), vec![3, 4]);
            x.add(&y)
                .mul(&x.sub(&y))
                .add(&x.div(&y))
                .add(&x.maximum(&y))
                .add(&x.minimum(&y))
                .add(&x.exp().scale(0.1))
                .add(&x.ln())
                .add(&x.sigmoid())
                .add(&x.relu())
                .add(&x.neg().add_scalar(1.0))
                .add(&x.abs())
                .add(&x.powf(2.0))
                .add(&x.clamp(0.5, 1.9).clamp_min(0.6))
                .mul(&w)
                .sum_all()
        };
        gradcheck(&store, &f, "elementwise composite")?;
    }
    {
        let mut store = ParamStore::new();
        let a = store.register("a", vec![3, 5], rand_vec(&mut rng, 15, -1.0, 1.0));
        let b = store.register("b", vec![5, 2], rand_vec(&mut rng, 10, -1.0, 1.0));
        let f = |tape: &Tape| {
            let x = a.tensor(tape);
            let y = b.tensor(tape);
            let mm = x.matmul(&y); // 3x2
            let sm = x.softmax_rows().matmul(&y);
            let ls = x.log_softmax_rows().slice_cols(1, 3).matmul(&y.slice_rows(1, 3).t().reshape(vec![3, 2]));
            let g = mm.add(&sm).add(&ls).gather_rows(&[0, 2, 1]);
            let picked = g.gather_elems(&[(0, 1), (2, 0)]).sum_all();
            let ln = mm.layer_norm_rows(1e-5).mean_all();
            picked.add(&ln).add(&mm.t().sum_all()).add(&x.mul_rowvec(&tape.constant(vec![1.0, 0.5, 2.0, 1.5, 0.7], vec![1, 5])).sum_all())
        };
        gradcheck(&store, &f, "matmul/softmax/gather composite")?;
    }
    // losses
    {
        let mut store = ParamStore::new();
        let p = store.register("p", vec![1, 4], vec![0.3, 0.6, 0.2, 0.8]);
        let logits = store.register("m", vec![1, 6], rand_vec(&mut rng, 6, -2.0, 2.0));
        let bx = store.register("bx", vec![1, 6], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let gt_box = Box3::new([0.3, 0.1, 0.2], [0.5, 0.4, 0.6]).unwrap();
        let f = |tape: &Tape| {
            let fl = focal_loss(tape, &p.tensor(tape), &[1.0, 0.0, 0.0, 1.0], FocalParams::default());
            let dl = dice_loss(tape, &logits.tensor(tape), &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
            let bl = box_loss(tape, &bx.tensor(tape), &gt_box, 1.0, 1.0);
            fl.add(&dl).add(&bl)
        };
        gradcheck(&store, &f, "loss stack")?;
    }
    // 1-block decoder
    {
        let mut cfg = RunConfig::default();
        cfg.d_point = 6;
        cfg.d_lm = 8;
        cfg.d_dec = 12;
        cfg.dec_heads = 2;
        cfg.dec_blocks = 1;
        cfg.q_queries = 3;
        let mut store = ParamStore::new();
        let mut grng = seeded(4103);
        let grd = Grd::new(&mut store, &cfg, &mut grng);
        let y_seg = store.register("in.y_seg", vec![1, 8], rand_vec(&mut rng, 8, -1.0, 1.0));
        let f_oc = store.register("in.f_oc", vec![4, 8], rand_vec(&mut rng, 32, -1.0, 1.0));
        let f_pt = store.register("in.f_pt", vec![5, 6], rand_vec(&mut rng, 30, -1.0, 1.0));
        let f = |tape: &Tape| {
            let out = grd
                .forward(tape, &y_seg.tensor(tape), &f_oc.tensor(tape), &f_pt.tensor(tape))
                .unwrap();
            let w1 = tape.constant((0..15).map(|i| (i as f64 * 0.37).sin()).collect(), vec![3, 5]);
            let w2 = tape.constant((0..6).map(|i| 0.2 + 0.1 * i as f64).collect(), vec![3, 2]);
            let w3 = tape.constant((0..18).map(|i| (i as f64 * 0.21).cos() * 0.3).collect(), vec![3, 6]);
            out.mask_logits
                .mul(&w1)
                .sum_all()
                .add(&out.class_probs.mul(&w2).sum_all())
                .add(&out.boxes.mul(&w3).sum_all())
        };
        gradcheck(&store, &f, "1-block decoder")?;
    }
    let dt = t0.elapsed().as_secs_f64();
    if dt >= 60.0 {
        return Err(format!("suite passed but took {dt:.1}s (limit 60s)"));
    }
    Ok(format!("op inventory, loss stack, and 1-block decoder in {dt:.1}s"))
}

/// 3: loss values against hand-derived closed forms, within 1e-9.
fn c3_closed_forms() -> Result<String, String> {
    let tol = 1e-9;
    let mut checks: Vec<(String, f64, f64)> = Vec::new();
    let tape = Tape::new();

    // focal with gamma=0, alpha=0.5 is half the cross-entropy
    let fp0 = FocalParams { alpha: 0.5, gamma: 0.0 };
    let p = tape.constant(vec![0.5], vec![1, 1]);
    checks.push((
        "focal(gamma=0, alpha=.5, p=.5, y=1)".into(),
        focal_loss(&tape, &p, &[1.0], fp0).scalar(),
        0.5 * (2.0f64).ln(),
    ));
    // gamma=2, alpha=1, p=.9, y=1 -> 0.01 * -ln(0.9) = 1.0536e-3
    let fp2 = FocalParams { alpha: 1.0, gamma: 2.0 };
    let p9 = tape.constant(vec![0.9], vec![1, 1]);
    checks.push((
        "focal(gamma=2, alpha=1, p=.9, y=1)".into(),
        focal_loss(&tape, &p9, &[1.0], fp2).scalar(),
        0.01 * -(0.9f64.ln()),
    ));
    // dice: saturated-perfect -> 0
    let perfect = tape.constant(vec![50.0, -50.0, 50.0, -50.0], vec![1, 4]);
    checks.push((
        "dice(perfect saturated)".into(),
        dice_loss(&tape, &perfect, &[1.0, 0.0, 1.0, 0.0]).scalar(),
        0.0,
    ));
    // dice: disjoint saturated, |pred|=2, |gt|=2 -> 1 - 1/(4+1)
    let disjoint = tape.constant(vec![50.0, 50.0, -50.0, -50.0], vec![1, 4]);
    checks.push((
        "dice(disjoint saturated)".into(),
        dice_loss(&tape, &disjoint, &[0.0, 0.0, 1.0, 1.0]).scalar(),
        1.0 - 1.0 / 5.0,
    ));
    // dice soft 0.5 case: N=8, |gt|=4 -> 1 - (N/2+1)/(N+1)
    let soft = tape.constant(vec![0.0; 8], vec![1, 8]);
    checks.push((
        "dice(all-0.5, half gt)".into(),
        dice_loss(&tape, &soft, &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).scalar(),
        1.0 - 5.0 / 9.0,
    ));
    // GIoU: identical boxes -> 1; box_loss with only the GIoU term -> 0
    let unit = Box3::new([0.5, 0.5, 0.5], [1.0, 1.0, 1.0]).unwrap();
    let same = tape.constant(vec![0.5, 0.5, 0.5, 1.0, 1.0, 1.0], vec![1, 6]);
    checks.push((
        "giou(identity) via box loss".into(),
        box_loss(&tape, &same, &unit, 0.0, 1.0).scalar(),
        0.0,
    ));
    checks.push((
        "giou(identity)".into(),
        plm_core::metrics::box_giou3(&unit, &unit),
        1.0,
    ));
    // separated unit cubes with a one-cube gap: hull 3, union 2 -> -1/3
    let far = Box3::new([2.5, 0.5, 0.5], [1.0, 1.0, 1.0]).unwrap();
    checks.push((
        "giou(separated unit cubes)".into(),
        plm_core::metrics::box_giou3(&unit, &far),
        -1.0 / 3.0,
    ));

    for (name, got, want) in &checks {
        if (got - want).abs() > tol {
            return Err(format!("{name}: got {got}, want {want}"));
        }
    }
    Ok(format!("{} closed-form cases within 1e-9", checks.len()))
}

/// 4: the metric harness itself: the oracle scores exactly 1.0 everywhere
/// and AP@50 never exceeds AP@25 on randomized prediction sets.
fn c4_metric_harness() -> Result<String, String> {
    let mut cfg = RunConfig::default();
    cfg.seed = 4104;
    cfg.n_points = 256;
    let corpus = desk_corpus(&cfg, 10);
    let rep = evaluate(&corpus, Split::Val, &OraclePredictor, &cfg).map_err(|e| e.to_string())?;
    for (name, v) in [
        ("RES mIoU", rep.res_miou),
        ("GRES mIoU", rep.gres_miou),
        ("OVSS mIoU", rep.ovss_miou),
        ("OVIS AP@25", rep.ovis_ap25),
        ("OVIS AP@50", rep.ovis_ap50),
    ] {
        if let Some(v) = v {
            if v != 1.0 {
                return Err(format!("oracle predictor scored {name} = {v}, expected exactly 1.0"));
            }
        }
    }

    let mut rng = seeded(4105);
    for trial in 0..100 {
        let n = 64;
        let n_gt = rng.gen_range(1..5);
        let n_pred = rng.gen_range(0..7);
        let gts: Vec<BitMask> = (0..n_gt)
            .map(|_| {
                let idx: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.3)).collect();
                BitMask::from_indices(n, &idx)
            })
            .collect();
        let preds: Vec<ScoredMask> = (0..n_pred)
            .map(|_| {
                let idx: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.3)).collect();
                ScoredMask {
                    confidence: rng.gen_range(0.0..1.0),
                    mask: BitMask::from_indices(n, &idx),
                }
            })
            .collect();
        let ap25 = average_precision(&preds, &gts, 0.25);
        let ap50 = average_precision(&preds, &gts, 0.50);
        if ap50 > ap25 + 1e-12 {
            return Err(format!("trial {trial}: AP@50 {ap50} > AP@25 {ap25}"));
        }
    }
    Ok("oracle exact 1.0 on all tasks; AP@50 <= AP@25 on 100 random sets".into())
}

/// Artifacts of the full desk run, shared by criteria 5 and 8.
struct DeskRun {
    report: TrainReport,
    eval: EvalReport,
    encoder_checksum_before: u64,
    final_checksum: u64,
    wall_seconds: f64,
}

fn run_desk_training() -> Result<DeskRun, String> {
    let t0 = Instant::now();
    let cfg = RunConfig::default(); // 512 scenes, N=2048, K=32, Q=16, n=3, 3000 steps
    let corpus = desk_corpus(&cfg, cfg.n_scenes);
    let (enc_store, _enc, pre) =
        pretrain_proposals(&corpus, &cfg).map_err(|e| e.to_string())?;
    let encoder_checksum_before = enc_store.checksum_prefix("encoder.");
    let (store, model, report) = train(&corpus, &cfg, TokenArm::Oc, Some(&enc_store), None)
        .map_err(|e| e.to_string())?;
    let wall_seconds = t0.elapsed().as_secs_f64();
    let eval = evaluate_model(&corpus, Split::Val, &model).map_err(|e| e.to_string())?;
    let final_checksum = store.checksum_prefix("encoder.");
    eprintln!(
        "[desk run] pretrain recall {:.3}; train {:.0}s; RES mIoU {:?}; GRES rejection {:?}; seg rate {:?}",
        pre.val_recall, wall_seconds, eval.res_miou, eval.gres_zero_rejection,
        eval.seg_exactly_one_rate
    );
    Ok(DeskRun { report, eval, encoder_checksum_before, final_checksum, wall_seconds })
}

/// 5: full desk-scale training meets the quality bars inside the one-hour
/// budget, and the loss trace is bit-identical when re-run.
fn c5_end_to_end(desk: &DeskRun) -> Result<String, String> {
    let res = desk.eval.res_miou.ok_or("no referring samples in val")?;
    let rej = desk.eval.gres_zero_rejection.ok_or("no zero-target samples in val")?;
    let mut problems = Vec::new();
    if res < 0.60 {
        problems.push(format!("val RES mIoU {res:.3} < 0.60"));
    }
    if rej < 0.85 {
        problems.push(format!("GRES zero-target rejection {rej:.3} < 0.85"));
    }
    if desk.wall_seconds > 3600.0 {
        problems.push(format!("runtime {:.0}s > 3600s", desk.wall_seconds));
    }

    // determinism: an identically configured run must reproduce the loss
    // trace bit for bit; verified on a 150-step prefix (the schedule and
    // data order match the full horizon exactly)
    let cfg = RunConfig::default();
    let corpus = desk_corpus(&cfg, cfg.n_scenes);
    let (enc_store, _enc, _pre) =
        pretrain_proposals(&corpus, &cfg).map_err(|e| e.to_string())?;
    let (_s, _m, prefix) =
        train_prefix(&corpus, &cfg, TokenArm::Oc, Some(&enc_store), None, Some(150))
            .map_err(|e| e.to_string())?;
    for (a, b) in desk.report.records.iter().zip(&prefix.records) {
        if a.total.to_bits() != b.total.to_bits() {
            problems.push(format!(
                "loss trace diverged at step {}: {} vs {}",
                a.step, a.total, b.total
            ));
            break;
        }
    }
    if !problems.is_empty() {
        return Err(problems.join("; "));
    }
    Ok(format!(
        "RES mIoU {res:.3} >= 0.60; zero-target rejection {rej:.3} >= 0.85; {:.0}s <= 3600s; 150-step trace bit-identical",
        desk.wall_seconds
    ))
}

/// 6: the paper-table orderings reproduce directionally under a
/// compute-matched reduced budget, majority over three seeds.
fn c6_directional_ablations() -> Result<String, String> {
    let arms = ["full", "no_distractor", "random_distractor", "no_decoder"]
        .map(String::from)
        .to_vec();
    let mut gres_votes = 0;
    let mut res_votes = 0;
    let mut detail = Vec::new();
    for seed in [4201u64, 4202, 4203] {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.n_scenes = 96;
        cfg.n_points = 1024;
        cfg.steps = 600;
        cfg.batch_size = 8;
        cfg.pretrain_steps = 400;
        cfg.checkpoint_every = 10_000;
        let corpus = desk_corpus(&cfg, cfg.n_scenes);
        let (enc_store, _enc, _pre) =
            pretrain_proposals(&corpus, &cfg).map_err(|e| e.to_string())?;
        let rows = run_ablation(&corpus, &cfg, &arms, Some(&enc_store)).map_err(|e| e.to_string())?;
        let get = |name: &str| -> Result<&EvalReport, String> {
            rows.iter()
                .find(|r| r.arm == name)
                .and_then(|r| r.report.as_ref())
                .ok_or_else(|| format!("seed {seed}: arm {name} diverged"))
        };
        let full = get("full")?;
        let nd = get("no_distractor")?;
        let rd = get("random_distractor")?;
        let nodec = get("no_decoder")?;
        let g = (
            full.gres_miou.unwrap_or(0.0),
            nd.gres_miou.unwrap_or(0.0),
            rd.gres_miou.unwrap_or(0.0),
        );
        let r = (full.res_miou.unwrap_or(0.0), nodec.res_miou.unwrap_or(0.0));
        let gres_ok = g.0 > g.1 + 0.03 && g.1 > g.2 + 0.03;
        let res_ok = r.0 > r.1 + 0.03;
        if gres_ok {
            gres_votes += 1;
        }
        if res_ok {
            res_votes += 1;
        }
        detail.push(format!(
            "seed {seed}: GRES full {:.3} / no_distractor {:.3} / random {:.3} ({}), RES full {:.3} / no_decoder {:.3} ({})",
            g.0, g.1, g.2, if gres_ok { "ok" } else { "x" },
            r.0, r.1, if res_ok { "ok" } else { "x" },
        ));
    }
    eprintln!("[ablations] {}", detail.join(" | "));
    if gres_votes >= 2 && res_votes >= 2 {
        Ok(format!(
            "GRES ordering {gres_votes}/3 seeds, RES ordering {res_votes}/3 seeds (margin 0.03)"
        ))
    } else {
        Err(format!(
            "GRES ordering {gres_votes}/3, RES ordering {res_votes}/3; {}",
            detail.join(" | ")
        ))
    }
}

/// 7: inference latency strictly increases with the token budget.
fn c7_token_budget() -> Result<String, String> {
    let mut cfg = RunConfig::default();
    cfg.seed = 4107;
    let corpus = desk_corpus(&cfg, 1);
    let rows = run_token_budget_bench(&cfg, &corpus, 50).map_err(|e| e.to_string())?;
    let by = |m: &str| rows.iter().find(|r| r.mode == m).map(|r| r.median_s).unwrap();
    let (oc, p512, p1024) = (by("oc_k"), by("patch_512"), by("patch_1024"));
    if oc < p512 && p512 < p1024 {
        Ok(format!(
            "median latency {oc:.4}s (oc) < {p512:.4}s (512 patches) < {p1024:.4}s (1024 patches), 50 runs each"
        ))
    } else {
        Err(format!("latency ordering violated: oc {oc:.4}, p512 {p512:.4}, p1024 {p1024:.4}"))
    }
}

/// 8: mechanism contracts — [SEG] generation, adapter-at-init identity,
/// frozen-encoder checksum stability.
fn c8_mechanism_contracts(desk: &DeskRun) -> Result<String, String> {
    let seg = desk
        .eval
        .seg_exactly_one_rate
        .ok_or("no generation-based samples evaluated")?;
    let mut problems = Vec::new();
    if seg < 0.99 {
        problems.push(format!("exactly-one-[SEG] rate {seg:.4} < 0.99"));
    }
    if desk.final_checksum != desk.encoder_checksum_before {
        problems.push("frozen-encoder checksum changed during training".into());
    }
    if desk.final_checksum != desk.report.encoder_checksum {
        problems.push("trainer-reported encoder checksum mismatch".into());
    }

    // adapter at init must be a bitwise no-op
    let mut store = ParamStore::new();
    let mut rng: ChaCha8Rng = seeded(4108);
    let base = Linear::new(&mut store, "probe.base", 12, 7, &mut rng);
    let wrapped = LoraLinear::wrap(&mut store, "probe.lora", base, 4, 16.0, &mut rng)
        .map_err(|e| e.to_string())?;
    let tape = Tape::new();
    let x = tape.constant(rand_vec(&mut rng, 5 * 12, -2.0, 2.0), vec![5, 12]);
    let with_adapter = wrapped.forward(&tape, &x).to_vec();
    let plain = wrapped.base.forward(&tape, &x).to_vec();
    if !with_adapter
        .iter()
        .zip(&plain)
        .all(|(a, b)| a.to_bits() == b.to_bits())
    {
        problems.push("adapter-at-init output differs bitwise from the base layer".into());
    }
    if !problems.is_empty() {
        return Err(problems.join("; "));
    }
    Ok(format!(
        "[SEG] rate {seg:.4} >= 0.99; adapter-at-init bitwise identity; encoder checksum stable"
    ))
}

#[test]
fn acceptance() {
    // PLM_ACCEPTANCE_CRITERIA="1,2,3" narrows the run for development;
    // the default (unset) runs all eight gates.
    let selected: Option<Vec<u32>> = std::env::var("PLM_ACCEPTANCE_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wants = |n: u32| selected.as_ref().map_or(true, |v| v.contains(&n));

    let mut lines = Vec::new();
    let mut failed = Vec::new();
    let mut record = |name: &str, res: Result<String, String>| match res {
        Ok(d) => lines.push(format!("criterion {name}: PASS — {d}")),
        Err(d) => {
            lines.push(format!("criterion {name}: FAIL — {d}"));
            failed.push(name.to_string());
        }
    };

    if wants(1) {
        record("1 (assignment oracle)", c1_assignment_oracle());
    }
    if wants(2) {
        record("2 (gradient suite)", c2_gradient_suite());
    }
    if wants(3) {
        record("3 (closed-form losses)", c3_closed_forms());
    }
    if wants(4) {
        record("4 (metric harness)", c4_metric_harness());
    }
    if wants(7) {
        record("7 (token-budget latency)", c7_token_budget());
    }

    if wants(5) || wants(8) {
        match run_desk_training() {
            Ok(desk) => {
                if wants(5) {
                    record("5 (end-to-end desk training)", c5_end_to_end(&desk));
                }
                if wants(8) {
                    record("8 (mechanism contracts)", c8_mechanism_contracts(&desk));
                }
            }
            Err(e) => {
                if wants(5) {
                    record("5 (end-to-end desk training)", Err(e.clone()));
                }
                if wants(8) {
                    record("8 (mechanism contracts)", Err(format!("desk run unavailable: {e}")));
                }
            }
        }
    }
    if wants(6) {
        record("6 (directional ablations)", c6_directional_ablations());
    }

    lines.sort();
    for l in &lines {
        println!("{l}");
        eprintln!("{l}");
    }
    assert!(failed.is_empty(), "acceptance criteria failed: {failed:?}");
}
