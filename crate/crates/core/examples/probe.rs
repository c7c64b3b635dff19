//! Scratch probe: decoder quality diagnostics on a trained checkpoint.
use plm_core::corpus::Split;
use plm_core::lm::SEG;
use plm_core::metrics::{mask_iou, BitMask};
use plm_tensor::Tape;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (_store, model) =
        plm_core::model::PlmModel::load_checkpoint(std::path::Path::new(&args[1])).unwrap();
    let corpus = plm_core::corpus::load_corpus(std::path::Path::new(&args[2])).unwrap();
    let want_train = args.get(3).map(|s| s == "train").unwrap_or(false);
    let limit: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(40);

    let mut n = 0usize;
    let mut top1 = 0usize;
    let mut sum_best_iou = 0.0;
    let mut sum_argmax_iou = 0.0;
    let mut sum_tgt_best = 0.0;
    let mut sum_tgt_max = 0.0;
    let mut shown = 0usize;
    for (idx, s) in corpus.samples.iter().enumerate() {
        let take = if want_train { s.split == Split::Train } else { s.split == Split::Val };
        if !take || s.targets.is_empty() {
            continue;
        }
        let scene = &corpus.scenes[s.scene];
        let feats = model.encode_scene(scene).unwrap();
        let prompt = model.vocab.tokenize_prompt(&s.prompt).unwrap();
        let oc_data = {
            let t = Tape::new();
            model.lm_tokens(&t, scene, &feats).unwrap().0.to_vec()
        };
        let gen = model.lm.generate(&prompt, &oc_data, 24).unwrap();
        if gen.iter().filter(|&&t| t == SEG).count() != 1 {
            println!("idx {idx} bad seg count: {:?}", model.vocab.detokenize(&gen));
            continue;
        }
        let segpos = gen.iter().position(|&t| t == SEG).unwrap();
        let mut ids = prompt.clone();
        ids.extend_from_slice(&gen[..=segpos]);
        let tape = Tape::new();
        let (oc, f_point) = model.lm_tokens(&tape, scene, &feats).unwrap();
        let (hidden, map) = model.lm.hidden_states(&tape, &ids, &oc).unwrap();
        let y_seg = hidden.slice_rows(map[ids.len() - 1], 1);
        let out = model.grd.forward(&tape, &y_seg, &oc, &f_point).unwrap();
        let probs = out.class_probs.to_vec();
        let logits = out.mask_logits.to_vec();
        let np = scene.n_points;
        let q = probs.len() / 2;
        let gt = scene.union_mask(&s.targets).unwrap();
        let mut best = (0usize, -1.0f64);
        let mut ious = vec![0.0; q];
        for qi in 0..q {
            let m = BitMask::from_logits(&logits[qi * np..(qi + 1) * np]);
            ious[qi] = mask_iou(&m, &gt);
            if ious[qi] > best.1 {
                best = (qi, ious[qi]);
            }
        }
        let argmax = (0..q)
            .max_by(|&a, &b| probs[a * 2].partial_cmp(&probs[b * 2]).unwrap())
            .unwrap();
        n += 1;
        if argmax == best.0 {
            top1 += 1;
        }
        sum_best_iou += best.1;
        sum_argmax_iou += ious[argmax];
        sum_tgt_best += probs[best.0 * 2];
        sum_tgt_max += probs[argmax * 2];
        if shown < 4 {
            println!(
                "idx {idx} {:?} gen: {:?}",
                s.task,
                model.vocab.detokenize(&gen)
            );
            shown += 1;
        }
        if n >= limit {
            break;
        }
    }
    println!(
        "{} samples: top1-match {:.2} | best-iou {:.3} argmax-iou {:.3} | tgt@best {:.3} tgt-max {:.3}",
        n,
        top1 as f64 / n as f64,
        sum_best_iou / n as f64,
        sum_argmax_iou / n as f64,
        sum_tgt_best / n as f64,
        sum_tgt_max / n as f64
    );
}
