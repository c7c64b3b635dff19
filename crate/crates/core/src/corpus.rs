//! Corpus of scenes and language samples for the four tasks, with a binary
//! scene container and JSONL sample records.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use plm_tensor::rng::{seeded, split_n};

use crate::config::DistractorMode;
use crate::metrics::Box3;
use crate::scene::{
    eval_referent, generate_scene, select_distractors, Instance, Referent, Relation, Scene,
    SceneGenConfig, COLOR_BUCKETS,
};
use crate::taxonomy::Taxonomy;
use crate::CoreError;

pub const CORPUS_MAGIC: &[u8; 4] = b"PLMC";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ovis,
    Ovss,
    Res,
    Gres,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Ovis => "ovis",
            Task::Ovss => "ovss",
            Task::Res => "res",
            Task::Gres => "gres",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sample {
    pub scene: usize,
    pub split: Split,
    pub task: Task,
    pub prompt: String,
    /// Referent phrase echoed in the supervised response before [SEG], so
    /// the language loss itself forces the referent into the hidden state.
    pub phrase: String,
    /// Category the prompt names (class-template tasks and zero-target
    /// construction); referring targets carry it too for bookkeeping.
    pub category_id: u32,
    pub targets: Vec<u32>,
    /// Distractors under the generation-time mode (semantic by default).
    pub distractors: Vec<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub version: u32,
    pub seed: u64,
    pub n_scenes: usize,
    pub n_train_scenes: usize,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub taxonomy: Taxonomy,
    pub scenes: Vec<Scene>,
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn train_samples(&self) -> Vec<usize> {
        self.sample_ids(Split::Train)
    }

    pub fn val_samples(&self) -> Vec<usize> {
        self.sample_ids(Split::Val)
    }

    fn sample_ids(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn class_prompt(category: &str) -> String {
    format!("[point] Can you segment the {category} objects in this point cloud ?")
}

pub fn referring_prompt(description: &str) -> String {
    format!("[point] Where is the object : {description} . Can you segment the described object ?")
}

/// Render a structured referent as closed-vocabulary text.
pub fn describe(r: &Referent, tax: &Taxonomy) -> String {
    let cat = &tax.category(r.category_id).expect("referent category").name;
    let color = r.color_bucket.map(|b| COLOR_BUCKETS[b].0);
    let head = match color {
        Some(c) => format!("{c} {cat}"),
        None => cat.clone(),
    };
    match &r.relation {
        None => format!("the {head}"),
        Some(Relation::Leftmost) => format!("the leftmost {head}"),
        Some(Relation::Largest) => format!("the largest {head}"),
        Some(Relation::NextTo(anchor)) => {
            let a = &tax.category(*anchor).expect("anchor category").name;
            format!("the {head} next to the {a}")
        }
    }
}

/// Categories a split's prompts may name.
fn allowed(tax: &Taxonomy, split: Split, id: u32) -> bool {
    split == Split::Val || !tax.is_holdout(id)
}

/// All candidate referents for a scene, cheapest first variety-wise.
fn candidate_referents(scene: &Scene, tax: &Taxonomy, split: Split) -> Vec<Referent> {
    let mut out = Vec::new();
    let cats = scene.categories_present();
    for &c in cats.iter().filter(|&&c| allowed(tax, split, c)) {
        out.push(Referent { category_id: c, color_bucket: None, relation: None });
        for b in 0..COLOR_BUCKETS.len() {
            out.push(Referent { category_id: c, color_bucket: Some(b), relation: None });
        }
        out.push(Referent { category_id: c, color_bucket: None, relation: Some(Relation::Leftmost) });
        out.push(Referent { category_id: c, color_bucket: None, relation: Some(Relation::Largest) });
        for &a in cats.iter().filter(|&&a| a != c && allowed(tax, split, a)) {
            out.push(Referent {
                category_id: c,
                color_bucket: None,
                relation: Some(Relation::NextTo(a)),
            });
        }
    }
    out
}

fn absent_category(scene: &Scene, tax: &Taxonomy, split: Split, rng: &mut impl Rng) -> Option<u32> {
    let present = scene.categories_present();
    let mut absent: Vec<u32> = tax
        .categories
        .iter()
        .map(|c| c.id)
        .filter(|&c| !present.contains(&c) && allowed(tax, split, c))
        .collect();
    if absent.is_empty() {
        None
    } else {
        Some(absent.remove(rng.gen_range(0..absent.len())))
    }
}

/// Generate every sample for one scene.
fn scene_samples(
    scene_idx: usize,
    scene: &Scene,
    tax: &Taxonomy,
    split: Split,
    mode: DistractorMode,
    seed: u64,
) -> Result<Vec<Sample>, CoreError> {
    let mut rng = seeded(seed);
    let mut out = Vec::new();
    let present: Vec<u32> = scene
        .categories_present()
        .into_iter()
        .filter(|&c| allowed(tax, split, c))
        .collect();
    if present.is_empty() {
        return Ok(out);
    }

    let mut push = |task: Task, prompt: String, phrase: String, category_id: u32,
                    targets: Vec<u32>, rng: &mut rand_chacha::ChaCha8Rng|
     -> Result<(), CoreError> {
        let distractors = select_distractors(scene, &targets, tax, mode, rng)?;
        debug_assert!(targets.iter().all(|t| !distractors.contains(t)));
        out.push(Sample {
            scene: scene_idx,
            split,
            task,
            prompt,
            phrase,
            category_id,
            targets,
            distractors,
        });
        Ok(())
    };

    // class-name tasks: one OVIS and one OVSS sample per scene
    for task in [Task::Ovis, Task::Ovss] {
        let cat = present[rng.gen_range(0..present.len())];
        let name = &tax.category(cat).expect("present category").name;
        let targets: Vec<u32> = scene
            .instances
            .iter()
            .filter(|i| i.category_id == cat)
            .map(|i| i.instance_id)
            .collect();
        push(task, class_prompt(name), format!("the {name} objects"), cat, targets, &mut rng)?;
    }

    // referring task: two unique-referent expressions
    let mut cands = candidate_referents(scene, tax, split);
    cands.shuffle(&mut rng);
    let mut made = 0;
    for r in &cands {
        if made == 2 {
            break;
        }
        let denoted = eval_referent(scene, r);
        if denoted.len() == 1 {
            let desc = describe(r, tax);
            push(
                Task::Res,
                referring_prompt(&desc),
                desc,
                r.category_id,
                denoted,
                &mut rng,
            )?;
            made += 1;
        }
    }

    // generalized referring: two samples with target count drawn from 0..=4
    for _ in 0..2 {
        let want_zero = rng.gen_range(0..5) == 0;
        if want_zero {
            if let Some(cat) = absent_category(scene, tax, split, &mut rng) {
                let r = Referent { category_id: cat, color_bucket: None, relation: None };
                let desc = describe(&r, tax);
                // the echoed response says "nothing": absence detection is
                // then supervised through the language loss as well
                push(Task::Gres, referring_prompt(&desc), "nothing".into(), cat, Vec::new(), &mut rng)?;
                continue;
            }
        }
        let mut multi: Vec<(Referent, Vec<u32>)> = Vec::new();
        for r in &cands {
            if r.relation.is_none() {
                let denoted = eval_referent(scene, r);
                if (1..=4).contains(&denoted.len()) {
                    multi.push((r.clone(), denoted));
                }
            }
        }
        if multi.is_empty() {
            continue;
        }
        let (r, denoted) = multi[rng.gen_range(0..multi.len())].clone();
        let desc = describe(&r, tax);
        push(Task::Gres, referring_prompt(&desc), desc, r.category_id, denoted, &mut rng)?;
    }

    Ok(out)
}

/// Deterministic corpus from (seed, scene config, taxonomy).
pub fn generate_corpus(
    seed: u64,
    n_scenes: usize,
    scene_cfg: &SceneGenConfig,
    tax: &Taxonomy,
    mode: DistractorMode,
    config_hash: &str,
) -> Result<Corpus, CoreError> {
    tax.validate()?;
    if n_scenes == 0 {
        return Err(CoreError::Config("corpus needs at least one scene".into()));
    }
    let n_train = (n_scenes * 7 / 8).max(1).min(n_scenes - 1).max(1);
    let n_train = if n_scenes == 1 { 1 } else { n_train };
    let mut scenes = Vec::with_capacity(n_scenes);
    let mut samples = Vec::new();
    for i in 0..n_scenes {
        let split = if i < n_train { Split::Train } else { Split::Val };
        let scene = generate_scene(split_n(seed, "scene", i as u64), scene_cfg, tax)?;
        samples.extend(scene_samples(
            i,
            &scene,
            tax,
            split,
            mode,
            split_n(seed, "samples", i as u64),
        )?);
        scenes.push(scene);
    }
    Ok(Corpus {
        meta: CorpusMeta {
            version: CORPUS_VERSION,
            seed,
            n_scenes,
            n_train_scenes: n_train,
            config_hash: config_hash.to_string(),
        },
        taxonomy: tax.clone(),
        scenes,
        samples,
    })
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CoreError {
    CoreError::Io(path.display().to_string(), e.to_string())
}

fn w_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn w_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn w_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CoreError> {
        if self.pos + n > self.data.len() {
            return Err(io_err(self.path, "truncated scene container"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CoreError> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Write taxonomy.json, scenes.bin, samples.jsonl, and meta.json.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<(), CoreError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let tax_path = dir.join("taxonomy.json");
    let tax_json = serde_json::to_string_pretty(&corpus.taxonomy)
        .map_err(|e| io_err(&tax_path, e))?;
    std::fs::write(&tax_path, tax_json).map_err(|e| io_err(&tax_path, e))?;

    let meta_path = dir.join("meta.json");
    let meta_json =
        serde_json::to_string_pretty(&corpus.meta).map_err(|e| io_err(&meta_path, e))?;
    std::fs::write(&meta_path, meta_json).map_err(|e| io_err(&meta_path, e))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(CORPUS_MAGIC);
    w_u32(&mut buf, CORPUS_VERSION);
    w_u64(&mut buf, corpus.scenes.len() as u64);
    for scene in &corpus.scenes {
        w_u64(&mut buf, scene.n_points as u64);
        w_f64s(&mut buf, &scene.points);
        w_u64(&mut buf, scene.instances.len() as u64);
        for inst in &scene.instances {
            w_u32(&mut buf, inst.instance_id);
            w_u32(&mut buf, inst.category_id);
            w_u32(&mut buf, inst.color_bucket as u32);
            w_u64(&mut buf, inst.point_indices.len() as u64);
            for &pi in &inst.point_indices {
                w_u32(&mut buf, pi);
            }
            w_f64s(&mut buf, &inst.box3.center);
            w_f64s(&mut buf, &inst.box3.size);
        }
    }
    let bin_path = dir.join("scenes.bin");
    let mut f = std::fs::File::create(&bin_path).map_err(|e| io_err(&bin_path, e))?;
    f.write_all(&buf).map_err(|e| io_err(&bin_path, e))?;

    let jsonl_path = dir.join("samples.jsonl");
    let mut lines = String::new();
    for s in &corpus.samples {
        lines.push_str(&serde_json::to_string(s).map_err(|e| io_err(&jsonl_path, e))?);
        lines.push('\n');
    }
    std::fs::write(&jsonl_path, lines).map_err(|e| io_err(&jsonl_path, e))?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, CoreError> {
    let tax_path = dir.join("taxonomy.json");
    let tax_json = std::fs::read_to_string(&tax_path).map_err(|e| io_err(&tax_path, e))?;
    let taxonomy: Taxonomy =
        serde_json::from_str(&tax_json).map_err(|e| io_err(&tax_path, e))?;
    taxonomy.validate()?;

    let meta_path = dir.join("meta.json");
    let meta_json = std::fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: CorpusMeta = serde_json::from_str(&meta_json).map_err(|e| io_err(&meta_path, e))?;

    let bin_path = dir.join("scenes.bin");
    let mut raw = Vec::new();
    std::fs::File::open(&bin_path)
        .map_err(|e| io_err(&bin_path, e))?
        .read_to_end(&mut raw)
        .map_err(|e| io_err(&bin_path, e))?;
    let mut r = Reader { data: &raw, pos: 0, path: &bin_path };
    if r.take(4)? != CORPUS_MAGIC {
        return Err(io_err(&bin_path, "bad magic bytes"));
    }
    let version = r.u32()?;
    if version != CORPUS_VERSION {
        return Err(io_err(&bin_path, format!("unsupported version {version}")));
    }
    let n_scenes = r.u64()? as usize;
    let mut scenes = Vec::with_capacity(n_scenes);
    for _ in 0..n_scenes {
        let n_points = r.u64()? as usize;
        let points = r.f64s(n_points * 6)?;
        let n_inst = r.u64()? as usize;
        let mut instances = Vec::with_capacity(n_inst);
        for _ in 0..n_inst {
            let instance_id = r.u32()?;
            let category_id = r.u32()?;
            let color_bucket = r.u32()? as usize;
            let n_idx = r.u64()? as usize;
            let mut point_indices = Vec::with_capacity(n_idx);
            for _ in 0..n_idx {
                point_indices.push(r.u32()?);
            }
            let c = r.f64s(3)?;
            let s = r.f64s(3)?;
            let box3 = Box3::new([c[0], c[1], c[2]], [s[0], s[1], s[2]])?;
            instances.push(Instance {
                instance_id,
                category_id,
                color_bucket,
                point_indices,
                box3,
            });
        }
        scenes.push(Scene { n_points, points, instances });
    }
    if r.pos != raw.len() {
        return Err(io_err(&bin_path, "trailing bytes in scene container"));
    }

    let jsonl_path = dir.join("samples.jsonl");
    let text = std::fs::read_to_string(&jsonl_path).map_err(|e| io_err(&jsonl_path, e))?;
    let mut samples = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        samples.push(serde_json::from_str(line).map_err(|e| io_err(&jsonl_path, e))?);
    }

    Ok(Corpus { meta, taxonomy, scenes, samples })
}
