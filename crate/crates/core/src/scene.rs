//! Procedural scene generator: primitive-surface instances placed without
//! overlap on a floor slab, plus the relation evaluator used to build and
//! verify referring expressions.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use plm_tensor::rng::seeded;

use crate::metrics::{BitMask, Box3};
use crate::taxonomy::Taxonomy;
use crate::CoreError;

/// Named color buckets the language refers to.
pub const COLOR_BUCKETS: &[(&str, [f64; 3])] = &[
    ("red", [0.75, 0.15, 0.15]),
    ("green", [0.15, 0.65, 0.2]),
    ("blue", [0.2, 0.3, 0.75]),
    ("yellow", [0.85, 0.8, 0.2]),
    ("brown", [0.5, 0.33, 0.16]),
    ("gray", [0.5, 0.5, 0.5]),
    ("white", [0.92, 0.92, 0.92]),
];

const FLOOR_SIZE: f64 = 6.0;
const SURFACE_NOISE: f64 = 0.01;
const PLACEMENT_MARGIN: f64 = 0.05;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Clone, Copy, Debug)]
enum Primitive {
    Cuboid,
    Ellipsoid,
    Cylinder,
}

/// Footprint/height ranges per category, in meters.
fn shape_for(name: &str) -> (Primitive, [f64; 3], [f64; 3]) {
    match name {
        "chair" => (Primitive::Cuboid, [0.45, 0.45, 0.8], [0.6, 0.6, 1.0]),
        "armchair" => (Primitive::Cuboid, [0.7, 0.7, 0.7], [0.95, 0.9, 0.9]),
        "sofa" => (Primitive::Cuboid, [1.6, 0.8, 0.7], [2.2, 1.0, 0.9]),
        "sofa bed" => (Primitive::Cuboid, [1.7, 1.0, 0.5], [2.3, 1.4, 0.7]),
        "table" => (Primitive::Cuboid, [0.9, 0.9, 0.7], [1.6, 1.1, 0.8]),
        "desk" => (Primitive::Cuboid, [1.1, 0.55, 0.7], [1.5, 0.75, 0.8]),
        "nightstand" => (Primitive::Cuboid, [0.4, 0.4, 0.45], [0.55, 0.5, 0.6]),
        "bookshelf" => (Primitive::Cuboid, [0.8, 0.3, 1.6], [1.2, 0.4, 2.1]),
        "cabinet" => (Primitive::Cuboid, [0.8, 0.45, 0.8], [1.2, 0.6, 1.1]),
        "wardrobe" => (Primitive::Cuboid, [1.0, 0.6, 1.8], [1.5, 0.7, 2.2]),
        "fridge" => (Primitive::Cuboid, [0.6, 0.6, 1.6], [0.8, 0.8, 1.9]),
        "oven" => (Primitive::Cuboid, [0.55, 0.55, 0.55], [0.7, 0.7, 0.9]),
        "plant" => (Primitive::Ellipsoid, [0.35, 0.35, 0.5], [0.7, 0.7, 1.2]),
        "lamp" => (Primitive::Cylinder, [0.15, 0.15, 1.2], [0.3, 0.3, 1.7]),
        "sink" => (Primitive::Ellipsoid, [0.45, 0.35, 0.2], [0.65, 0.5, 0.3]),
        "bathtub" => (Primitive::Ellipsoid, [1.4, 0.65, 0.45], [1.8, 0.8, 0.6]),
        _ => (Primitive::Cuboid, [0.5, 0.5, 0.5], [1.0, 1.0, 1.0]),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Instance {
    pub instance_id: u32,
    pub category_id: u32,
    pub color_bucket: usize,
    pub point_indices: Vec<u32>,
    pub box3: Box3,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scene {
    pub n_points: usize,
    /// Row-major N x 6: x, y, z, r, g, b.
    pub points: Vec<f64>,
    pub instances: Vec<Instance>,
}

impl Scene {
    pub fn xyz(&self, i: usize) -> [f64; 3] {
        let o = i * 6;
        [self.points[o], self.points[o + 1], self.points[o + 2]]
    }

    pub fn instance(&self, id: u32) -> Result<&Instance, CoreError> {
        self.instances
            .iter()
            .find(|inst| inst.instance_id == id)
            .ok_or_else(|| CoreError::Data(format!("unknown instance id {id}")))
    }

    pub fn instance_mask(&self, id: u32) -> Result<BitMask, CoreError> {
        let inst = self.instance(id)?;
        let idx: Vec<usize> = inst.point_indices.iter().map(|&i| i as usize).collect();
        Ok(BitMask::from_indices(self.n_points, &idx))
    }

    /// Union mask of several instances; empty set gives an all-zero mask.
    pub fn union_mask(&self, ids: &[u32]) -> Result<BitMask, CoreError> {
        let mut m = BitMask::zeros(self.n_points);
        for &id in ids {
            m.union_with(&self.instance_mask(id)?);
        }
        Ok(m)
    }

    pub fn categories_present(&self) -> Vec<u32> {
        let mut cats: Vec<u32> = self.instances.iter().map(|i| i.category_id).collect();
        cats.sort_unstable();
        cats.dedup();
        cats
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SceneGenConfig {
    pub n_points: usize,
    pub min_instances: usize,
    pub max_instances: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig { n_points: 2048, min_instances: 4, max_instances: 8 }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniform point on the surface of the primitive, in its local frame
/// centered at the origin with extents `size`.
fn surface_point(rng: &mut ChaCha8Rng, prim: Primitive, size: [f64; 3]) -> [f64; 3] {
    let [sx, sy, sz] = size;
    match prim {
        Primitive::Cuboid => {
            let (hx, hy, hz) = (sx / 2.0, sy / 2.0, sz / 2.0);
            let areas = [sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 5;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    face = i;
                    break;
                }
                pick -= a;
            }
            let u = rng.gen_range(-1.0..1.0);
            let v = rng.gen_range(-1.0..1.0);
            match face {
                0 => [hx, u * hy, v * hz],
                1 => [-hx, u * hy, v * hz],
                2 => [u * hx, hy, v * hz],
                3 => [u * hx, -hy, v * hz],
                4 => [u * hx, v * hy, hz],
                _ => [u * hx, v * hy, -hz],
            }
        }
        Primitive::Ellipsoid => {
            // isotropic direction scaled by the radii
            let mut d = [gauss(rng), gauss(rng), gauss(rng)];
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-12);
            d = [d[0] / norm, d[1] / norm, d[2] / norm];
            [d[0] * sx / 2.0, d[1] * sy / 2.0, d[2] * sz / 2.0]
        }
        Primitive::Cylinder => {
            let r = sx.min(sy) / 2.0;
            let lateral = 2.0 * std::f64::consts::PI * r * sz;
            let caps = 2.0 * std::f64::consts::PI * r * r;
            let theta = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            if rng.gen_range(0.0..lateral + caps) < lateral {
                let z = rng.gen_range(-sz / 2.0..sz / 2.0);
                [r * theta.cos(), r * theta.sin(), z]
            } else {
                let rr = r * rng.gen_range(0.0f64..1.0).sqrt();
                let z = if rng.gen_bool(0.5) { sz / 2.0 } else { -sz / 2.0 };
                [rr * theta.cos(), rr * theta.sin(), z]
            }
        }
    }
}

struct Placed {
    category_id: u32,
    color_bucket: usize,
    prim: Primitive,
    size: [f64; 3],
    center: [f64; 3],
}

fn footprint_overlaps(a: &Placed, b: &Placed) -> bool {
    (0..2).all(|d| {
        (a.center[d] - b.center[d]).abs()
            < (a.size[d] + b.size[d]) / 2.0 + PLACEMENT_MARGIN
    })
}

/// Deterministic scene from (seed, config, taxonomy).
pub fn generate_scene(
    seed: u64,
    cfg: &SceneGenConfig,
    tax: &Taxonomy,
) -> Result<Scene, CoreError> {
    let mut rng = seeded(seed);
    let n_inst = if cfg.max_instances == 0 {
        0
    } else {
        rng.gen_range(cfg.min_instances..=cfg.max_instances)
    };

    let mut placed: Vec<Placed> = Vec::new();
    for _ in 0..n_inst {
        let mut done = false;
        for _attempt in 0..PLACEMENT_ATTEMPTS {
            let cat = &tax.categories[rng.gen_range(0..tax.categories.len())];
            let (prim, lo, hi) = shape_for(&cat.name);
            let size = [
                rng.gen_range(lo[0]..=hi[0]),
                rng.gen_range(lo[1]..=hi[1]),
                rng.gen_range(lo[2]..=hi[2]),
            ];
            let cx = rng.gen_range(size[0] / 2.0..FLOOR_SIZE - size[0] / 2.0);
            let cy = rng.gen_range(size[1] / 2.0..FLOOR_SIZE - size[1] / 2.0);
            let cand = Placed {
                category_id: cat.id,
                color_bucket: rng.gen_range(0..COLOR_BUCKETS.len()),
                prim,
                size,
                center: [cx, cy, size[2] / 2.0],
            };
            if placed.iter().all(|p| !footprint_overlaps(p, &cand)) {
                placed.push(cand);
                done = true;
                break;
            }
        }
        if !done {
            return Err(CoreError::Data(format!(
                "could not place instance after {PLACEMENT_ATTEMPTS} attempts (seed {seed})"
            )));
        }
    }

    // point budget: instances share about 65% of the cloud, floor gets the rest
    let n = cfg.n_points;
    let mut counts = vec![0usize; placed.len()];
    if !placed.is_empty() {
        let budget = (n as f64 * 0.65) as usize;
        let base = budget / placed.len();
        let min_pts = base.min(50).max(8);
        for c in counts.iter_mut() {
            let jitter = (base as f64 * rng.gen_range(-0.2..0.2)) as i64;
            *c = ((base as i64 + jitter).max(min_pts as i64)) as usize;
        }
        // clamp the total back under budget if jitter overshot
        let total: usize = counts.iter().sum();
        if total > budget {
            let scale = budget as f64 / total as f64;
            for c in counts.iter_mut() {
                *c = ((*c as f64 * scale) as usize).max(min_pts);
            }
        }
    }
    let n_fg: usize = counts.iter().sum();
    if n_fg >= n {
        return Err(CoreError::Data("point budget exceeded by instances".into()));
    }

    // owner = instance index, or usize::MAX for floor
    let mut rows: Vec<([f64; 6], usize)> = Vec::with_capacity(n);
    for (idx, p) in placed.iter().enumerate() {
        let base_color = COLOR_BUCKETS[p.color_bucket].1;
        for _ in 0..counts[idx] {
            let local = surface_point(&mut rng, p.prim, p.size);
            let mut row = [0.0; 6];
            for d in 0..3 {
                row[d] = p.center[d] + local[d] + gauss(&mut rng) * SURFACE_NOISE;
            }
            for d in 0..3 {
                row[3 + d] = (base_color[d] + rng.gen_range(-0.06..0.06)).clamp(0.0, 1.0);
            }
            rows.push((row, idx));
        }
    }
    for _ in 0..n - n_fg {
        let row = [
            rng.gen_range(0.0..FLOOR_SIZE),
            rng.gen_range(0.0..FLOOR_SIZE),
            gauss(&mut rng) * 0.005,
            (0.35 + rng.gen_range(-0.04f64..0.04)).clamp(0.0, 1.0),
            (0.33 + rng.gen_range(-0.04f64..0.04)).clamp(0.0, 1.0),
            (0.3 + rng.gen_range(-0.04f64..0.04)).clamp(0.0, 1.0),
        ];
        rows.push((row, usize::MAX));
    }
    rows.shuffle(&mut rng);

    let mut points = Vec::with_capacity(n * 6);
    let mut index_sets: Vec<Vec<u32>> = vec![Vec::new(); placed.len()];
    for (i, (row, owner)) in rows.iter().enumerate() {
        points.extend_from_slice(row);
        if *owner != usize::MAX {
            index_sets[*owner].push(i as u32);
        }
    }

    let mut instances = Vec::with_capacity(placed.len());
    for (idx, p) in placed.iter().enumerate() {
        let pts = index_sets[idx].iter().map(|&i| {
            let o = i as usize * 6;
            [points[o], points[o + 1], points[o + 2]]
        });
        let box3 = Box3::tight(pts)?;
        instances.push(Instance {
            instance_id: idx as u32,
            category_id: p.category_id,
            color_bucket: p.color_bucket,
            point_indices: index_sets[idx].clone(),
            box3,
        });
    }

    Ok(Scene { n_points: n, points, instances })
}

/// Spatial relation inside a referring expression.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    Leftmost,
    Largest,
    /// Nearest to any instance of the named category.
    NextTo(u32),
}

/// A structured referring expression: category, optional color bucket,
/// optional relation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Referent {
    pub category_id: u32,
    pub color_bucket: Option<usize>,
    pub relation: Option<Relation>,
}

/// Evaluate a referent against every instance; the returned ids are the
/// instances the expression denotes. Relations always select at most one.
pub fn eval_referent(scene: &Scene, r: &Referent) -> Vec<u32> {
    let mut cands: Vec<&Instance> = scene
        .instances
        .iter()
        .filter(|i| i.category_id == r.category_id)
        .collect();
    if let Some(b) = r.color_bucket {
        cands.retain(|i| i.color_bucket == b);
    }
    match &r.relation {
        None => cands.iter().map(|i| i.instance_id).collect(),
        Some(Relation::Leftmost) => cands
            .iter()
            .min_by(|a, b| {
                a.box3.center[0]
                    .partial_cmp(&b.box3.center[0])
                    .unwrap()
                    .then(a.instance_id.cmp(&b.instance_id))
            })
            .map(|i| vec![i.instance_id])
            .unwrap_or_default(),
        Some(Relation::Largest) => cands
            .iter()
            .max_by(|a, b| {
                a.box3
                    .volume()
                    .partial_cmp(&b.box3.volume())
                    .unwrap()
                    .then(b.instance_id.cmp(&a.instance_id))
            })
            .map(|i| vec![i.instance_id])
            .unwrap_or_default(),
        Some(Relation::NextTo(cat)) => {
            let anchors: Vec<&Instance> = scene
                .instances
                .iter()
                .filter(|i| i.category_id == *cat)
                .collect();
            if anchors.is_empty() {
                return Vec::new();
            }
            let dist = |i: &Instance| -> f64 {
                anchors
                    .iter()
                    .filter(|a| a.instance_id != i.instance_id)
                    .map(|a| {
                        let d: f64 = (0..3)
                            .map(|k| (a.box3.center[k] - i.box3.center[k]).powi(2))
                            .sum();
                        d.sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            };
            cands
                .iter()
                .filter(|i| dist(i).is_finite())
                .min_by(|a, b| {
                    dist(a)
                        .partial_cmp(&dist(b))
                        .unwrap()
                        .then(a.instance_id.cmp(&b.instance_id))
                })
                .map(|i| vec![i.instance_id])
                .unwrap_or_default()
        }
    }
}

/// Distractor selection mode lives in the run config; this applies it.
pub fn select_distractors(
    scene: &Scene,
    targets: &[u32],
    tax: &Taxonomy,
    mode: crate::config::DistractorMode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u32>, CoreError> {
    let target_cats: Vec<u32> = targets
        .iter()
        .map(|&id| scene.instance(id).map(|i| i.category_id))
        .collect::<Result<_, _>>()?;
    let non_targets: Vec<&Instance> = scene
        .instances
        .iter()
        .filter(|i| !targets.contains(&i.instance_id))
        .collect();
    match mode {
        crate::config::DistractorMode::None => Ok(Vec::new()),
        crate::config::DistractorMode::Semantic => Ok(non_targets
            .iter()
            .filter(|i| {
                target_cats
                    .iter()
                    .any(|&tc| i.category_id == tc || tax.same_group(i.category_id, tc))
            })
            .map(|i| i.instance_id)
            .collect()),
        crate::config::DistractorMode::Random => {
            let semantic_n = select_distractors(
                scene,
                targets,
                tax,
                crate::config::DistractorMode::Semantic,
                rng,
            )?
            .len();
            let mut pool: Vec<u32> = non_targets.iter().map(|i| i.instance_id).collect();
            pool.shuffle(rng);
            pool.truncate(semantic_n);
            pool.sort_unstable();
            Ok(pool)
        }
    }
}
