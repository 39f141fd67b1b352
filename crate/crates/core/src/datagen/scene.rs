use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Aabb;
use crate::vocab::{COLORS, LABELS};

/// Nominal (width, depth, height) per label, in meters.
const SIZE_PRIORS: [[f64; 3]; 20] = [
    [0.5, 0.5, 0.9],   // chair
    [1.4, 0.9, 0.75],  // table
    [2.0, 1.6, 0.55],  // bed
    [1.9, 0.85, 0.8],  // sofa
    [0.9, 0.45, 1.2],  // cabinet
    [1.0, 0.5, 0.75],  // desk
    [0.9, 0.3, 1.9],   // bookshelf
    [0.3, 0.3, 1.6],   // lamp
    [0.4, 0.7, 0.75],  // toilet
    [0.8, 0.5, 0.3],   // sink
    [1.7, 0.75, 0.55], // bathtub
    [0.75, 0.7, 1.8],  // refrigerator
    [0.9, 0.1, 2.0],   // door
    [0.4, 0.4, 0.4],   // box
    [0.3, 0.3, 0.55],  // trashcan
    [0.5, 0.4, 0.6],   // nightstand
    [1.2, 0.5, 1.0],   // dresser
    [0.7, 0.7, 0.4],   // ottoman
    [1.5, 0.6, 1.3],   // piano
    [2.2, 0.6, 0.9],   // counter
];

const COLOR_TABLE: [[f64; 3]; 8] = [
    [0.85, 0.1, 0.1],
    [0.1, 0.2, 0.85],
    [0.1, 0.7, 0.2],
    [0.9, 0.85, 0.1],
    [0.95, 0.95, 0.95],
    [0.08, 0.08, 0.08],
    [0.5, 0.3, 0.15],
    [0.5, 0.5, 0.5],
];

const FLOOR_RGB: [f64; 3] = [0.6, 0.55, 0.45];
const LARGE_SCALE: f64 = 1.12;
const SMALL_SCALE: f64 = 0.88;
/// Fresh label/size draws for an object that does not fit.
const OBJECT_REDRAWS: usize = 8;
const PLACEMENT_GAP: f64 = 0.1;

pub fn size_prior(label: &str) -> Option<[f64; 3]> {
    LABELS.iter().position(|l| *l == label).map(|i| SIZE_PRIORS[i])
}

pub fn color_rgb(name: &str) -> Option<[f64; 3]> {
    COLORS.iter().position(|c| *c == name).map(|i| COLOR_TABLE[i])
}

/// Name of the palette entry closest to `rgb`.
pub fn nearest_color(rgb: [f64; 3]) -> &'static str {
    let dist = |c: &[f64; 3]| (0..3).map(|i| (c[i] - rgb[i]).powi(2)).sum::<f64>();
    let best = (0..COLOR_TABLE.len())
        .min_by(|&a, &b| dist(&COLOR_TABLE[a]).total_cmp(&dist(&COLOR_TABLE[b])))
        .unwrap();
    COLORS[best]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: u32,
    pub class_label: String,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub color_name: String,
    /// `[size adjective, color]`, e.g. `["large", "red"]`.
    pub attributes: Vec<String>,
}

impl ObjectSpec {
    pub fn aabb(&self) -> Aabb {
        Aabb::new(self.center, self.size)
    }

    pub fn size_word(&self) -> &str {
        &self.attributes[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub seed: u64,
    pub objects: Vec<ObjectSpec>,
    pub extent: Aabb,
}

impl Scene {
    pub fn object(&self, id: u32) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Index of the object whose center is closest to `objects[idx]`'s, ties by lowest index.
    pub fn nearest_neighbor(&self, idx: usize) -> Option<usize> {
        let c = self.objects[idx].center;
        let mut best: Option<(usize, f64)> = None;
        for (j, o) in self.objects.iter().enumerate() {
            if j == idx {
                continue;
            }
            let d: f64 = (0..3).map(|i| (o.center[i] - c[i]).powi(2)).sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        best.map(|(j, _)| j)
    }

    pub fn count_class(&self, label: &str) -> usize {
        self.objects.iter().filter(|o| o.class_label == label).count()
    }

    /// Distinct labels in order of first appearance.
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for o in &self.objects {
            if !out.contains(&o.class_label) {
                out.push(o.class_label.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Room size (x, y, z); the room spans `[-x/2, x/2] x [-y/2, y/2] x [0, z]`.
    pub room: [f64; 3],
    pub labels: Vec<String>,
    /// Probability that a new object repeats an already used label.
    pub repeat_prob: f64,
    pub placement_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_objects: 3,
            max_objects: 8,
            room: [6.0, 6.0, 3.0],
            labels: LABELS.iter().map(|s| s.to_string()).collect(),
            repeat_prob: 0.35,
            placement_attempts: 500,
        }
    }
}

impl SceneConfig {
    pub fn extent(&self) -> Aabb {
        Aabb::new([0.0, 0.0, 0.5 * self.room[2]], self.room)
    }

    fn validate(&self) -> Result<()> {
        if self.min_objects < 2 || self.max_objects > 12 || self.min_objects > self.max_objects {
            return Err(Error::config("object count range must lie within [2, 12]"));
        }
        if let Some(bad) = self.labels.iter().find(|l| size_prior(l).is_none()) {
            return Err(Error::UnknownLabel(bad.clone()));
        }
        if self.labels.is_empty() {
            return Err(Error::config("empty label set"));
        }
        Ok(())
    }
}

pub fn scene_id(seed: u64) -> String {
    format!("scene_{seed:06}")
}

pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = cfg.extent();
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
    let mut used: Vec<String> = Vec::new();

    let (lo, hi) = (extent.min(), extent.max());
    for id in 0..count {
        let mut placed = None;
        for _ in 0..OBJECT_REDRAWS {
            let label = if !used.is_empty() && rng.random_bool(cfg.repeat_prob) {
                used[rng.random_range(0..used.len())].clone()
            } else {
                cfg.labels[rng.random_range(0..cfg.labels.len())].clone()
            };
            let large = rng.random_bool(0.5);
            let scale = if large { LARGE_SCALE } else { SMALL_SCALE };
            let prior = size_prior(&label).unwrap();
            let size: [f64; 3] = std::array::from_fn(|i| prior[i] * scale * rng.random_range(0.97..1.03));
            let color = COLORS[rng.random_range(0..COLORS.len())].to_string();
            if size[0] >= hi[0] - lo[0] || size[1] >= hi[1] - lo[1] {
                continue;
            }
            for _ in 0..cfg.placement_attempts {
                let cx = rng.random_range(lo[0] + 0.5 * size[0]..=hi[0] - 0.5 * size[0]);
                let cy = rng.random_range(lo[1] + 0.5 * size[1]..=hi[1] - 0.5 * size[1]);
                let candidate = Aabb::new([cx, cy, 0.5 * size[2]], size);
                let padded = Aabb::new(
                    candidate.center,
                    [size[0] + PLACEMENT_GAP, size[1] + PLACEMENT_GAP, size[2]],
                );
                if objects
                    .iter()
                    .all(|o| padded.intersection_volume(&o.aabb()) == 0.0)
                {
                    placed = Some((label.clone(), large, color.clone(), candidate));
                    break;
                }
            }
            if placed.is_some() {
                break;
            }
        }
        let Some((label, large, color, aabb)) = placed else {
            return Err(Error::PlacementFailed {
                requested: count,
                attempts: cfg.placement_attempts,
            });
        };
        if !used.contains(&label) {
            used.push(label.clone());
        }
        objects.push(ObjectSpec {
            id: id as u32,
            class_label: label,
            center: aabb.center,
            size: aabb.size,
            color_name: color.clone(),
            attributes: vec![if large { "large" } else { "small" }.to_string(), color],
        });
    }

    Ok(Scene {
        scene_id: scene_id(seed),
        seed,
        objects,
        extent,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    /// xyz (meters) followed by rgb in [0, 1].
    pub points: Vec<[f64; 6]>,
    /// Object id that produced each point; `None` for floor points.
    pub owner: Vec<Option<u32>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn xyz(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| [p[0], p[1], p[2]]).collect()
    }
}

pub const MIN_POINTS_PER_OBJECT: usize = 16;
const FLOOR_FRACTION: f64 = 0.2;
const RGB_NOISE: f64 = 0.03;

/// Side-face and top-face areas (bottom rests on the floor and is not sampled).
fn face_areas(size: [f64; 3]) -> [f64; 5] {
    let [w, d, h] = size;
    [w * d, w * h, w * h, d * h, d * h]
}

fn allocate(n_total: usize, weights: &[f64], minimums: &[usize]) -> Vec<usize> {
    let base: usize = minimums.iter().sum();
    let rest = n_total.saturating_sub(base);
    let wsum: f64 = weights.iter().sum();
    let mut counts: Vec<usize> = minimums.to_vec();
    let shares: Vec<f64> = weights.iter().map(|w| rest as f64 * w / wsum).collect();
    let mut given = 0;
    for (c, s) in counts.iter_mut().zip(&shares) {
        *c += s.floor() as usize;
        given += s.floor() as usize;
    }
    // largest remainder
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        (shares[b] - shares[b].floor())
            .total_cmp(&(shares[a] - shares[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in order.iter().take(rest - given) {
        counts[i] += 1;
    }
    counts
}

/// Samples `n_points` colored points from object surfaces and the floor.
pub fn render_point_cloud(scene: &Scene, n_points: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c10d);
    let noise = Normal::new(0.0, RGB_NOISE).unwrap();
    let n_floor = ((n_points as f64 * FLOOR_FRACTION).round() as usize).min(n_points);
    let n_objects = n_points - n_floor;

    let weights: Vec<f64> = scene
        .objects
        .iter()
        .map(|o| face_areas(o.size).iter().sum())
        .collect();
    let minimums: Vec<usize> = scene
        .objects
        .iter()
        .map(|o| {
            if o.aabb().volume() >= 0.01 {
                MIN_POINTS_PER_OBJECT
            } else {
                1
            }
        })
        .collect();
    let counts = if scene.objects.is_empty() {
        Vec::new()
    } else {
        allocate(n_objects, &weights, &minimums)
    };
    // all points go to the floor when there are no objects
    let n_floor = n_points.saturating_sub(counts.iter().sum::<usize>());

    let mut points = Vec::with_capacity(n_points);
    let mut owner = Vec::with_capacity(n_points);
    let jitter = |base: [f64; 3], rng: &mut ChaCha8Rng| -> [f64; 3] {
        std::array::from_fn(|i| (base[i] + noise.sample(rng)).clamp(0.0, 1.0))
    };

    for (obj, &count) in scene.objects.iter().zip(&counts) {
        let rgb = color_rgb(&obj.color_name).unwrap_or([0.5; 3]);
        let areas = face_areas(obj.size);
        let total: f64 = areas.iter().sum();
        let (lo, hi) = (obj.aabb().min(), obj.aabb().max());
        for _ in 0..count {
            let mut pick = rng.random_range(0.0..total);
            let mut face = 0;
            while face < 4 && pick >= areas[face] {
                pick -= areas[face];
                face += 1;
            }
            let u: [f64; 3] = std::array::from_fn(|i| rng.random_range(lo[i]..=hi[i]));
            let p = match face {
                0 => [u[0], u[1], hi[2]],
                1 => [u[0], lo[1], u[2]],
                2 => [u[0], hi[1], u[2]],
                3 => [lo[0], u[1], u[2]],
                _ => [hi[0], u[1], u[2]],
            };
            let c = jitter(rgb, &mut rng);
            points.push([p[0], p[1], p[2], c[0], c[1], c[2]]);
            owner.push(Some(obj.id));
        }
    }

    let (lo, hi) = (scene.extent.min(), scene.extent.max());
    for _ in 0..n_floor {
        let x = rng.random_range(lo[0]..=hi[0]);
        let y = rng.random_range(lo[1]..=hi[1]);
        let c = jitter(FLOOR_RGB, &mut rng);
        points.push([x, y, lo[2], c[0], c[1], c[2]]);
        owner.push(None);
    }

    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut rng);
    PointCloud {
        points: order.iter().map(|&i| points[i]).collect(),
        owner: order.iter().map(|&i| owner[i]).collect(),
    }
}
