//! Deterministic multi-part object benchmark with keypoints and part masks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tns;

const MAX_RETRIES: usize = 64;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Disc,
    Rect,
    Triangle,
}

impl Primitive {
    /// Point test in the primitive's own frame. `size` is the disc radius,
    /// rect half extents, or triangle circumradius.
    fn contains(self, size: (f64, f64), x: f64, y: f64) -> bool {
        match self {
            Primitive::Disc => x * x + y * y <= size.0 * size.0,
            Primitive::Rect => x.abs() <= size.0 && y.abs() <= size.1,
            Primitive::Triangle => {
                // equilateral, apex up, centroid at the origin
                let r = size.0;
                let v = [
                    (0.0, -r),
                    (r * 0.866_025_403_784_438_6, 0.5 * r),
                    (-r * 0.866_025_403_784_438_6, 0.5 * r),
                ];
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let (e0, e1, e2) = (edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0]));
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }

    fn radius(self, size: (f64, f64)) -> f64 {
        match self {
            Primitive::Rect => size.0.hypot(size.1),
            _ => size.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub name: String,
    pub shape: Primitive,
    /// Object-frame position of the part centroid.
    pub offset: (f64, f64),
    pub size: (f64, f64),
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: usize,
    pub name: String,
    pub parts: Vec<PartSpec>,
    /// Classes sharing part names with this one, used for cross-class pairs.
    #[serde(default)]
    pub related: Vec<usize>,
}

impl ClassSpec {
    pub fn validate(&self) -> Result<()> {
        if self.parts.len() < 2 {
            return Err(Error::Config(format!("class {} needs at least 2 parts", self.name)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.parts {
            if !seen.insert(&p.name) {
                return Err(Error::Config(format!("class {} repeats part {}", self.name, p.name)));
            }
        }
        Ok(())
    }

    pub fn part_names(&self) -> Vec<&str> {
        self.parts.iter().map(|p| p.name.as_str()).collect()
    }
}

fn part(name: &str, shape: Primitive, offset: (f64, f64), size: (f64, f64), color: [f64; 3]) -> PartSpec {
    PartSpec {
        name: name.into(),
        shape,
        offset,
        size,
        color,
    }
}

/// Four classes; 0/1 and 2/3 are related and share two parts each.
pub fn default_specs() -> Vec<ClassSpec> {
    use Primitive::*;
    let head = part("head", Disc, (0.0, -9.0), (4.5, 0.0), [0.9, 0.15, 0.15]);
    let torso = part("torso", Rect, (0.0, 2.0), (7.0, 4.0), [0.15, 0.25, 0.85]);
    let wheel = part("wheel", Disc, (-7.0, 7.0), (4.0, 0.0), [0.1, 0.1, 0.1]);
    let cab = part("cab", Rect, (5.0, -5.0), (4.5, 3.5), [0.95, 0.85, 0.1]);
    vec![
        ClassSpec {
            id: 0,
            name: "walker".into(),
            parts: vec![
                head.clone(),
                torso.clone(),
                part("left-foot", Triangle, (-6.0, 11.0), (4.0, 0.0), [0.1, 0.75, 0.2]),
                part("right-foot", Triangle, (6.0, 11.0), (4.0, 0.0), [0.9, 0.5, 0.1]),
            ],
            related: vec![1],
        },
        ClassSpec {
            id: 1,
            name: "flyer".into(),
            parts: vec![
                head,
                torso,
                part("left-wing", Rect, (-11.0, 0.0), (3.0, 6.0), [0.6, 0.2, 0.8]),
                part("tail", Triangle, (0.0, 11.0), (4.5, 0.0), [0.2, 0.8, 0.8]),
            ],
            related: vec![0],
        },
        ClassSpec {
            id: 2,
            name: "cart".into(),
            parts: vec![
                wheel.clone(),
                cab.clone(),
                part("bed", Rect, (-4.0, -1.0), (6.0, 2.5), [0.55, 0.35, 0.15]),
                part("lamp", Disc, (11.0, 0.0), (3.0, 0.0), [1.0, 1.0, 0.9]),
            ],
            related: vec![3],
        },
        ClassSpec {
            id: 3,
            name: "tractor".into(),
            parts: vec![
                wheel,
                cab,
                part("stack", Rect, (-2.0, -11.0), (2.0, 4.0), [0.45, 0.45, 0.5]),
                part("blade", Triangle, (-12.0, 3.0), (4.5, 0.0), [0.9, 0.3, 0.6]),
            ],
            related: vec![2],
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub size: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_rotation_deg: f64,
    pub color_jitter: f64,
    pub max_clutter: usize,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            scale_min: 0.6,
            scale_max: 1.4,
            max_rotation_deg: 25.0,
            color_jitter: 0.3,
            max_clutter: 3,
            noise: 0.03,
        }
    }
}

/// Object placement: image position of the object origin, isotropic scale,
/// rotation in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Pose {
    pub fn identity_at(x: f64, y: f64) -> Self {
        Pose {
            x,
            y,
            scale: 1.0,
            rotation: 0.0,
        }
    }

    pub fn to_image(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        (
            self.x + self.scale * (c * p.0 - s * p.1),
            self.y + self.scale * (s * p.0 + c * p.1),
        )
    }

    pub fn to_object(&self, q: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = ((q.0 - self.x) / self.scale, (q.1 - self.y) / self.scale);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nuisance {
    pub pose: Pose,
    pub color_jitter: f64,
    pub clutter: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    /// `None` for background images.
    pub class: Option<usize>,
    pub pose: Option<Pose>,
    /// Part name → pixel coordinates (pixel centers at integer positions).
    pub keypoints: BTreeMap<String, (f64, f64)>,
    /// Part names in mask-plane order.
    pub parts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `P×H×W` binary part masks, ordered as `annotation.parts`.
    pub masks: Tensor<f32>,
    pub annotation: Annotation,
}

impl Instance {
    pub fn mask(&self, part: &str) -> Option<&[f32]> {
        let i = self.annotation.parts.iter().position(|p| p == part)?;
        Some(self.masks.channel(i))
    }
}

struct Shape {
    prim: Primitive,
    size: (f64, f64),
    color: [f64; 3],
    pose: Pose,
    offset: (f64, f64),
}

impl Shape {
    fn contains(&self, q: (f64, f64)) -> bool {
        let o = self.pose.to_object(q);
        self.prim.contains(self.size, o.0 - self.offset.0, o.1 - self.offset.1)
    }

    /// Conservative image-space bounding box.
    fn bounds(&self) -> (f64, f64, f64, f64) {
        let c = self.pose.to_image(self.offset);
        let r = self.pose.scale * self.prim.radius(self.size) + 1.0;
        (c.0 - r, c.1 - r, c.0 + r, c.1 + r)
    }
}

fn sample_pose(cfg: &SynthConfig, radius: f64, rng: &mut impl Rng) -> Result<Pose> {
    let n = cfg.size as f64;
    for _ in 0..MAX_RETRIES {
        let scale = rng.gen_range(cfg.scale_min..=cfg.scale_max);
        let rotation = rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians();
        let r = radius * scale + 1.0;
        let lo = r;
        let hi = n - 1.0 - r;
        if hi <= lo {
            continue;
        }
        return Ok(Pose {
            x: rng.gen_range(lo..hi),
            y: rng.gen_range(lo..hi),
            scale,
            rotation,
        });
    }
    Err(Error::RetryExhausted(MAX_RETRIES))
}

fn object_radius(spec: &ClassSpec) -> f64 {
    spec.parts
        .iter()
        .map(|p| p.offset.0.hypot(p.offset.1) + p.shape.radius(p.size))
        .fold(0.0, f64::max)
}

pub fn sample_nuisance(spec: Option<&ClassSpec>, cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Nuisance> {
    let pose = match spec {
        Some(s) => sample_pose(cfg, object_radius(s), rng)?,
        None => Pose::identity_at(0.0, 0.0),
    };
    Ok(Nuisance {
        pose,
        color_jitter: cfg.color_jitter,
        clutter: rng.gen_range(0..=cfg.max_clutter),
    })
}

/// Renders `spec` (or a background when `None`) under `nuisance`.
pub fn render(
    spec: Option<&ClassSpec>,
    nuisance: &Nuisance,
    cfg: &SynthConfig,
    rng: &mut impl Rng,
) -> Result<Instance> {
    let n = cfg.size;
    let nf = n as f64;
    let mut shapes = Vec::new();
    for _ in 0..nuisance.clutter {
        let prim = [Primitive::Disc, Primitive::Rect, Primitive::Triangle][rng.gen_range(0..3)];
        let size = (rng.gen_range(2.0..5.0), rng.gen_range(2.0..5.0));
        shapes.push(Shape {
            prim,
            size,
            color: [rng.gen(), rng.gen(), rng.gen()],
            pose: Pose {
                x: rng.gen_range(0.0..nf),
                y: rng.gen_range(0.0..nf),
                scale: 1.0,
                rotation: rng.gen_range(0.0..std::f64::consts::TAU),
            },
            offset: (0.0, 0.0),
        });
    }
    let clutter_count = shapes.len();
    let mut keypoints = BTreeMap::new();
    let mut parts = Vec::new();
    if let Some(spec) = spec {
        spec.validate()?;
        for p in &spec.parts {
            let j = nuisance.color_jitter;
            let color = p.color.map(|c| (c + rng.gen_range(-j..=j)).clamp(0.0, 1.0));
            let shape = Shape {
                prim: p.shape,
                size: p.size,
                color,
                pose: nuisance.pose,
                offset: p.offset,
            };
            let (x0, y0, x1, y1) = shape.bounds();
            if x0 < -0.5 || y0 < -0.5 || x1 > nf - 0.5 || y1 > nf - 0.5 {
                return Err(Error::Invalid(format!("part {} leaves the frame", p.name)));
            }
            keypoints.insert(p.name.clone(), nuisance.pose.to_image(p.offset));
            parts.push(p.name.clone());
            shapes.push(shape);
        }
    }

    let base: f64 = rng.gen_range(0.35..0.65);
    let tint: [f64; 3] = [0, 1, 2].map(|_| rng.gen_range(-0.08..0.08));
    let grad = (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
    let mut image = Tensor::<f32>::zeros(&[3, n, n]);
    let mut masks = Tensor::<f32>::zeros(&[parts.len(), n, n]);
    let bounds: Vec<_> = shapes.iter().map(Shape::bounds).collect();
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64, y as f64);
            let bg_level = base + grad.0 * (fx / nf - 0.5) + grad.1 * (fy / nf - 0.5);
            let noise = if cfg.noise > 0.0 {
                rng.gen_range(-cfg.noise..=cfg.noise)
            } else {
                0.0
            };
            let bg = tint.map(|t| (bg_level + t + noise).clamp(0.0, 1.0));
            let near: Vec<usize> = (0..shapes.len())
                .filter(|&i| {
                    let b = bounds[i];
                    fx + 0.5 >= b.0 && fx - 0.5 <= b.2 && fy + 0.5 >= b.1 && fy - 0.5 <= b.3
                })
                .collect();
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let q = (
                        fx - 0.5 + (sx as f64 + 0.5) / SUPERSAMPLE as f64,
                        fy - 0.5 + (sy as f64 + 0.5) / SUPERSAMPLE as f64,
                    );
                    let top = near.iter().rev().find(|&&i| shapes[i].contains(q));
                    let c = top.map(|&i| shapes[i].color).unwrap_or(bg);
                    for ch in 0..3 {
                        acc[ch] += c[ch];
                    }
                }
            }
            for ch in 0..3 {
                image.data_mut()[(ch * n + y) * n + x] = (acc[ch] * inv) as f32;
            }
            for (pi, &si) in (clutter_count..shapes.len()).collect::<Vec<_>>().iter().enumerate() {
                if near.contains(&si) && shapes[si].contains((fx, fy)) {
                    masks.data_mut()[(pi * n + y) * n + x] = 1.0;
                }
            }
        }
    }
    Ok(Instance {
        image,
        masks,
        annotation: Annotation {
            class: spec.map(|s| s.id),
            pose: spec.map(|_| nuisance.pose),
            keypoints,
            parts,
        },
    })
}

/// Per-instance stream: output never depends on generation order.
pub fn instance_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn generate_instance(spec: Option<&ClassSpec>, cfg: &SynthConfig, seed: u64, id: u64) -> Result<Instance> {
    let mut rng = instance_rng(seed, id);
    for _ in 0..MAX_RETRIES {
        let nuisance = sample_nuisance(spec, cfg, &mut rng)?;
        match render(spec, &nuisance, cfg, &mut rng) {
            Ok(inst) => return Ok(inst),
            Err(Error::Invalid(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::RetryExhausted(MAX_RETRIES))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetCounts {
    pub train_pos_per_class: usize,
    pub train_neg: usize,
    pub test_pos_per_class: usize,
    pub test_neg: usize,
    pub intra_pairs: usize,
    pub cross_pairs: usize,
}

impl Default for DatasetCounts {
    fn default() -> Self {
        DatasetCounts {
            train_pos_per_class: 500,
            train_neg: 2000,
            test_pos_per_class: 50,
            test_neg: 200,
            intra_pairs: 100,
            cross_pairs: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Intra,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub kind: PairKind,
    pub src: u64,
    pub dst: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemInfo {
    pub id: u64,
    pub split: Split,
    pub class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub specs: Vec<ClassSpec>,
    pub config: SynthConfig,
    pub items: Vec<ItemInfo>,
    pub instances: Vec<Instance>,
    pub pairs: Vec<EvalPair>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.specs.len()
    }

    pub fn instance(&self, id: u64) -> &Instance {
        &self.instances[id as usize]
    }

    /// Ids in `split` with the given class (`None` = background).
    pub fn ids(&self, split: Split, class: Option<usize>) -> Vec<u64> {
        self.items
            .iter()
            .filter(|it| it.split == split && it.class == class)
            .map(|it| it.id)
            .collect()
    }

    pub fn pairs_of(&self, kind: PairKind) -> Vec<EvalPair> {
        self.pairs.iter().copied().filter(|p| p.kind == kind).collect()
    }
}

fn related_pairs(specs: &[ClassSpec]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for s in specs {
        for &r in &s.related {
            if s.id < r {
                out.push((s.id, r));
            }
        }
    }
    out
}

/// Item ids are assigned in a fixed order: train positives (class-major),
/// train backgrounds, test positives, test backgrounds, then eval pair images.
pub fn generate_dataset(specs: &[ClassSpec], counts: &DatasetCounts, cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    for (i, s) in specs.iter().enumerate() {
        s.validate()?;
        if s.id != i {
            return Err(Error::Config(format!(
                "class {} has id {} at position {i}",
                s.name, s.id
            )));
        }
        for &r in &s.related {
            let other = specs
                .get(r)
                .ok_or_else(|| Error::Config(format!("class {} related to unknown class {r}", s.name)))?;
            if !s.parts.iter().any(|p| other.parts.iter().any(|q| q.name == p.name)) {
                return Err(Error::Config(format!(
                    "related classes {} and {} share no part name",
                    s.name, other.name
                )));
            }
        }
    }
    let mut items = Vec::new();
    let mut push = |split, class| {
        let id = items.len() as u64;
        items.push(ItemInfo { id, split, class });
        id
    };
    for c in 0..specs.len() {
        for _ in 0..counts.train_pos_per_class {
            push(Split::Train, Some(c));
        }
    }
    for _ in 0..counts.train_neg {
        push(Split::Train, None);
    }
    for c in 0..specs.len() {
        for _ in 0..counts.test_pos_per_class {
            push(Split::Test, Some(c));
        }
    }
    for _ in 0..counts.test_neg {
        push(Split::Test, None);
    }
    let mut pairs = Vec::new();
    if !specs.is_empty() {
        for i in 0..counts.intra_pairs {
            let c = i % specs.len();
            let src = push(Split::Eval, Some(c));
            let dst = push(Split::Eval, Some(c));
            pairs.push(EvalPair {
                kind: PairKind::Intra,
                src,
                dst,
            });
        }
    }
    let rel = related_pairs(specs);
    if !rel.is_empty() {
        for i in 0..counts.cross_pairs {
            let (a, b) = rel[i % rel.len()];
            let (a, b) = if (i / rel.len()) % 2 == 0 { (a, b) } else { (b, a) };
            let src = push(Split::Eval, Some(a));
            let dst = push(Split::Eval, Some(b));
            pairs.push(EvalPair {
                kind: PairKind::Cross,
                src,
                dst,
            });
        }
    }
    let instances = items
        .par_iter()
        .map(|it| generate_instance(it.class.map(|c| &specs[c]), cfg, seed, it.id))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        seed,
        specs: specs.to_vec(),
        config: *cfg,
        items,
        instances,
        pairs,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestItem {
    id: u64,
    split: Split,
    /// `-1` for background.
    class: i64,
    image: String,
    masks: String,
    annotation: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    seed: u64,
    config: SynthConfig,
    classes: Vec<ClassSpec>,
    items: Vec<ManifestItem>,
    pairs: Vec<EvalPair>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.toml`, `images/`, `masks/` and `annotations/` under `dir`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "masks", "annotations"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut items = Vec::with_capacity(ds.items.len());
    for (it, inst) in ds.items.iter().zip(&ds.instances) {
        let image = format!("images/{:06}.tns", it.id);
        let masks = format!("masks/{:06}.tns", it.id);
        let annotation = format!("annotations/{:06}.toml", it.id);
        tns::save(dir.join(&image), &inst.image)?;
        tns::save(dir.join(&masks), &inst.masks)?;
        let text = toml::to_string(&inst.annotation).map_err(|e| Error::Config(e.to_string()))?;
        write(&dir.join(&annotation), text.as_bytes())?;
        items.push(ManifestItem {
            id: it.id,
            split: it.split,
            class: it.class.map_or(-1, |c| c as i64),
            image,
            masks,
            annotation,
        });
    }
    let manifest = Manifest {
        seed: ds.seed,
        config: ds.config,
        classes: ds.specs.clone(),
        items,
        pairs: ds.pairs.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    write(&dir.join("manifest.toml"), text.as_bytes())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.toml");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", mpath.display())))?;
    let mut items = Vec::with_capacity(m.items.len());
    let mut instances = Vec::with_capacity(m.items.len());
    for (i, it) in m.items.iter().enumerate() {
        if it.id != i as u64 {
            return Err(Error::Config(format!("{}: item {i} has id {}", mpath.display(), it.id)));
        }
        let class = match it.class {
            -1 => None,
            c if c >= 0 && (c as usize) < m.classes.len() => Some(c as usize),
            c => return Err(Error::Config(format!("{}: item {i} has class {c}", mpath.display()))),
        };
        let apath = dir.join(&it.annotation);
        let atext = fs::read_to_string(&apath).map_err(|e| Error::io(&apath, e))?;
        let annotation: Annotation =
            toml::from_str(&atext).map_err(|e| Error::Config(format!("{}: {e}", apath.display())))?;
        instances.push(Instance {
            image: tns::load(dir.join(&it.image))?,
            masks: tns::load(dir.join(&it.masks))?,
            annotation,
        });
        items.push(ItemInfo {
            id: it.id,
            split: it.split,
            class,
        });
    }
    Ok(Dataset {
        seed: m.seed,
        specs: m.classes,
        config: m.config,
        items,
        instances,
        pairs: m.pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SynthConfig {
        SynthConfig {
            noise: 0.0,
            max_clutter: 0,
            ..SynthConfig::default()
        }
    }

    fn fixed(pose: Pose) -> Nuisance {
        Nuisance {
            pose,
            color_jitter: 0.0,
            clutter: 0,
        }
    }

    #[test]
    fn identity_pose_keypoints() {
        let specs = default_specs();
        let mut rng = instance_rng(0, 0);
        let inst = render(
            Some(&specs[0]),
            &fixed(Pose::identity_at(30.0, 31.0)),
            &quiet(),
            &mut rng,
        )
        .unwrap();
        for p in &specs[0].parts {
            let kp = inst.annotation.keypoints[&p.name];
            assert_eq!(kp, (30.0 + p.offset.0, 31.0 + p.offset.1));
        }
    }

    #[test]
    fn scaling_doubles_distances() {
        let spec = &default_specs()[2];
        let mut rng = instance_rng(0, 0);
        let a = render(
            Some(spec),
            &fixed(Pose {
                scale: 0.7,
                ..Pose::identity_at(32.0, 32.0)
            }),
            &quiet(),
            &mut rng,
        )
        .unwrap();
        let b = render(
            Some(spec),
            &fixed(Pose {
                scale: 1.4,
                ..Pose::identity_at(32.0, 32.0)
            }),
            &quiet(),
            &mut rng,
        )
        .unwrap();
        let kp = |i: &Instance, n: &str| i.annotation.keypoints[n];
        let names = spec.part_names();
        for i in 0..names.len() {
            for j in i + 1..names.len() {
                let d = |inst: &Instance| {
                    let (p, q) = (kp(inst, names[i]), kp(inst, names[j]));
                    (p.0 - q.0).hypot(p.1 - q.1)
                };
                assert!((d(&b) - 2.0 * d(&a)).abs() < 0.5);
            }
        }
    }

    #[test]
    fn same_seed_same_instance() {
        let specs = default_specs();
        let cfg = SynthConfig::default();
        let a = generate_instance(Some(&specs[1]), &cfg, 5, 17).unwrap();
        let b = generate_instance(Some(&specs[1]), &cfg, 5, 17).unwrap();
        assert_eq!(a, b);
        let c = generate_instance(Some(&specs[1]), &cfg, 5, 18).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn masks_centered_on_keypoints() {
        let specs = default_specs();
        let cfg = SynthConfig::default();
        for (id, spec) in specs.iter().enumerate() {
            for k in 0..5u64 {
                let inst = generate_instance(Some(spec), &cfg, 3, id as u64 * 10 + k).unwrap();
                let n = cfg.size;
                for name in spec.part_names() {
                    let m = inst.mask(name).unwrap();
                    let (mut sx, mut sy, mut cnt) = (0.0, 0.0, 0.0);
                    for (i, &v) in m.iter().enumerate() {
                        if v > 0.0 {
                            sx += (i % n) as f64;
                            sy += (i / n) as f64;
                            cnt += 1.0;
                        }
                    }
                    assert!(cnt > 0.0);
                    let kp = inst.annotation.keypoints[name];
                    let d = (sx / cnt - kp.0).hypot(sy / cnt - kp.1);
                    assert!(d <= 2.0, "{name}: {d}");
                    assert!(kp.0 >= 0.0 && kp.1 >= 0.0 && kp.0 < n as f64 && kp.1 < n as f64);
                }
            }
        }
    }

    #[test]
    fn backgrounds_have_no_parts() {
        let inst = generate_instance(None, &SynthConfig::default(), 1, 2).unwrap();
        assert!(inst.annotation.keypoints.is_empty());
        assert_eq!(inst.masks.shape()[0], 0);
        assert!(inst.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn dataset_counts_splits_and_pairs() {
        let counts = DatasetCounts {
            train_pos_per_class: 3,
            train_neg: 4,
            test_pos_per_class: 2,
            test_neg: 2,
            intra_pairs: 4,
            cross_pairs: 4,
        };
        let ds = generate_dataset(&default_specs(), &counts, &SynthConfig::default(), 9).unwrap();
        for c in 0..4 {
            assert_eq!(ds.ids(Split::Train, Some(c)).len(), 3);
            assert_eq!(ds.ids(Split::Test, Some(c)).len(), 2);
        }
        assert_eq!(ds.ids(Split::Train, None).len(), 4);
        assert_eq!(ds.pairs_of(PairKind::Intra).len(), 4);
        assert_eq!(ds.pairs_of(PairKind::Cross).len(), 4);
        for p in &ds.pairs {
            for id in [p.src, p.dst] {
                assert_eq!(ds.items[id as usize].split, Split::Eval);
            }
            let (a, b) = (
                ds.items[p.src as usize].class.unwrap(),
                ds.items[p.dst as usize].class.unwrap(),
            );
            match p.kind {
                PairKind::Intra => assert_eq!(a, b),
                PairKind::Cross => assert!(ds.specs[a].related.contains(&b)),
            }
        }
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }
}
