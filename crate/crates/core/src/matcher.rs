//! Dense matching over descriptor fields: a tree-structured spatial pyramid
//! solved exactly by dynamic programming, naive appearance matching over
//! pooled region descriptors, and the zero-flow baseline.

use crate::autograd::{Graph, NormScope};
use crate::error::{Error, Result};
use crate::model::AnchorNet;
use crate::tensor::Tensor;

/// Cost of a pixel whose displaced position leaves the target image.
pub const OUT_OF_BOUNDS_COST: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Class-agnostic autoencoder responses.
    Agnostic,
    /// Response maps of one class bank.
    Class(usize),
    /// Raw hypercolumn.
    Hypercolumn,
    /// Image intensities.
    Raw,
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::Agnostic => "anet-agnostic".into(),
            Variant::Class(c) => format!("anet-class:{c}"),
            Variant::Hypercolumn => "hc".into(),
            Variant::Raw => "raw".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "anet-agnostic" => Ok(Variant::Agnostic),
            "hc" => Ok(Variant::Hypercolumn),
            "raw" => Ok(Variant::Raw),
            _ => s
                .strip_prefix("anet-class:")
                .and_then(|c| c.parse().ok())
                .map(Variant::Class)
                .ok_or_else(|| Error::Invalid(format!("unknown descriptor variant `{s}`"))),
        }
    }
}

/// `C×H×W` per-pixel ℓ2-normalized descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorField {
    pub data: Tensor<f32>,
    pub variant: Variant,
}

impl DescriptorField {
    /// Upsamples `features` to `h×w` and normalizes every pixel.
    pub fn from_features(features: &Tensor<f32>, h: usize, w: usize, variant: Variant) -> Result<Self> {
        let mut g = Graph::<f32>::new();
        let x = g.constant(features.clone());
        let (_, fh, fw) = features.dims3("DescriptorField")?;
        let x = if (fh, fw) == (h, w) {
            x
        } else {
            g.bilinear_resize(x, h, w)?
        };
        let y = g.l2_normalize(x, NormScope::PerPixel, 1e-8)?;
        Ok(DescriptorField {
            data: g.value(y).clone(),
            variant,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }

    fn dot(&self, other: &DescriptorField, p: usize, q: usize) -> f64 {
        let (c, h, w) = self.dims();
        let plane = h * w;
        let (a, b) = (self.data.data(), other.data.data());
        let mut s = 0.0f64;
        for ch in 0..c {
            s += a[ch * plane + p] as f64 * b[ch * plane + q] as f64;
        }
        s
    }
}

pub fn extract_dense_descriptors(net: &AnchorNet, image: &Tensor<f32>, variant: Variant) -> Result<DescriptorField> {
    let (_, h, w) = image.dims3("extract_dense_descriptors")?;
    let features = match variant {
        Variant::Raw => image.clone(),
        Variant::Hypercolumn => net.hypercolumn(image)?,
        Variant::Class(c) => {
            if c >= net.classes() {
                return Err(Error::Invalid(format!(
                    "unknown class {c} (network has {})",
                    net.classes()
                )));
            }
            net.class_maps(&net.hypercolumn(image)?, c)?.1
        }
        Variant::Agnostic => net.agnostic_maps(&net.stacked_maps(&net.hypercolumn(image)?)?)?,
    };
    DescriptorField::from_features(&features, h, w, variant)
}

/// `2×H×W` displacements (dx, dy) in pixels, source frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub flow: Tensor<f32>,
    pub energy: Option<f64>,
}

impl FlowField {
    pub fn dims(&self) -> (usize, usize) {
        (self.flow.shape()[1], self.flow.shape()[2])
    }

    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let (h, w) = self.dims();
        let p = y * w + x;
        (self.flow.data()[p] as f64, self.flow.data()[h * w + p] as f64)
    }
}

pub fn noflow(h: usize, w: usize) -> FlowField {
    FlowField {
        flow: Tensor::zeros(&[2, h, w]),
        energy: None,
    }
}

/// Square window of `window×window` displacements spaced `stride` pixels,
/// `(0,0)` first and the rest in row-major order.
pub fn label_window(window: usize, stride: usize) -> Vec<(i32, i32)> {
    let r = (window / 2) as i32;
    let s = stride as i32;
    let mut out = vec![(0, 0)];
    for dy in -r..=r {
        for dx in -r..=r {
            if (dx, dy) != (0, 0) {
                out.push((dx * s, dy * s));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub level: usize,
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
    pub parent: Option<usize>,
}

/// Levels `0..=levels`; level `ℓ` tiles the image with `2^ℓ × 2^ℓ` cells.
/// Cells are stored level by level, row-major within a level.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    pub levels: usize,
    pub cells: Vec<Cell>,
}

impl Pyramid {
    pub fn new(h: usize, w: usize, levels: usize) -> Result<Self> {
        if (1 << levels) > h.min(w) {
            return Err(Error::Invalid(format!(
                "{levels} pyramid levels exceed a {h}×{w} image"
            )));
        }
        let mut cells = Vec::new();
        let mut level_start = 0;
        for l in 0..=levels {
            let n = 1usize << l;
            let prev_start = level_start;
            level_start = cells.len();
            for i in 0..n {
                for j in 0..n {
                    let parent = (l > 0).then(|| prev_start + (i / 2) * (n / 2) + j / 2);
                    cells.push(Cell {
                        level: l,
                        y0: i * h / n,
                        y1: (i + 1) * h / n,
                        x0: j * w / n,
                        x1: (j + 1) * w / n,
                        parent,
                    });
                }
            }
        }
        Ok(Pyramid { levels, cells })
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.cells.len()).filter(move |&i| self.cells[i].level == self.levels)
    }
}

/// `cost[l][p] = 1 − ⟨src(p), dst(p + label_l)⟩`, or [`OUT_OF_BOUNDS_COST`].
pub fn pixel_costs(src: &DescriptorField, dst: &DescriptorField, labels: &[(i32, i32)]) -> Result<Vec<Vec<f64>>> {
    let (c, h, w) = src.dims();
    if dst.dims() != (c, h, w) {
        return Err(Error::shape(
            "pixel_costs",
            format!("{:?} vs {:?}", src.dims(), dst.dims()),
        ));
    }
    Ok(labels
        .iter()
        .map(|&(dx, dy)| {
            let mut row = vec![OUT_OF_BOUNDS_COST; h * w];
            for y in 0..h {
                let ty = y as i32 + dy;
                if ty < 0 || ty >= h as i32 {
                    continue;
                }
                for x in 0..w {
                    let tx = x as i32 + dx;
                    if tx < 0 || tx >= w as i32 {
                        continue;
                    }
                    row[y * w + x] = 1.0 - src.dot(dst, y * w + x, ty as usize * w + tx as usize);
                }
            }
            row
        })
        .collect())
}

/// Mean pixel cost over `cell` for each label: `unary[cell][label]`.
pub fn cell_unaries(pyr: &Pyramid, costs: &[Vec<f64>], w: usize) -> Vec<Vec<f64>> {
    pyr.cells
        .iter()
        .map(|c| {
            let n = ((c.y1 - c.y0) * (c.x1 - c.x0)) as f64;
            costs
                .iter()
                .map(|row| {
                    let mut s = 0.0;
                    for y in c.y0..c.y1 {
                        s += row[y * w + c.x0..y * w + c.x1].iter().sum::<f64>();
                    }
                    s / n
                })
                .collect()
        })
        .collect()
}

/// Unary cost of one cell under one displacement.
pub fn unary_cost(src: &DescriptorField, dst: &DescriptorField, cell: &Cell, label: (i32, i32)) -> Result<f64> {
    let costs = pixel_costs(src, dst, &[label])?;
    let (_, _, w) = src.dims();
    let pyr = Pyramid {
        levels: 0,
        cells: vec![*cell],
    };
    Ok(cell_unaries(&pyr, &costs, w)[0][0])
}

fn l1(a: (i32, i32), b: (i32, i32)) -> f64 {
    ((a.0 - b.0).abs() + (a.1 - b.1).abs()) as f64
}

/// `Σ_cells unary + λ Σ_edges ‖t_parent − t_child‖₁` of a full assignment.
pub fn assignment_energy(
    pyr: &Pyramid,
    unaries: &[Vec<f64>],
    labels: &[(i32, i32)],
    lambda: f64,
    assignment: &[usize],
) -> f64 {
    let mut e = 0.0;
    for (i, c) in pyr.cells.iter().enumerate() {
        e += unaries[i][assignment[i]];
        if let Some(p) = c.parent {
            e += lambda * l1(labels[assignment[p]], labels[assignment[i]]);
        }
    }
    e
}

/// Exact minimizer of [`assignment_energy`] by leaf-to-root min-sum messages
/// and top-down backtracking; ties go to the lowest label index.
pub fn solve_tree(
    pyr: &Pyramid,
    unaries: &[Vec<f64>],
    labels: &[(i32, i32)],
    lambda: f64,
) -> Result<(Vec<usize>, f64)> {
    let s = labels.len();
    if s == 0 {
        return Err(Error::Invalid("empty label set".into()));
    }
    let n = pyr.cells.len();
    // belief[i][t] = unary + messages from children
    let mut belief: Vec<Vec<f64>> = unaries.to_vec();
    // choice[i][t_parent] = best label of i given its parent's label
    let mut choice: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in (0..n).rev() {
        let Some(p) = pyr.cells[i].parent else { continue };
        let mut msg = vec![0.0; s];
        let mut arg = vec![0usize; s];
        for tp in 0..s {
            let mut best = f64::INFINITY;
            let mut bi = 0;
            for tc in 0..s {
                let v = belief[i][tc] + lambda * l1(labels[tp], labels[tc]);
                if v < best {
                    best = v;
                    bi = tc;
                }
            }
            msg[tp] = best;
            arg[tp] = bi;
        }
        for tp in 0..s {
            belief[p][tp] += msg[tp];
        }
        choice[i] = arg;
    }
    let mut assignment = vec![0usize; n];
    let mut best = f64::INFINITY;
    for (t, &v) in belief[0].iter().enumerate() {
        if v < best {
            best = v;
            assignment[0] = t;
        }
    }
    for i in 1..n {
        let p = pyr.cells[i].parent.expect("non-root cell has a parent");
        assignment[i] = choice[i][assignment[p]];
    }
    let energy = assignment_energy(pyr, unaries, labels, lambda, &assignment);
    Ok((assignment, energy))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DspParams {
    pub levels: usize,
    pub window: usize,
    pub stride: usize,
    pub lambda: f64,
}

impl From<&crate::config::MatcherConfig> for DspParams {
    fn from(c: &crate::config::MatcherConfig) -> Self {
        DspParams {
            levels: c.levels,
            window: c.window,
            stride: c.stride,
            lambda: c.lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DspResult {
    pub flow: FlowField,
    pub assignment: Vec<usize>,
    /// Pyramid energy of the DP solution.
    pub tree_energy: f64,
    /// Σ pixel cost at the leaf labels, before refinement.
    pub leaf_energy: f64,
    /// Σ (pixel cost + λ‖d − leaf‖₁) after refinement.
    pub refined_energy: f64,
}

pub fn dsp_match(src: &DescriptorField, dst: &DescriptorField, params: &DspParams) -> Result<DspResult> {
    let (_, h, w) = src.dims();
    let labels = label_window(params.window, params.stride);
    let pyr = Pyramid::new(h, w, params.levels)?;
    let costs = pixel_costs(src, dst, &labels)?;
    let unaries = cell_unaries(&pyr, &costs, w);
    let (assignment, tree_energy) = solve_tree(&pyr, &unaries, &labels, params.lambda)?;

    let r = params.stride as i32;
    let mut local = vec![(0, 0)];
    for dy in -r..=r {
        for dx in -r..=r {
            if (dx, dy) != (0, 0) {
                local.push((dx, dy));
            }
        }
    }
    let mut flow = Tensor::<f32>::zeros(&[2, h, w]);
    let mut leaf_energy = 0.0;
    let mut refined_energy = 0.0;
    for leaf in pyr.leaves() {
        let c = pyr.cells[leaf];
        let lab = labels[assignment[leaf]];
        for y in c.y0..c.y1 {
            for x in c.x0..c.x1 {
                let p = y * w + x;
                let cost_at = |d: (i32, i32)| -> f64 {
                    let (tx, ty) = (x as i32 + d.0, y as i32 + d.1);
                    if tx < 0 || ty < 0 || tx >= w as i32 || ty >= h as i32 {
                        OUT_OF_BOUNDS_COST
                    } else {
                        1.0 - src.dot(dst, p, ty as usize * w + tx as usize)
                    }
                };
                let base = costs[assignment[leaf]][p];
                leaf_energy += base;
                let mut best = (base, lab);
                for &(ox, oy) in &local[1..] {
                    let d = (lab.0 + ox, lab.1 + oy);
                    let v = cost_at(d) + params.lambda * l1(d, lab);
                    if v < best.0 {
                        best = (v, d);
                    }
                }
                refined_energy += best.0;
                let dx = (best.1 .0).clamp(-(x as i32), (w - 1 - x) as i32);
                let dy = (best.1 .1).clamp(-(y as i32), (h - 1 - y) as i32);
                flow.data_mut()[p] = dx as f32;
                flow.data_mut()[h * w + p] = dy as f32;
            }
        }
    }
    Ok(DspResult {
        flow: FlowField {
            flow,
            energy: Some(tree_energy),
        },
        assignment,
        tree_energy,
        leaf_energy,
        refined_energy,
    })
}

/// Inclusive-exclusive pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoxI {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxI {
    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 + self.x1 - 1) as f64 / 2.0,
            (self.y0 + self.y1 - 1) as f64 / 2.0,
        )
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Sliding windows with side `scale·size` moved by `stride·side`, scale-major
/// then row-major.
pub fn grid_proposals(h: usize, w: usize, scales: &[f64], stride: f64) -> Vec<BoxI> {
    let mut out = Vec::new();
    for &s in scales {
        let bh = ((s * h as f64).round() as usize).clamp(1, h);
        let bw = ((s * w as f64).round() as usize).clamp(1, w);
        let sy = ((stride * bh as f64).round() as usize).max(1);
        let sx = ((stride * bw as f64).round() as usize).max(1);
        let mut y = 0;
        while y + bh <= h {
            let mut x = 0;
            while x + bw <= w {
                out.push(BoxI {
                    x0: x,
                    y0: y,
                    x1: x + bw,
                    y1: y + bh,
                });
                x += sx;
            }
            y += sy;
        }
    }
    out
}

pub const POOL_SIDE: usize = 8;

/// Crop → bilinear resize to 8×8 → vectorize → ℓ2-normalize.
pub fn pool_proposal_descriptor(field: &DescriptorField, b: &BoxI) -> Result<Vec<f32>> {
    let (c, h, w) = field.dims();
    if b.x1 > w || b.y1 > h || b.x0 >= b.x1 || b.y0 >= b.y1 {
        return Err(Error::Invalid(format!("box {b:?} outside {w}×{h} field")));
    }
    let (bh, bw) = (b.y1 - b.y0, b.x1 - b.x0);
    let crop = Tensor::from_fn(&[c, bh, bw], |i| {
        let ch = i / (bh * bw);
        let r = (i / bw) % bh;
        let col = i % bw;
        field.data.data()[(ch * h + b.y0 + r) * w + b.x0 + col]
    });
    let mut g = Graph::<f32>::new();
    let x = g.constant(crop);
    let y = g.bilinear_resize(x, POOL_SIDE, POOL_SIDE)?;
    let y = g.l2_normalize(y, NormScope::WholeTensor, 1e-12)?;
    Ok(g.value(y).data().to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BoxI,
    pub descriptor: Vec<f32>,
}

pub fn proposals(field: &DescriptorField, boxes: &[BoxI]) -> Result<Vec<Proposal>> {
    boxes
        .iter()
        .map(|b| {
            Ok(Proposal {
                bbox: *b,
                descriptor: pool_proposal_descriptor(field, b)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamResult {
    /// For each source proposal: (best target index, similarity).
    pub matches: Vec<(usize, f64)>,
    pub flow: FlowField,
}

fn inner(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Nearest-neighbour region matching; each pixel takes the box-center
/// displacement of the most similar source proposal containing it.
pub fn nam_match(src: &[Proposal], dst: &[Proposal], h: usize, w: usize) -> Result<NamResult> {
    if src.is_empty() || dst.is_empty() {
        return Err(Error::EmptyPool("no proposals to match".into()));
    }
    let matches: Vec<(usize, f64)> = src
        .iter()
        .map(|s| {
            let mut best = (0, f64::NEG_INFINITY);
            for (j, d) in dst.iter().enumerate() {
                let v = inner(&s.descriptor, &d.descriptor);
                if v > best.1 {
                    best = (j, v);
                }
            }
            best
        })
        .collect();
    let mut flow = Tensor::<f32>::zeros(&[2, h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<(f64, usize)> = None;
            for (i, s) in src.iter().enumerate() {
                if s.bbox.contains(x, y) && best.map_or(true, |b| matches[i].1 > b.0) {
                    best = Some((matches[i].1, i));
                }
            }
            if let Some((_, i)) = best {
                let (sc, dc) = (src[i].bbox.center(), dst[matches[i].0].bbox.center());
                let dx = (dc.0 - sc.0).clamp(-(x as f64), (w - 1 - x) as f64);
                let dy = (dc.1 - sc.1).clamp(-(y as f64), (h - 1 - y) as f64);
                flow.data_mut()[y * w + x] = dx as f32;
                flow.data_mut()[h * w + y * w + x] = dy as f32;
            }
        }
    }
    Ok(NamResult {
        matches,
        flow: FlowField { flow, energy: None },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> DescriptorField {
        let t = Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0f32..1.0));
        DescriptorField::from_features(&t, h, w, Variant::Raw).unwrap()
    }

    #[test]
    fn variant_labels_round_trip() {
        for v in [Variant::Agnostic, Variant::Class(3), Variant::Hypercolumn, Variant::Raw] {
            assert_eq!(Variant::parse(&v.label()).unwrap(), v);
        }
        assert!(Variant::parse("sift").is_err());
    }

    #[test]
    fn unary_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_field(&mut rng, 4, 6, 6);
        let cell = Cell {
            level: 0,
            y0: 0,
            y1: 6,
            x0: 0,
            x1: 6,
            parent: None,
        };
        assert!(unary_cost(&f, &f, &cell, (0, 0)).unwrap().abs() < 1e-6);
        let a = Tensor::from_fn(&[2, 3, 3], |i| if i < 9 { 1.0 } else { 0.0 });
        let b = Tensor::from_fn(&[2, 3, 3], |i| if i < 9 { 0.0 } else { 1.0 });
        let fa = DescriptorField::from_features(&a, 3, 3, Variant::Raw).unwrap();
        let fb = DescriptorField::from_features(&b, 3, 3, Variant::Raw).unwrap();
        let c3 = Cell { y1: 3, x1: 3, ..cell };
        assert!((unary_cost(&fa, &fb, &c3, (0, 0)).unwrap() - 1.0).abs() < 1e-12);
        // shifting right by one: the last column leaves the image
        let v = unary_cost(&fa, &fa, &c3, (1, 0)).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn labels_start_at_zero() {
        let l = label_window(3, 2);
        assert_eq!(l.len(), 9);
        assert_eq!(l[0], (0, 0));
        assert_eq!(l[1], (-2, -2));
        assert_eq!(l[8], (2, 2));
    }

    #[test]
    fn pyramid_is_a_tree() {
        let p = Pyramid::new(16, 16, 3).unwrap();
        assert_eq!(p.cells.len(), 1 + 4 + 16 + 64);
        for (i, c) in p.cells.iter().enumerate() {
            match c.parent {
                None => assert_eq!(i, 0),
                Some(q) => {
                    let pc = p.cells[q];
                    assert_eq!(pc.level + 1, c.level);
                    assert!(pc.x0 <= c.x0 && c.x1 <= pc.x1 && pc.y0 <= c.y0 && c.y1 <= pc.y1);
                }
            }
        }
        assert!(Pyramid::new(4, 4, 3).is_err());
    }

    #[test]
    fn self_match_is_zero_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_field(&mut rng, 5, 16, 16);
        let r = dsp_match(
            &f,
            &f,
            &DspParams {
                levels: 2,
                window: 5,
                stride: 2,
                lambda: 0.05,
            },
        )
        .unwrap();
        assert!(r.flow.flow.data().iter().all(|&v| v == 0.0));
        assert!(r.tree_energy.abs() < 1e-5);
        assert!(r.refined_energy <= r.leaf_energy + 1e-12);
    }

    #[test]
    fn empty_labels_are_rejected() {
        let p = Pyramid::new(4, 4, 1).unwrap();
        assert!(solve_tree(&p, &vec![vec![]; 5], &[], 0.1).is_err());
    }

    #[test]
    fn proposal_grid_arithmetic() {
        let b = grid_proposals(32, 32, &[0.5], 0.25);
        assert_eq!(b.len(), 25);
        assert!(b
            .iter()
            .all(|x| x.x1 - x.x0 == 16 && x.y1 - x.y0 == 16 && x.x1 <= 32 && x.y1 <= 32));
        assert_eq!(b, grid_proposals(32, 32, &[0.5], 0.25));
        assert_eq!(b[1].x0, 4);
    }

    #[test]
    fn pooled_descriptor_properties() {
        let t = Tensor::from_fn(&[2, 8, 8], |i| if i < 64 { 3.0f32 } else { 4.0 });
        let f = DescriptorField::from_features(&t, 8, 8, Variant::Raw).unwrap();
        let whole = BoxI {
            x0: 0,
            y0: 0,
            x1: 8,
            y1: 8,
        };
        let d = pool_proposal_descriptor(&f, &whole).unwrap();
        assert_eq!(d.len(), 64 * 2);
        let n: f64 = d.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
        assert!((d[0] / d[64] - 0.75).abs() < 1e-5);
        // 8×8 field, whole box: resize is the identity up to normalization
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_field(&mut rng, 3, 8, 8);
        let d = pool_proposal_descriptor(&r, &whole).unwrap();
        let scale = r.data.norm();
        for (a, b) in d.iter().zip(r.data.data()) {
            assert!((a - b / scale).abs() < 1e-6);
        }
    }

    #[test]
    fn nam_crossed_and_identity() {
        let e = |i: usize| {
            let mut v = vec![0.0f32; 2];
            v[i] = 1.0;
            v
        };
        let b0 = BoxI {
            x0: 0,
            y0: 0,
            x1: 4,
            y1: 4,
        };
        let b1 = BoxI {
            x0: 4,
            y0: 0,
            x1: 8,
            y1: 4,
        };
        let src = vec![
            Proposal {
                bbox: b0,
                descriptor: e(0),
            },
            Proposal {
                bbox: b1,
                descriptor: e(1),
            },
        ];
        let dst = vec![
            Proposal {
                bbox: b0,
                descriptor: e(1),
            },
            Proposal {
                bbox: b1,
                descriptor: e(0),
            },
        ];
        let r = nam_match(&src, &dst, 4, 8).unwrap();
        assert_eq!(r.matches.iter().map(|m| m.0).collect::<Vec<_>>(), vec![1, 0]);
        assert_eq!(r.flow.at(0, 0), (4.0, 0.0));
        assert_eq!(r.flow.at(5, 0), (-4.0, 0.0));
        let same = nam_match(&src, &src, 4, 8).unwrap();
        assert_eq!(same.matches.iter().map(|m| m.0).collect::<Vec<_>>(), vec![0, 1]);
        assert!(same.flow.flow.data().iter().all(|&v| v == 0.0));
        assert!(nam_match(&[], &dst, 4, 8).is_err());
    }

    #[test]
    fn noflow_is_zero() {
        let f = noflow(3, 5);
        assert_eq!(f.dims(), (3, 5));
        assert!(f.flow.data().iter().all(|&v| v == 0.0));
        assert_eq!(f.energy, None);
    }
}
