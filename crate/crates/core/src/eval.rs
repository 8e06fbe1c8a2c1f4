//! Keypoint and mask transfer metrics, anchoring dispersion, CSV reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::matcher::FlowField;
use crate::synth::{Instance, Pose};
use crate::tensor::Tensor;

/// Flow sampled bilinearly at a sub-pixel location.
pub fn sample_flow(flow: &FlowField, p: (f64, f64)) -> Result<(f64, f64)> {
    let (h, w) = flow.dims();
    let (x, y) = p;
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return Err(Error::Invalid(format!("point ({x}, {y}) outside {w}×{h} flow")));
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let d = flow.flow.data();
    let at = |c: usize, yy: usize, xx: usize| d[(c * h + yy) * w + xx] as f64;
    let lerp = |c: usize| {
        let top = at(c, y0, x0) * (1.0 - fx) + at(c, y0, x1) * fx;
        let bot = at(c, y1, x0) * (1.0 - fx) + at(c, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    };
    Ok((lerp(0), lerp(1)))
}

pub fn warp_keypoint(flow: &FlowField, p: (f64, f64)) -> Result<(f64, f64)> {
    let (dx, dy) = sample_flow(flow, p)?;
    Ok((p.0 + dx, p.1 + dy))
}

/// Forward splat: `q` is set iff some set source pixel `p` has
/// `round(p + flow(p)) == q`.
pub fn warp_mask(flow: &FlowField, mask: &[f32]) -> Result<Vec<f32>> {
    let (h, w) = flow.dims();
    if mask.len() != h * w {
        return Err(Error::shape(
            "warp_mask",
            format!("mask of {} for {w}×{h} flow", mask.len()),
        ));
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] <= 0.5 {
                continue;
            }
            let (dx, dy) = flow.at(x, y);
            let (tx, ty) = ((x as f64 + dx).round(), (y as f64 + dy).round());
            if tx >= 0.0 && ty >= 0.0 && tx < w as f64 && ty < h as f64 {
                out[ty as usize * w + tx as usize] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Fraction of shared keypoints transferred within `alpha·max(H, W)`;
/// `None` when the pair shares none.
pub fn pck_pair(src: &Instance, dst: &Instance, flow: &FlowField, alpha: f64) -> Result<Option<f64>> {
    let (h, w) = (dst.image.shape()[1], dst.image.shape()[2]);
    let thr = alpha * h.max(w) as f64;
    let (mut hits, mut total) = (0usize, 0usize);
    for (name, &p) in &src.annotation.keypoints {
        let Some(&q) = dst.annotation.keypoints.get(name) else {
            continue;
        };
        let t = warp_keypoint(flow, p)?;
        total += 1;
        if ((t.0 - q.0).powi(2) + (t.1 - q.1).powi(2)).sqrt() <= thr {
            hits += 1;
        }
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PckResult {
    pub per_pair: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn pck(pairs: &[(&Instance, &Instance)], flows: &[FlowField], alpha: f64) -> Result<PckResult> {
    if pairs.len() != flows.len() {
        return Err(Error::Invalid(format!(
            "{} pairs but {} flows",
            pairs.len(),
            flows.len()
        )));
    }
    let mut per_pair = Vec::with_capacity(pairs.len());
    for (i, ((s, d), f)) in pairs.iter().zip(flows).enumerate() {
        let v = pck_pair(s, d, f, alpha)?;
        if v.is_none() {
            log::warn!("pair {i} shares no keypoints; skipped");
        }
        per_pair.push(v);
    }
    Ok(PckResult {
        mean: mean_of(&per_pair),
        per_pair,
    })
}

fn mean_of(v: &[Option<f64>]) -> f64 {
    let got: Vec<f64> = v.iter().flatten().copied().collect();
    if got.is_empty() {
        0.0
    } else {
        got.iter().sum::<f64>() / got.len() as f64
    }
}

pub fn iou(a: &[f32], b: &[f32]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x > 0.5, y > 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Area-weighted mean of `(target area, iou)` entries.
pub fn weighted_mean(parts: &[(f64, f64)]) -> Option<f64> {
    let total: f64 = parts.iter().map(|p| p.0).sum();
    (total > 0.0).then(|| parts.iter().map(|&(a, v)| a * v).sum::<f64>() / total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouResult {
    pub per_pair: Vec<Option<f64>>,
    /// Mean IoU per part name over the pairs that share it.
    pub per_part: BTreeMap<String, f64>,
    pub mean: f64,
}

pub fn weighted_iou(pairs: &[(&Instance, &Instance)], flows: &[FlowField]) -> Result<IouResult> {
    if pairs.len() != flows.len() {
        return Err(Error::Invalid(format!(
            "{} pairs but {} flows",
            pairs.len(),
            flows.len()
        )));
    }
    let mut per_pair = Vec::with_capacity(pairs.len());
    let mut parts: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (i, ((s, d), f)) in pairs.iter().zip(flows).enumerate() {
        let mut entries = Vec::new();
        for name in &s.annotation.parts {
            let (Some(sm), Some(dm)) = (s.mask(name), d.mask(name)) else {
                continue;
            };
            let area = dm.iter().filter(|&&v| v > 0.5).count() as f64;
            let v = iou(&warp_mask(f, sm)?, dm);
            let e = parts.entry(name.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
            entries.push((area, v));
        }
        let v = weighted_mean(&entries);
        if v.is_none() {
            log::warn!("pair {i} shares no parts; skipped");
        }
        per_pair.push(v);
    }
    Ok(IouResult {
        mean: mean_of(&per_pair),
        per_part: parts.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        per_pair,
    })
}

/// Grid cell index to image pixel coordinate.
pub fn grid_to_image(j: usize, grid: usize, size: usize) -> f64 {
    (j as f64 + 0.5) * size as f64 / grid as f64 - 0.5
}

/// First row-major argmax of each `G×G` channel of a `K×G×G` map stack.
pub fn argmax_cells(maps: &Tensor<f32>) -> Vec<(usize, usize)> {
    let s = maps.shape();
    let (k, g) = (s[0], s[2]);
    (0..k)
        .map(|c| {
            let ch = maps.channel(c);
            let mut best = 0;
            for (i, &v) in ch.iter().enumerate() {
                if v > ch[best] {
                    best = i;
                }
            }
            (best / g, best % g)
        })
        .collect()
}

/// Per-filter `sqrt(var_x + var_y)` of argmax locations in the object frame.
pub fn dispersion(maps: &[Tensor<f32>], poses: &[Pose], image_size: usize) -> Result<Vec<f64>> {
    if maps.is_empty() || maps.len() != poses.len() {
        return Err(Error::Invalid(format!(
            "{} map stacks for {} poses",
            maps.len(),
            poses.len()
        )));
    }
    let k = maps[0].shape()[0];
    let grid = maps[0].shape()[2];
    let mut pts = vec![Vec::with_capacity(maps.len()); k];
    for (m, pose) in maps.iter().zip(poses) {
        for (f, (r, c)) in argmax_cells(m).into_iter().enumerate() {
            let q = (grid_to_image(c, grid, image_size), grid_to_image(r, grid, image_size));
            pts[f].push(pose.to_object(q));
        }
    }
    Ok(pts
        .iter()
        .map(|p| {
            let n = p.len() as f64;
            let (mx, my) = (
                p.iter().map(|q| q.0).sum::<f64>() / n,
                p.iter().map(|q| q.1).sum::<f64>() / n,
            );
            let var = p.iter().map(|q| (q.0 - mx).powi(2) + (q.1 - my).powi(2)).sum::<f64>() / n;
            var.sqrt()
        })
        .collect())
}

/// Filters whose entries are a random permutation of a trained filter's.
pub fn shuffled_filters(bank: &Tensor<f32>, draws: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let s = bank.shape();
    let per = bank.len() / s[0];
    let mut data = Vec::with_capacity(draws * per);
    for _ in 0..draws {
        let k = rng.gen_range(0..s[0]);
        let mut f = bank.data()[k * per..(k + 1) * per].to_vec();
        f.shuffle(rng);
        data.extend(f);
    }
    let mut shape = s.to_vec();
    shape[0] = draws;
    Tensor::new(shape, data).expect("shape matches")
}

/// Value below which fraction `q` of the sorted sample falls (nearest rank).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[idx]
}

/// Area under the ROC curve, ties counted half.
pub fn roc_auc(positives: &[f64], negatives: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &p in positives {
        for &n in negatives {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (positives.len() * negatives.len()).max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub variant: String,
    pub metric: String,
    pub alpha: Option<f64>,
    pub value: f64,
}

pub const CSV_HEADER: &str = "method,variant,metric,alpha,value";

/// Comment line preceding the header.
pub const CSV_NOTE: &str = "# iou: per-part IoU weighted by target part pixel area";

pub fn to_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{CSV_NOTE}\n{CSV_HEADER}\n");
    for r in rows {
        let alpha = r.alpha.map(|a| format!("{a}")).unwrap_or_default();
        writeln!(s, "{},{},{},{},{:.6}", r.method, r.variant, r.metric, alpha, r.value).unwrap();
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#'));
    if lines.next().map(|(_, l)| l) != Some(CSV_HEADER) {
        return Err(Error::Invalid("metric CSV: bad header".into()));
    }
    lines
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Invalid(format!("metric CSV line {}: `{l}`", i + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(MetricRow {
                method: f[0].into(),
                variant: f[1].into(),
                metric: f[2].into(),
                alpha: if f[3].is_empty() {
                    None
                } else {
                    Some(f[3].parse().map_err(|_| bad())?)
                },
                value: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Binary PGM with values rescaled to `[0, 255]`.
pub fn pgm_bytes(map: &[f32], h: usize, w: usize) -> Vec<u8> {
    let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.iter().map(|&v| (((v - lo) / span) * 255.0).round() as u8));
    out
}

pub fn write_pgm(map: &[f32], h: usize, w: usize, path: &Path) -> Result<()> {
    std::fs::write(path, pgm_bytes(map, h, w)).map_err(|e| Error::io(path, e))
}
