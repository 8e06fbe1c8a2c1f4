//! Three-stage convolutional trunk, PCA compression and hypercolumn assembly.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, NormScope, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const STAGES: usize = 3;

/// Each stage is conv3×3 (same padding) + bias → relu → 2×2 average pool.
/// The pooled output of every stage is tapped.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T: Real> {
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, Copy)]
pub struct BackboneVars {
    pub weights: [Var; STAGES],
    pub biases: [Var; STAGES],
}

impl<T: Real> Backbone<T> {
    /// He-normal initialization with zero biases.
    pub fn init(in_channels: usize, widths: [usize; STAGES], rng: &mut impl Rng) -> Self {
        let mut weights = Vec::with_capacity(STAGES);
        let mut biases = Vec::with_capacity(STAGES);
        let mut c_in = in_channels;
        for &c_out in &widths {
            let std = (2.0 / (9 * c_in) as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            weights.push(Tensor::from_fn(&[c_out, c_in, 3, 3], |_| T::of(normal.sample(rng))));
            biases.push(Tensor::zeros(&[c_out]));
            c_in = c_out;
        }
        Backbone { weights, biases }
    }

    pub fn widths(&self) -> [usize; STAGES] {
        [0, 1, 2].map(|s| self.weights[s].shape()[0])
    }

    pub fn in_channels(&self) -> usize {
        self.weights[0].shape()[1]
    }

    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> BackboneVars {
        let mut reg = |t: &Tensor<T>| g.leaf(t.clone(), trainable);
        BackboneVars {
            weights: [0, 1, 2].map(|s| reg(&self.weights[s])),
            biases: [0, 1, 2].map(|s| reg(&self.biases[s])),
        }
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        Backbone {
            weights: self.weights.iter().map(Tensor::cast).collect(),
            biases: self.biases.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Runs the trunk on a `3×H×W` image, returning taps at 1/2, 1/4 and 1/8
/// resolution.
pub fn backbone_forward<T: Real>(g: &mut Graph<T>, image: Var, vars: &BackboneVars) -> Result<[Var; STAGES]> {
    let (_, h, w) = g.value(image).dims3("backbone_forward")?;
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            "backbone_forward",
            format!("spatial size {h}×{w} is not divisible by 8"),
        ));
    }
    let mut x = image;
    let mut taps = [image; STAGES];
    for s in 0..STAGES {
        let c = g.conv2d(x, vars.weights[s], 1)?;
        let b = g.channel_bias(c, vars.biases[s])?;
        let r = g.relu(b)?;
        x = g.avg_pool2(r)?;
        taps[s] = x;
    }
    Ok(taps)
}

/// PCA stored as a 1×1 filter bank plus bias (`-W·mean`).
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection<T: Real> {
    /// `out_dim × in_dim × 1 × 1`, orthonormal rows.
    pub weight: Tensor<T>,
    /// Length `out_dim`.
    pub bias: Tensor<T>,
    /// Length `in_dim`.
    pub mean: Tensor<T>,
    /// Eigenvalues of the retained axes, descending.
    pub variances: Vec<f64>,
}

impl<T: Real> PcaProjection<T> {
    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn cast<U: Real>(&self) -> PcaProjection<U> {
        PcaProjection {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            mean: self.mean.cast(),
            variances: self.variances.clone(),
        }
    }

    /// Projects one descriptor vector.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let d = self.in_dim();
        (0..self.out_dim())
            .map(|o| {
                let row = &self.weight.data()[o * d..(o + 1) * d];
                row.iter().zip(x).map(|(&w, &v)| w.as_f64() * v).sum::<f64>() + self.bias.data()[o].as_f64()
            })
            .collect()
    }

    /// Maps projected coordinates back into descriptor space.
    pub fn reconstruct(&self, y: &[f64]) -> Vec<f64> {
        let d = self.in_dim();
        let mut out: Vec<f64> = self.mean.data().iter().map(|m| m.as_f64()).collect();
        for (o, &yo) in y.iter().enumerate() {
            let row = &self.weight.data()[o * d..(o + 1) * d];
            for (acc, &w) in out.iter_mut().zip(row) {
                *acc += yo * w.as_f64();
            }
        }
        out
    }
}

/// Principal axes of `samples` (one row per sample), ordered by descending
/// eigenvalue. The first nonzero coefficient of every axis is positive.
pub fn fit_pca(samples: &[Vec<f64>], out_dim: usize) -> Result<PcaProjection<f64>> {
    let n = samples.len();
    let d = samples.first().map(Vec::len).ok_or_else(|| Error::RankDeficient {
        achieved: 0,
        requested: out_dim,
    })?;
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::shape("fit_pca", "samples of unequal length"));
    }
    if out_dim == 0 || out_dim > d {
        return Err(Error::Invalid(format!("out_dim {out_dim} for {d}-dim samples")));
    }
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for s in samples {
        for (c, (&v, &m)) in centered.iter_mut().zip(s.iter().zip(&mean)) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-9 + 1e-300;
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count();
    if rank < out_dim {
        return Err(Error::RankDeficient {
            achieved: rank,
            requested: out_dim,
        });
    }
    let mut weight = Vec::with_capacity(out_dim * d);
    let mut variances = Vec::with_capacity(out_dim);
    for &i in order.iter().take(out_dim) {
        let axis: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let sign = axis.iter().find(|v| v.abs() > 1e-12).map(|v| v.signum()).unwrap_or(1.0);
        weight.extend(axis.iter().map(|v| v * sign));
        variances.push(eig.eigenvalues[i]);
    }
    let bias: Vec<f64> = (0..out_dim)
        .map(|o| {
            -weight[o * d..(o + 1) * d]
                .iter()
                .zip(&mean)
                .map(|(w, m)| w * m)
                .sum::<f64>()
        })
        .collect();
    Ok(PcaProjection {
        weight: Tensor::new(vec![out_dim, d, 1, 1], weight)?,
        bias: Tensor::new(vec![out_dim], bias)?,
        mean: Tensor::new(vec![d], mean)?,
        variances,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct PcaVars {
    pub weight: Var,
    pub bias: Var,
}

pub fn register_pca<T: Real>(g: &mut Graph<T>, projections: &[PcaProjection<T>], trainable: bool) -> Vec<PcaVars> {
    projections
        .iter()
        .map(|p| PcaVars {
            weight: g.leaf(p.weight.clone(), trainable),
            bias: g.leaf(p.bias.clone(), trainable),
        })
        .collect()
}

/// Per tap: PCA (1×1 conv + bias) → bilinear resize to `grid×grid` →
/// per-pixel ℓ2 normalization; slices are concatenated along channels.
pub fn assemble_hypercolumn<T: Real>(
    g: &mut Graph<T>,
    taps: &[Var],
    projections: &[PcaVars],
    grid: usize,
) -> Result<Var> {
    if taps.len() != projections.len() {
        return Err(Error::shape(
            "assemble_hypercolumn",
            format!("{} taps, {} projections", taps.len(), projections.len()),
        ));
    }
    let mut slices = Vec::with_capacity(taps.len());
    for (&tap, p) in taps.iter().zip(projections) {
        let c = g.shape(tap)[0];
        let expect = g.shape(p.weight)[1];
        if c != expect {
            return Err(Error::shape(
                "assemble_hypercolumn",
                format!("tap has {c} channels, projection expects {expect}"),
            ));
        }
        let y = g.conv2d(tap, p.weight, 0)?;
        let y = g.channel_bias(y, p.bias)?;
        let y = g.bilinear_resize(y, grid, grid)?;
        let y = g.l2_normalize(y, NormScope::PerPixel, 1e-8)?;
        slices.push(y);
    }
    g.concat(&slices)
}

/// Collects `per_stage` tap vectors at uniformly drawn locations of `images`.
pub fn sample_tap_descriptors<T: Real>(
    backbone: &Backbone<T>,
    images: &[&Tensor<T>],
    per_stage: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if images.is_empty() {
        return Err(Error::EmptyPool("no images for PCA fitting".into()));
    }
    let mut out = vec![Vec::with_capacity(per_stage); STAGES];
    let per_image = per_stage.div_ceil(images.len());
    for img in images {
        let mut g = Graph::new();
        let vars = backbone.register(&mut g, false);
        let x = g.constant((*img).clone());
        let taps = backbone_forward(&mut g, x, &vars)?;
        for (s, &tap) in taps.iter().enumerate() {
            let (c, h, w) = g.value(tap).dims3("sample_tap_descriptors")?;
            let data = g.value(tap).data();
            for _ in 0..per_image {
                if out[s].len() >= per_stage {
                    break;
                }
                let p = rng.gen_range(0..h * w);
                out[s].push((0..c).map(|ch| data[ch * h * w + p].as_f64()).collect());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn tap_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::<f32>::init(3, [16, 32, 64], &mut rng);
        let mut g = Graph::new();
        let vars = bb.register(&mut g, false);
        let img = g.constant(Tensor::full(&[3, 32, 32], 0.5));
        let taps = backbone_forward(&mut g, img, &vars).unwrap();
        assert_eq!(g.shape(taps[0]), &[16, 16, 16]);
        assert_eq!(g.shape(taps[1]), &[32, 8, 8]);
        assert_eq!(g.shape(taps[2]), &[64, 4, 4]);
    }

    #[test]
    fn zero_image_gives_zero_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bb = Backbone::<f64>::init(3, [4, 4, 4], &mut rng);
        let mut g = Graph::new();
        let vars = bb.register(&mut g, false);
        let img = g.constant(Tensor::zeros(&[3, 16, 16]));
        for t in backbone_forward(&mut g, img, &vars).unwrap() {
            assert!(g.value(t).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn indivisible_size_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bb = Backbone::<f64>::init(3, [4, 4, 4], &mut rng);
        let mut g = Graph::new();
        let vars = bb.register(&mut g, false);
        let img = g.constant(Tensor::zeros(&[3, 12, 16]));
        assert!(backbone_forward(&mut g, img, &vars).is_err());
    }

    #[test]
    fn pca_exact_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // 2-dim affine subspace of R^5
        let basis = [[1.0, 2.0, 0.0, -1.0, 0.5], [0.0, 1.0, 1.0, 3.0, -2.0]];
        let offset = [4.0, -1.0, 2.0, 0.0, 1.0];
        let samples: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                (0..5).map(|i| offset[i] + a * basis[0][i] + b * basis[1][i]).collect()
            })
            .collect();
        let p = fit_pca(&samples, 2).unwrap();
        for s in &samples {
            let r = p.reconstruct(&p.project(s));
            let err: f64 = r.iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(err < 1e-8, "{err}");
        }
        match fit_pca(&samples, 3) {
            Err(Error::RankDeficient {
                achieved: 2,
                requested: 3,
            }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pca_rows_orthonormal_and_distance_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![rng.sample(StandardNormal), rng.sample(StandardNormal)])
            .collect();
        let p = fit_pca(&samples, 2).unwrap();
        let w = p.weight.data();
        let dot = |a: usize, b: usize| w[2 * a] * w[2 * b] + w[2 * a + 1] * w[2 * b + 1];
        assert!((dot(0, 0) - 1.0).abs() < 1e-6);
        assert!((dot(1, 1) - 1.0).abs() < 1e-6);
        assert!(dot(0, 1).abs() < 1e-6);
        let (a, b) = (p.project(&samples[0]), p.project(&samples[1]));
        let d0 = ((samples[0][0] - samples[1][0]).powi(2) + (samples[0][1] - samples[1][1]).powi(2)).sqrt();
        let d1 = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        assert!((d0 - d1).abs() < 1e-6);
    }

    #[test]
    fn pca_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..6).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        assert_eq!(fit_pca(&samples, 4).unwrap(), fit_pca(&samples, 4).unwrap());
    }

    #[test]
    fn hypercolumn_slices_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bb = Backbone::<f64>::init(3, [6, 8, 10], &mut rng);
        let imgs: Vec<Tensor<f64>> = (0..4)
            .map(|_| Tensor::from_fn(&[3, 16, 16], |_| rng.gen_range(0.0..1.0)))
            .collect();
        let refs: Vec<&Tensor<f64>> = imgs.iter().collect();
        let samples = sample_tap_descriptors(&bb, &refs, 64, &mut rng).unwrap();
        let proj: Vec<PcaProjection<f64>> = samples.iter().map(|s| fit_pca(s, 3).unwrap()).collect();
        let mut g = Graph::new();
        let vars = bb.register(&mut g, false);
        let pv = register_pca(&mut g, &proj, false);
        let x = g.constant(imgs[0].clone());
        let taps = backbone_forward(&mut g, x, &vars).unwrap();
        let hc = assemble_hypercolumn(&mut g, &taps, &pv, 8).unwrap();
        assert_eq!(g.shape(hc), &[9, 8, 8]);
        let v = g.value(hc);
        for s in 0..3 {
            for p in 0..64 {
                let n: f64 = (0..3)
                    .map(|c| v.data()[(s * 3 + c) * 64 + p].powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(n.abs() < 1e-5 || (n - 1.0).abs() < 1e-5, "{n}");
            }
        }
    }
}
