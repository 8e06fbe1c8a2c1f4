//! The full network: backbone, PCA, class banks and the class-agnostic bank,
//! plus the checkpoint container.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::backbone::{
    assemble_hypercolumn, backbone_forward, register_pca, Backbone, BackboneVars, PcaProjection, PcaVars,
};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::losses::{response_maps, RunningMean};
use crate::tensor::{Real, Tensor};
use crate::tns;

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorNet {
    pub config: ModelConfig,
    pub image_size: usize,
    pub backbone: Backbone<f32>,
    pub pca: Vec<PcaProjection<f32>>,
    /// One `K×D×3×3` bank per class.
    pub banks: Vec<Tensor<f32>>,
    /// `L×(K·N)×1×1`.
    pub agnostic: Tensor<f32>,
    pub mean: RunningMean,
}

/// Tape handles for every trainable tensor of an [`AnchorNet`].
#[derive(Debug, Clone)]
pub struct NetVars {
    pub backbone: BackboneVars,
    pub pca: Vec<PcaVars>,
    pub banks: Vec<Var>,
    pub agnostic: Var,
}

impl NetVars {
    /// Handles in [`AnchorNet::param_names`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for s in 0..3 {
            v.push(self.backbone.weights[s]);
            v.push(self.backbone.biases[s]);
        }
        for p in &self.pca {
            v.push(p.weight);
            v.push(p.bias);
        }
        v.extend(&self.banks);
        v.push(self.agnostic);
        v
    }
}

/// He-normal `K×D×3×3` bank.
pub fn init_bank(filters: usize, depth: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let normal = Normal::new(0.0, (2.0 / (9 * depth) as f64).sqrt()).unwrap();
    Tensor::from_fn(&[filters, depth, 3, 3], |_| normal.sample(rng) as f32)
}

/// A random `rows×cols` matrix with orthonormal rows (or columns when
/// `rows > cols`), shaped as a 1×1 bank.
pub fn random_orthonormal_bank(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let m = nalgebra::DMatrix::<f64>::from_fn(rows.max(cols), rows.min(cols), |_, _| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    let q = m.qr().q();
    Tensor::from_fn(&[rows, cols, 1, 1], |i| {
        let (r, c) = (i / cols, i % cols);
        (if rows >= cols { q[(r, c)] } else { q[(c, r)] }) as f32
    })
}

impl AnchorNet {
    /// Untrained network with identity-free PCA placeholders; PCA must be fit
    /// before hypercolumns are meaningful.
    pub fn new(config: ModelConfig, image_size: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let backbone = Backbone::init(3, config.widths, rng);
        let pca = config
            .widths
            .iter()
            .map(|&w| PcaProjection {
                weight: Tensor::from_fn(&[config.pca_dim, w, 1, 1], |i| if i / w == i % w { 1.0 } else { 0.0 }),
                bias: Tensor::zeros(&[config.pca_dim]),
                mean: Tensor::zeros(&[w]),
                variances: vec![0.0; config.pca_dim],
            })
            .collect();
        let d = config.hypercolumn_dim();
        let banks = (0..classes).map(|_| init_bank(config.filters, d, rng)).collect();
        let agnostic = random_orthonormal_bank(config.agnostic, config.filters * classes, rng);
        AnchorNet {
            config,
            image_size,
            backbone,
            pca,
            banks,
            agnostic,
            mean: RunningMean::new(config.filters * classes, 0.99),
        }
    }

    pub fn classes(&self) -> usize {
        self.banks.len()
    }

    pub fn grid(&self) -> usize {
        self.config.grid_for(self.image_size)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for s in 0..3 {
            v.push(format!("backbone.{s}.weight"));
            v.push(format!("backbone.{s}.bias"));
        }
        for s in 0..self.pca.len() {
            v.push(format!("pca.{s}.weight"));
            v.push(format!("pca.{s}.bias"));
        }
        for c in 0..self.banks.len() {
            v.push(format!("bank.{c}"));
        }
        v.push("agnostic".into());
        v
    }

    /// Parameters in [`param_names`](Self::param_names) order.
    pub fn params(&self) -> Vec<&Tensor<f32>> {
        let mut v = Vec::new();
        for s in 0..3 {
            v.push(&self.backbone.weights[s]);
            v.push(&self.backbone.biases[s]);
        }
        for p in &self.pca {
            v.push(&p.weight);
            v.push(&p.bias);
        }
        v.extend(&self.banks);
        v.push(&self.agnostic);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut v = Vec::new();
        for (w, b) in self.backbone.weights.iter_mut().zip(self.backbone.biases.iter_mut()) {
            v.push(w);
            v.push(b);
        }
        for p in &mut self.pca {
            v.push(&mut p.weight);
            v.push(&mut p.bias);
        }
        v.extend(self.banks.iter_mut());
        v.push(&mut self.agnostic);
        v
    }

    /// Registers all parameters; `trainable` decides which receive gradients
    /// (indexed as [`param_names`](Self::param_names)).
    pub fn register<T: Real>(&self, g: &mut Graph<T>, trainable: &dyn Fn(&str) -> bool) -> NetVars {
        let names = self.param_names();
        let mut it = self
            .params()
            .into_iter()
            .zip(names.iter())
            .map(|(t, n)| g.leaf(t.cast(), trainable(n)));
        let mut next = || it.next().unwrap();
        let mut weights = [Var::default(); 3];
        let mut biases = [Var::default(); 3];
        for s in 0..3 {
            weights[s] = next();
            biases[s] = next();
        }
        let pca = (0..self.pca.len())
            .map(|_| PcaVars {
                weight: next(),
                bias: next(),
            })
            .collect();
        let banks = (0..self.banks.len()).map(|_| next()).collect();
        let agnostic = next();
        NetVars {
            backbone: BackboneVars { weights, biases },
            pca,
            banks,
            agnostic,
        }
    }

    /// Hypercolumn of `image` on the tape.
    pub fn hypercolumn_on<T: Real>(&self, g: &mut Graph<T>, vars: &NetVars, image: Var) -> Result<Var> {
        let taps = backbone_forward(g, image, &vars.backbone)?;
        assemble_hypercolumn(g, &taps, &vars.pca, self.grid())
    }

    /// Hypercolumn without gradients.
    pub fn hypercolumn(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let vars = self.backbone.register(&mut g, false);
        let pca = register_pca(&mut g, &self.pca, false);
        let x = g.constant(image.clone());
        let taps = backbone_forward(&mut g, x, &vars)?;
        let hc = assemble_hypercolumn(&mut g, &taps, &pca, self.grid())?;
        Ok(g.value(hc).clone())
    }

    /// `(pre, maps)` of class `class` on a precomputed hypercolumn.
    pub fn class_maps(&self, hc: &Tensor<f32>, class: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let bank = self
            .banks
            .get(class)
            .ok_or_else(|| Error::Invalid(format!("unknown class {class}")))?;
        let mut g = Graph::new();
        let h = g.constant(hc.clone());
        let b = g.constant(bank.clone());
        let (pre, maps) = response_maps(&mut g, h, b)?;
        Ok((g.value(pre).clone(), g.value(maps).clone()))
    }

    /// Stacked heatmaps Γ of all class banks.
    pub fn stacked_maps(&self, hc: &Tensor<f32>) -> Result<Tensor<f32>> {
        let maps = (0..self.classes())
            .map(|c| self.class_maps(hc, c).map(|m| m.1))
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat(&maps.iter().collect::<Vec<_>>())
    }

    /// Class-agnostic responses `F^S * (Γ − μ)`.
    pub fn agnostic_maps(&self, gamma: &Tensor<f32>) -> Result<Tensor<f32>> {
        let c = gamma.shape()[0];
        let mut g = Graph::new();
        let x = g.constant(gamma.clone());
        let mu = g.constant(Tensor::from_fn(&[c], |i| -self.mean.mean[i] as f32));
        let centered = g.channel_bias(x, mu)?;
        let f = g.constant(self.agnostic.clone());
        let y = g.conv2d(centered, f, 0)?;
        Ok(g.value(y).clone())
    }
}

const CKPT_MAGIC: &[u8; 4] = b"ANCK";
const CKPT_VERSION: u8 = 1;

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: AnchorNet,
    /// Optimizer velocities in parameter order (empty if not saved).
    pub velocities: Vec<Tensor<f32>>,
    pub steps: u64,
    pub config_hash: [u8; 32],
}

fn put_entry<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    tns::encode(t, out);
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let net = &self.net;
        let mut entries: Vec<u8> = Vec::new();
        let mut count = 0u32;
        let mut put32 = |name: &str, t: &Tensor<f32>| {
            put_entry(&mut entries, name, t);
            count += 1;
        };
        let cfg = &net.config;
        let meta = Tensor::<f32>::new(
            vec![10],
            [
                cfg.widths[0],
                cfg.widths[1],
                cfg.widths[2],
                cfg.pca_dim,
                cfg.pca_samples,
                cfg.grid,
                cfg.filters,
                cfg.agnostic,
                net.image_size,
                net.classes(),
            ]
            .iter()
            .map(|&v| v as f32)
            .collect(),
        )
        .unwrap();
        put32("meta", &meta);
        for (name, t) in net.param_names().iter().zip(net.params()) {
            put32(name, t);
        }
        for (s, p) in net.pca.iter().enumerate() {
            put32(&format!("pca.{s}.mean"), &p.mean);
        }
        for (i, v) in self.velocities.iter().enumerate() {
            put32(&format!("velocity.{i}"), v);
        }
        let mut f64_entries = Vec::new();
        let mut n64 = 0u32;
        for (s, p) in net.pca.iter().enumerate() {
            put_entry(
                &mut f64_entries,
                &format!("pca.{s}.variances"),
                &Tensor::new(vec![p.variances.len()], p.variances.clone()).unwrap(),
            );
            n64 += 1;
        }
        put_entry(
            &mut f64_entries,
            "mean",
            &Tensor::new(vec![net.mean.mean.len()], net.mean.mean.clone()).unwrap(),
        );
        put_entry(
            &mut f64_entries,
            "mean.state",
            &Tensor::new(vec![2], vec![net.mean.decay, net.mean.count as f64]).unwrap(),
        );
        put_entry(
            &mut f64_entries,
            "steps",
            &Tensor::new(vec![1], vec![self.steps as f64]).unwrap(),
        );
        n64 += 3;

        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.push(CKPT_VERSION);
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(count + n64).to_le_bytes());
        out.extend_from_slice(&entries);
        out.extend_from_slice(&f64_entries);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses a checkpoint. A config hash differing from `expect_hash` only
    /// logs a warning.
    pub fn from_bytes(bytes: &[u8], expect_hash: Option<[u8; 32]>) -> Result<Self> {
        let fmt = |offset: usize, msg: String| Error::Format {
            offset: offset as u64,
            msg,
        };
        if bytes.len() < 4 + 1 + 32 + 4 + 32 {
            return Err(fmt(bytes.len(), "truncated checkpoint header".into()));
        }
        if &bytes[..4] != CKPT_MAGIC {
            return Err(fmt(0, format!("bad magic {:?}", &bytes[..4])));
        }
        if bytes[4] != CKPT_VERSION {
            return Err(fmt(4, format!("unsupported checkpoint version {}", bytes[4])));
        }
        let body = &bytes[..bytes.len() - 32];
        if Sha256::digest(body).as_slice() != &bytes[bytes.len() - 32..] {
            return Err(fmt(bytes.len() - 32, "checksum mismatch".into()));
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(&bytes[5..37]);
        if let Some(h) = expect_hash {
            if h != config_hash {
                log::warn!(
                    "checkpoint config hash {} differs from current config {}",
                    hex::encode(config_hash),
                    hex::encode(h)
                );
            }
        }
        let count = u32::from_le_bytes(bytes[37..41].try_into().unwrap());
        let mut pos = 41;
        let mut f32s = std::collections::BTreeMap::new();
        let mut f64s = std::collections::BTreeMap::new();
        for _ in 0..count {
            if pos + 2 > body.len() {
                return Err(fmt(pos, "truncated entry name".into()));
            }
            let n = u16::from_le_bytes(body[pos..pos + 2].try_into().unwrap()) as usize;
            pos += 2;
            if pos + n > body.len() {
                return Err(fmt(pos, "truncated entry name".into()));
            }
            let name = String::from_utf8(body[pos..pos + n].to_vec())
                .map_err(|_| fmt(pos, "entry name is not UTF-8".into()))?;
            pos += n;
            let dtype_at = pos + 5;
            match body.get(dtype_at) {
                Some(0) => {
                    f32s.insert(name, tns::decode::<f32>(body, &mut pos, 0)?);
                }
                Some(1) => {
                    f64s.insert(name, tns::decode::<f64>(body, &mut pos, 0)?);
                }
                _ => return Err(fmt(dtype_at, format!("bad record for entry {name}"))),
            }
        }
        if pos != body.len() {
            return Err(fmt(pos, format!("{} unexpected trailing bytes", body.len() - pos)));
        }
        let missing = |k: &str| fmt(pos, format!("missing entry {k}"));
        let mut take32 = |k: &str| f32s.remove(k).ok_or_else(|| missing(k));
        let meta: Vec<usize> = take32("meta")?.data().iter().map(|&v| v as usize).collect();
        if meta.len() != 10 {
            return Err(fmt(41, "malformed meta entry".into()));
        }
        let config = ModelConfig {
            widths: [meta[0], meta[1], meta[2]],
            pca_dim: meta[3],
            pca_samples: meta[4],
            grid: meta[5],
            filters: meta[6],
            agnostic: meta[7],
        };
        let (image_size, classes) = (meta[8], meta[9]);
        let mut bb_w = Vec::new();
        let mut bb_b = Vec::new();
        for s in 0..3 {
            bb_w.push(take32(&format!("backbone.{s}.weight"))?);
            bb_b.push(take32(&format!("backbone.{s}.bias"))?);
        }
        let mut pca = Vec::new();
        for s in 0..3 {
            let variances = f64s
                .remove(&format!("pca.{s}.variances"))
                .ok_or_else(|| missing("pca variances"))?
                .into_data();
            pca.push(PcaProjection {
                weight: take32(&format!("pca.{s}.weight"))?,
                bias: take32(&format!("pca.{s}.bias"))?,
                mean: take32(&format!("pca.{s}.mean"))?,
                variances,
            });
        }
        let banks = (0..classes)
            .map(|c| take32(&format!("bank.{c}")))
            .collect::<Result<Vec<_>>>()?;
        let agnostic = take32("agnostic")?;
        let mut velocities = Vec::new();
        while let Some(v) = f32s.remove(&format!("velocity.{}", velocities.len())) {
            velocities.push(v);
        }
        let mean_v = f64s.remove("mean").ok_or_else(|| missing("mean"))?.into_data();
        let state = f64s
            .remove("mean.state")
            .ok_or_else(|| missing("mean.state"))?
            .into_data();
        let steps = f64s.remove("steps").ok_or_else(|| missing("steps"))?.item() as u64;
        if state.len() != 2 {
            return Err(fmt(pos, "malformed mean.state".into()));
        }
        Ok(Checkpoint {
            net: AnchorNet {
                config,
                image_size,
                backbone: Backbone {
                    weights: bb_w,
                    biases: bb_b,
                },
                pca,
                banks,
                agnostic,
                mean: RunningMean {
                    mean: mean_v,
                    decay: state[0],
                    count: state[1] as u64,
                },
            },
            velocities,
            steps,
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expect_hash: Option<[u8; 32]>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expect_hash)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ModelConfig {
            widths: [4, 4, 8],
            pca_dim: 2,
            filters: 3,
            agnostic: 5,
            ..ModelConfig::default()
        };
        let mut net = AnchorNet::new(cfg, 16, 2, &mut rng);
        net.mean.mean[1] = 0.25;
        net.mean.count = 3;
        let velocities = net.params().iter().map(|p| p.map(|v| v * 0.5)).collect();
        Checkpoint {
            net,
            velocities,
            steps: 42,
            config_hash: [7; 32],
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let c = small();
        let b = c.to_bytes();
        let back = Checkpoint::from_bytes(&b, Some([7; 32])).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), b);
    }

    #[test]
    fn corrupted_magic_names_offset() {
        let mut b = small().to_bytes();
        b[1] = b'X';
        let e = Checkpoint::from_bytes(&b, None).unwrap_err();
        assert!(e.to_string().contains("offset 0"), "{e}");
    }

    #[test]
    fn truncation_and_tamper_are_errors() {
        let b = small().to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 10], None).is_err());
        let mut t = b.clone();
        let mid = t.len() / 2;
        t[mid] ^= 1;
        assert!(Checkpoint::from_bytes(&t, None).is_err());
    }

    #[test]
    fn hash_mismatch_still_loads() {
        let b = small().to_bytes();
        assert!(Checkpoint::from_bytes(&b, Some([0; 32])).is_ok());
    }

    #[test]
    fn orthonormal_bank() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (r, c) in [(4, 6), (6, 4), (5, 5)] {
            let b = random_orthonormal_bank(r, c, &mut rng);
            let d = b.data();
            let (outer, inner) = if r <= c { (r, c) } else { (c, r) };
            for i in 0..outer {
                for j in 0..outer {
                    let dot: f64 = (0..inner)
                        .map(|k| {
                            let (a, bb) = if r <= c {
                                (d[i * c + k], d[j * c + k])
                            } else {
                                (d[k * c + i], d[k * c + j])
                            };
                            (a * bb) as f64
                        })
                        .sum();
                    assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-5);
                }
            }
        }
    }
}
