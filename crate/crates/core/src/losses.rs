//! Discriminability, diversity and reconstruction losses for anchor filter banks.

use rand::Rng;

use crate::autograd::{Graph, NormScope, Pool, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => -1.0,
        }
    }
}

impl TryFrom<i64> for Label {
    type Error = Error;
    fn try_from(y: i64) -> Result<Self> {
        match y {
            1 => Ok(Label::Positive),
            -1 => Ok(Label::Negative),
            other => Err(Error::Invalid(format!("label must be +1 or -1, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    One,
    Two,
}

impl TryFrom<u8> for Stage {
    type Error = Error;
    fn try_from(s: u8) -> Result<Self> {
        match s {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            other => Err(Error::Invalid(format!("unknown stage {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub discr: f64,
    pub aux: f64,
    pub div: f64,
    pub rec: f64,
    /// Stage-2 negative samples have their whole loss divided by this.
    pub neg_deweight: f64,
    /// Ceiling on each filter's global max in the positive branch.
    pub discr_cap: f64,
    /// Gaussian sigma (hypercolumn cells) smoothing maps before decorrelation.
    pub div_b_sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            discr: 1.0,
            aux: 10.0,
            div: 1e5,
            rec: 1e5,
            neg_deweight: 20.0,
            discr_cap: 20.0,
            div_b_sigma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("discr", self.discr),
            ("aux", self.aux),
            ("div", self.div),
            ("rec", self.rec),
            ("neg_deweight", self.neg_deweight),
            ("discr_cap", self.discr_cap),
            ("div_b_sigma", self.div_b_sigma),
        ];
        for (k, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("loss weight {k} = {v} must be finite and ≥ 0")));
            }
        }
        if self.neg_deweight == 0.0 {
            return Err(Error::Config("loss weight neg_deweight must be > 0".into()));
        }
        Ok(())
    }
}

/// Returns `(pre, maps)`: the same-padded 3×3 responses of `bank` on the
/// hypercolumn and their softplus.
pub fn response_maps<T: Real>(g: &mut Graph<T>, hc: Var, bank: Var) -> Result<(Var, Var)> {
    let hs = g.shape(hc);
    let bs = g.shape(bank);
    if hs.len() != 3 || bs.len() != 4 || bs[1] != hs[0] {
        return Err(Error::shape(
            "response_maps",
            format!("hypercolumn {hs:?} vs bank {bs:?}"),
        ));
    }
    let pad = bs[2] / 2;
    let pre = g.conv2d(hc, bank, pad)?;
    let maps = g.softplus(pre)?;
    Ok((pre, maps))
}

/// `−y · Σ_k gmax(maps_k)`. On positives each maximum is capped at `cap`.
pub fn discr_loss<T: Real>(g: &mut Graph<T>, maps: Var, label: Label, cap: Option<f64>) -> Result<Var> {
    let m = g.global_pool(maps, Pool::Max)?;
    match label {
        Label::Positive => {
            let m = match cap {
                Some(c) => g.clamp_max(m, c)?,
                None => m,
            };
            let s = g.sum(m)?;
            g.scale(s, -1.0)
        }
        Label::Negative => g.sum(m),
    }
}

/// `Σ_k gavg(relu(pre_k))` on negatives, zero on positives.
pub fn discr_aux_loss<T: Real>(g: &mut Graph<T>, pre: Var, label: Label) -> Result<Var> {
    match label {
        Label::Positive => Ok(g.constant(Tensor::scalar(T::zero()))),
        Label::Negative => {
            let r = g.relu(pre)?;
            let a = g.global_pool(r, Pool::Avg)?;
            g.sum(a)
        }
    }
}

fn off_diagonal_sum<T: Real>(g: &mut Graph<T>, m: Var) -> Result<Var> {
    let k = g.shape(m)[0];
    let mask = Tensor::from_fn(&[k, k], |i| if i / k == i % k { T::zero() } else { T::one() });
    let mask = g.constant(mask);
    let masked = g.mul(m, mask)?;
    g.sum(masked)
}

/// `Σ_{i≠j} |Σ_p cos(F_i^p, F_j^p)|` over ordered pairs, where `F_i^p` is the
/// depth column of filter `i` at spatial tap `p`.
pub fn div_a_loss<T: Real>(g: &mut Graph<T>, bank: Var) -> Result<Var> {
    if g.shape(bank).len() != 4 {
        return Err(Error::shape("div_a_loss", format!("bank {:?}", g.shape(bank))));
    }
    let n = g.l2_normalize(bank, NormScope::PerPixel, NORM_EPS)?;
    let gm = g.gram(n)?;
    let a = g.abs(gm)?;
    off_diagonal_sum(g, a)
}

/// `Σ_{i≠j} cos(ψ_i, ψ_j)²` over ordered pairs of (optionally smoothed) maps.
pub fn div_b_loss<T: Real>(g: &mut Graph<T>, maps: Var, sigma: Option<f64>) -> Result<Var> {
    let s = match sigma {
        Some(s) => g.gaussian_blur(maps, s)?,
        None => maps,
    };
    let n = g.l2_normalize(s, NormScope::PerChannel, NORM_EPS)?;
    let gm = g.gram(n)?;
    let sq = g.square(gm)?;
    off_diagonal_sum(g, sq)
}

/// Pairwise cosines (ordered pairs, `i≠j`) of smoothed maps, without a tape.
pub fn pairwise_cosines(maps: &Tensor<f64>, sigma: Option<f64>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let m = g.constant(maps.clone());
    let s = match sigma {
        Some(s) => g.gaussian_blur(m, s)?,
        None => m,
    };
    let n = g.l2_normalize(s, NormScope::PerChannel, NORM_EPS)?;
    let gm = g.gram(n)?;
    let k = maps.shape()[0];
    let v = g.value(gm).data();
    Ok((0..k * k).filter(|i| i / k != i % k).map(|i| v[i]).collect())
}

/// Exponential moving average of the per-channel mean of stacked heatmaps.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMean {
    pub mean: Vec<f64>,
    pub decay: f64,
    pub count: u64,
}

impl RunningMean {
    pub fn new(channels: usize, decay: f64) -> Self {
        RunningMean {
            mean: vec![0.0; channels],
            decay,
            count: 0,
        }
    }

    /// The first update copies the batch mean; later ones blend with `decay`.
    pub fn update<T: Real>(&mut self, gamma: &Tensor<T>) -> Result<()> {
        let c = gamma.shape().first().copied().unwrap_or(0);
        if c != self.mean.len() {
            return Err(Error::shape(
                "RunningMean::update",
                format!("{c} channels, expected {}", self.mean.len()),
            ));
        }
        let per = gamma.len() / c.max(1);
        for (ch, m) in self.mean.iter_mut().enumerate() {
            let avg = gamma.channel(ch).iter().map(|v| v.as_f64()).sum::<f64>() / per.max(1) as f64;
            if !avg.is_finite() {
                return Err(Error::NonFinite {
                    op: "RunningMean::update",
                });
            }
            *m = if self.count == 0 {
                avg
            } else {
                self.decay * *m + (1.0 - self.decay) * avg
            };
        }
        self.count += 1;
        Ok(())
    }
}

/// Independent Bernoulli keep-flags: each channel is dropped with probability `rate`.
pub fn sample_channel_mask(channels: usize, rate: f64, rng: &mut impl Rng) -> Vec<bool> {
    (0..channels).map(|_| !rng.gen_bool(rate.clamp(0.0, 1.0))).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct Reconstruction {
    pub loss: Var,
    /// Set when the centered heatmaps were exactly zero and the loss was
    /// replaced by a constant 0.
    pub degenerate: bool,
}

/// `‖Γ̂/‖Γ̂‖ − R/‖R‖‖²` with `Γ̂ = Γ − μ` and `R = Fᵀ * F * c(Γ̂)`; `keep`
/// selects the channels surviving corruption.
pub fn reconstruction_loss<T: Real>(
    g: &mut Graph<T>,
    gamma: Var,
    agnostic: Var,
    mean: &RunningMean,
    keep: &[bool],
) -> Result<Reconstruction> {
    let (c, h, w) = g.value(gamma).dims3("reconstruction_loss")?;
    let bs = g.shape(agnostic).to_vec();
    if bs.len() != 4 || bs[1] != c || bs[2] != 1 || bs[3] != 1 {
        return Err(Error::shape(
            "reconstruction_loss",
            format!("heatmaps {c} channels vs agnostic bank {bs:?}"),
        ));
    }
    if keep.len() != c || mean.mean.len() != c {
        return Err(Error::shape(
            "reconstruction_loss",
            format!("mask {} / mean {} for {c} channels", keep.len(), mean.mean.len()),
        ));
    }
    let neg_mu = g.constant(Tensor::from_fn(&[c], |i| T::of(-mean.mean[i])));
    let centered = g.channel_bias(gamma, neg_mu)?;
    if g.value(centered).data().iter().all(|v| *v == T::zero()) {
        log::warn!("reconstruction loss skipped: centered heatmaps are all zero");
        return Ok(Reconstruction {
            loss: g.constant(Tensor::scalar(T::zero())),
            degenerate: true,
        });
    }
    let m = g.constant(Tensor::from_fn(&[c, h, w], |i| {
        if keep[i / (h * w)] {
            T::one()
        } else {
            T::zero()
        }
    }));
    let corrupted = g.mul(centered, m)?;
    let code = g.conv2d(corrupted, agnostic, 0)?;
    let recon = g.conv_transpose2d(code, agnostic, 0)?;
    let a = g.l2_normalize(centered, NormScope::WholeTensor, NORM_EPS)?;
    let b = g.l2_normalize(recon, NormScope::WholeTensor, NORM_EPS)?;
    let d = g.sub(a, b)?;
    let sq = g.square(d)?;
    Ok(Reconstruction {
        loss: g.sum(sq)?,
        degenerate: false,
    })
}

/// Unweighted loss terms of one sample.
#[derive(Debug, Clone, Copy)]
pub struct Terms {
    pub discr: Var,
    pub aux: Var,
    pub div_a: Var,
    pub div_b: Var,
    pub rec: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Breakdown {
    pub discr: f64,
    pub aux: f64,
    pub div_a: f64,
    pub div_b: f64,
    pub rec: Option<f64>,
    pub total: f64,
}

/// Weighted sum of `terms`. Stage 1 rejects a reconstruction term; in stage 2
/// the reconstruction term is dropped for negatives and the negative-sample
/// total is divided by `neg_deweight`.
pub fn total_objective<T: Real>(
    g: &mut Graph<T>,
    terms: &Terms,
    weights: &LossWeights,
    stage: Stage,
    label: Label,
) -> Result<(Var, Breakdown)> {
    if stage == Stage::One && terms.rec.is_some() {
        return Err(Error::Invalid("stage 1 has no reconstruction term".into()));
    }
    let rec = match (stage, label) {
        (Stage::Two, Label::Positive) => terms.rec,
        _ => None,
    };
    let mut parts = vec![
        g.scale(terms.discr, weights.discr)?,
        g.scale(terms.aux, weights.aux)?,
        g.scale(terms.div_a, weights.div)?,
        g.scale(terms.div_b, weights.div)?,
    ];
    if let Some(r) = rec {
        parts.push(g.scale(r, weights.rec)?);
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    if stage == Stage::Two && label == Label::Negative {
        total = g.scale(total, 1.0 / weights.neg_deweight)?;
    }
    let val = |v: Var| g.value(v).item().as_f64();
    let breakdown = Breakdown {
        discr: val(terms.discr),
        aux: val(terms.aux),
        div_a: val(terms.div_a),
        div_b: val(terms.div_b),
        rec: rec.map(val),
        total: val(total),
    };
    Ok((total, breakdown))
}
