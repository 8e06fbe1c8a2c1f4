//! Backbone warm-up, PCA fitting, per-class bank training (stage 1) and
//! joint fine-tuning with the class-agnostic autoencoder (stage 2).

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Pool, Var};
use crate::backbone::{backbone_forward, fit_pca, sample_tap_descriptors};
use crate::config::{RunConfig, Stage1Config, Stage2Config, WarmupConfig};
use crate::error::{Error, Result};
use crate::losses::{
    discr_aux_loss, discr_loss, div_a_loss, div_b_loss, reconstruction_loss, response_maps, sample_channel_mask,
    total_objective, Breakdown, Label, LossWeights, RunningMean, Stage, Terms,
};
use crate::model::AnchorNet;
use crate::optim::{Sgd, SgdConfig};
use crate::synth::{Dataset, Split};
use crate::tensor::Tensor;

/// Seeds an independent stream for one training phase.
pub fn phase_rng(seed: u64, phase: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 32 | phase);
    rng
}

/// Training image ids per class and for backgrounds.
#[derive(Debug, Clone)]
pub struct Pools {
    pub positives: Vec<Vec<u64>>,
    pub negatives: Vec<u64>,
}

impl Pools {
    pub fn from_dataset(ds: &Dataset, split: Split) -> Result<Self> {
        let positives: Vec<Vec<u64>> = (0..ds.num_classes()).map(|c| ds.ids(split, Some(c))).collect();
        let negatives = ds.ids(split, None);
        let p = Pools { positives, negatives };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        for (c, p) in self.positives.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::EmptyPool(format!("no positives for class {c}")));
            }
        }
        if self.negatives.is_empty() || self.positives.is_empty() {
            return Err(Error::EmptyPool("no background images".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub id: u64,
    pub label: Label,
    /// Class of the image, `None` for backgrounds.
    pub class: Option<usize>,
}

/// Stage 1: positives of `focus` vs backgrounds, 50/50. Stage 2: positives
/// uniform over classes vs backgrounds, 50/50.
pub fn sample_minibatch(
    stage: Stage,
    focus: usize,
    pools: &Pools,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Draw>> {
    pools.check()?;
    if focus >= pools.positives.len() {
        return Err(Error::Invalid(format!("unknown class {focus}")));
    }
    Ok((0..batch)
        .map(|_| {
            if rng.gen_bool(0.5) {
                let c = match stage {
                    Stage::One => focus,
                    Stage::Two => rng.gen_range(0..pools.positives.len()),
                };
                Draw {
                    id: *pools.positives[c].choose(rng).unwrap(),
                    label: Label::Positive,
                    class: Some(c),
                }
            } else {
                Draw {
                    id: *pools.negatives.choose(rng).unwrap(),
                    label: Label::Negative,
                    class: None,
                }
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub stage: u8,
    pub class: Option<usize>,
    pub label: Label,
    pub breakdown: Breakdown,
}

/// Per-sample loss log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<LossRow>,
}

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,stage,class,label,discr,aux,divA,divB,rec,total\n");
        for r in &self.rows {
            let b = &r.breakdown;
            let class = r.class.map_or("background".to_string(), |c| c.to_string());
            let label = match r.label {
                Label::Positive => 1,
                Label::Negative => -1,
            };
            let rec = b.rec.map_or(String::new(), |v| format!("{v:.9e}"));
            let _ = writeln!(
                s,
                "{},{},{},{},{:.9e},{:.9e},{:.9e},{:.9e},{},{:.9e}",
                r.step, r.stage, class, label, b.discr, b.aux, b.div_a, b.div_b, rec, b.total
            );
        }
        s
    }

    /// Mean of `f` over the rows of each step, in step order, for rows of `stage`.
    pub fn per_step(&self, stage: u8, f: impl Fn(&LossRow) -> Option<f64>) -> Vec<f64> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.stage == stage) {
            let Some(v) = f(r) else { continue };
            match out.last_mut() {
                Some(last) if last.0 == r.step => {
                    last.1 += v;
                    last.2 += 1;
                }
                _ => out.push((r.step, v, 1)),
            }
        }
        out.into_iter().map(|(_, s, n)| s / n as f64).collect()
    }
}

/// Means over consecutive windows of `w` values (a trailing partial window is dropped).
pub fn window_means(values: &[f64], w: usize) -> Vec<f64> {
    values
        .chunks_exact(w.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// Lazily computed hypercolumns of a frozen network, indexed by image id.
pub struct HcCache {
    entries: Vec<Option<Tensor<f32>>>,
}

impl HcCache {
    pub fn new(len: usize) -> Self {
        HcCache {
            entries: vec![None; len],
        }
    }

    pub fn get(&mut self, net: &AnchorNet, ds: &Dataset, id: u64) -> Result<&Tensor<f32>> {
        let slot = &mut self.entries[id as usize];
        if slot.is_none() {
            *slot = Some(net.hypercolumn(&ds.instance(id).image)?);
        }
        Ok(slot.as_ref().unwrap())
    }
}

fn check_finite(step: usize, v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            detail: format!("{what} is {v}"),
        })
    }
}

fn mean_of(g: &mut Graph<f32>, parts: &[Var]) -> Result<Var> {
    let mut t = parts[0];
    for &p in &parts[1..] {
        t = g.add(t, p)?;
    }
    g.scale(t, 1.0 / parts.len() as f64)
}

/// Supervised classification over the N classes plus background, training
/// the backbone through global max pooling and a linear head.
pub fn warmup_backbone(
    net: &mut AnchorNet,
    ds: &Dataset,
    pools: &Pools,
    cfg: &WarmupConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let n = pools.positives.len();
    let feat = net.config.widths[2];
    let mut head_w = Tensor::<f32>::from_fn(&[n + 1, feat, 1, 1], |_| rng.gen_range(-0.1..0.1));
    let mut head_b = Tensor::<f32>::zeros(&[n + 1]);
    let mut params: Vec<Tensor<f32>> = (0..3)
        .flat_map(|s| [net.backbone.weights[s].clone(), net.backbone.biases[s].clone()])
        .collect();
    let mut opt = Sgd::new(
        SgdConfig {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: 0.0,
            clip_norm: Some(1e3),
        },
        &params.iter().chain([&head_w, &head_b]).collect::<Vec<_>>(),
    );
    let names: Vec<String> = (0..3)
        .flat_map(|s| [format!("backbone.{s}.weight"), format!("backbone.{s}.bias")])
        .chain(["head.weight".into(), "head.bias".into()])
        .collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let steps = cfg.samples.div_ceil(cfg.batch);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut g = Graph::<f32>::new();
        let pv: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let hw = g.param(head_w.clone());
        let hb = g.param(head_b.clone());
        let vars = crate::backbone::BackboneVars {
            weights: [pv[0], pv[2], pv[4]],
            biases: [pv[1], pv[3], pv[5]],
        };
        let mut per = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let target = rng.gen_range(0..=n);
            let id = if target == n {
                *pools.negatives.choose(rng).unwrap()
            } else {
                *pools.positives[target].choose(rng).unwrap()
            };
            let x = g.constant(ds.instance(id).image.clone());
            let taps = backbone_forward(&mut g, x, &vars)?;
            let pooled = g.global_pool(taps[2], Pool::Max)?;
            let pooled = g.reshape(pooled, &[feat, 1, 1])?;
            let z = g.conv2d(pooled, hw, 0)?;
            let z = g.channel_bias(z, hb)?;
            let z = g.reshape(z, &[n + 1])?;
            per.push(g.cross_entropy(z, target)?);
        }
        let loss = mean_of(&mut g, &per)?;
        let lv = g.value(loss).item() as f64;
        check_finite(step, lv, "warm-up loss")?;
        losses.push(lv);
        g.backward(loss)?;
        let grads: Vec<Tensor<f32>> = pv
            .iter()
            .chain([&hw, &hb])
            .map(|&v| g.grad(v).cloned().unwrap())
            .collect();
        let mut targets: Vec<&mut Tensor<f32>> = params.iter_mut().collect();
        targets.push(&mut head_w);
        targets.push(&mut head_b);
        opt.step(&mut targets, &grads.iter().collect::<Vec<_>>(), &[1.0; 8], &names)?;
    }
    for s in 0..3 {
        net.backbone.weights[s] = params[2 * s].clone();
        net.backbone.biases[s] = params[2 * s + 1].clone();
    }
    Ok(losses)
}

/// Fits one PCA per backbone stage on tap vectors from `ids`.
pub fn fit_projections(net: &mut AnchorNet, ds: &Dataset, ids: &[u64], rng: &mut impl Rng) -> Result<()> {
    let images: Vec<&Tensor<f32>> = ids.iter().map(|&i| &ds.instance(i).image).collect();
    let samples = sample_tap_descriptors(&net.backbone, &images, net.config.pca_samples, rng)?;
    net.pca = samples
        .iter()
        .map(|s| fit_pca(s, net.config.pca_dim).map(|p| p.cast()))
        .collect::<Result<Vec<_>>>()?;
    Ok(())
}

/// Trains the bank of `class` on cached hypercolumns with the backbone and
/// PCA frozen. On divergence the bank is restored to its last good value.
#[allow(clippy::too_many_arguments)]
pub fn train_stage1(
    net: &mut AnchorNet,
    class: usize,
    ds: &Dataset,
    pools: &Pools,
    cache: &mut HcCache,
    cfg: &Stage1Config,
    weights: &LossWeights,
    rng: &mut impl Rng,
    log: &mut LossLog,
) -> Result<()> {
    let mut bank = net.banks[class].clone();
    let mut opt = Sgd::new(
        SgdConfig {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            clip_norm: Some(cfg.clip_norm),
        },
        &[&bank],
    );
    let name = format!("bank.{class}");
    let steps = cfg.samples_per_class.div_ceil(cfg.batch);
    for step in 0..steps {
        let draws = sample_minibatch(Stage::One, class, pools, cfg.batch, rng)?;
        let mut g = Graph::<f32>::new();
        let b = g.param(bank.clone());
        let div_a = div_a_loss(&mut g, b)?;
        let mut totals = Vec::with_capacity(draws.len());
        for d in &draws {
            let hc = g.constant(cache.get(net, ds, d.id)?.clone());
            let (pre, maps) = response_maps(&mut g, hc, b)?;
            let terms = Terms {
                discr: discr_loss(&mut g, maps, d.label, Some(weights.discr_cap))?,
                aux: discr_aux_loss(&mut g, pre, d.label)?,
                div_a,
                div_b: div_b_loss(&mut g, maps, sigma_opt(weights.div_b_sigma))?,
                rec: None,
            };
            let (t, breakdown) = total_objective(&mut g, &terms, weights, Stage::One, d.label)?;
            check_finite(step, breakdown.total, "stage-1 loss")?;
            log.rows.push(LossRow {
                step,
                stage: 1,
                class: Some(class),
                label: d.label,
                breakdown,
            });
            totals.push(t);
        }
        let loss = mean_of(&mut g, &totals)?;
        g.backward(loss)?;
        let grad = g.grad(b).cloned().unwrap();
        opt.step(&mut [&mut bank], &[&grad], &[1.0], &[&name])?;
        if !bank.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("{name} became non-finite"),
            });
        }
        net.banks[class] = bank.clone();
    }
    Ok(())
}

fn sigma_opt(s: f64) -> Option<f64> {
    (s > 0.0).then_some(s)
}

/// Builds the stage-2 objective of one sample on `g` and returns its weighted
/// total and breakdown. `shared_div_a` is the bank-orthogonality term of all
/// banks (computed once per step).
#[allow(clippy::too_many_arguments)]
pub fn stage2_sample(
    g: &mut Graph<f32>,
    net: &AnchorNet,
    vars: &crate::model::NetVars,
    image: &Tensor<f32>,
    draw: &Draw,
    shared_div_a: Var,
    weights: &LossWeights,
    keep: &[bool],
    update_mean: Option<&mut crate::losses::RunningMean>,
) -> Result<(Var, Breakdown, bool)> {
    let x = g.constant(image.clone());
    let hc = net.hypercolumn_on(g, vars, x)?;
    let mut maps = Vec::with_capacity(net.classes());
    let mut pres = Vec::with_capacity(net.classes());
    for &b in &vars.banks {
        let (p, m) = response_maps(g, hc, b)?;
        pres.push(p);
        maps.push(m);
    }
    let mut discr = Vec::new();
    let mut aux = Vec::new();
    match (draw.label, draw.class) {
        (Label::Positive, Some(c)) => {
            discr.push(discr_loss(g, maps[c], Label::Positive, Some(weights.discr_cap))?);
            aux.push(discr_aux_loss(g, pres[c], Label::Positive)?);
        }
        _ => {
            for c in 0..maps.len() {
                discr.push(discr_loss(g, maps[c], Label::Negative, Some(weights.discr_cap))?);
                aux.push(discr_aux_loss(g, pres[c], Label::Negative)?);
            }
        }
    }
    let sum = |g: &mut Graph<f32>, v: &[Var]| -> Result<Var> {
        let mut t = v[0];
        for &p in &v[1..] {
            t = g.add(t, p)?;
        }
        Ok(t)
    };
    let discr = sum(g, &discr)?;
    let aux = sum(g, &aux)?;
    let div_b_parts = maps
        .iter()
        .map(|&m| div_b_loss(g, m, sigma_opt(weights.div_b_sigma)))
        .collect::<Result<Vec<_>>>()?;
    let div_b = sum(g, &div_b_parts)?;
    let mut degenerate = false;
    let rec = if draw.label == Label::Positive {
        let gamma = g.concat(&maps)?;
        let mean = match update_mean {
            Some(m) => {
                m.update(g.value(gamma))?;
                m.clone()
            }
            None => net.mean.clone(),
        };
        let r = reconstruction_loss(g, gamma, vars.agnostic, &mean, keep)?;
        degenerate = r.degenerate;
        Some(r.loss)
    } else {
        None
    };
    let terms = Terms {
        discr,
        aux,
        div_a: shared_div_a,
        div_b,
        rec,
    };
    let (t, b) = total_objective(g, &terms, weights, Stage::Two, draw.label)?;
    Ok((t, b, degenerate))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Stage2Report {
    pub degenerate_reconstructions: usize,
    pub steps: usize,
}

/// Joint fine-tuning: the agnostic bank at full learning rate, everything
/// else scaled by `lower_lr_scale`. On divergence all parameters are
/// restored to their last good values.
pub fn train_stage2(
    net: &mut AnchorNet,
    ds: &Dataset,
    pools: &Pools,
    cfg: &Stage2Config,
    weights: &LossWeights,
    rng: &mut impl Rng,
    log: &mut LossLog,
) -> Result<(Sgd<f32>, Stage2Report)> {
    net.mean.decay = cfg.mean_decay;
    let names = net.param_names();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let scales: Vec<f64> = names
        .iter()
        .map(|n| if n == "agnostic" { 1.0 } else { cfg.lower_lr_scale })
        .collect();
    let mut opt = Sgd::new(
        SgdConfig {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            clip_norm: Some(cfg.clip_norm),
        },
        &net.params(),
    );
    let channels = net.agnostic.shape()[1];
    let steps = cfg.samples.div_ceil(cfg.batch);
    let mut report = Stage2Report::default();
    for step in 0..steps {
        let good = net.clone();
        let draws = sample_minibatch(Stage::Two, 0, pools, cfg.batch, rng)?;
        let mut g = Graph::<f32>::new();
        let vars = net.register(&mut g, &|_| true);
        let mut div_a_parts = vars
            .banks
            .iter()
            .map(|&b| div_a_loss(&mut g, b))
            .collect::<Result<Vec<_>>>()?;
        div_a_parts.push(div_a_loss(&mut g, vars.agnostic)?);
        let mut div_a = div_a_parts[0];
        for &p in &div_a_parts[1..] {
            div_a = g.add(div_a, p)?;
        }
        let mut totals = Vec::with_capacity(draws.len());
        let mut mean = net.mean.clone();
        for d in &draws {
            let keep = sample_channel_mask(channels, cfg.noise_rate, rng);
            let image = &ds.instance(d.id).image;
            let (t, breakdown, degenerate) =
                stage2_sample(&mut g, net, &vars, image, d, div_a, weights, &keep, Some(&mut mean))?;
            report.degenerate_reconstructions += degenerate as usize;
            if let Err(e) = check_finite(step, breakdown.total, "stage-2 loss") {
                *net = good;
                return Err(e);
            }
            log.rows.push(LossRow {
                step,
                stage: 2,
                class: d.class,
                label: d.label,
                breakdown,
            });
            totals.push(t);
        }
        let loss = mean_of(&mut g, &totals)?;
        g.backward(loss)?;
        let all = vars.all();
        let grads: Vec<Tensor<f32>> = all.iter().map(|&v| g.grad(v).cloned().unwrap()).collect();
        net.mean = mean;
        let res = opt.step(
            &mut net.params_mut(),
            &grads.iter().collect::<Vec<_>>(),
            &scales,
            &name_refs,
        );
        if let Err(e) = res {
            *net = good;
            return Err(e);
        }
        report.steps += 1;
    }
    Ok((opt, report))
}

/// Trains a stand-alone 1×1 autoencoder bank on fixed heatmaps with channel
/// noise; returns the mean (unweighted) reconstruction loss before each step.
/// The loss ignores the bank's scale, so the bank is projected back to its
/// initial norm after every step.
#[allow(clippy::too_many_arguments)]
pub fn fit_autoencoder(
    bank: &mut Tensor<f32>,
    gammas: &[Tensor<f32>],
    mean: &RunningMean,
    noise_rate: f64,
    steps: usize,
    sgd: SgdConfig,
    weight: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if gammas.is_empty() {
        return Err(Error::EmptyPool("no heatmaps to reconstruct".into()));
    }
    let channels = bank.shape()[1];
    let mut opt = Sgd::new(sgd, &[&*bank]);
    let mut history = Vec::with_capacity(steps);
    let norm0 = bank.norm();
    for step in 0..steps {
        let mut g = Graph::<f32>::new();
        let b = g.param(bank.clone());
        let mut parts = Vec::with_capacity(gammas.len());
        for gamma in gammas {
            let keep = sample_channel_mask(channels, noise_rate, rng);
            let x = g.constant(gamma.clone());
            parts.push(reconstruction_loss(&mut g, x, b, mean, &keep)?.loss);
        }
        let avg = mean_of(&mut g, &parts)?;
        let lv = g.value(avg).item() as f64;
        check_finite(step, lv, "reconstruction loss")?;
        history.push(lv);
        let loss = g.scale(avg, weight)?;
        g.backward(loss)?;
        let grad = g.grad(b).cloned().unwrap();
        opt.step(&mut [bank], &[&grad], &[1.0], &["autoencoder"])?;
        let s = norm0 / bank.norm();
        bank.data_mut().iter_mut().for_each(|v| *v *= s);
    }
    Ok(history)
}

/// Mean reconstruction loss of `bank` over `gammas` with fixed keep-masks.
pub fn mean_reconstruction(
    bank: &Tensor<f32>,
    gammas: &[Tensor<f32>],
    mean: &RunningMean,
    masks: &[Vec<bool>],
) -> Result<f64> {
    let mut total = 0.0;
    for (gamma, keep) in gammas.iter().zip(masks) {
        let mut g = Graph::<f32>::new();
        let b = g.constant(bank.clone());
        let x = g.constant(gamma.clone());
        let r = reconstruction_loss(&mut g, x, b, mean, keep)?;
        total += g.value(r.loss).item() as f64;
    }
    Ok(total / gammas.len().max(1) as f64)
}

/// Everything produced by [`train_all`].
pub struct TrainOutcome {
    pub net: AnchorNet,
    /// Network right after stage 1 (before autoencoder fine-tuning).
    pub stage1_net: AnchorNet,
    pub optimizer: Sgd<f32>,
    pub log: LossLog,
    pub warmup_losses: Vec<f64>,
    pub stage2: Stage2Report,
}

/// Warm-up and PCA fitting shared by every variant of a run.
pub fn prepare(ds: &Dataset, cfg: &RunConfig) -> Result<(AnchorNet, Pools, Vec<f64>)> {
    let pools = Pools::from_dataset(ds, Split::Train)?;
    let mut init_rng = phase_rng(cfg.seed, 0);
    let mut net = AnchorNet::new(cfg.model, ds.config.size, ds.num_classes(), &mut init_rng);
    net.mean.decay = cfg.stage2.mean_decay;
    let warmup_losses = if cfg.warmup.samples > 0 {
        warmup_backbone(&mut net, ds, &pools, &cfg.warmup, &mut phase_rng(cfg.seed, 1))?
    } else {
        Vec::new()
    };
    let mut pca_ids = ds.ids(Split::Test, None);
    for c in 0..ds.num_classes() {
        pca_ids.extend(ds.ids(Split::Test, Some(c)));
    }
    fit_projections(&mut net, ds, &pca_ids, &mut phase_rng(cfg.seed, 2))?;
    Ok((net, pools, warmup_losses))
}

/// Stage 1 for every class (sequentially, each on its own RNG stream).
pub fn run_stage1(
    net: &mut AnchorNet,
    ds: &Dataset,
    pools: &Pools,
    cfg: &RunConfig,
    weights: &LossWeights,
    cache: &mut HcCache,
    log: &mut LossLog,
) -> Result<()> {
    for c in 0..net.classes() {
        let mut rng = phase_rng(cfg.seed, 10 + c as u64);
        train_stage1(net, c, ds, pools, cache, &cfg.stage1, weights, &mut rng, log)?;
    }
    Ok(())
}

pub fn train_all(ds: &Dataset, cfg: &RunConfig) -> Result<TrainOutcome> {
    let (mut net, pools, warmup_losses) = prepare(ds, cfg)?;
    let mut log = LossLog::default();
    let mut cache = HcCache::new(ds.instances.len());
    run_stage1(&mut net, ds, &pools, cfg, &cfg.loss, &mut cache, &mut log)?;
    let stage1_net = net.clone();
    let (optimizer, stage2) = train_stage2(
        &mut net,
        ds,
        &pools,
        &cfg.stage2,
        &cfg.loss,
        &mut phase_rng(cfg.seed, 100),
        &mut log,
    )?;
    Ok(TrainOutcome {
        net,
        stage1_net,
        optimizer,
        log,
        warmup_losses,
        stage2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pools() -> Pools {
        Pools {
            positives: (0..4).map(|c| (0..10).map(|i| c * 100 + i).collect()).collect(),
            negatives: (1000..1050).collect(),
        }
    }

    #[test]
    fn stage1_balance() {
        let mut rng = phase_rng(1, 0);
        let b = sample_minibatch(Stage::One, 2, &pools(), 10_000, &mut rng).unwrap();
        let pos = b.iter().filter(|d| d.label == Label::Positive).count() as f64 / 1e4;
        assert!((pos - 0.5).abs() < 0.02, "{pos}");
        assert!(b
            .iter()
            .filter(|d| d.label == Label::Positive)
            .all(|d| d.class == Some(2)));
    }

    #[test]
    fn stage2_class_balance() {
        let mut rng = phase_rng(2, 0);
        let b = sample_minibatch(Stage::Two, 0, &pools(), 10_000, &mut rng).unwrap();
        for c in 0..4 {
            let f = b.iter().filter(|d| d.class == Some(c)).count() as f64 / 1e4;
            assert!((f - 0.125).abs() < 0.01, "class {c}: {f}");
        }
    }

    #[test]
    fn batches_are_deterministic() {
        let a = sample_minibatch(Stage::Two, 0, &pools(), 64, &mut phase_rng(3, 5)).unwrap();
        let b = sample_minibatch(Stage::Two, 0, &pools(), 64, &mut phase_rng(3, 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_pools_are_errors() {
        let mut p = pools();
        p.negatives.clear();
        assert!(sample_minibatch(Stage::One, 0, &p, 4, &mut phase_rng(0, 0)).is_err());
        let mut p = pools();
        p.positives[1].clear();
        assert!(sample_minibatch(Stage::Two, 0, &p, 4, &mut phase_rng(0, 0)).is_err());
    }

    #[test]
    fn window_means_drop_partial() {
        assert_eq!(window_means(&[1.0, 3.0, 5.0, 7.0, 9.0], 2), vec![2.0, 6.0]);
    }
}
