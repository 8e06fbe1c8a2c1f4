//! End-to-end benchmark on the synthetic set: trains per seed, matches the
//! evaluation pairs with every descriptor variant, and scores the
//! quantitative acceptance criteria from the emitted metric rows.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{self, MetricRow};
use crate::losses::{pairwise_cosines, response_maps, sample_channel_mask, RunningMean};
use crate::matcher::{self, dsp_match, noflow, DescriptorField, DspParams, FlowField, Variant};
use crate::model::{random_orthonormal_bank, AnchorNet};
use crate::optim::SgdConfig;
use crate::suite::{ClosedForm, GradRow, MatcherSuite};
use crate::synth::{default_specs, generate_dataset, Dataset, EvalPair, Instance, PairKind, Split};
use crate::tensor::Tensor;
use crate::trainer::{
    fit_autoencoder, mean_reconstruction, phase_rng, prepare, run_stage1, train_stage2, HcCache, LossLog,
};

/// Settings of the multi-seed benchmark on top of a [`RunConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub run: RunConfig,
    pub seeds: usize,
    /// Diversity weight of the ablation run compared against zero.
    pub ablation_div: f64,
    pub ae_steps: usize,
    pub ae_batch: usize,
    pub ae_lr: f64,
    pub ae_momentum: f64,
    pub ae_threshold: f64,
    /// Positive test images per class for held-out reconstruction.
    pub heldout_per_class: usize,
    /// Positive test images per class for response cosines.
    pub cosine_images: usize,
    pub matcher_instances: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            run: desk_run_config(),
            seeds: 3,
            ablation_div: 1e5,
            ae_steps: 500,
            ae_batch: 16,
            ae_lr: 2.0,
            ae_momentum: 0.9,
            ae_threshold: 1e-3,
            heldout_per_class: 10,
            cosine_images: 20,
            matcher_instances: 100,
        }
    }
}

impl BenchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: BenchConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        let bad = |k: &str, why: &str| Err(Error::Config(format!("{k}: {why}")));
        if self.seeds == 0 {
            return bad("seeds", "must be > 0");
        }
        if self.ae_steps == 0 || self.ae_batch == 0 {
            return bad("ae_steps", "ae_steps and ae_batch must be > 0");
        }
        if !(self.ae_lr > 0.0) || !(0.0..1.0).contains(&self.ae_momentum) {
            return bad("ae_lr", "need ae_lr > 0 and 0 ≤ ae_momentum < 1");
        }
        if self.heldout_per_class == 0 || self.cosine_images < 2 {
            return bad("cosine_images", "need heldout_per_class ≥ 1 and cosine_images ≥ 2");
        }
        if !self.run.eval.alphas.contains(&0.1) || !self.run.eval.alphas.contains(&0.05) {
            return bad("run.eval.alphas", "must include 0.05 and 0.1");
        }
        Ok(())
    }
}

/// Run configuration of the benchmark: library defaults with the diversity
/// weight and matcher search range sized for 64×64 images.
pub fn desk_run_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.loss.div = 3.0;
    c.matcher.window = 15;
    c.matcher.stride = 4;
    c
}

fn row(method: &str, variant: &str, metric: &str, alpha: Option<f64>, value: f64) -> MetricRow {
    MetricRow {
        method: method.into(),
        variant: variant.into(),
        metric: metric.into(),
        alpha,
        value,
    }
}

fn div_label(w: f64) -> String {
    format!("w_div={w}")
}

/// Response maps of an arbitrary bank on a hypercolumn.
pub fn bank_maps(hc: &Tensor<f32>, bank: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let h = g.constant(hc.clone());
    let b = g.constant(bank.clone());
    let (_, maps) = response_maps(&mut g, h, b)?;
    Ok(g.value(maps).clone())
}

fn gmax_score(maps: &Tensor<f32>) -> f64 {
    (0..maps.shape()[0])
        .map(|k| maps.channel(k).iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64)
        .sum()
}

/// Held-out AUC and mean pairwise smoothed-response cosine per class.
fn stage1_rows(
    net: &AnchorNet,
    ds: &Dataset,
    cache: &mut HcCache,
    cfg: &BenchConfig,
    label: &str,
    rows: &mut Vec<MetricRow>,
) -> Result<()> {
    let negatives = ds.ids(Split::Test, None);
    let sigma = (cfg.run.loss.div_b_sigma > 0.0).then_some(cfg.run.loss.div_b_sigma);
    let mut cos_all = Vec::new();
    for c in 0..net.classes() {
        let pos_ids = ds.ids(Split::Test, Some(c));
        let mut pos = Vec::with_capacity(pos_ids.len());
        let mut cos = Vec::new();
        for (i, &id) in pos_ids.iter().enumerate() {
            let maps = net.class_maps(cache.get(net, ds, id)?, c)?.1;
            pos.push(gmax_score(&maps));
            if i < cfg.cosine_images {
                cos.extend(pairwise_cosines(&maps.cast(), sigma)?);
            }
        }
        let neg = negatives
            .iter()
            .map(|&id| Ok(gmax_score(&net.class_maps(cache.get(net, ds, id)?, c)?.1)))
            .collect::<Result<Vec<_>>>()?;
        let mean_cos = cos.iter().sum::<f64>() / cos.len().max(1) as f64;
        rows.push(row(
            "stage1",
            label,
            &format!("auc/{c}"),
            None,
            eval::roc_auc(&pos, &neg),
        ));
        rows.push(row("stage1", label, &format!("cosine/{c}"), None, mean_cos));
        cos_all.push(mean_cos);
    }
    rows.push(row(
        "stage1",
        label,
        "cosine",
        None,
        cos_all.iter().sum::<f64>() / cos_all.len() as f64,
    ));
    Ok(())
}

/// Descriptor fields of one image for the variants matched in the benchmark.
struct ImageFeatures {
    class: Option<DescriptorField>,
    agnostic: DescriptorField,
    hc: DescriptorField,
}

fn features(net: &AnchorNet, inst: &Instance, class: Option<usize>) -> Result<ImageFeatures> {
    let (_, h, w) = inst.image.dims3("features")?;
    let hc = net.hypercolumn(&inst.image)?;
    let gamma = net.stacked_maps(&hc)?;
    let class = match class {
        Some(c) => Some(DescriptorField::from_features(
            &net.class_maps(&hc, c)?.1,
            h,
            w,
            Variant::Class(c),
        )?),
        None => None,
    };
    Ok(ImageFeatures {
        class,
        agnostic: DescriptorField::from_features(&net.agnostic_maps(&gamma)?, h, w, Variant::Agnostic)?,
        hc: DescriptorField::from_features(&hc, h, w, Variant::Hypercolumn)?,
    })
}

fn pair_instances<'a>(ds: &'a Dataset, pairs: &[EvalPair]) -> Vec<(&'a Instance, &'a Instance)> {
    pairs.iter().map(|p| (ds.instance(p.src), ds.instance(p.dst))).collect()
}

fn transfer_rows(
    method: &str,
    variant: &str,
    pairs: &[(&Instance, &Instance)],
    flows: &[FlowField],
    alphas: &[f64],
    rows: &mut Vec<MetricRow>,
) -> Result<()> {
    for &a in alphas {
        rows.push(row(method, variant, "pck", Some(a), eval::pck(pairs, flows, a)?.mean));
    }
    rows.push(row(
        method,
        variant,
        "iou",
        None,
        eval::weighted_iou(pairs, flows)?.mean,
    ));
    Ok(())
}

fn pairs_ref(v: &[(DescriptorField, DescriptorField)]) -> Vec<(&DescriptorField, &DescriptorField)> {
    v.iter().map(|(a, b)| (a, b)).collect()
}

fn dsp_flows(fields: &[(&DescriptorField, &DescriptorField)], params: &DspParams) -> Result<Vec<FlowField>> {
    use rayon::prelude::*;
    fields
        .par_iter()
        .map(|(s, d)| dsp_match(s, d, params).map(|r| r.flow))
        .collect()
}

/// Matching metrics of the final network (and the stage-1 ablation banks on
/// intra-class pairs).
fn matching_rows(
    net: &AnchorNet,
    ablations: &[(String, AnchorNet)],
    ds: &Dataset,
    cache: &mut HcCache,
    cfg: &BenchConfig,
    rows: &mut Vec<MetricRow>,
) -> Result<()> {
    let params = DspParams::from(&cfg.run.matcher);
    let alphas = &cfg.run.eval.alphas;
    let (h, w) = (ds.config.size, ds.config.size);
    let class_of = |id: u64| ds.items[id as usize].class;

    let mut feats: BTreeMap<u64, ImageFeatures> = BTreeMap::new();
    for kind in [PairKind::Intra, PairKind::Cross] {
        for p in ds.pairs_of(kind) {
            for id in [p.src, p.dst] {
                if !feats.contains_key(&id) {
                    // intra pairs match with the pair's class bank
                    let class = if kind == PairKind::Intra { class_of(id) } else { None };
                    feats.insert(id, features(net, ds.instance(id), class)?);
                } else if kind == PairKind::Intra && feats[&id].class.is_none() {
                    feats.insert(id, features(net, ds.instance(id), class_of(id))?);
                }
            }
        }
    }

    let intra = ds.pairs_of(PairKind::Intra);
    let intra_inst = pair_instances(ds, &intra);
    let pick = |pairs: &[EvalPair],
                f: &dyn Fn(&ImageFeatures) -> &DescriptorField|
     -> Vec<(DescriptorField, DescriptorField)> {
        pairs
            .iter()
            .map(|p| (f(&feats[&p.src]).clone(), f(&feats[&p.dst]).clone()))
            .collect()
    };
    let class_f = pick(&intra, &|f| {
        f.class.as_ref().expect("intra features carry a class field")
    });
    let agn_f = pick(&intra, &|f| &f.agnostic);
    let hc_f = pick(&intra, &|f| &f.hc);
    for (variant, fields) in [("anet-class", &class_f), ("anet-agnostic", &agn_f), ("hc", &hc_f)] {
        let flows = dsp_flows(&pairs_ref(fields), &params)?;
        transfer_rows("dsp-intra", variant, &intra_inst, &flows, alphas, rows)?;
    }
    let zero: Vec<FlowField> = intra.iter().map(|_| noflow(h, w)).collect();
    transfer_rows("dsp-intra", "noflow", &intra_inst, &zero, alphas, rows)?;

    for (label, abl) in ablations {
        let fields = intra
            .iter()
            .map(|p| {
                let c = class_of(p.src).expect("intra pairs are positives");
                let one = |id: u64, cache: &mut HcCache| -> Result<DescriptorField> {
                    let maps = abl.class_maps(cache.get(abl, ds, id)?, c)?.1;
                    DescriptorField::from_features(&maps, h, w, Variant::Class(c))
                };
                Ok((one(p.src, cache)?, one(p.dst, cache)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let flows = dsp_flows(&pairs_ref(&fields), &params)?;
        transfer_rows(
            "dsp-intra",
            &format!("anet-class/{label}"),
            &intra_inst,
            &flows,
            alphas,
            rows,
        )?;
    }

    let boxes = matcher::grid_proposals(h, w, &cfg.run.matcher.proposal_scales, cfg.run.matcher.proposal_stride);
    for (variant, fields) in [("anet-agnostic", &agn_f), ("hc", &hc_f)] {
        let flows = fields
            .iter()
            .map(|(s, d)| {
                let r = matcher::nam_match(&matcher::proposals(s, &boxes)?, &matcher::proposals(d, &boxes)?, h, w)?;
                Ok(r.flow)
            })
            .collect::<Result<Vec<_>>>()?;
        transfer_rows("nam-intra", variant, &intra_inst, &flows, alphas, rows)?;
    }

    if let Some(p) = intra.first() {
        let f = &feats[&p.src].agnostic;
        let inst = ds.instance(p.src);
        let flow = dsp_match(f, f, &params)?.flow;
        transfer_rows("self-match", "anet-agnostic", &[(inst, inst)], &[flow], alphas, rows)?;
    }

    let cross = ds.pairs_of(PairKind::Cross);
    let cross_inst = pair_instances(ds, &cross);
    for (variant, fields) in [
        ("anet-agnostic", pick(&cross, &|f| &f.agnostic)),
        ("hc", pick(&cross, &|f| &f.hc)),
    ] {
        let flows = dsp_flows(&pairs_ref(&fields), &params)?;
        transfer_rows("dsp-cross", variant, &cross_inst, &flows, alphas, rows)?;
    }
    let zero: Vec<FlowField> = cross.iter().map(|_| noflow(h, w)).collect();
    transfer_rows("dsp-cross", "noflow", &cross_inst, &zero, alphas, rows)?;
    Ok(())
}

/// Share of each class's filters whose argmax dispersion beats the 5th
/// percentile of shuffled-weight filters.
fn anchoring_rows(net: &AnchorNet, ds: &Dataset, cfg: &BenchConfig, rows: &mut Vec<MetricRow>) -> Result<()> {
    let n_img = cfg.run.eval.anchoring_images;
    for c in 0..net.classes() {
        let ids: Vec<u64> = ds.ids(Split::Test, Some(c)).into_iter().take(n_img).collect();
        let hcs = ids
            .iter()
            .map(|&id| net.hypercolumn(&ds.instance(id).image))
            .collect::<Result<Vec<_>>>()?;
        let poses = ids
            .iter()
            .map(|&id| {
                ds.instance(id)
                    .annotation
                    .pose
                    .ok_or_else(|| Error::Invalid(format!("positive {id} has no pose")))
            })
            .collect::<Result<Vec<_>>>()?;
        let size = ds.config.size;
        let trained = eval::dispersion(
            &hcs.iter()
                .map(|hc| Ok(net.class_maps(hc, c)?.1))
                .collect::<Result<Vec<_>>>()?,
            &poses,
            size,
        )?;
        let mut rng = phase_rng(ds.seed, 200 + c as u64);
        let shuffled = eval::shuffled_filters(&net.banks[c], cfg.run.eval.permutation_draws, &mut rng);
        let random = eval::dispersion(
            &hcs.iter()
                .map(|hc| bank_maps(hc, &shuffled))
                .collect::<Result<Vec<_>>>()?,
            &poses,
            size,
        )?;
        let p5 = eval::percentile(&random, 0.05);
        let below = trained.iter().filter(|&&d| d < p5).count();
        let mut sorted = trained.clone();
        sorted.sort_by(f64::total_cmp);
        let variant = format!("class{c}");
        rows.push(row(
            "anchoring",
            &variant,
            "fraction_below_p5",
            None,
            below as f64 / trained.len() as f64,
        ));
        rows.push(row(
            "anchoring",
            &variant,
            "median_dispersion",
            None,
            sorted[sorted.len() / 2],
        ));
        rows.push(row("anchoring", &variant, "baseline_p5", None, p5));
    }
    Ok(())
}

/// Clean overcomplete autoencoder on a frozen heatmap batch, and held-out
/// noisy reconstruction of the trained versus a random orthonormal bank.
fn autoencoder_rows(
    stage1: &AnchorNet,
    net: &AnchorNet,
    ds: &Dataset,
    cache: &mut HcCache,
    cfg: &BenchConfig,
    rows: &mut Vec<MetricRow>,
) -> Result<()> {
    let classes = stage1.classes();
    let per = cfg.ae_batch.div_ceil(classes);
    let mut gammas = Vec::new();
    for c in 0..classes {
        for id in ds.ids(Split::Train, Some(c)).into_iter().take(per) {
            gammas.push(stage1.stacked_maps(cache.get(stage1, ds, id)?)?);
        }
    }
    gammas.truncate(cfg.ae_batch);
    let kn = gammas[0].shape()[0];
    let mut mean = RunningMean::new(kn, 0.0);
    for (ch, m) in mean.mean.iter_mut().enumerate() {
        let tot: f64 = gammas
            .iter()
            .map(|g| g.channel(ch).iter().map(|&v| v as f64).sum::<f64>())
            .sum();
        *m = tot / (gammas.len() * gammas[0].channel(0).len()) as f64;
    }
    mean.count = 1;
    let mut rng = phase_rng(ds.seed, 201);
    let normal = Normal::new(0.0, (2.0 / kn as f64).sqrt()).expect("valid std");
    let mut bank = Tensor::from_fn(&[kn, kn, 1, 1], |_| normal.sample(&mut rng) as f32);
    let s2 = &cfg.run.stage2;
    let sgd = SgdConfig {
        lr: cfg.ae_lr,
        momentum: cfg.ae_momentum,
        weight_decay: 0.0,
        clip_norm: None,
    };
    let hist = fit_autoencoder(&mut bank, &gammas, &mean, 0.0, cfg.ae_steps, sgd, 1.0, &mut rng)?;
    let final_loss = mean_reconstruction(&bank, &gammas, &mean, &vec![vec![true; kn]; gammas.len()])?;
    let reached = hist
        .iter()
        .chain(std::iter::once(&final_loss))
        .position(|&v| v < cfg.ae_threshold)
        .map_or(f64::INFINITY, |s| s as f64);
    rows.push(row(
        "autoencoder",
        "overcomplete-clean",
        "initial_lr",
        None,
        hist.first().copied().unwrap_or(f64::NAN),
    ));
    rows.push(row("autoencoder", "overcomplete-clean", "final_lr", None, final_loss));
    rows.push(row(
        "autoencoder",
        "overcomplete-clean",
        "steps_to_threshold",
        None,
        reached,
    ));

    let mut held = Vec::new();
    for c in 0..classes {
        for id in ds.ids(Split::Test, Some(c)).into_iter().take(cfg.heldout_per_class) {
            held.push(net.stacked_maps(&net.hypercolumn(&ds.instance(id).image)?)?);
        }
    }
    let mut mask_rng = phase_rng(ds.seed, 203);
    let masks: Vec<Vec<bool>> = held
        .iter()
        .map(|_| sample_channel_mask(kn, s2.noise_rate, &mut mask_rng))
        .collect();
    let random = random_orthonormal_bank(net.agnostic.shape()[0], kn, &mut phase_rng(ds.seed, 204));
    rows.push(row(
        "autoencoder",
        "trained",
        "heldout_lr",
        None,
        mean_reconstruction(&net.agnostic, &held, &net.mean, &masks)?,
    ));
    rows.push(row(
        "autoencoder",
        "random-orthonormal",
        "heldout_lr",
        None,
        mean_reconstruction(&random, &held, &net.mean, &masks)?,
    ));
    Ok(())
}

/// Everything one seed produces.
pub struct SeedRun {
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    pub log: LossLog,
    pub net: AnchorNet,
    pub timings: Vec<(String, f64)>,
}

/// Trains and evaluates one seed.
pub fn run_seed(cfg: &BenchConfig, seed: u64) -> Result<SeedRun> {
    let mut timings = Vec::new();
    let mut clock = std::time::Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        log::info!("seed {seed}: {name} done in {:.1}s", clock.elapsed().as_secs_f64());
        clock = std::time::Instant::now();
    };
    let mut run = cfg.run.clone();
    run.seed = seed;
    run.validate()?;
    let ds = generate_dataset(&default_specs(), &run.data, &run.synth, seed)?;
    lap("data", &mut timings);
    let (base, pools, _) = prepare(&ds, &run)?;
    lap("warm-up and PCA", &mut timings);
    let mut cache = HcCache::new(ds.instances.len());
    let mut log = LossLog::default();
    let mut rows = Vec::new();

    let mut net = base.clone();
    run_stage1(&mut net, &ds, &pools, &run, &run.loss, &mut cache, &mut log)?;
    stage1_rows(&net, &ds, &mut cache, cfg, &div_label(run.loss.div), &mut rows)?;
    lap("stage 1", &mut timings);

    let mut ablations = Vec::new();
    for w in [cfg.ablation_div, 0.0] {
        let mut abl = base.clone();
        let mut weights = run.loss;
        weights.div = w;
        run_stage1(
            &mut abl,
            &ds,
            &pools,
            &run,
            &weights,
            &mut cache,
            &mut LossLog::default(),
        )?;
        stage1_rows(&abl, &ds, &mut cache, cfg, &div_label(w), &mut rows)?;
        ablations.push((div_label(w), abl));
    }
    lap("stage-1 ablations", &mut timings);

    let stage1_net = net.clone();
    let (_, report) = train_stage2(
        &mut net,
        &ds,
        &pools,
        &run.stage2,
        &run.loss,
        &mut phase_rng(seed, 100),
        &mut log,
    )?;
    rows.push(row(
        "stage2",
        "-",
        "degenerate_reconstructions",
        None,
        report.degenerate_reconstructions as f64,
    ));
    lap("stage 2", &mut timings);

    matching_rows(&net, &ablations, &ds, &mut cache, cfg, &mut rows)?;
    lap("matching", &mut timings);
    anchoring_rows(&net, &ds, cfg, &mut rows)?;
    autoencoder_rows(&stage1_net, &net, &ds, &mut cache, cfg, &mut rows)?;
    lap("anchoring and autoencoder", &mut timings);
    Ok(SeedRun {
        seed,
        rows,
        log,
        net,
        timings,
    })
}

pub fn seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base + i).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub id: u8,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn lookup(rows: &[MetricRow], method: &str, variant: &str, metric: &str, alpha: Option<f64>) -> Result<f64> {
    rows.iter()
        .find(|r| r.method == method && r.variant == variant && r.metric == metric && r.alpha == alpha)
        .map(|r| r.value)
        .ok_or_else(|| Error::Invalid(format!("missing metric {method}/{variant}/{metric}/{alpha:?}")))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scores the trained-model criteria from per-seed metric rows.
pub fn verdicts(runs: &[(u64, Vec<MetricRow>)], cfg: &BenchConfig) -> Result<Vec<Verdict>> {
    let classes = default_specs().len();
    let per_seed =
        |f: &dyn Fn(&[MetricRow]) -> Result<f64>| -> Result<Vec<f64>> { runs.iter().map(|(_, r)| f(r)).collect() };
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    let bench_w = div_label(cfg.run.loss.div);
    let abl_w = div_label(cfg.ablation_div);
    let zero_w = div_label(0.0);
    let a = Some(0.1);
    let mut out = Vec::new();

    let min_auc = per_seed(&|r| {
        (0..classes)
            .map(|c| lookup(r, "stage1", &bench_w, &format!("auc/{c}"), None))
            .try_fold(f64::INFINITY, |m, v| v.map(|v| m.min(v)))
    })?;
    out.push(Verdict {
        id: 4,
        name: "discriminability",
        pass: min_auc.iter().all(|&v| v >= 0.9),
        detail: format!("min per-class AUC per seed {} (need ≥ 0.9)", fmt(&min_auc)),
    });

    let cos_div = per_seed(&|r| lookup(r, "stage1", &abl_w, "cosine", None))?;
    let cos_zero = per_seed(&|r| lookup(r, "stage1", &zero_w, "cosine", None))?;
    let gain = per_seed(&|r| {
        Ok(lookup(r, "dsp-intra", &format!("anet-class/{abl_w}"), "pck", a)?
            - lookup(r, "dsp-intra", &format!("anet-class/{zero_w}"), "pck", a)?)
    })?;
    let cos_ok = median(&cos_div) < median(&cos_zero);
    out.push(Verdict {
        id: 5,
        name: "diversity ablation",
        pass: cos_ok && median(&gain) >= 0.02,
        detail: format!(
            "cosine {abl_w} {} vs {zero_w} {}; PCK gain {} median {:.3} (need ≥ 0.02)",
            fmt(&cos_div),
            fmt(&cos_zero),
            fmt(&gain),
            median(&gain)
        ),
    });

    let med = |variant: &str, method: &str| -> Result<f64> {
        Ok(median(&per_seed(&|r| lookup(r, method, variant, "pck", a))?))
    };
    let (cls, agn, hc, nof) = (
        med("anet-class", "dsp-intra")?,
        med("anet-agnostic", "dsp-intra")?,
        med("hc", "dsp-intra")?,
        med("noflow", "dsp-intra")?,
    );
    out.push(Verdict {
        id: 6,
        name: "feature ordering",
        pass: cls >= agn && agn >= hc && hc >= nof && agn - nof >= 0.05,
        detail: format!("median PCK@0.1 class {cls:.3} ≥ agnostic {agn:.3} ≥ hc {hc:.3} ≥ noflow {nof:.3}; agnostic − noflow {:.3} (need ≥ 0.05)", agn - nof),
    });

    let cross =
        per_seed(
            &|r| Ok(lookup(r, "dsp-cross", "anet-agnostic", "pck", a)? - lookup(r, "dsp-cross", "hc", "pck", a)?),
        )?;
    out.push(Verdict {
        id: 7,
        name: "cross-class generalization",
        pass: median(&cross) >= 0.03,
        detail: format!(
            "agnostic − hc cross PCK@0.1 {} median {:.3} (need ≥ 0.03)",
            fmt(&cross),
            median(&cross)
        ),
    });

    let steps = per_seed(&|r| lookup(r, "autoencoder", "overcomplete-clean", "steps_to_threshold", None))?;
    let trained = per_seed(&|r| lookup(r, "autoencoder", "trained", "heldout_lr", None))?;
    let random = per_seed(&|r| lookup(r, "autoencoder", "random-orthonormal", "heldout_lr", None))?;
    out.push(Verdict {
        id: 8,
        name: "autoencoder sanity",
        pass: steps.iter().all(|&s| s <= cfg.ae_steps as f64) && trained.iter().zip(&random).all(|(t, r)| t < r),
        detail: format!(
            "steps to L_R < {:e}: {}; held-out L_R trained {} vs random {}",
            cfg.ae_threshold,
            fmt(&steps),
            fmt(&trained),
            fmt(&random)
        ),
    });

    let frac = per_seed(&|r| {
        (0..classes)
            .map(|c| lookup(r, "anchoring", &format!("class{c}"), "fraction_below_p5", None))
            .try_fold(f64::INFINITY, |m, v| v.map(|v| m.min(v)))
    })?;
    out.push(Verdict {
        id: 9,
        name: "anchoring consistency",
        pass: frac.iter().all(|&f| f >= 0.5),
        detail: format!(
            "min per-class share of filters below the 5th percentile per seed {} (need ≥ 0.5)",
            fmt(&frac)
        ),
    });
    Ok(out)
}

/// Scores the property-suite criteria; `self_pck` holds each seed's
/// self-match PCK at α = 0.05.
pub fn suite_verdicts(
    grads: &[GradRow],
    grad_secs: f64,
    closed: &[ClosedForm],
    matcher: &MatcherSuite,
    self_pck: &[f64],
) -> Vec<Verdict> {
    let worst = grads.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = grads.iter().filter(|r| !r.passes()).map(|r| r.op.as_str()).collect();
    let min_shapes = grads
        .iter()
        .fold(BTreeMap::<&str, usize>::new(), |mut m, r| {
            *m.entry(r.op.as_str()).or_default() += 1;
            m
        })
        .into_values()
        .min()
        .unwrap_or(0);
    let closed_bad: Vec<&str> = closed.iter().filter(|c| !c.passes(1e-9)).map(|c| c.name).collect();
    vec![
        Verdict {
            id: 1,
            name: "gradient integrity",
            pass: failing.is_empty() && min_shapes >= 3 && grad_secs < 120.0,
            detail: format!(
                "{} checks, ≥{min_shapes} shapes per op, max rel. error {worst:.2e}, {grad_secs:.1}s; failing {failing:?}",
                grads.len()
            ),
        },
        Verdict {
            id: 2,
            name: "loss closed forms",
            pass: closed_bad.is_empty(),
            detail: format!("{} closed forms; failing {closed_bad:?}", closed.len()),
        },
        Verdict {
            id: 3,
            name: "matcher optimality",
            pass: matcher.passes() && matcher.dyadic >= 50 && self_pck.iter().all(|&p| p == 1.0),
            detail: format!(
                "{}/{} exact, real-valued gap {:.1e} over {}, self-match zero flow {}, self-match PCK@0.05 {self_pck:?}",
                matcher.dyadic_exact, matcher.dyadic, matcher.real_max_gap, matcher.real, matcher.self_match_zero_flow
            ),
        },
    ]
}

/// Self-match PCK at α = 0.05 of one seed.
pub fn self_match_pck(rows: &[MetricRow]) -> Result<f64> {
    lookup(rows, "self-match", "anet-agnostic", "pck", Some(0.05))
}

pub fn metrics_file(seed: u64) -> String {
    format!("metrics_seed{seed}.csv")
}

/// Writes one metric CSV per seed and reads them back in seed order.
pub fn write_metrics(dir: &Path, runs: &[(u64, Vec<MetricRow>)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (seed, rows) in runs {
        let path = dir.join(metrics_file(*seed));
        std::fs::write(&path, eval::to_csv(rows)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn read_metrics(dir: &Path, seeds: &[u64]) -> Result<Vec<(u64, Vec<MetricRow>)>> {
    seeds
        .iter()
        .map(|&s| {
            let path = dir.join(metrics_file(s));
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Ok((s, eval::parse_csv(&text)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn desk_config_is_valid() {
        let c = BenchConfig::default();
        c.run.validate().unwrap();
        assert_eq!(c.run.loss.div, 3.0);
        assert_eq!(seeds(7, 3), vec![7, 8, 9]);
    }

    fn synthetic_rows(gain: f64) -> Vec<MetricRow> {
        let cfg = BenchConfig::default();
        let mut r = Vec::new();
        for c in 0..4 {
            r.push(row(
                "stage1",
                &div_label(cfg.run.loss.div),
                &format!("auc/{c}"),
                None,
                0.95,
            ));
            r.push(row("anchoring", &format!("class{c}"), "fraction_below_p5", None, 0.5));
        }
        r.push(row("stage1", &div_label(1e5), "cosine", None, 0.1));
        r.push(row("stage1", &div_label(0.0), "cosine", None, 0.9));
        r.push(row(
            "dsp-intra",
            "anet-class/w_div=100000",
            "pck",
            Some(0.1),
            0.5 + gain,
        ));
        r.push(row("dsp-intra", "anet-class/w_div=0", "pck", Some(0.1), 0.5));
        for (v, p) in [
            ("anet-class", 0.6),
            ("anet-agnostic", 0.5),
            ("hc", 0.4),
            ("noflow", 0.3),
        ] {
            r.push(row("dsp-intra", v, "pck", Some(0.1), p));
        }
        r.push(row("dsp-cross", "anet-agnostic", "pck", Some(0.1), 0.5));
        r.push(row("dsp-cross", "hc", "pck", Some(0.1), 0.4));
        r.push(row(
            "autoencoder",
            "overcomplete-clean",
            "steps_to_threshold",
            None,
            120.0,
        ));
        r.push(row("autoencoder", "trained", "heldout_lr", None, 0.2));
        r.push(row("autoencoder", "random-orthonormal", "heldout_lr", None, 0.5));
        r
    }

    #[test]
    fn verdicts_follow_thresholds() {
        let cfg = BenchConfig::default();
        let runs: Vec<_> = [7, 8, 9].iter().map(|&s| (s, synthetic_rows(0.05))).collect();
        let v = verdicts(&runs, &cfg).unwrap();
        assert_eq!(v.iter().map(|v| v.id).collect::<Vec<_>>(), vec![4, 5, 6, 7, 8, 9]);
        assert!(v.iter().all(|v| v.pass), "{v:?}");
        let runs: Vec<_> = [(7, 0.05), (8, 0.01), (9, 0.0)]
            .iter()
            .map(|&(s, g)| (s, synthetic_rows(g)))
            .collect();
        let v = verdicts(&runs, &cfg).unwrap();
        assert!(!v[1].pass);
        assert!(verdicts(&[(7, Vec::new())], &cfg).is_err());
    }
}
