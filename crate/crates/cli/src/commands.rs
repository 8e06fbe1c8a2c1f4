use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anchornet::config::RunConfig;
use anchornet::eval::{self, MetricRow};
use anchornet::matcher::{
    self, dsp_match, extract_dense_descriptors, noflow, DescriptorField, DspParams, FlowField, Variant,
};
use anchornet::model::Checkpoint;
use anchornet::pipeline::{self, BenchConfig, Verdict};
use anchornet::suite;
use anchornet::synth::{
    default_specs, generate_dataset, read_dataset, write_dataset, Dataset, EvalPair, Instance, PairKind,
};
use anchornet::trainer::train_all;
use anchornet::{tns, Error, Result};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{ChecksFailed, Failure, Global, Method, Pairs};

type CmdResult = std::result::Result<(), Failure>;

fn run_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(g: &Global) -> Result<PathBuf> {
    let dir = g
        .out
        .clone()
        .ok_or_else(|| Error::Invalid("--out is required".into()))?;
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

fn kind(p: Pairs) -> PairKind {
    match p {
        Pairs::Intra => PairKind::Intra,
        Pairs::Cross => PairKind::Cross,
    }
}

fn pairs_str(p: Pairs) -> &'static str {
    match p {
        Pairs::Intra => "intra",
        Pairs::Cross => "cross",
    }
}

fn desc_file(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("desc_{id:06}.tns"))
}

fn flow_file(dir: &Path, p: &EvalPair) -> PathBuf {
    dir.join(format!("flow_{:06}_{:06}.tns", p.src, p.dst))
}

pub fn gen_data(g: &Global) -> CmdResult {
    let cfg = run_config(g)?;
    let out = out_dir(g)?;
    let ds = generate_dataset(&default_specs(), &cfg.data, &cfg.synth, cfg.seed)?;
    write_dataset(&ds, &out)?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    info!(
        "wrote {} images and {} pairs to {}",
        ds.instances.len(),
        ds.pairs.len(),
        out.display()
    );
    Ok(())
}

pub fn train(g: &Global, data: &Path) -> CmdResult {
    let cfg = run_config(g)?;
    let out = out_dir(g)?;
    let ds = read_dataset(data)?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    let t = Instant::now();
    let o = train_all(&ds, &cfg)?;
    info!("trained in {:.1}s", t.elapsed().as_secs_f64());
    let hash = cfg.hash();
    Checkpoint {
        net: o.stage1_net,
        velocities: Vec::new(),
        steps: 0,
        config_hash: hash,
    }
    .save(&out.join("stage1.ckpt"))?;
    Checkpoint {
        net: o.net,
        velocities: o.optimizer.velocities,
        steps: o.optimizer.steps,
        config_hash: hash,
    }
    .save(&out.join("model.ckpt"))?;
    write(&out.join("losses.csv"), o.log.to_csv())?;
    let mut warm = String::from("step,loss\n");
    for (i, l) in o.warmup_losses.iter().enumerate() {
        warm.push_str(&format!("{i},{l:.6}\n"));
    }
    write(&out.join("warmup.csv"), warm)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct DescriptorMeta {
    variant: String,
    class: Option<usize>,
    pairs: String,
    ids: Vec<u64>,
}

fn pair_ids(pairs: &[EvalPair]) -> Vec<u64> {
    let ids: BTreeSet<u64> = pairs.iter().flat_map(|p| [p.src, p.dst]).collect();
    ids.into_iter().collect()
}

fn resolve_variant(ds: &Dataset, name: &str, class: Option<usize>, id: u64) -> Result<Variant> {
    if name == "anet-class" {
        return match class.or(ds.items[id as usize].class) {
            Some(c) if c < ds.num_classes() => Ok(Variant::Class(c)),
            Some(c) => Err(Error::Invalid(format!("--class {c} out of range"))),
            None => Err(Error::Invalid(format!(
                "image {id} is a background; anet-class needs --class"
            ))),
        };
    }
    Variant::parse(name)
}

pub fn extract(
    g: &Global,
    data: &Path,
    checkpoint: &Path,
    variant: &str,
    class: Option<usize>,
    pairs: Pairs,
) -> CmdResult {
    let out = out_dir(g)?;
    let ds = read_dataset(data)?;
    let net = Checkpoint::load(checkpoint, None)?.net;
    let ids = pair_ids(&ds.pairs_of(kind(pairs)));
    let variants = ids
        .iter()
        .map(|&id| resolve_variant(&ds, variant, class, id))
        .collect::<Result<Vec<_>>>()?;
    let fields = ids
        .par_iter()
        .zip(&variants)
        .map(|(&id, &v)| extract_dense_descriptors(&net, &ds.instance(id).image, v))
        .collect::<Result<Vec<_>>>()?;
    for (&id, f) in ids.iter().zip(&fields) {
        tns::save(desc_file(&out, id), &f.data)?;
    }
    let meta = DescriptorMeta {
        variant: variant.into(),
        class,
        pairs: pairs_str(pairs).into(),
        ids,
    };
    write(
        &out.join("descriptors.toml"),
        toml::to_string(&meta).expect("serializes"),
    )?;
    info!("wrote {} descriptor fields to {}", fields.len(), out.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct FlowMeta {
    method: String,
    variant: String,
    pairs: String,
    #[serde(default)]
    flows: Vec<FlowEntry>,
}

#[derive(Serialize, Deserialize)]
struct FlowEntry {
    src: u64,
    dst: u64,
    /// Matching energy; absent for noflow.
    #[serde(skip_serializing_if = "Option::is_none")]
    energy: Option<f64>,
}

fn load_field(dir: &Path, id: u64, variant: Variant) -> Result<DescriptorField> {
    Ok(DescriptorField {
        data: tns::load(desc_file(dir, id))?,
        variant,
    })
}

pub fn match_pairs(g: &Global, data: &Path, descriptors: Option<&Path>, method: Method, pairs: Pairs) -> CmdResult {
    let cfg = run_config(g)?;
    let out = out_dir(g)?;
    let ds = read_dataset(data)?;
    let list = ds.pairs_of(kind(pairs));
    let (h, w) = (ds.config.size, ds.config.size);
    let (flows, variant) = match method {
        Method::Noflow => (list.iter().map(|_| noflow(h, w)).collect::<Vec<_>>(), "-".to_string()),
        Method::Dsp | Method::Nam => {
            let dir = descriptors.ok_or_else(|| Error::Invalid("--descriptors is required for dsp and nam".into()))?;
            let meta: DescriptorMeta = read_toml(&dir.join("descriptors.toml"))?;
            let field = |id: u64| -> Result<DescriptorField> {
                load_field(dir, id, resolve_variant(&ds, &meta.variant, meta.class, id)?)
            };
            let params = DspParams::from(&cfg.matcher);
            let boxes = matcher::grid_proposals(h, w, &cfg.matcher.proposal_scales, cfg.matcher.proposal_stride);
            let flows = list
                .par_iter()
                .map(|p| {
                    let (s, d) = (field(p.src)?, field(p.dst)?);
                    match method {
                        Method::Dsp => dsp_match(&s, &d, &params).map(|r| r.flow),
                        _ => {
                            matcher::nam_match(&matcher::proposals(&s, &boxes)?, &matcher::proposals(&d, &boxes)?, h, w)
                                .map(|r| r.flow)
                        }
                    }
                })
                .collect::<Result<Vec<FlowField>>>()?;
            (flows, meta.variant)
        }
    };
    for (p, f) in list.iter().zip(&flows) {
        tns::save(flow_file(&out, p), &f.flow)?;
    }
    let method = match method {
        Method::Dsp => "dsp",
        Method::Nam => "nam",
        Method::Noflow => "noflow",
    };
    let meta = FlowMeta {
        method: method.into(),
        variant,
        pairs: pairs_str(pairs).into(),
        flows: list
            .iter()
            .zip(&flows)
            .map(|(p, f)| FlowEntry {
                src: p.src,
                dst: p.dst,
                energy: f.energy,
            })
            .collect(),
    };
    write(&out.join("flows.toml"), toml::to_string(&meta).expect("serializes"))?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    info!("wrote {} flows to {}", flows.len(), out.display());
    Ok(())
}

pub fn eval(
    g: &Global,
    data: &Path,
    flows_dir: &Path,
    alphas: &[f64],
    checkpoint: Option<&Path>,
    heatmaps: usize,
) -> CmdResult {
    let cfg = run_config(g)?;
    let out = out_dir(g)?;
    let ds = read_dataset(data)?;
    let meta: FlowMeta = read_toml(&flows_dir.join("flows.toml"))?;
    let kind = match meta.pairs.as_str() {
        "intra" => PairKind::Intra,
        "cross" => PairKind::Cross,
        other => return Err(Error::Config(format!("flows.toml: unknown pair list `{other}`")).into()),
    };
    let list = ds.pairs_of(kind);
    let flows = list
        .iter()
        .map(|p| {
            Ok(FlowField {
                flow: tns::load(flow_file(flows_dir, p))?,
                energy: meta
                    .flows
                    .iter()
                    .find(|e| e.src == p.src && e.dst == p.dst)
                    .and_then(|e| e.energy),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let inst: Vec<(&Instance, &Instance)> = list.iter().map(|p| (ds.instance(p.src), ds.instance(p.dst))).collect();
    let alphas = if alphas.is_empty() {
        cfg.eval.alphas.clone()
    } else {
        alphas.to_vec()
    };
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
        return Err(Error::Invalid(format!("--alpha {a} must lie in (0, 1]")).into());
    }
    let method = format!("{}-{}", meta.method, meta.pairs);
    let mut rows = Vec::new();
    let mut per_pair = Vec::new();
    for &a in &alphas {
        let r = eval::pck(&inst, &flows, a)?;
        rows.push(MetricRow {
            method: method.clone(),
            variant: meta.variant.clone(),
            metric: "pck".into(),
            alpha: Some(a),
            value: r.mean,
        });
        per_pair.push(r.per_pair);
    }
    let iou = eval::weighted_iou(&inst, &flows)?;
    rows.push(MetricRow {
        method: method.clone(),
        variant: meta.variant.clone(),
        metric: "iou".into(),
        alpha: None,
        value: iou.mean,
    });
    write(&out.join("eval.csv"), eval::to_csv(&rows))?;

    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    let mut text = String::from("src,dst");
    for a in &alphas {
        text.push_str(&format!(",pck@{a}"));
    }
    text.push_str(",iou\n");
    for (i, p) in list.iter().enumerate() {
        text.push_str(&format!("{},{}", p.src, p.dst));
        for pp in &per_pair {
            text.push_str(&format!(",{}", fmt(pp[i])));
        }
        text.push_str(&format!(",{}\n", fmt(iou.per_pair[i])));
    }
    write(&out.join("pairs.csv"), text)?;
    let mut parts = String::from("part,iou\n");
    for (name, v) in &iou.per_part {
        parts.push_str(&format!("{name},{v:.6}\n"));
    }
    write(&out.join("parts.csv"), parts)?;

    if heatmaps > 0 {
        let ck = checkpoint.ok_or_else(|| Error::Invalid("--heatmaps needs --checkpoint".into()))?;
        let net = Checkpoint::load(ck, None)?.net;
        let dir = out.join("heatmaps");
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let srcs: BTreeSet<u64> = list.iter().map(|p| p.src).collect();
        for id in srcs
            .into_iter()
            .filter(|&id| ds.items[id as usize].class.is_some())
            .take(heatmaps)
        {
            let c = ds.items[id as usize].class.expect("filtered to positives");
            let maps = net.class_maps(&net.hypercolumn(&ds.instance(id).image)?, c)?.1;
            let s = maps.shape().to_vec();
            for k in 0..s[0] {
                eval::write_pgm(
                    maps.channel(k),
                    s[1],
                    s[2],
                    &dir.join(format!("{id:06}_class{c}_f{k}.pgm")),
                )?;
            }
        }
    }
    for r in &rows {
        println!(
            "{} {} {}{} {:.4}",
            r.method,
            r.variant,
            r.metric,
            r.alpha.map_or(String::new(), |a| format!("@{a}")),
            r.value
        );
    }
    Ok(())
}

fn grad_lines(rows: &[suite::GradRow], closed: &[suite::ClosedForm]) -> (String, bool) {
    let mut text = format!("{:<28} {:<24} {:>12}  result\n", "op", "shapes", "max rel err");
    let mut ok = true;
    for r in rows {
        ok &= r.passes();
        text.push_str(&format!(
            "{:<28} {:<24} {:>12.3e}  {}\n",
            r.op,
            r.shapes,
            r.max_rel_error,
            if r.passes() { "pass" } else { "FAIL" }
        ));
    }
    for c in closed {
        let pass = c.passes(1e-9);
        ok &= pass;
        text.push_str(&format!(
            "{:<28} {:<24} {:>12.3e}  {}\n",
            c.name,
            format!("= {}", c.expected),
            (c.value - c.expected).abs(),
            if pass { "pass" } else { "FAIL" }
        ));
    }
    (text, ok)
}

pub fn gradcheck(g: &Global) -> CmdResult {
    let seed = g.seed.unwrap_or(7);
    let rows = suite::gradient_suite(seed)?;
    let closed = suite::closed_form_suite()?;
    let (text, ok) = grad_lines(&rows, &closed);
    print!("{text}");
    if let Some(dir) = &g.out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write(&dir.join("gradcheck.txt"), &text)?;
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Checks(ChecksFailed(
            "gradient or closed-form check failed".into(),
        )))
    }
}

fn verdict_line(v: &Verdict) -> String {
    format!(
        "criterion {:>2} {:<28} {}  {}",
        v.id,
        v.name,
        if v.pass { "PASS" } else { "FAIL" },
        v.detail
    )
}

pub fn bench(g: &Global, compare: Option<&Path>) -> CmdResult {
    let mut cfg = match &g.config {
        Some(p) => BenchConfig::load(p)?,
        None => BenchConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.run.seed = s;
    }
    cfg.validate()?;
    let out = out_dir(g)?;
    let base = cfg.run.seed;
    write(&out.join("bench.toml"), cfg.to_toml())?;

    let t = Instant::now();
    let grads = suite::gradient_suite(base)?;
    let grad_secs = t.elapsed().as_secs_f64();
    let closed = suite::closed_form_suite()?;
    let (text, _) = grad_lines(&grads, &closed);
    write(&out.join("gradcheck.txt"), text)?;
    let msuite = suite::matcher_suite(cfg.matcher_instances, base)?;
    info!("property suites done");

    let mut runs = Vec::new();
    let mut timings = String::from("seed,phase,seconds\n");
    for seed in pipeline::seeds(base, cfg.seeds) {
        let r = pipeline::run_seed(&cfg, seed)?;
        pipeline::write_metrics(&out, &[(seed, r.rows.clone())])?;
        write(&out.join(format!("losses_seed{seed}.csv")), r.log.to_csv())?;
        for (phase, s) in &r.timings {
            timings.push_str(&format!("{seed},{phase},{s:.1}\n"));
        }
        runs.push((seed, r.rows));
    }
    write(&out.join("timings.csv"), timings)?;

    let self_pck = runs
        .iter()
        .map(|(_, rows)| pipeline::self_match_pck(rows))
        .collect::<Result<Vec<_>>>()?;
    let mut verdicts = pipeline::suite_verdicts(&grads, grad_secs, &closed, &msuite, &self_pck);
    verdicts.extend(pipeline::verdicts(&runs, &cfg)?);
    let mut lines: Vec<String> = verdicts.iter().map(verdict_line).collect();
    match compare {
        Some(other) => {
            let v = determinism(&out, other, &runs)?;
            lines.push(verdict_line(&v));
            verdicts.push(v);
        }
        None => lines.push(format!(
            "criterion {:>2} {:<28} SKIP  rerun with --compare <previous out dir>",
            10, "determinism"
        )),
    }

    let mut summary = String::new();
    for line in &lines {
        println!("{line}");
        summary.push_str(line);
        summary.push('\n');
    }
    write(&out.join("summary.txt"), summary)?;
    let failed: Vec<u8> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Checks(ChecksFailed(format!("criteria {failed:?} failed"))))
    }
}

fn determinism(out: &Path, other: &Path, runs: &[(u64, Vec<MetricRow>)]) -> Result<Verdict> {
    let mut differing = Vec::new();
    for (seed, _) in runs {
        let name = pipeline::metrics_file(*seed);
        let a = fs::read(out.join(&name)).map_err(|e| io_err(&out.join(&name), e))?;
        let b = fs::read(other.join(&name)).map_err(|e| io_err(&other.join(&name), e))?;
        if a != b {
            differing.push(name);
        }
    }
    Ok(Verdict {
        id: 10,
        name: "determinism",
        pass: differing.is_empty(),
        detail: if differing.is_empty() {
            format!("{} metric files identical to {}", runs.len(), other.display())
        } else {
            format!("differing files {differing:?}")
        },
    })
}
