//! Self-contained verification suites: finite-difference checks of every
//! differentiable op and the composite objective, loss closed forms, and
//! exhaustive-search checks of the pyramid matcher.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NormScope, Pool, Var};
use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::losses::{
    discr_aux_loss, discr_loss, div_a_loss, div_b_loss, reconstruction_loss, response_maps, total_objective, Label,
    LossWeights, RunningMean, Stage, Terms,
};
use crate::matcher::{
    assignment_energy, cell_unaries, dsp_match, label_window, pixel_costs, DescriptorField, DspParams, Pyramid, Variant,
};
use crate::tensor::Tensor;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradRow {
    pub op: String,
    pub shapes: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradRow {
    pub fn passes(&self) -> bool {
        self.max_rel_error < GRAD_TOL
    }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Contracts `y` with fixed random weights so every output element matters.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w = rand_tensor(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

struct Case {
    op: &'static str,
    shapes: Vec<Vec<usize>>,
    range: (f64, f64),
    build: Build,
}

fn case(op: &'static str, shapes: &[&[usize]], range: (f64, f64), build: Build) -> Case {
    Case {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        range,
        build,
    }
}

fn unary(
    op: &'static str,
    shapes: [&[usize]; 3],
    range: (f64, f64),
    f: fn(&mut Graph<f64>, Var) -> Result<Var>,
) -> Vec<Case> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            case(
                op,
                &[s],
                range,
                Box::new(move |g, v| {
                    let y = f(g, v[0])?;
                    probe(g, y, i as u64)
                }),
            )
        })
        .collect()
}

fn cases() -> Vec<Case> {
    let mut out = Vec::new();
    for (i, (x, w, pad)) in [
        ([2usize, 5, 5], [3usize, 2, 3, 3], 1usize),
        ([1, 4, 6], [2, 1, 3, 3], 1),
        ([3, 3, 4], [2, 3, 1, 1], 0),
    ]
    .into_iter()
    .enumerate()
    {
        out.push(case(
            "conv2d",
            &[&x, &w],
            (-1.0, 1.0),
            Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], pad)?;
                probe(g, y, 10 + i as u64)
            }),
        ));
    }
    for (i, (x, w, pad)) in [
        ([3usize, 4, 4], [3usize, 2, 1, 1], 0usize),
        ([2, 5, 5], [2, 3, 3, 3], 1),
        ([1, 3, 4], [1, 2, 3, 3], 0),
    ]
    .into_iter()
    .enumerate()
    {
        out.push(case(
            "conv_transpose2d",
            &[&x, &w],
            (-1.0, 1.0),
            Box::new(move |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], pad)?;
                probe(g, y, 20 + i as u64)
            }),
        ));
    }
    for (i, x) in [[2usize, 3, 3], [1, 4, 5], [3, 2, 2]].into_iter().enumerate() {
        let b = [x[0]];
        out.push(case(
            "channel_bias",
            &[&x, &b],
            (-1.0, 1.0),
            Box::new(move |g, v| {
                let y = g.channel_bias(v[0], v[1])?;
                probe(g, y, 30 + i as u64)
            }),
        ));
    }
    for (i, (x, oh, ow)) in [([1usize, 2, 3], 5usize, 4usize), ([2, 4, 4], 8, 8), ([3, 5, 3], 2, 7)]
        .into_iter()
        .enumerate()
    {
        out.push(case(
            "bilinear_resize",
            &[&x],
            (-1.0, 1.0),
            Box::new(move |g, v| {
                let y = g.bilinear_resize(v[0], oh, ow)?;
                probe(g, y, 40 + i as u64)
            }),
        ));
    }
    let shapes3: [&[usize]; 3] = [&[7], &[2, 3, 3], &[4, 1, 5]];
    out.extend(unary("softplus", shapes3, (-3.0, 3.0), |g, x| g.softplus(x)));
    out.extend(unary("relu", shapes3, (-1.0, 1.0), |g, x| g.relu(x)));
    out.extend(unary("abs", shapes3, (-1.0, 1.0), |g, x| g.abs(x)));
    out.extend(unary("square", shapes3, (-1.0, 1.0), |g, x| g.square(x)));
    out.extend(unary("scale", shapes3, (-1.0, 1.0), |g, x| g.scale(x, -2.5)));
    out.extend(unary("clamp_max", shapes3, (-1.0, 1.0), |g, x| g.clamp_max(x, 0.3)));
    out.extend(unary("sum", shapes3, (-1.0, 1.0), |g, x| {
        let s = g.sum(x)?;
        g.square(s)
    }));
    let maps: [&[usize]; 3] = [&[2, 3, 3], &[1, 4, 5], &[3, 2, 6]];
    out.extend(unary("global_max", maps, (-1.0, 1.0), |g, x| {
        g.global_pool(x, Pool::Max)
    }));
    out.extend(unary("global_avg", maps, (-1.0, 1.0), |g, x| {
        g.global_pool(x, Pool::Avg)
    }));
    out.extend(unary(
        "avg_pool2",
        [&[2, 4, 4], &[1, 2, 6], &[3, 6, 2]],
        (-1.0, 1.0),
        |g, x| g.avg_pool2(x),
    ));
    let norm: [&[usize]; 3] = [&[3, 2, 2], &[2, 3, 4, 2], &[5, 1, 3]];
    out.extend(unary("l2_normalize/per-pixel", norm, (-1.0, 1.0), |g, x| {
        g.l2_normalize(x, NormScope::PerPixel, 1e-8)
    }));
    out.extend(unary("l2_normalize/per-channel", norm, (-1.0, 1.0), |g, x| {
        g.l2_normalize(x, NormScope::PerChannel, 1e-8)
    }));
    out.extend(unary("l2_normalize/whole", norm, (-1.0, 1.0), |g, x| {
        g.l2_normalize(x, NormScope::WholeTensor, 1e-8)
    }));
    for (i, (x, sigma)) in [([2usize, 5, 5], 1.0), ([1, 3, 7], 0.7), ([3, 4, 2], 2.0)]
        .into_iter()
        .enumerate()
    {
        out.push(case(
            "gaussian_blur",
            &[&x],
            (-1.0, 1.0),
            Box::new(move |g, v| {
                let y = g.gaussian_blur(v[0], sigma)?;
                probe(g, y, 50 + i as u64)
            }),
        ));
    }
    for (i, s) in [vec![2usize, 3], vec![3, 2, 2], vec![1, 5, 1]].into_iter().enumerate() {
        out.push(case(
            "add/sub/mul",
            &[&s[..], &s[..]],
            (-1.0, 1.0),
            Box::new(move |g, v| {
                let a = g.add(v[0], v[1])?;
                let b = g.sub(a, v[1])?;
                let y = g.mul(b, v[1])?;
                probe(g, y, 60 + i as u64)
            }),
        ));
    }
    for (i, (a, b)) in [
        ([2usize, 2, 3], [1usize, 2, 3]),
        ([1, 3, 3], [2, 3, 3]),
        ([3, 1, 2], [3, 1, 2]),
    ]
    .into_iter()
    .enumerate()
    {
        out.push(case(
            "concat/slice/reshape",
            &[&a, &b],
            (-1.0, 1.0),
            Box::new(move |g, v| {
                let c = g.concat(&[v[0], v[1]])?;
                let n = g.shape(c)[0];
                let s = g.slice(c, 1, n - 1)?;
                let len = g.value(s).len();
                let y = g.reshape(s, &[len])?;
                probe(g, y, 70 + i as u64)
            }),
        ));
    }
    for (i, s) in [vec![3usize, 4], vec![2, 3, 2, 2], vec![4, 1, 3]]
        .into_iter()
        .enumerate()
    {
        out.push(case(
            "gram",
            &[&s[..]],
            (-1.0, 1.0),
            Box::new(move |g, v| {
                let y = g.gram(v[0])?;
                probe(g, y, 80 + i as u64)
            }),
        ));
    }
    for (n, t) in [(3usize, 0usize), (5, 4), (2, 1)] {
        out.push(case(
            "cross_entropy",
            &[&[n]],
            (-2.0, 2.0),
            Box::new(move |g, v| g.cross_entropy(v[0], t)),
        ));
    }
    // losses
    for (hc, bank) in [
        ([4usize, 5, 5], [2usize, 4, 3, 3]),
        ([3, 4, 6], [3, 3, 3, 3]),
        ([2, 6, 4], [2, 2, 1, 1]),
    ] {
        out.push(case(
            "discr (positive)",
            &[&hc, &bank],
            (-1.0, 1.0),
            Box::new(|g, v| {
                let (_, m) = response_maps(g, v[0], v[1])?;
                discr_loss(g, m, Label::Positive, Some(1e3))
            }),
        ));
        out.push(case(
            "discr + aux (negative)",
            &[&hc, &bank],
            (-1.0, 1.0),
            Box::new(|g, v| {
                let (pre, m) = response_maps(g, v[0], v[1])?;
                let a = discr_loss(g, m, Label::Negative, Some(20.0))?;
                let b = discr_aux_loss(g, pre, Label::Negative)?;
                g.add(a, b)
            }),
        ));
        out.push(case(
            "div_a",
            &[&bank],
            (0.2, 1.0),
            Box::new(|g, v| div_a_loss(g, v[0])),
        ));
        out.push(case(
            "div_b",
            &[&hc, &bank],
            (-1.0, 1.0),
            Box::new(|g, v| {
                let (_, m) = response_maps(g, v[0], v[1])?;
                div_b_loss(g, m, Some(1.0))
            }),
        ));
    }
    for (i, (c, l, hw)) in [(4usize, 2usize, 3usize), (3, 3, 4), (6, 2, 2)].into_iter().enumerate() {
        let keep: Vec<bool> = (0..c).map(|k| (k + i) % 3 != 0).collect();
        let mut mean = RunningMean::new(c, 0.9);
        mean.mean = (0..c).map(|k| 0.1 * k as f64).collect();
        out.push(case(
            "reconstruction",
            &[&[c, hw, hw], &[l, c, 1, 1]],
            (-1.0, 1.0),
            Box::new(move |g, v| Ok(reconstruction_loss(g, v[0], v[1], &mean, &keep)?.loss)),
        ));
    }
    // full stage-2 objective of one positive sample: banks → maps → every term
    for (i, (hc, bank, l)) in [
        ([4usize, 5, 5], [2usize, 4, 3, 3], 2usize),
        ([3, 4, 4], [3, 3, 1, 1], 3),
        ([2, 6, 6], [2, 2, 3, 3], 2),
    ]
    .into_iter()
    .enumerate()
    {
        let k = bank[0];
        let keep: Vec<bool> = (0..k).map(|j| (j + i) % 2 == 0).collect();
        let mean = RunningMean::new(k, 0.9);
        out.push(case(
            "composite objective",
            &[&hc, &bank, &[l, k, 1, 1]],
            (-1.0, 1.0),
            Box::new(move |g, v| {
                let (pre, m) = response_maps(g, v[0], v[1])?;
                let weights = LossWeights {
                    div: 0.5,
                    rec: 2.0,
                    ..LossWeights::default()
                };
                let terms = Terms {
                    discr: discr_loss(g, m, Label::Positive, Some(weights.discr_cap))?,
                    aux: discr_aux_loss(g, pre, Label::Positive)?,
                    div_a: div_a_loss(g, v[1])?,
                    div_b: div_b_loss(g, m, Some(weights.div_b_sigma))?,
                    rec: Some(reconstruction_loss(g, m, v[2], &mean, &keep)?.loss),
                };
                Ok(total_objective(g, &terms, &weights, Stage::Two, Label::Positive)?.0)
            }),
        ));
    }
    out
}

/// Runs every finite-difference case in double precision.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases()
        .into_iter()
        .map(|c| {
            let inputs: Vec<Tensor<f64>> = c
                .shapes
                .iter()
                .map(|s| rand_tensor(&mut rng, s, c.range.0, c.range.1))
                .collect();
            let report = grad_check(&c.build, &inputs, GRAD_EPS)?;
            Ok(GradRow {
                op: c.op.to_string(),
                shapes: format!("{:?}", c.shapes),
                max_rel_error: report.max_rel_error,
                checked: report.checked,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedForm {
    pub name: &'static str,
    pub value: f64,
    pub expected: f64,
}

impl ClosedForm {
    pub fn passes(&self, tol: f64) -> bool {
        (self.value - self.expected).abs() <= tol
    }
}

fn scalar(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).item()
}

/// Closed-form loss values.
pub fn closed_form_suite() -> Result<Vec<ClosedForm>> {
    let ln2 = std::f64::consts::LN_2;
    let mut out = Vec::new();
    let mut g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let hc = g.constant(rand_tensor(&mut rng, &[4, 5, 5], -1.0, 1.0));
    let zero_bank = g.constant(Tensor::zeros(&[1, 4, 3, 3]));
    let (_, maps) = response_maps(&mut g, hc, zero_bank)?;
    let v = g.value(maps).data()[7];
    out.push(ClosedForm {
        name: "softplus(0)",
        value: v,
        expected: ln2,
    });
    let d = discr_loss(&mut g, maps, Label::Positive, None)?;
    out.push(ClosedForm {
        name: "discr positive, zero filter",
        value: scalar(&g, d),
        expected: -ln2,
    });
    let d = discr_loss(&mut g, maps, Label::Negative, None)?;
    out.push(ClosedForm {
        name: "discr negative, zero filter",
        value: scalar(&g, d),
        expected: ln2,
    });

    let f = rand_tensor(&mut rng, &[1, 4, 3, 3], 0.5, 1.5);
    let pair = g.constant(Tensor::concat(&[&f, &f])?);
    let l = div_a_loss(&mut g, pair)?;
    out.push(ClosedForm {
        name: "div_a identical pair 3x3",
        value: scalar(&g, l),
        expected: 18.0,
    });

    let m = rand_tensor(&mut rng, &[1, 5, 5], 0.1, 2.0);
    let same = g.constant(Tensor::concat(&[&m, &m])?);
    let l = div_b_loss(&mut g, same, Some(1.0))?;
    out.push(ClosedForm {
        name: "div_b identical maps",
        value: scalar(&g, l),
        expected: 2.0,
    });

    let gamma = rand_tensor(&mut rng, &[4, 3, 3], 0.1, 2.0);
    let zero_mean = RunningMean::new(4, 0.99);
    let gv = g.constant(gamma);
    let eye = g.constant(Tensor::from_fn(
        &[4, 4, 1, 1],
        |i| if i / 4 == i % 4 { 1.0 } else { 0.0 },
    ));
    let r = reconstruction_loss(&mut g, gv, eye, &zero_mean, &[true; 4])?;
    out.push(ClosedForm {
        name: "reconstruction exact",
        value: scalar(&g, r.loss),
        expected: 0.0,
    });
    let r = reconstruction_loss(&mut g, gv, eye, &zero_mean, &[false; 4])?;
    out.push(ClosedForm {
        name: "reconstruction all dropped",
        value: scalar(&g, r.loss),
        expected: 1.0,
    });
    let ones = g.constant(Tensor::full(&[2, 2, 2], 1.0));
    let anti = g.constant(Tensor::from_fn(&[1, 2, 1, 1], |i| [-1.0, 1.0][i]));
    let r = reconstruction_loss(&mut g, ones, anti, &RunningMean::new(2, 0.99), &[false, true])?;
    out.push(ClosedForm {
        name: "reconstruction orthogonal",
        value: scalar(&g, r.loss),
        expected: 2.0,
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherSuite {
    /// Instances with one-hot descriptors, power-of-two cells and a dyadic
    /// λ, so every energy is exactly representable.
    pub dyadic: usize,
    /// Dyadic instances whose matcher energy equals the exhaustive minimum.
    pub dyadic_exact: usize,
    /// Instances with real-valued descriptors and λ.
    pub real: usize,
    /// Largest |matcher − exhaustive| energy gap on the real-valued set.
    pub real_max_gap: f64,
    pub self_match_zero_flow: bool,
}

impl MatcherSuite {
    pub fn passes(&self) -> bool {
        self.dyadic_exact == self.dyadic && self.real_max_gap <= 1e-12 && self.self_match_zero_flow
    }
}

const SUITE_PARAMS: DspParams = DspParams {
    levels: 1,
    window: 3,
    stride: 1,
    lambda: 0.0,
};

/// Exhaustive minimum of the pyramid energy for the instance `dsp_match` solves.
fn exhaustive(src: &DescriptorField, dst: &DescriptorField, params: &DspParams) -> Result<f64> {
    let (_, h, w) = src.dims();
    let labels = label_window(params.window, params.stride);
    let pyr = Pyramid::new(h, w, params.levels)?;
    let unaries = cell_unaries(&pyr, &pixel_costs(src, dst, &labels)?, w);
    Ok(brute_force(&pyr, &unaries, &labels, params.lambda))
}

/// Two-level pyramids with labels `{−1,0,1}²`: `9⁵ < 10⁶` assignments,
/// enumerated exhaustively. Half the instances are dyadic (compared for exact
/// equality), half real-valued.
pub fn matcher_suite(instances: usize, seed: u64) -> Result<MatcherSuite> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MatcherSuite {
        dyadic: 0,
        dyadic_exact: 0,
        real: 0,
        real_max_gap: 0.0,
        self_match_zero_flow: false,
    };
    for i in 0..instances {
        let dyadic = i % 2 == 0;
        let (src, dst, lambda) = if dyadic {
            let (c, h, w) = (rng.gen_range(2..5), 2 << rng.gen_range(0..2), 2 << rng.gen_range(0..2));
            (
                one_hot(&mut rng, c, h, w)?,
                one_hot(&mut rng, c, h, w)?,
                rng.gen_range(0..8) as f64 / 16.0,
            )
        } else {
            let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(2..6), rng.gen_range(2..6));
            (
                field(&mut rng, c, h, w)?,
                field(&mut rng, c, h, w)?,
                rng.gen_range(0.0..0.5),
            )
        };
        let params = DspParams { lambda, ..SUITE_PARAMS };
        let e = dsp_match(&src, &dst, &params)?.tree_energy;
        let brute = exhaustive(&src, &dst, &params)?;
        if dyadic {
            out.dyadic += 1;
            out.dyadic_exact += (e == brute) as usize;
        } else {
            out.real += 1;
            out.real_max_gap = out.real_max_gap.max((e - brute).abs());
        }
    }
    let f = field(&mut rng, 4, 16, 16)?;
    let r = dsp_match(
        &f,
        &f,
        &DspParams {
            levels: 2,
            window: 5,
            stride: 2,
            lambda: 0.05,
        },
    )?;
    out.self_match_zero_flow = r.flow.flow.data().iter().all(|&v| v == 0.0);
    Ok(out)
}

fn field(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Result<DescriptorField> {
    let t = Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0f32..1.0));
    DescriptorField::from_features(&t, h, w, Variant::Raw)
}

fn one_hot(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Result<DescriptorField> {
    let hot: Vec<usize> = (0..h * w).map(|_| rng.gen_range(0..c)).collect();
    let t = Tensor::from_fn(&[c, h, w], |i| if hot[i % (h * w)] == i / (h * w) { 1.0 } else { 0.0 });
    DescriptorField::from_features(&t, h, w, Variant::Raw)
}

/// Minimum energy over every assignment, by odometer enumeration.
pub fn brute_force(pyr: &Pyramid, unaries: &[Vec<f64>], labels: &[(i32, i32)], lambda: f64) -> f64 {
    let n = pyr.cells.len();
    let mut a = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        best = best.min(assignment_energy(pyr, unaries, labels, lambda, &a));
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            a[i] += 1;
            if a[i] < labels.len() {
                break;
            }
            a[i] = 0;
            i += 1;
        }
    }
}
