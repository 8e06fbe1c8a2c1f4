use anchornet::config::ModelConfig;
use anchornet::matcher::{
    dsp_match, extract_dense_descriptors, nam_match, unary_cost, BoxI, Cell, DescriptorField, DspParams, Proposal,
    Variant, OUT_OF_BOUNDS_COST,
};
use anchornet::model::AnchorNet;
use anchornet::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_field(c: usize, h: usize, w: usize, seed: u64) -> DescriptorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0f32..1.0));
    DescriptorField::from_features(&raw, h, w, Variant::Raw).unwrap()
}

fn at(f: &DescriptorField, ch: usize, y: usize, x: usize) -> f64 {
    let (_, h, w) = f.dims();
    f.data.data()[ch * h * w + y * w + x] as f64
}

#[test]
fn unary_matches_straight_line_recomputation() {
    let (c, h, w) = (3, 6, 5);
    let src = random_field(c, h, w, 1);
    let dst = random_field(c, h, w, 2);
    let cell = Cell {
        level: 1,
        y0: 1,
        y1: 5,
        x0: 0,
        x1: 4,
        parent: Some(0),
    };
    for label in [(0, 0), (1, -1), (-2, 3), (4, 0)] {
        let mut total = 0.0;
        for y in cell.y0..cell.y1 {
            for x in cell.x0..cell.x1 {
                let (tx, ty) = (x as i32 + label.0, y as i32 + label.1);
                total += if tx < 0 || ty < 0 || tx >= w as i32 || ty >= h as i32 {
                    OUT_OF_BOUNDS_COST
                } else {
                    1.0 - (0..c)
                        .map(|k| at(&src, k, y, x) * at(&dst, k, ty as usize, tx as usize))
                        .sum::<f64>()
                };
            }
        }
        let oracle = total / ((cell.y1 - cell.y0) * (cell.x1 - cell.x0)) as f64;
        let got = unary_cost(&src, &dst, &cell, label).unwrap();
        assert!((got - oracle).abs() < 1e-10, "label {label:?}: {got} vs {oracle}");
    }
}

#[test]
fn translated_pattern_recovers_shift() {
    let (c, h, w) = (6, 16, 16);
    let base = random_field(c, h, w, 5);
    let noise = random_field(c, h, w, 6);
    // dst(x + 2, y) = src(x, y); the two columns entering on the left are unrelated
    let dst_data = Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        if x >= 2 {
            base.data.data()[ch * h * w + y * w + x - 2]
        } else {
            noise.data.data()[i]
        }
    });
    let dst = DescriptorField {
        data: dst_data,
        variant: Variant::Raw,
    };
    let params = DspParams {
        levels: 2,
        window: 3,
        stride: 2,
        lambda: 0.05,
    };
    let r = dsp_match(&base, &dst, &params).unwrap();
    let (mut dx, mut dy) = (Vec::new(), Vec::new());
    for y in 0..h {
        for x in 0..w - 2 {
            let (fx, fy) = r.flow.at(x, y);
            dx.push(fx);
            dy.push(fy);
        }
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    assert_eq!((median(&mut dx), median(&mut dy)), (2.0, 0.0));
}

#[test]
fn refinement_never_raises_energy_and_flows_stay_inside() {
    for seed in 0..8 {
        let (h, w) = (8, 12);
        let src = random_field(4, h, w, 100 + seed);
        let dst = random_field(4, h, w, 200 + seed);
        let params = DspParams {
            levels: 2,
            window: 5,
            stride: 2,
            lambda: 0.02,
        };
        let r = dsp_match(&src, &dst, &params).unwrap();
        assert!(r.refined_energy <= r.leaf_energy + 1e-9, "seed {seed}");
        assert!(r.tree_energy.is_finite());
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = r.flow.at(x, y);
                let (tx, ty) = (x as f64 + fx, y as f64 + fy);
                assert!((0.0..=(w - 1) as f64).contains(&tx) && (0.0..=(h - 1) as f64).contains(&ty));
            }
        }
    }
}

fn proposal(desc: Vec<f32>, i: usize) -> Proposal {
    Proposal {
        bbox: BoxI {
            x0: i,
            y0: i,
            x1: i + 4,
            y1: i + 4,
        },
        descriptor: desc,
    }
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let s = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / s).collect()
}

#[test]
fn nam_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let ns = rng.gen_range(1..=4);
        let nd = rng.gen_range(1..=4);
        let src: Vec<_> = (0..ns).map(|i| proposal(unit(&mut rng, 5), i)).collect();
        let dst: Vec<_> = (0..nd).map(|i| proposal(unit(&mut rng, 5), i)).collect();
        let r = nam_match(&src, &dst, 12, 12).unwrap();
        for (i, s) in src.iter().enumerate() {
            let mut best = (0, f64::NEG_INFINITY);
            for (j, d) in dst.iter().enumerate() {
                let sim: f64 = s
                    .descriptor
                    .iter()
                    .zip(&d.descriptor)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                if sim > best.1 {
                    best = (j, sim);
                }
            }
            assert_eq!(r.matches[i].0, best.0);
            assert!((r.matches[i].1 - best.1).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn nam_is_equivariant_under_permutation(seed in any::<u64>(), ns in 1usize..6, nd in 1usize..6, rot in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src: Vec<_> = (0..ns).map(|i| proposal(unit(&mut rng, 4), i)).collect();
        let dst: Vec<_> = (0..nd).map(|i| proposal(unit(&mut rng, 4), i)).collect();
        let ps: Vec<usize> = (0..ns).map(|i| (i + rot) % ns).collect();
        let pd: Vec<usize> = (0..nd).rev().collect();
        let src2: Vec<_> = ps.iter().map(|&i| src[i].clone()).collect();
        let dst2: Vec<_> = pd.iter().map(|&j| dst[j].clone()).collect();
        let a = nam_match(&src, &dst, 12, 12).unwrap();
        let b = nam_match(&src2, &dst2, 12, 12).unwrap();
        for (k, &i) in ps.iter().enumerate() {
            // continuous random similarities have no ties
            prop_assert_eq!(pd[b.matches[k].0], a.matches[i].0);
            prop_assert_eq!(b.matches[k].1, a.matches[i].1);
        }
    }
}

#[test]
fn extracted_fields_are_normalized_and_deterministic() {
    let cfg = ModelConfig::default();
    let net = AnchorNet::new(cfg, 32, 2, &mut ChaCha8Rng::seed_from_u64(3));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let image = Tensor::from_fn(&[3, 32, 32], |_| rng.gen_range(0.0f32..1.0));
    for variant in [Variant::Agnostic, Variant::Class(1), Variant::Hypercolumn, Variant::Raw] {
        let f = extract_dense_descriptors(&net, &image, variant).unwrap();
        let g = extract_dense_descriptors(&net, &image, variant).unwrap();
        assert_eq!(f, g);
        let (c, h, w) = f.dims();
        assert_eq!((h, w), (32, 32));
        if variant == Variant::Agnostic {
            assert_eq!(c, cfg.agnostic);
        }
        for p in 0..h * w {
            let n: f64 = (0..c)
                .map(|k| (f.data.data()[k * h * w + p] as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(n < 1e-5 || (n - 1.0).abs() < 1e-5, "{variant:?} pixel {p}: norm {n}");
        }
    }
    assert!(extract_dense_descriptors(&net, &image, Variant::Class(2)).is_err());
}
