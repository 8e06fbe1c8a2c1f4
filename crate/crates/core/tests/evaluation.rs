use anchornet::eval::{dispersion, pck, weighted_iou};
use anchornet::matcher::{noflow, FlowField};
use anchornet::synth::{default_specs, generate_instance, Instance, SynthConfig};
use anchornet::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instances(class: usize, n: u64, seed: u64) -> (SynthConfig, Vec<Instance>) {
    let cfg = SynthConfig::default();
    let specs = default_specs();
    let v = (0..n)
        .map(|id| generate_instance(Some(&specs[class]), &cfg, seed, id).unwrap())
        .collect();
    (cfg, v)
}

fn random_flow(size: usize, scale: f32, seed: u64) -> FlowField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FlowField {
        flow: Tensor::from_fn(&[2, size, size], |_| rng.gen_range(-scale..scale)),
        energy: None,
    }
}

#[test]
fn noflow_on_identical_pairs_is_perfect() {
    let (cfg, inst) = instances(0, 4, 1);
    let pairs: Vec<_> = inst.iter().map(|i| (i, i)).collect();
    let flows = vec![noflow(cfg.size, cfg.size); pairs.len()];
    for alpha in [0.0, 0.05, 0.1] {
        assert_eq!(pck(&pairs, &flows, alpha).unwrap().mean, 1.0);
    }
    let r = weighted_iou(&pairs, &flows).unwrap();
    assert_eq!(r.mean, 1.0);
    assert!(r.per_part.values().all(|&v| v == 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn pck_is_monotone_in_alpha(seed in 0u64..1000, class in 0usize..4) {
        let (cfg, inst) = instances(class, 4, seed);
        let pairs = vec![(&inst[0], &inst[1]), (&inst[2], &inst[3])];
        let flows: Vec<_> = (0..2).map(|k| random_flow(cfg.size, 12.0, seed * 2 + k)).collect();
        let mut last = 0.0;
        for alpha in [0.0, 0.02, 0.05, 0.1, 0.2, 0.5, 2.0] {
            let v = pck(&pairs, &flows, alpha).unwrap().mean;
            prop_assert!(v >= last, "alpha {alpha}: {v} < {last}");
            last = v;
        }
        prop_assert_eq!(last, 1.0);
    }
}

/// Renames parts on both sides of a pair and reverses mask-plane order.
fn relabel(inst: &Instance) -> Instance {
    let mut out = inst.clone();
    let rename = |s: &str| format!("renamed-{}", s.chars().rev().collect::<String>());
    out.annotation.keypoints = inst.annotation.keypoints.iter().map(|(k, &v)| (rename(k), v)).collect();
    out.annotation.parts = inst.annotation.parts.iter().rev().map(|p| rename(p)).collect();
    let (p, h, w) = (inst.masks.shape()[0], inst.masks.shape()[1], inst.masks.shape()[2]);
    out.masks = Tensor::from_fn(&[p, h, w], |i| {
        inst.masks.data()[(p - 1 - i / (h * w)) * h * w + i % (h * w)]
    });
    out
}

#[test]
fn metrics_ignore_part_names_and_order() {
    let (cfg, inst) = instances(2, 6, 9);
    let renamed: Vec<_> = inst.iter().map(relabel).collect();
    let a: Vec<_> = (0..3).map(|k| (&inst[2 * k], &inst[2 * k + 1])).collect();
    let b: Vec<_> = (0..3).map(|k| (&renamed[2 * k], &renamed[2 * k + 1])).collect();
    let flows: Vec<_> = (0..3).map(|k| random_flow(cfg.size, 4.0, k)).collect();
    for alpha in [0.05, 0.1] {
        assert_eq!(
            pck(&a, &flows, alpha).unwrap().per_pair,
            pck(&b, &flows, alpha).unwrap().per_pair
        );
    }
    assert_eq!(
        weighted_iou(&a, &flows).unwrap().per_pair,
        weighted_iou(&b, &flows).unwrap().per_pair
    );
}

/// One-filter map stack peaking at `target` (image coordinates).
fn peak_map(size: usize, target: (f64, f64)) -> Tensor<f32> {
    Tensor::from_fn(&[1, size, size], |i| {
        let (y, x) = ((i / size) as f64, (i % size) as f64);
        -((x - target.0).powi(2) + (y - target.1).powi(2)) as f32
    })
}

#[test]
fn part_detector_is_anchored_and_random_filter_is_not() {
    let (cfg, inst) = instances(1, 40, 4);
    let part = inst[0].annotation.parts[0].clone();
    let poses: Vec<_> = inst.iter().map(|i| i.annotation.pose.unwrap()).collect();
    // detector responding at the part's keypoint
    let detector: Vec<_> = inst
        .iter()
        .map(|i| peak_map(cfg.size, i.annotation.keypoints[&part]))
        .collect();
    let d = dispersion(&detector, &poses, cfg.size).unwrap()[0];
    assert!(d <= 2.0, "detector dispersion {d}");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let random: Vec<_> = inst
        .iter()
        .map(|_| Tensor::from_fn(&[1, cfg.size, cfg.size], |_| rng.gen::<f32>()))
        .collect();
    let r = dispersion(&random, &poses, cfg.size).unwrap()[0];
    assert!(r > 2.0 * d.max(1.0), "random dispersion {r} vs detector {d}");
}
