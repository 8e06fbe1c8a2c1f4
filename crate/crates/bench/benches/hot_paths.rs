use anchornet::config::{MatcherConfig, ModelConfig};
use anchornet::kernels::{conv2d, conv2d_adjoint, ConvGeom};
use anchornet::matcher::{dsp_match, extract_dense_descriptors, DescriptorField, DspParams, Variant};
use anchornet::model::AnchorNet;
use anchornet::Tensor;
use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn kernels(c: &mut Criterion) {
    let g = ConvGeom {
        in_c: 16,
        in_h: 32,
        in_w: 32,
        out_c: 32,
        kh: 3,
        kw: 3,
        pad: 1,
    };
    let input = random(&[16, 32, 32], 1);
    let bank = random(&[32, 16, 3, 3], 2);
    let mut out = vec![0.0f32; 32 * 32 * 32];
    c.bench_function("conv2d 16→32 3×3 on 32×32", |b| {
        b.iter(|| conv2d(black_box(input.data()), black_box(bank.data()), &g, &mut out))
    });
    let grad = random(&[32, 32, 32], 3);
    let mut grad_in = vec![0.0f32; 16 * 32 * 32];
    c.bench_function("conv2d adjoint 16→32 3×3 on 32×32", |b| {
        b.iter(|| conv2d_adjoint(black_box(grad.data()), black_box(bank.data()), &g, &mut grad_in))
    });
}

fn matching(c: &mut Criterion) {
    let field = |seed| DescriptorField::from_features(&random(&[32, 64, 64], seed), 64, 64, Variant::Raw).unwrap();
    let (src, dst) = (field(4), field(5));
    for (label, window, stride) in [("library", 9, 2), ("desk", 15, 4)] {
        let params = DspParams::from(&MatcherConfig {
            window,
            stride,
            ..MatcherConfig::default()
        });
        c.bench_function(&format!("dsp_match 64×64×32 ({label} window)"), |b| {
            b.iter(|| dsp_match(black_box(&src), black_box(&dst), &params).unwrap())
        });
    }
}

fn extraction(c: &mut Criterion) {
    let net = AnchorNet::new(ModelConfig::default(), 64, 4, &mut ChaCha8Rng::seed_from_u64(6));
    let image = random(&[3, 64, 64], 7).map(|v| (v + 1.0) / 2.0);
    c.bench_function("extract agnostic field 64×64", |b| {
        b.iter(|| extract_dense_descriptors(&net, black_box(&image), Variant::Agnostic).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels, matching, extraction
}
criterion_main!(benches);
