use anchornet::gradcheck::grad_check;
use anchornet::{Graph, NormScope, Pool, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Scalar probe `Σ w ⊙ y` with fixed random weights, so that gradients are not
/// all identical.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> anchornet::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check(shapes: &[&[usize]], seed: u64, build: impl Fn(&mut Graph<f64>, &[Var]) -> anchornet::Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
    let report = grad_check(build, &inputs, EPS).unwrap();
    assert!(
        report.passes(TOL),
        "shapes {shapes:?}: rel err {:.3e} at {:?} (analytic {}, numeric {})",
        report.max_rel_error,
        report.worst,
        report.analytic,
        report.numeric
    );
}

#[test]
fn conv2d_gradients() {
    let cases: [(&[usize], &[usize], usize); 4] = [
        (&[2, 5, 5], &[3, 2, 3, 3], 1),
        (&[1, 4, 6], &[2, 1, 3, 3], 1),
        (&[3, 3, 4], &[2, 3, 1, 1], 0),
        (&[2, 6, 5], &[1, 2, 3, 3], 0),
    ];
    for (i, (x, w, pad)) in cases.into_iter().enumerate() {
        check(&[x, w], 10 + i as u64, |g, v| {
            let y = g.conv2d(v[0], v[1], pad)?;
            probe(g, y, 99)
        });
    }
}

#[test]
fn conv_transpose_gradients() {
    let cases: [(&[usize], &[usize], usize); 3] = [
        (&[3, 4, 4], &[3, 2, 1, 1], 0),
        (&[2, 5, 5], &[2, 3, 3, 3], 1),
        (&[1, 3, 4], &[1, 2, 3, 3], 0),
    ];
    for (i, (x, w, pad)) in cases.into_iter().enumerate() {
        check(&[x, w], 20 + i as u64, |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], pad)?;
            probe(g, y, 98)
        });
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cases: [(&[usize], &[usize], usize); 4] = [
        (&[3, 4, 4], &[5, 3, 1, 1], 0),
        (&[2, 4, 4], &[4, 2, 3, 3], 1),
        (&[2, 6, 5], &[3, 2, 3, 3], 0),
        (&[24, 8, 8], &[8, 24, 3, 3], 1),
    ];
    for (xs, ws, pad) in cases {
        let a = rand_tensor(&mut rng, xs);
        let f = rand_tensor(&mut rng, ws);
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let fv = g.constant(f);
        let ca = g.conv2d(av, fv, pad).unwrap();
        let b = rand_tensor(&mut rng, g.shape(ca));
        let bv = g.constant(b.clone());
        let tb = g.conv_transpose2d(bv, fv, pad).unwrap();
        assert_eq!(g.shape(tb), a.shape());
        let lhs = g.value(ca).dot(&b);
        let rhs = a.dot(g.value(tb));
        assert!((lhs - rhs).abs() / lhs.abs().max(1e-300) < 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn resize_gradients() {
    let cases: [(&[usize], usize, usize); 3] = [(&[1, 2, 3], 5, 4), (&[2, 4, 4], 8, 8), (&[3, 5, 3], 2, 7)];
    for (i, (x, oh, ow)) in cases.into_iter().enumerate() {
        check(&[x], 30 + i as u64, |g, v| {
            let y = g.bilinear_resize(v[0], oh, ow)?;
            probe(g, y, 97)
        });
    }
}

#[test]
fn softplus_and_relu_gradients() {
    for (i, s) in [&[7usize][..], &[2, 3, 3], &[4, 1, 5]].into_iter().enumerate() {
        check(&[s], 40 + i as u64, |g, v| {
            let x = g.scale(v[0], 4.0)?;
            let y = g.softplus(x)?;
            probe(g, y, 96)
        });
        check(&[s], 50 + i as u64, |g, v| {
            let y = g.relu(v[0])?;
            probe(g, y, 95)
        });
    }
}

#[test]
fn softplus_chain_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[3, 4, 4]);
    let report = grad_check(
        |g, v| {
            let a = g.softplus(v[0])?;
            let b = g.softplus(a)?;
            let c = g.scale(b, -1.5)?;
            let d = g.softplus(c)?;
            g.sum(d)
        },
        &[x],
        EPS,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn pooling_gradients() {
    for (i, s) in [&[2usize, 3, 3][..], &[1, 4, 5], &[3, 2, 6]].into_iter().enumerate() {
        for kind in [Pool::Max, Pool::Avg] {
            check(&[s], 60 + i as u64, |g, v| {
                let y = g.global_pool(v[0], kind)?;
                probe(g, y, 94)
            });
        }
        check(&[&[s[0], 2 * s[1], 2 * s[2]]], 65 + i as u64, |g, v| {
            let y = g.avg_pool2(v[0])?;
            probe(g, y, 93)
        });
    }
}

#[test]
fn l2_normalize_gradients() {
    for (i, s) in [&[3usize, 2, 2][..], &[2, 3, 4, 2], &[5, 1, 3]].into_iter().enumerate() {
        for scope in [NormScope::PerPixel, NormScope::PerChannel, NormScope::WholeTensor] {
            check(&[s], 70 + i as u64, |g, v| {
                let y = g.l2_normalize(v[0], scope, 1e-8)?;
                probe(g, y, 92)
            });
        }
    }
}

#[test]
fn gaussian_blur_gradients() {
    for (i, (s, sigma)) in [(&[2usize, 5, 5][..], 1.0), (&[1, 3, 7], 0.7), (&[3, 4, 2], 2.0)]
        .into_iter()
        .enumerate()
    {
        check(&[s], 80 + i as u64, |g, v| {
            let y = g.gaussian_blur(v[0], sigma)?;
            probe(g, y, 91)
        });
    }
}

#[test]
fn gaussian_blur_conserves_mass_and_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (shape, sigma) in [
        ([2usize, 5, 5], 1.0),
        ([1, 3, 7], 0.8),
        ([3, 2, 2], 2.5),
        ([1, 9, 4], 1.7),
    ] {
        let x = Tensor::<f64>::from_fn(&shape, |_| rng.gen_range(0.0..3.0));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = g.gaussian_blur(xv, sigma).unwrap();
        let out = g.value(y);
        assert!(out.data().iter().all(|&v| v >= 0.0));
        for c in 0..shape[0] {
            let before: f64 = x.channel(c).iter().sum();
            let after: f64 = out.channel(c).iter().sum();
            assert!((before - after).abs() / before < 1e-6, "{before} vs {after}");
        }
    }
}

#[test]
fn elementwise_and_structural_gradients() {
    check(&[&[2, 3], &[2, 3]], 90, |g, v| {
        let a = g.add(v[0], v[1])?;
        let b = g.sub(a, v[1])?;
        let c = g.mul(b, v[1])?;
        let d = g.square(c)?;
        let e = g.abs(v[0])?;
        let f = g.add(d, e)?;
        let h = g.clamp_max(f, 0.6)?;
        probe(g, h, 90)
    });
    check(&[&[2, 2, 3], &[1, 2, 3]], 91, |g, v| {
        let c = g.concat(&[v[0], v[1]])?;
        let s = g.slice(c, 1, 2)?;
        let r = g.reshape(s, &[12])?;
        probe(g, r, 89)
    });
    check(&[&[4, 2, 3]], 92, |g, v| {
        let gm = g.gram(v[0])?;
        probe(g, gm, 88)
    });
    check(&[&[3, 2, 2], &[3]], 93, |g, v| {
        let y = g.channel_bias(v[0], v[1])?;
        probe(g, y, 87)
    });
    check(&[&[5]], 94, |g, v| g.cross_entropy(v[0], 2));
}
