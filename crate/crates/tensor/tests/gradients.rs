use mff_tensor::gradcheck::{gradcheck, GradcheckConfig};
use mff_tensor::{AttentionWeights, BatchNormMode, ConvSpec, PoolMode, Tensor, BN_EPS, LN_EPS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn assert_pass(name: &str, r: mff_tensor::gradcheck::GradcheckReport) {
    assert!(r.passed(), "{name}: {r:?}");
    assert!(r.checked > 0);
}

#[test]
fn conv2d_all_variants() {
    let cfg = GradcheckConfig::default();
    let specs = [
        (ConvSpec::new(2, 3, (3, 3)).padding((1, 1)), [2, 2, 4, 5]),
        (
            ConvSpec::new(2, 4, (1, 7)).stride((1, 4)).padding((0, 2)),
            [1, 2, 2, 16],
        ),
        (
            ConvSpec::new(3, 3, (3, 3)).groups(3).dilation((2, 1)).padding((2, 1)),
            [2, 3, 6, 4],
        ),
        (ConvSpec::new(3, 2, (1, 1)), [2, 3, 3, 3]),
    ];
    for (i, (spec, xs)) in specs.into_iter().enumerate() {
        let inputs = [
            rand(&xs, i as u64),
            rand(&spec.weight_shape(), 10 + i as u64),
            rand(&[spec.out_channels], 20 + i as u64),
        ];
        let r = gradcheck(|g, v| g.conv2d(v[0], v[1], Some(v[2]), &spec), &inputs, &cfg).unwrap();
        assert_pass(&format!("conv {spec:?}"), r);
    }
}

#[test]
fn batch_norm_train_and_eval() {
    let cfg = GradcheckConfig::default();
    // Plain sums of a normalized output have zero gradient, so project first.
    let proj = rand(&[2, 3, 2, 4], 99);
    let inputs = [rand(&[2, 3, 2, 4], 1), rand(&[3], 2), rand(&[3], 3)];
    let r = gradcheck(
        |g, v| {
            let out = g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, BN_EPS)?;
            let p = g.constant(proj.clone());
            g.mul(out.y, p)
        },
        &inputs,
        &cfg,
    )
    .unwrap();
    assert_pass("batch_norm train", r);
    let (mean, var) = (rand(&[3], 4), rand(&[3], 5).map(|v| v.abs() + 0.5));
    let r = gradcheck(
        |g, v| {
            let out = g.batch_norm(v[0], v[1], v[2], BatchNormMode::Eval { mean: &mean, var: &var }, BN_EPS)?;
            let p = g.constant(proj.clone());
            g.mul(out.y, p)
        },
        &inputs,
        &cfg,
    )
    .unwrap();
    assert_pass("batch_norm eval", r);
}

#[test]
fn batch_norm_normalizes() {
    let g = mff_tensor::Graph::<f64>::new();
    let x = g.constant(rand(&[3, 2, 4, 5], 8).map(|v| 3.0 * v + 1.0));
    let (one, zero) = (g.constant(Tensor::ones(&[2])), g.constant(Tensor::zeros(&[2])));
    let y = g.batch_norm(x, one, zero, BatchNormMode::Train, BN_EPS).unwrap().y;
    let yv = g.value(y);
    for c in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|b| (0..20).map(move |k| (b, k)))
            .map(|(b, k)| yv.data()[(b * 2 + c) * 20 + k])
            .collect();
        let m = vals.iter().sum::<f64>() / 60.0;
        let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 60.0;
        assert!(m.abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-4, "variance {v}");
    }
}

#[test]
fn layer_norm() {
    let proj = rand(&[2, 3, 6], 77);
    let inputs = [rand(&[2, 3, 6], 1), rand(&[6], 2), rand(&[6], 3)];
    let r = gradcheck(
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], LN_EPS)?;
            let p = g.constant(proj.clone());
            g.mul(y, p)
        },
        &inputs,
        &GradcheckConfig::default(),
    )
    .unwrap();
    assert_pass("layer_norm", r);
}

#[test]
fn elementwise_ops() {
    let cfg = GradcheckConfig::default();
    let x = [rand(&[2, 3, 4], 1)];
    let xy = [rand(&[2, 3, 4], 1), rand(&[2, 3, 4], 2)];
    assert_pass("relu", gradcheck(|g, v| Ok(g.relu(v[0])), &x, &cfg).unwrap());
    assert_pass("sigmoid", gradcheck(|g, v| Ok(g.sigmoid(v[0])), &x, &cfg).unwrap());
    assert_pass("tanh", gradcheck(|g, v| Ok(g.tanh(v[0])), &x, &cfg).unwrap());
    assert_pass("swish", gradcheck(|g, v| Ok(g.swish(v[0])), &x, &cfg).unwrap());
    assert_pass(
        "scalar_mul",
        gradcheck(|g, v| Ok(g.scalar_mul(v[0], 0.3)), &x, &cfg).unwrap(),
    );
    assert_pass("add", gradcheck(|g, v| g.add(v[0], v[1]), &xy, &cfg).unwrap());
    assert_pass("sub", gradcheck(|g, v| g.sub(v[0], v[1]), &xy, &cfg).unwrap());
    assert_pass("mul", gradcheck(|g, v| g.mul(v[0], v[1]), &xy, &cfg).unwrap());
    assert_pass(
        "add_n",
        gradcheck(|g, v| g.add_n(&[v[0], v[1], v[0]]), &xy, &cfg).unwrap(),
    );
    assert_pass("mean", gradcheck(|g, v| g.mean(v[0], 1), &x, &cfg).unwrap());
    assert_pass("mean_all", gradcheck(|g, v| Ok(g.mean_all(v[0])), &x, &cfg).unwrap());
    let w = rand(&[2, 3, 4], 50);
    let weighted =
        |name: &str, f: &dyn Fn(&mff_tensor::Graph<f64>, mff_tensor::Var) -> mff_tensor::Result<mff_tensor::Var>| {
            let r = gradcheck(
                |g, v| {
                    let y = f(g, v[0])?;
                    let p = g.constant(w.clone());
                    g.mul(y, p)
                },
                &x,
                &cfg,
            )
            .unwrap();
            assert_pass(name, r);
        };
    weighted("softmax", &|g, v| g.softmax(v, 2));
    weighted("softmax axis 1", &|g, v| g.softmax(v, 1));
    let cs = [rand(&[2, 3, 4], 1), rand(&[3], 4)];
    assert_pass(
        "channel_scale",
        gradcheck(|g, v| g.channel_scale(v[0], v[1]), &cs, &cfg).unwrap(),
    );
    let glu_in = [rand(&[2, 4, 3], 6)];
    assert_pass("glu", gradcheck(|g, v| g.glu(v[0], 1), &glu_in, &cfg).unwrap());
}

#[test]
fn shape_ops() {
    let cfg = GradcheckConfig::default();
    let x = [rand(&[2, 3, 4], 1)];
    let w = rand(&[4, 2, 3], 9);
    let r = gradcheck(
        |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            let p = g.constant(w.clone());
            g.mul(y, p)
        },
        &x,
        &cfg,
    )
    .unwrap();
    assert_pass("permute", r);
    assert_pass("reshape", gradcheck(|g, v| g.reshape(v[0], &[6, 4]), &x, &cfg).unwrap());
    assert_pass("narrow", gradcheck(|g, v| g.narrow(v[0], 2, 1, 2), &x, &cfg).unwrap());
    let two = [rand(&[2, 3, 4], 1), rand(&[2, 1, 4], 2)];
    assert_pass(
        "concat",
        gradcheck(|g, v| g.concat(&[v[0], v[1]], 1), &two, &cfg).unwrap(),
    );
    let w = rand(&[2, 3, 16], 3);
    let r = gradcheck(
        |g, v| {
            let y = g.upsample_nearest_last(v[0], 4)?;
            let p = g.constant(w.clone());
            g.mul(y, p)
        },
        &x,
        &cfg,
    )
    .unwrap();
    assert_pass("upsample", r);
}

#[test]
fn pooling() {
    let cfg = GradcheckConfig::default();
    let x = [rand(&[2, 2, 4, 6], 1)];
    let w = rand(&[2, 2, 2, 3], 2);
    for mode in [PoolMode::Average, PoolMode::Max] {
        let r = gradcheck(
            |g, v| {
                let y = g.pool2x2(v[0], mode)?;
                let p = g.constant(w.clone());
                g.mul(y, p)
            },
            &x,
            &cfg,
        )
        .unwrap();
        assert_pass(&format!("{mode:?} pool"), r);
    }
}

#[test]
fn linear_and_bmm() {
    let cfg = GradcheckConfig::default();
    let lin = [rand(&[2, 3, 5], 1), rand(&[4, 5], 2), rand(&[4], 3)];
    assert_pass(
        "linear",
        gradcheck(|g, v| g.linear(v[0], v[1], Some(v[2])), &lin, &cfg).unwrap(),
    );
    let ab = [rand(&[2, 3, 4], 1), rand(&[2, 4, 5], 2)];
    assert_pass("bmm", gradcheck(|g, v| g.bmm(v[0], v[1], false), &ab, &cfg).unwrap());
    let abt = [rand(&[2, 3, 4], 1), rand(&[2, 5, 4], 2)];
    assert_pass("bmm_t", gradcheck(|g, v| g.bmm(v[0], v[1], true), &abt, &cfg).unwrap());
}

#[test]
fn mhsa_small() {
    let (d, seed) = (8, 40);
    let mut inputs = vec![rand(&[1, 3, d], seed)];
    for i in 0..4 {
        inputs.push(rand(&[d, d], seed + 1 + 2 * i));
        inputs.push(rand(&[d], seed + 2 + 2 * i));
    }
    let proj = rand(&[1, 3, d], 7);
    let r = gradcheck(
        |g, v| {
            let w = AttentionWeights {
                query: (v[1], v[2]),
                key: (v[3], v[4]),
                value: (v[5], v[6]),
                output: (v[7], v[8]),
            };
            let y = g.mhsa(v[0], &w, 2)?;
            let p = g.constant(proj.clone());
            g.mul(y, p)
        },
        &inputs,
        &GradcheckConfig::default(),
    )
    .unwrap();
    assert_pass("mhsa", r);
}

#[test]
fn mhsa_is_permutation_equivariant() {
    let d = 8;
    let g = mff_tensor::Graph::<f64>::new();
    let pair = |s: u64| (g.constant(rand(&[d, d], s)), g.constant(rand(&[d], s + 100)));
    let w = AttentionWeights {
        query: pair(1),
        key: pair(2),
        value: pair(3),
        output: pair(4),
    };
    let x = rand(&[1, 4, d], 5);
    let perm = [2usize, 0, 3, 1];
    let xp = Tensor::from_fn(&[1, 4, d], |i| x.data()[perm[i / d] * d + i % d]);
    let y = g.mhsa(g.constant(x), &w, 2).unwrap();
    let yp = g.mhsa(g.constant(xp), &w, 2).unwrap();
    let (y, yp) = (g.value(y), g.value(yp));
    for i in 0..4 * d {
        assert!((yp.data()[i] - y.data()[perm[i / d] * d + i % d]).abs() < 1e-12);
    }
}
