use mff_tensor::{ConvSpec, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Direct nested-loop cross-correlation.
fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: &ConvSpec) -> Tensor<f64> {
    let [bn, cin, h, wd] = x.shape()[..] else { panic!() };
    let (ho, wo) = s.output_extent((h, wd)).unwrap();
    let cpg_in = cin / s.groups;
    let cpg_out = s.out_channels / s.groups;
    let mut out = Tensor::zeros(&[bn, s.out_channels, ho, wo]);
    for n in 0..bn {
        for co in 0..s.out_channels {
            let grp = co / cpg_out;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cpg_in {
                        for ky in 0..s.kernel.0 {
                            for kx in 0..s.kernel.1 {
                                let iy = (oy * s.stride.0 + ky * s.dilation.0) as isize - s.padding.0 as isize;
                                let ix = (ox * s.stride.1 + kx * s.dilation.1) as isize - s.padding.1 as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc +=
                                    w.get(&[co, ci, ky, kx]) * x.get(&[n, grp * cpg_in + ci, iy as usize, ix as usize]);
                            }
                        }
                    }
                    out.set(&[n, co, oy, ox], acc);
                }
            }
        }
    }
    out
}

fn check(spec: ConvSpec, x_shape: [usize; 4], bias: bool, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f64>::uniform(&x_shape, 1.0, &mut rng);
    let w = Tensor::<f64>::uniform(&spec.weight_shape(), 1.0, &mut rng);
    let b = Tensor::<f64>::uniform(&[spec.out_channels], 1.0, &mut rng);
    let expect = conv_reference(&x, &w, bias.then_some(&b), &spec);
    let g = Graph::new();
    let (xv, wv) = (g.constant(x), g.constant(w));
    let bv = bias.then(|| g.constant(b));
    let y = g.conv2d(xv, wv, bv, &spec).unwrap();
    let got = g.value(y);
    assert_eq!(got.shape(), expect.shape());
    for (a, e) in got.data().iter().zip(expect.data()) {
        assert!((a - e).abs() < 1e-12, "{spec:?}: {a} vs {e}");
    }
}

#[test]
fn dilated_3x3_matches_direct_sum() {
    check(ConvSpec::new(3, 4, (3, 3)).dilation((2, 1)), [2, 3, 6, 5], true, 1);
    check(
        ConvSpec::new(3, 4, (3, 3)).dilation((2, 1)).padding((2, 1)),
        [2, 3, 4, 5],
        false,
        2,
    );
}

#[test]
fn strided_frequency_downsampling_matches_direct_sum() {
    check(
        ConvSpec::new(2, 4, (1, 7)).stride((1, 4)).padding((0, 2)),
        [1, 2, 3, 32],
        false,
        3,
    );
}

#[test]
fn depthwise_and_grouped_match_direct_sum() {
    check(
        ConvSpec::new(4, 4, (3, 3)).groups(4).dilation((4, 1)).padding((4, 1)),
        [2, 4, 9, 6],
        false,
        4,
    );
    check(
        ConvSpec::new(4, 6, (3, 3)).groups(2).padding((1, 1)),
        [1, 4, 5, 5],
        true,
        5,
    );
}

#[test]
fn pointwise_matches_direct_sum() {
    check(ConvSpec::new(5, 3, (1, 1)), [2, 5, 3, 4], true, 6);
}

#[test]
fn frequency_downsampling_extent() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(&[1, 1, 1, 128]));
    let w = g.constant(Tensor::ones(&[1, 1, 1, 7]));
    let spec = ConvSpec::new(1, 1, (1, 7)).stride((1, 4)).padding((0, 2));
    assert_eq!(g.shape(g.conv2d(x, w, None, &spec).unwrap()), vec![1, 1, 1, 32]);
}

#[test]
fn unit_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = Graph::<f64>::new();
    let t = Tensor::uniform(&[1, 1, 3, 4], 1.0, &mut rng);
    let x = g.constant(t.clone());
    let w = g.constant(Tensor::ones(&[1, 1, 1, 1]));
    let y = g.conv2d(x, w, None, &ConvSpec::new(1, 1, (1, 1))).unwrap();
    assert_eq!(*g.value(y), t);
}

#[test]
fn shape_errors_are_descriptive() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
    let err = g.conv2d(x, w, None, &ConvSpec::new(3, 2, (3, 3))).unwrap_err();
    assert!(err.to_string().contains("conv2d"), "{err}");
    let w = g.constant(Tensor::zeros(&[2, 3, 1, 7]));
    assert!(g.conv2d(x, w, None, &ConvSpec::new(3, 2, (1, 7))).is_err());
}
