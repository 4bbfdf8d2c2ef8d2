use mff_seld::config::{Config, DecoderLayout};
use mff_seld::network::{count_params, param_breakdown, Einv2};
use mff_tensor::nn::{Ctx, ParamStore};
use mff_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> Config {
    let mut c = Config::desk();
    c.mff.base_channels = 4;
    c.mff.m = 2;
    c.model.branch_channels = [4, 8, 8];
    c.model.embed_dim = 8;
    c.model.heads = 2;
    c.model.conv_kernel = 3;
    c.data.n_mels = 32;
    c
}

fn input(b: usize, t: usize, f: usize, seed: u64) -> Tensor<f64> {
    Tensor::randn(&[b, 7, t, f], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn output_shapes_and_ranges() {
    let cfg = tiny();
    let (net, store) = Einv2::init::<f64>(&cfg, 3).unwrap();
    let ctx = Ctx::new(&store, false, false, 0);
    let x = ctx.graph().input(input(2, 80, 32, 1));
    let out = net.forward(&ctx, x).unwrap();
    let g = ctx.graph();
    assert_eq!(g.shape(out.sed), [2, 10, 3, 14]);
    assert_eq!(g.shape(out.doa), [2, 10, 3, 3]);
    for row in g.value(out.sed).data().chunks(14) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
    assert!(g.value(out.doa).data().iter().all(|v| v.abs() < 1.0));
}

#[test]
fn eval_forward_is_deterministic() {
    let cfg = tiny();
    let (net, store) = Einv2::init::<f64>(&cfg, 3).unwrap();
    let run = || {
        let ctx = Ctx::new(&store, false, false, 0);
        let out = net.forward(&ctx, ctx.graph().input(input(1, 40, 32, 2))).unwrap();
        let v = (*ctx.graph().value(out.sed)).clone();
        v
    };
    assert_eq!(run(), run());
}

#[test]
fn identity_stitch_decouples_branches() {
    let cfg = tiny();
    let (net, mut store) = Einv2::init::<f64>(&cfg, 5).unwrap();
    for st in &net.stitches {
        let c = store.get(st.alpha).shape()[1];
        let eye = Tensor::from_fn(&[4, c], |i| if i / c == 0 || i / c == 3 { 1.0 } else { 0.0 });
        store.set(st.alpha, eye).unwrap();
    }
    // Zero the DoA branch's first conv so its input is effectively removed.
    let w = net.doa_convs[0].first.conv.weight;
    let shape = store.get(w).shape().to_vec();
    let sed_of = |s: &ParamStore<f64>| {
        let ctx = Ctx::new(s, false, false, 0);
        let out = net.forward(&ctx, ctx.graph().input(input(1, 40, 32, 9))).unwrap();
        let v = (*ctx.graph().value(out.sed)).clone();
        v
    };
    let before = sed_of(&store);
    store.set(w, Tensor::zeros(&shape)).unwrap();
    assert_eq!(sed_of(&store), before);
}

#[test]
fn every_parameter_gets_gradient() {
    let cfg = tiny();
    let (net, store) = Einv2::init::<f64>(&cfg, 7).unwrap();
    let ctx = Ctx::new(&store, true, true, 0);
    let out = net.forward(&ctx, ctx.graph().input(input(2, 40, 32, 4))).unwrap();
    let g = ctx.graph();
    let w = g.constant(Tensor::randn(&g.shape(out.sed), 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
    let v = g.constant(Tensor::randn(&g.shape(out.doa), 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
    let loss = g
        .add(
            g.sum_all(g.mul(out.sed, w).unwrap()),
            g.sum_all(g.mul(out.doa, v).unwrap()),
        )
        .unwrap();
    let (grads, _, _) = ctx.backward(loss).unwrap();
    for (id, name, _, trainable) in store.iter() {
        if trainable {
            let gr = grads.get(id).unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(gr.max_abs() > 0.0, "{name} gradient is zero");
        }
    }
}

#[test]
fn parameter_names_cover_the_structure() {
    let (_, store) = Einv2::init::<f32>(&tiny(), 0).unwrap();
    let groups = param_breakdown(&store);
    for key in [
        "stem",
        "mff",
        "sed_branch",
        "doa_branch",
        "cross_stitch",
        "sed_decoder",
        "doa_decoder",
    ] {
        assert!(groups.contains_key(key), "{key} missing from {groups:?}");
    }
    let alphas = store.iter().filter(|e| e.1.ends_with("alpha")).count();
    assert_eq!(alphas, 3);
    assert_eq!(groups.values().sum::<usize>(), count_params(&store));
}

#[test]
fn full_configuration_size() {
    let (_, store) = Einv2::init::<f32>(&Config::default(), 0).unwrap();
    let n = count_params(&store);
    println!("full configuration: {n} parameters {:?}", param_breakdown(&store));
    assert!((n as f64 - 26.9e6).abs() <= 0.15 * 26.9e6, "{n}");
    let mut shared = Config::default();
    shared.model.decoder = DecoderLayout::Shared;
    let (_, store) = Einv2::init::<f32>(&shared, 0).unwrap();
    assert!(count_params(&store) < n);
}
