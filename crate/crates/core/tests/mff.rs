use mff_seld::config::MffConfig;
use mff_seld::mff::{FdBlock, FuBlock};
use mff_seld::probe::{mff_ladder, tfcm_time_support};
use mff_tensor::nn::{Ctx, ParamBuilder, ParamStore};
use mff_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run_block(
    build: impl FnOnce(
        &mut ParamBuilder<'_, f32>,
    ) -> Box<dyn Fn(&Ctx<'_, f32>, mff_tensor::Var) -> mff_seld::Result<mff_tensor::Var>>,
    input: &[usize],
) -> Vec<usize> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = build(&mut ParamBuilder::new(&mut store, &mut rng));
    let ctx = Ctx::new(&store, true, false, 0);
    let x = ctx.graph().input(Tensor::ones(input));
    let y = f(&ctx, x).unwrap();
    ctx.graph().shape(y)
}

#[test]
fn frequency_downsampling_ladder() {
    for (steps, want) in [(1, [2, 8, 5, 32]), (2, [2, 16, 5, 8])] {
        let shape = run_block(
            |pb| {
                let b = FdBlock::new(pb, 4, steps).unwrap();
                Box::new(move |ctx, x| b.forward(ctx, x))
            },
            &[2, 4, 5, 128],
        );
        assert_eq!(shape, want);
    }
}

#[test]
fn frequency_upsampling_restores_resolution() {
    for (c_in, f_in, factor) in [(8, 32, 4), (16, 8, 16)] {
        let shape = run_block(
            |pb| {
                let b = FuBlock::new(pb, c_in, 4, factor).unwrap();
                Box::new(move |ctx, x| b.forward(ctx, x))
            },
            &[1, c_in, 3, f_in],
        );
        assert_eq!(shape, [1, 4, 3, 128]);
    }
}

#[test]
fn three_stage_subnetwork_shapes() {
    let cfg = MffConfig {
        s: 3,
        m: 2,
        base_channels: 4,
    };
    let (out, trace) = mff_ladder(&cfg, [1, 4, 6, 128]).unwrap();
    assert_eq!(out, [1, 4, 6, 128]);
    assert_eq!(trace.len(), 3);
    assert_eq!(trace[0], [vec![1, 4, 6, 128], vec![1, 8, 6, 32]]);
    assert_eq!(trace[1], [vec![1, 4, 6, 128], vec![1, 8, 6, 32], vec![1, 16, 6, 8]]);
    assert_eq!(trace[2], trace[1]);
}

#[test]
fn shape_preserved_for_every_stage_and_block_count() {
    for s in 0..=4 {
        for m in 3..=7 {
            let cfg = MffConfig { s, m, base_channels: 2 };
            let (out, trace) = mff_ladder(&cfg, [1, 2, 4, 128]).unwrap();
            assert_eq!(out, [1, 2, 4, 128], "s={s} m={m}");
            assert_eq!(trace.len(), s);
            if s == 4 {
                assert_eq!(trace[3][3], [1, 16, 4, 2]);
            }
        }
    }
}

#[test]
fn indivisible_frequency_is_rejected() {
    let cfg = MffConfig {
        s: 3,
        m: 1,
        base_channels: 2,
    };
    assert!(mff_ladder(&cfg, [1, 2, 4, 40]).is_err());
}

#[test]
fn receptive_field_of_six_blocks() {
    let support = tfcm_time_support(6, 2, 200, 100).unwrap();
    assert_eq!(support.len(), 127);
    assert_eq!((support[0], *support.last().unwrap()), (100 - 63, 100 + 63));
    let edge = tfcm_time_support(6, 2, 200, 5).unwrap();
    assert_eq!(edge, (0..=68).collect::<Vec<_>>());
}

#[test]
fn receptive_field_grows_with_blocks() {
    for m in 1..=4 {
        let support = tfcm_time_support(m, 2, 64, 32).unwrap();
        assert_eq!(support.len(), 1 + 2 * ((1 << m) - 1), "m={m}");
    }
}
