//! The 64-bit gradient verification suite: every differentiable primitive,
//! the loss, and the composite modules, each compared against central
//! differences.

use mff_tensor::gradcheck::{gradcheck, gradcheck_module, GradcheckConfig, GradcheckReport};
use mff_tensor::nn::{Ctx, ParamBuilder, ParamStore};
use mff_tensor::{AttentionWeights, BatchNormMode, ConvSpec, Graph, PoolMode, Tensor, Var, BN_EPS, LN_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, MffConfig, PitMode};
use crate::error::Result;
use crate::labels::{azel_to_vec, LabelClip};
use crate::layers::DualConv;
use crate::mff::{FdBlock, FuBlock, Mff, Tfcm};
use crate::network::conformer::{ConformerBlock, ConformerDims};
use crate::network::{CrossStitch, Einv2};
use crate::training::pit::{pit_loss, LossWeights, Targets};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub report: GradcheckReport,
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Multiplies `y` by a fixed random tensor so that normalized outputs, whose
/// plain sum is constant, still have informative gradients.
fn project(g: &Graph<f64>, y: Var, seed: u64) -> mff_tensor::Result<Var> {
    let p = g.constant(rand(&g.shape(y), seed));
    g.mul(y, p)
}

type ModuleFn = Box<dyn Fn(&Ctx<'_, f64>, &[Var]) -> mff_tensor::Result<Var>>;

fn module_check(
    name: &str,
    build: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<ModuleFn>,
    inputs: &[Tensor<f64>],
    cfg: &GradcheckConfig,
) -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let f = build(&mut ParamBuilder::new(&mut store, &mut rng))?;
    let report = gradcheck_module(&store, inputs, true, |ctx, v| f(ctx, v), cfg)?;
    Ok(CheckResult {
        name: name.into(),
        report,
    })
}

fn to_tensor_err(e: crate::error::SeldError) -> mff_tensor::TensorError {
    match e {
        crate::error::SeldError::Tensor(t) => t,
        other => mff_tensor::TensorError::InvalidValue(other.to_string()),
    }
}

/// The primitive operations.
pub fn primitive_checks(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    type OpFn = Box<dyn Fn(&Graph<f64>, &[Var]) -> mff_tensor::Result<Var>>;
    let mut cases: Vec<(String, OpFn, Vec<Tensor<f64>>)> = Vec::new();
    let convs = [
        ("conv2d 3x3", ConvSpec::new(2, 3, (3, 3)).padding((1, 1)), [2, 2, 4, 5]),
        (
            "conv2d frequency stride",
            ConvSpec::new(2, 4, (1, 7)).stride((1, 4)).padding((0, 2)),
            [1, 2, 2, 16],
        ),
        (
            "conv2d depthwise dilated",
            ConvSpec::new(3, 3, (3, 3)).groups(3).dilation((2, 1)).padding((2, 1)),
            [2, 3, 6, 4],
        ),
        (
            "conv2d grouped",
            ConvSpec::new(4, 2, (3, 1)).groups(2).padding((1, 0)),
            [1, 4, 5, 3],
        ),
        ("conv2d pointwise", ConvSpec::new(3, 2, (1, 1)), [2, 3, 3, 3]),
    ];
    for (i, (name, spec, xs)) in convs.into_iter().enumerate() {
        let i = i as u64;
        let inputs = vec![
            rand(&xs, i),
            rand(&spec.weight_shape(), 10 + i),
            rand(&[spec.out_channels], 20 + i),
        ];
        cases.push((
            name.into(),
            Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), &spec)),
            inputs,
        ));
    }
    let bn_in = vec![rand(&[2, 3, 2, 4], 1), rand(&[3], 2), rand(&[3], 3)];
    cases.push((
        "batch_norm train".into(),
        Box::new(|g, v| {
            let y = g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, BN_EPS)?.y;
            project(g, y, 99)
        }),
        bn_in.clone(),
    ));
    let (mean, var) = (rand(&[3], 4), rand(&[3], 5).map(|v| v.abs() + 0.5));
    cases.push((
        "batch_norm eval".into(),
        Box::new(move |g, v| {
            let mode = BatchNormMode::Eval { mean: &mean, var: &var };
            let y = g.batch_norm(v[0], v[1], v[2], mode, BN_EPS)?.y;
            project(g, y, 99)
        }),
        bn_in,
    ));
    cases.push((
        "layer_norm".into(),
        Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], LN_EPS)?;
            project(g, y, 77)
        }),
        vec![rand(&[2, 3, 6], 1), rand(&[6], 2), rand(&[6], 3)],
    ));
    let x = || vec![rand(&[2, 3, 4], 1)];
    let xy = || vec![rand(&[2, 3, 4], 1), rand(&[2, 3, 4], 2)];
    cases.push(("relu".into(), Box::new(|g, v| Ok(g.relu(v[0]))), x()));
    cases.push(("sigmoid".into(), Box::new(|g, v| Ok(g.sigmoid(v[0]))), x()));
    cases.push(("tanh".into(), Box::new(|g, v| Ok(g.tanh(v[0]))), x()));
    cases.push(("swish".into(), Box::new(|g, v| Ok(g.swish(v[0]))), x()));
    cases.push(("scalar_mul".into(), Box::new(|g, v| Ok(g.scalar_mul(v[0], 0.3))), x()));
    cases.push(("add".into(), Box::new(|g, v| g.add(v[0], v[1])), xy()));
    cases.push(("sub".into(), Box::new(|g, v| g.sub(v[0], v[1])), xy()));
    cases.push(("mul".into(), Box::new(|g, v| g.mul(v[0], v[1])), xy()));
    cases.push(("add_n".into(), Box::new(|g, v| g.add_n(&[v[0], v[1], v[0]])), xy()));
    cases.push(("mean".into(), Box::new(|g, v| g.mean(v[0], 1)), x()));
    cases.push((
        "softmax".into(),
        Box::new(|g, v| {
            let y = g.softmax(v[0], 2)?;
            project(g, y, 50)
        }),
        x(),
    ));
    cases.push(("glu".into(), Box::new(|g, v| g.glu(v[0], 1)), vec![rand(&[2, 4, 3], 6)]));
    cases.push((
        "channel_scale".into(),
        Box::new(|g, v| g.channel_scale(v[0], v[1])),
        vec![rand(&[2, 3, 4], 1), rand(&[3], 4)],
    ));
    cases.push((
        "concat".into(),
        Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
        vec![rand(&[2, 3, 4], 1), rand(&[2, 1, 4], 2)],
    ));
    cases.push(("reshape".into(), Box::new(|g, v| g.reshape(v[0], &[6, 4])), x()));
    cases.push((
        "permute".into(),
        Box::new(|g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            project(g, y, 9)
        }),
        x(),
    ));
    cases.push(("narrow".into(), Box::new(|g, v| g.narrow(v[0], 2, 1, 2)), x()));
    cases.push((
        "upsample_nearest".into(),
        Box::new(|g, v| {
            let y = g.upsample_nearest_last(v[0], 4)?;
            project(g, y, 3)
        }),
        x(),
    ));
    for mode in [PoolMode::Average, PoolMode::Max] {
        cases.push((
            format!("pool2x2 {mode:?}").to_lowercase(),
            Box::new(move |g, v| {
                let y = g.pool2x2(v[0], mode)?;
                project(g, y, 2)
            }),
            vec![rand(&[2, 2, 4, 6], 1)],
        ));
    }
    cases.push((
        "linear".into(),
        Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
        vec![rand(&[2, 3, 5], 1), rand(&[4, 5], 2), rand(&[4], 3)],
    ));
    cases.push((
        "bmm".into(),
        Box::new(|g, v| g.bmm(v[0], v[1], true)),
        vec![rand(&[2, 3, 4], 1), rand(&[2, 5, 4], 2)],
    ));
    let mut attn = vec![rand(&[1, 3, 8], 40)];
    for i in 0..4 {
        attn.push(rand(&[8, 8], 41 + 2 * i));
        attn.push(rand(&[8], 42 + 2 * i));
    }
    cases.push((
        "mhsa".into(),
        Box::new(|g, v| {
            let w = AttentionWeights {
                query: (v[1], v[2]),
                key: (v[3], v[4]),
                value: (v[5], v[6]),
                output: (v[7], v[8]),
            };
            let y = g.mhsa(v[0], &w, 2)?;
            project(g, y, 7)
        }),
        attn,
    ));
    for mode in [PitMode::Frame, PitMode::Clip] {
        let tgt = random_targets(2, 3, 5, 21)?;
        let name = format!("pit_loss {mode:?}").to_lowercase();
        cases.push((
            name,
            Box::new(move |g, v| {
                let w = LossWeights { sed: 0.8, doa: 0.2 };
                pit_loss(g, v[0], v[1], &tgt, w, mode)
                    .map(|o| o.loss)
                    .map_err(to_tensor_err)
            }),
            vec![rand(&[2, 3, 3, 6], 31), rand(&[2, 3, 3, 3], 32)],
        ));
    }
    cases
        .into_iter()
        .map(|(name, f, inputs)| {
            let report = gradcheck(|g, v| f(g, v), &inputs, cfg)?;
            Ok(CheckResult { name, report })
        })
        .collect()
}

/// Random track-wise targets with 0-3 active tracks per frame.
pub fn random_targets(batch: usize, frames: usize, classes: usize, seed: u64) -> Result<Targets> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clips: Vec<LabelClip> = (0..batch)
        .map(|_| LabelClip {
            frames: (0..frames)
                .map(|_| {
                    (0..rng.random_range(0..=3))
                        .map(|_| {
                            let d = azel_to_vec(rng.random_range(-180.0..180.0), rng.random_range(-90.0..=90.0));
                            (rng.random_range(0..classes), d.expect("valid angles"))
                        })
                        .collect()
                })
                .collect(),
        })
        .collect();
    let refs: Vec<&LabelClip> = clips.iter().collect();
    Targets::from_labels(&refs, 3, classes)
}

/// The MFF reference instance: C=4, T=16, F=32, s=3, m=3, batch 2.
pub fn mff_check(cfg: &GradcheckConfig) -> Result<CheckResult> {
    let mff_cfg = MffConfig {
        s: 3,
        m: 3,
        base_channels: 4,
    };
    module_check(
        "mff module (C=4, T=16, F=32, s=3, m=3)",
        |pb| {
            let m = Mff::new(pb, &mff_cfg)?;
            Ok(Box::new(move |ctx, v| {
                let y = m.forward(ctx, v[0]).map_err(to_tensor_err)?;
                project(ctx.graph(), y, 5)
            }))
        },
        &[rand(&[2, 4, 16, 32], 3)],
        cfg,
    )
}

/// Building blocks of the network.
pub fn module_checks(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    out.push(module_check(
        "fd_block x16",
        |pb| {
            let b = FdBlock::new(pb, 2, 2)?;
            Ok(Box::new(move |ctx, v| {
                let y = b.forward(ctx, v[0]).map_err(to_tensor_err)?;
                project(ctx.graph(), y, 1)
            }))
        },
        &[rand(&[2, 2, 3, 32], 1)],
        cfg,
    )?);
    out.push(module_check(
        "fu_block x4",
        |pb| {
            let b = FuBlock::new(pb, 4, 2, 4)?;
            Ok(Box::new(move |ctx, v| {
                let y = b.forward(ctx, v[0]).map_err(to_tensor_err)?;
                project(ctx.graph(), y, 2)
            }))
        },
        &[rand(&[1, 4, 3, 2], 2)],
        cfg,
    )?);
    out.push(module_check(
        "tfcm m=3",
        |pb| {
            let t = Tfcm::new(pb, 3, 3)?;
            Ok(Box::new(move |ctx, v| {
                let y = t.forward(ctx, v[0]).map_err(to_tensor_err)?;
                project(ctx.graph(), y, 3)
            }))
        },
        &[rand(&[2, 3, 12, 4], 3)],
        cfg,
    )?);
    out.push(module_check(
        "dual_conv",
        |pb| {
            let d = DualConv::new(pb, 2, 3)?;
            Ok(Box::new(move |ctx, v| {
                let y = d.forward(ctx, v[0]).map_err(to_tensor_err)?;
                project(ctx.graph(), y, 4)
            }))
        },
        &[rand(&[2, 2, 4, 5], 4)],
        cfg,
    )?);
    out.push(module_check(
        "cross_stitch",
        |pb| {
            let c = CrossStitch::new(pb, 3)?;
            Ok(Box::new(move |ctx, v| {
                let (a, b) = c.forward(ctx, v[0], v[1]).map_err(to_tensor_err)?;
                let g = ctx.graph();
                let a = project(g, a, 6)?;
                let b = project(g, b, 7)?;
                g.add(a, b)
            }))
        },
        &[rand(&[2, 3, 2, 2], 5), rand(&[2, 3, 2, 2], 6)],
        cfg,
    )?);
    out.push(module_check(
        "conformer block (L=6, D=16, heads=2, kernel=3)",
        |pb| {
            let dims = ConformerDims {
                dim: 16,
                heads: 2,
                kernel: 3,
                expansion: 4,
                dropout: 0.0,
            };
            let b = ConformerBlock::new(pb, dims)?;
            Ok(Box::new(move |ctx, v| {
                let y = b.forward(ctx, v[0]).map_err(to_tensor_err)?;
                project(ctx.graph(), y, 8)
            }))
        },
        &[rand(&[1, 6, 16], 7)],
        cfg,
    )?);
    Ok(out)
}

/// A scaled-down end-to-end network through the PIT loss.
pub fn network_check(cfg: &GradcheckConfig) -> Result<CheckResult> {
    let mut c = Config::desk();
    c.mff = MffConfig {
        s: 2,
        m: 1,
        base_channels: 2,
    };
    c.model.branch_channels = [2, 4, 4];
    c.model.embed_dim = 4;
    c.model.heads = 2;
    c.model.conv_kernel = 3;
    c.model.ffn_expansion = 2;
    c.model.dropout = 0.0;
    c.model.conformer_layers = 1;
    c.data.n_mels = 16;
    let tgt = random_targets(1, 2, 13, 3)?;
    module_check(
        "einv2 network with PIT loss (scaled down)",
        |pb| {
            let net = Einv2::new(pb, &c)?;
            Ok(Box::new(move |ctx, v| {
                let out = net.forward(ctx, v[0]).map_err(to_tensor_err)?;
                let w = LossWeights { sed: 0.8, doa: 0.2 };
                pit_loss(ctx.graph(), out.sed_logits, out.doa, &tgt, w, PitMode::Frame)
                    .map(|o| o.loss)
                    .map_err(to_tensor_err)
            }))
        },
        &[rand(&[1, 7, 16, 16], 9)],
        cfg,
    )
}

/// Everything above. `max_per_tensor` bounds the checked elements of each
/// module parameter tensor (primitives are always checked exhaustively).
pub fn full_suite(max_per_tensor: Option<usize>) -> Result<Vec<CheckResult>> {
    let exhaustive = GradcheckConfig::default();
    let sampled = GradcheckConfig {
        max_per_tensor,
        ..exhaustive
    };
    let mut out = primitive_checks(&exhaustive)?;
    out.extend(module_checks(&sampled)?);
    out.push(mff_check(&sampled)?);
    out.push(network_check(&sampled)?);
    Ok(out)
}
