//! Multi-scale feature fusion: parallel subnetworks at decreasing frequency
//! resolution, temporal convolution modules inside each subnetwork, and
//! repeated exchange between resolutions. Subnetwork `k` (0-based) carries
//! `2^k C` channels over `F / 4^k` frequency bins; time is never resampled.

use mff_tensor::nn::{Conv2d, Ctx, ParamBuilder};
use mff_tensor::{ConvSpec, Scalar, Var};

use crate::config::MffConfig;
use crate::error::{Result, SeldError};
use crate::layers::ConvBn;

/// Frequency downsampling by `4^steps`: each unit is a (1, 7) conv with
/// stride (1, 4) and padding (0, 2), BN and ReLU, doubling the channels.
#[derive(Clone, Debug)]
pub struct FdBlock {
    pub units: Vec<ConvBn>,
}

impl FdBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(SeldError::data("frequency downsampling needs at least one step"));
        }
        let units = (0..steps)
            .map(|u| {
                let c = channels << u;
                let spec = ConvSpec::new(c, 2 * c, (1, 7)).stride((1, 4)).padding((0, 2));
                ConvBn::new(&mut pb.scope(u.to_string()), spec, true)
            })
            .collect::<Result<_>>()?;
        Ok(Self { units })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, mut x: Var) -> Result<Var> {
        for u in &self.units {
            x = u.forward(ctx, x)?;
        }
        Ok(x)
    }
}

/// Frequency upsampling: 1x1 conv to the target channel count, then
/// nearest-neighbour repetition of every bin `factor` times.
#[derive(Clone, Debug)]
pub struct FuBlock {
    pub conv: Conv2d,
    pub factor: usize,
}

impl FuBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, factor: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut pb.scope("conv"), ConvSpec::new(c_in, c_out, (1, 1)), true)?,
            factor,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        Ok(ctx.graph().upsample_nearest_last(y, self.factor)?)
    }
}

/// Pointwise, dilated depthwise (time dilation `2^i`), pointwise, with a
/// residual around the block and a final ReLU.
#[derive(Clone, Debug)]
pub struct TfcmBlock {
    pub expand: ConvBn,
    pub depthwise: ConvBn,
    pub project: ConvBn,
}

impl TfcmBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize, dilation: usize) -> Result<Self> {
        let point = ConvSpec::new(channels, channels, (1, 1));
        let depth = ConvSpec::new(channels, channels, (3, 3))
            .dilation((dilation, 1))
            .padding((dilation, 1))
            .groups(channels);
        Ok(Self {
            expand: ConvBn::new(&mut pb.scope("pconv1"), point, true)?,
            depthwise: ConvBn::new(&mut pb.scope("dconv"), depth, true)?,
            project: ConvBn::new(&mut pb.scope("pconv2"), point, false)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.expand.forward(ctx, x)?;
        let y = self.depthwise.forward(ctx, y)?;
        let y = self.project.forward(ctx, y)?;
        let g = ctx.graph();
        Ok(g.relu(g.add(x, y)?))
    }
}

/// `m` chained blocks with time dilations `1, 2, ..., 2^(m-1)`.
#[derive(Clone, Debug)]
pub struct Tfcm {
    pub blocks: Vec<TfcmBlock>,
}

impl Tfcm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize, m: usize) -> Result<Self> {
        let blocks = (0..m)
            .map(|i| TfcmBlock::new(&mut pb.scope(format!("block{i}")), channels, 1 << i))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    /// Number of time frames one output frame depends on.
    pub fn receptive_field(&self) -> usize {
        1 + 2 * ((1usize << self.blocks.len()) - 1)
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(ctx, x)?;
        }
        Ok(x)
    }
}

/// Moves features from subnetwork `from` to the resolution of subnetwork `to`.
#[derive(Clone, Debug)]
pub enum Resample {
    Down(FdBlock),
    Up(FuBlock),
}

impl Resample {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, base: usize, from: usize, to: usize) -> Result<Self> {
        if from < to {
            Ok(Resample::Down(FdBlock::new(pb, base << from, to - from)?))
        } else if from > to {
            Ok(Resample::Up(FuBlock::new(
                pb,
                base << from,
                base << to,
                1 << (2 * (from - to)),
            )?))
        } else {
            Err(SeldError::data("resampling a subnetwork onto itself"))
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Resample::Down(b) => b.forward(ctx, x),
            Resample::Up(b) => b.forward(ctx, x),
        }
    }
}

/// Which subnetworks receive fused features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuseTargets {
    All,
    FirstOnly,
}

/// Cross-resolution transforms of one fusion step, indexed `[target][source]`.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub paths: Vec<Vec<Option<Resample>>>,
}

impl Fusion {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        base: usize,
        live: usize,
        targets: FuseTargets,
    ) -> Result<Self> {
        let n_targets = match targets {
            FuseTargets::All => live,
            FuseTargets::FirstOnly => 1,
        };
        let paths = (0..n_targets)
            .map(|i| {
                (0..live)
                    .map(|j| {
                        (i != j)
                            .then(|| Resample::new(&mut pb.scope(format!("to{i}_from{j}")), base, j, i))
                            .transpose()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(Self { paths })
    }

    /// `Y_i = X_i + sum over j != i of R_{j->i}(X_j)`, a plain sum.
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, states: &[Var]) -> Result<Vec<Var>> {
        let g = ctx.graph();
        self.paths
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut terms = vec![states[i]];
                for (j, path) in row.iter().enumerate() {
                    if let Some(p) = path {
                        let r = p.forward(ctx, states[j])?;
                        if g.shape(r) != g.shape(states[i]) {
                            return Err(SeldError::data(format!(
                                "fusion {j}->{i} produced {:?}, expected {:?}",
                                g.shape(r),
                                g.shape(states[i])
                            )));
                        }
                        terms.push(r);
                    }
                }
                Ok(g.add_n(&terms)?)
            })
            .collect()
    }
}

/// One stage: optionally create a new subnetwork, run TFCM on every live
/// subnetwork, then fuse.
#[derive(Clone, Debug)]
pub struct Stage {
    pub create: Option<FdBlock>,
    pub tfcm: Vec<Tfcm>,
    pub fusion: Fusion,
}

#[derive(Clone, Debug)]
pub struct Mff {
    pub cfg: MffConfig,
    pub stages: Vec<Stage>,
}

impl Mff {
    /// `s - 1` stages that each add a subnetwork and fuse into all, then a
    /// restoration stage fusing into the first only. `s = 0` builds nothing.
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &MffConfig) -> Result<Self> {
        if cfg.m == 0 || cfg.base_channels == 0 {
            return Err(SeldError::data(format!("invalid MFF configuration {cfg:?}")));
        }
        let c = cfg.base_channels;
        let mut stages = Vec::new();
        for k in 0..cfg.s {
            let mut pb = pb.scope(format!("stage{k}"));
            let last = k + 1 == cfg.s;
            let create = (!last)
                .then(|| FdBlock::new(&mut pb.scope("create"), c << k, 1))
                .transpose()?;
            let live = if last { cfg.s } else { k + 2 };
            let tfcm = (0..live)
                .map(|i| Tfcm::new(&mut pb.scope(format!("tfcm{i}")), c << i, cfg.m))
                .collect::<Result<_>>()?;
            let targets = if last { FuseTargets::FirstOnly } else { FuseTargets::All };
            let fusion = Fusion::new(&mut pb.scope("fuse"), c, live, targets)?;
            stages.push(Stage { create, tfcm, fusion });
        }
        Ok(Self {
            cfg: cfg.clone(),
            stages,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        self.forward_traced(ctx, x, &mut Vec::new())
    }

    /// Like [`Mff::forward`], also recording the subnetwork shapes after
    /// every stage's TFCM step.
    pub fn forward_traced<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var, trace: &mut Vec<Vec<Vec<usize>>>) -> Result<Var> {
        let g = ctx.graph();
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != self.cfg.base_channels {
            return Err(SeldError::data(format!(
                "MFF expects [B, {}, T, F], got {shape:?}",
                self.cfg.base_channels
            )));
        }
        if self.stages.is_empty() {
            return Ok(x);
        }
        let div = 1usize << (2 * (self.cfg.s - 1));
        if shape[3] % div != 0 {
            return Err(SeldError::data(format!(
                "frequency extent {} not divisible by {div} for s = {}",
                shape[3], self.cfg.s
            )));
        }
        let mut states = vec![x];
        for stage in &self.stages {
            if let Some(fd) = &stage.create {
                let last = *states.last().expect("at least one subnetwork");
                states.push(fd.forward(ctx, last)?);
            }
            for (s, t) in states.iter_mut().zip(&stage.tfcm) {
                *s = t.forward(ctx, *s)?;
            }
            let shapes: Vec<Vec<usize>> = states.iter().map(|&s| g.shape(s)).collect();
            if shapes.iter().any(|s| s[2] != shape[2]) {
                return Err(SeldError::data(format!("time extent changed inside MFF: {shapes:?}")));
            }
            trace.push(shapes);
            states = stage.fusion.forward(ctx, &states)?;
        }
        Ok(g.add(states[0], x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mff_tensor::nn::ParamStore;
    use mff_tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(s: usize, m: usize, c: usize) -> (ParamStore<f64>, Mff) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = MffConfig { s, m, base_channels: c };
        let mff = Mff::new(&mut ParamBuilder::new(&mut store, &mut rng), &cfg).unwrap();
        (store, mff)
    }

    #[test]
    fn zero_stages_is_identity() {
        let (store, mff) = build(0, 3, 2);
        assert!(store.is_empty());
        let ctx = Ctx::new(&store, true, false, 0);
        let x = ctx.graph().input(Tensor::from_fn(&[1, 2, 3, 8], |i| i as f64));
        assert_eq!(mff.forward(&ctx, x).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_input_plus_relu() {
        let (mut store, mff) = build(3, 2, 2);
        let ids: Vec<_> = store.iter().filter(|e| e.3).map(|e| e.0).collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let x = Tensor::from_fn(&[2, 2, 3, 16], |i| ((i * 7919) % 13) as f64 - 6.0);
        for training in [false, true] {
            let ctx = Ctx::new(&store, training, false, 0);
            let y = mff.forward(&ctx, ctx.graph().input(x.clone())).unwrap();
            let want = x.map(|v| v + v.max(0.0));
            assert_eq!(*ctx.graph().value(y), want);
        }
    }

    #[test]
    fn bad_frequency_extent_rejected() {
        let (store, mff) = build(3, 1, 2);
        let ctx = Ctx::new(&store, false, false, 0);
        let x = ctx.graph().input(Tensor::zeros(&[1, 2, 4, 24]));
        assert!(mff.forward(&ctx, x).is_err());
    }
}
