//! Convolution followed by batch normalization, the unit most encoder
//! layers are built from.

use mff_tensor::nn::{BatchNorm, Conv2d, Ctx, ParamBuilder};
use mff_tensor::{ConvSpec, Scalar, Var};

use crate::error::Result;

/// Bias-free convolution, batch norm and an optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, spec: ConvSpec, relu: bool) -> Result<Self> {
        let channels = spec.out_channels;
        Ok(Self {
            conv: Conv2d::new(&mut pb.scope("conv"), spec, false)?,
            bn: BatchNorm::new(&mut pb.scope("bn"), channels)?,
            relu,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(if self.relu { ctx.graph().relu(y) } else { y })
    }
}

/// Two 3x3 conv + BN + ReLU units; the first one changes the channel count.
#[derive(Clone, Debug)]
pub struct DualConv {
    pub first: ConvBn,
    pub second: ConvBn,
}

impl DualConv {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize) -> Result<Self> {
        let spec = |ci| ConvSpec::new(ci, c_out, (3, 3)).padding((1, 1));
        Ok(Self {
            first: ConvBn::new(&mut pb.scope("0"), spec(c_in), true)?,
            second: ConvBn::new(&mut pb.scope("1"), spec(c_out), true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.first.forward(ctx, x)?;
        self.second.forward(ctx, y)
    }
}
