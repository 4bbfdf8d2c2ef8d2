//! Conformer decoder blocks over `[B, L, D]` sequences.

use mff_tensor::nn::{BatchNorm, Conv2d, Ctx, LayerNorm, Linear, MultiHeadAttention, ParamBuilder};
use mff_tensor::{ConvSpec, Scalar, Tensor, Var};

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, dim: usize, expansion: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut pb.scope("norm"), dim)?,
            up: Linear::new(&mut pb.scope("up"), dim, dim * expansion, true)?,
            down: Linear::new(&mut pb.scope("down"), dim * expansion, dim, true)?,
        })
    }

    fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var, dropout: f64) -> Result<Var> {
        let g = ctx.graph();
        let h = self.norm.forward(ctx, x)?;
        let h = g.swish(self.up.forward(ctx, h)?);
        let h = ctx.dropout(h, dropout)?;
        let h = self.down.forward(ctx, h)?;
        Ok(ctx.dropout(h, dropout)?)
    }
}

/// Pointwise conv with GLU, depthwise conv over time, BN, swish, pointwise conv.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub expand: Linear,
    pub depthwise: Conv2d,
    pub bn: BatchNorm,
    pub project: Linear,
}

impl ConvModule {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, dim: usize, kernel: usize) -> Result<Self> {
        let spec = ConvSpec::new(dim, dim, (kernel, 1))
            .padding((kernel / 2, 0))
            .groups(dim);
        Ok(Self {
            norm: LayerNorm::new(&mut pb.scope("norm"), dim)?,
            expand: Linear::new(&mut pb.scope("expand"), dim, 2 * dim, true)?,
            depthwise: Conv2d::new(&mut pb.scope("depthwise"), spec, true)?,
            bn: BatchNorm::new(&mut pb.scope("bn"), dim)?,
            project: Linear::new(&mut pb.scope("project"), dim, dim, true)?,
        })
    }

    fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var, dropout: f64) -> Result<Var> {
        let g = ctx.graph();
        let [b, l, d] = shape3(g.shape(x));
        let h = self.norm.forward(ctx, x)?;
        let h = g.glu(self.expand.forward(ctx, h)?, 2)?;
        let h = g.reshape(g.permute(h, &[0, 2, 1])?, &[b, d, l, 1])?;
        let h = self.depthwise.forward(ctx, h)?;
        let h = g.swish(self.bn.forward(ctx, h)?);
        let h = g.permute(g.reshape(h, &[b, d, l])?, &[0, 2, 1])?;
        let h = self.project.forward(ctx, h)?;
        Ok(ctx.dropout(h, dropout)?)
    }
}

fn shape3(s: Vec<usize>) -> [usize; 3] {
    [s[0], s[1], s[2]]
}

/// Half-step FFN, self-attention, conv module, half-step FFN, layer norm;
/// each sub-block is residual.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ff1: FeedForward,
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub conv: ConvModule,
    pub ff2: FeedForward,
    pub out_norm: LayerNorm,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ConformerDims {
    pub dim: usize,
    pub heads: usize,
    pub kernel: usize,
    pub expansion: usize,
    pub dropout: f64,
}

impl ConformerBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, d: ConformerDims) -> Result<Self> {
        Ok(Self {
            ff1: FeedForward::new(&mut pb.scope("ff1"), d.dim, d.expansion)?,
            attn_norm: LayerNorm::new(&mut pb.scope("attn_norm"), d.dim)?,
            attn: MultiHeadAttention::new(&mut pb.scope("attn"), d.dim, d.heads)?,
            conv: ConvModule::new(&mut pb.scope("conv"), d.dim, d.kernel)?,
            ff2: FeedForward::new(&mut pb.scope("ff2"), d.dim, d.expansion)?,
            out_norm: LayerNorm::new(&mut pb.scope("out_norm"), d.dim)?,
            dropout: d.dropout,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.graph();
        let half = T::from_f64(0.5);
        let x = g.add(x, g.scalar_mul(self.ff1.forward(ctx, x, self.dropout)?, half))?;
        let h = self.attn.forward(ctx, self.attn_norm.forward(ctx, x)?)?;
        let x = g.add(x, ctx.dropout(h, self.dropout)?)?;
        let x = g.add(x, self.conv.forward(ctx, x, self.dropout)?)?;
        let x = g.add(x, g.scalar_mul(self.ff2.forward(ctx, x, self.dropout)?, half))?;
        Ok(self.out_norm.forward(ctx, x)?)
    }
}

/// Sinusoidal positions: even features `sin(t / 10000^(2i/D))`, odd features cosine.
pub fn positional_encoding<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, dim], |k| {
        let (t, j) = (k / dim, k % dim);
        let rate = 10000f64.powf((j - j % 2) as f64 / dim as f64);
        let a = t as f64 / rate;
        T::from_f64(if j % 2 == 0 { a.sin() } else { a.cos() })
    })
}

/// Adds positional encodings to `x: [B, L, D]`.
pub fn add_positions<T: Scalar>(ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
    let g = ctx.graph();
    let [b, l, d] = shape3(g.shape(x));
    let pe = positional_encoding::<T>(l, d);
    let tiled: Vec<T> = (0..b).flat_map(|_| pe.data().iter().copied()).collect();
    let pe = g.constant(Tensor::new(&[b, l, d], tiled)?);
    Ok(g.add(x, pe)?)
}

#[derive(Clone, Debug)]
pub struct Conformer {
    pub blocks: Vec<ConformerBlock>,
}

impl Conformer {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, layers: usize, d: ConformerDims) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| ConformerBlock::new(&mut pb.scope(format!("layer{i}")), d))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    /// Positional encoding followed by every block.
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut x = add_positions(ctx, x)?;
        for b in &self.blocks {
            x = b.forward(ctx, x)?;
        }
        Ok(x)
    }
}
