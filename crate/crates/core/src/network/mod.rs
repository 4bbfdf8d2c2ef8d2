//! The dual-branch EINV2 network around the MFF encoder: a shared stem and
//! MFF module, SED and DoA convolution branches coupled by cross-stitch
//! units, Conformer decoders and track-wise output heads.

pub mod conformer;

use std::collections::BTreeMap;

use mff_tensor::nn::{Ctx, Linear, ParamBuilder, ParamId, ParamStore};
use mff_tensor::{Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, DecoderLayout, ModelConfig};
use crate::error::{Result, SeldError};
use crate::features::FEATURE_CHANNELS;
use crate::layers::DualConv;
use crate::mff::Mff;
use conformer::{Conformer, ConformerDims};

/// Per-channel 2x2 mixing of the SED and DoA feature maps. `alpha` is
/// `[4, C]` holding rows `(sed<-sed, sed<-doa, doa<-sed, doa<-doa)`.
#[derive(Clone, Debug)]
pub struct CrossStitch {
    pub alpha: ParamId,
}

impl CrossStitch {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        let init = [0.9, 0.1, 0.1, 0.9];
        let alpha = Tensor::from_fn(&[4, channels], |i| T::from_f64(init[i / channels]));
        Ok(Self {
            alpha: pb.param("alpha", alpha)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, sed: Var, doa: Var) -> Result<(Var, Var)> {
        let g = ctx.graph();
        if g.shape(sed) != g.shape(doa) {
            return Err(SeldError::data(format!(
                "cross-stitch inputs differ: {:?} vs {:?}",
                g.shape(sed),
                g.shape(doa)
            )));
        }
        let alpha = ctx.param(self.alpha);
        let c = g.shape(alpha)[1];
        let coef = |k| -> Result<Var> { Ok(g.reshape(g.narrow(alpha, 0, k, 1)?, &[c])?) };
        let mix = |a: Var, b: Var, ka, kb| -> Result<Var> {
            Ok(g.add(g.channel_scale(a, coef(ka)?)?, g.channel_scale(b, coef(kb)?)?)?)
        };
        Ok((mix(sed, doa, 0, 1)?, mix(sed, doa, 2, 3)?))
    }
}

/// Conformer stacks and linear heads of one branch.
#[derive(Clone, Debug)]
pub enum Decoder {
    /// One stack and one `D -> width` head per track.
    PerTrack(Vec<(Conformer, Linear)>),
    /// One stack and one `D -> tracks * width` head.
    Shared(Conformer, Linear),
}

impl Decoder {
    fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, m: &ModelConfig, width: usize) -> Result<Self> {
        let dims = ConformerDims {
            dim: m.embed_dim,
            heads: m.heads,
            kernel: m.conv_kernel,
            expansion: m.ffn_expansion,
            dropout: m.dropout,
        };
        Ok(match m.decoder {
            DecoderLayout::PerTrack => Decoder::PerTrack(
                (0..m.tracks)
                    .map(|t| {
                        let mut pb = pb.scope(format!("track{t}"));
                        let c = Conformer::new(&mut pb.scope("conformer"), m.conformer_layers, dims)?;
                        let h = Linear::new(&mut pb.scope("head"), m.embed_dim, width, true)?;
                        Ok((c, h))
                    })
                    .collect::<Result<_>>()?,
            ),
            DecoderLayout::Shared => Decoder::Shared(
                Conformer::new(&mut pb.scope("conformer"), m.conformer_layers, dims)?,
                Linear::new(&mut pb.scope("head"), m.embed_dim, m.tracks * width, true)?,
            ),
        })
    }

    /// `[B, L, D]` to raw head outputs `[B, L, tracks, width]`.
    fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var, tracks: usize, width: usize) -> Result<Var> {
        let g = ctx.graph();
        let s = g.shape(x);
        let (b, l) = (s[0], s[1]);
        match self {
            Decoder::PerTrack(stacks) => {
                let outs = stacks
                    .iter()
                    .map(|(c, h)| {
                        let y = h.forward(ctx, c.forward(ctx, x)?)?;
                        Ok(g.reshape(y, &[b, l, 1, width])?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(g.concat(&outs, 2)?)
            }
            Decoder::Shared(c, h) => {
                let y = h.forward(ctx, c.forward(ctx, x)?)?;
                Ok(g.reshape(y, &[b, l, tracks, width])?)
            }
        }
    }
}

/// Network outputs: raw SED scores, their softmax over class slots, and
/// tanh-bounded Cartesian DoA vectors.
#[derive(Clone, Copy, Debug)]
pub struct SeldOutput {
    /// `[B, L, tracks, classes + 1]`
    pub sed_logits: Var,
    /// `[B, L, tracks, classes + 1]`, rows sum to one.
    pub sed: Var,
    /// `[B, L, tracks, 3]`
    pub doa: Var,
}

#[derive(Clone, Debug)]
pub struct Einv2 {
    pub model: ModelConfig,
    pub stem: DualConv,
    pub mff: Mff,
    pub sed_convs: Vec<DualConv>,
    pub doa_convs: Vec<DualConv>,
    pub stitches: Vec<CrossStitch>,
    pub sed_decoder: Decoder,
    pub doa_decoder: Decoder,
}

impl Einv2 {
    /// Builds the network and a freshly initialized parameter store.
    pub fn init<T: Scalar>(cfg: &Config, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Self::new(&mut ParamBuilder::new(&mut store, &mut rng), cfg)?;
        Ok((net, store))
    }

    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let c = cfg.mff.base_channels;
        let stem = DualConv::new(&mut pb.scope("stem"), FEATURE_CHANNELS, c)?;
        let mff = Mff::new(&mut pb.scope("mff"), &cfg.mff)?;
        let mut sed_convs = Vec::new();
        let mut doa_convs = Vec::new();
        let mut stitches = Vec::new();
        let mut c_in = c;
        for (k, &c_out) in m.branch_channels.iter().enumerate() {
            sed_convs.push(DualConv::new(&mut pb.scope(format!("sed_branch.{k}")), c_in, c_out)?);
            doa_convs.push(DualConv::new(&mut pb.scope(format!("doa_branch.{k}")), c_in, c_out)?);
            stitches.push(CrossStitch::new(&mut pb.scope(format!("cross_stitch.{k}")), c_out)?);
            c_in = c_out;
        }
        Ok(Self {
            model: m.clone(),
            stem,
            mff,
            sed_convs,
            doa_convs,
            stitches,
            sed_decoder: Decoder::new(&mut pb.scope("sed_decoder"), m, m.classes + 1)?,
            doa_decoder: Decoder::new(&mut pb.scope("doa_decoder"), m, 3)?,
        })
    }

    /// `[B, 7, T, F]` features to the two branch maps `[B, C, T/8, F/8]`.
    pub fn encode<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let g = ctx.graph();
        let s = g.shape(x);
        if s.len() != 4 || s[1] != FEATURE_CHANNELS {
            return Err(SeldError::data(format!(
                "expected [B, {FEATURE_CHANNELS}, T, F] features, got {s:?}"
            )));
        }
        let h = self.stem.forward(ctx, x)?;
        let h = self.mff.forward(ctx, h)?;
        let (mut sed, mut doa) = (h, h);
        for ((sc, dc), st) in self.sed_convs.iter().zip(&self.doa_convs).zip(&self.stitches) {
            let pool = |v: Var| g.pool2x2(v, self.model.pool);
            let a = pool(sc.forward(ctx, sed)?)?;
            let b = pool(dc.forward(ctx, doa)?)?;
            (sed, doa) = st.forward(ctx, a, b)?;
        }
        Ok((sed, doa))
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<SeldOutput> {
        let g = ctx.graph();
        let (sed, doa) = self.encode(ctx, x)?;
        let seq = |v: Var| -> Result<Var> { Ok(g.permute(g.mean(v, 3)?, &[0, 2, 1])?) };
        let (tracks, width) = (self.model.tracks, self.model.classes + 1);
        let sed_logits = self.sed_decoder.forward(ctx, seq(sed)?, tracks, width)?;
        let doa = self.doa_decoder.forward(ctx, seq(doa)?, tracks, 3)?;
        Ok(SeldOutput {
            sed_logits,
            sed: g.softmax(sed_logits, 3)?,
            doa: g.tanh(doa),
        })
    }
}

/// Trainable element count per top-level component, in name order.
pub fn param_breakdown<T: Scalar>(store: &ParamStore<T>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (_, name, t, trainable) in store.iter() {
        if trainable {
            let key = name.split('.').next().unwrap_or(name).to_string();
            *out.entry(key).or_insert(0) += t.numel();
        }
    }
    out
}

pub fn count_params<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.count_trainable()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_stitch_identity_and_init() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cs = CrossStitch::new(&mut ParamBuilder::new(&mut store, &mut rng), 2).unwrap();
        assert_eq!(store.get(cs.alpha).data(), &[0.9, 0.9, 0.1, 0.1, 0.1, 0.1, 0.9, 0.9]);
        store
            .set(
                cs.alpha,
                Tensor::new(&[4, 2], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap(),
            )
            .unwrap();
        let ctx = Ctx::new(&store, false, false, 0);
        let a = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[1, 2, 2, 2], |i| -(i as f64) * 3.0);
        let (x, y) = cs
            .forward(&ctx, ctx.graph().input(a.clone()), ctx.graph().input(b.clone()))
            .unwrap();
        assert_eq!(*ctx.graph().value(x), a);
        assert_eq!(*ctx.graph().value(y), b);
    }
}
