//! Structural probes of the MFF module: shape ladders and the temporal
//! support of the convolution modules.

use mff_tensor::nn::{Ctx, ParamBuilder, ParamStore};
use mff_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::MffConfig;
use crate::error::{Result, SeldError};
use crate::mff::{Mff, Tfcm};

/// Output shape of an MFF module on `[batch, C, T, F]` zeros, plus the
/// subnetwork shapes recorded after every stage.
pub fn mff_ladder(cfg: &MffConfig, input: [usize; 4]) -> Result<(Vec<usize>, Vec<Vec<Vec<usize>>>)> {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mff = Mff::new(&mut ParamBuilder::new(&mut store, &mut rng), cfg)?;
    let ctx = Ctx::new(&store, false, false, 0);
    let x = ctx.graph().input(Tensor::zeros(&input));
    let mut trace = Vec::new();
    let y = mff.forward_traced(&ctx, x, &mut trace)?;
    Ok((ctx.graph().shape(y), trace))
}

/// Input frames that receive a non-zero gradient from output frame `frame`
/// of an `m`-block temporal convolution module over `frames` frames.
///
/// Every weight and input is drawn positive and normalization runs on its
/// stored statistics, so no activation is clipped and no path cancels.
pub fn tfcm_time_support(m: usize, channels: usize, frames: usize, frame: usize) -> Result<Vec<usize>> {
    if frame >= frames {
        return Err(SeldError::data(format!("frame {frame} outside 0..{frames}")));
    }
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tfcm = Tfcm::new(&mut ParamBuilder::new(&mut store, &mut rng), channels, m)?;
    let ids: Vec<_> = store.iter().filter(|e| e.3).map(|e| e.0).collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::from_fn(&shape, |_| rng.random_range(0.1..1.0)))?;
    }
    let freq = 4;
    let ctx = Ctx::new(&store, false, true, 0);
    let g = ctx.graph();
    let x = g.leaf(
        Tensor::from_fn(&[1, channels, frames, freq], |_| rng.random_range(0.1..1.0)),
        true,
    );
    let y = tfcm.forward(&ctx, x)?;
    let out = g.narrow(y, 2, frame, 1)?;
    let loss = g.sum_all(out);
    let (_, grads, _) = ctx.backward(loss)?;
    let dx = grads
        .get(x)
        .ok_or_else(|| SeldError::data("input received no gradient"))?;
    let plane = frames * freq;
    Ok((0..frames)
        .filter(|&t| (0..channels).any(|c| (0..freq).any(|f| dx.data()[c * plane + t * freq + f] != 0.0)))
        .collect())
}
