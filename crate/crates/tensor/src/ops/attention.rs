use crate::error::{spec_err, Result};
use crate::{Graph, Scalar, Var};

/// Projection weights of one multi-head self-attention layer; each entry is
/// a `([D, D] weight, [D] bias)` pair.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub query: (Var, Var),
    pub key: (Var, Var),
    pub value: (Var, Var),
    pub output: (Var, Var),
}

impl<T: Scalar> Graph<T> {
    /// Scaled dot-product self-attention over `x: [B, L, D]` with `heads` heads.
    pub fn mhsa(&self, x: Var, w: &AttentionWeights, heads: usize) -> Result<Var> {
        let shape = self.shape(x);
        let [b, l, d] = shape[..] else {
            return Err(spec_err("mhsa", format!("need [B,L,D], got {shape:?}")));
        };
        if heads == 0 || d % heads != 0 {
            return Err(spec_err(
                "mhsa",
                format!("embedding {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;
        let split = |v: Var| -> Result<Var> {
            let v = self.reshape(v, &[b, l, heads, dh])?;
            let v = self.permute(v, &[0, 2, 1, 3])?;
            self.reshape(v, &[b * heads, l, dh])
        };
        let q = split(self.linear(x, w.query.0, Some(w.query.1))?)?;
        let k = split(self.linear(x, w.key.0, Some(w.key.1))?)?;
        let v = split(self.linear(x, w.value.0, Some(w.value.1))?)?;
        let scores = self.bmm(q, k, true)?;
        let scores = self.scalar_mul(scores, T::from_f64(1.0 / (dh as f64).sqrt()));
        let attn = self.softmax(scores, 2)?;
        let ctx = self.bmm(attn, v, false)?;
        let ctx = self.reshape(ctx, &[b, heads, l, dh])?;
        let ctx = self.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.reshape(ctx, &[b, l, d])?;
        self.linear(ctx, w.output.0, Some(w.output.1))
    }
}
