//! Named parameter storage, a per-pass forward context, and the basic layers.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::ops::attention::AttentionWeights;
use crate::ops::conv::ConvSpec;
use crate::ops::norm::{BatchNormMode, BN_EPS, LN_EPS};
use crate::{Gradients, Graph, Scalar, Tensor, Var};

/// Index of an entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Ordered map from unique names to tensors. Trainable entries are learned;
/// the others are buffers such as batch-norm running statistics.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, value, trainable });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// `(id, name, value, trainable)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>, bool)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value, e.trainable))
    }

    /// Number of learnable scalars.
    pub fn count_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_param",
                detail: format!("{}: {:?} vs {:?}", e.name, e.value.shape(), value.shape()),
            });
        }
        e.value = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Blends batch statistics into running statistics:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>], momentum: f64) -> Result<()> {
        let m = T::from_f64(momentum);
        let keep = T::one() - m;
        for u in updates {
            for (id, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
                let run = self.get_mut(id);
                *run = run.zip_map(batch, |r, b| keep * r + m * b)?;
            }
        }
        Ok(())
    }
}

/// Batch statistics observed by one batch-norm layer during a training pass.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Tensor<T>,
    pub batch_var: Tensor<T>,
}

/// Creates parameters under a dotted name prefix with a seeded initializer.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let n = self.full_name(name);
        self.store.insert(n, value, true)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let n = self.full_name(name);
        self.store.insert(n, value, false)
    }

    /// Trainable tensor drawn from `U(-bound, bound)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let t = Tensor::uniform(shape, bound, self.rng);
        self.param(name, t)
    }
}

/// Gradients of trainable parameters, indexed by [`ParamId`].
#[derive(Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn empty() -> Self {
        Self { grads: Vec::new() }
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<T>) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = Some(grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor<T>)> {
        self.grads
            .iter_mut()
            .enumerate()
            .filter_map(|(i, g)| g.as_mut().map(|g| (ParamId(i), g)))
    }

    /// Euclidean norm over every gradient entry.
    pub fn global_norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.data().iter())
            .map(|&v| Scalar::to_f64(v).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// measured before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let k = T::from_f64(max_norm / norm);
            for (_, g) in self.iter_mut() {
                for v in g.data_mut() {
                    *v *= k;
                }
            }
        }
        norm
    }
}

/// State for one forward pass: the graph, a read-only view of the
/// parameters, the train/eval switch, and a seeded dropout stream.
pub struct Ctx<'p, T> {
    graph: Graph<T>,
    params: &'p ParamStore<T>,
    training: bool,
    track_grads: bool,
    vars: RefCell<HashMap<ParamId, Var>>,
    stats: RefCell<Vec<StatUpdate<T>>>,
    rng: RefCell<ChaCha8Rng>,
}

impl<'p, T: Scalar> Ctx<'p, T> {
    /// `training` selects batch statistics and active dropout; `track_grads`
    /// records parameters as differentiable leaves.
    pub fn new(params: &'p ParamStore<T>, training: bool, track_grads: bool, seed: u64) -> Self {
        Self {
            graph: Graph::new(),
            params,
            training,
            track_grads,
            vars: RefCell::new(HashMap::new()),
            stats: RefCell::new(Vec::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    /// The graph leaf for a parameter, created on first use.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&v) = self.vars.borrow().get(&id) {
            return v;
        }
        let value = self.params.get(id).clone();
        let grad = self.track_grads && self.params.is_trainable(id);
        let v = self.graph.leaf(value, grad);
        self.vars.borrow_mut().insert(id, v);
        v
    }

    pub fn dropout(&self, x: Var, p: f64) -> Result<Var> {
        self.graph.dropout(x, p, self.training, &mut *self.rng.borrow_mut())
    }

    pub fn record_stats(&self, update: StatUpdate<T>) {
        self.stats.borrow_mut().push(update);
    }

    /// Batch statistics gathered so far, leaving the graph intact.
    pub fn take_stat_updates(&self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut *self.stats.borrow_mut())
    }

    /// Runs reverse mode from `loss` and returns parameter gradients, the raw
    /// leaf gradients (for non-parameter inputs) and the recorded batch statistics.
    pub fn backward(self, loss: Var) -> Result<(ParamGrads<T>, Gradients<T>, Vec<StatUpdate<T>>)> {
        let vars = self.vars.into_inner();
        let stats = self.stats.into_inner();
        let mut leaf = self.graph.backward(loss)?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();
        for (id, v) in vars {
            grads[id.0] = leaf.take(v);
        }
        Ok((ParamGrads { grads }, leaf, stats))
    }
}

/// PyTorch-style default bound `1/sqrt(fan_in)`.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, spec: ConvSpec, bias: bool) -> Result<Self> {
        spec.validate()?;
        let ws = spec.weight_shape();
        let bound = fan_in_bound(ws[1] * ws[2] * ws[3]);
        let weight = pb.uniform("weight", &ws, bound)?;
        let bias = bias
            .then(|| pb.uniform("bias", &[spec.out_channels], bound))
            .transpose()?;
        Ok(Self { spec, weight, bias })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.graph().conv2d(x, w, b, &self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, din: usize, dout: usize, bias: bool) -> Result<Self> {
        let bound = fan_in_bound(din);
        let weight = pb.uniform("weight", &[dout, din], bound)?;
        let bias = bias.then(|| pb.uniform("bias", &[dout], bound)).transpose()?;
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.graph().linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.param("gamma", Tensor::ones(&[channels]))?,
            beta: pb.param("beta", Tensor::zeros(&[channels]))?,
            running_mean: pb.buffer("running_mean", Tensor::zeros(&[channels]))?,
            running_var: pb.buffer("running_var", Tensor::ones(&[channels]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.param(self.gamma), ctx.param(self.beta));
        let mode = if ctx.training() {
            BatchNormMode::Train
        } else {
            BatchNormMode::Eval {
                mean: ctx.params().get(self.running_mean),
                var: ctx.params().get(self.running_var),
            }
        };
        let out = ctx.graph().batch_norm(x, gamma, beta, mode, BN_EPS)?;
        if let Some((batch_mean, batch_var)) = out.batch_stats {
            ctx.record_stats(StatUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean,
                batch_var,
            });
        }
        Ok(out.y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.param("gamma", Tensor::ones(&[dim]))?,
            beta: pb.param("beta", Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        ctx.graph().layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::InvalidSpec {
                op: "mhsa",
                detail: format!("embedding {dim} not divisible by {heads} heads"),
            });
        }
        Ok(Self {
            query: Linear::new(&mut pb.scope("query"), dim, dim, true)?,
            key: Linear::new(&mut pb.scope("key"), dim, dim, true)?,
            value: Linear::new(&mut pb.scope("value"), dim, dim, true)?,
            output: Linear::new(&mut pb.scope("output"), dim, dim, true)?,
            heads,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var> {
        let pair = |l: &Linear| {
            (
                ctx.param(l.weight),
                ctx.param(l.bias.expect("attention projections carry a bias")),
            )
        };
        let w = AttentionWeights {
            query: pair(&self.query),
            key: pair(&self.key),
            value: pair(&self.value),
            output: pair(&self.output),
        };
        ctx.graph().mhsa(x, &w, self.heads)
    }
}
