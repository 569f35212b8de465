//! Named parameter storage and the small set of layers the model is built
//! from.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid_arg, Result};
use crate::float::Float;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
}

/// Ordered parameter set; insertion order is the checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    by_name: BTreeMap<String, usize>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<F>) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        self.by_name.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Same names, zeroed values.
    pub fn zeros_like(&self) -> Self {
        let mut out = Self::new();
        for p in &self.params {
            out.add(&p.name, Tensor::zeros(p.value.rows(), p.value.cols()));
        }
        out
    }

    /// Replaces the value of `name`, keeping the shape contract.
    pub fn set(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| invalid_arg!("unknown parameter {}", name))?;
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(invalid_arg!(
                "parameter {} has shape {:?}, got {:?}",
                name,
                slot.shape(),
                value.shape()
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(&p.name, p.value.cast());
        }
        out
    }
}

/// Binds a [`ParamStore`] into one [`Graph`]: each parameter becomes a
/// differentiable leaf the first time it is used.
pub struct Ctx<'a, F: Float> {
    pub graph: Graph<F>,
    store: &'a ParamStore<F>,
    bound: Vec<Option<NodeId>>,
}

impl<'a, F: Float> Ctx<'a, F> {
    pub fn new(store: &'a ParamStore<F>) -> Self {
        Self { graph: Graph::new(), store, bound: vec![None; store.len()] }
    }

    pub fn store(&self) -> &ParamStore<F> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.0] {
            return n;
        }
        let n = self.graph.input(self.store.get(id).clone());
        self.bound[id.0] = Some(n);
        n
    }

    /// Adds `scale * d(root)/d(param)` into `grads` (same layout as the store).
    pub fn accumulate_grads(&self, grads: &mut ParamStore<F>, scale: F) {
        for (i, node) in self.bound.iter().enumerate() {
            let Some(node) = node else { continue };
            let Some(g) = self.graph.grad(*node) else { continue };
            let dst = &mut grads.params[i].value;
            for (o, &v) in dst.data_mut().iter_mut().zip(g.data()) {
                *o = *o + scale * v;
            }
        }
    }
}

/// Xavier-uniform initialization.
pub fn xavier<F: Float, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<F> {
    let bound = num_traits::Float::sqrt(6.0 / (rows + cols) as f64);
    Tensor::from_fn(rows, cols, |_, _| F::lit(rng.gen_range(-bound..bound)))
}

pub fn uniform<F: Float, R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor<F> {
    Tensor::from_fn(rows, cols, |_, _| F::lit(rng.gen_range(-bound..bound)))
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, input: usize, output: usize) -> Self {
        let weight = store.add(&alloc::format!("{name}.weight"), xavier(rng, input, output));
        let bias = store.add(&alloc::format!("{name}.bias"), Tensor::zeros(1, output));
        Self { weight, bias }
    }

    pub fn forward<F: Float>(&self, ctx: &mut Ctx<'_, F>, x: NodeId) -> NodeId {
        let w = ctx.p(self.weight);
        let b = ctx.p(self.bias);
        let y = ctx.graph.matmul(x, w);
        ctx.graph.add_row(y, b)
    }

    pub fn input_dim<F: Float>(&self, store: &ParamStore<F>) -> usize {
        store.get(self.weight).rows()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gain = store.add(&alloc::format!("{name}.gain"), Tensor::filled(1, dim, F::one()));
        let bias = store.add(&alloc::format!("{name}.bias"), Tensor::zeros(1, dim));
        Self { gain, bias }
    }

    pub fn forward<F: Float>(&self, ctx: &mut Ctx<'_, F>, x: NodeId) -> NodeId {
        let g = ctx.p(self.gain);
        let b = ctx.p(self.bias);
        ctx.graph.layer_norm(x, g, b)
    }
}

/// Linear layers separated by GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<F: Float, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &alloc::format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward<F: Float>(&self, ctx: &mut Ctx<'_, F>, mut x: NodeId) -> NodeId {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(ctx, x);
            if i + 1 < n {
                x = ctx.graph.gelu(x);
            }
        }
        x
    }
}

/// Multi-head attention with separate query/key/value/output projections.
///
/// Queries, keys and values are passed in separately so callers can add
/// positional terms to queries and keys only.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<F: Float, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        query_dim: usize,
        key_dim: usize,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(heads >= 1 && dim.is_multiple_of(heads), "head count must divide the width");
        Self {
            q: Linear::new(store, rng, &alloc::format!("{name}.q"), query_dim, dim),
            k: Linear::new(store, rng, &alloc::format!("{name}.k"), key_dim, dim),
            v: Linear::new(store, rng, &alloc::format!("{name}.v"), key_dim, dim),
            o: Linear::new(store, rng, &alloc::format!("{name}.o"), dim, dim),
            heads,
        }
    }

    /// Returns `(output, per-head attention weights)`.
    pub fn forward<F: Float>(
        &self,
        ctx: &mut Ctx<'_, F>,
        query: NodeId,
        key: NodeId,
        value: NodeId,
        mask: Option<&Tensor<F>>,
    ) -> (NodeId, Vec<NodeId>) {
        let q = self.q.forward(ctx, query);
        let k = self.k.forward(ctx, key);
        let v = self.v.forward(ctx, value);
        let dim = ctx.graph.shape(q).1;
        let hd = dim / self.heads;
        let scale = F::one() / F::lit(hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    ctx.graph.slice_cols(q, h * hd, hd),
                    ctx.graph.slice_cols(k, h * hd, hd),
                    ctx.graph.slice_cols(v, h * hd, hd),
                )
            };
            let s = ctx.graph.matmul_t(qh, kh);
            let s = ctx.graph.scale(s, scale);
            let a = ctx.graph.softmax_rows(s, mask);
            weights.push(a);
            outs.push(ctx.graph.matmul(a, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { ctx.graph.concat_cols(&outs) };
        (self.o.forward(ctx, cat), weights)
    }
}

/// Zeroes the output projection of a [`Linear`], making residual branches
/// that end in it an exact identity. Used by tests and identity configs.
pub fn zero_linear<F: Float>(store: &mut ParamStore<F>, l: &Linear) {
    for v in store.get_mut(l.weight).data_mut() {
        *v = F::zero();
    }
    for v in store.get_mut(l.bias).data_mut() {
        *v = F::zero();
    }
}
