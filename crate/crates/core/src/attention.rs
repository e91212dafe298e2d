//! Scaled dot-product multi-head attention shared by the enhancer, the
//! adapter, and the denoiser's cross-attention blocks.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct HeadProjections {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Per-head query/key/value projections plus a shared output projection of
/// shape `(heads * head_dim) x out_dim`.
///
/// The output projection is applied as a sum over row blocks of `W_o`, which
/// is the same product as concatenating the head outputs first.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: Vec<HeadProjections>,
    pub output: ParamId,
    pub head_dim: usize,
    pub query_dim: usize,
    pub context_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionShape {
    pub query_dim: usize,
    pub context_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub out_dim: usize,
}

impl MultiHeadAttention {
    /// Gaussian init with std `1/sqrt(fan_in)` for every matrix.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        shape: AttentionShape,
        rng: &mut Rng,
        trainable: bool,
    ) -> Self {
        let AttentionShape {
            query_dim,
            context_dim,
            heads,
            head_dim,
            out_dim,
        } = shape;
        let q_std = 1.0 / (query_dim as f64).sqrt();
        let c_std = 1.0 / (context_dim as f64).sqrt();
        let heads = (0..heads)
            .map(|h| HeadProjections {
                query: store.add(
                    format!("{prefix}.head{h}.query"),
                    rng.normal_tensor(query_dim, head_dim, q_std),
                    trainable,
                ),
                key: store.add(
                    format!("{prefix}.head{h}.key"),
                    rng.normal_tensor(context_dim, head_dim, c_std),
                    trainable,
                ),
                value: store.add(
                    format!("{prefix}.head{h}.value"),
                    rng.normal_tensor(context_dim, head_dim, c_std),
                    trainable,
                ),
            })
            .collect::<Vec<_>>();
        let inner = heads.len() * head_dim;
        let output = store.add(
            format!("{prefix}.output"),
            rng.normal_tensor(inner, out_dim, 1.0 / (inner as f64).sqrt()),
            trainable,
        );
        Self {
            heads,
            output,
            head_dim,
            query_dim,
            context_dim,
            out_dim,
        }
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }

    fn check(&self, queries: (usize, usize), context: (usize, usize)) -> Result<()> {
        if queries.1 != self.query_dim {
            return Err(Error::shape("attention queries", queries, (queries.0, self.query_dim)));
        }
        if context.1 != self.context_dim {
            return Err(Error::shape("attention context", context, (context.0, self.context_dim)));
        }
        Ok(())
    }

    /// `sum_h softmax(Q_h K_h^T / sqrt(d_h)) V_h W_o[h]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: NodeId,
        context: NodeId,
    ) -> Result<NodeId> {
        self.check(g.value(queries).shape(), g.value(context).shape())?;
        let w_o = g.param(store, self.output);
        let mut total: Option<NodeId> = None;
        for (h, head) in self.heads.iter().enumerate() {
            let wq = g.param(store, head.query);
            let wk = g.param(store, head.key);
            let wv = g.param(store, head.value);
            let q = g.matmul(queries, wq)?;
            let k = g.matmul(context, wk)?;
            let v = g.matmul(context, wv)?;
            let kt = g.transpose(k);
            let logits = g.matmul(q, kt)?;
            let logits = g.scale(logits, self.scale());
            let weights = g.softmax_rows(logits);
            let mixed = g.matmul(weights, v)?;
            let w_o_h = g.slice_rows(w_o, h * self.head_dim, self.head_dim)?;
            let projected = g.matmul(mixed, w_o_h)?;
            total = Some(match total {
                None => projected,
                Some(t) => g.add(t, projected)?,
            });
        }
        total.ok_or_else(|| Error::contract("attention with zero heads"))
    }

    /// Attention weight matrix of every head, for inspection.
    pub fn weights(&self, store: &ParamStore, queries: &Tensor, context: &Tensor) -> Result<Vec<Tensor>> {
        self.check(queries.shape(), context.shape())?;
        self.heads
            .iter()
            .map(|head| {
                let q = queries.matmul(store.value(head.query))?;
                let k = context.matmul(store.value(head.key))?;
                Ok(q.matmul(&k.transpose())?.scale(self.scale()).softmax_rows())
            })
            .collect()
    }

    pub fn apply(&self, store: &ParamStore, queries: &Tensor, context: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let q = g.constant(queries.clone());
        let c = g.constant(context.clone());
        let out = self.forward(&mut g, store, q, c)?;
        Ok(g.value(out).clone())
    }
}
