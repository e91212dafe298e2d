//! Identity enhancer: face tokens attend over the textual identity anchor.
//!
//! `E_r = MHA(queries = E_f, keys/values = [v_f; v_l])`. Every output row is
//! a per-head convex combination of the two projected anchor tokens, so the
//! result lives in the span of the anchor no matter what the face encoder
//! produced.

use crate::attention::{AttentionShape, MultiHeadAttention};
use crate::embedding::IdentityAnchor;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PREFIX: &str = "enhancer";

#[derive(Clone, Debug)]
pub struct EnhancerParams {
    pub attention: MultiHeadAttention,
}

impl EnhancerParams {
    pub fn init(store: &mut ParamStore, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "enhancer heads ({heads}) must divide d ({d})"
            )));
        }
        let attention = MultiHeadAttention::init(
            store,
            PREFIX,
            AttentionShape {
                query_dim: d,
                context_dim: d,
                heads,
                head_dim: d / heads,
                out_dim: d,
            },
            rng,
            true,
        );
        Ok(Self { attention })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        face: NodeId,
        anchor: NodeId,
    ) -> Result<NodeId> {
        self.attention.forward(g, store, face, anchor)
    }
}

pub fn enhance(
    params: &EnhancerParams,
    store: &ParamStore,
    face: &Tensor,
    anchor: &IdentityAnchor,
) -> Result<Tensor> {
    params.attention.apply(store, face, &anchor.to_tensor())
}
