//! Conditioning strategies: how the encoded prompt and the face embedding
//! become the context the denoiser attends over. Each ablation mode is one
//! registered strategy.

use std::collections::BTreeMap;

use crate::adapter::{self, AdapterParams};
use crate::embedding::IdentityAnchor;
use crate::enhancer::{self, EnhancerParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Strategy names in ablation-table order.
pub const MODES: [&str; 4] = ["naive_concat", "no_ide", "no_ida", "full"];

pub const FACE_PREFIX: &str = "face";

/// Weight of the alignment loss used when the adapter is bypassed.
pub const AUXILIARY_WEIGHT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrategyDims {
    pub d: usize,
    pub heads: usize,
    pub beta: f64,
    pub double_attention: bool,
}

pub struct ConditionInputs<'a> {
    pub face: &'a Tensor,
    pub anchor: &'a IdentityAnchor,
}

pub trait ConditioningStrategy: Send {
    fn name(&self) -> &'static str;

    /// Context rows, given the encoded text condition.
    fn context(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        text: NodeId,
        inputs: &ConditionInputs,
    ) -> Result<NodeId>;

    /// Face-derived rows for the alignment diagnostic.
    fn identity_rows(&self, store: &ParamStore, inputs: &ConditionInputs) -> Result<Tensor>;

    /// Extra training term, added to the diffusion loss.
    fn auxiliary_loss(
        &self,
        _g: &mut Graph,
        _store: &ParamStore,
        _v_star: &Tensor,
        _inputs: &ConditionInputs,
    ) -> Result<Option<NodeId>> {
        Ok(None)
    }

    fn adapter(&self) -> Option<&AdapterParams> {
        None
    }
}

/// `E_f W`, a plain learned linear map of the face tokens.
#[derive(Clone, Copy, Debug)]
pub struct FaceProjection {
    pub weight: ParamId,
}

impl FaceProjection {
    pub fn init(store: &mut ParamStore, d: usize, rng: &mut Rng) -> Self {
        let weight = store.add(
            format!("{FACE_PREFIX}.projection"),
            rng.normal_tensor(d, d, 1.0 / (d as f64).sqrt()),
            true,
        );
        Self { weight }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, face: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        g.matmul(face, w)
    }

    pub fn apply(&self, store: &ParamStore, face: &Tensor) -> Result<Tensor> {
        face.matmul(store.value(self.weight))
    }
}

fn enhanced_node(
    enh: &EnhancerParams,
    g: &mut Graph,
    store: &ParamStore,
    inputs: &ConditionInputs,
) -> Result<NodeId> {
    let face = g.constant(inputs.face.clone());
    let anchor = g.constant(inputs.anchor.to_tensor());
    enh.forward(g, store, face, anchor)
}

pub struct Full {
    pub enhancer: EnhancerParams,
    pub adapter: AdapterParams,
}

impl ConditioningStrategy for Full {
    fn name(&self) -> &'static str {
        "full"
    }

    fn context(&self, g: &mut Graph, store: &ParamStore, text: NodeId, inputs: &ConditionInputs) -> Result<NodeId> {
        let e_r = enhanced_node(&self.enhancer, g, store, inputs)?;
        self.adapter.forward(g, store, text, e_r)
    }

    fn identity_rows(&self, store: &ParamStore, inputs: &ConditionInputs) -> Result<Tensor> {
        enhancer::enhance(&self.enhancer, store, inputs.face, inputs.anchor)
    }

    fn adapter(&self) -> Option<&AdapterParams> {
        Some(&self.adapter)
    }
}

pub struct NaiveConcat {
    pub projection: FaceProjection,
}

impl ConditioningStrategy for NaiveConcat {
    fn name(&self) -> &'static str {
        "naive_concat"
    }

    fn context(&self, g: &mut Graph, store: &ParamStore, text: NodeId, inputs: &ConditionInputs) -> Result<NodeId> {
        let face = g.constant(inputs.face.clone());
        let projected = self.projection.forward(g, store, face)?;
        g.concat_rows(&[text, projected])
    }

    fn identity_rows(&self, store: &ParamStore, inputs: &ConditionInputs) -> Result<Tensor> {
        self.projection.apply(store, inputs.face)
    }
}

pub struct NoEnhancer {
    pub projection: FaceProjection,
    pub adapter: AdapterParams,
}

impl ConditioningStrategy for NoEnhancer {
    fn name(&self) -> &'static str {
        "no_ide"
    }

    fn context(&self, g: &mut Graph, store: &ParamStore, text: NodeId, inputs: &ConditionInputs) -> Result<NodeId> {
        let face = g.constant(inputs.face.clone());
        let projected = self.projection.forward(g, store, face)?;
        self.adapter.forward(g, store, text, projected)
    }

    fn identity_rows(&self, store: &ParamStore, inputs: &ConditionInputs) -> Result<Tensor> {
        self.projection.apply(store, inputs.face)
    }

    fn adapter(&self) -> Option<&AdapterParams> {
        Some(&self.adapter)
    }
}

/// The text condition is used unchanged. The enhancer is still trained, but
/// only by pulling its rows toward the current `v*`, which is held constant
/// inside that term.
pub struct NoAdapter {
    pub enhancer: EnhancerParams,
}

impl ConditioningStrategy for NoAdapter {
    fn name(&self) -> &'static str {
        "no_ida"
    }

    fn context(&self, _g: &mut Graph, _store: &ParamStore, text: NodeId, _inputs: &ConditionInputs) -> Result<NodeId> {
        Ok(text)
    }

    fn identity_rows(&self, store: &ParamStore, inputs: &ConditionInputs) -> Result<Tensor> {
        enhancer::enhance(&self.enhancer, store, inputs.face, inputs.anchor)
    }

    fn auxiliary_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        v_star: &Tensor,
        inputs: &ConditionInputs,
    ) -> Result<Option<NodeId>> {
        let e_r = enhanced_node(&self.enhancer, g, store, inputs)?;
        let rows = g.value(e_r).rows();
        let target = Tensor::concat_rows(&vec![v_star; rows.div_ceil(v_star.rows())])?
            .slice_rows(0, rows)?;
        let target = g.constant(target);
        let loss = g.squared_error(e_r, target)?;
        Ok(Some(g.scale(loss, AUXILIARY_WEIGHT)))
    }
}

// Every strategy draws the same component from the same named stream, so
// modes sharing a component start from identical weights.
fn init_enhancer(store: &mut ParamStore, dims: &StrategyDims, rng: &Rng) -> Result<EnhancerParams> {
    EnhancerParams::init(store, dims.d, dims.heads, &mut rng.derive(enhancer::PREFIX))
}

fn init_adapter(store: &mut ParamStore, dims: &StrategyDims, rng: &Rng) -> Result<AdapterParams> {
    AdapterParams::init(
        store,
        dims.d,
        dims.heads,
        dims.beta,
        dims.double_attention,
        &mut rng.derive(adapter::PREFIX),
    )
}

fn init_projection(store: &mut ParamStore, dims: &StrategyDims, rng: &Rng) -> FaceProjection {
    FaceProjection::init(store, dims.d, &mut rng.derive(FACE_PREFIX))
}

type StrategyCtor = fn(&mut ParamStore, &StrategyDims, &Rng) -> Result<Box<dyn ConditioningStrategy>>;

pub fn registry() -> BTreeMap<&'static str, StrategyCtor> {
    let mut r: BTreeMap<&'static str, StrategyCtor> = BTreeMap::new();
    r.insert("full", |s, d, rng| {
        Ok(Box::new(Full {
            enhancer: init_enhancer(s, d, rng)?,
            adapter: init_adapter(s, d, rng)?,
        }))
    });
    r.insert("naive_concat", |s, d, rng| {
        Ok(Box::new(NaiveConcat {
            projection: init_projection(s, d, rng),
        }))
    });
    r.insert("no_ide", |s, d, rng| {
        Ok(Box::new(NoEnhancer {
            projection: init_projection(s, d, rng),
            adapter: init_adapter(s, d, rng)?,
        }))
    });
    r.insert("no_ida", |s, d, rng| {
        Ok(Box::new(NoAdapter {
            enhancer: init_enhancer(s, d, rng)?,
        }))
    });
    r
}

pub fn build(
    name: &str,
    store: &mut ParamStore,
    dims: &StrategyDims,
    rng: &Rng,
) -> Result<Box<dyn ConditioningStrategy>> {
    let r = registry();
    let ctor = r.get(name).ok_or_else(|| {
        Error::Config(format!(
            "unknown ablation mode {name:?}; known: {}",
            MODES.join(", ")
        ))
    })?;
    ctor(store, dims, rng)
}
