//! Finite-difference audit of every trainable gradient of the full
//! personalization pipeline, on a model small enough to perturb one
//! element at a time.

use serde::{Deserialize, Serialize};

use crate::diffusion::PretrainSettings;
use crate::error::{Error, Result};
use crate::graph::BackwardFault;
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::testbed::WorldSpec;
use crate::trainer::{BaseModel, ModelSpec, NoiseDraw, TrainConfig, TrainState};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
/// Gate value used during the check. At the initial `gamma = 0` the
/// adapter's attention weights receive exactly zero gradient, which would
/// make their check vacuous.
pub const GATE: f64 = 0.5;

pub const GROUPS: [&str; 4] = ["v_star", "enhancer", "adapter", "kv"];

pub fn group_of(name: &str) -> Option<&'static str> {
    if name.starts_with("concept.") {
        Some("v_star")
    } else if name.starts_with("enhancer.") {
        Some("enhancer")
    } else if name.starts_with("adapter.") {
        Some("adapter")
    } else if name.starts_with("unet.") && (name.ends_with(".key") || name.ends_with(".value")) {
        Some("kv")
    } else {
        None
    }
}

pub fn downscaled_world() -> WorldSpec {
    WorldSpec {
        embed_dim: 8,
        visual_tokens: 2,
        text_tokens: 4,
        identity_dim: 4,
        latent_dim: 4,
        table_size: 16,
        templates: 2,
        noise_scale: 0.05,
        identity_strength: 1.0,
        scene_strength: 1.0,
    }
}

pub fn downscaled_model() -> ModelSpec {
    ModelSpec {
        heads: 2,
        hidden: 8,
        hidden_tokens: 2,
        blocks: 2,
        ff_dim: 8,
        diffusion_steps: 10,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub embed_dim: usize,
    pub step: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
    /// Parameters whose relative error exceeds the tolerance.
    pub offending: Vec<String>,
    pub passed: bool,
}

fn central_difference(state: &mut TrainState, draws: &[NoiseDraw], id: ParamId) -> Result<Tensor> {
    let len = state.store.value(id).len();
    let mut out = vec![0.0; len];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = state.store.value(id).data()[i];
        set_element(&mut state.store, id, i, orig + STEP);
        let (_, plus) = state.objective_into(draws)?;
        set_element(&mut state.store, id, i, orig - STEP);
        let (_, minus) = state.objective_into(draws)?;
        set_element(&mut state.store, id, i, orig);
        *slot = (plus - minus) / (2.0 * STEP);
    }
    let (r, c) = state.store.value(id).shape();
    Tensor::new(r, c, out)
}

fn set_element(store: &mut ParamStore, id: ParamId, i: usize, v: f64) {
    store.get_mut(id).value.data_mut()[i] = v;
}

pub fn gradcheck(cfg: &TrainConfig, fault: Option<BackwardFault>) -> Result<GradcheckReport> {
    let base = BaseModel::build(
        downscaled_world(),
        downscaled_model(),
        PretrainSettings {
            steps: 0,
            batch_size: 1,
            learning_rate: 0.0,
        },
        cfg.seed,
    )?;
    let run = TrainConfig {
        ablation_mode: "full".into(),
        ..cfg.clone()
    };
    let mut state = TrainState::new(&base, &run)?;
    let gamma = state
        .store
        .find("adapter.gamma")
        .ok_or_else(|| Error::contract("full pipeline has no adapter gate"))?;
    state.store.set_value(gamma, Tensor::scalar(GATE));
    let draws = state.draw(&mut Rng::new(cfg.seed, "gradcheck"), 2);

    state.fault = fault;
    state.objective_into(&draws)?;
    let analytic: Vec<_> = state
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.name.clone(), p.grad.clone()))
        .collect();
    state.fault = None;

    let mut checked: Vec<(&'static str, String, Tensor, Tensor)> = Vec::with_capacity(analytic.len());
    for (id, name, grad) in analytic {
        let group = group_of(&name)
            .ok_or_else(|| Error::contract(format!("trainable parameter {name} has no check group")))?;
        let numeric = central_difference(&mut state, &draws, id)?;
        checked.push((group, name, grad, numeric));
    }

    // Errors are taken relative to the largest gradient in the group, so a
    // parameter whose gradient is nearly zero is not judged on roundoff.
    let mut groups = Vec::with_capacity(GROUPS.len());
    let mut offending = Vec::new();
    for group in GROUPS {
        let members: Vec<_> = checked.iter().filter(|c| c.0 == group).collect();
        let scale = members
            .iter()
            .map(|c| c.2.max_abs().max(c.3.max_abs()))
            .fold(0.0, f64::max);
        let rel = |abs: f64| if scale == 0.0 { 0.0 } else { abs / scale };
        let params: Vec<ParamCheck> = members
            .iter()
            .map(|(_, name, grad, numeric)| {
                let abs = grad.max_abs_diff(numeric);
                ParamCheck {
                    name: name.clone(),
                    elements: grad.len(),
                    max_abs_error: abs,
                    max_rel_error: rel(abs),
                }
            })
            .collect();
        let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
        offending.extend(
            params
                .iter()
                .filter(|p| !(p.max_rel_error <= TOLERANCE))
                .map(|p| p.name.clone()),
        );
        groups.push(GroupCheck {
            group: group.to_string(),
            passed: !params.is_empty() && max_rel_error <= TOLERANCE,
            params,
            max_rel_error,
        });
    }
    Ok(GradcheckReport {
        seed: cfg.seed,
        embed_dim: base.testbed.spec.embed_dim,
        step: STEP,
        tolerance: TOLERANCE,
        passed: groups.iter().all(|g| g.passed),
        groups,
        offending,
    })
}
