//! Personalization: jointly optimizes `v*`, the conditioning strategy's
//! weights, and the cross-attention keys/values of a frozen base denoiser
//! on the noise-prediction loss for one reference latent.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffusion::{noising, pretrain, Denoiser, DenoiserShape, DiffusionSchedule, PretrainSettings};
use crate::embedding::{init_v_star, ConceptEmbedding, PromptTemplate};
use crate::error::{Error, Result};
use crate::graph::{BackwardFault, Graph, NodeId};
use crate::optim::{self, Optimizer};
use crate::param::ParamStore;
use crate::rng::{Rng, GENERATOR};
use crate::strategy::{self, ConditionInputs, ConditioningStrategy, StrategyDims};
use crate::tensor::Tensor;
use crate::testbed::{Testbed, WorldSpec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSpec {
    pub heads: usize,
    pub hidden: usize,
    pub hidden_tokens: usize,
    pub blocks: usize,
    pub ff_dim: usize,
    pub diffusion_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub beta_adapter: f64,
    pub seed: u64,
    pub ablation_mode: String,
    pub optimizer: String,
    pub v_star_noise: f64,
    pub double_attention: bool,
    /// Size of the fixed batch the initial and final losses are measured on.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0015,
            steps: 300,
            batch_size: 8,
            beta_adapter: 1.0,
            seed: 1,
            ablation_mode: "full".into(),
            optimizer: "adam".into(),
            v_star_noise: 0.01,
            double_attention: false,
            eval_batch: 64,
        }
    }
}

impl TrainConfig {
    /// Field name and message of the first violated constraint.
    pub fn violation(&self) -> Option<(&'static str, String)> {
        if self.steps < 1 {
            return Some(("steps", "steps must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Some(("batch_size", "batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Some(("learning_rate", "learning_rate must be > 0".into()));
        }
        if !(self.v_star_noise >= 0.0) {
            return Some(("v_star_noise", "v_star_noise must be >= 0".into()));
        }
        if self.eval_batch < 1 {
            return Some(("eval_batch", "eval_batch must be >= 1".into()));
        }
        if !strategy::registry().contains_key(self.ablation_mode.as_str()) {
            return Some((
                "ablation_mode",
                format!(
                    "unknown ablation mode {:?}; known: {}",
                    self.ablation_mode,
                    strategy::MODES.join(", ")
                ),
            ));
        }
        if !optim::registry().contains_key(self.optimizer.as_str()) {
            return Some(("optimizer", format!("unknown optimizer {:?}", self.optimizer)));
        }
        None
    }

    pub fn validate(&self) -> Result<()> {
        match self.violation() {
            Some((_, msg)) => Err(Error::Config(msg)),
            None => Ok(()),
        }
    }
}

/// The synthetic world plus a denoiser pretrained on it and then frozen.
/// Shared read-only by every personalization run with the same seed.
#[derive(Clone, Debug)]
pub struct BaseModel {
    pub seed: u64,
    /// Head count of the enhancer and adapter attention.
    pub heads: usize,
    pub testbed: Testbed,
    pub denoiser: Denoiser,
    pub store: ParamStore,
    /// Mean loss over the last tenth of pretraining, if any was done.
    pub pretrain_loss: Option<f64>,
}

impl BaseModel {
    pub fn build(world: WorldSpec, model: ModelSpec, settings: PretrainSettings, seed: u64) -> Result<Self> {
        let root = Rng::new(seed, "experiment");
        let testbed = Testbed::build(world, &root.derive("world"))?;
        let schedule = DiffusionSchedule::standard(model.diffusion_steps)?;
        let shape = DenoiserShape {
            latent_dim: testbed.spec.latent_dim,
            hidden: model.hidden,
            hidden_tokens: model.hidden_tokens,
            context_dim: testbed.spec.embed_dim,
            blocks: model.blocks,
            ff_dim: model.ff_dim,
        };
        let mut store = ParamStore::new();
        let denoiser = Denoiser::init(&mut store, shape, schedule, &mut root.derive("denoiser"))?;
        let pretrain_loss = if settings.steps > 0 {
            Some(pretrain(
                &denoiser,
                &mut store,
                settings,
                &mut root.derive("pretrain"),
                |rng| testbed.pretraining_example(rng),
            )?)
        } else {
            None
        };
        Ok(Self {
            seed,
            heads: model.heads,
            testbed,
            denoiser,
            store,
            pretrain_loss,
        })
    }
}

/// One noising draw: a timestep and the noise added at it.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Tensor,
}

pub fn draw_batch(rng: &mut Rng, n: usize, steps: usize, latent_dim: usize) -> Vec<NoiseDraw> {
    (0..n)
        .map(|_| {
            let t = rng.int_inclusive(1, steps);
            NoiseDraw {
                t,
                eps: rng.normal_tensor(1, latent_dim, 1.0),
            }
        })
        .collect()
}

pub struct TrainState<'a> {
    pub base: &'a BaseModel,
    pub store: ParamStore,
    pub concept: ConceptEmbedding,
    pub strategy: Box<dyn ConditioningStrategy>,
    pub optimizer: Box<dyn Optimizer>,
    pub fault: Option<BackwardFault>,
    pub batch_size: usize,
    pub steps_taken: usize,
    target: Tensor,
}

impl<'a> TrainState<'a> {
    pub fn new(base: &'a BaseModel, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let tb = &base.testbed;
        let mut store = base.store.clone();
        base.denoiser.freeze_for_adaptation(&mut store);
        let rng = Rng::new(cfg.seed, "personalize");
        let concept = init_v_star(&mut store, &tb.anchor, &mut rng.derive("v_star"), cfg.v_star_noise)?;
        let dims = StrategyDims {
            d: tb.spec.embed_dim,
            heads: base.heads,
            beta: cfg.beta_adapter,
            double_attention: cfg.double_attention,
        };
        let strategy = strategy::build(&cfg.ablation_mode, &mut store, &dims, &rng.derive("strategy"))?;
        Ok(Self {
            base,
            store,
            concept,
            strategy,
            optimizer: optim::build(&cfg.optimizer, cfg.learning_rate)?,
            fault: None,
            batch_size: cfg.batch_size,
            steps_taken: 0,
            target: tb.reference_latent()?,
        })
    }

    fn inputs(&self) -> ConditionInputs<'_> {
        ConditionInputs {
            face: &self.base.testbed.reference_face,
            anchor: &self.base.testbed.anchor,
        }
    }

    pub fn v_star(&self) -> &Tensor {
        self.store.value(self.concept.v_star)
    }

    /// Encoded prompt with `v*` in the name slot.
    pub fn text_node(&self, g: &mut Graph, template: &PromptTemplate) -> Result<NodeId> {
        let v = g.param(&self.store, self.concept.v_star);
        let tokens = template.tokens_node(g, v)?;
        self.base.testbed.encoder.encode_node(g, tokens)
    }

    pub fn build_context(&self, g: &mut Graph, template: &PromptTemplate) -> Result<NodeId> {
        let text = self.text_node(g, template)?;
        self.strategy.context(g, &self.store, text, &self.inputs())
    }

    pub fn context(&self, template: &PromptTemplate) -> Result<Tensor> {
        let mut g = Graph::new();
        let c = self.build_context(&mut g, template)?;
        Ok(g.value(c).clone())
    }

    pub fn identity_rows(&self) -> Result<Tensor> {
        self.strategy.identity_rows(&self.store, &self.inputs())
    }

    /// Mean over draws of `||eps - eps_hat(z_t, t, context)||^2 / latent_dim`.
    pub fn diffusion_loss(&self, g: &mut Graph, context: NodeId, draws: &[NoiseDraw]) -> Result<NodeId> {
        if draws.is_empty() {
            return Err(Error::contract("loss over an empty batch"));
        }
        let den = &self.base.denoiser;
        let mut total: Option<NodeId> = None;
        for d in draws {
            let z_t = g.constant(noising(&den.schedule, &self.target, d.t, &d.eps)?);
            let eps = g.constant(d.eps.clone());
            let pred = den.predict_noise_node(g, &self.store, z_t, d.t, context)?;
            let se = g.squared_error(pred, eps)?;
            total = Some(match total {
                None => se,
                Some(t) => g.add(t, se)?,
            });
        }
        Ok(g.scale(total.expect("nonempty"), 1.0 / draws.len() as f64))
    }

    pub fn loss_on(&self, draws: &[NoiseDraw]) -> Result<f64> {
        let mut g = Graph::new();
        let c = self.build_context(&mut g, self.base.testbed.train_template())?;
        let loss = self.diffusion_loss(&mut g, c, draws)?;
        g.value(loss).item()
    }

    /// Loss with the encoded prompt fed straight to the denoiser, bypassing
    /// the conditioning strategy.
    pub fn unadapted_loss_on(&self, draws: &[NoiseDraw]) -> Result<f64> {
        let mut g = Graph::new();
        let c = self.text_node(&mut g, self.base.testbed.train_template())?;
        let loss = self.diffusion_loss(&mut g, c, draws)?;
        g.value(loss).item()
    }

    /// Training objective on `draws` with its gradients accumulated into the
    /// store. Returns (diffusion loss, total objective).
    pub fn objective_into(&mut self, draws: &[NoiseDraw]) -> Result<(f64, f64)> {
        self.store.zero_grads();
        let mut g = Graph::with_fault(self.fault);
        let c = self.build_context(&mut g, self.base.testbed.train_template())?;
        let diff = self.diffusion_loss(&mut g, c, draws)?;
        let inputs = self.inputs();
        let total = match self.strategy.auxiliary_loss(&mut g, &self.store, self.v_star(), &inputs)? {
            Some(aux) => g.add(diff, aux)?,
            None => diff,
        };
        let loss = g.value(diff).item()?;
        let objective = g.value(total).item()?;
        if !loss.is_finite() || !objective.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}",
                self.steps_taken + 1
            )));
        }
        g.backward_into(total, &mut self.store)?;
        Ok((loss, objective))
    }

    /// One optimizer update on the given draws. Returns the pre-update
    /// diffusion loss.
    pub fn train_step_on(&mut self, draws: &[NoiseDraw]) -> Result<f64> {
        let (loss, _) = self.objective_into(draws)?;
        self.optimizer.step(&mut self.store);
        if let Some((_, p)) = self.store.iter().find(|(_, p)| p.trainable && !p.value.is_finite()) {
            return Err(Error::Numeric(format!("parameter {} became non-finite", p.name)));
        }
        self.steps_taken += 1;
        Ok(loss)
    }

    pub fn draw(&self, rng: &mut Rng, n: usize) -> Vec<NoiseDraw> {
        let den = &self.base.denoiser;
        draw_batch(rng, n, den.schedule.steps(), den.shape.latent_dim)
    }

    pub fn train_step(&mut self, rng: &mut Rng) -> Result<f64> {
        let draws = self.draw(rng, self.batch_size);
        self.train_step_on(&draws)
    }

    pub fn frozen_digest(&self) -> String {
        self.base.denoiser.frozen_digest(&self.store)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.name.clone())
            .collect()
    }
}

/// Similarity scores of samples from a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub identity_sim: f64,
    pub prompt_sim: f64,
    pub samples: usize,
    /// Samples whose probe output had zero norm and scored 0.
    pub degenerate_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub generator: String,
    pub seed: u64,
    pub ablation_mode: String,
    pub steps: usize,
    pub loss_curve: Vec<f64>,
    /// Losses on a fixed evaluation batch before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// The initial evaluation-batch loss with the strategy bypassed.
    pub unadapted_initial_loss: f64,
    pub pretrain_loss: Option<f64>,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
    pub trainable: Vec<String>,
    pub metrics: Option<Metrics>,
    pub elapsed_s: f64,
    pub config: TrainConfig,
}

pub struct TrainOutcome<'a> {
    pub report: TrainReport,
    pub state: TrainState<'a>,
}

pub fn train_run<'a>(base: &'a BaseModel, cfg: &TrainConfig) -> Result<TrainOutcome<'a>> {
    let mut state = TrainState::new(base, cfg)?;
    let eval_draws = state.draw(&mut Rng::new(cfg.seed, "eval-batch"), cfg.eval_batch);
    let digest_before = state.frozen_digest();
    let initial_loss = state.loss_on(&eval_draws)?;
    let unadapted_initial_loss = state.unadapted_loss_on(&eval_draws)?;
    let mut rng = Rng::new(cfg.seed, "batches");
    let start = Instant::now();
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        loss_curve.push(state.train_step(&mut rng)?);
    }
    let elapsed_s = start.elapsed().as_secs_f64();
    let final_loss = state.loss_on(&eval_draws)?;
    if !final_loss.is_finite() {
        return Err(Error::Numeric("non-finite final loss".into()));
    }
    let report = TrainReport {
        generator: GENERATOR.into(),
        seed: cfg.seed,
        ablation_mode: cfg.ablation_mode.clone(),
        steps: cfg.steps,
        loss_curve,
        initial_loss,
        final_loss,
        unadapted_initial_loss,
        pretrain_loss: base.pretrain_loss,
        frozen_digest_before: digest_before,
        frozen_digest_after: state.frozen_digest(),
        trainable: state.trainable_names(),
        metrics: None,
        elapsed_s,
        config: cfg.clone(),
    };
    Ok(TrainOutcome { report, state })
}
