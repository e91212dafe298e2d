//! Miniature latent diffusion model with cross-attention conditioning.
//!
//! The denoiser is a token MLP with two cross-attention blocks, standing in
//! for a UNet. Its trunk predicts the clean latent; the noise prediction is
//! derived from it through the forward-process identity
//! `eps = (z_t - sqrt(abar_t) * x0) / sqrt(1 - abar_t)`, so the trunk does
//! not have to learn the timestep-dependent gain itself.

use crate::attention::{AttentionShape, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::optim::{Adam, Optimizer};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PREFIX: &str = "unet";

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("diffusion schedule needs at least one step".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("betas must be non-decreasing".into()));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// Linearly spaced betas from `start` to `end` over `steps` steps.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        let betas = if steps == 1 {
            vec![start]
        } else {
            (0..steps)
                .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn standard(steps: usize) -> Result<Self> {
        Self::linear(steps, 1e-4, 0.02)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::contract(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `abar_t` for `t` in `1..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }
}

/// `sqrt(abar) * z0 + sqrt(1 - abar) * eps`.
pub fn forward_noise(alpha_bar: f64, z0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    z0.scale(alpha_bar.sqrt()).add(&eps.scale((1.0 - alpha_bar).sqrt()))
}

pub fn noising(schedule: &DiffusionSchedule, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::shape("noising", z0.shape(), eps.shape()));
    }
    forward_noise(schedule.alpha_bar(t)?, z0, eps)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserShape {
    pub latent_dim: usize,
    pub hidden: usize,
    pub hidden_tokens: usize,
    pub context_dim: usize,
    pub blocks: usize,
    pub ff_dim: usize,
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: ParamId,
    pub down: ParamId,
}

#[derive(Clone, Debug)]
pub struct DenoiserBlock {
    pub cross_attention: MultiHeadAttention,
    pub ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub shape: DenoiserShape,
    pub schedule: DiffusionSchedule,
    /// `latent_dim x (L * hidden)`.
    pub input: ParamId,
    /// `L x hidden`.
    pub position: ParamId,
    /// `T x hidden`, sinusoidal.
    pub time_table: ParamId,
    pub blocks: Vec<DenoiserBlock>,
    /// `(L * hidden) x latent_dim`.
    pub head: ParamId,
}

fn sinusoidal_table(steps: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(steps, dim);
    for step in 0..steps {
        let pos = (step + 1) as f64;
        for i in 0..dim {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let v = if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
            t.set(step, i, v);
        }
    }
    t
}

impl Denoiser {
    /// Freshly initialized denoiser. All of its parameters start frozen;
    /// pretraining and personalization decide what becomes trainable.
    pub fn init(
        store: &mut ParamStore,
        shape: DenoiserShape,
        schedule: DiffusionSchedule,
        rng: &mut Rng,
    ) -> Result<Self> {
        let DenoiserShape {
            latent_dim,
            hidden,
            hidden_tokens,
            context_dim,
            blocks,
            ff_dim,
        } = shape;
        if latent_dim == 0 || hidden == 0 || hidden_tokens == 0 || blocks == 0 {
            return Err(Error::Config("denoiser dimensions must be >= 1".into()));
        }
        let wide = hidden_tokens * hidden;
        let input = store.add(
            format!("{PREFIX}.input"),
            rng.normal_tensor(latent_dim, wide, 1.0 / (latent_dim as f64).sqrt()),
            false,
        );
        let position = store.add(
            format!("{PREFIX}.position"),
            rng.normal_tensor(hidden_tokens, hidden, 0.1),
            false,
        );
        let time_table = store.add(
            format!("{PREFIX}.time"),
            sinusoidal_table(schedule.steps(), hidden),
            false,
        );
        let blocks = (0..blocks)
            .map(|b| DenoiserBlock {
                cross_attention: MultiHeadAttention::init(
                    store,
                    &format!("{PREFIX}.block{b}.cross"),
                    AttentionShape {
                        query_dim: hidden,
                        context_dim,
                        heads: 1,
                        head_dim: hidden,
                        out_dim: hidden,
                    },
                    rng,
                    false,
                ),
                ff: FeedForward {
                    up: store.add(
                        format!("{PREFIX}.block{b}.ff.up"),
                        rng.normal_tensor(hidden, ff_dim, 1.0 / (hidden as f64).sqrt()),
                        false,
                    ),
                    down: store.add(
                        format!("{PREFIX}.block{b}.ff.down"),
                        rng.normal_tensor(ff_dim, hidden, 1.0 / (ff_dim as f64).sqrt()),
                        false,
                    ),
                },
            })
            .collect();
        let head = store.add(
            format!("{PREFIX}.head"),
            rng.normal_tensor(wide, latent_dim, 1.0 / (wide as f64).sqrt()),
            false,
        );
        Ok(Self {
            shape,
            schedule,
            input,
            position,
            time_table,
            blocks,
            head,
        })
    }

    /// Key and value projections of every cross-attention block.
    pub fn key_value_params(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| b.cross_attention.heads.iter().flat_map(|h| [h.key, h.value]))
            .collect()
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.input, self.position, self.time_table];
        for b in &self.blocks {
            for h in &b.cross_attention.heads {
                ids.extend([h.query, h.key, h.value]);
            }
            ids.extend([b.cross_attention.output, b.ff.up, b.ff.down]);
        }
        ids.push(self.head);
        ids
    }

    /// Every denoiser parameter except the cross-attention keys and values.
    pub fn frozen_params(&self) -> Vec<ParamId> {
        let kv = self.key_value_params();
        self.all_params().into_iter().filter(|p| !kv.contains(p)).collect()
    }

    /// Marks exactly the cross-attention key/value projections trainable.
    pub fn freeze_for_adaptation(&self, store: &mut ParamStore) {
        for id in self.all_params() {
            store.get_mut(id).trainable = false;
        }
        for id in self.key_value_params() {
            store.get_mut(id).trainable = true;
        }
    }

    /// Digest of the frozen base weights.
    pub fn frozen_digest(&self, store: &ParamStore) -> String {
        let frozen = self.frozen_params();
        let names: Vec<&str> = frozen.iter().map(|id| store.get(*id).name.as_str()).collect();
        store.digest(|p| names.contains(&p.name.as_str()))
    }

    /// `hidden + softmax(Q K^T / sqrt(d_h)) V W_o` for one block.
    pub fn cross_attn(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        block: usize,
        hidden: NodeId,
        context: NodeId,
    ) -> Result<NodeId> {
        let b = self
            .blocks
            .get(block)
            .ok_or_else(|| Error::contract(format!("no block {block}")))?;
        let attended = b.cross_attention.forward(g, store, hidden, context)?;
        g.add(hidden, attended)
    }

    fn feed_forward(&self, g: &mut Graph, store: &ParamStore, block: usize, hidden: NodeId) -> Result<NodeId> {
        let ff = &self.blocks[block].ff;
        let up = g.param(store, ff.up);
        let down = g.param(store, ff.down);
        let a = g.matmul(hidden, up)?;
        let a = g.tanh(a);
        let a = g.matmul(a, down)?;
        g.add(hidden, a)
    }

    /// Trunk output: the predicted clean latent.
    pub fn predict_x0_node(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_t: NodeId,
        t: usize,
        context: NodeId,
    ) -> Result<NodeId> {
        let s = self.shape;
        let z_shape = g.value(z_t).shape();
        if z_shape != (1, s.latent_dim) {
            return Err(Error::shape("predict_noise latent", z_shape, (1, s.latent_dim)));
        }
        let c_shape = g.value(context).shape();
        if c_shape.1 != s.context_dim || c_shape.0 == 0 {
            return Err(Error::shape("predict_noise context", c_shape, (c_shape.0.max(1), s.context_dim)));
        }
        self.schedule.check(t)?;
        let input = g.param(store, self.input);
        let flat = g.matmul(z_t, input)?;
        let tokens = g.reshape(flat, s.hidden_tokens, s.hidden)?;
        let time_row = store.value(self.time_table).slice_rows(t - 1, 1)?;
        let time = Tensor::ones(s.hidden_tokens, 1).matmul(&time_row)?;
        let time = g.constant(time);
        let position = g.param(store, self.position);
        let mut h = g.add(tokens, position)?;
        h = g.add(h, time)?;
        for b in 0..self.blocks.len() {
            h = self.cross_attn(g, store, b, h, context)?;
            h = self.feed_forward(g, store, b, h)?;
        }
        let flat = g.reshape(h, 1, s.hidden_tokens * s.hidden)?;
        let head = g.param(store, self.head);
        g.matmul(flat, head)
    }

    pub fn predict_noise_node(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_t: NodeId,
        t: usize,
        context: NodeId,
    ) -> Result<NodeId> {
        let x0 = self.predict_x0_node(g, store, z_t, t, context)?;
        let abar = self.schedule.alpha_bar(t)?;
        let signal = g.scale(x0, abar.sqrt());
        let residual = g.sub(z_t, signal)?;
        Ok(g.scale(residual, 1.0 / (1.0 - abar).sqrt()))
    }

    pub fn predict_noise(
        &self,
        store: &ParamStore,
        z_t: &Tensor,
        t: usize,
        context: &Tensor,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let z = g.constant(z_t.clone());
        let c = g.constant(context.clone());
        let out = self.predict_noise_node(&mut g, store, z, t, c)?;
        Ok(g.value(out).clone())
    }

    /// Ancestral sampling from `z_T ~ N(0, I)` down to `z_0`.
    pub fn sample(&self, store: &ParamStore, context: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let sched = &self.schedule;
        let mut z = rng.normal_tensor(1, self.shape.latent_dim, 1.0);
        for t in (1..=sched.steps()).rev() {
            let eps = self.predict_noise(store, &z, t, context)?;
            let beta = sched.beta(t)?;
            let abar = sched.alpha_bar(t)?;
            let mean = z
                .sub(&eps.scale(beta / (1.0 - abar).sqrt()))?
                .scale(1.0 / (1.0 - beta).sqrt());
            z = if t > 1 {
                let abar_prev = sched.alpha_bar(t - 1)?;
                let var = beta * (1.0 - abar_prev) / (1.0 - abar);
                mean.add(&rng.normal_tensor(1, self.shape.latent_dim, var.sqrt()))?
            } else {
                mean
            };
            if !z.is_finite() {
                return Err(Error::Numeric(format!("sample diverged at t={t}")));
            }
        }
        Ok(z)
    }
}

/// One pretraining example: a conditioning context and its clean latent.
pub struct PretrainExample {
    pub context: Tensor,
    pub latent: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

/// Fits every denoiser parameter on clean-latent regression over examples
/// drawn from `data`, then leaves all of them frozen. Returns the mean loss
/// of the last tenth of steps.
pub fn pretrain(
    denoiser: &Denoiser,
    store: &mut ParamStore,
    settings: PretrainSettings,
    rng: &mut Rng,
    mut data: impl FnMut(&mut Rng) -> Result<PretrainExample>,
) -> Result<f64> {
    let ids = denoiser.all_params();
    let saved: Vec<(ParamId, bool)> = store.iter().map(|(id, p)| (id, p.trainable)).collect();
    store.set_all_trainable(false);
    for id in &ids {
        store.get_mut(*id).trainable = true;
    }
    let mut opt = Adam::new(settings.learning_rate);
    let mut data_rng = rng.derive("data");
    let mut noise_rng = rng.derive("noise");
    let tail = (settings.steps / 10).max(1);
    let mut tail_loss = 0.0;
    let steps = denoiser.schedule.steps();
    for step in 0..settings.steps {
        store.zero_grads();
        let mut g = Graph::new();
        let mut items = Vec::with_capacity(settings.batch_size);
        for _ in 0..settings.batch_size {
            let ex = data(&mut data_rng)?;
            let t = noise_rng.int_inclusive(1, steps);
            let eps = noise_rng.normal_tensor(1, denoiser.shape.latent_dim, 1.0);
            let z_t = noising(&denoiser.schedule, &ex.latent, t, &eps)?;
            let z = g.constant(z_t);
            let c = g.constant(ex.context);
            let target = g.constant(ex.latent);
            let x0 = denoiser.predict_x0_node(&mut g, store, z, t, c)?;
            items.push(g.squared_error(x0, target)?);
        }
        let mut total = items[0];
        for it in &items[1..] {
            total = g.add(total, *it)?;
        }
        let loss = g.scale(total, 1.0 / settings.batch_size as f64);
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("pretraining loss non-finite at step {step}")));
        }
        if step + tail >= settings.steps {
            tail_loss += value / tail as f64;
        }
        g.backward_into(loss, store)?;
        opt.step(store);
    }
    store.zero_grads();
    for (id, was) in saved {
        store.get_mut(id).trainable = was;
    }
    for id in &ids {
        store.get_mut(*id).trainable = false;
    }
    Ok(tail_loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> DenoiserShape {
        DenoiserShape {
            latent_dim: 16,
            hidden: 32,
            hidden_tokens: 4,
            context_dim: 32,
            blocks: 2,
            ff_dim: 64,
        }
    }

    fn setup(seed: u64) -> (ParamStore, Denoiser) {
        let mut store = ParamStore::new();
        let d = Denoiser::init(
            &mut store,
            shape(),
            DiffusionSchedule::standard(100).unwrap(),
            &mut Rng::new(seed, "unet"),
        )
        .unwrap();
        (store, d)
    }

    #[test]
    fn schedule_is_monotone() {
        let s = DiffusionSchedule::standard(100).unwrap();
        assert!(s.betas.windows(2).all(|w| w[0] <= w[1]));
        assert!(s.alpha_bars.windows(2).all(|w| w[0] > w[1]));
        assert!(s.alpha_bars.iter().all(|a| *a > 0.0 && *a < 1.0));
        assert!((s.betas[0] - 1e-4).abs() < 1e-18);
        assert!((s.betas[99] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn schedule_rejects_bad_betas() {
        assert!(DiffusionSchedule::from_betas(vec![]).is_err());
        assert!(DiffusionSchedule::from_betas(vec![0.0]).is_err());
        assert!(DiffusionSchedule::from_betas(vec![0.2, 0.1]).is_err());
    }

    #[test]
    fn noising_limits_and_analytic_case() {
        let mut rng = Rng::new(1, "n");
        let z0 = rng.normal_tensor(1, 16, 1.0);
        let eps = rng.normal_tensor(1, 16, 1.0);
        assert!(forward_noise(1.0, &z0, &eps).unwrap().bit_eq(&z0));
        assert!(forward_noise(0.0, &z0, &eps).unwrap().bit_eq(&eps));
        assert!(forward_noise(1e-300, &z0, &eps).unwrap().max_abs_diff(&eps) < 1e-12);

        let s = DiffusionSchedule::standard(100).unwrap();
        let zero = Tensor::zeros(1, 16);
        let zt = noising(&s, &zero, 50, &eps).unwrap();
        let expected = eps.scale((1.0 - s.alpha_bar(50).unwrap()).sqrt());
        assert!(zt.max_abs_diff(&expected) < 1e-15);
        assert!(noising(&s, &zero, 0, &eps).is_err());
        assert!(noising(&s, &zero, 101, &eps).is_err());
    }

    #[test]
    fn noising_is_linear() {
        let s = DiffusionSchedule::standard(100).unwrap();
        let mut rng = Rng::new(2, "lin");
        let (a0, a1) = (rng.normal_tensor(1, 8, 1.0), rng.normal_tensor(1, 8, 1.0));
        let (e0, e1) = (rng.normal_tensor(1, 8, 1.0), rng.normal_tensor(1, 8, 1.0));
        let (p, q) = (0.3, -1.7);
        for t in [1, 37, 100] {
            let lhs = noising(
                &s,
                &a0.scale(p).add(&a1.scale(q)).unwrap(),
                t,
                &e0.scale(p).add(&e1.scale(q)).unwrap(),
            )
            .unwrap();
            let rhs = noising(&s, &a0, t, &e0)
                .unwrap()
                .scale(p)
                .add(&noising(&s, &a1, t, &e1).unwrap().scale(q))
                .unwrap();
            assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
        }
    }

    #[test]
    fn identical_context_rows_give_identical_attention_rows() {
        let (store, d) = setup(3);
        let mut rng = Rng::new(3, "x");
        let hidden = rng.normal_tensor(4, 32, 1.0);
        let row = rng.normal_vec(32, 1.0);
        let rows: Vec<&[f64]> = (0..8).map(|_| row.as_slice()).collect();
        let context = Tensor::from_rows(&rows);
        let attn = &d.blocks[0].cross_attention;
        let out = attn.apply(&store, &hidden, &context).unwrap();
        for r in 1..4 {
            let diff = Tensor::row_vector(out.row(r)).max_abs_diff(&Tensor::row_vector(out.row(0)));
            assert!(diff < 1e-12);
        }
        for w in attn.weights(&store, &hidden, &context).unwrap() {
            for r in 0..w.rows() {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-14);
            }
        }
    }

    /// Residual cross-attention computed with plain loops.
    fn reference_cross_attn(store: &ParamStore, d: &Denoiser, hidden: &Tensor, ctx: &Tensor) -> Tensor {
        let a = &d.blocks[0].cross_attention;
        let h = &a.heads[0];
        let (wq, wk, wv, wo) = (store.value(h.query), store.value(h.key), store.value(h.value), store.value(a.output));
        let dh = a.head_dim;
        let mut out = hidden.clone();
        for i in 0..hidden.rows() {
            let q: Vec<f64> = (0..dh).map(|c| (0..hidden.cols()).map(|r| hidden.get(i, r) * wq.get(r, c)).sum()).collect();
            let mut logits = Vec::new();
            for j in 0..ctx.rows() {
                let k: Vec<f64> = (0..dh).map(|c| (0..ctx.cols()).map(|r| ctx.get(j, r) * wk.get(r, c)).sum()).collect();
                logits.push(q.iter().zip(&k).map(|(x, y)| x * y).sum::<f64>() / (dh as f64).sqrt());
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = w.iter().sum();
            let mut mixed = vec![0.0; dh];
            for j in 0..ctx.rows() {
                for c in 0..dh {
                    let v: f64 = (0..ctx.cols()).map(|r| ctx.get(j, r) * wv.get(r, c)).sum();
                    mixed[c] += w[j] / z * v;
                }
            }
            for c in 0..hidden.cols() {
                let add: f64 = (0..dh).map(|r| mixed[r] * wo.get(r, c)).sum();
                out.set(i, c, out.get(i, c) + add);
            }
        }
        out
    }

    #[test]
    fn cross_attn_matches_reference() {
        for seed in 0..100 {
            let (store, d) = setup(seed);
            let mut rng = Rng::new(seed, "ca");
            let hidden = rng.normal_tensor(4, 32, 1.0);
            let ctx = rng.normal_tensor(8, 32, 0.5);
            let mut g = Graph::new();
            let h = g.constant(hidden.clone());
            let c = g.constant(ctx.clone());
            let out = d.cross_attn(&mut g, &store, 0, h, c).unwrap();
            let slow = reference_cross_attn(&store, &d, &hidden, &ctx);
            assert!(g.value(out).max_abs_diff(&slow) <= 1e-10);
        }
    }

    #[test]
    fn predict_noise_deterministic_and_shaped() {
        let (store, d) = setup(4);
        let mut rng = Rng::new(4, "p");
        let z = rng.normal_tensor(1, 16, 1.0);
        let ctx = rng.normal_tensor(8, 32, 0.3);
        let a = d.predict_noise(&store, &z, 10, &ctx).unwrap();
        let b = d.predict_noise(&store, &z, 10, &ctx).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.shape(), (1, 16));
        // N + M context rows are accepted too
        let wide = rng.normal_tensor(12, 32, 0.3);
        assert_eq!(d.predict_noise(&store, &z, 10, &wide).unwrap().shape(), (1, 16));
        assert!(d.predict_noise(&store, &z, 0, &ctx).is_err());
        assert!(d.predict_noise(&store, &Tensor::zeros(1, 15), 1, &ctx).is_err());
    }

    #[test]
    fn predict_noise_shape_for_other_latent_sizes() {
        for latent_dim in [1, 5, 24] {
            let mut store = ParamStore::new();
            let d = Denoiser::init(
                &mut store,
                DenoiserShape { latent_dim, ..shape() },
                DiffusionSchedule::standard(10).unwrap(),
                &mut Rng::new(1, "u"),
            )
            .unwrap();
            let z = Tensor::ones(1, latent_dim);
            let out = d.predict_noise(&store, &z, 3, &Tensor::ones(8, 32)).unwrap();
            assert_eq!(out.shape(), (1, latent_dim));
        }
    }

    #[test]
    fn predict_noise_finite_for_large_inputs() {
        let (store, d) = setup(5);
        let mut rng = Rng::new(5, "big");
        for scale in [1.0, 10.0, 100.0, 1e3] {
            let z = rng.normal_tensor(1, 16, scale);
            let ctx = rng.normal_tensor(8, 32, scale);
            for t in [1, 50, 100] {
                assert!(d.predict_noise(&store, &z, t, &ctx).unwrap().is_finite(), "scale {scale} t {t}");
            }
        }
    }

    #[test]
    fn sample_is_deterministic_and_single_step_works() {
        let (store, d) = setup(6);
        let ctx = Rng::new(6, "c").normal_tensor(8, 32, 0.3);
        let a = d.sample(&store, &ctx, &mut Rng::new(1, "s")).unwrap();
        let b = d.sample(&store, &ctx, &mut Rng::new(1, "s")).unwrap();
        assert!(a.bit_eq(&b));

        let mut store1 = ParamStore::new();
        let d1 = Denoiser::init(&mut store1, shape(), DiffusionSchedule::standard(1).unwrap(), &mut Rng::new(1, "u")).unwrap();
        let mut rng = Rng::new(2, "s");
        let z_t = Rng::new(2, "s").normal_tensor(1, 16, 1.0);
        let sampled = d1.sample(&store1, &ctx, &mut rng).unwrap();
        let eps = d1.predict_noise(&store1, &z_t, 1, &ctx).unwrap();
        let beta = d1.schedule.beta(1).unwrap();
        let manual = z_t.sub(&eps.scale(beta / beta.sqrt())).unwrap().scale(1.0 / (1.0 - beta).sqrt());
        assert!(sampled.max_abs_diff(&manual) < 1e-12);
    }

    #[test]
    fn key_value_is_the_only_adaptable_set() {
        let (mut store, d) = setup(7);
        d.freeze_for_adaptation(&mut store);
        let trainable = store.trainable_ids();
        assert_eq!(trainable.len(), 4);
        for id in trainable {
            let name = &store.get(id).name;
            assert!(name.ends_with(".key") || name.ends_with(".value"), "{name}");
        }
        assert_eq!(d.frozen_params().len() + 4, d.all_params().len());
    }
}
