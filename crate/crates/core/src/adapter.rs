//! Identity adapter: gated fusion of the enhanced identity embedding into the
//! text condition.
//!
//! ```text
//! E~ = E_r W_p^T
//! C~ = [c; E~]                      (N + M) x d
//! C' = first N rows of MHA(C~, C~)
//! c' = c + beta * tanh(gamma) * C'
//! ```
//!
//! `gamma` starts at exactly zero, so the adapter is a bit-exact pass-through
//! until training moves it.

use crate::attention::{AttentionShape, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PREFIX: &str = "adapter";

#[derive(Clone, Debug)]
pub struct AdapterParams {
    /// `d x d`, applied as `E_r W_p^T`.
    pub projection: ParamId,
    pub attention: MultiHeadAttention,
    /// 1x1 learnable gate, initialized to 0.
    pub gamma: ParamId,
    pub beta: f64,
    /// Apply the self-attention a second time to the sliced text rows.
    pub double_attention: bool,
}

impl AdapterParams {
    pub fn init(
        store: &mut ParamStore,
        d: usize,
        heads: usize,
        beta: f64,
        double_attention: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "adapter heads ({heads}) must divide d ({d})"
            )));
        }
        let projection = store.add(
            format!("{PREFIX}.projection"),
            rng.normal_tensor(d, d, 1.0 / (d as f64).sqrt()),
            true,
        );
        let attention = MultiHeadAttention::init(
            store,
            &format!("{PREFIX}.attention"),
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
        let gamma = store.add(format!("{PREFIX}.gamma"), Tensor::scalar(0.0), true);
        Ok(Self {
            projection,
            attention,
            gamma,
            beta,
            double_attention,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        text: NodeId,
        enhanced: NodeId,
    ) -> Result<NodeId> {
        let (n, d) = g.value(text).shape();
        let e_shape = g.value(enhanced).shape();
        if e_shape.1 != d {
            return Err(Error::shape("adapter", (n, d), e_shape));
        }
        let w_p = g.param(store, self.projection);
        let w_p_t = g.transpose(w_p);
        let projected = g.matmul(enhanced, w_p_t)?;
        let combined = g.concat_rows(&[text, projected])?;
        let attended = self.attention.forward(g, store, combined, combined)?;
        let mut text_rows = g.slice_rows(attended, 0, n)?;
        if self.double_attention {
            text_rows = self.attention.forward(g, store, text_rows, text_rows)?;
        }
        let gamma = g.param(store, self.gamma);
        let gate = g.tanh(gamma);
        let gate = g.scale(gate, self.beta);
        let residual = g.mul_scalar(text_rows, gate)?;
        g.add(text, residual)
    }
}

pub fn adapt(
    params: &AdapterParams,
    store: &ParamStore,
    text: &Tensor,
    enhanced: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let t = g.constant(text.clone());
    let e = g.constant(enhanced.clone());
    let out = params.forward(&mut g, store, t, e)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(seed: u64, beta: f64, gamma: f64) -> (ParamStore, AdapterParams) {
        let mut store = ParamStore::new();
        let p = AdapterParams::init(&mut store, 32, 4, beta, false, &mut Rng::new(seed, "adapter")).unwrap();
        store.set_value(p.gamma, Tensor::scalar(gamma));
        (store, p)
    }

    fn inputs(seed: u64) -> (Tensor, Tensor) {
        let mut rng = Rng::new(seed, "adapter-inputs");
        (rng.normal_tensor(8, 32, 0.3), rng.normal_tensor(4, 32, 0.3))
    }

    /// Step-by-step: explicit concat by row copying, then each query row
    /// attends over every key row, then the slice, then the gate.
    fn reference(store: &ParamStore, p: &AdapterParams, text: &Tensor, enhanced: &Tensor) -> Tensor {
        let (n, d) = text.shape();
        let m = enhanced.rows();
        let w_p = store.value(p.projection);
        let mut combined = Tensor::zeros(n + m, d);
        for i in 0..n {
            for c in 0..d {
                combined.set(i, c, text.get(i, c));
            }
        }
        for i in 0..m {
            for c in 0..d {
                let v: f64 = (0..d).map(|k| enhanced.get(i, k) * w_p.get(c, k)).sum();
                combined.set(n + i, c, v);
            }
        }
        let a = &p.attention;
        let d_h = a.head_dim;
        let mut attended = Tensor::zeros(n + m, d);
        for (h, head) in a.heads.iter().enumerate() {
            let q = combined.matmul(store.value(head.query)).unwrap();
            let k = combined.matmul(store.value(head.key)).unwrap();
            let v = combined.matmul(store.value(head.value)).unwrap();
            for i in 0..n + m {
                let logits: Vec<f64> = (0..n + m)
                    .map(|j| (0..d_h).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (d_h as f64).sqrt())
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = w.iter().sum();
                let mixed: Vec<f64> = (0..d_h)
                    .map(|c| (0..n + m).map(|j| w[j] / z * v.get(j, c)).sum())
                    .collect();
                for c in 0..d {
                    let add: f64 = (0..d_h).map(|r| mixed[r] * store.value(a.output).get(h * d_h + r, c)).sum();
                    attended.set(i, c, attended.get(i, c) + add);
                }
            }
        }
        let gate = p.beta * store.value(p.gamma).item().unwrap().tanh();
        let mut out = text.clone();
        for i in 0..n {
            for c in 0..d {
                out.set(i, c, text.get(i, c) + gate * attended.get(i, c));
            }
        }
        out
    }

    #[test]
    fn zero_gamma_is_bitwise_pass_through() {
        let (store, p) = setup(1, 1.0, 0.0);
        let (text, enh) = inputs(1);
        assert!(adapt(&p, &store, &text, &enh).unwrap().bit_eq(&text));
    }

    #[test]
    fn zero_beta_is_pass_through_for_any_gamma() {
        for gamma in [-3.0, 0.5, 10.0] {
            let (store, p) = setup(2, 0.0, gamma);
            let (text, enh) = inputs(2);
            assert!(adapt(&p, &store, &text, &enh).unwrap().bit_eq(&text));
        }
    }

    #[test]
    fn matches_step_by_step_reference() {
        for seed in 0..100 {
            let (store, p) = setup(seed, 1.0, 0.5);
            let (text, enh) = inputs(seed);
            let fused = adapt(&p, &store, &text, &enh).unwrap();
            let slow = reference(&store, &p, &text, &enh);
            assert!(fused.max_abs_diff(&slow) <= 1e-10, "seed {seed}");
        }
    }

    #[test]
    fn residual_scales_with_tanh_gamma() {
        let (text, enh) = inputs(4);
        let residual = |gamma: f64| {
            let (store, p) = setup(4, 1.0, gamma);
            adapt(&p, &store, &text, &enh).unwrap().sub(&text).unwrap()
        };
        let unit = residual(1.0).scale(1.0 / 1.0f64.tanh());
        let mut last = -1.0;
        for gamma in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            let r = residual(gamma);
            assert!(r.max_abs_diff(&unit.scale(f64::tanh(gamma))) < 1e-12);
            let mag = r.max_abs();
            if gamma >= 0.0 {
                assert!(mag > last || gamma == 0.0);
                last = mag;
            }
        }
        assert!((residual(-2.0).max_abs() - residual(2.0).max_abs()).abs() < 1e-12);
    }

    #[test]
    fn deviation_bounded_by_beta() {
        let (text, enh) = inputs(5);
        for (beta, gamma) in [(1.0, 50.0), (0.3, -50.0), (2.0, 0.7)] {
            let (store, p) = setup(5, beta, gamma);
            let out = adapt(&p, &store, &text, &enh).unwrap();
            let mut g = Graph::new();
            let t = g.constant(text.clone());
            let e = g.constant(enh.clone());
            let w_p = g.param(&store, p.projection);
            let w_p_t = g.transpose(w_p);
            let proj = g.matmul(e, w_p_t).unwrap();
            let cat = g.concat_rows(&[t, proj]).unwrap();
            let att = p.attention.forward(&mut g, &store, cat, cat).unwrap();
            let rows = g.value(att).slice_rows(0, 8).unwrap();
            let max_row = (0..8).map(|r| crate::tensor::l2(rows.row(r))).fold(0.0, f64::max);
            let dev = out.sub(&text).unwrap().max_abs();
            assert!(dev <= beta.abs() * gamma.tanh().abs() * max_row + 1e-12);
        }
    }

    #[test]
    fn shape_checks() {
        let (store, p) = setup(1, 1.0, 0.5);
        let text = Tensor::zeros(8, 32);
        assert!(adapt(&p, &store, &text, &Tensor::zeros(4, 31)).is_err());
        assert_eq!(adapt(&p, &store, &text, &Tensor::zeros(3, 32)).unwrap().shape(), (8, 32));
    }

    #[test]
    fn double_attention_variant_differs_but_keeps_shape() {
        let mut store = ParamStore::new();
        let p = AdapterParams::init(&mut store, 32, 4, 1.0, true, &mut Rng::new(1, "adapter")).unwrap();
        store.set_value(p.gamma, Tensor::scalar(0.5));
        let (text, enh) = inputs(1);
        let out = adapt(&p, &store, &text, &enh).unwrap();
        let (store1, p1) = setup(1, 1.0, 0.5);
        let single = adapt(&p1, &store1, &text, &enh).unwrap();
        assert_eq!(out.shape(), (8, 32));
        assert!(out.max_abs_diff(&single) > 1e-6);
    }
}
