//! Synthetic text and face embedding spaces.
//!
//! Stand-ins for a CLIP token table, a CLIP-like text encoder, and a face
//! recognition network, small enough to run on a laptop CPU.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{l2, Tensor};

/// Strength of the direction shared by all name tokens of one slot.
///
/// Real name embeddings cluster in a "person name" region; isotropic unit
/// vectors would average to nearly zero and the anchor would carry no
/// information.
pub const NAME_COHERENCE: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct NameEntry {
    pub first: Vec<f64>,
    pub last: Vec<f64>,
}

impl NameEntry {
    /// The two tokens stacked as a 2 x d tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_rows(&[&self.first, &self.last])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbeddingTable {
    pub dim: usize,
    pub entries: Vec<NameEntry>,
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = l2(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Draws one name: per slot, `normalize(coherence * shared + g / sqrt(d))`.
fn draw_name(rng: &mut Rng, shared: &[Vec<f64>; 2], coherence: f64) -> NameEntry {
    let d = shared[0].len();
    let mut token = |slot: usize| {
        let g = rng.normal_vec(d, 1.0 / (d as f64).sqrt());
        unit(
            g.iter()
                .zip(&shared[slot])
                .map(|(a, s)| a + coherence * s)
                .collect(),
        )
    };
    let first = token(0);
    let last = token(1);
    NameEntry { first, last }
}

/// Generates names from a shared per-slot direction. Keeping the generator
/// around lets callers draw fresh names from the same distribution.
#[derive(Clone, Debug)]
pub struct NameDistribution {
    shared: [Vec<f64>; 2],
    coherence: f64,
}

impl NameDistribution {
    pub fn new(d: usize, coherence: f64, rng: &mut Rng) -> Result<Self> {
        if d == 0 {
            return Err(Error::contract("embedding dimension must be >= 1"));
        }
        let shared = [unit(rng.normal_vec(d, 1.0)), unit(rng.normal_vec(d, 1.0))];
        Ok(Self { shared, coherence })
    }

    pub fn dim(&self) -> usize {
        self.shared[0].len()
    }

    pub fn draw(&self, rng: &mut Rng) -> NameEntry {
        draw_name(rng, &self.shared, self.coherence)
    }
}

/// `m` names with two unit-norm token vectors each.
pub fn build_table(m: usize, d: usize, rng: &mut Rng) -> Result<TokenEmbeddingTable> {
    let dist = NameDistribution::new(d, NAME_COHERENCE, &mut rng.derive("shared"))?;
    build_table_from(&dist, m, rng)
}

pub fn build_table_from(
    dist: &NameDistribution,
    m: usize,
    rng: &mut Rng,
) -> Result<TokenEmbeddingTable> {
    if m == 0 {
        return Err(Error::contract("name table needs at least one entry"));
    }
    let mut names = rng.derive("names");
    Ok(TokenEmbeddingTable {
        dim: dist.dim(),
        entries: (0..m).map(|_| dist.draw(&mut names)).collect(),
    })
}

/// Mean first-name and last-name token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityAnchor {
    pub first: Vec<f64>,
    pub last: Vec<f64>,
}

impl IdentityAnchor {
    pub fn dim(&self) -> usize {
        self.first.len()
    }

    /// `[v_f; v_l]` as a 2 x d tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_rows(&[&self.first, &self.last])
    }
}

pub fn build_anchor(table: &TokenEmbeddingTable) -> Result<IdentityAnchor> {
    if table.entries.is_empty() {
        return Err(Error::contract("anchor of an empty table"));
    }
    let d = table.dim;
    let m = table.entries.len() as f64;
    let mut first = vec![0.0; d];
    let mut last = vec![0.0; d];
    for e in &table.entries {
        for i in 0..d {
            first[i] += e.first[i];
            last[i] += e.last[i];
        }
    }
    first.iter_mut().chain(last.iter_mut()).for_each(|v| *v /= m);
    Ok(IdentityAnchor { first, last })
}

/// Synthetic identity space with a frozen face encoder and latent probe.
///
/// Identities are vectors in `R^k`. An identity is rendered into the latent
/// space through `latent_embed` (orthonormal columns), and `latent_probe` is
/// its transpose, so the probe recovers the identity component of a latent
/// exactly.
#[derive(Clone, Debug)]
pub struct IdentityWorld {
    pub identity_dim: usize,
    pub visual_tokens: usize,
    pub embed_dim: usize,
    pub u_ref: Vec<f64>,
    /// `k x (M*d)`; `E_f = reshape(u * face_map, M, d)`.
    pub face_map: Tensor,
    /// `latent_dim x k`; `probe(z) = z * latent_probe`.
    pub latent_probe: Tensor,
    pub noise_scale: f64,
}

impl IdentityWorld {
    pub fn new(
        identity_dim: usize,
        visual_tokens: usize,
        embed_dim: usize,
        latent_dim: usize,
        noise_scale: f64,
        u_ref: Vec<f64>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if latent_dim < identity_dim {
            return Err(Error::Config(format!(
                "latent_dim ({latent_dim}) must be >= identity_dim ({identity_dim})"
            )));
        }
        if u_ref.len() != identity_dim {
            return Err(Error::shape("identity world u_ref", (1, u_ref.len()), (1, identity_dim)));
        }
        if noise_scale < 0.0 {
            return Err(Error::Config("noise_scale must be >= 0".into()));
        }
        // Unit-norm identities give face tokens of about unit norm, the same
        // scale as name tokens, as a normalized recognition embedding would.
        let std = 1.0 / (embed_dim as f64).sqrt();
        let face_map = rng
            .derive("face_map")
            .normal_tensor(identity_dim, visual_tokens * embed_dim, std);
        let latent_probe = rng
            .derive("latent_embed")
            .orthonormal_columns(latent_dim, identity_dim);
        Ok(Self {
            identity_dim,
            visual_tokens,
            embed_dim,
            u_ref,
            face_map,
            latent_probe,
            noise_scale,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_probe.rows()
    }

    /// Identity rendered into latent space, `u * latent_probe^T`.
    pub fn render_identity(&self, u: &[f64]) -> Result<Tensor> {
        Tensor::row_vector(u).matmul(&self.latent_probe.transpose())
    }

    pub fn probe(&self, latent: &Tensor) -> Result<Tensor> {
        latent.matmul(&self.latent_probe)
    }
}

/// `E_f = face_map(u) + noise_scale * N(0, I)`, shape `M x d`.
pub fn encode_face(world: &IdentityWorld, u: &[f64], rng: &mut Rng) -> Result<Tensor> {
    if u.len() != world.identity_dim {
        return Err(Error::shape("encode_face", (1, u.len()), (1, world.identity_dim)));
    }
    let flat = Tensor::row_vector(u).matmul(&world.face_map)?;
    let clean = flat.reshape(world.visual_tokens, world.embed_dim)?;
    if world.noise_scale == 0.0 {
        return Ok(clean);
    }
    let noise = rng.normal_tensor(world.visual_tokens, world.embed_dim, world.noise_scale);
    clean.add(&noise)
}

/// The learnable two-token embedding of the new concept.
#[derive(Clone, Copy, Debug)]
pub struct ConceptEmbedding {
    pub v_star: ParamId,
}

pub fn init_v_star(
    store: &mut ParamStore,
    anchor: &IdentityAnchor,
    rng: &mut Rng,
    noise: f64,
) -> Result<ConceptEmbedding> {
    if noise < 0.0 {
        return Err(Error::contract("v* init noise must be >= 0"));
    }
    let mut value = anchor.to_tensor();
    if noise > 0.0 {
        let offset = rng.normal_tensor(2, anchor.dim(), noise);
        value = value.add(&offset)?;
    }
    Ok(ConceptEmbedding {
        v_star: store.add("concept.v_star", value, true),
    })
}

/// Frozen linear text encoder: `c = token_mix * tokens * channel_mix`.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_mix: Tensor,
    pub channel_mix: Tensor,
}

impl TextEncoder {
    pub fn new(tokens: usize, d: usize, rng: &mut Rng) -> Self {
        let mix = rng.normal_tensor(tokens, tokens, 0.5 / (tokens as f64).sqrt());
        let token_mix = Tensor::identity(tokens).add(&mix).expect("square");
        let channel_mix = rng.orthonormal_columns(d, d);
        Self {
            token_mix,
            channel_mix,
        }
    }

    pub fn encode_node(&self, g: &mut Graph, tokens: NodeId) -> Result<NodeId> {
        let tm = g.constant(self.token_mix.clone());
        let cm = g.constant(self.channel_mix.clone());
        let mixed = g.matmul(tm, tokens)?;
        g.matmul(mixed, cm)
    }

    pub fn encode(&self, tokens: &Tensor) -> Result<Tensor> {
        self.token_mix.matmul(tokens)?.matmul(&self.channel_mix)
    }
}

/// A prompt of `N` tokens, two of which (starting at `slot`) hold a name.
#[derive(Clone, Debug)]
pub struct PromptTemplate {
    pub label: String,
    /// `(N - 2) x d` context words.
    pub words: Tensor,
    pub slot: usize,
}

impl PromptTemplate {
    pub fn random(label: impl Into<String>, text_tokens: usize, d: usize, rng: &mut Rng) -> Result<Self> {
        if text_tokens < 3 {
            return Err(Error::Config("text_tokens must be >= 3".into()));
        }
        let n_words = text_tokens - 2;
        let mut words = Tensor::zeros(n_words, d);
        for r in 0..n_words {
            let v = unit(rng.normal_vec(d, 1.0));
            for (c, x) in v.into_iter().enumerate() {
                words.set(r, c, x);
            }
        }
        let slot = rng.int_inclusive(0, n_words);
        Ok(Self {
            label: label.into(),
            words,
            slot,
        })
    }

    pub fn text_tokens(&self) -> usize {
        self.words.rows() + 2
    }

    /// Token sequence with the 2 x d `name` node spliced in at `slot`.
    pub fn tokens_node(&self, g: &mut Graph, name: NodeId) -> Result<NodeId> {
        let words = g.constant(self.words.clone());
        let mut parts = Vec::with_capacity(3);
        if self.slot > 0 {
            parts.push(g.slice_rows(words, 0, self.slot)?);
        }
        parts.push(name);
        let rest = self.words.rows() - self.slot;
        if rest > 0 {
            parts.push(g.slice_rows(words, self.slot, rest)?);
        }
        g.concat_rows(&parts)
    }

    pub fn tokens(&self, name: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let n = g.constant(name.clone());
        let t = self.tokens_node(&mut g, n)?;
        Ok(g.value(t).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    #[test]
    fn full_scale_table_shape() {
        let t = build_table(691, 1024, &mut Rng::new(0, "table")).unwrap();
        assert_eq!(t.entries.len(), 691);
        assert!(t.entries.iter().all(|e| e.first.len() == 1024 && e.last.len() == 1024));
        for e in &t.entries {
            assert!((l2(&e.first) - 1.0).abs() < 1e-12);
            assert!((l2(&e.last) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_names_is_contract_error() {
        assert!(matches!(
            build_table(0, 4, &mut Rng::new(0, "t")),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn table_is_deterministic() {
        let a = build_table(16, 32, &mut Rng::new(7, "table")).unwrap();
        let b = build_table(16, 32, &mut Rng::new(7, "table")).unwrap();
        assert_eq!(a, b);
        assert!(a.entries.iter().zip(&b.entries).all(|(x, y)| {
            x.first.iter().zip(&y.first).all(|(p, q)| p.to_bits() == q.to_bits())
        }));
    }

    #[test]
    fn anchor_of_single_entry_is_that_entry() {
        let t = build_table(1, 8, &mut Rng::new(3, "t")).unwrap();
        let a = build_anchor(&t).unwrap();
        assert_eq!(a.first, t.entries[0].first);
        assert_eq!(a.last, t.entries[0].last);
    }

    #[test]
    fn anchor_of_two_entries_is_midpoint() {
        let t = TokenEmbeddingTable {
            dim: 2,
            entries: vec![
                NameEntry { first: vec![1.0, 0.0], last: vec![0.0, 2.0] },
                NameEntry { first: vec![3.0, 4.0], last: vec![2.0, 0.0] },
            ],
        };
        let a = build_anchor(&t).unwrap();
        assert_eq!(a.first, vec![2.0, 2.0]);
        assert_eq!(a.last, vec![1.0, 1.0]);
    }

    #[test]
    fn anchor_matches_reverse_order_pairwise_sum() {
        let t = build_table(691, 32, &mut Rng::new(1, "t")).unwrap();
        let a = build_anchor(&t).unwrap();
        // independent accumulation: pairwise tree sum over reversed entries
        fn tree(xs: &[f64]) -> f64 {
            match xs.len() {
                0 => 0.0,
                1 => xs[0],
                n => tree(&xs[..n / 2]) + tree(&xs[n / 2..]),
            }
        }
        for i in 0..32 {
            let col: Vec<f64> = t.entries.iter().rev().map(|e| e.first[i]).collect();
            assert!((tree(&col) / 691.0 - a.first[i]).abs() <= 1e-12);
            let col: Vec<f64> = t.entries.iter().rev().map(|e| e.last[i]).collect();
            assert!((tree(&col) / 691.0 - a.last[i]).abs() <= 1e-12);
        }
    }

    fn toy_world(noise: f64) -> IdentityWorld {
        let mut rng = Rng::new(2, "world");
        let u = rng.normal_vec(16, 1.0);
        IdentityWorld::new(16, 4, 32, 16, noise, u, &mut rng).unwrap()
    }

    #[test]
    fn encode_face_shape_and_determinism() {
        let w = toy_world(0.0);
        let a = encode_face(&w, &w.u_ref, &mut Rng::new(1, "f")).unwrap();
        let b = encode_face(&w, &w.u_ref, &mut Rng::new(99, "f")).unwrap();
        assert_eq!(a.shape(), (4, 32));
        assert!(a.bit_eq(&b));
        let zero = encode_face(&w, &[0.0; 16], &mut Rng::new(1, "f")).unwrap();
        assert_eq!(zero, Tensor::zeros(4, 32));
        assert!(encode_face(&w, &[0.0; 3], &mut Rng::new(1, "f")).is_err());
    }

    #[test]
    fn latent_probe_recovers_identity() {
        let w = toy_world(0.0);
        let z = w.render_identity(&w.u_ref).unwrap();
        let back = w.probe(&z).unwrap();
        assert!(back.max_abs_diff(&Tensor::row_vector(&w.u_ref)) < 1e-12);
    }

    #[test]
    fn v_star_init_without_noise_equals_anchor() {
        let t = build_table(16, 8, &mut Rng::new(4, "t")).unwrap();
        let a = build_anchor(&t).unwrap();
        let mut store = ParamStore::new();
        let c = init_v_star(&mut store, &a, &mut Rng::new(1, "v"), 0.0).unwrap();
        assert!(store.value(c.v_star).bit_eq(&a.to_tensor()));
    }

    #[test]
    fn v_star_init_noise_is_deterministic() {
        let t = build_table(16, 8, &mut Rng::new(4, "t")).unwrap();
        let a = build_anchor(&t).unwrap();
        let draw = || {
            let mut store = ParamStore::new();
            let c = init_v_star(&mut store, &a, &mut Rng::new(5, "v"), 0.01).unwrap();
            store.value(c.v_star).clone()
        };
        assert!(draw().bit_eq(&draw()));
    }

    #[test]
    fn v_star_init_offset_bound_monte_carlo() {
        let d = 32;
        let noise = 0.01;
        let t = build_table(16, d, &mut Rng::new(4, "t")).unwrap();
        let a = build_anchor(&t).unwrap();
        let bound = 6.0 * noise * ((2 * d) as f64).sqrt();
        for seed in 0..1000 {
            let mut store = ParamStore::new();
            let c = init_v_star(&mut store, &a, &mut Rng::new(seed, "v"), noise).unwrap();
            let dist = store.value(c.v_star).sub(&a.to_tensor()).unwrap().norm();
            assert!(dist <= bound, "seed {seed}: {dist} > {bound}");
        }
    }

    #[test]
    fn prompt_tokens_put_name_at_slot() {
        let mut rng = Rng::new(1, "p");
        let p = PromptTemplate::random("x", 8, 4, &mut rng).unwrap();
        let name = Tensor::full(2, 4, 9.0);
        let tokens = p.tokens(&name).unwrap();
        assert_eq!(tokens.shape(), (8, 4));
        assert_eq!(tokens.row(p.slot), &[9.0; 4]);
        assert_eq!(tokens.row(p.slot + 1), &[9.0; 4]);
    }

    proptest! {
        #[test]
        fn anchor_is_linear_in_table(scale in -5.0f64..5.0, seed in 0u64..50) {
            let t = build_table(12, 6, &mut Rng::new(seed, "t")).unwrap();
            let scaled = TokenEmbeddingTable {
                dim: t.dim,
                entries: t.entries.iter().map(|e| NameEntry {
                    first: e.first.iter().map(|x| x * scale).collect(),
                    last: e.last.iter().map(|x| x * scale).collect(),
                }).collect(),
            };
            let a = build_anchor(&t).unwrap();
            let b = build_anchor(&scaled).unwrap();
            for i in 0..6 {
                prop_assert!((b.first[i] - scale * a.first[i]).abs() <= 1e-12);
                prop_assert!((b.last[i] - scale * a.last[i]).abs() <= 1e-12);
            }
        }

        #[test]
        fn encode_face_is_affine_without_noise(alpha in -2.0f64..2.0, seed in 0u64..50) {
            let w = toy_world(0.0);
            let mut rng = Rng::new(seed, "u");
            let u1 = rng.normal_vec(16, 1.0);
            let u2 = rng.normal_vec(16, 1.0);
            let mix: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            let mut r = Rng::new(0, "n");
            let lhs = encode_face(&w, &mix, &mut r).unwrap();
            let e1 = encode_face(&w, &u1, &mut r).unwrap();
            let e2 = encode_face(&w, &u2, &mut r).unwrap();
            let rhs = e1.scale(alpha).add(&e2.scale(1.0 - alpha)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
        }
    }
}
