//! The synthetic personalization problem.
//!
//! The name table doubles as the population of people the base denoiser
//! knows. Each name maps linearly to an identity vector, and a person
//! photographed in a scene is the latent
//!
//! ```text
//! z0 = a * render(u) + b * scene(prompt)
//! ```
//!
//! The base denoiser is pretrained on (prompt with name, latent) pairs drawn
//! from the population, then frozen. The personalization target is a fresh
//! name drawn from the same distribution but absent from the table, so only
//! its face and one latent are observed.

use crate::diffusion::PretrainExample;
use crate::embedding::{
    build_anchor, build_table_from, encode_face, IdentityAnchor, IdentityWorld, NameDistribution,
    NameEntry, PromptTemplate, TextEncoder, TokenEmbeddingTable, NAME_COHERENCE,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{l2, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpec {
    pub embed_dim: usize,
    pub visual_tokens: usize,
    pub text_tokens: usize,
    pub identity_dim: usize,
    pub latent_dim: usize,
    pub table_size: usize,
    pub templates: usize,
    pub noise_scale: f64,
    pub identity_strength: f64,
    pub scene_strength: f64,
}

#[derive(Clone, Debug)]
pub struct Person {
    pub name: NameEntry,
    pub identity: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Testbed {
    pub spec: WorldSpec,
    pub table: TokenEmbeddingTable,
    pub anchor: IdentityAnchor,
    pub encoder: TextEncoder,
    /// `2d x k`; identity of a name is its offset from the anchor times this.
    pub identity_map: Tensor,
    /// `latent_dim x d` with orthonormal rows; maps a latent to text space.
    pub scene_probe: Tensor,
    /// The first template is the training prompt, the rest are held out
    /// for evaluation. All of them appear in pretraining.
    pub templates: Vec<PromptTemplate>,
    pub world: IdentityWorld,
    pub reference: Person,
    /// The face embedding of the single reference image.
    pub reference_face: Tensor,
}

fn flatten(name: &NameEntry) -> Vec<f64> {
    name.first.iter().chain(&name.last).copied().collect()
}

impl Testbed {
    pub fn build(spec: WorldSpec, rng: &Rng) -> Result<Self> {
        if spec.templates < 2 {
            return Err(Error::Config("need at least two prompt templates".into()));
        }
        if spec.embed_dim < spec.latent_dim {
            return Err(Error::Config(format!(
                "embed_dim ({}) must be >= latent_dim ({})",
                spec.embed_dim, spec.latent_dim
            )));
        }
        if 2 * spec.embed_dim < spec.identity_dim {
            return Err(Error::Config("identity_dim must be <= 2 * embed_dim".into()));
        }
        let d = spec.embed_dim;
        let dist = NameDistribution::new(d, NAME_COHERENCE, &mut rng.derive("shared"))?;
        let table = build_table_from(&dist, spec.table_size, &mut rng.derive("table"))?;
        let anchor = build_anchor(&table)?;
        let encoder = TextEncoder::new(spec.text_tokens, d, &mut rng.derive("encoder"));

        // A projection to k of 2d dimensions keeps about k / 2d of an
        // offset's energy; the gain restores roughly unit norm.
        let gain = (2.0 * d as f64 / spec.identity_dim as f64).sqrt();
        let identity_map = rng
            .derive("identity_map")
            .orthonormal_columns(2 * d, spec.identity_dim)
            .scale(gain);
        let scene_probe = rng
            .derive("scene_probe")
            .orthonormal_columns(d, spec.latent_dim)
            .transpose();

        let mut template_rng = rng.derive("templates");
        let templates = (0..spec.templates)
            .map(|i| PromptTemplate::random(format!("prompt{i}"), spec.text_tokens, d, &mut template_rng))
            .collect::<Result<Vec<_>>>()?;

        let reference_name = dist.draw(&mut rng.derive("reference"));
        let identity = Self::identity_with(&identity_map, &anchor, &reference_name)?;
        let world = IdentityWorld::new(
            spec.identity_dim,
            spec.visual_tokens,
            d,
            spec.latent_dim,
            spec.noise_scale,
            identity.clone(),
            &mut rng.derive("world"),
        )?;
        let reference_face = encode_face(&world, &identity, &mut rng.derive("face"))?;
        Ok(Self {
            spec,
            table,
            anchor,
            encoder,
            identity_map,
            scene_probe,
            templates,
            world,
            reference: Person {
                name: reference_name,
                identity,
            },
            reference_face,
        })
    }

    fn identity_with(map: &Tensor, anchor: &IdentityAnchor, name: &NameEntry) -> Result<Vec<f64>> {
        let offset: Vec<f64> = flatten(name)
            .iter()
            .zip(anchor.first.iter().chain(&anchor.last))
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::row_vector(&offset).matmul(map)?.into_data())
    }

    pub fn identity_of(&self, name: &NameEntry) -> Result<Vec<f64>> {
        Self::identity_with(&self.identity_map, &self.anchor, name)
    }

    pub fn train_template(&self) -> &PromptTemplate {
        &self.templates[0]
    }

    pub fn eval_templates(&self) -> &[PromptTemplate] {
        &self.templates[1..]
    }

    /// Encoded prompt with the given 2 x d name tokens in its slot.
    pub fn context(&self, template: &PromptTemplate, name: &Tensor) -> Result<Tensor> {
        self.encoder.encode(&template.tokens(name)?)
    }

    /// Mean row of the prompt encoded with the anchor as its name. Used
    /// both to place scenes in latent space and to score prompt fidelity,
    /// independently of any trained weights.
    pub fn prompt_direction(&self, template: &PromptTemplate) -> Result<Vec<f64>> {
        let c = self.context(template, &self.anchor.to_tensor())?;
        Ok(c.mean_rows().into_data())
    }

    /// Unit-norm scene component of the latent for a prompt.
    pub fn scene_latent(&self, template: &PromptTemplate) -> Result<Tensor> {
        let dir = Tensor::row_vector(&self.prompt_direction(template)?);
        let s = dir.matmul(&self.scene_probe.transpose())?;
        let n = l2(s.data());
        if n == 0.0 {
            return Err(Error::Numeric("prompt direction orthogonal to scene space".into()));
        }
        Ok(s.scale(1.0 / n))
    }

    pub fn latent(&self, identity: &[f64], template: &PromptTemplate) -> Result<Tensor> {
        let person = self.world.render_identity(identity)?.scale(self.spec.identity_strength);
        person.add(&self.scene_latent(template)?.scale(self.spec.scene_strength))
    }

    /// The one observed latent of the reference person, in the training prompt.
    pub fn reference_latent(&self) -> Result<Tensor> {
        self.latent(&self.reference.identity, self.train_template())
    }

    /// A random known person in a random prompt.
    pub fn pretraining_example(&self, rng: &mut Rng) -> Result<PretrainExample> {
        let person = &self.table.entries[rng.int_inclusive(0, self.table.entries.len() - 1)];
        let template = &self.templates[rng.int_inclusive(0, self.templates.len() - 1)];
        Ok(PretrainExample {
            context: self.context(template, &person.to_tensor())?,
            latent: self.latent(&self.identity_of(person)?, template)?,
        })
    }

    /// Latent direction read by the prompt-fidelity probe, `z * scene_probe`.
    pub fn read_scene(&self, latent: &Tensor) -> Result<Vec<f64>> {
        Ok(latent.matmul(&self.scene_probe)?.into_data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine;

    pub(crate) fn spec() -> WorldSpec {
        WorldSpec {
            embed_dim: 32,
            visual_tokens: 4,
            text_tokens: 8,
            identity_dim: 16,
            latent_dim: 16,
            table_size: 64,
            templates: 4,
            noise_scale: 0.05,
            identity_strength: 1.0,
            scene_strength: 1.0,
        }
    }

    #[test]
    fn anchor_name_has_zero_identity() {
        let tb = Testbed::build(spec(), &Rng::new(1, "tb")).unwrap();
        let name = NameEntry {
            first: tb.anchor.first.clone(),
            last: tb.anchor.last.clone(),
        };
        assert!(tb.identity_of(&name).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn identities_are_roughly_unit_norm_and_distinct() {
        let tb = Testbed::build(spec(), &Rng::new(2, "tb")).unwrap();
        let norms: Vec<f64> = tb
            .table
            .entries
            .iter()
            .map(|e| l2(&tb.identity_of(e).unwrap()))
            .collect();
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        assert!((0.5..2.0).contains(&mean), "{mean}");
        let a = tb.identity_of(&tb.table.entries[0]).unwrap();
        let b = tb.identity_of(&tb.table.entries[1]).unwrap();
        assert!(cosine(&a, &b).unwrap().abs() < 0.9);
    }

    #[test]
    fn reference_name_is_not_in_table() {
        let tb = Testbed::build(spec(), &Rng::new(3, "tb")).unwrap();
        assert!(tb.table.entries.iter().all(|e| *e != tb.reference.name));
    }

    #[test]
    fn identity_probe_recovers_rendered_identity() {
        let tb = Testbed::build(spec(), &Rng::new(4, "tb")).unwrap();
        let z = tb.world.render_identity(&tb.reference.identity).unwrap();
        let back = tb.world.probe(&z).unwrap();
        let diff: f64 = back
            .data()
            .iter()
            .zip(&tb.reference.identity)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn scene_latent_reads_back_toward_prompt() {
        let tb = Testbed::build(spec(), &Rng::new(5, "tb")).unwrap();
        for t in &tb.templates {
            let read = tb.read_scene(&tb.scene_latent(t).unwrap()).unwrap();
            let dir = tb.prompt_direction(t).unwrap();
            assert!(cosine(&read, &dir).unwrap() > 0.3);
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = Testbed::build(spec(), &Rng::new(6, "tb")).unwrap();
        let b = Testbed::build(spec(), &Rng::new(6, "tb")).unwrap();
        assert!(a.reference_face.bit_eq(&b.reference_face));
        assert!(a.reference_latent().unwrap().bit_eq(&b.reference_latent().unwrap()));
    }
}
