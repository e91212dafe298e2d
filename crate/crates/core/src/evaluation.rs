//! Toy analogs of identity preservation, prompt fidelity, embedding
//! alignment, and the four-way ablation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embedding::IdentityWorld;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::strategy::MODES;
use crate::tensor::{cosine, l2_distance, Tensor};
use crate::trainer::{train_run, BaseModel, Metrics, TrainConfig, TrainState};

/// A cosine similarity; zero-norm inputs score 0 and are flagged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub value: f64,
    pub degenerate: bool,
}

fn similarity(a: &[f64], b: &[f64]) -> Similarity {
    match cosine(a, b) {
        Some(v) => Similarity {
            value: v.clamp(-1.0, 1.0),
            degenerate: false,
        },
        None => Similarity {
            value: 0.0,
            degenerate: true,
        },
    }
}

/// `cos(u_ref, probe(z))`.
pub fn identity_similarity(world: &IdentityWorld, z: &Tensor) -> Result<Similarity> {
    let probed = world.probe(z)?;
    Ok(similarity(probed.data(), &world.u_ref))
}

/// `cos(z * probe, mean row of prompt_context)`.
pub fn prompt_similarity(probe: &Tensor, z: &Tensor, prompt_context: &Tensor) -> Result<Similarity> {
    let read = z.matmul(probe)?;
    if read.cols() != prompt_context.cols() {
        return Err(Error::shape("prompt_similarity", read.shape(), prompt_context.shape()));
    }
    Ok(similarity(read.data(), prompt_context.mean_rows().data()))
}

/// Mean over rows of `target` of the L2 distance to the nearest row of
/// `candidates`.
pub fn alignment_distance(target: &Tensor, candidates: &Tensor) -> Result<f64> {
    if target.cols() != candidates.cols() || candidates.rows() == 0 || target.rows() == 0 {
        return Err(Error::shape("alignment_distance", target.shape(), candidates.shape()));
    }
    let total: f64 = (0..target.rows())
        .map(|i| {
            (0..candidates.rows())
                .map(|j| l2_distance(target.row(i), candidates.row(j)))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(total / target.rows() as f64)
}

/// Samples under every held-out prompt and averages both similarities.
pub fn evaluate(state: &TrainState, samples_per_prompt: usize, rng: &mut Rng) -> Result<Metrics> {
    let tb = &state.base.testbed;
    let den = &state.base.denoiser;
    let mut identity = 0.0;
    let mut prompt = 0.0;
    let mut n = 0;
    let mut degenerate = 0;
    for template in tb.eval_templates() {
        let context = state.context(template)?;
        let prompt_context = tb.context(template, &tb.anchor.to_tensor())?;
        for _ in 0..samples_per_prompt {
            let z = den.sample(&state.store, &context, rng)?;
            let id = identity_similarity(&tb.world, &z)?;
            let pr = prompt_similarity(&tb.scene_probe, &z, &prompt_context)?;
            identity += id.value;
            prompt += pr.value;
            degenerate += usize::from(id.degenerate || pr.degenerate);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::contract("evaluation needs at least one sample"));
    }
    Ok(Metrics {
        identity_sim: identity / n as f64,
        prompt_sim: prompt / n as f64,
        samples: n,
        degenerate_samples: degenerate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSeed {
    pub seed: u64,
    pub dist_naive: f64,
    pub dist_enhanced: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub dist_naive: f64,
    pub dist_enhanced: f64,
    pub per_seed: Vec<AlignmentSeed>,
    /// Seeds where `dist_enhanced < dist_naive`.
    pub enhanced_closer: usize,
}

/// Distance from each model's `v*` to its face-derived rows: the linear
/// face projection for the naive model, the enhancer output for the full one.
pub fn alignment_diagnostic(full: &TrainState, naive: &TrainState) -> Result<AlignmentSeed> {
    if full.steps_taken == 0 || naive.steps_taken == 0 {
        return Err(Error::contract("alignment diagnostic needs trained states"));
    }
    if full.strategy.name() != "full" || naive.strategy.name() != "naive_concat" {
        return Err(Error::contract(format!(
            "alignment compares full against naive_concat, got {} and {}",
            full.strategy.name(),
            naive.strategy.name()
        )));
    }
    Ok(AlignmentSeed {
        seed: full.base.seed,
        dist_naive: alignment_distance(naive.v_star(), &naive.identity_rows()?)?,
        dist_enhanced: alignment_distance(full.v_star(), &full.identity_rows()?)?,
    })
}

pub fn summarize_alignment(per_seed: Vec<AlignmentSeed>) -> AlignmentReport {
    let n = per_seed.len().max(1) as f64;
    AlignmentReport {
        dist_naive: per_seed.iter().map(|s| s.dist_naive).sum::<f64>() / n,
        dist_enhanced: per_seed.iter().map(|s| s.dist_enhanced).sum::<f64>() / n,
        enhanced_closer: per_seed.iter().filter(|s| s.dist_enhanced < s.dist_naive).count(),
        per_seed,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub mode: String,
    pub seed: u64,
    pub identity_sim: f64,
    pub prompt_sim: f64,
    pub final_loss: f64,
    pub time_s: f64,
}

/// Builds the base model for each seed.
pub type BaseFactory<'a> = dyn FnMut(u64) -> Result<BaseModel> + 'a;

/// Trains and scores every mode on every seed. Rows are ordered by mode in
/// table order, then by seed.
pub fn ablation_grid(
    cfg: &TrainConfig,
    seeds: &[u64],
    samples_per_prompt: usize,
    base_for: &mut BaseFactory,
) -> Result<Vec<MetricRow>> {
    let mut by_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let base = base_for(seed)?;
        let mut rows = Vec::with_capacity(MODES.len());
        for mode in MODES {
            let run = TrainConfig {
                seed,
                ablation_mode: mode.to_string(),
                ..cfg.clone()
            };
            let start = Instant::now();
            let out = train_run(&base, &run)?;
            let metrics = evaluate(&out.state, samples_per_prompt, &mut Rng::new(seed, "evaluate"))?;
            rows.push(MetricRow {
                mode: mode.to_string(),
                seed,
                identity_sim: metrics.identity_sim,
                prompt_sim: metrics.prompt_sim,
                final_loss: out.report.final_loss,
                time_s: start.elapsed().as_secs_f64(),
            });
        }
        by_seed.push(rows);
    }
    let mut out = Vec::with_capacity(MODES.len() * seeds.len());
    for m in 0..MODES.len() {
        for rows in &by_seed {
            out.push(rows[m].clone());
        }
    }
    Ok(out)
}

/// Per seed, whether `full` has the best identity + prompt sum, and whether
/// `no_ide` has the lowest identity similarity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridVerdict {
    pub seeds: usize,
    pub full_best_sum: usize,
    pub no_ide_worst_identity: usize,
}

pub fn grid_verdict(rows: &[MetricRow]) -> GridVerdict {
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut full_best = 0;
    let mut no_ide_worst = 0;
    for &s in &seeds {
        let cell: Vec<&MetricRow> = rows.iter().filter(|r| r.seed == s).collect();
        let best = cell
            .iter()
            .max_by(|a, b| (a.identity_sim + a.prompt_sim).total_cmp(&(b.identity_sim + b.prompt_sim)));
        let worst = cell.iter().min_by(|a, b| a.identity_sim.total_cmp(&b.identity_sim));
        full_best += usize::from(best.is_some_and(|r| r.mode == "full"));
        no_ide_worst += usize::from(worst.is_some_and(|r| r.mode == "no_ide"));
    }
    GridVerdict {
        seeds: seeds.len(),
        full_best_sum: full_best,
        no_ide_worst_identity: no_ide_worst,
    }
}
