//! Synthetic model distributions for simulated endpoints.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::blackbox::SimulatedSystem;
use crate::distributions::{total_variation, Categorical, DecodingStrategy};
use crate::error::{Error, Result};
use crate::prompts::PromptSpec;

/// Shape of a synthetic next-token distribution. Token ranks are a seeded
/// permutation of the vocabulary, so different seeds act as different models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TableShape {
    /// Rank weights `r^-(1 - 1/c)`: for every truncation point `k`, the `k`-th
    /// token keeps at least `1/(ck)` of the truncated mass.
    NearUniform { c: f64 },
    /// Rank weights `exp(-decay * r)`.
    Geometric { decay: f64 },
}

impl TableShape {
    pub fn build(&self, vocab: &[String], seed: u64) -> Result<Categorical> {
        let mut tokens: Vec<&String> = vocab.iter().collect();
        tokens.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let weight = |rank: usize| match *self {
            TableShape::NearUniform { c } => ((rank + 1) as f64).powf(-(1.0 - 1.0 / c)),
            TableShape::Geometric { decay } => (-decay * rank as f64).exp(),
        };
        Categorical::from_weights(tokens.into_iter().enumerate().map(|(r, t)| (t, weight(r))))
    }
}

/// Default shape for a prompt: near-uniform (c = 2) for large vocabularies,
/// gently decaying for the small ones used to estimate `p`.
pub fn standard_shape(spec: &PromptSpec) -> TableShape {
    match spec.id() {
        "months" | "monthschat" => TableShape::Geometric { decay: 0.07 },
        "dates" | "dateschat" => TableShape::Geometric { decay: 0.03 },
        "d20chat" => TableShape::Geometric { decay: 0.05 },
        "d100chat" => TableShape::Geometric { decay: 0.02 },
        _ if spec.vocab_size() >= 100 => TableShape::NearUniform { c: 2.0 },
        _ => TableShape::Geometric { decay: 0.05 },
    }
}

/// Per-prompt tables of one synthetic model. A prompt's table depends only on
/// the model seed and the prompt id.
pub fn model_tables(specs: &[&PromptSpec], model_seed: u64) -> Result<Vec<Categorical>> {
    specs.iter().map(|s| standard_shape(s).build(s.expected_vocab(), model_seed ^ id_hash(s.id()))).collect()
}

// FNV-1a, so table seeds stay stable across builds and platforms.
fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// A simulator answering every rendering of each spec from its table.
pub fn system_for(
    specs: &[&PromptSpec],
    tables: &[Categorical],
    strategy: DecodingStrategy,
    seed: u64,
) -> Result<SimulatedSystem> {
    let mut exact = HashMap::new();
    let mut prefixed = Vec::new();
    for (spec, table) in specs.iter().zip(tables) {
        if spec.has_exemplar_slot() {
            prefixed.push((spec.fixed_prefix().to_string(), table.clone()));
        } else {
            exact.insert(spec.template().to_string(), table.clone());
        }
    }
    SimulatedSystem::routed(exact, prefixed, strategy, seed)
}

/// Direction in which [`perturb`] moves a distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// Towards a seeded Dirichlet(1) draw over the same support.
    #[default]
    Random,
    /// Towards the rank-reversed copy (the `i`-th ranked token takes the
    /// probability of the `i`-th from last), which only ever flattens the profile.
    Flatten,
}

/// Mixes `dist` with an anchor distribution so that the result lies exactly
/// `target_tv` away in total variation. When the anchor is too close, all mass
/// moves to the least likely token instead.
pub fn perturb(dist: &Categorical, target_tv: f64, kind: Perturbation, seed: u64) -> Result<Categorical> {
    if !(0.0..1.0).contains(&target_tv) {
        return Err(Error::InvalidParameter(format!("target TV must be in [0, 1), got {target_tv}")));
    }
    if target_tv == 0.0 {
        return Ok(dist.clone());
    }
    let entries = dist.entries();
    let mut anchor = match kind {
        Perturbation::Flatten => Categorical::from_weights(
            entries.iter().zip(entries.iter().rev()).map(|((t, _), (_, p))| (t.as_str(), *p)),
        )?,
        Perturbation::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Categorical::from_weights(entries.iter().map(|(t, _)| (t.as_str(), rng.sample::<f64, _>(Exp1))))?
        }
    };
    let mut anchor_tv = total_variation(dist, &anchor);
    if anchor_tv < target_tv {
        anchor = Categorical::point_mass(entries[entries.len() - 1].0.clone());
        anchor_tv = total_variation(dist, &anchor);
    }
    if anchor_tv < target_tv {
        return Err(Error::InvalidParameter(format!(
            "cannot move a {}-item distribution {target_tv} away in TV",
            dist.len()
        )));
    }
    let lambda = target_tv / anchor_tv;
    Categorical::from_weights(
        dist.tokens()
            .map(|t| (t.as_str(), (1.0 - lambda) * dist.prob_of(t.as_str()) + lambda * anchor.prob_of(t.as_str()))),
    )
}
