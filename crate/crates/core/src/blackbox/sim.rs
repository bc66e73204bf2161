use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Endpoint;
use crate::distributions::{Categorical, CategoricalSampler, DecodingStrategy};
use crate::error::{Error, Result};

struct Entry {
    full: Categorical,
    truncated: Categorical,
    sampler: CategoricalSampler,
}

impl Entry {
    fn new(full: Categorical, strategy: &DecodingStrategy) -> Result<Self> {
        let truncated = strategy.apply(&full)?;
        let sampler = CategoricalSampler::new(&truncated);
        Ok(Self { full, truncated, sampler })
    }
}

/// An endpoint with a known per-prompt distribution and decoding strategy.
///
/// Prompts are looked up exactly first; prompts registered as prefixes match
/// any prompt that starts with them (longest prefix wins), which lets one
/// table entry serve every exemplar rendering of a template.
pub struct SimulatedSystem {
    exact: HashMap<String, Entry>,
    prefixes: Vec<(String, Entry)>,
    strategy: DecodingStrategy,
    rng: ChaCha8Rng,
    queries: u64,
}

/// Builds a simulator over `table` with the given strategy and seed.
pub fn simulate(table: HashMap<String, Categorical>, strategy: DecodingStrategy, seed: u64) -> Result<SimulatedSystem> {
    SimulatedSystem::new(table, strategy, seed)
}

impl SimulatedSystem {
    pub fn new(table: HashMap<String, Categorical>, strategy: DecodingStrategy, seed: u64) -> Result<Self> {
        Self::routed(table, Vec::new(), strategy, seed)
    }

    /// Builds a simulator from exact prompts and prefix routes together.
    pub fn routed(
        table: HashMap<String, Categorical>,
        prefixes: Vec<(String, Categorical)>,
        strategy: DecodingStrategy,
        seed: u64,
    ) -> Result<Self> {
        if table.is_empty() && prefixes.is_empty() {
            return Err(Error::InvalidParameter("simulator table is empty".into()));
        }
        let exact = table
            .into_iter()
            .map(|(prompt, dist)| Ok((prompt, Entry::new(dist, &strategy)?)))
            .collect::<Result<_>>()?;
        let mut sim = Self { exact, prefixes: Vec::new(), strategy, rng: ChaCha8Rng::seed_from_u64(seed), queries: 0 };
        for (prefix, dist) in prefixes {
            sim = sim.with_prefix(prefix, dist)?;
        }
        Ok(sim)
    }

    /// Routes every prompt beginning with `prefix` to `dist`.
    pub fn with_prefix(mut self, prefix: impl Into<String>, dist: Categorical) -> Result<Self> {
        let entry = Entry::new(dist, &self.strategy)?;
        self.prefixes.push((prefix.into(), entry));
        self.prefixes.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Ok(self)
    }

    pub fn strategy(&self) -> &DecodingStrategy {
        &self.strategy
    }

    fn entry(&self, prompt: &str) -> Result<&Entry> {
        if let Some(e) = self.exact.get(prompt) {
            return Ok(e);
        }
        self.prefixes
            .iter()
            .find(|(prefix, _)| prompt.starts_with(prefix.as_str()))
            .map(|(_, e)| e)
            .ok_or_else(|| Error::UnknownPrompt(prompt.to_string()))
    }

    /// The untruncated model distribution for `prompt`.
    pub fn full_distribution(&self, prompt: &str) -> Result<&Categorical> {
        Ok(&self.entry(prompt)?.full)
    }

    /// The distribution responses are actually drawn from.
    pub fn truncated_distribution(&self, prompt: &str) -> Result<&Categorical> {
        Ok(&self.entry(prompt)?.truncated)
    }
}

impl Endpoint for SimulatedSystem {
    fn generate(&mut self, prompt: &str) -> Result<String> {
        let mut out = self.generate_batch(prompt, 1)?;
        Ok(out.pop().expect("one response"))
    }

    fn generate_batch(&mut self, prompt: &str, n: usize) -> Result<Vec<String>> {
        // Looked up through the fields directly so the rng can be borrowed mutably.
        let entry = match self.exact.get(prompt) {
            Some(e) => e,
            None => self
                .prefixes
                .iter()
                .find(|(prefix, _)| prompt.starts_with(prefix.as_str()))
                .map(|(_, e)| e)
                .ok_or_else(|| Error::UnknownPrompt(prompt.to_string()))?,
        };
        let rng = &mut self.rng;
        let out = (0..n).map(|_| entry.sampler.sample(rng).as_str().to_string()).collect();
        self.queries += n as u64;
        Ok(out)
    }

    fn queries(&self) -> u64 {
        self.queries
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::distributions::total_variation;

    fn letters(n: usize) -> Vec<String> {
        (0..n).map(|i| ((b'a' + i as u8) as char).to_string()).collect()
    }

    fn table(prompt: &str, dist: Categorical) -> HashMap<String, Categorical> {
        HashMap::from([(prompt.to_string(), dist)])
    }

    fn distinct(sim: &mut SimulatedSystem, prompt: &str, n: usize) -> HashSet<String> {
        sim.generate_batch(prompt, n).unwrap().into_iter().collect()
    }

    #[test]
    fn top_k_support_on_uniform_26() {
        let t = table("m", Categorical::uniform(letters(26)).unwrap());
        let mut sim = simulate(t, DecodingStrategy::top_k(10).unwrap(), 1).unwrap();
        let seen = distinct(&mut sim, "m", 5000);
        assert_eq!(seen.len(), 10);
        assert_eq!(sim.queries(), 5000);
    }

    #[test]
    fn argmax_is_constant() {
        let d = Categorical::from_weights([("x", 0.2), ("y", 0.5), ("z", 0.3)]).unwrap();
        let mut sim = simulate(table("m", d), DecodingStrategy::argmax(), 2).unwrap();
        assert_eq!(distinct(&mut sim, "m", 500), HashSet::from(["y".to_string()]));
    }

    #[test]
    fn top_p_half_of_uniform_26_keeps_13() {
        // Brute force over prefix sizes: the smallest j with j/26 >= 0.5.
        let oracle = (1..=26).find(|j| *j as f64 / 26.0 >= 0.5).unwrap();
        assert_eq!(oracle, 13);
        let t = table("m", Categorical::uniform(letters(26)).unwrap());
        let mut sim = simulate(t, DecodingStrategy::top_p(0.5).unwrap(), 3).unwrap();
        assert_eq!(distinct(&mut sim, "m", 5000).len(), oracle);
    }

    #[test]
    fn unknown_prompt_fails() {
        let t = table("m", Categorical::uniform(letters(3)).unwrap());
        let mut sim = simulate(t, DecodingStrategy::argmax(), 0).unwrap();
        assert!(matches!(sim.generate("other"), Err(Error::UnknownPrompt(_))));
        assert!(simulate(HashMap::new(), DecodingStrategy::argmax(), 0).is_err());
    }

    #[test]
    fn prefix_routes() {
        let t = table("exact", Categorical::uniform(letters(2)).unwrap());
        let mut sim = simulate(t, DecodingStrategy::argmax(), 0)
            .unwrap()
            .with_prefix("List:", Categorical::uniform(["q", "r"]).unwrap())
            .unwrap()
            .with_prefix("List: x", Categorical::uniform(["z"]).unwrap())
            .unwrap();
        assert_eq!(sim.generate("List: a b").unwrap(), "q");
        assert_eq!(sim.generate("List: x y").unwrap(), "z");
        assert_eq!(sim.generate("exact").unwrap(), "a");
    }

    #[test]
    fn simulator_is_faithful() {
        let d = Categorical::from_weights((0..30).map(|i| (format!("t{i}"), 1.0 / (i as f64 + 1.0)))).unwrap();
        let strategy = DecodingStrategy::top_p(0.7).unwrap().with_temperature(1.3).unwrap();
        let expected = strategy.apply(&d).unwrap();
        let mut sim = simulate(table("m", d), strategy, 9).unwrap();
        let samples = sim.generate_batch("m", 100_000).unwrap();
        let empirical = Categorical::from_weights(samples.iter().fold(HashMap::<&str, f64>::new(), |mut acc, s| {
            *acc.entry(s.as_str()).or_default() += 1.0;
            acc
        }))
        .unwrap();
        assert!(total_variation(&empirical, &expected) < 0.01);
    }

    #[test]
    fn identical_seeds_agree_and_batches_match_singles() {
        let d = Categorical::uniform(letters(20)).unwrap();
        let mk = || simulate(table("m", d.clone()), DecodingStrategy::top_k(7).unwrap(), 42).unwrap();
        let (mut a, mut b) = (mk(), mk());
        let batch = a.generate_batch("m", 300).unwrap();
        let singles: Vec<String> = (0..300).map(|_| b.generate("m").unwrap()).collect();
        assert_eq!(batch, singles);
        assert_eq!(a.queries(), b.queries());
    }
}
