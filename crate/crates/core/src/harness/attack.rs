//! End-to-end attack on one endpoint: classify the truncation rule, then
//! estimate its parameter.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::blackbox::Endpoint;
use crate::distmatch::{best_match, observe, KnownDistributionDB, MatchResult};
use crate::distributions::Metric;
use crate::error::{Error, Result};
use crate::estimators::{classify_strategy, p_upper_bound, EstimatorConfig, Verdict};
use crate::prompts::{find, PromptSpec, RenderedPrompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub large_prompt: String,
    pub small_prompt: String,
    /// Prompts used for the p estimate, each matched against the database.
    pub p_prompts: Vec<String>,
    pub metric: Metric,
    pub render_seed: u64,
    #[serde(flatten)]
    pub estimator: EstimatorConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            large_prompt: "nouns".into(),
            small_prompt: "adverbs".into(),
            p_prompts: vec!["months".into(), "dates".into()],
            metric: Metric::TotalVariation,
            render_seed: 0,
            estimator: EstimatorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEstimate {
    pub prompt_id: String,
    pub n: usize,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMatch {
    pub prompt_id: String,
    #[serde(flatten)]
    pub result: MatchResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub verdict: Verdict,
    pub ratio: f64,
    pub per_prompt: Vec<PromptEstimate>,
    /// `k` or `p`; absent when the verdict is indeterminate.
    pub final_estimate: Option<f64>,
    /// Database model chosen by most p prompts.
    pub matched_model: Option<String>,
    pub matches: Vec<PromptMatch>,
    pub samples_used: usize,
}

impl AttackReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "verdict: {} (unique-count ratio {:.3})", self.verdict, self.ratio);
        if !self.per_prompt.is_empty() {
            let _ = writeln!(out, "{:<12} {:>7} {:>10}", "prompt", "n", "estimate");
            for p in &self.per_prompt {
                let _ = writeln!(out, "{:<12} {:>7} {:>10.4}", p.prompt_id, p.n, p.estimate);
            }
        }
        for m in &self.matches {
            let _ = writeln!(
                out,
                "{}: matched {} at {:?} {:.4}{}",
                m.prompt_id,
                m.result.model_id,
                m.result.metric,
                m.result.distance,
                if m.result.poor_fit { " (poor fit)" } else { "" }
            );
        }
        let param = match self.verdict {
            Verdict::TopK => "k",
            _ => "p",
        };
        match self.final_estimate {
            Some(e) => {
                let _ = writeln!(out, "final estimate: {param} = {e:.4}");
            }
            None => {
                let _ = writeln!(out, "final estimate: none");
            }
        }
        if let Some(m) = &self.matched_model {
            let _ = writeln!(out, "matched model: {m}");
        }
        let _ = writeln!(out, "samples used: {}", self.samples_used);
        out
    }
}

/// Classifies the endpoint, then estimates `k` from the classification samples
/// or `p` from fresh samples of each p prompt against the closest database record.
pub fn attack<E: Endpoint + ?Sized>(
    endpoint: &mut E,
    specs: &[PromptSpec],
    db: &KnownDistributionDB,
    cfg: &AttackConfig,
) -> Result<AttackReport> {
    cfg.estimator.validate()?;
    let large = RenderedPrompt::new(find(specs, &cfg.large_prompt)?, cfg.render_seed)?;
    let small = RenderedPrompt::new(find(specs, &cfg.small_prompt)?, cfg.render_seed.wrapping_add(1))?;
    let v = classify_strategy(&large, &small, endpoint, &cfg.estimator)?;
    let mut report = AttackReport {
        verdict: v.verdict,
        ratio: v.ratio,
        per_prompt: Vec::new(),
        final_estimate: None,
        matched_model: None,
        matches: Vec::new(),
        samples_used: v.samples_used(),
    };
    match v.verdict {
        Verdict::Indeterminate => {}
        Verdict::TopK => {
            // Both prompts settled on the same count during classification.
            report.per_prompt = [&v.large, &v.small]
                .iter()
                .map(|e| PromptEstimate { prompt_id: e.prompt_id.clone(), n: e.samples, estimate: e.unique as f64 })
                .collect();
            report.final_estimate = Some(((v.large.unique + v.small.unique) / 2) as f64);
        }
        Verdict::TopP => {
            if cfg.p_prompts.is_empty() {
                return Err(Error::InvalidParameter("no p prompts configured".into()));
            }
            let n = cfg.estimator.p_samples;
            for (i, id) in cfg.p_prompts.iter().enumerate() {
                let prompt = RenderedPrompt::new(find(specs, id)?, cfg.render_seed.wrapping_add(2 + i as u64))?;
                let (_, empirical) = observe(endpoint, &prompt, n)?;
                let m = best_match(&empirical.dist, db, id, cfg.metric)?;
                let known = db.get(&m.model_id, id).expect("matched record exists");
                let estimate = p_upper_bound(&known.dist, empirical.dist.len())?;
                report.per_prompt.push(PromptEstimate { prompt_id: id.clone(), n, estimate });
                report.matches.push(PromptMatch { prompt_id: id.clone(), result: m });
                report.samples_used += n;
            }
            let mean = report.per_prompt.iter().map(|p| p.estimate).sum::<f64>() / report.per_prompt.len() as f64;
            report.final_estimate = Some(mean.clamp(0.0, 1.0));
            report.matched_model = majority(report.matches.iter().map(|m| m.result.model_id.as_str()));
        }
    }
    Ok(report)
}

/// Most frequent id; ties go to the smallest.
fn majority<'a>(ids: impl Iterator<Item = &'a str>) -> Option<String> {
    let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
    for id in ids {
        *votes.entry(id).or_default() += 1;
    }
    let best = votes.values().copied().max()?;
    votes.into_iter().find(|(_, n)| *n == best).map(|(id, _)| id.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distmatch::analytic_record;
    use crate::distributions::DecodingStrategy;
    use crate::harness::tables::{model_tables, system_for};
    use crate::prompts::catalog;

    fn setup(strategy: DecodingStrategy) -> (Vec<PromptSpec>, KnownDistributionDB, crate::blackbox::SimulatedSystem) {
        let specs = catalog().unwrap();
        let ids = ["nouns", "adverbs", "months", "dates"];
        let chosen: Vec<&PromptSpec> = ids.iter().map(|id| find(&specs, id).unwrap()).collect();
        let mut db = KnownDistributionDB::new();
        for (model, seed) in [("model-a", 7u64), ("model-b", 8)] {
            let tables = model_tables(&chosen, seed).unwrap();
            for (spec, t) in chosen.iter().zip(&tables).skip(2) {
                let probs: Vec<(String, f64)> = t.entries().iter().map(|(w, p)| (w.to_string(), *p)).collect();
                db.upsert(analytic_record(model, spec, &probs).unwrap()).unwrap();
            }
        }
        let tables = model_tables(&chosen, 7).unwrap();
        let sim = system_for(&chosen, &tables, strategy, 1).unwrap();
        let owned = specs.clone();
        (owned, db, sim)
    }

    #[test]
    fn top_p_endpoint() {
        let (specs, db, mut sim) = setup(DecodingStrategy::top_p(0.8).unwrap());
        let r = attack(&mut sim, &specs, &db, &AttackConfig::default()).unwrap();
        assert_eq!(r.verdict, Verdict::TopP);
        let p = r.final_estimate.unwrap();
        assert!((0.75..=0.85).contains(&p), "{p}");
        assert_eq!(r.matched_model.as_deref(), Some("model-a"));
        assert_eq!(r.samples_used as u64, sim.queries());
        assert!(r.render_text().contains("final estimate: p = "));
    }

    #[test]
    fn top_k_and_argmax_endpoints() {
        let (specs, db, mut sim) = setup(DecodingStrategy::top_k(20).unwrap());
        let r = attack(&mut sim, &specs, &db, &AttackConfig::default()).unwrap();
        assert_eq!((r.verdict, r.final_estimate), (Verdict::TopK, Some(20.0)));

        let (specs, db, mut sim) = setup(DecodingStrategy::argmax());
        let r = attack(&mut sim, &specs, &db, &AttackConfig::default()).unwrap();
        assert_eq!((r.verdict, r.final_estimate), (Verdict::Indeterminate, None));
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert!(json["final_estimate"].is_null());
    }

    #[test]
    fn majority_breaks_ties_by_id() {
        assert_eq!(majority(["b", "a"].into_iter()), Some("a".into()));
        assert_eq!(majority(["b", "a", "b"].into_iter()), Some("b".into()));
        assert_eq!(majority(std::iter::empty()), None);
    }
}
