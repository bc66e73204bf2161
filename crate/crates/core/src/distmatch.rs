//! Known-distribution database and surrogate selection.
//!
//! Records hold full next-token distributions per (model, prompt). Matching
//! compares a target's empirical distribution against every record for the
//! prompt, token by token; the p estimator later only uses the chosen record's
//! sorted probabilities.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::blackbox::Endpoint;
use crate::distributions::{distance, total_variation, Categorical, Metric, REST_TOKEN};
use crate::error::{Error, Result};
use crate::prompts::{PromptSpec, RenderedPrompt};

/// Best-match total variation above which the surrogate is flagged as a poor fit.
pub const POOR_FIT_TV: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Analytic,
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbRecord {
    pub model_id: String,
    pub prompt_id: String,
    pub provenance: Provenance,
    pub sample_count: Option<usize>,
    pub dist: Categorical,
}

impl DbRecord {
    /// The record's distribution restricted to vocabulary tokens.
    pub fn in_vocab(&self) -> Result<Categorical> {
        in_vocab(&self.dist)
    }
}

fn in_vocab(dist: &Categorical) -> Result<Categorical> {
    if dist.tokens().any(|t| t.as_str() == REST_TOKEN) {
        dist.restrict(|t| t.as_str() != REST_TOKEN)
    } else {
        Ok(dist.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchivedRecord {
    pub archived_at: String,
    #[serde(flatten)]
    pub record: DbRecord,
}

/// Database of model distributions, persisted as one JSON file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnownDistributionDB {
    pub records: Vec<DbRecord>,
    /// Records displaced by a newer record for the same (model, prompt).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub archive: Vec<ArchivedRecord>,
}

impl KnownDistributionDB {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let db: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        db.validate()?;
        Ok(db)
    }

    /// Loads `path`, or starts empty when it does not exist yet.
    pub fn load_or_default(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::new())
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut keys = HashSet::new();
        for r in &self.records {
            if !keys.insert((r.model_id.as_str(), r.prompt_id.as_str())) {
                return Err(Error::InvalidDistribution(format!(
                    "duplicate record for model {:?}, prompt {:?}",
                    r.model_id, r.prompt_id
                )));
            }
            if r.provenance == Provenance::Empirical && r.sample_count.is_none_or(|n| n == 0) {
                return Err(Error::InvalidDistribution(format!(
                    "empirical record {:?}/{:?} needs sample_count >= 1",
                    r.model_id, r.prompt_id
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, model_id: &str, prompt_id: &str) -> Option<&DbRecord> {
        self.records.iter().find(|r| r.model_id == model_id && r.prompt_id == prompt_id)
    }

    pub fn for_prompt<'a>(&'a self, prompt_id: &'a str) -> impl Iterator<Item = &'a DbRecord> + 'a {
        self.records.iter().filter(move |r| r.prompt_id == prompt_id)
    }

    /// Inserts `record`, archiving any record with the same (model, prompt).
    pub fn upsert(&mut self, record: DbRecord) -> Result<()> {
        if record.provenance == Provenance::Empirical && record.sample_count.is_none_or(|n| n == 0) {
            return Err(Error::InvalidParameter("empirical records need sample_count >= 1".into()));
        }
        if let Some(i) =
            self.records.iter().position(|r| r.model_id == record.model_id && r.prompt_id == record.prompt_id)
        {
            let old = self.records.remove(i);
            self.archive.push(ArchivedRecord {
                archived_at: Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
                record: old,
            });
        }
        self.records.push(record);
        Ok(())
    }

    /// Samples a reference endpoint `n` times and stores the empirical distribution.
    pub fn ingest<E: Endpoint + ?Sized>(
        &mut self,
        endpoint: &mut E,
        prompt: &RenderedPrompt<'_>,
        n: usize,
        model_id: &str,
    ) -> Result<&DbRecord> {
        let record = ingest(endpoint, prompt, n, model_id)?;
        self.upsert(record)?;
        Ok(self.records.last().expect("just inserted"))
    }
}

/// Relative frequencies of in-vocabulary samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    pub dist: Categorical,
    pub in_vocab: usize,
    pub out_of_vocab_fraction: f64,
}

pub fn empirical_distribution<S: AsRef<str>>(samples: &[S], vocab: &HashSet<String>) -> Result<EmpiricalDistribution> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in samples {
        let s = s.as_ref();
        if vocab.contains(s) {
            *counts.entry(s).or_default() += 1;
        }
    }
    let in_vocab: usize = counts.values().sum();
    if in_vocab == 0 {
        return Err(Error::Estimation(format!("none of {} samples fall in the expected vocabulary", samples.len())));
    }
    let dist = Categorical::from_weights(counts.into_iter().map(|(t, c)| (t, c as f64)))?;
    Ok(EmpiricalDistribution {
        dist,
        in_vocab,
        out_of_vocab_fraction: (samples.len() - in_vocab) as f64 / samples.len() as f64,
    })
}

/// Empirical distribution of normalized responses to `prompt`.
pub fn observe<E: Endpoint + ?Sized>(
    endpoint: &mut E,
    prompt: &RenderedPrompt<'_>,
    n: usize,
) -> Result<(Vec<String>, EmpiricalDistribution)> {
    if n == 0 {
        return Err(Error::InvalidParameter("need at least one sample".into()));
    }
    let tokens: Vec<String> = endpoint
        .generate_batch(&prompt.text, n)?
        .iter()
        .map(|raw| match prompt.spec.normalize(raw).token {
            Some(t) => t.to_string(),
            // Whitespace-free marker that is never a vocabulary word.
            None => REST_TOKEN.to_string(),
        })
        .collect();
    let vocab: HashSet<String> = prompt.spec.expected_vocab().iter().cloned().collect();
    let empirical = empirical_distribution(&tokens, &vocab)?;
    Ok((tokens, empirical))
}

/// Samples `endpoint` (an attacker-controlled reference, full random sampling)
/// `n` times and builds an empirical record.
pub fn ingest<E: Endpoint + ?Sized>(
    endpoint: &mut E,
    prompt: &RenderedPrompt<'_>,
    n: usize,
    model_id: &str,
) -> Result<DbRecord> {
    let (_, empirical) = observe(endpoint, prompt, n)?;
    Ok(DbRecord {
        model_id: model_id.to_string(),
        prompt_id: prompt.spec.id().to_string(),
        provenance: Provenance::Empirical,
        sample_count: Some(n),
        dist: empirical.dist,
    })
}

/// Builds an analytic record from model probabilities: vocabulary entries plus
/// one aggregate entry for the remaining mass.
pub fn analytic_record(model_id: &str, spec: &PromptSpec, probs: &[(String, f64)]) -> Result<DbRecord> {
    let mut merged: BTreeMap<String, f64> = BTreeMap::new();
    let mut in_vocab_mass = 0.0;
    for (word, p) in probs {
        if let Some(tok) = spec.vocab_token(word) {
            *merged.entry(tok.to_string()).or_default() += p;
            in_vocab_mass += p;
        }
    }
    let rest = 1.0 - in_vocab_mass;
    if rest > 1e-12 {
        merged.insert(REST_TOKEN.to_string(), rest);
    }
    Ok(DbRecord {
        model_id: model_id.to_string(),
        prompt_id: spec.id().to_string(),
        provenance: Provenance::Analytic,
        sample_count: None,
        dist: Categorical::from_weights(merged)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub model_id: String,
    pub distance: f64,
    pub metric: Metric,
    pub runner_up_distance: Option<f64>,
    /// Total variation to the best record exceeds [`POOR_FIT_TV`]; heavy
    /// truncation of the target inflates every distance.
    pub poor_fit: bool,
}

/// The record for `prompt_id` closest to `observed`; ties go to the smaller model id.
pub fn best_match(
    observed: &Categorical,
    db: &KnownDistributionDB,
    prompt_id: &str,
    metric: Metric,
) -> Result<MatchResult> {
    let mut scored = db
        .for_prompt(prompt_id)
        .map(|r| {
            let known = r.in_vocab()?;
            Ok((distance(observed, &known, metric), r.model_id.as_str(), known))
        })
        .collect::<Result<Vec<_>>>()?;
    if scored.is_empty() {
        return Err(Error::NoRecords(prompt_id.to_string()));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let (best_distance, model_id, known) = &scored[0];
    Ok(MatchResult {
        model_id: model_id.to_string(),
        distance: *best_distance,
        metric,
        runner_up_distance: scored.get(1).map(|s| s.0),
        poor_fit: total_variation(observed, known) > POOR_FIT_TV,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::blackbox::simulate;
    use crate::distributions::DecodingStrategy;
    use crate::prompts::{catalog, find};

    fn vocab(words: &[&str]) -> HashSet<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn record(model: &str, prompt: &str, dist: Categorical) -> DbRecord {
        DbRecord {
            model_id: model.into(),
            prompt_id: prompt.into(),
            provenance: Provenance::Analytic,
            sample_count: None,
            dist,
        }
    }

    #[test]
    fn empirical_examples() {
        let e = empirical_distribution(&["a", "a", "b", "c"], &vocab(&["a", "b", "c"])).unwrap();
        let pairs: Vec<(&str, f64)> = e.dist.entries().iter().map(|(t, p)| (t.as_str(), *p)).collect();
        assert_eq!(pairs, vec![("a", 0.5), ("b", 0.25), ("c", 0.25)]);
        assert_eq!(e.out_of_vocab_fraction, 0.0);

        let e = empirical_distribution(&["a", "zz", "a"], &vocab(&["a", "b"])).unwrap();
        assert_eq!(e.dist.len(), 1);
        assert_abs_diff_eq!(e.out_of_vocab_fraction, 1.0 / 3.0);

        let empty: [&str; 0] = [];
        assert!(empirical_distribution(&empty, &vocab(&["a"])).is_err());
    }

    #[test]
    fn ingest_against_a_simulator() {
        let specs = catalog().unwrap();
        let months = find(&specs, "months").unwrap();
        let truth =
            Categorical::from_weights(months.expected_vocab().iter().enumerate().map(|(i, w)| (w, 13.0 - i as f64)))
                .unwrap();
        let table = HashMap::from([(months.template().to_string(), truth.clone())]);
        let mut sim = simulate(table, DecodingStrategy::top_p(1.0).unwrap(), 3).unwrap();
        let prompt = RenderedPrompt::new(months, 0).unwrap();

        let mut db = KnownDistributionDB::new();
        let rec = db.ingest(&mut sim, &prompt, 1000, "sim").unwrap();
        assert_eq!(rec.provenance, Provenance::Empirical);
        assert_eq!(rec.sample_count, Some(1000));
        assert!(total_variation(&rec.dist, &truth) < 0.05);

        assert!(db.ingest(&mut sim, &prompt, 0, "sim").is_err());

        db.ingest(&mut sim, &prompt, 200, "sim").unwrap();
        assert_eq!(db.records.len(), 1);
        assert_eq!(db.archive.len(), 1);
        assert_eq!(db.records[0].sample_count, Some(200));
        assert_eq!(db.archive[0].record.sample_count, Some(1000));
    }

    #[test]
    fn matching() {
        let obs = Categorical::uniform(["a", "b"]).unwrap();
        let mut db = KnownDistributionDB::new();
        db.upsert(record("exact", "p", obs.clone())).unwrap();
        db.upsert(record("far", "p", Categorical::uniform(["c"]).unwrap())).unwrap();
        let m = best_match(&obs, &db, "p", Metric::TotalVariation).unwrap();
        assert_eq!((m.model_id.as_str(), m.distance), ("exact", 0.0));
        assert_eq!(m.runner_up_distance, Some(1.0));
        assert!(!m.poor_fit);

        // TV 0.1 and 0.3 from observed.
        let obs = Categorical::from_weights([("a", 0.5), ("b", 0.5)]).unwrap();
        let mut db = KnownDistributionDB::new();
        db.upsert(record("near", "p", Categorical::from_weights([("a", 0.6), ("b", 0.4)]).unwrap())).unwrap();
        db.upsert(record("mid", "p", Categorical::from_weights([("a", 0.8), ("b", 0.2)]).unwrap())).unwrap();
        let m = best_match(&obs, &db, "p", Metric::TotalVariation).unwrap();
        assert_eq!(m.model_id, "near");
        assert_abs_diff_eq!(m.distance, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(m.runner_up_distance.unwrap(), 0.3, epsilon = 1e-12);
        let kl = best_match(&obs, &db, "p", Metric::RelativeEntropy).unwrap();
        assert_eq!(kl.model_id, "near");

        assert!(matches!(best_match(&obs, &db, "other", Metric::TotalVariation), Err(Error::NoRecords(_))));
    }

    #[test]
    fn ties_go_to_the_smaller_id() {
        let obs = Categorical::uniform(["a", "b"]).unwrap();
        let mut db = KnownDistributionDB::new();
        db.upsert(record("zeta", "p", obs.clone())).unwrap();
        db.upsert(record("alpha", "p", obs.clone())).unwrap();
        assert_eq!(best_match(&obs, &db, "p", Metric::TotalVariation).unwrap().model_id, "alpha");
    }

    #[test]
    fn analytic_records_carry_the_rest_mass() {
        let specs = catalog().unwrap();
        let months = find(&specs, "months").unwrap();
        let probs = vec![("March".to_string(), 0.3), ("May".to_string(), 0.2), ("and".to_string(), 0.1)];
        let rec = analytic_record("m", months, &probs).unwrap();
        assert_abs_diff_eq!(rec.dist.prob_of(REST_TOKEN), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(rec.dist.prob_of("March"), 0.3, epsilon = 1e-12);
        let iv = rec.in_vocab().unwrap();
        assert_eq!(iv.len(), 2);
        assert_abs_diff_eq!(iv.prob_of("March"), 0.6, epsilon = 1e-12);
    }

    #[test]
    fn file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.json");
        let mut db = KnownDistributionDB::new();
        db.upsert(record("m", "p", Categorical::uniform(["a", "b"]).unwrap())).unwrap();
        db.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["records"][0]["provenance"], "analytic");
        assert_eq!(v["records"][0]["dist"]["entries"][0][0], "a");
        assert!(v.get("archive").is_none());
        assert_eq!(KnownDistributionDB::load(&path).unwrap(), db);

        fs::write(
            &path,
            r#"{"records":[{"model_id":"m","prompt_id":"p","provenance":"empirical","sample_count":null,
                "dist":{"entries":[["a",1.0]]}}]}"#,
        )
        .unwrap();
        assert!(KnownDistributionDB::load(&path).is_err());
    }
}
