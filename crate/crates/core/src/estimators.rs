//! Attack algorithms: recovering `k`, recovering `p`, telling top-k from top-p,
//! and sample-budget bounds.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::blackbox::Endpoint;
use crate::distributions::{Categorical, Token, REST_TOKEN};
use crate::error::{Error, Result};
use crate::prompts::RenderedPrompt;

/// Sampling budgets and thresholds shared by the estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub max_iterations: usize,
    pub batch_size: usize,
    pub min_occurrences: usize,
    pub p_samples: usize,
    pub ratio_threshold: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { max_iterations: 32, batch_size: 100, min_occurrences: 2, p_samples: 3000, ratio_threshold: 1.5 }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.batch_size == 0 || self.min_occurrences == 0 || self.p_samples == 0 {
            return Err(Error::InvalidParameter("estimator budgets must be positive".into()));
        }
        if !(self.ratio_threshold.is_finite() && self.ratio_threshold > 1.0) {
            return Err(Error::InvalidParameter(format!(
                "ratio_threshold must exceed 1, got {}",
                self.ratio_threshold
            )));
        }
        Ok(())
    }

    /// Per-prompt ceiling on samples drawn by the k estimator.
    pub fn k_budget(&self) -> usize {
        self.max_iterations * self.batch_size
    }
}

/// What one prompt's samples showed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEvidence {
    pub prompt_id: String,
    /// Distinct in-vocabulary tokens observed.
    pub unique: usize,
    pub samples: usize,
    pub out_of_vocab: usize,
    /// Count of the least frequent observed token (0 when nothing was observed).
    pub min_count: usize,
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
struct Tally {
    counts: HashMap<Token, usize>,
    samples: usize,
    out_of_vocab: usize,
}

impl Tally {
    fn new() -> Self {
        Self { counts: HashMap::new(), samples: 0, out_of_vocab: 0 }
    }

    fn draw<E: Endpoint + ?Sized>(&mut self, gen: &mut E, prompt: &RenderedPrompt<'_>, n: usize) -> Result<()> {
        for raw in gen.generate_batch(&prompt.text, n)? {
            self.samples += 1;
            match prompt.spec.normalize(&raw).token {
                Some(tok) => *self.counts.entry(tok).or_default() += 1,
                None => self.out_of_vocab += 1,
            }
        }
        Ok(())
    }

    fn unique(&self) -> usize {
        self.counts.len()
    }

    fn min_count(&self) -> usize {
        self.counts.values().copied().min().unwrap_or(0)
    }

    fn settled(&self, min_occurrences: usize) -> bool {
        self.unique() > 0 && self.min_count() >= min_occurrences
    }

    fn evidence(&self, prompt_id: &str) -> PromptEvidence {
        PromptEvidence {
            prompt_id: prompt_id.to_string(),
            unique: self.unique(),
            samples: self.samples,
            out_of_vocab: self.out_of_vocab,
            min_count: self.min_count(),
            counts: self.counts.iter().map(|(t, c)| (t.to_string(), *c)).collect(),
        }
    }
}

/// Result of the k estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KEstimate {
    pub k_hat: usize,
    pub k1: usize,
    pub k2: usize,
    pub converged: bool,
    /// Total samples drawn across both prompts.
    pub samples_used: usize,
    pub iterations: usize,
    pub per_prompt: [PromptEvidence; 2],
}

/// Estimates `k` from two prompts with large vocabularies of different sizes.
///
/// Batches are drawn alternately from both prompts. The loop stops once both
/// per-prompt unique counts agree and the least frequent token of each sample
/// set has been seen at least `min_occurrences` times; otherwise it runs the
/// full budget and returns the floored average of the two lower bounds.
pub fn estimate_k<E: Endpoint + ?Sized>(
    m1: &RenderedPrompt<'_>,
    m2: &RenderedPrompt<'_>,
    gen: &mut E,
    cfg: &EstimatorConfig,
) -> Result<KEstimate> {
    cfg.validate()?;
    let (mut t1, mut t2) = (Tally::new(), Tally::new());
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        t1.draw(gen, m1, cfg.batch_size)?;
        t2.draw(gen, m2, cfg.batch_size)?;
        if t1.unique() == t2.unique() && t1.settled(cfg.min_occurrences) && t2.settled(cfg.min_occurrences) {
            converged = true;
            break;
        }
    }
    let (k1, k2) = (t1.unique(), t2.unique());
    let k_hat = match (k1, k2) {
        (0, 0) => {
            return Err(Error::Estimation(format!(
                "no in-vocabulary responses for {:?} or {:?}",
                m1.spec.id(),
                m2.spec.id()
            )))
        }
        // A prompt that never answered in-vocabulary carries no information.
        (0, k) | (k, 0) => k,
        (a, b) => (a + b) / 2,
    };
    Ok(KEstimate {
        k_hat,
        k1,
        k2,
        converged,
        samples_used: t1.samples + t2.samples,
        iterations,
        per_prompt: [t1.evidence(m1.spec.id()), t2.evidence(m2.spec.id())],
    })
}

/// Result of the p estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PEstimate {
    pub p_hat: f64,
    pub p1: f64,
    pub p2: f64,
    pub unique_counts: [usize; 2],
    pub samples_per_prompt: usize,
    pub out_of_vocab: [usize; 2],
    /// Set when the raw average fell outside [0, 1].
    pub clamped: bool,
}

impl PEstimate {
    /// Disagreement between the two per-prompt bounds.
    pub fn spread(&self) -> f64 {
        (self.p1 - self.p2).abs()
    }
}

/// Probabilities of a known distribution in the order the p bound consumes
/// them: in-vocabulary entries descending, then the out-of-set aggregate.
pub fn bound_order(known: &Categorical) -> (Vec<f64>, Option<f64>) {
    let mut rest = None;
    let mut probs = Vec::with_capacity(known.len());
    for (t, p) in known.entries() {
        if t.as_str() == REST_TOKEN {
            rest = Some(*p);
        } else {
            probs.push(*p);
        }
    }
    (probs, rest)
}

/// Sum of the `unique` largest in-vocabulary probabilities of `known`.
pub fn p_upper_bound(known: &Categorical, unique: usize) -> Result<f64> {
    let (probs, _) = bound_order(known);
    if unique > probs.len() {
        return Err(Error::Estimation(format!(
            "observed {unique} distinct tokens but the known distribution has only {} \
             (vocabulary mismatch)",
            probs.len()
        )));
    }
    Ok(probs[..unique].iter().sum())
}

/// Estimates `p` as the average of two per-prompt upper bounds, each the prefix
/// sum of the known distribution up to the number of distinct tokens observed.
pub fn estimate_p<E: Endpoint + ?Sized>(
    m1: &RenderedPrompt<'_>,
    m2: &RenderedPrompt<'_>,
    gen: &mut E,
    known1: &Categorical,
    known2: &Categorical,
    cfg: &EstimatorConfig,
) -> Result<PEstimate> {
    cfg.validate()?;
    let (mut t1, mut t2) = (Tally::new(), Tally::new());
    t1.draw(gen, m1, cfg.p_samples)?;
    t2.draw(gen, m2, cfg.p_samples)?;
    let p1 = p_upper_bound(known1, t1.unique())?;
    let p2 = p_upper_bound(known2, t2.unique())?;
    let raw = (p1 + p2) / 2.0;
    let p_hat = raw.clamp(0.0, 1.0);
    let clamped = p_hat != raw;
    // Prefix sums of a full distribution can exceed 1 by rounding alone.
    if (p_hat - raw).abs() > 1e-9 {
        log::warn!("p estimate {raw} clamped to {p_hat}");
    }
    Ok(PEstimate {
        p_hat,
        p1,
        p2,
        unique_counts: [t1.unique(), t2.unique()],
        samples_per_prompt: cfg.p_samples,
        out_of_vocab: [t1.out_of_vocab, t2.out_of_vocab],
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    TopK,
    TopP,
    Indeterminate,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::TopK => "top_k",
            Verdict::TopP => "top_p",
            Verdict::Indeterminate => "indeterminate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyVerdict {
    pub verdict: Verdict,
    /// Distinct tokens from the large-vocabulary prompt over those from the small one.
    pub ratio: f64,
    pub large: PromptEvidence,
    pub small: PromptEvidence,
}

impl StrategyVerdict {
    pub fn samples_used(&self) -> usize {
        self.large.samples + self.small.samples
    }
}

/// Distinguishes top-k from top-p by comparing how many distinct tokens two
/// prompts with very different vocabulary sizes produce.
///
/// Both prompts are sampled for the full `max_iterations × batch_size` budget.
/// Under top-k both counts settle at the same value; under top-p the larger
/// vocabulary yields proportionally more tokens. When the small prompt shows
/// its whole vocabulary, or both prompts collapse to at most two tokens, the
/// two hypotheses predict the same observations and the verdict is
/// indeterminate.
pub fn classify_strategy<E: Endpoint + ?Sized>(
    m_large: &RenderedPrompt<'_>,
    m_small: &RenderedPrompt<'_>,
    gen: &mut E,
    cfg: &EstimatorConfig,
) -> Result<StrategyVerdict> {
    cfg.validate()?;
    let (mut large, mut small) = (Tally::new(), Tally::new());
    for _ in 0..cfg.max_iterations {
        large.draw(gen, m_large, cfg.batch_size)?;
        small.draw(gen, m_small, cfg.batch_size)?;
    }
    let (kl, ks) = (large.unique(), small.unique());
    if kl == 0 && ks == 0 {
        return Err(Error::Estimation(format!(
            "no in-vocabulary responses for {:?} or {:?}",
            m_large.spec.id(),
            m_small.spec.id()
        )));
    }
    let ratio = kl as f64 / ks.max(1) as f64;
    let saturated = ks >= m_small.spec.vocab_size();
    let verdict = if (kl <= 2 && ks <= 2) || saturated {
        Verdict::Indeterminate
    } else if ratio >= cfg.ratio_threshold {
        Verdict::TopP
    } else if kl == ks && large.settled(cfg.min_occurrences) && small.settled(cfg.min_occurrences) {
        Verdict::TopK
    } else {
        Verdict::Indeterminate
    };
    Ok(StrategyVerdict {
        verdict,
        ratio,
        large: large.evidence(m_large.spec.id()),
        small: small.evidence(m_small.spec.id()),
    })
}

/// Samples sufficient to see every token of a `k`-item support with
/// probability at least `1 - 1/(ck)` when every token has probability at
/// least `1/(ck)`: `ceil(2ck ln(ck))`, never less than `k`.
///
/// Panics if `k == 0` or `c < 1`.
pub fn coupon_bound(k: usize, c: f64) -> usize {
    assert!(k >= 1, "coupon_bound requires k >= 1");
    assert!(c >= 1.0, "coupon_bound requires c >= 1");
    let ck = c * k as f64;
    let n = (2.0 * ck * ck.ln()).ceil();
    (n as usize).max(k)
}

/// Smallest `p` the two-prompt estimator can report: the mean of the top-1
/// in-vocabulary probabilities.
pub fn min_detectable_p(known1: &Categorical, known2: &Categorical) -> f64 {
    let top = |d: &Categorical| bound_order(d).0.first().copied().unwrap_or(0.0);
    (top(known1) + top(known2)) / 2.0
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::blackbox::{simulate, SimulatedSystem};
    use crate::distributions::DecodingStrategy;
    use crate::prompts::{PromptSpec, PromptStyle};

    fn words(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn spec(id: &str, vocab: Vec<String>) -> PromptSpec {
        PromptSpec::new(id, format!("prompt {id}"), None, 16, vocab, PromptStyle::Plain).unwrap()
    }

    fn system(specs: &[(&PromptSpec, Categorical)], strategy: DecodingStrategy, seed: u64) -> SimulatedSystem {
        let table: HashMap<String, Categorical> =
            specs.iter().map(|(s, d)| (s.template().to_string(), d.clone())).collect();
        simulate(table, strategy, seed).unwrap()
    }

    fn uniform_pair(n1: usize, n2: usize) -> (PromptSpec, PromptSpec) {
        (spec("big", words("a", n1)), spec("small", words("b", n2)))
    }

    fn rendered(spec: &PromptSpec) -> RenderedPrompt<'_> {
        RenderedPrompt::new(spec, 0).unwrap()
    }

    #[test]
    fn k_on_uniform_tables() {
        let (s1, s2) = (spec("adverbs", words("a", 504)), spec("nouns", words("n", 8432)));
        let d1 = Categorical::uniform(s1.expected_vocab()).unwrap();
        let d2 = Categorical::uniform(s2.expected_vocab()).unwrap();
        let mut gen = system(&[(&s1, d1), (&s2, d2)], DecodingStrategy::top_k(40).unwrap(), 1);
        let est = estimate_k(&rendered(&s1), &rendered(&s2), &mut gen, &EstimatorConfig::default()).unwrap();
        assert_eq!(est.k_hat, 40);
        assert!(est.converged);
        assert_eq!(est.samples_used as u64, gen.queries());
    }

    #[test]
    fn argmax_converges_after_one_batch() {
        let (s1, s2) = uniform_pair(50, 70);
        let d1 = Categorical::uniform(s1.expected_vocab()).unwrap();
        let d2 = Categorical::uniform(s2.expected_vocab()).unwrap();
        let mut gen = system(&[(&s1, d1), (&s2, d2)], DecodingStrategy::argmax(), 2);
        let est = estimate_k(&rendered(&s1), &rendered(&s2), &mut gen, &EstimatorConfig::default()).unwrap();
        assert_eq!((est.k_hat, est.iterations, est.converged), (1, 1, true));
        assert_eq!(est.samples_used, 200);
    }

    #[test]
    fn out_of_vocab_responses_are_discarded() {
        let (s1, s2) = uniform_pair(50, 70);
        let mut w1: Vec<(String, f64)> = s1.expected_vocab().iter().map(|w| (w.clone(), 1.0)).collect();
        w1.push(("and".into(), 50.0));
        let d1 = Categorical::from_weights(w1).unwrap();
        let d2 = Categorical::uniform(s2.expected_vocab()).unwrap();
        let mut gen = system(&[(&s1, d1), (&s2, d2)], DecodingStrategy::top_k(5).unwrap(), 3);
        let est = estimate_k(&rendered(&s1), &rendered(&s2), &mut gen, &EstimatorConfig::default()).unwrap();
        // "and" is one of the five survivors but never counted.
        assert_eq!(est.k1, 4);
        assert_eq!(est.k2, 5);
        assert!(!est.converged);
        assert_eq!(est.k_hat, 4);
        assert!(est.per_prompt[0].out_of_vocab > 0);
        assert_eq!(est.samples_used, 2 * 3200);
    }

    #[test]
    fn all_out_of_vocab_is_an_error() {
        let (s1, s2) = uniform_pair(5, 7);
        let junk = Categorical::uniform(["x", "y"]).unwrap();
        let mut gen = system(&[(&s1, junk.clone()), (&s2, junk)], DecodingStrategy::top_k(2).unwrap(), 4);
        let cfg = EstimatorConfig { max_iterations: 2, ..Default::default() };
        assert!(estimate_k(&rendered(&s1), &rendered(&s2), &mut gen, &cfg).is_err());
    }

    #[test]
    fn p_full_vocab_gives_one() {
        let (s1, s2) = (spec("months", words("m", 13)), spec("dates", words("d", 31)));
        let k1 = Categorical::from_weights(s1.expected_vocab().iter().enumerate().map(|(i, w)| (w, 1.0 + i as f64)))
            .unwrap();
        let k2 = Categorical::uniform(s2.expected_vocab()).unwrap();
        let mut gen = system(&[(&s1, k1.clone()), (&s2, k2.clone())], DecodingStrategy::top_p(1.0).unwrap(), 5);
        let est = estimate_p(&rendered(&s1), &rendered(&s2), &mut gen, &k1, &k2, &EstimatorConfig::default()).unwrap();
        assert_eq!(est.unique_counts, [13, 31]);
        assert_abs_diff_eq!(est.p_hat, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn p_on_uniform_20_and_40() {
        // Brute-force cutoff: smallest j with j/n >= p.
        let cutoff = |n: usize, p: f64| (1..=n).find(|j| *j as f64 / n as f64 >= p).unwrap();
        assert_eq!((cutoff(20, 0.6), cutoff(40, 0.6)), (12, 24));
        let (s1, s2) = (spec("u20", words("a", 20)), spec("u40", words("b", 40)));
        let k1 = Categorical::uniform(s1.expected_vocab()).unwrap();
        let k2 = Categorical::uniform(s2.expected_vocab()).unwrap();
        let mut gen = system(&[(&s1, k1.clone()), (&s2, k2.clone())], DecodingStrategy::top_p(0.6).unwrap(), 6);
        let est = estimate_p(&rendered(&s1), &rendered(&s2), &mut gen, &k1, &k2, &EstimatorConfig::default()).unwrap();
        assert_eq!(est.unique_counts, [12, 24]);
        assert!((0.575..=0.65).contains(&est.p_hat), "{}", est.p_hat);
    }

    #[test]
    fn p_floor_below_top_probabilities() {
        let (s1, s2) = (spec("a", words("a", 13)), spec("b", words("b", 31)));
        let k1 = Categorical::from_weights(s1.expected_vocab().iter().enumerate().map(|(i, w)| (w, 13.0 - i as f64)))
            .unwrap();
        let k2 = Categorical::from_weights(s2.expected_vocab().iter().enumerate().map(|(i, w)| (w, 31.0 - i as f64)))
            .unwrap();
        let mut gen = system(&[(&s1, k1.clone()), (&s2, k2.clone())], DecodingStrategy::top_p(0.01).unwrap(), 7);
        let est = estimate_p(&rendered(&s1), &rendered(&s2), &mut gen, &k1, &k2, &EstimatorConfig::default()).unwrap();
        assert_abs_diff_eq!(est.p_hat, min_detectable_p(&k1, &k2), epsilon = 1e-12);
    }

    #[test]
    fn p_bound_ignores_rest_and_flags_mismatch() {
        let known = Categorical::from_weights([("a", 0.5), ("b", 0.2), (REST_TOKEN, 0.3)]).unwrap();
        assert_eq!(bound_order(&known), (vec![0.5, 0.2], Some(0.3)));
        assert_abs_diff_eq!(p_upper_bound(&known, 1).unwrap(), 0.5);
        assert_abs_diff_eq!(p_upper_bound(&known, 2).unwrap(), 0.7, epsilon = 1e-15);
        assert_eq!(p_upper_bound(&known, 0).unwrap(), 0.0);
        assert!(p_upper_bound(&known, 3).is_err());
    }

    fn classify(strategy: DecodingStrategy, big: usize, small: usize, seed: u64) -> StrategyVerdict {
        let (s1, s2) = uniform_pair(big, small);
        let d1 = Categorical::uniform(s1.expected_vocab()).unwrap();
        let d2 = Categorical::uniform(s2.expected_vocab()).unwrap();
        let mut gen = system(&[(&s1, d1), (&s2, d2)], strategy, seed);
        classify_strategy(&rendered(&s1), &rendered(&s2), &mut gen, &EstimatorConfig::default()).unwrap()
    }

    #[test]
    fn classify_top_p_on_uniform_504_and_13() {
        let cutoff = |n: usize, p: f64| (1..=n).find(|j| *j as f64 / n as f64 >= p).unwrap();
        assert_eq!((cutoff(504, 0.5), cutoff(13, 0.5)), (252, 7));
        let v = classify(DecodingStrategy::top_p(0.5).unwrap(), 504, 13, 8);
        assert_eq!(v.verdict, Verdict::TopP);
        assert_eq!((v.large.unique, v.small.unique), (252, 7));
        assert_abs_diff_eq!(v.ratio, 36.0);
    }

    #[test]
    fn classify_top_k_and_extremes() {
        let v = classify(DecodingStrategy::top_k(40).unwrap(), 504, 300, 9);
        assert_eq!(v.verdict, Verdict::TopK);
        assert_eq!(v.ratio, 1.0);
        assert_eq!(v.samples_used(), 6400);

        let v = classify(DecodingStrategy::top_p(0.0).unwrap(), 504, 13, 10);
        assert_eq!(v.verdict, Verdict::Indeterminate);
        assert_eq!((v.large.unique, v.small.unique), (1, 1));

        // Small vocabulary fully observed: consistent with any large k.
        let v = classify(DecodingStrategy::top_k(100).unwrap(), 504, 13, 11);
        assert_eq!(v.verdict, Verdict::Indeterminate);
    }

    #[test]
    fn coupon_bound_values() {
        assert_eq!(coupon_bound(10, 1.0), 47);
        assert_eq!(coupon_bound(1, 1.0), 1);
        assert_eq!(coupon_bound(50, 2.0), 922);
        assert_eq!(coupon_bound(2, 1.0), 3);
    }

    #[test]
    #[should_panic]
    fn coupon_bound_rejects_zero_k() {
        coupon_bound(0, 1.0);
    }

    #[test]
    fn min_detectable_examples() {
        let u13 = Categorical::uniform(words("a", 13)).unwrap();
        let u31 = Categorical::uniform(words("b", 31)).unwrap();
        assert_abs_diff_eq!(min_detectable_p(&u13, &u31), (1.0 / 13.0 + 1.0 / 31.0) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(min_detectable_p(&u13, &u31), 0.0546, epsilon = 1e-4);
        let pm = Categorical::uniform(["x"]).unwrap();
        assert_eq!(min_detectable_p(&pm, &pm), 1.0);
        let a = Categorical::from_weights([("a", 0.3), ("b", 0.7 / 3.0), ("c", 0.7 / 3.0), ("d", 0.7 / 3.0)]).unwrap();
        let b = Categorical::from_weights((0..10).map(|i| (format!("t{i}"), 0.1))).unwrap();
        assert_abs_diff_eq!(min_detectable_p(&a, &b), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(EstimatorConfig::default().validate().is_ok());
        assert!(EstimatorConfig { ratio_threshold: 1.0, ..Default::default() }.validate().is_err());
        assert!(EstimatorConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        let cfg: EstimatorConfig = serde_json::from_str(r#"{"max_iterations": 64}"#).unwrap();
        assert_eq!(cfg.max_iterations, 64);
        assert_eq!(cfg.batch_size, 100);
    }
}
