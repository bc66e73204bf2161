//! Finite next-token distributions and the truncation transforms that define
//! decoding strategies.
//!
//! A [`Categorical`] is always kept in canonical order: descending probability,
//! ties broken by ascending token text. Every truncation is taken as a prefix of
//! that order, so cutoffs are deterministic even when probabilities tie.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a stored distribution.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Aggregate entry holding the mass of every token outside a prompt's vocabulary.
pub const REST_TOKEN: &str = "\u{0}REST";

/// Slack on the top-p cutoff comparison, absorbing rounding in cumulative sums.
pub const CUTOFF_TOLERANCE: f64 = 1e-12;

/// Floor applied to zero cells of the reference distribution in relative entropy.
pub const KL_FLOOR: f64 = 1e-9;

/// A single vocabulary item.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Token(String);

impl Token {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.is_empty() || text.chars().any(char::is_whitespace) {
            return Err(Error::InvalidToken(text));
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Token {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        Token::new(value)
    }
}

impl From<Token> for String {
    fn from(t: Token) -> Self {
        t.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for Token {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

fn canonical_cmp(a: &(Token, f64), b: &(Token, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// A finite probability distribution over tokens in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCategorical")]
pub struct Categorical {
    entries: Vec<(Token, f64)>,
}

#[derive(Deserialize)]
struct RawCategorical {
    entries: Vec<(Token, f64)>,
}

impl TryFrom<RawCategorical> for Categorical {
    type Error = Error;

    fn try_from(raw: RawCategorical) -> Result<Self> {
        Categorical::from_canonical(raw.entries)
    }
}

impl Categorical {
    /// Normalizes nonnegative weights into a distribution. Zero-weight tokens
    /// are dropped from the support.
    pub fn from_weights<I, S>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: AsRef<str>,
    {
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for (token, weight) in pairs {
            let token = Token::new(token.as_ref())?;
            if !weight.is_finite() || weight < 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "weight {weight} for token {token:?} is not a finite nonnegative number"
                )));
            }
            if !seen.insert(token.clone()) {
                return Err(Error::InvalidDistribution(format!("duplicate token {token:?}")));
            }
            if weight > 0.0 {
                entries.push((token, weight));
            }
        }
        if entries.is_empty() {
            return Err(Error::InvalidDistribution("all weights are zero".into()));
        }
        Ok(Self::normalized(entries))
    }

    /// Validates entries that are claimed to already be a canonical distribution.
    pub fn from_canonical(entries: Vec<(Token, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidDistribution("empty support".into()));
        }
        let mut seen = HashSet::new();
        for (token, prob) in &entries {
            if !(prob.is_finite() && *prob > 0.0 && *prob <= 1.0) {
                return Err(Error::InvalidDistribution(format!("probability {prob} for {token:?} outside (0, 1]")));
            }
            if !seen.insert(token) {
                return Err(Error::InvalidDistribution(format!("duplicate token {token:?}")));
            }
        }
        for pair in entries.windows(2) {
            if canonical_cmp(&pair[0], &pair[1]) != Ordering::Less {
                return Err(Error::InvalidDistribution(format!(
                    "entries {:?} and {:?} are not in canonical order",
                    pair[0].0, pair[1].0
                )));
            }
        }
        let total: f64 = entries.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("probabilities sum to {total}")));
        }
        Ok(Self { entries })
    }

    /// Point mass on a single token.
    pub fn point_mass(token: Token) -> Self {
        Self { entries: vec![(token, 1.0)] }
    }

    /// Uniform distribution over the given tokens.
    pub fn uniform<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self::from_weights(tokens.into_iter().map(|t| (t, 1.0)))
    }

    // Positive weights, distinct tokens.
    fn normalized(mut entries: Vec<(Token, f64)>) -> Self {
        let total: f64 = entries.iter().map(|(_, w)| w).sum();
        for (_, w) in entries.iter_mut() {
            *w /= total;
        }
        entries.retain(|(_, p)| *p > 0.0);
        entries.sort_by(canonical_cmp);
        Self { entries }
    }

    pub fn entries(&self) -> &[(Token, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &Token> {
        self.entries.iter().map(|(t, _)| t)
    }

    pub fn probs(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|(_, p)| *p)
    }

    /// The most likely token, `x^(1)`.
    pub fn top(&self) -> &(Token, f64) {
        &self.entries[0]
    }

    pub fn prob_of(&self, token: &str) -> f64 {
        self.entries.iter().find(|(t, _)| t.as_str() == token).map_or(0.0, |(_, p)| *p)
    }

    /// Keeps the `k` most likely tokens and renormalizes.
    pub fn apply_top_k(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("top-k requires k >= 1".into()));
        }
        if k >= self.len() {
            return Ok(self.clone());
        }
        Ok(Self::normalized(self.entries[..k].to_vec()))
    }

    /// Keeps the smallest canonical prefix whose cumulative probability reaches
    /// `p` and renormalizes. At least one token is always kept.
    pub fn apply_top_p(&self, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!("top-p requires p in [0, 1], got {p}")));
        }
        if p >= 1.0 {
            return Ok(self.clone());
        }
        let cutoff = self.nucleus_size(p);
        if cutoff == self.len() {
            return Ok(self.clone());
        }
        Ok(Self::normalized(self.entries[..cutoff].to_vec()))
    }

    /// Number of tokens retained by top-p truncation at `p`: the first prefix
    /// whose running sum reaches `p` (within [`CUTOFF_TOLERANCE`]).
    pub fn nucleus_size(&self, p: f64) -> usize {
        let mut cumulative = 0.0;
        for (i, (_, prob)) in self.entries.iter().enumerate() {
            cumulative += prob;
            if cumulative >= p - CUTOFF_TOLERANCE {
                return i + 1;
            }
        }
        self.len()
    }

    /// Raises each probability to `1/t` and renormalizes.
    pub fn apply_temperature(&self, t: f64) -> Result<Self> {
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::InvalidParameter(format!("temperature must be > 0, got {t}")));
        }
        if t == 1.0 {
            return Ok(self.clone());
        }
        // Shifted by the top log-probability so the argmax keeps weight 1.
        let top = self.entries[0].1.ln();
        let entries = self
            .entries
            .iter()
            .map(|(tok, p)| (tok.clone(), ((p.ln() - top) / t).exp()))
            .filter(|(_, w)| *w > 0.0)
            .collect();
        Ok(Self::normalized(entries))
    }

    /// Draws one token.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &Token {
        let mut u: f64 = rng.random();
        for (token, prob) in &self.entries {
            if u < *prob {
                return token;
            }
            u -= prob;
        }
        &self.entries[self.entries.len() - 1].0
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.entries.iter().map(|(_, p)| if *p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>()
    }

    /// Restricts the support to tokens accepted by `keep` and renormalizes.
    pub fn restrict<F: Fn(&Token) -> bool>(&self, keep: F) -> Result<Self> {
        let entries: Vec<_> = self.entries.iter().filter(|(t, _)| keep(t)).cloned().collect();
        if entries.is_empty() {
            return Err(Error::InvalidDistribution("restriction leaves an empty support".into()));
        }
        Ok(Self::normalized(entries))
    }
}

/// Precomputed sampler for repeated draws from one distribution.
#[derive(Debug, Clone)]
pub struct CategoricalSampler {
    tokens: Vec<Token>,
    index: WeightedIndex<f64>,
}

impl CategoricalSampler {
    pub fn new(dist: &Categorical) -> Self {
        let index = WeightedIndex::new(dist.probs()).expect("categorical weights are positive");
        Self { tokens: dist.tokens().cloned().collect(), index }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &Token {
        &self.tokens[self.index.sample(rng)]
    }

    pub fn support(&self) -> &[Token] {
        &self.tokens
    }
}

/// Distance between two distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    TotalVariation,
    RelativeEntropy,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "total_variation" | "tv" => Ok(Metric::TotalVariation),
            "relative_entropy" | "kl" => Ok(Metric::RelativeEntropy),
            other => Err(Error::InvalidParameter(format!("unknown metric {other:?}"))),
        }
    }
}

// Aligned (p, q) cells over the union of supports.
fn aligned(d1: &Categorical, d2: &Categorical) -> Vec<(f64, f64)> {
    let mut cells: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for (t, p) in d1.entries() {
        cells.entry(t.as_str()).or_default().0 = *p;
    }
    for (t, q) in d2.entries() {
        cells.entry(t.as_str()).or_default().1 = *q;
    }
    cells.into_values().collect()
}

pub fn total_variation(d1: &Categorical, d2: &Categorical) -> f64 {
    let sum: f64 = aligned(d1, d2).iter().map(|(p, q)| (p - q).abs()).sum();
    (0.5 * sum).min(1.0)
}

/// `KL(d1 || d2)` in nats. Cells where `d2` is zero but `d1` is not are floored
/// at [`KL_FLOOR`] and `d2` is renormalized.
pub fn relative_entropy(d1: &Categorical, d2: &Categorical) -> f64 {
    let mut cells = aligned(d1, d2);
    if cells.iter().any(|(p, q)| *p > 0.0 && *q == 0.0) {
        for (p, q) in cells.iter_mut() {
            if *p > 0.0 && *q == 0.0 {
                *q = KL_FLOOR;
            }
        }
        let total: f64 = cells.iter().map(|(_, q)| q).sum();
        for (_, q) in cells.iter_mut() {
            *q /= total;
        }
    }
    cells.iter().filter(|(p, _)| *p > 0.0).map(|(p, q)| p * (p / q).ln()).sum::<f64>().max(0.0)
}

pub fn distance(d1: &Categorical, d2: &Categorical, metric: Metric) -> f64 {
    match metric {
        Metric::TotalVariation => total_variation(d1, d2),
        Metric::RelativeEntropy => relative_entropy(d1, d2),
    }
}

/// The truncation rule of a decoding strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Truncation {
    Argmax,
    TopK { k: usize },
    TopP { p: f64 },
}

fn default_temperature() -> f64 {
    1.0
}

/// A decoding configuration: temperature pre-transform followed by truncation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStrategy")]
pub struct DecodingStrategy {
    #[serde(flatten)]
    pub truncation: Truncation,
    pub temperature: f64,
}

#[derive(Deserialize)]
struct RawStrategy {
    #[serde(flatten)]
    truncation: Truncation,
    #[serde(default = "default_temperature")]
    temperature: f64,
}

impl TryFrom<RawStrategy> for DecodingStrategy {
    type Error = Error;

    fn try_from(raw: RawStrategy) -> Result<Self> {
        DecodingStrategy::new(raw.truncation, raw.temperature)
    }
}

impl DecodingStrategy {
    pub fn new(truncation: Truncation, temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::InvalidParameter(format!("temperature must be > 0, got {temperature}")));
        }
        match truncation {
            Truncation::TopK { k: 0 } => return Err(Error::InvalidParameter("top-k requires k >= 1".into())),
            Truncation::TopP { p } if !(0.0..=1.0).contains(&p) => {
                return Err(Error::InvalidParameter(format!("top-p requires p in [0, 1], got {p}")))
            }
            _ => {}
        }
        Ok(Self { truncation, temperature })
    }

    pub fn argmax() -> Self {
        Self { truncation: Truncation::Argmax, temperature: 1.0 }
    }

    pub fn top_k(k: usize) -> Result<Self> {
        Self::new(Truncation::TopK { k }, 1.0)
    }

    pub fn top_p(p: f64) -> Result<Self> {
        Self::new(Truncation::TopP { p }, 1.0)
    }

    pub fn with_temperature(self, temperature: f64) -> Result<Self> {
        Self::new(self.truncation, temperature)
    }

    /// The distribution actually sampled from: temperature first, then truncation.
    pub fn apply(&self, dist: &Categorical) -> Result<Categorical> {
        let shaped = dist.apply_temperature(self.temperature)?;
        match self.truncation {
            Truncation::Argmax => shaped.apply_top_k(1),
            Truncation::TopK { k } => shaped.apply_top_k(k),
            Truncation::TopP { p } => shaped.apply_top_p(p),
        }
    }
}

impl fmt::Display for DecodingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.truncation {
            Truncation::Argmax => write!(f, "argmax")?,
            Truncation::TopK { k } => write!(f, "top_k({k})")?,
            Truncation::TopP { p } => write!(f, "top_p({p})")?,
        }
        if self.temperature != 1.0 {
            write!(f, " @ t={}", self.temperature)?;
        }
        Ok(())
    }
}
