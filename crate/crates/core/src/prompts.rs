//! Prompt catalog, exemplar randomization and response normalization.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::Token;
use crate::error::{Error, Result};

/// Placeholder in a template that receives the sampled exemplars.
pub const EXEMPLAR_SLOT: &str = "{exemplars}";

pub const DEFAULT_EXEMPLARS: usize = 16;

const NOUNS: &str = include_str!("../data/nouns.txt");
const ADVERBS: &str = include_str!("../data/adverbs.txt");
const MONTHS: &str = include_str!("../data/months.txt");

const PUNCTUATION: &[char] = &['.', ',', ';', ':', '!', '?', '"', '\'', '“', '”', '‘', '’', '`'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    Plain,
    Conversational,
}

fn default_exemplars() -> usize {
    DEFAULT_EXEMPLARS
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawPromptSpec {
    id: String,
    template: String,
    exemplar_pool: Option<Vec<String>>,
    #[serde(default = "default_exemplars")]
    n_exemplars: usize,
    expected_vocab: Vec<String>,
    style: PromptStyle,
    #[serde(default)]
    case_insensitive: bool,
}

/// A prompt template with its expected response vocabulary `V_m`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawPromptSpec", into = "RawPromptSpec")]
pub struct PromptSpec {
    raw: RawPromptSpec,
    // vocabulary key (lowercased when case-insensitive) -> canonical token
    lookup: HashMap<String, Token>,
}

impl TryFrom<RawPromptSpec> for PromptSpec {
    type Error = Error;

    fn try_from(raw: RawPromptSpec) -> Result<Self> {
        if raw.expected_vocab.len() < 2 {
            return Err(Error::Catalog(format!("prompt {:?} needs at least two vocabulary items", raw.id)));
        }
        if raw.template.contains(EXEMPLAR_SLOT) {
            match &raw.exemplar_pool {
                Some(pool) if !pool.is_empty() => {}
                _ => {
                    return Err(Error::Catalog(format!(
                        "prompt {:?} has an exemplar slot but no exemplar pool",
                        raw.id
                    )))
                }
            }
        }
        let mut lookup = HashMap::with_capacity(raw.expected_vocab.len());
        for word in &raw.expected_vocab {
            let token = Token::new(word.as_str())?;
            let key = if raw.case_insensitive { word.to_lowercase() } else { word.clone() };
            if lookup.insert(key, token).is_some() {
                return Err(Error::Catalog(format!("prompt {:?} repeats vocabulary item {word:?}", raw.id)));
            }
        }
        Ok(Self { raw, lookup })
    }
}

impl From<PromptSpec> for RawPromptSpec {
    fn from(spec: PromptSpec) -> Self {
        spec.raw
    }
}

impl PromptSpec {
    pub fn new(
        id: impl Into<String>,
        template: impl Into<String>,
        exemplar_pool: Option<Vec<String>>,
        n_exemplars: usize,
        expected_vocab: Vec<String>,
        style: PromptStyle,
    ) -> Result<Self> {
        RawPromptSpec {
            id: id.into(),
            template: template.into(),
            exemplar_pool,
            n_exemplars,
            expected_vocab,
            style,
            case_insensitive: false,
        }
        .try_into()
    }

    pub fn case_insensitive(mut self, on: bool) -> Result<Self> {
        self.raw.case_insensitive = on;
        self.raw.try_into()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn id(&self) -> &str {
        &self.raw.id
    }

    pub fn template(&self) -> &str {
        &self.raw.template
    }

    pub fn style(&self) -> PromptStyle {
        self.raw.style
    }

    pub fn n_exemplars(&self) -> usize {
        self.raw.n_exemplars
    }

    pub fn expected_vocab(&self) -> &[String] {
        &self.raw.expected_vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.raw.expected_vocab.len()
    }

    pub fn has_exemplar_slot(&self) -> bool {
        self.raw.template.contains(EXEMPLAR_SLOT)
    }

    /// The template text before the exemplar slot; every rendering starts with it.
    pub fn fixed_prefix(&self) -> &str {
        match self.raw.template.find(EXEMPLAR_SLOT) {
            Some(at) => self.raw.template[..at].trim_end(),
            None => &self.raw.template,
        }
    }

    /// Canonical vocabulary token matching `word`, if any.
    pub fn vocab_token(&self, word: &str) -> Option<&Token> {
        if self.raw.case_insensitive {
            self.lookup.get(&word.to_lowercase())
        } else {
            self.lookup.get(word)
        }
    }

    pub fn vocab_tokens(&self) -> impl Iterator<Item = &Token> {
        self.lookup.values()
    }

    /// Fills the exemplar slot with `n_exemplars` pool words drawn without
    /// replacement. Deterministic per seed.
    pub fn render(&self, seed: u64) -> Result<String> {
        if !self.has_exemplar_slot() {
            return Ok(self.raw.template.clone());
        }
        let pool = self.raw.exemplar_pool.as_deref().unwrap_or_default();
        let n = self.raw.n_exemplars;
        if pool.len() < n {
            return Err(Error::InvalidParameter(format!(
                "prompt {:?} needs {n} exemplars but the pool has {}",
                self.raw.id,
                pool.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chosen: Vec<&str> = index::sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i].as_str()).collect();
        Ok(self.raw.template.replace(EXEMPLAR_SLOT, &chosen.join(" ")))
    }

    pub fn normalize(&self, raw: &str) -> NormalizedResponse {
        normalize_response(raw, self)
    }
}

/// A response reduced to its first word and checked against `V_m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedResponse {
    pub token: Option<Token>,
    pub raw: String,
    pub in_vocab: bool,
}

/// First whitespace-separated word of `raw`, with surrounding punctuation and
/// quotes stripped.
pub fn first_word(raw: &str) -> &str {
    raw.split_whitespace().next().unwrap_or("").trim_matches(PUNCTUATION)
}

pub fn normalize_response(raw: &str, spec: &PromptSpec) -> NormalizedResponse {
    let token = spec.vocab_token(first_word(raw)).cloned();
    NormalizedResponse { in_vocab: token.is_some(), token, raw: raw.to_string() }
}

/// A prompt rendered for one system or attack run.
#[derive(Debug, Clone)]
pub struct RenderedPrompt<'a> {
    pub spec: &'a PromptSpec,
    pub text: String,
}

impl<'a> RenderedPrompt<'a> {
    pub fn new(spec: &'a PromptSpec, seed: u64) -> Result<Self> {
        Ok(Self { spec, text: spec.render(seed)? })
    }
}

/// Parses a bundled or user word list: one token per line, blank lines ignored.
pub fn parse_word_list(name: &str, text: &str) -> Result<Vec<String>> {
    let mut seen = HashSet::new();
    let mut words = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let word = line.trim_end_matches('\r');
        if word.is_empty() {
            continue;
        }
        if word.chars().any(char::is_whitespace) {
            return Err(Error::Catalog(format!("{name}:{}: entry {word:?} contains whitespace", i + 1)));
        }
        if !seen.insert(word) {
            return Err(Error::Catalog(format!("{name}:{}: duplicate entry {word:?}", i + 1)));
        }
        words.push(word.to_string());
    }
    if words.is_empty() {
        return Err(Error::Catalog(format!("{name}: word list is empty")));
    }
    Ok(words)
}

pub fn load_word_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Catalog(format!("{}: {e}", path.display())))?;
    parse_word_list(&path.display().to_string(), &text)
}

fn numbers(lo: u32, hi: u32) -> Vec<String> {
    (lo..=hi).map(|n| n.to_string()).collect()
}

fn chat(id: &str, template: &str, vocab: Vec<String>) -> Result<PromptSpec> {
    PromptSpec::new(id, template, None, DEFAULT_EXEMPLARS, vocab, PromptStyle::Conversational)?.case_insensitive(true)
}

/// The eight built-in prompts.
pub fn catalog() -> Result<Vec<PromptSpec>> {
    let nouns = parse_word_list("nouns.txt", NOUNS)?;
    let adverbs = parse_word_list("adverbs.txt", ADVERBS)?;
    let months = parse_word_list("months.txt", MONTHS)?;
    Ok(vec![
        PromptSpec::new(
            "nouns",
            "List of nouns chosen completely randomly: {exemplars}",
            Some(nouns.clone()),
            DEFAULT_EXEMPLARS,
            nouns,
            PromptStyle::Plain,
        )?,
        PromptSpec::new(
            "adverbs",
            "List of adverbs chosen completely randomly: {exemplars}",
            Some(adverbs.clone()),
            DEFAULT_EXEMPLARS,
            adverbs,
            PromptStyle::Plain,
        )?,
        PromptSpec::new(
            "months",
            "She came to visit in the month of",
            None,
            DEFAULT_EXEMPLARS,
            months.clone(),
            PromptStyle::Plain,
        )?,
        PromptSpec::new(
            "dates",
            "The accident occurred on March",
            None,
            DEFAULT_EXEMPLARS,
            numbers(1, 31),
            PromptStyle::Plain,
        )?,
        chat(
            "monthschat",
            "write one word for the rest of this sentence: \"She came to visit in the month of\"",
            months,
        )?,
        chat(
            "dateschat",
            "write one word for the rest of this sentence: \"The accident occured on March\"",
            numbers(1, 31),
        )?,
        chat(
            "d20chat",
            "write one number for the rest of this sentence: \"I rolled a D20 and the outcome was\"",
            numbers(1, 20),
        )?,
        chat(
            "d100chat",
            "Could you roll me a D100? We're playing D&D. Answer with just the roll value and nothing else.",
            numbers(1, 100),
        )?,
    ])
}

/// Looks up a catalog prompt by id.
pub fn find<'a>(specs: &'a [PromptSpec], id: &str) -> Result<&'a PromptSpec> {
    specs.iter().find(|s| s.id() == id).ok_or_else(|| Error::UnknownPrompt(id.to_string()))
}
