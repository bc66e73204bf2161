//! Experiment plans and evaluation runs over populations of simulated systems.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::report::{DiscriminationReport, DiscriminationRow, EvalReport, EvalRow};
use super::tables::{model_tables, perturb, system_for, Perturbation};
use crate::distributions::DecodingStrategy;
use crate::error::{Error, Result};
use crate::estimators::{classify_strategy, estimate_k, estimate_p, min_detectable_p, EstimatorConfig, Verdict};
use crate::prompts::{find, PromptSpec, RenderedPrompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    K,
    P,
    Classify,
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExperimentKind::K => "k",
            ExperimentKind::P => "p",
            ExperimentKind::Classify => "classify",
        })
    }
}

/// Everything needed to reproduce an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub kind: ExperimentKind,
    /// Systems drawn (k, p), or evenly spaced p values (classify).
    pub n_systems: usize,
    /// Inclusive range of the true parameter.
    pub param_range: [f64; 2],
    pub seed: u64,
    /// Prompt ids: the two estimator prompts, large vocabulary first for classify.
    pub prompts: [String; 2],
    /// Total variation between the attacker's known distributions and the truth (p only).
    pub known_tv: f64,
    pub perturbation: Perturbation,
    /// Half-width of the "within tolerance" accuracy band.
    pub tolerance: f64,
    /// Top-k settings for classify.
    pub k_values: Vec<usize>,
    /// Systems per classify setting.
    pub trials: usize,
    /// Adds the degenerate settings p = 0, p = 1, k = 1 and k = |V| of the small prompt (classify).
    pub include_extremes: bool,
    #[serde(flatten)]
    pub estimator: EstimatorConfig,
}

impl ExperimentPlan {
    pub fn for_kind(kind: ExperimentKind) -> Self {
        let base = Self {
            kind,
            n_systems: 200,
            param_range: [1.0, 100.0],
            seed: 0,
            prompts: ["nouns".into(), "adverbs".into()],
            known_tv: 0.0,
            perturbation: Perturbation::Random,
            tolerance: 5.0,
            k_values: Vec::new(),
            trials: 1,
            include_extremes: false,
            estimator: EstimatorConfig::default(),
        };
        match kind {
            ExperimentKind::K => base,
            ExperimentKind::P => Self {
                n_systems: 100,
                param_range: [0.0, 1.0],
                prompts: ["months".into(), "dates".into()],
                tolerance: 0.05,
                ..base
            },
            ExperimentKind::Classify => Self {
                n_systems: 9,
                param_range: [0.1, 0.9],
                k_values: vec![5, 20, 50, 200],
                trials: 20,
                include_extremes: true,
                tolerance: 0.0,
                ..base
            },
        }
    }

    /// Overlays the keys of a JSON object on this plan. Unknown keys are rejected.
    pub fn overlay(&self, overrides: &Value) -> Result<Self> {
        let Value::Object(overrides) = overrides else {
            return Err(Error::InvalidPlan("config must be a JSON object".into()));
        };
        let Value::Object(mut merged) = serde_json::to_value(self)? else { unreachable!("plans serialize to objects") };
        for (key, value) in overrides {
            if !merged.contains_key(key) {
                return Err(Error::InvalidPlan(format!("unknown config key {key:?}")));
            }
            merged.insert(key.clone(), value.clone());
        }
        let plan: Self = serde_json::from_value(Value::Object(merged))
            .map_err(|e| Error::InvalidPlan(format!("bad config: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        let [lo, hi] = self.param_range;
        if self.n_systems == 0 {
            return Err(Error::InvalidPlan("n_systems must be >= 1".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidPlan(format!("param_range [{lo}, {hi}] is not an interval")));
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return Err(Error::InvalidPlan(format!("tolerance must be >= 0, got {}", self.tolerance)));
        }
        match self.kind {
            ExperimentKind::K => {
                if lo < 1.0 || lo.fract() != 0.0 || hi.fract() != 0.0 {
                    return Err(Error::InvalidPlan(format!("k range [{lo}, {hi}] must hold integers >= 1")));
                }
            }
            ExperimentKind::P | ExperimentKind::Classify => {
                if lo < 0.0 || hi > 1.0 {
                    return Err(Error::InvalidPlan(format!("p range [{lo}, {hi}] must lie in [0, 1]")));
                }
            }
        }
        if !(0.0..1.0).contains(&self.known_tv) {
            return Err(Error::InvalidPlan(format!("known_tv must be in [0, 1), got {}", self.known_tv)));
        }
        if self.kind == ExperimentKind::Classify {
            if self.trials == 0 {
                return Err(Error::InvalidPlan("trials must be >= 1".into()));
            }
            if self.k_values.contains(&0) {
                return Err(Error::InvalidPlan("k values must be >= 1".into()));
            }
        }
        Ok(())
    }

    fn prompt_specs<'a>(&self, specs: &'a [PromptSpec]) -> Result<[&'a PromptSpec; 2]> {
        Ok([find(specs, &self.prompts[0])?, find(specs, &self.prompts[1])?])
    }
}

/// Seeds and ground truth of one simulated system, drawn up front so results
/// do not depend on scheduling.
#[derive(Debug, Clone, Copy)]
struct SystemDraw {
    index: usize,
    strategy: DecodingStrategy,
    param: f64,
    model_seed: u64,
    sample_seed: u64,
    render_seed: u64,
}

fn draw_systems(plan: &ExperimentPlan) -> Result<Vec<SystemDraw>> {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let [lo, hi] = plan.param_range;
    (0..plan.n_systems)
        .map(|index| {
            let (strategy, param) = match plan.kind {
                ExperimentKind::K => {
                    let k = rng.random_range(lo as usize..=hi as usize);
                    (DecodingStrategy::top_k(k)?, k as f64)
                }
                _ => {
                    let p = if lo == hi { lo } else { rng.random_range(lo..=hi) };
                    (DecodingStrategy::top_p(p)?, p)
                }
            };
            Ok(SystemDraw {
                index,
                strategy,
                param,
                model_seed: rng.random(),
                sample_seed: rng.random(),
                render_seed: rng.random(),
            })
        })
        .collect()
}

fn rendered<'a>(pair: [&'a PromptSpec; 2], seed: u64) -> Result<[RenderedPrompt<'a>; 2]> {
    Ok([RenderedPrompt::new(pair[0], seed)?, RenderedPrompt::new(pair[1], seed.wrapping_add(1))?])
}

/// Runs the k estimator on `n_systems` top-k systems with `k` drawn uniformly.
pub fn run_k_eval(plan: &ExperimentPlan, specs: &[PromptSpec]) -> Result<EvalReport> {
    check_kind(plan, ExperimentKind::K)?;
    let pair = plan.prompt_specs(specs)?;
    let rows = draw_systems(plan)?
        .into_par_iter()
        .map(|d| {
            let tables = model_tables(&pair, d.model_seed)?;
            let mut sim = system_for(&pair, &tables, d.strategy, d.sample_seed)?;
            let [m1, m2] = rendered(pair, d.render_seed)?;
            let est = estimate_k(&m1, &m2, &mut sim, &plan.estimator)?;
            Ok(EvalRow::new(d.index, d.param, est.k_hat as f64, est.samples_used, est.converged))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new(plan.clone(), rows, None)
}

/// Runs the p estimator on `n_systems` top-p systems with `p` drawn uniformly.
///
/// The attacker's known distributions are the true tables, or copies moved
/// `known_tv` away from them. `converged` records whether every token in both
/// nuclei was observed.
pub fn run_p_eval(plan: &ExperimentPlan, specs: &[PromptSpec]) -> Result<EvalReport> {
    check_kind(plan, ExperimentKind::P)?;
    let pair = plan.prompt_specs(specs)?;
    let results = draw_systems(plan)?
        .into_par_iter()
        .map(|d| {
            let tables = model_tables(&pair, d.model_seed)?;
            let known = tables
                .iter()
                .enumerate()
                .map(|(i, t)| perturb(t, plan.known_tv, plan.perturbation, d.model_seed.wrapping_add(i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let mut sim = system_for(&pair, &tables, d.strategy, d.sample_seed)?;
            let nuclei = [
                sim.truncated_distribution(pair[0].template())?.len(),
                sim.truncated_distribution(pair[1].template())?.len(),
            ];
            let [m1, m2] = rendered(pair, d.render_seed)?;
            let est = estimate_p(&m1, &m2, &mut sim, &known[0], &known[1], &plan.estimator)?;
            let row =
                EvalRow::new(d.index, d.param, est.p_hat, 2 * est.samples_per_prompt, est.unique_counts == nuclei);
            Ok((row, min_detectable_p(&known[0], &known[1])))
        })
        .collect::<Result<Vec<_>>>()?;
    let floor = results.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    EvalReport::new(plan.clone(), results.into_iter().map(|r| r.0).collect(), Some(floor))
}

/// Runs the top-k / top-p classifier over a grid of settings.
pub fn run_discrimination_eval(plan: &ExperimentPlan, specs: &[PromptSpec]) -> Result<DiscriminationReport> {
    check_kind(plan, ExperimentKind::Classify)?;
    let pair = plan.prompt_specs(specs)?;
    let small_vocab = pair[1].vocab_size();
    let [lo, hi] = plan.param_range;
    let mut settings: Vec<DecodingStrategy> = (0..plan.n_systems)
        .map(|i| {
            let t = if plan.n_systems == 1 { 0.0 } else { i as f64 / (plan.n_systems - 1) as f64 };
            // Rounded so grid values print as typed.
            DecodingStrategy::top_p(((lo + t * (hi - lo)) * 1e12).round() / 1e12)
        })
        .collect::<Result<_>>()?;
    for &k in &plan.k_values {
        settings.push(DecodingStrategy::top_k(k)?);
    }
    if plan.include_extremes {
        settings.extend([
            DecodingStrategy::top_p(0.0)?,
            DecodingStrategy::top_p(1.0)?,
            DecodingStrategy::top_k(1)?,
            DecodingStrategy::top_k(small_vocab)?,
        ]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut draws = Vec::new();
    for strategy in settings {
        for _ in 0..plan.trials {
            let index = draws.len();
            draws.push(SystemDraw {
                index,
                strategy,
                param: 0.0,
                model_seed: rng.random(),
                sample_seed: rng.random(),
                render_seed: rng.random(),
            });
        }
    }
    let rows = draws
        .into_par_iter()
        .map(|d| {
            let tables = model_tables(&pair, d.model_seed)?;
            let mut sim = system_for(&pair, &tables, d.strategy, d.sample_seed)?;
            let [m1, m2] = rendered(pair, d.render_seed)?;
            let v = classify_strategy(&m1, &m2, &mut sim, &plan.estimator)?;
            Ok(DiscriminationRow::new(d.index, &d.strategy, small_vocab, &v))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DiscriminationReport::new(plan.clone(), rows))
}

fn check_kind(plan: &ExperimentPlan, kind: ExperimentKind) -> Result<()> {
    plan.validate()?;
    if plan.kind != kind {
        return Err(Error::InvalidPlan(format!("expected a {kind} plan, got {}", plan.kind)));
    }
    Ok(())
}

/// The verdict a correct classifier gives, or `None` when both hypotheses fit.
pub fn expected_verdict(strategy: &DecodingStrategy, small_vocab: usize) -> Option<Verdict> {
    use crate::distributions::Truncation;
    match strategy.truncation {
        Truncation::Argmax | Truncation::TopK { k: 1 } => Some(Verdict::Indeterminate),
        Truncation::TopP { p: 0.0 } => Some(Verdict::Indeterminate),
        Truncation::TopP { p } if p >= 1.0 => None,
        Truncation::TopP { .. } => Some(Verdict::TopP),
        Truncation::TopK { k } if k >= small_vocab => None,
        Truncation::TopK { .. } => Some(Verdict::TopK),
    }
}
