//! Evaluation harness: synthetic systems, experiment plans, reports and the
//! end-to-end attack.

mod attack;
mod eval;
mod report;
pub mod tables;

pub use attack::{attack, AttackConfig, AttackReport, PromptEstimate, PromptMatch};
pub use eval::{expected_verdict, run_discrimination_eval, run_k_eval, run_p_eval, ExperimentKind, ExperimentPlan};
pub use report::{
    Aggregates, DiscriminationReport, DiscriminationRow, DiscriminationSummary, EvalReport, EvalRow, EvalSummary,
    ParamBucket, SettingSummary,
};
