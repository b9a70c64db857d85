//! Cross-stage consistency evaluation: term overlap, structural rules,
//! NLI verdicts, language-quality metrics, and bootstrap statistics.

pub mod attributes;
pub mod bootstrap;
pub mod metrics;
pub mod nli;
pub mod report;
pub mod terms;

pub use attributes::{extract_attributes, structural_consistency, AttributeFacts};
pub use bootstrap::{bootstrap_ci, BootstrapCi};
pub use metrics::{bleu1, cider, rouge_l, MetricScore};
pub use nli::{backend_from_spec, HeuristicNli, NliBackend, NliVerdict, RemoteNli};
pub use report::{aggregate_report, relative_reduction, ConsistencyReport};
pub use terms::{extract_terms, lexical_overlap};
