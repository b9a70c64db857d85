//! Per-transition scoring of chain transcripts and condition-level
//! aggregation with bootstrap CIs, plus CSV/Markdown rendering.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::attributes::extract_attributes;
use super::attributes::structural_consistency;
use super::bootstrap::{bootstrap_ci, BootstrapCi, DEFAULT_LEVEL, DEFAULT_RESAMPLES};
use super::nli::{NliBackend, NliVerdict};
use super::terms::lexical_overlap;
use crate::error::{Error, Result};
use crate::pipeline::ChainTranscript;

pub const TRANSITION_NAMES: [&str; 2] = ["perc_to_pred", "perc_pred_to_plan"];

/// Scores for one stage transition of one transcript. `None` fields are
/// absent (undefined or backend failure) and are excluded from aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionScore {
    pub transition: String,
    pub lexical: Option<f64>,
    pub structural: Option<f64>,
    pub nli: Option<NliVerdict>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneScores {
    pub scene_id: u64,
    pub mode: String,
    pub transitions: [TransitionScore; 2],
    /// Whitespace-token answer lengths per stage.
    pub answer_lengths: [usize; 3],
}

/// Premise/hypothesis direction is fixed earlier→later; for the planning
/// transition the premise concatenates both upstream answers with ". ".
pub fn score_transcript(t: &ChainTranscript, backend: &dyn NliBackend) -> Result<SceneScores> {
    if t.stages.len() != 3 {
        return Err(Error::Data(format!(
            "transcript for scene {} has {} stages, want 3",
            t.scene_id,
            t.stages.len()
        )));
    }
    let a1 = t.stages[0].answer.as_str();
    let a2 = t.stages[1].answer.as_str();
    let a3 = t.stages[2].answer.as_str();
    let upstream2 = format!("{a1}. {a2}");

    let pairs = [(a1.to_string(), a2.to_string()), (upstream2.clone(), a3.to_string())];
    let verdicts = backend.score_batch(&pairs)?;

    let transitions = [
        TransitionScore {
            transition: TRANSITION_NAMES[0].to_string(),
            lexical: lexical_overlap(a1, a2),
            structural: structural_consistency(
                &extract_attributes(a1),
                &extract_attributes(a2),
            ),
            nli: verdicts[0],
        },
        TransitionScore {
            transition: TRANSITION_NAMES[1].to_string(),
            lexical: lexical_overlap(&upstream2, a3),
            structural: structural_consistency(
                &extract_attributes(&upstream2),
                &extract_attributes(a3),
            ),
            nli: verdicts[1],
        },
    ];
    let answer_lengths = [
        a1.split_whitespace().count(),
        a2.split_whitespace().count(),
        a3.split_whitespace().count(),
    ];
    Ok(SceneScores {
        scene_id: t.scene_id,
        mode: t.mode.clone(),
        transitions,
        answer_lengths,
    })
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionAggregate {
    pub transition: String,
    pub lexical: Option<f64>,
    pub structural: Option<f64>,
    pub nli_contra: Option<f64>,
    pub nli_entail: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub mode: String,
    pub n_transcripts: usize,
    pub per_transition: [TransitionAggregate; 2],
    /// Averaged-over-transitions columns: arithmetic mean of the two
    /// per-transition means (when both are present).
    pub lexical: Option<f64>,
    pub structural: Option<f64>,
    pub nli_contra: Option<f64>,
    pub nli_entail: Option<f64>,
    pub answer_len_mean: [f64; 3],
    /// Bootstrap CI over per-scene contradiction probabilities (each scene's
    /// value averages its present transitions).
    pub nli_contra_ci: Option<BootstrapCi>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub conditions: Vec<ConditionSummary>,
    pub bootstrap_seed: u64,
}

fn avg2(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some((x + y) / 2.0),
        (Some(x), None) | (None, Some(x)) => Some(x),
        (None, None) => None,
    }
}

pub fn summarize_condition(
    mode: &str,
    scores: &[SceneScores],
    bootstrap_seed: u64,
) -> Result<ConditionSummary> {
    if scores.is_empty() {
        return Err(Error::Data(format!("no scores for condition '{mode}'")));
    }
    let agg = |k: usize| TransitionAggregate {
        transition: TRANSITION_NAMES[k].to_string(),
        lexical: mean_present(scores.iter().map(|s| s.transitions[k].lexical)),
        structural: mean_present(scores.iter().map(|s| s.transitions[k].structural)),
        nli_contra: mean_present(scores.iter().map(|s| s.transitions[k].nli.map(|v| v.contra))),
        nli_entail: mean_present(scores.iter().map(|s| s.transitions[k].nli.map(|v| v.entail))),
    };
    let (t1, t2) = (agg(0), agg(1));

    let mut len_sums = [0.0f64; 3];
    for s in scores {
        for k in 0..3 {
            len_sums[k] += s.answer_lengths[k] as f64;
        }
    }
    let n = scores.len() as f64;
    let answer_len_mean = [len_sums[0] / n, len_sums[1] / n, len_sums[2] / n];

    let per_scene_contra: Vec<f64> = scores
        .iter()
        .filter_map(|s| {
            mean_present(
                s.transitions
                    .iter()
                    .map(|t| t.nli.map(|v| v.contra)),
            )
        })
        .collect();
    let nli_contra_ci = if per_scene_contra.is_empty() {
        None
    } else {
        Some(bootstrap_ci(
            &per_scene_contra,
            DEFAULT_RESAMPLES,
            DEFAULT_LEVEL,
            bootstrap_seed,
        )?)
    };

    Ok(ConditionSummary {
        mode: mode.to_string(),
        n_transcripts: scores.len(),
        lexical: avg2(t1.lexical, t2.lexical),
        structural: avg2(t1.structural, t2.structural),
        nli_contra: avg2(t1.nli_contra, t2.nli_contra),
        nli_entail: avg2(t1.nli_entail, t2.nli_entail),
        per_transition: [t1, t2],
        answer_len_mean,
        nli_contra_ci,
    })
}

/// Score every transcript, group by mode, and aggregate.
pub fn aggregate_report(
    transcripts: &[ChainTranscript],
    backend: &dyn NliBackend,
    bootstrap_seed: u64,
) -> Result<ConsistencyReport> {
    if transcripts.is_empty() {
        return Err(Error::Data("aggregate_report: no transcripts".into()));
    }
    let mut by_mode: BTreeMap<String, Vec<SceneScores>> = BTreeMap::new();
    for t in transcripts {
        let s = score_transcript(t, backend)?;
        by_mode.entry(s.mode.clone()).or_default().push(s);
    }
    let mut conditions = Vec::with_capacity(by_mode.len());
    for (mode, scores) in &by_mode {
        conditions.push(summarize_condition(mode, scores, bootstrap_seed)?);
    }
    Ok(ConsistencyReport {
        conditions,
        bootstrap_seed,
    })
}

/// Relative reduction, e.g. reduce(0.461, 0.264) ≈ 0.427.
pub fn relative_reduction(from: f64, to: f64) -> f64 {
    if from == 0.0 {
        0.0
    } else {
        (from - to) / from
    }
}

fn cell(v: Option<f64>) -> String {
    // absent stays absent — an empty cell, never a zero
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// Main results CSV: one row per condition, averaged columns first, then the
/// per-transition breakdown and the contradiction CI.
pub fn report_csv(report: &ConsistencyReport) -> String {
    let mut out = String::from(
        "mode,n,lex_overlap,struct_consist,nli_contra,nli_entail,\
         lex_t1,lex_t2,struct_t1,struct_t2,contra_t1,contra_t2,entail_t1,entail_t2,\
         contra_ci_lo,contra_ci_hi\n",
    );
    for c in &report.conditions {
        let (t1, t2) = (&c.per_transition[0], &c.per_transition[1]);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            c.mode,
            c.n_transcripts,
            cell(c.lexical),
            cell(c.structural),
            cell(c.nli_contra),
            cell(c.nli_entail),
            cell(t1.lexical),
            cell(t2.lexical),
            cell(t1.structural),
            cell(t2.structural),
            cell(t1.nli_contra),
            cell(t2.nli_contra),
            cell(t1.nli_entail),
            cell(t2.nli_entail),
            cell(c.nli_contra_ci.as_ref().map(|ci| ci.lo)),
            cell(c.nli_contra_ci.as_ref().map(|ci| ci.hi)),
        ));
    }
    out
}

/// Answer-length diagnostic CSV: stage × condition mean tokens.
pub fn lengths_csv(report: &ConsistencyReport) -> String {
    let mut out = String::from("stage");
    for c in &report.conditions {
        out.push_str(&format!(",{}", c.mode));
    }
    out.push('\n');
    for (k, stage) in ["perception", "prediction", "planning"].iter().enumerate() {
        out.push_str(stage);
        for c in &report.conditions {
            out.push_str(&format!(",{:.2}", c.answer_len_mean[k]));
        }
        out.push('\n');
    }
    out
}

fn md_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "—".into())
}

/// Human-readable Markdown with the averaged columns, CI brackets, and
/// pairwise significance flags (non-overlapping 95% CIs).
pub fn report_markdown(report: &ConsistencyReport) -> String {
    let mut out = String::new();
    out.push_str("| Condition | n | Lex.Overlap | Struct.Consist. | NLI-contra | NLI-entail | contra 95% CI |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for c in &report.conditions {
        let ci = c
            .nli_contra_ci
            .as_ref()
            .map(|ci| format!("[{:.3}, {:.3}]", ci.lo, ci.hi))
            .unwrap_or_else(|| "—".into());
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            c.mode,
            c.n_transcripts,
            md_cell(c.lexical),
            md_cell(c.structural),
            md_cell(c.nli_contra),
            md_cell(c.nli_entail),
            ci
        ));
    }
    out.push_str("\nMean answer length (tokens):\n\n");
    out.push_str("| Stage |");
    for c in &report.conditions {
        out.push_str(&format!(" {} |", c.mode));
    }
    out.push_str("\n|---|");
    for _ in &report.conditions {
        out.push_str("---|");
    }
    out.push('\n');
    for (k, stage) in ["perception", "prediction", "planning"].iter().enumerate() {
        out.push_str(&format!("| {stage} |"));
        for c in &report.conditions {
            out.push_str(&format!(" {:.1} |", c.answer_len_mean[k]));
        }
        out.push('\n');
    }

    let flagged: Vec<String> = pairwise_significance(report)
        .into_iter()
        .filter(|(_, _, sig)| *sig)
        .map(|(a, b, _)| format!("{a} vs {b}"))
        .collect();
    out.push_str("\nSignificant contra differences (non-overlapping 95% CIs): ");
    if flagged.is_empty() {
        out.push_str("none\n");
    } else {
        out.push_str(&flagged.join("; "));
        out.push('\n');
    }
    out
}

/// All condition pairs with the CI-overlap significance verdict.
pub fn pairwise_significance(report: &ConsistencyReport) -> Vec<(String, String, bool)> {
    let mut out = Vec::new();
    for i in 0..report.conditions.len() {
        for j in i + 1..report.conditions.len() {
            let (a, b) = (&report.conditions[i], &report.conditions[j]);
            let sig = match (&a.nli_contra_ci, &b.nli_contra_ci) {
                (Some(ca), Some(cb)) => ca.non_overlapping(cb),
                _ => false,
            };
            out.push((a.mode.clone(), b.mode.clone(), sig));
        }
    }
    out
}

pub fn write_report_files(report: &ConsistencyReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("report.csv"), report_csv(report))?;
    std::fs::write(out_dir.join("lengths.csv"), lengths_csv(report))?;
    std::fs::write(out_dir.join("report.md"), report_markdown(report))?;
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    Ok(())
}
