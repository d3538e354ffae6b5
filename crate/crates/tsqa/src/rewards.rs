//! Response parsing and the composite reward: partial credit for well-formed
//! think/answer tags, staged credit for labeled answers, and Rouge-L credit
//! for free-text answers, with everything mapped into a common [0, 2] range
//! so no task type dominates training.

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("unknown task type {0:?} (expected \"labeled\" or \"generation\")")]
    UnknownTaskType(String),
}

static THINK_PAIR: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?s)<think>(.*?)</think>").unwrap());
static ANSWER_PAIR: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?s)<answer>(.*?)</answer>").unwrap());
static BOXED: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?s)\\boxed\{([^{}]*)\}").unwrap());

/// Where the answer payload came from, in preference order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseStatus {
    BoxedInAnswer,
    BoxedAnywhere,
    AnswerText,
    NoPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub raw: String,
    pub think_pairs: usize,
    pub answer_pairs: usize,
    pub payload: Option<String>,
    pub status: ParseStatus,
}

/// Scans for well-formed tag pairs and extracts the answer payload:
/// a boxed token inside the first answer pair, else a boxed token anywhere,
/// else the first answer pair's trimmed text. Never fails; malformed input
/// yields `NoPayload`.
pub fn parse_response(text: &str) -> ParsedResponse {
    let think_pairs = THINK_PAIR.find_iter(text).count();
    let answer_pairs = ANSWER_PAIR.find_iter(text).count();
    let first_answer = ANSWER_PAIR.captures(text).map(|c| c.get(1).unwrap().as_str());

    let mut status = ParseStatus::NoPayload;
    let mut payload = None;
    if let Some(region) = first_answer {
        if let Some(c) = BOXED.captures(region) {
            let inner = c.get(1).unwrap().as_str().trim();
            if !inner.is_empty() {
                status = ParseStatus::BoxedInAnswer;
                payload = Some(inner.to_string());
            }
        }
    }
    if payload.is_none() {
        if let Some(c) = BOXED.captures(text) {
            let inner = c.get(1).unwrap().as_str().trim();
            if !inner.is_empty() {
                status = ParseStatus::BoxedAnywhere;
                payload = Some(inner.to_string());
            }
        }
    }
    if payload.is_none() {
        if let Some(region) = first_answer {
            let trimmed = region.trim();
            if !trimmed.is_empty() {
                status = ParseStatus::AnswerText;
                payload = Some(trimmed.to_string());
            }
        }
    }
    ParsedResponse { raw: text.to_string(), think_pairs, answer_pairs, payload, status }
}

pub const FORMAT_PER_KIND: f64 = 0.375;
pub const DUPLICATE_PENALTY: f64 = 0.25;
pub const FORMAT_MAX: f64 = 0.75;

/// 0.375 per tag kind present at least once, minus 0.25 per duplicate pair
/// beyond the first of each kind, clamped to [0, 0.75].
pub fn format_reward(p: &ParsedResponse) -> f64 {
    let mut r = 0.0;
    for pairs in [p.think_pairs, p.answer_pairs] {
        if pairs >= 1 {
            r += FORMAT_PER_KIND - DUPLICATE_PENALTY * (pairs - 1) as f64;
        }
    }
    r.clamp(0.0, FORMAT_MAX)
}

/// Gated stage weights for labeled tasks; they sum to the 2.0 task ceiling.
pub const STAGE_LAMBDAS: [f64; 3] = [0.2, 0.3, 1.5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageContribution {
    pub stage: usize,
    pub lambda: f64,
    pub passed: bool,
    pub awarded: f64,
}

fn label_eq(a: &str, b: &str) -> bool {
    a.trim().eq_ignore_ascii_case(b.trim())
}

/// Three gated checks — payload extractable, payload among the candidates,
/// payload equal to gold — each awarding its weight only if every earlier
/// stage passed. Labels compare case-insensitively after trimming.
pub fn labeled_reward(
    p: &ParsedResponse,
    candidates: &[String],
    gold: &str,
) -> Result<(f64, Vec<StageContribution>), RewardError> {
    if candidates.is_empty() {
        return Err(RewardError::EmptyCandidates);
    }
    debug_assert!(candidates.iter().any(|c| label_eq(c, gold)), "gold must be a candidate");
    let checks = [
        p.payload.is_some(),
        p.payload.as_deref().is_some_and(|pl| candidates.iter().any(|c| label_eq(c, pl))),
        p.payload.as_deref().is_some_and(|pl| label_eq(pl, gold)),
    ];
    let mut stages = Vec::with_capacity(3);
    let mut total = 0.0;
    let mut alive = true;
    for (i, (&lambda, &check)) in STAGE_LAMBDAS.iter().zip(&checks).enumerate() {
        let passed = alive && check;
        let awarded = if passed { lambda } else { 0.0 };
        total += awarded;
        stages.push(StageContribution { stage: i + 1, lambda, passed, awarded });
        alive = passed;
    }
    Ok((total, stages))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Longest-common-subsequence Rouge-L over token sequences. Either side
/// empty scores zero across the board.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeScore {
    let (m, n) = (candidate.len(), reference.len());
    if m == 0 || n == 0 {
        return RougeScore { precision: 0.0, recall: 0.0, f1: 0.0 };
    }
    // dp[j] carries row i-1; diag tracks dp[i-1][j-1].
    let mut dp = vec![0usize; n + 1];
    for item in candidate {
        let mut diag = 0;
        for (j, r) in reference.iter().enumerate() {
            let up = dp[j + 1];
            dp[j + 1] = if item == r { diag + 1 } else { up.max(dp[j]) };
            diag = up;
        }
    }
    let lcs = dp[n] as f64;
    let precision = lcs / m as f64;
    let recall = lcs / n as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    RougeScore { precision, recall, f1 }
}

/// Word tokens for Rouge-L: lowercase, whitespace-split, surrounding
/// punctuation stripped, empties dropped.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Rouge-L F1 of the extracted payload against the gold text, scaled into
/// [0, 2] when `balanced`; the raw F1 reproduces the unbalanced ablation.
pub fn generation_reward(p: &ParsedResponse, gold: &str, balanced: bool) -> f64 {
    let Some(payload) = p.payload.as_deref() else {
        return 0.0;
    };
    let f1 = rouge_l(&rouge_tokens(payload), &rouge_tokens(gold)).f1;
    if balanced {
        2.0 * f1
    } else {
        f1
    }
}

/// What kind of answer a sample expects and what counts as correct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskSpec {
    Labeled { candidates: Vec<String>, gold: String },
    Generation { gold: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub task: f64,
    pub stages: Vec<StageContribution>,
    pub total: f64,
}

/// Format reward plus the task reward chosen by task type.
pub fn composite_reward(
    p: &ParsedResponse,
    task: &TaskSpec,
    balanced: bool,
) -> Result<RewardBreakdown, RewardError> {
    let format = format_reward(p);
    let (task_value, stages) = match task {
        TaskSpec::Labeled { candidates, gold } => labeled_reward(p, candidates, gold)?,
        TaskSpec::Generation { gold } => (generation_reward(p, gold, balanced), Vec::new()),
    };
    Ok(RewardBreakdown { format, task: task_value, stages, total: format + task_value })
}

/// One line of `score` subcommand input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub response: String,
    pub task_type: String,
    pub gold: String,
    #[serde(default)]
    pub candidates: Vec<String>,
}

/// One line of `score` subcommand output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub format: f64,
    pub task: f64,
    pub total: f64,
    pub payload: Option<String>,
    pub status: ParseStatus,
}

pub fn score_request(req: &ScoreRequest, balanced: bool) -> Result<ScoreRecord, RewardError> {
    let task = match req.task_type.as_str() {
        "labeled" => {
            TaskSpec::Labeled { candidates: req.candidates.clone(), gold: req.gold.clone() }
        }
        "generation" => TaskSpec::Generation { gold: req.gold.clone() },
        other => return Err(RewardError::UnknownTaskType(other.to_string())),
    };
    let parsed = parse_response(&req.response);
    let b = composite_reward(&parsed, &task, balanced)?;
    Ok(ScoreRecord {
        format: b.format,
        task: b.task,
        total: b.total,
        payload: parsed.payload,
        status: parsed.status,
    })
}
