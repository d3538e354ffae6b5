//! Synthetic question-answering corpus over seeded series, flat key=value
//! experiment configs, greedy evaluation (accuracy + Rouge-L), and the
//! end-to-end experiment driver tying generation, fine-tuning, reinforcement,
//! and evaluation together under one run directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::AlignmentMode;
use crate::backbone::{BackboneConfig, DecodeMode, Vocab, EOS, UNK};
use crate::grpo::{train_rl, CurvePoint, RlConfig, RlPrompt};
use crate::model::{sft_model_step, ModelParams, TrainSample};
use crate::rewards::{parse_response, rouge_l, rouge_tokens, TaskSpec};
use crate::ts_pipeline::{PipelineConfig, TimeSeriesSet};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config line {line}: {detail}")]
    Config { line: usize, detail: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("data: {0}")]
    Data(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: anyhow::Error,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("encoding: {0}")]
    Encoding(#[from] serde_json::Error),
}

// ── Corpus ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Comprehension,
    Recognition,
    Reasoning,
    Prescience,
}

pub const CATEGORIES: [Category; 4] =
    [Category::Comprehension, Category::Recognition, Category::Reasoning, Category::Prescience];

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Category::Comprehension => "comprehension",
            Category::Recognition => "recognition",
            Category::Reasoning => "reasoning",
            Category::Prescience => "prescience",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    MultipleChoice,
    TrueFalse,
    OpenEnded,
}

impl std::fmt::Display for AnswerType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AnswerType::MultipleChoice => "multiple_choice",
            AnswerType::TrueFalse => "true_false",
            AnswerType::OpenEnded => "open_ended",
        };
        f.write_str(s)
    }
}

/// Which question template produced a sample; drives independent gold
/// recomputation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    PeakWhere,
    LowWhere,
    LastAboveFirst,
    LastBelowFirst,
    PeakOpen,
    LowOpen,
    CyclePresent,
    SameDirection,
    ShapeMcq,
    WaveOpen,
    BehaviorMcq,
    RisingAndCyclic,
    SamePattern,
    BehaviorOpen,
    NextMove,
    NextExceeds,
    NextOpen,
}

/// Generative law of one series: `intercept + slope*t +
/// amplitude*sin(2*pi*t/period) + uniform(-noise, noise)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesParams {
    pub slope: f64,
    pub intercept: f64,
    pub amplitude: f64,
    pub period: f64,
    pub noise: f64,
    pub len: usize,
}

impl SeriesParams {
    pub fn value_at(&self, t: usize) -> f64 {
        self.intercept
            + self.slope * t as f64
            + self.amplitude * (2.0 * std::f64::consts::PI * t as f64 / self.period).sin()
    }

    pub fn render<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.len)
            .map(|t| {
                let clean = self.value_at(t);
                if self.noise > 0.0 {
                    clean + rng.gen_range(-self.noise..=self.noise)
                } else {
                    clean
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub id: usize,
    pub category: Category,
    pub answer_type: AnswerType,
    pub template: Template,
    pub question: String,
    pub series: Vec<Vec<f64>>,
    pub params: Vec<SeriesParams>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<String>,
    pub gold: String,
}

/// Sizes and knobs for corpus generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub mcq_per_category: usize,
    pub tf_per_category: usize,
    pub open_per_category: usize,
    pub noise: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub train_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            mcq_per_category: 40,
            tf_per_category: 40,
            open_per_category: 20,
            noise: 0.0,
            min_len: 24,
            max_len: 64,
            train_fraction: 0.9,
        }
    }
}

// ── Fixed word list ─────────────────────────────────────────────────────

const WORDS: &[&str] = &[
    "which", "option", "is", "the", "value", "of", "series", "a", "b", "c", "d", "?", ":",
    "in", "part", "early", "middle", "late", "no", "single", "highest", "lowest", "last",
    "first", "above", "below", "describe", "peak", "point", "near", "does", "contain",
    "repeating", "cycle", "do", "and", "move", "same", "direction", "pattern", "best",
    "matches", "rising", "line", "falling", "wave", "around", "level", "flat", "repeats",
    "about", "every", "points", "description", "overall", "behavior", "it", "rises", "with",
    "falls", "without", "both", "cyclic", "share", "stays", "next", "will", "exceed", "what",
    "happens", "just", "after", "ends", "moves", "up", "down", "from", "how", "continue",
    "right", "end", "small", "big", "rise", "drop", "check", "values", "step", "true", "false",
];

pub const INT_MIN: i64 = -20;
pub const INT_MAX: i64 = 20;

/// Every word the corpus can emit: templates, labels, and the rendered
/// integer literals.
pub fn lexicon() -> Vec<String> {
    let mut out: Vec<String> = WORDS.iter().map(|w| w.to_string()).collect();
    for v in INT_MIN..=INT_MAX {
        out.push(v.to_string());
    }
    out
}

pub fn harness_vocab() -> Vocab {
    Vocab::with_words(lexicon())
}

// ── Series statistics (used for both gold construction and recomputation) ─

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Rising,
    Falling,
    Flat,
}

/// Least-squares line fit over `(t, s[t])`.
pub fn fit_line(s: &[f64]) -> (f64, f64) {
    let n = s.len() as f64;
    let t_mean = (s.len() as f64 - 1.0) / 2.0;
    let s_mean = s.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, &v) in s.iter().enumerate() {
        let dt = t as f64 - t_mean;
        num += dt * (v - s_mean);
        den += dt * dt;
    }
    let slope = if den == 0.0 { 0.0 } else { num / den };
    (s_mean - slope * t_mean, slope)
}

/// Half the range of the residual after removing the fitted line.
pub fn residual_halfrange(s: &[f64]) -> f64 {
    let (a, b) = fit_line(s);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (t, &v) in s.iter().enumerate() {
        let r = v - (a + b * t as f64);
        lo = lo.min(r);
        hi = hi.max(r);
    }
    (hi - lo) / 2.0
}

const SLOPE_GATE: f64 = 0.04;
const WAVE_GATE: f64 = 0.4;

pub fn classify_direction(s: &[f64]) -> Direction {
    let (_, slope) = fit_line(s);
    if slope >= SLOPE_GATE {
        Direction::Rising
    } else if slope <= -SLOPE_GATE {
        Direction::Falling
    } else {
        Direction::Flat
    }
}

pub fn has_wave(s: &[f64]) -> bool {
    residual_halfrange(s) >= WAVE_GATE
}

fn series_max(s: &[f64]) -> f64 {
    s.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

fn series_min(s: &[f64]) -> f64 {
    s.iter().cloned().fold(f64::INFINITY, f64::min)
}

// ── Generation ──────────────────────────────────────────────────────────

struct Gen<'a> {
    rng: ChaCha8Rng,
    spec: &'a CorpusSpec,
    next_id: usize,
}

const PERIODS: [f64; 4] = [6.0, 8.0, 12.0, 16.0];

impl Gen<'_> {
    fn params(&mut self, dir: Direction, wave: bool, noise: f64) -> SeriesParams {
        let slope = match dir {
            Direction::Rising => self.rng.gen_range(0.08..=0.12),
            Direction::Falling => -self.rng.gen_range(0.08..=0.12),
            Direction::Flat => 0.0,
        };
        SeriesParams {
            slope,
            intercept: self.rng.gen_range(-3.0..=3.0),
            amplitude: if wave { self.rng.gen_range(0.8..=2.5) } else { 0.0 },
            period: PERIODS[self.rng.gen_range(0..PERIODS.len())],
            noise,
            len: self.rng.gen_range(self.spec.min_len..=self.spec.max_len),
        }
    }

    /// Renders a series whose fitted classification agrees with the intended
    /// one, so gold answers recompute cleanly from the rendered points.
    fn checked_series(
        &mut self,
        dir: Direction,
        wave: bool,
        noise: f64,
    ) -> Result<(SeriesParams, Vec<f64>), HarnessError> {
        for _ in 0..200 {
            let p = self.params(dir, wave, noise);
            let s = p.render(&mut self.rng);
            if classify_direction(&s) == dir && has_wave(&s) == wave {
                return Ok((p, s));
            }
        }
        Err(HarnessError::Data(format!(
            "could not render a series classifying as ({dir:?}, wave={wave})"
        )))
    }

    fn any_direction(&mut self) -> Direction {
        [Direction::Rising, Direction::Falling, Direction::Flat][self.rng.gen_range(0..3)]
    }

    fn trending_direction(&mut self) -> Direction {
        if self.rng.gen_bool(0.5) {
            Direction::Rising
        } else {
            Direction::Falling
        }
    }

    fn take_id(&mut self) -> usize {
        let id = self.next_id;
        self.next_id += 1;
        id
    }
}

fn letter(i: usize) -> &'static str {
    ["a", "b", "c", "d"][i]
}

const MCQ_LABELS: [&str; 4] = ["a", "b", "c", "d"];
const TF_LABELS: [&str; 2] = ["true", "false"];

fn labels(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Generation-side margins; gold stays recomputable from the points alone
/// because each winner must beat the runner-up by a clear gap.
const THIRD_MARGIN: f64 = 0.4;
const ENDPOINT_MARGIN: f64 = 0.5;
const NEXT_MARGIN: f64 = 0.3;
/// Next-step magnitude bands: [small, |delta| gap, big]; the recomputation
/// threshold sits inside the gap.
const NEXT_SMALL: (f64, f64) = (0.15, 0.45);
const NEXT_BIG: (f64, f64) = (0.75, 2.5);
const NEXT_SPLIT: f64 = 0.6;

/// Which third of the series (0 early, 1 middle, 2 late) holds the extreme.
fn extreme_third(s: &[f64], use_max: bool) -> usize {
    let pick = |i: usize| if use_max { s[i] } else { -s[i] };
    let mut best = 0;
    for i in 1..s.len() {
        if pick(i) > pick(best) {
            best = i;
        }
    }
    (best * 3 / s.len()).min(2)
}

/// Gap between the winning third's extreme and the runner-up third's.
fn third_margin(s: &[f64], use_max: bool) -> f64 {
    let mut best = [f64::NEG_INFINITY; 3];
    for (i, &v) in s.iter().enumerate() {
        let t = (i * 3 / s.len()).min(2);
        let x = if use_max { v } else { -v };
        if x > best[t] {
            best[t] = x;
        }
    }
    best.sort_by(|x, y| y.partial_cmp(x).unwrap());
    best[0] - best[1]
}

/// MCQ slot for a next-step move: sign picks rise/drop, magnitude picks
/// small/big around the band gap.
fn next_move_slot(delta: f64) -> usize {
    match (delta > 0.0, delta.abs() > NEXT_SPLIT) {
        (true, false) => 0,
        (true, true) => 1,
        (false, false) => 2,
        (false, true) => 3,
    }
}

fn direction_words(d: Direction) -> &'static str {
    match d {
        Direction::Rising => "rises",
        Direction::Falling => "falls",
        Direction::Flat => "stays level",
    }
}

fn behavior_text(d: Direction, wave: bool) -> String {
    let w = if wave { "with" } else { "without" };
    format!("it {} {} a repeating wave", direction_words(d), w)
}

fn sample_comprehension(g: &mut Gen, answer: AnswerType) -> Result<SyntheticSample, HarnessError> {
    let use_max = g.rng.gen_bool(0.5);
    let id = g.take_id();
    let sample = match answer {
        AnswerType::MultipleChoice => {
            // Which third holds the extreme; decisively separated thirds only.
            let (p, s) = {
                let mut found = None;
                for _ in 0..200 {
                    let dir = g.trending_direction();
                    let wave = g.rng.gen_bool(0.5);
                    let (p, s) = g.checked_series(dir, wave, g.spec.noise)?;
                    if third_margin(&s, use_max) >= THIRD_MARGIN {
                        found = Some((p, s));
                        break;
                    }
                }
                found.ok_or_else(|| HarnessError::Data("no decisive extreme-third sample".into()))?
            };
            let name = if use_max { "highest" } else { "lowest" };
            let slot = extreme_third(&s, use_max);
            SyntheticSample {
                id,
                category: Category::Comprehension,
                answer_type: answer,
                template: if use_max { Template::PeakWhere } else { Template::LowWhere },
                question: format!(
                    "in which part of the series <ts><ts/> is the {name} value ? option a : the early part option b : the middle part option c : the late part option d : no single part"
                ),
                series: vec![s],
                params: vec![p],
                candidates: labels(&MCQ_LABELS),
                gold: letter(slot).to_string(),
            }
        }
        AnswerType::TrueFalse => {
            // Endpoint comparison with a decisive gap between first and last.
            let above = g.rng.gen_bool(0.5);
            let (p, s) = {
                let mut found = None;
                for _ in 0..200 {
                    let dir = g.trending_direction();
                    let wave = g.rng.gen_bool(0.5);
                    let (p, s) = g.checked_series(dir, wave, g.spec.noise)?;
                    if (s[s.len() - 1] - s[0]).abs() >= ENDPOINT_MARGIN {
                        found = Some((p, s));
                        break;
                    }
                }
                found.ok_or_else(|| HarnessError::Data("no decisive endpoint sample".into()))?
            };
            let up = s[s.len() - 1] > s[0];
            let (word, gold) = if above { ("above", up) } else { ("below", !up) };
            SyntheticSample {
                id,
                category: Category::Comprehension,
                answer_type: answer,
                template: if above { Template::LastAboveFirst } else { Template::LastBelowFirst },
                question: format!(
                    "is the last value of the series <ts><ts/> {word} the first value ?"
                ),
                series: vec![s],
                params: vec![p],
                candidates: labels(&TF_LABELS),
                gold: gold.to_string(),
            }
        }
        AnswerType::OpenEnded => {
            let dir = g.any_direction();
            let wave = g.rng.gen_bool(0.5);
            let (p, s) = g.checked_series(dir, wave, g.spec.noise)?;
            let extreme = if use_max { series_max(&s) } else { series_min(&s) };
            let rounded = extreme.round() as i64;
            let (question, gold, template) = if use_max {
                (
                    "describe the peak of the series <ts><ts/>".to_string(),
                    format!("the peak value is near {rounded}"),
                    Template::PeakOpen,
                )
            } else {
                (
                    "describe the lowest point of the series <ts><ts/>".to_string(),
                    format!("the lowest value is near {rounded}"),
                    Template::LowOpen,
                )
            };
            SyntheticSample {
                id,
                category: Category::Comprehension,
                answer_type: answer,
                template,
                question,
                series: vec![s],
                params: vec![p],
                candidates: Vec::new(),
                gold,
            }
        }
    };
    Ok(sample)
}

fn sample_recognition(g: &mut Gen, answer: AnswerType) -> Result<SyntheticSample, HarnessError> {
    let id = g.take_id();
    let sample = match answer {
        AnswerType::TrueFalse => {
            if g.rng.gen_bool(0.5) {
                let wave = g.rng.gen_bool(0.5);
                let dir = g.any_direction();
                let (p, s) = g.checked_series(dir, wave, g.spec.noise)?;
                SyntheticSample {
                    id,
                    category: Category::Recognition,
                    answer_type: answer,
                    template: Template::CyclePresent,
                    question: "does the series <ts><ts/> contain a repeating cycle ?".to_string(),
                    series: vec![s],
                    params: vec![p],
                    candidates: labels(&TF_LABELS),
                    gold: wave.to_string(),
                }
            } else {
                // Two trending series; true iff they trend the same way.
                let d1 = g.trending_direction();
                let d2 = g.trending_direction();
                let w1 = g.rng.gen_bool(0.5);
                let w2 = g.rng.gen_bool(0.5);
                let (p1, s1) = g.checked_series(d1, w1, g.spec.noise)?;
                let (p2, s2) = g.checked_series(d2, w2, g.spec.noise)?;
                SyntheticSample {
                    id,
                    category: Category::Recognition,
                    answer_type: answer,
                    template: Template::SameDirection,
                    question:
                        "do the series <ts><ts/> and the series <ts><ts/> move in the same direction ?"
                            .to_string(),
                    series: vec![s1, s2],
                    params: vec![p1, p2],
                    candidates: labels(&TF_LABELS),
                    gold: (d1 == d2).to_string(),
                }
            }
        }
        AnswerType::MultipleChoice => {
            // Four mutually exclusive shapes; fixed option order.
            let shape = g.rng.gen_range(0..4);
            let (dir, wave) = match shape {
                0 => (Direction::Rising, false),
                1 => (Direction::Falling, false),
                2 => (Direction::Flat, true),
                _ => (Direction::Flat, false),
            };
            let (p, s) = g.checked_series(dir, wave, g.spec.noise)?;
            SyntheticSample {
                id,
                category: Category::Recognition,
                answer_type: answer,
                template: Template::ShapeMcq,
                question: "which pattern best matches the series <ts><ts/> ? option a : rising line option b : falling line option c : wave around a level line option d : flat line".to_string(),
                series: vec![s],
                params: vec![p],
                candidates: labels(&MCQ_LABELS),
                gold: letter(shape).to_string(),
            }
        }
        AnswerType::OpenEnded => {
            let dir = g.any_direction();
            let (p, s) = g.checked_series(dir, true, g.spec.noise)?;
            SyntheticSample {
                id,
                category: Category::Recognition,
                answer_type: answer,
                template: Template::WaveOpen,
                question: "describe the repeating pattern of the series <ts><ts/>".to_string(),
                gold: format!("the series repeats a wave about every {} points", p.period as i64),
                series: vec![s],
                params: vec![p],
                candidates: Vec::new(),
            }
        }
    };
    Ok(sample)
}

fn sample_reasoning(g: &mut Gen, answer: AnswerType) -> Result<SyntheticSample, HarnessError> {
    let id = g.take_id();
    let sample = match answer {
        AnswerType::MultipleChoice => {
            let dir = g.trending_direction();
            let wave = g.rng.gen_bool(0.5);
            let (p, s) = g.checked_series(dir, wave, g.spec.noise)?;
            let slot = match (dir, wave) {
                (Direction::Rising, true) => 0,
                (Direction::Falling, true) => 1,
                (Direction::Rising, false) => 2,
                _ => 3,
            };
            SyntheticSample {
                id,
                category: Category::Reasoning,
                answer_type: answer,
                template: Template::BehaviorMcq,
                question: "which description matches the overall behavior of the series <ts><ts/> ? option a : it rises with a repeating wave option b : it falls with a repeating wave option c : it rises without a wave option d : it falls without a wave".to_string(),
                series: vec![s],
                params: vec![p],
                candidates: labels(&MCQ_LABELS),
                gold: letter(slot).to_string(),
            }
        }
        AnswerType::TrueFalse => {
            if g.rng.gen_bool(0.5) {
                let dir = g.any_direction();
                let wave = g.rng.gen_bool(0.5);
                let (p, s) = g.checked_series(dir, wave, g.spec.noise)?;
                SyntheticSample {
                    id,
                    category: Category::Reasoning,
                    answer_type: answer,
                    template: Template::RisingAndCyclic,
                    question: "is the series <ts><ts/> both rising and cyclic ?".to_string(),
                    gold: (dir == Direction::Rising && wave).to_string(),
                    series: vec![s],
                    params: vec![p],
                    candidates: labels(&TF_LABELS),
                }
            } else {
                let shape1 = (g.any_direction(), g.rng.gen_bool(0.5));
                let shape2 = if g.rng.gen_bool(0.5) {
                    shape1
                } else {
                    (g.any_direction(), g.rng.gen_bool(0.5))
                };
                let (p1, s1) = g.checked_series(shape1.0, shape1.1, g.spec.noise)?;
                let (p2, s2) = g.checked_series(shape2.0, shape2.1, g.spec.noise)?;
                SyntheticSample {
                    id,
                    category: Category::Reasoning,
                    answer_type: answer,
                    template: Template::SamePattern,
                    question:
                        "do the series <ts><ts/> and the series <ts><ts/> share the same pattern ?"
                            .to_string(),
                    gold: (shape1 == shape2).to_string(),
                    series: vec![s1, s2],
                    params: vec![p1, p2],
                    candidates: labels(&TF_LABELS),
                }
            }
        }
        AnswerType::OpenEnded => {
            let dir = g.any_direction();
            let wave = g.rng.gen_bool(0.5);
            let (p, s) = g.checked_series(dir, wave, g.spec.noise)?;
            SyntheticSample {
                id,
                category: Category::Reasoning,
                answer_type: answer,
                template: Template::BehaviorOpen,
                question: "describe the overall behavior of the series <ts><ts/>".to_string(),
                gold: behavior_text(dir, wave),
                series: vec![s],
                params: vec![p],
                candidates: Vec::new(),
            }
        }
    };
    Ok(sample)
}

/// Prescience samples render noise-free so the clean continuation is the
/// ground truth.
fn sample_prescience(g: &mut Gen, answer: AnswerType) -> Result<SyntheticSample, HarnessError> {
    let id = g.take_id();
    let sample = match answer {
        AnswerType::MultipleChoice => {
            // Next-step move class; reject deltas outside the two bands.
            let (p, s, delta) = {
                let mut found = None;
                for _ in 0..200 {
                    let dir = g.any_direction();
                    let (p, s) = g.checked_series(dir, true, 0.0)?;
                    let delta = p.value_at(p.len) - s[s.len() - 1];
                    let a = delta.abs();
                    if (NEXT_SMALL.0..=NEXT_SMALL.1).contains(&a)
                        || (NEXT_BIG.0..=NEXT_BIG.1).contains(&a)
                    {
                        found = Some((p, s, delta));
                        break;
                    }
                }
                found.ok_or_else(|| HarnessError::Data("no banded next-move sample".into()))?
            };
            SyntheticSample {
                id,
                category: Category::Prescience,
                answer_type: answer,
                template: Template::NextMove,
                question: "how does the series <ts><ts/> continue right after the end ? option a : a small rise option b : a big rise option c : a small drop option d : a big drop".to_string(),
                series: vec![s],
                params: vec![p],
                candidates: labels(&MCQ_LABELS),
                gold: letter(next_move_slot(delta)).to_string(),
            }
        }
        AnswerType::TrueFalse | AnswerType::OpenEnded => {
            // Resample until the next step is decisively away from the last value.
            let (p, s, next, last) = {
                let mut found = None;
                for _ in 0..200 {
                    let dir = g.any_direction();
                    let wave = g.rng.gen_bool(0.5);
                    let (p, s) = g.checked_series(dir, wave, 0.0)?;
                    let next = p.value_at(p.len);
                    let last = s[s.len() - 1];
                    if (next - last).abs() >= NEXT_MARGIN {
                        found = Some((p, s, next, last));
                        break;
                    }
                }
                found.ok_or_else(|| HarnessError::Data("no decisive next-value sample".into()))?
            };
            if answer == AnswerType::TrueFalse {
                SyntheticSample {
                    id,
                    category: Category::Prescience,
                    answer_type: answer,
                    template: Template::NextExceeds,
                    question: "will the next value of the series <ts><ts/> exceed the last value ?"
                        .to_string(),
                    gold: (next > last).to_string(),
                    series: vec![s],
                    params: vec![p],
                    candidates: labels(&TF_LABELS),
                }
            } else {
                SyntheticSample {
                    id,
                    category: Category::Prescience,
                    answer_type: answer,
                    template: Template::NextOpen,
                    question: "what happens just after the series <ts><ts/> ends ?".to_string(),
                    gold: format!(
                        "the next value moves {} from the last",
                        if next > last { "up" } else { "down" }
                    ),
                    series: vec![s],
                    params: vec![p],
                    candidates: Vec::new(),
                }
            }
        }
    };
    Ok(sample)
}

/// Independent gold recomputation from the rendered points (plus the stored
/// generative law for the continuation questions). `None` for open-ended
/// samples, whose gold is free text.
pub fn recompute_gold(sample: &SyntheticSample) -> Option<String> {
    let s = &sample.series[0];
    match sample.template {
        Template::PeakWhere => Some(letter(extreme_third(s, true)).to_string()),
        Template::LowWhere => Some(letter(extreme_third(s, false)).to_string()),
        Template::LastAboveFirst => Some((s[s.len() - 1] > s[0]).to_string()),
        Template::LastBelowFirst => Some((s[s.len() - 1] < s[0]).to_string()),
        Template::CyclePresent => Some(has_wave(s).to_string()),
        Template::SameDirection => {
            let d1 = classify_direction(&sample.series[0]);
            let d2 = classify_direction(&sample.series[1]);
            Some((d1 == d2).to_string())
        }
        Template::ShapeMcq => {
            let slot = match (classify_direction(s), has_wave(s)) {
                (Direction::Rising, false) => 0,
                (Direction::Falling, false) => 1,
                (Direction::Flat, true) => 2,
                (Direction::Flat, false) => 3,
                other => panic!("shape sample out of class: {other:?}"),
            };
            Some(letter(slot).to_string())
        }
        Template::BehaviorMcq => {
            let slot = match (classify_direction(s), has_wave(s)) {
                (Direction::Rising, true) => 0,
                (Direction::Falling, true) => 1,
                (Direction::Rising, false) => 2,
                (Direction::Falling, false) => 3,
                other => panic!("behavior sample out of class: {other:?}"),
            };
            Some(letter(slot).to_string())
        }
        Template::RisingAndCyclic => {
            Some((classify_direction(s) == Direction::Rising && has_wave(s)).to_string())
        }
        Template::SamePattern => {
            let a = (classify_direction(&sample.series[0]), has_wave(&sample.series[0]));
            let b = (classify_direction(&sample.series[1]), has_wave(&sample.series[1]));
            Some((a == b).to_string())
        }
        Template::NextMove => {
            let p = &sample.params[0];
            let delta = p.value_at(p.len) - s[s.len() - 1];
            Some(letter(next_move_slot(delta)).to_string())
        }
        Template::NextExceeds => {
            let next = sample.params[0].value_at(sample.params[0].len);
            Some((next > s[s.len() - 1]).to_string())
        }
        Template::PeakOpen
        | Template::LowOpen
        | Template::WaveOpen
        | Template::BehaviorOpen
        | Template::NextOpen => None,
    }
}

/// Train and test halves of a generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

/// Deterministic corpus generation: per-category sample counts, a seeded
/// shuffle, and a train/test split.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus, HarnessError> {
    let mut g = Gen { rng: ChaCha8Rng::seed_from_u64(seed), spec, next_id: 0 };
    let mut samples = Vec::new();
    let cells = [
        (AnswerType::MultipleChoice, spec.mcq_per_category),
        (AnswerType::TrueFalse, spec.tf_per_category),
        (AnswerType::OpenEnded, spec.open_per_category),
    ];
    for category in CATEGORIES {
        for (answer, count) in cells {
            for _ in 0..count {
                samples.push(match category {
                    Category::Comprehension => sample_comprehension(&mut g, answer)?,
                    Category::Recognition => sample_recognition(&mut g, answer)?,
                    Category::Reasoning => sample_reasoning(&mut g, answer)?,
                    Category::Prescience => sample_prescience(&mut g, answer)?,
                });
            }
        }
    }
    // Seeded Fisher-Yates, then split.
    for i in (1..samples.len()).rev() {
        let j = g.rng.gen_range(0..=i);
        samples.swap(i, j);
    }
    let train_len = (samples.len() as f64 * spec.train_fraction).round() as usize;
    let test = samples.split_off(train_len.min(samples.len()));
    Ok(Corpus { train: samples, test })
}

pub fn write_samples(path: &Path, samples: &[SyntheticSample]) -> Result<(), HarnessError> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<SyntheticSample>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(line)?);
        }
    }
    Ok(out)
}

// ── Targets and prompts ─────────────────────────────────────────────────

fn think_text(category: Category) -> &'static str {
    match category {
        Category::Comprehension => "check the values",
        Category::Recognition => "check the pattern",
        Category::Reasoning => "check the behavior",
        Category::Prescience => "check the next step",
    }
}

/// The supervised target: a short think span, then the answer (boxed for
/// labeled tasks, free text otherwise).
pub fn target_text(sample: &SyntheticSample) -> String {
    let think = think_text(sample.category);
    match sample.answer_type {
        AnswerType::OpenEnded => {
            format!("<think> {think} </think> <answer> {} </answer>", sample.gold)
        }
        _ => format!("<think> {think} </think> <answer> \\boxed{{ {} }} </answer>", sample.gold),
    }
}

/// Target token ids including the end-of-sequence marker.
pub fn target_tokens(vocab: &Vocab, sample: &SyntheticSample) -> Vec<usize> {
    let mut toks = vocab.encode(&target_text(sample));
    toks.push(EOS);
    toks
}

fn encode_question(vocab: &Vocab, sample: &SyntheticSample) -> Result<Vec<usize>, HarnessError> {
    let toks = vocab.encode(&sample.question);
    if toks.contains(&UNK) {
        return Err(HarnessError::VocabMismatch(format!(
            "question for sample {} contains words outside the vocabulary: {:?}",
            sample.id, sample.question
        )));
    }
    Ok(toks)
}

pub fn task_spec(sample: &SyntheticSample) -> TaskSpec {
    match sample.answer_type {
        AnswerType::OpenEnded => TaskSpec::Generation { gold: sample.gold.clone() },
        _ => TaskSpec::Labeled { candidates: sample.candidates.clone(), gold: sample.gold.clone() },
    }
}

pub fn train_sample(
    vocab: &Vocab,
    sample: &SyntheticSample,
) -> Result<TrainSample, HarnessError> {
    Ok(TrainSample {
        question: encode_question(vocab, sample)?,
        ts: TimeSeriesSet::new(sample.series.clone())
            .map_err(|e| HarnessError::Data(e.to_string()))?,
        targets: target_tokens(vocab, sample),
    })
}

pub fn rl_prompt(vocab: &Vocab, sample: &SyntheticSample) -> Result<RlPrompt, HarnessError> {
    Ok(RlPrompt {
        id: sample.id,
        question: encode_question(vocab, sample)?,
        ts: TimeSeriesSet::new(sample.series.clone())
            .map_err(|e| HarnessError::Data(e.to_string()))?,
        task: task_spec(sample),
    })
}

// ── Experiment config ───────────────────────────────────────────────────

/// Flat key=value experiment configuration; every field has a default and
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    // Model dimensions.
    pub dim: usize,
    pub patch_len: usize,
    pub window: usize,
    pub align_tokens: usize,
    pub align_heads: usize,
    pub share_projections: bool,
    pub backbone_heads: usize,
    pub backbone_blocks: usize,
    pub ffn_hidden: usize,
    pub backbone_max_len: usize,
    pub max_patches: usize,
    pub alignment_mode: AlignmentMode,
    // Corpus.
    pub mcq_per_category: usize,
    pub tf_per_category: usize,
    pub open_per_category: usize,
    pub noise: f64,
    pub series_min_len: usize,
    pub series_max_len: usize,
    pub train_fraction: f64,
    // Supervised stage.
    pub sft_steps: usize,
    pub sft_batch: usize,
    pub sft_lr: f64,
    // Reinforcement stage.
    pub rl_steps: usize,
    pub group_size: usize,
    pub prompts_per_step: usize,
    pub temperature: f64,
    pub rl_lr: f64,
    pub rl_clip: f64,
    pub epsilon: f64,
    pub ema_alpha: f64,
    pub balanced_rewards: bool,
    pub inner_steps: usize,
    pub max_new: usize,
    // Evaluation.
    pub eval_max_new: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dim: 48,
            patch_len: 8,
            window: 5,
            align_tokens: 4,
            align_heads: 4,
            share_projections: false,
            backbone_heads: 4,
            backbone_blocks: 2,
            ffn_hidden: 96,
            backbone_max_len: 160,
            max_patches: 16,
            alignment_mode: AlignmentMode::ThreePattern,
            mcq_per_category: 40,
            tf_per_category: 40,
            open_per_category: 20,
            noise: 0.0,
            series_min_len: 24,
            series_max_len: 64,
            train_fraction: 0.9,
            sft_steps: 200,
            sft_batch: 32,
            sft_lr: 1.5e-2,
            rl_steps: 200,
            group_size: 8,
            prompts_per_step: 4,
            temperature: 0.7,
            rl_lr: 5e-4,
            rl_clip: 0.0,
            epsilon: 1e-4,
            ema_alpha: 0.04,
            balanced_rewards: true,
            inner_steps: 1,
            max_new: 24,
            eval_max_new: 24,
            seed: 0,
        }
    }
}

macro_rules! config_fields {
    ($each:ident) => {
        $each!(dim);
        $each!(patch_len);
        $each!(window);
        $each!(align_tokens);
        $each!(align_heads);
        $each!(share_projections);
        $each!(backbone_heads);
        $each!(backbone_blocks);
        $each!(ffn_hidden);
        $each!(backbone_max_len);
        $each!(max_patches);
        $each!(alignment_mode);
        $each!(mcq_per_category);
        $each!(tf_per_category);
        $each!(open_per_category);
        $each!(noise);
        $each!(series_min_len);
        $each!(series_max_len);
        $each!(train_fraction);
        $each!(sft_steps);
        $each!(sft_batch);
        $each!(sft_lr);
        $each!(rl_steps);
        $each!(group_size);
        $each!(prompts_per_step);
        $each!(temperature);
        $each!(rl_lr);
        $each!(rl_clip);
        $each!(epsilon);
        $each!(ema_alpha);
        $each!(balanced_rewards);
        $each!(inner_steps);
        $each!(max_new);
        $each!(eval_max_new);
        $each!(seed);
    };
}

trait ConfigValue: Sized {
    fn parse_cfg(s: &str) -> Result<Self, String>;
    fn render_cfg(&self) -> String;
}

macro_rules! via_fromstr {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_cfg(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render_cfg(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

via_fromstr!(usize, u64, f64, bool, AlignmentMode);

impl ExperimentConfig {
    /// Parses flat `key = value` lines; `#` starts a comment; unknown keys
    /// and malformed values are errors. Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = ExperimentConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(HarnessError::Config {
                    line: idx + 1,
                    detail: format!("expected key=value, got {line:?}"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            let mut matched = false;
            macro_rules! try_set {
                ($field:ident) => {
                    if key == stringify!($field) {
                        cfg.$field = ConfigValue::parse_cfg(value).map_err(|e| {
                            HarnessError::Config {
                                line: idx + 1,
                                detail: format!("bad value for {key}: {e}"),
                            }
                        })?;
                        matched = true;
                    }
                };
            }
            config_fields!(try_set);
            if !matched {
                return Err(HarnessError::UnknownKey(key.to_string()));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical rendering: every key, fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! put {
            ($field:ident) => {
                let _ = writeln!(out, "{} = {}", stringify!($field), self.$field.render_cfg());
            };
        }
        config_fields!(put);
        out
    }

    /// FNV-1a over the canonical rendering.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            mcq_per_category: self.mcq_per_category,
            tf_per_category: self.tf_per_category,
            open_per_category: self.open_per_category,
            noise: self.noise,
            min_len: self.series_min_len,
            max_len: self.series_max_len,
            train_fraction: self.train_fraction,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            dim: self.dim,
            heads: self.backbone_heads,
            blocks: self.backbone_blocks,
            ffn_hidden: self.ffn_hidden,
            max_len: self.backbone_max_len,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig { patch_len: self.patch_len, window: self.window, dim: self.dim }
    }

    pub fn rl_config(&self) -> RlConfig {
        RlConfig {
            steps: self.rl_steps,
            group_size: self.group_size,
            prompts_per_step: self.prompts_per_step,
            temperature: self.temperature,
            max_new: self.max_new,
            lr: self.rl_lr,
            clip: if self.rl_clip > 0.0 { Some(self.rl_clip) } else { None },
            epsilon: self.epsilon,
            ema_alpha: self.ema_alpha,
            balanced_rewards: self.balanced_rewards,
            inner_steps: self.inner_steps,
            seed: self.seed,
        }
    }

    pub fn build_model(&self) -> Result<ModelParams, HarnessError> {
        ModelParams::seeded(
            harness_vocab(),
            self.backbone_config(),
            self.pipeline_config(),
            self.align_tokens,
            self.align_heads,
            self.share_projections,
            self.alignment_mode,
            self.max_patches,
            self.seed,
        )
        .map_err(|e| HarnessError::Data(e.to_string()))
    }
}

// ── Evaluation ──────────────────────────────────────────────────────────

/// Produces a response text for a sample; the model is one implementation,
/// test oracles are others.
pub trait Responder {
    fn respond(
        &mut self,
        sample: &SyntheticSample,
        question: &[usize],
    ) -> Result<String, HarnessError>;
}

pub struct ModelResponder<'a> {
    pub model: &'a ModelParams,
    pub max_new: usize,
}

impl Responder for ModelResponder<'_> {
    fn respond(
        &mut self,
        sample: &SyntheticSample,
        question: &[usize],
    ) -> Result<String, HarnessError> {
        let ts = TimeSeriesSet::new(sample.series.clone())
            .map_err(|e| HarnessError::Data(e.to_string()))?;
        let gen = crate::model::respond(self.model, question, &ts, DecodeMode::Greedy, self.max_new, 0)
            .map_err(|e| HarnessError::Data(e.to_string()))?;
        Ok(self.model.vocab.decode(&gen.tokens))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: Category,
    pub labeled_total: usize,
    pub labeled_correct: usize,
    pub open_total: usize,
    pub rouge_sum: f64,
}

impl CategoryMetrics {
    pub fn accuracy(&self) -> f64 {
        if self.labeled_total == 0 {
            0.0
        } else {
            self.labeled_correct as f64 / self.labeled_total as f64
        }
    }

    pub fn mean_rouge(&self) -> f64 {
        if self.open_total == 0 {
            0.0
        } else {
            self.rouge_sum / self.open_total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_category: Vec<CategoryMetrics>,
    pub labeled_total: usize,
    pub labeled_correct: usize,
    pub open_total: usize,
    pub rouge_sum: f64,
}

impl EvalReport {
    pub fn labeled_accuracy(&self) -> f64 {
        if self.labeled_total == 0 {
            0.0
        } else {
            self.labeled_correct as f64 / self.labeled_total as f64
        }
    }

    pub fn mean_rouge(&self) -> f64 {
        if self.open_total == 0 {
            0.0
        } else {
            self.rouge_sum / self.open_total as f64
        }
    }

    /// Plain-text table.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>10} {:>10} {:>10}", "category", "accuracy", "labeled", "rouge-l");
        for m in &self.per_category {
            let _ = writeln!(
                out,
                "{:<16} {:>10.4} {:>6}/{:<3} {:>10.4}",
                m.category.to_string(),
                m.accuracy(),
                m.labeled_correct,
                m.labeled_total,
                m.mean_rouge()
            );
        }
        let _ = writeln!(
            out,
            "{:<16} {:>10.4} {:>6}/{:<3} {:>10.4}",
            "overall",
            self.labeled_accuracy(),
            self.labeled_correct,
            self.labeled_total,
            self.mean_rouge()
        );
        out
    }

    /// Machine-readable key=value lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "labeled_accuracy = {:.6}", self.labeled_accuracy());
        let _ = writeln!(out, "labeled_correct = {}", self.labeled_correct);
        let _ = writeln!(out, "labeled_total = {}", self.labeled_total);
        let _ = writeln!(out, "mean_rouge = {:.6}", self.mean_rouge());
        let _ = writeln!(out, "open_total = {}", self.open_total);
        for m in &self.per_category {
            let _ = writeln!(out, "category.{}.accuracy = {:.6}", m.category, m.accuracy());
            let _ = writeln!(out, "category.{}.rouge = {:.6}", m.category, m.mean_rouge());
        }
        out
    }
}

fn label_eq(a: &str, b: &str) -> bool {
    a.trim().eq_ignore_ascii_case(b.trim())
}

/// Greedy evaluation: labeled samples score by exact extracted-label match,
/// open-ended samples by Rouge-L F1 against the gold text.
pub fn evaluate(
    responder: &mut dyn Responder,
    samples: &[SyntheticSample],
    vocab: &Vocab,
) -> Result<EvalReport, HarnessError> {
    let mut per: Vec<CategoryMetrics> = CATEGORIES
        .iter()
        .map(|&category| CategoryMetrics {
            category,
            labeled_total: 0,
            labeled_correct: 0,
            open_total: 0,
            rouge_sum: 0.0,
        })
        .collect();
    for sample in samples {
        let question = encode_question(vocab, sample)?;
        let text = responder.respond(sample, &question)?;
        let parsed = parse_response(&text);
        let slot = per
            .iter_mut()
            .find(|m| m.category == sample.category)
            .expect("category slot exists");
        match sample.answer_type {
            AnswerType::OpenEnded => {
                slot.open_total += 1;
                if let Some(p) = parsed.payload.as_deref() {
                    slot.rouge_sum +=
                        rouge_l(&rouge_tokens(p), &rouge_tokens(&sample.gold)).f1;
                }
            }
            _ => {
                slot.labeled_total += 1;
                if parsed.payload.as_deref().is_some_and(|p| label_eq(p, &sample.gold)) {
                    slot.labeled_correct += 1;
                }
            }
        }
    }
    let report = EvalReport {
        labeled_total: per.iter().map(|m| m.labeled_total).sum(),
        labeled_correct: per.iter().map(|m| m.labeled_correct).sum(),
        open_total: per.iter().map(|m| m.open_total).sum(),
        rouge_sum: per.iter().map(|m| m.rouge_sum).sum(),
        per_category: per,
    };
    Ok(report)
}

// ── Experiment driver ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftCurvePoint {
    pub step: usize,
    pub loss: f64,
}

/// Joint supervised stage over the training split; returns the loss curve.
pub fn train_sft(
    model: &mut ModelParams,
    train: &[SyntheticSample],
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<SftCurvePoint>, HarnessError> {
    if train.is_empty() {
        return Err(HarnessError::Data("empty training split".into()));
    }
    let vocab = model.vocab.clone();
    let prepared: Vec<TrainSample> =
        train.iter().map(|s| train_sample(&vocab, s)).collect::<Result<_, _>>()?;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5f75_7361);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch: Vec<TrainSample> = (0..batch_size)
            .map(|j| prepared[order[(step * batch_size + j) % order.len()]].clone())
            .collect();
        let loss = sft_model_step(model, &batch, lr)
            .map_err(|e| HarnessError::Data(e.to_string()))?;
        curve.push(SftCurvePoint { step, loss });
    }
    Ok(curve)
}

/// Everything a finished run leaves on disk, plus the in-memory reports.
#[derive(Debug)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub sft_curve: Vec<SftCurvePoint>,
    pub rl_curve: Vec<CurvePoint>,
    pub sft_report: EvalReport,
    pub rl_report: EvalReport,
}

fn stage<T, E: std::error::Error + Send + Sync + 'static>(
    name: &'static str,
    r: Result<T, E>,
) -> Result<T, HarnessError> {
    r.map_err(|e| HarnessError::Stage { stage: name, source: anyhow::Error::new(e) })
}

/// gen-data, train-sft, train-rl, eval, all under
/// `out_root/run-<seed>-<confighash>`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_root: &Path,
) -> Result<RunArtifacts, HarnessError> {
    let run_dir = out_root.join(format!("run-{:04}-{:016x}", cfg.seed, cfg.hash()));
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(run_dir.join("config.txt"), cfg.to_text())?;

    // Data.
    let corpus = stage("gen-data", generate_corpus(&cfg.corpus_spec(), cfg.seed))?;
    write_samples(&run_dir.join("train.jsonl"), &corpus.train)?;
    write_samples(&run_dir.join("test.jsonl"), &corpus.test)?;

    // Supervised stage.
    let mut model = stage("train-sft", cfg.build_model())?;
    let sft_curve = stage(
        "train-sft",
        train_sft(&mut model, &corpus.train, cfg.sft_steps, cfg.sft_batch, cfg.sft_lr, cfg.seed),
    )?;
    let mut curve_text = String::new();
    for p in &sft_curve {
        let _ = writeln!(curve_text, "{}", serde_json::to_string(p)?);
    }
    std::fs::write(run_dir.join("sft_loss.jsonl"), curve_text)?;
    stage("train-sft", model.save(&run_dir.join("sft.ckpt.json")))?;

    // Reinforcement stage.
    let vocab = model.vocab.clone();
    let prompts: Vec<RlPrompt> = stage(
        "train-rl",
        corpus.train.iter().map(|s| rl_prompt(&vocab, s)).collect::<Result<Vec<_>, _>>(),
    )?;
    let (state, rl_curve) = stage("train-rl", train_rl(model.clone(), &prompts, &cfg.rl_config()))?;
    let rl_model = state.model;
    let mut curve_text = String::new();
    for p in &rl_curve {
        let _ = writeln!(curve_text, "{}", serde_json::to_string(p)?);
    }
    std::fs::write(run_dir.join("reward_curve.jsonl"), curve_text)?;
    stage("train-rl", rl_model.save(&run_dir.join("rl.ckpt.json")))?;

    // Evaluation of both checkpoints on the held-out split.
    let mut sft_responder = ModelResponder { model: &model, max_new: cfg.eval_max_new };
    let sft_report = stage("eval", evaluate(&mut sft_responder, &corpus.test, &vocab))?;
    let mut rl_responder = ModelResponder { model: &rl_model, max_new: cfg.eval_max_new };
    let rl_report = stage("eval", evaluate(&mut rl_responder, &corpus.test, &vocab))?;
    std::fs::write(run_dir.join("report_sft.txt"), sft_report.to_text())?;
    std::fs::write(run_dir.join("report_sft.kv"), sft_report.to_kv())?;
    std::fs::write(run_dir.join("report_rl.txt"), rl_report.to_text())?;
    std::fs::write(run_dir.join("report_rl.kv"), rl_report.to_kv())?;

    Ok(RunArtifacts { run_dir, sft_curve, rl_curve, sft_report, rl_report })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> CorpusSpec {
        CorpusSpec {
            mcq_per_category: 3,
            tf_per_category: 3,
            open_per_category: 2,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = generate_corpus(&tiny_spec(), 42).unwrap();
        let b = generate_corpus(&tiny_spec(), 42).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&tiny_spec(), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn corpus_counts_and_split() {
        let corpus = generate_corpus(&tiny_spec(), 1).unwrap();
        let total = corpus.train.len() + corpus.test.len();
        assert_eq!(total, 4 * (3 + 3 + 2));
        assert_eq!(corpus.train.len(), (total as f64 * 0.9).round() as usize);
        for cat in CATEGORIES {
            let n = corpus
                .train
                .iter()
                .chain(&corpus.test)
                .filter(|s| s.category == cat)
                .count();
            assert_eq!(n, 8);
        }
    }

    #[test]
    fn gold_matches_independent_recomputation() {
        let spec = CorpusSpec {
            mcq_per_category: 6,
            tf_per_category: 6,
            open_per_category: 2,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec, 7).unwrap();
        for s in corpus.train.iter().chain(&corpus.test) {
            match recompute_gold(s) {
                Some(again) => assert_eq!(again, s.gold, "sample {} ({:?})", s.id, s.template),
                None => assert_eq!(s.answer_type, AnswerType::OpenEnded),
            }
        }
    }

    #[test]
    fn gold_is_always_a_candidate() {
        let corpus = generate_corpus(&tiny_spec(), 3).unwrap();
        for s in corpus.train.iter().chain(&corpus.test) {
            if s.answer_type != AnswerType::OpenEnded {
                assert!(s.candidates.iter().any(|c| c == &s.gold));
            }
        }
    }

    #[test]
    fn questions_have_matching_placeholder_pairs() {
        let corpus = generate_corpus(&tiny_spec(), 4).unwrap();
        for s in corpus.train.iter().chain(&corpus.test) {
            let opens = s.question.matches("<ts>").count();
            let closes = s.question.matches("<ts/>").count();
            assert_eq!(opens, s.series.len());
            assert_eq!(closes, s.series.len());
        }
    }

    #[test]
    fn vocabulary_covers_generated_text() {
        let vocab = harness_vocab();
        let corpus = generate_corpus(&CorpusSpec::default(), 5).unwrap();
        for s in corpus.train.iter().chain(&corpus.test) {
            let q = vocab.encode(&s.question);
            assert!(!q.contains(&UNK), "unknown word in question: {:?}", s.question);
            let t = vocab.encode(&target_text(s));
            assert!(!t.contains(&UNK), "unknown word in target: {:?}", target_text(s));
        }
    }

    #[test]
    fn sample_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let corpus = generate_corpus(&tiny_spec(), 6).unwrap();
        write_samples(&path, &corpus.test).unwrap();
        let again = read_samples(&path).unwrap();
        assert_eq!(corpus.test, again);
    }

    #[test]
    fn config_defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let parsed = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, parsed);
        assert_eq!(cfg.hash(), parsed.hash());
    }

    #[test]
    fn config_overrides_and_comments() {
        let text = "\n# comment\n  sft_steps = 12  # trailing\nalignment_mode = single_pattern\nnoise=0.25\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.sft_steps, 12);
        assert_eq!(cfg.alignment_mode, AlignmentMode::SinglePattern);
        assert_eq!(cfg.noise, 0.25);
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn config_rejects_unknown_and_malformed() {
        assert!(matches!(
            ExperimentConfig::parse("nope = 3"),
            Err(HarnessError::UnknownKey(k)) if k == "nope"
        ));
        assert!(matches!(
            ExperimentConfig::parse("sft_steps = many"),
            Err(HarnessError::Config { .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("just a line"),
            Err(HarnessError::Config { .. })
        ));
    }

    struct EchoGold;

    impl Responder for EchoGold {
        fn respond(
            &mut self,
            sample: &SyntheticSample,
            _q: &[usize],
        ) -> Result<String, HarnessError> {
            Ok(match sample.answer_type {
                AnswerType::OpenEnded => format!("<answer> {} </answer>", sample.gold),
                _ => format!("<answer> \\boxed{{ {} }} </answer>", sample.gold),
            })
        }
    }

    struct Silent;

    impl Responder for Silent {
        fn respond(
            &mut self,
            _s: &SyntheticSample,
            _q: &[usize],
        ) -> Result<String, HarnessError> {
            Ok(String::new())
        }
    }

    struct RandomGuesser {
        rng: ChaCha8Rng,
    }

    impl Responder for RandomGuesser {
        fn respond(
            &mut self,
            _s: &SyntheticSample,
            _q: &[usize],
        ) -> Result<String, HarnessError> {
            let pick = MCQ_LABELS[self.rng.gen_range(0..4)];
            Ok(format!("<answer> \\boxed{{ {pick} }} </answer>"))
        }
    }

    #[test]
    fn oracle_responder_scores_perfectly() {
        let corpus = generate_corpus(&tiny_spec(), 8).unwrap();
        let vocab = harness_vocab();
        let report = evaluate(&mut EchoGold, &corpus.test, &vocab).unwrap();
        assert_eq!(report.labeled_correct, report.labeled_total);
        assert!(report.labeled_total > 0);
        assert!((report.mean_rouge() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn silent_responder_scores_zero() {
        let corpus = generate_corpus(&tiny_spec(), 9).unwrap();
        let vocab = harness_vocab();
        let report = evaluate(&mut Silent, &corpus.test, &vocab).unwrap();
        assert_eq!(report.labeled_correct, 0);
        assert_eq!(report.mean_rouge(), 0.0);
    }

    #[test]
    fn random_guesser_near_chance_on_mcq() {
        let spec = CorpusSpec {
            mcq_per_category: 100,
            tf_per_category: 0,
            open_per_category: 0,
            train_fraction: 0.0,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec, 10).unwrap();
        assert_eq!(corpus.test.len(), 400);
        let vocab = harness_vocab();
        let mut guesser = RandomGuesser { rng: ChaCha8Rng::seed_from_u64(1) };
        let report = evaluate(&mut guesser, &corpus.test, &vocab).unwrap();
        let acc = report.labeled_accuracy();
        assert!((0.15..=0.35).contains(&acc), "accuracy {acc}");
    }

    #[test]
    fn evaluation_rejects_vocab_mismatch() {
        let corpus = generate_corpus(&tiny_spec(), 11).unwrap();
        let mut sample = corpus.test[0].clone();
        sample.question = "completely extraterrestrial vocabulary <ts><ts/>".into();
        let vocab = harness_vocab();
        assert!(matches!(
            evaluate(&mut EchoGold, &[sample], &vocab),
            Err(HarnessError::VocabMismatch(_))
        ));
    }

    #[test]
    fn evaluation_rouge_matches_rewards_module() {
        // A responder with known partial overlap: evaluate's per-sample rouge
        // must be exactly rewards::rouge_l on the same strings.
        struct Partial;
        impl Responder for Partial {
            fn respond(
                &mut self,
                sample: &SyntheticSample,
                _q: &[usize],
            ) -> Result<String, HarnessError> {
                let mut words: Vec<&str> = sample.gold.split_whitespace().collect();
                words.truncate(3.min(words.len()));
                Ok(format!("<answer> {} </answer>", words.join(" ")))
            }
        }
        let spec = CorpusSpec {
            mcq_per_category: 0,
            tf_per_category: 0,
            open_per_category: 3,
            train_fraction: 0.0,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec, 12).unwrap();
        let vocab = harness_vocab();
        let report = evaluate(&mut Partial, &corpus.test, &vocab).unwrap();
        let mut want = 0.0;
        for s in &corpus.test {
            let mut words: Vec<&str> = s.gold.split_whitespace().collect();
            words.truncate(3.min(words.len()));
            let cand = words.join(" ");
            want += rouge_l(&rouge_tokens(&cand), &rouge_tokens(&s.gold)).f1;
        }
        assert_eq!(report.rouge_sum, want);
    }

    #[test]
    fn target_texts_are_well_formed() {
        let corpus = generate_corpus(&tiny_spec(), 13).unwrap();
        for s in corpus.train.iter().take(8) {
            let text = target_text(s);
            let parsed = parse_response(&text);
            assert_eq!(parsed.think_pairs, 1);
            assert_eq!(parsed.answer_pairs, 1);
            let payload = parsed.payload.unwrap();
            assert!(label_eq(&payload, &s.gold), "{payload:?} vs {:?}", s.gold);
        }
    }

    #[test]
    fn experiment_smoke_run_is_deterministic() {
        let text = "\
            dim = 16\n patch_len = 4\n window = 3\n align_tokens = 2\n align_heads = 2\n\
            backbone_heads = 2\n backbone_blocks = 1\n ffn_hidden = 32\n backbone_max_len = 96\n\
            mcq_per_category = 2\n tf_per_category = 2\n open_per_category = 1\n\
            sft_steps = 4\n sft_batch = 2\n rl_steps = 2\n group_size = 2\n\
            prompts_per_step = 1\n max_new = 8\n eval_max_new = 8\n seed = 5\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = run_experiment(&cfg, dir_a.path()).unwrap();
        let b = run_experiment(&cfg, dir_b.path()).unwrap();
        assert_eq!(a.sft_report, b.sft_report);
        assert_eq!(a.rl_report, b.rl_report);
        for file in
            ["train.jsonl", "test.jsonl", "sft_loss.jsonl", "reward_curve.jsonl", "report_rl.kv"]
        {
            let fa = std::fs::read(a.run_dir.join(file)).unwrap();
            let fb = std::fs::read(b.run_dir.join(file)).unwrap();
            assert_eq!(fa, fb, "{file} differs between identical runs");
        }
        // Distinct ablation config lands in a distinct run directory.
        let mut ablated = cfg.clone();
        ablated.alignment_mode = AlignmentMode::NoAlignment;
        assert_ne!(ablated.hash(), cfg.hash());
    }
}
