//! Pattern-based text/series alignment: learnable token banks extract
//! pattern-specific text summaries, each summary interacts with its matching
//! latent series component through self-attention, the three results fuse by
//! elementwise mean, and the fused rows splice into the text stream at
//! placeholder positions.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    multi_head_attention, AttentionParamIds, AttentionParams, AttnMask, GradTape, NumericsError,
    Tensor, TensorId,
};
use crate::ts_pipeline::{
    latent_decompose, patch_and_embed, PipelineConfig, PipelineError, TimeSeriesSet, TsEmbedIds,
};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("malformed placeholders: {0}")]
    MalformedPlaceholders(String),
    #[error("question has {pairs} placeholder pairs but the series set has {series}")]
    SeriesCountMismatch { pairs: usize, series: usize },
    #[error("fused rows ({rows}) do not divide evenly into {series} series")]
    BadFusedShape { rows: usize, series: usize },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which component path produced or consumed a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatternKind {
    Full,
    Trend,
    Seasonal,
}

/// Ablation axis: all three pattern paths, the full path only, or no
/// alignment at all (series embedding spliced in directly).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignmentMode {
    ThreePattern,
    SinglePattern,
    NoAlignment,
}

impl std::str::FromStr for AlignmentMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "three_pattern" => Ok(AlignmentMode::ThreePattern),
            "single_pattern" => Ok(AlignmentMode::SinglePattern),
            "no_alignment" => Ok(AlignmentMode::NoAlignment),
            other => Err(format!(
                "unknown alignment mode {other:?} (expected three_pattern, single_pattern, or no_alignment)"
            )),
        }
    }
}

impl std::fmt::Display for AlignmentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AlignmentMode::ThreePattern => "three_pattern",
            AlignmentMode::SinglePattern => "single_pattern",
            AlignmentMode::NoAlignment => "no_alignment",
        };
        f.write_str(s)
    }
}

/// Three learned query banks, one per pattern, each `T x d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTokenBank {
    pub q_full: Tensor,
    pub q_trend: Tensor,
    pub q_sea: Tensor,
}

impl AlignmentTokenBank {
    pub fn seeded<R: Rng>(tokens: usize, dim: usize, rng: &mut R) -> Self {
        let limit = 1.0 / (dim as f64).sqrt();
        AlignmentTokenBank {
            q_full: Tensor::uniform(vec![tokens, dim], limit, rng),
            q_trend: Tensor::uniform(vec![tokens, dim], limit, rng),
            q_sea: Tensor::uniform(vec![tokens, dim], limit, rng),
        }
    }

    pub fn tokens(&self) -> usize {
        self.q_full.rows()
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.q_full, &self.q_trend, &self.q_sea]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.q_full, &mut self.q_trend, &mut self.q_sea]
    }
}

/// All alignment-stage parameters. With `share_projections` the full-pattern
/// attention weights serve every pattern path; each path otherwise owns its
/// extraction and interaction projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentParams {
    pub bank: AlignmentTokenBank,
    pub extract: [AttentionParams; 3],
    pub interact: [AttentionParams; 3],
    pub heads: usize,
    pub share_projections: bool,
}

impl AlignmentParams {
    pub fn seeded<R: Rng>(
        tokens: usize,
        dim: usize,
        heads: usize,
        share_projections: bool,
        rng: &mut R,
    ) -> Self {
        AlignmentParams {
            bank: AlignmentTokenBank::seeded(tokens, dim, rng),
            extract: [
                AttentionParams::seeded(dim, rng),
                AttentionParams::seeded(dim, rng),
                AttentionParams::seeded(dim, rng),
            ],
            interact: [
                AttentionParams::seeded(dim, rng),
                AttentionParams::seeded(dim, rng),
                AttentionParams::seeded(dim, rng),
            ],
            heads,
            share_projections,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.bank.tensors().to_vec();
        for p in &self.extract {
            out.extend(p.tensors());
        }
        for p in &self.interact {
            out.extend(p.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.bank.tensors_mut());
        for p in &mut self.extract {
            out.extend(p.tensors_mut());
        }
        for p in &mut self.interact {
            out.extend(p.tensors_mut());
        }
        out
    }
}

/// Tape handles for the alignment parameters.
#[derive(Debug, Clone)]
pub struct AlignmentParamIds {
    pub bank: [TensorId; 3],
    pub extract: [AttentionParamIds; 3],
    pub interact: [AttentionParamIds; 3],
    pub heads: usize,
    pub share_projections: bool,
}

impl AlignmentParamIds {
    pub fn record(tape: &mut GradTape, params: &AlignmentParams, trainable: bool) -> Self {
        let mut put = |t: &Tensor| {
            let mut t = t.clone();
            t.set_requires_grad(trainable);
            tape.leaf(t)
        };
        let bank = [put(&params.bank.q_full), put(&params.bank.q_trend), put(&params.bank.q_sea)];
        let extract = [
            AttentionParamIds::record(tape, &params.extract[0], trainable),
            AttentionParamIds::record(tape, &params.extract[1], trainable),
            AttentionParamIds::record(tape, &params.extract[2], trainable),
        ];
        let interact = [
            AttentionParamIds::record(tape, &params.interact[0], trainable),
            AttentionParamIds::record(tape, &params.interact[1], trainable),
            AttentionParamIds::record(tape, &params.interact[2], trainable),
        ];
        AlignmentParamIds {
            bank,
            extract,
            interact,
            heads: params.heads,
            share_projections: params.share_projections,
        }
    }

    fn extract_for(&self, k: usize) -> &AttentionParamIds {
        if self.share_projections {
            &self.extract[0]
        } else {
            &self.extract[k]
        }
    }

    fn interact_for(&self, k: usize) -> &AttentionParamIds {
        if self.share_projections {
            &self.interact[0]
        } else {
            &self.interact[k]
        }
    }
}

/// Cross-attends each pattern bank over the text rows:
/// `X_k = MHA(Q_k, x_text, x_text)`. Returns `[full, trend, seasonal]`
/// summaries, each `T x d`.
pub fn extract_text_patterns(
    tape: &mut GradTape,
    x_text: TensorId,
    params: &AlignmentParamIds,
) -> Result<[TensorId; 3], AlignError> {
    let mut out = Vec::with_capacity(3);
    for k in 0..3 {
        out.push(multi_head_attention(
            tape,
            params.bank[k],
            x_text,
            x_text,
            params.heads,
            params.extract_for(k),
            AttnMask::None,
        )?);
    }
    Ok([out[0], out[1], out[2]])
}

/// Self-attention over `[text summary; series component]` rows; returns only
/// the trailing series rows, now carrying textual semantics.
pub fn interact(
    tape: &mut GradTape,
    text_k: TensorId,
    ts_j: TensorId,
    attn: &AttentionParamIds,
    heads: usize,
) -> Result<TensorId, AlignError> {
    let t = tape.value(text_k).rows();
    let n = tape.value(ts_j).rows();
    let joint = if t == 0 { ts_j } else { tape.concat_rows(&[text_k, ts_j])? };
    let attended = multi_head_attention(tape, joint, joint, joint, heads, attn, AttnMask::None)?;
    Ok(if t == 0 { attended } else { tape.slice_rows(attended, t, t + n)? })
}

/// Elementwise mean of the three interacted component tensors.
pub fn fuse(
    tape: &mut GradTape,
    full: TensorId,
    trend: TensorId,
    sea: TensorId,
) -> Result<TensorId, AlignError> {
    let shape = tape.value(full).shape().to_vec();
    for id in [trend, sea] {
        if tape.value(id).shape() != shape {
            return Err(AlignError::ShapeMismatch {
                op: "fuse",
                detail: format!("{:?} vs {:?}", shape, tape.value(id).shape()),
            });
        }
    }
    let ab = tape.add(full, trend)?;
    let abc = tape.add(ab, sea)?;
    Ok(tape.scale(abc, 1.0 / 3.0)?)
}

/// Text stream with series placeholders replaced by fused rows. `spans[i]`
/// is the output row range now holding series `i`'s tokens.
#[derive(Debug, Clone)]
pub struct MultimodalSequence {
    pub embeddings: TensorId,
    pub spans: Vec<std::ops::Range<usize>>,
}

/// Scans token ids for `<ts>`/`<ts/>` pairs. Pairs must be adjacent
/// (open immediately followed by close) and in order.
pub fn find_placeholder_pairs(
    tokens: &[usize],
    open_id: usize,
    close_id: usize,
) -> Result<Vec<(usize, usize)>, AlignError> {
    let mut pairs = Vec::new();
    let mut pending_open: Option<usize> = None;
    for (i, &t) in tokens.iter().enumerate() {
        if t == open_id {
            if pending_open.is_some() {
                return Err(AlignError::MalformedPlaceholders(format!(
                    "two opens in a row at position {i}"
                )));
            }
            pending_open = Some(i);
        } else if t == close_id {
            match pending_open.take() {
                Some(o) if i == o + 1 => pairs.push((o, i)),
                Some(o) => {
                    return Err(AlignError::MalformedPlaceholders(format!(
                        "open at {o} and close at {i} are not adjacent"
                    )))
                }
                None => {
                    return Err(AlignError::MalformedPlaceholders(format!(
                        "close without open at position {i}"
                    )))
                }
            }
        }
    }
    if let Some(o) = pending_open {
        return Err(AlignError::MalformedPlaceholders(format!("unclosed open at position {o}")));
    }
    Ok(pairs)
}

/// Splices each series' fused rows over its placeholder pair. Output length
/// is `L + M*N - 2M`.
pub fn token_replace(
    tape: &mut GradTape,
    x_text: TensorId,
    x_fused: TensorId,
    pairs: &[(usize, usize)],
    series_count: usize,
) -> Result<MultimodalSequence, AlignError> {
    let l = tape.value(x_text).rows();
    let fused_rows = tape.value(x_fused).rows();
    if pairs.len() != series_count {
        return Err(AlignError::SeriesCountMismatch { pairs: pairs.len(), series: series_count });
    }
    if series_count == 0 || fused_rows % series_count != 0 {
        return Err(AlignError::BadFusedShape { rows: fused_rows, series: series_count });
    }
    let n = fused_rows / series_count;
    let mut prev_end = 0usize;
    for (i, &(o, c)) in pairs.iter().enumerate() {
        if c != o + 1 || c >= l {
            return Err(AlignError::MalformedPlaceholders(format!(
                "pair {i} at ({o}, {c}) is not an adjacent in-bounds pair"
            )));
        }
        if i > 0 && o < prev_end {
            return Err(AlignError::MalformedPlaceholders(format!(
                "pair {i} at ({o}, {c}) overlaps the previous pair"
            )));
        }
        prev_end = c + 1;
    }
    let mut parts = Vec::new();
    let mut spans = Vec::with_capacity(series_count);
    let mut out_rows = 0usize;
    let mut cursor = 0usize;
    for (m, &(o, c)) in pairs.iter().enumerate() {
        if cursor < o {
            parts.push(tape.slice_rows(x_text, cursor, o)?);
            out_rows += o - cursor;
        }
        let fused_m = tape.slice_rows(x_fused, m * n, (m + 1) * n)?;
        parts.push(fused_m);
        spans.push(out_rows..out_rows + n);
        out_rows += n;
        cursor = c + 1;
    }
    if cursor < l {
        parts.push(tape.slice_rows(x_text, cursor, l)?);
        out_rows += l - cursor;
    }
    let embeddings = tape.concat_rows(&parts)?;
    debug_assert_eq!(out_rows, l + series_count * n - 2 * series_count);
    Ok(MultimodalSequence { embeddings, spans })
}

/// Which pattern interacted with which latent component, for structural
/// assertions in tests.
#[derive(Debug, Clone, Default)]
pub struct AlignTrace {
    pub pairings: Vec<(PatternKind, PatternKind)>,
}

/// Result of the end-to-end alignment pass.
pub struct AlignOutcome {
    pub seq: MultimodalSequence,
    pub trace: AlignTrace,
    /// Patches per series after padding.
    pub patches_per_series: usize,
}

/// End-to-end alignment: embed text, embed/decompose series, extract
/// per-pattern text summaries, interact each with its matching component,
/// fuse, and splice into the text stream.
#[allow(clippy::too_many_arguments)]
pub fn align(
    tape: &mut GradTape,
    question: &[usize],
    ts: &TimeSeriesSet,
    token_table: TensorId,
    ts_embed: &TsEmbedIds,
    params: &AlignmentParamIds,
    pipeline: &PipelineConfig,
    mode: AlignmentMode,
    placeholder_ids: (usize, usize),
) -> Result<AlignOutcome, AlignError> {
    let x_text = tape.embedding(token_table, question)?;
    let pairs = find_placeholder_pairs(question, placeholder_ids.0, placeholder_ids.1)?;
    if pairs.len() != ts.len() {
        return Err(AlignError::SeriesCountMismatch { pairs: pairs.len(), series: ts.len() });
    }
    let (x_ts, grid) = patch_and_embed(tape, ts, pipeline.patch_len, ts_embed)?;
    let mut trace = AlignTrace::default();
    let fused = match mode {
        AlignmentMode::NoAlignment => x_ts,
        AlignmentMode::SinglePattern => {
            let patterns = extract_text_patterns(tape, x_text, params)?;
            trace.pairings.push((PatternKind::Full, PatternKind::Full));
            interact(tape, patterns[0], x_ts, params.interact_for(0), params.heads)?
        }
        AlignmentMode::ThreePattern => {
            let parts = latent_decompose(tape, x_ts, ts.len(), pipeline.window)?;
            let patterns = extract_text_patterns(tape, x_text, params)?;
            let components = [
                (parts.full, PatternKind::Full),
                (parts.trend, PatternKind::Trend),
                (parts.seasonal, PatternKind::Seasonal),
            ];
            let kinds = [PatternKind::Full, PatternKind::Trend, PatternKind::Seasonal];
            let mut interacted = Vec::with_capacity(3);
            for k in 0..3 {
                trace.pairings.push((kinds[k], components[k].1));
                interacted.push(interact(
                    tape,
                    patterns[k],
                    components[k].0,
                    params.interact_for(k),
                    params.heads,
                )?);
            }
            fuse(tape, interacted[0], interacted[1], interacted[2])?
        }
    };
    let seq = token_replace(tape, x_text, fused, &pairs, ts.len())?;
    Ok(AlignOutcome { seq, trace, patches_per_series: grid.patches_per_series() })
}
