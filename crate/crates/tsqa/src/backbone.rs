//! Decoder-only language model over a small word-level vocabulary. Consumes
//! either token ids or pre-embedded prefix rows (from the alignment stage),
//! supports greedy and seeded temperature decoding, and trains with plain
//! gradient descent on token cross-entropy.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    kernels, multi_head_attention, AttentionParamIds, AttentionParams, AttnMask, GradTape,
    NumericsError, Tensor, TensorId,
};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("sequence length {len} exceeds the configured maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("empty target")]
    EmptyTarget,
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub const EOS: usize = 0;
pub const TS_OPEN: usize = 1;
pub const TS_CLOSE: usize = 2;
pub const THINK_OPEN: usize = 3;
pub const THINK_CLOSE: usize = 4;
pub const ANSWER_OPEN: usize = 5;
pub const ANSWER_CLOSE: usize = 6;
pub const BOXED_OPEN: usize = 7;
pub const BOXED_CLOSE: usize = 8;
pub const UNK: usize = 9;

/// Reserved symbols, in id order. Ids 0..10 never move across runs.
pub const RESERVED: [&str; 10] = [
    "<eos>", "<ts>", "<ts/>", "<think>", "</think>", "<answer>", "</answer>", "\\boxed{", "}",
    "<unk>",
];

/// Word-level vocabulary: reserved markers first, then caller-supplied
/// lowercase words in the order given.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Vocab {
    pub fn with_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !tokens.iter().any(|t| *t == w) {
                tokens.push(w);
            }
        }
        let mut v = Vocab { tokens, index: HashMap::new() };
        v.rebuild_index();
        v
    }

    /// Restores the symbol index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Tokenizes text: reserved markers match literally (even without
    /// surrounding spaces), everything else splits on whitespace and the
    /// marker boundary characters, lowercased; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        // Longest-first so "</think>" wins over "<think>" prefixes etc.
        let mut markers: Vec<(usize, &str)> =
            RESERVED.iter().enumerate().map(|(i, s)| (i, *s)).collect();
        markers.sort_by_key(|(_, s)| std::cmp::Reverse(s.len()));
        let mut out = Vec::new();
        let mut rest = text;
        'scan: while !rest.is_empty() {
            rest = rest.trim_start();
            if rest.is_empty() {
                break;
            }
            for &(id, sym) in &markers {
                if rest.starts_with(sym) {
                    out.push(id);
                    rest = &rest[sym.len()..];
                    continue 'scan;
                }
            }
            let end = rest
                .find(|c: char| c.is_whitespace() || c == '<' || c == '}' || c == '\\')
                .unwrap_or(rest.len())
                .max(1);
            // `end` can only land mid-char for the boundary chars above, all
            // single-byte, so the split is safe.
            let (word, tail) = rest.split_at(end);
            out.push(self.id(&word.to_lowercase()).unwrap_or(UNK));
            rest = tail;
        }
        out
    }

    /// Renders ids back to text, space-separated, stopping before `<eos>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> =
            ids.iter().take_while(|&&i| i != EOS).map(|&i| self.symbol(i)).collect();
        words.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub max_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { dim: 64, heads: 4, blocks: 2, ffn_hidden: 128, max_len: 160 }
    }
}

const LN_EPS: f64 = 1e-5;

/// One pre-norm decoder block: `x += attn(ln1(x)); x += ffn(ln2(x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderBlock {
    pub attn: AttentionParams,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl DecoderBlock {
    fn seeded<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let h = cfg.ffn_hidden;
        let ones = Tensor::new(vec![1, d], vec![1.0; d]).unwrap();
        DecoderBlock {
            attn: AttentionParams::seeded(d, rng),
            ln1_gamma: ones.clone(),
            ln1_beta: Tensor::zeros(vec![1, d]),
            ln2_gamma: ones,
            ln2_beta: Tensor::zeros(vec![1, d]),
            w1: Tensor::uniform(vec![d, h], 1.0 / (d as f64).sqrt(), rng),
            b1: Tensor::zeros(vec![1, h]),
            w2: Tensor::uniform(vec![h, d], 1.0 / (h as f64).sqrt(), rng),
            b2: Tensor::zeros(vec![1, d]),
        }
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.attn.tensors().to_vec();
        out.extend([
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w1,
            &self.b1,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w2,
            &self.b2,
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::from(self.attn.tensors_mut());
        out.extend([
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w2,
            &mut self.b2,
        ]);
        out
    }
}

/// Full policy parameter set. `version` increases strictly on every update,
/// distinguishing a live policy from the frozen snapshot it was cloned from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub cfg: BackboneConfig,
    pub vocab_size: usize,
    pub embed: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<DecoderBlock>,
    pub ln_f_gamma: Tensor,
    pub ln_f_beta: Tensor,
    pub w_out: Tensor,
    pub version: u64,
}

impl PolicyParams {
    pub fn seeded<R: Rng>(vocab_size: usize, cfg: BackboneConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let limit = 1.0 / (d as f64).sqrt();
        PolicyParams {
            cfg,
            vocab_size,
            embed: Tensor::uniform(vec![vocab_size, d], limit, rng),
            pos: Tensor::zeros(vec![cfg.max_len, d]),
            blocks: (0..cfg.blocks).map(|_| DecoderBlock::seeded(&cfg, rng)).collect(),
            ln_f_gamma: Tensor::new(vec![1, d], vec![1.0; d]).unwrap(),
            ln_f_beta: Tensor::zeros(vec![1, d]),
            w_out: Tensor::uniform(vec![d, vocab_size], limit, rng),
            version: 0,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed, &self.pos];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.extend([&self.ln_f_gamma, &self.ln_f_beta, &self.w_out]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embed, &mut self.pos];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([&mut self.ln_f_gamma, &mut self.ln_f_beta, &mut self.w_out]);
        out
    }
}

/// Tape handles for one recording of the policy parameters. `all()` matches
/// the order of `PolicyParams::tensors_mut`.
#[derive(Debug, Clone)]
pub struct PolicyIds {
    pub embed: TensorId,
    pub pos: TensorId,
    pub blocks: Vec<BlockIds>,
    pub ln_f_gamma: TensorId,
    pub ln_f_beta: TensorId,
    pub w_out: TensorId,
}

#[derive(Debug, Clone)]
pub struct BlockIds {
    pub attn: AttentionParamIds,
    pub ln1_gamma: TensorId,
    pub ln1_beta: TensorId,
    pub ln2_gamma: TensorId,
    pub ln2_beta: TensorId,
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

impl PolicyIds {
    pub fn record(tape: &mut GradTape, params: &PolicyParams, trainable: bool) -> Self {
        fn put(tape: &mut GradTape, t: &Tensor, trainable: bool) -> TensorId {
            let mut t = t.clone();
            t.set_requires_grad(trainable);
            tape.leaf(t)
        }
        let embed = put(tape, &params.embed, trainable);
        let pos = put(tape, &params.pos, trainable);
        let mut blocks = Vec::with_capacity(params.blocks.len());
        for b in &params.blocks {
            let attn = AttentionParamIds::record(tape, &b.attn, trainable);
            blocks.push(BlockIds {
                attn,
                ln1_gamma: put(tape, &b.ln1_gamma, trainable),
                ln1_beta: put(tape, &b.ln1_beta, trainable),
                ln2_gamma: put(tape, &b.ln2_gamma, trainable),
                ln2_beta: put(tape, &b.ln2_beta, trainable),
                w1: put(tape, &b.w1, trainable),
                b1: put(tape, &b.b1, trainable),
                w2: put(tape, &b.w2, trainable),
                b2: put(tape, &b.b2, trainable),
            });
        }
        PolicyIds {
            embed,
            pos,
            blocks,
            ln_f_gamma: put(tape, &params.ln_f_gamma, trainable),
            ln_f_beta: put(tape, &params.ln_f_beta, trainable),
            w_out: put(tape, &params.w_out, trainable),
        }
    }

    /// All parameter ids in `PolicyParams::tensors_mut` order.
    pub fn all(&self) -> Vec<TensorId> {
        let mut out = vec![self.embed, self.pos];
        for b in &self.blocks {
            out.extend([b.attn.wq, b.attn.wk, b.attn.wv, b.attn.wo]);
            out.extend([b.ln1_gamma, b.ln1_beta, b.w1, b.b1, b.ln2_gamma, b.ln2_beta, b.w2, b.b2]);
        }
        out.extend([self.ln_f_gamma, self.ln_f_beta, self.w_out]);
        out
    }
}

/// Model input: plain token ids, pre-embedded rows, or embedded rows followed
/// by token ids. Embedded rows pass through without re-embedding; positional
/// offsets apply to every row either way.
#[derive(Debug, Clone, Copy)]
pub enum SeqSource<'a> {
    Tokens(&'a [usize]),
    Rows(TensorId),
    RowsThenTokens(TensorId, &'a [usize]),
}

impl SeqSource<'_> {
    fn len(&self, tape: &GradTape) -> usize {
        match self {
            SeqSource::Tokens(t) => t.len(),
            SeqSource::Rows(r) => tape.value(*r).rows(),
            SeqSource::RowsThenTokens(r, t) => tape.value(*r).rows() + t.len(),
        }
    }
}

/// Causal next-token logits, one row per input position.
pub fn forward(
    tape: &mut GradTape,
    ids: &PolicyIds,
    cfg: &BackboneConfig,
    source: SeqSource,
) -> Result<TensorId, BackboneError> {
    let len = source.len(tape);
    if len == 0 {
        return Err(BackboneError::EmptySequence);
    }
    if len > cfg.max_len {
        return Err(BackboneError::TooLong { len, max: cfg.max_len });
    }
    let rows = match source {
        SeqSource::Tokens(toks) => tape.embedding(ids.embed, toks)?,
        SeqSource::Rows(r) => r,
        SeqSource::RowsThenTokens(r, toks) => {
            if toks.is_empty() {
                r
            } else {
                let tail = tape.embedding(ids.embed, toks)?;
                tape.concat_rows(&[r, tail])?
            }
        }
    };
    let pos = tape.slice_rows(ids.pos, 0, len)?;
    let mut x = tape.add(rows, pos)?;
    for b in &ids.blocks {
        let normed = tape.layer_norm(x, b.ln1_gamma, b.ln1_beta, LN_EPS)?;
        let attended = multi_head_attention(
            tape,
            normed,
            normed,
            normed,
            cfg.heads,
            &b.attn,
            AttnMask::Causal,
        )?;
        x = tape.add(x, attended)?;
        let normed2 = tape.layer_norm(x, b.ln2_gamma, b.ln2_beta, LN_EPS)?;
        let h = tape.matmul(normed2, b.w1)?;
        let h = tape.add_row(h, b.b1)?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, b.w2)?;
        let h = tape.add_row(h, b.b2)?;
        x = tape.add(x, h)?;
    }
    let x = tape.layer_norm(x, ids.ln_f_gamma, ids.ln_f_beta, LN_EPS)?;
    Ok(tape.matmul(x, ids.w_out)?)
}

/// Owned prompt for generation: token ids, optionally preceded by embedded
/// rows produced by the alignment stage.
#[derive(Debug, Clone)]
pub enum Prompt {
    Tokens(Vec<usize>),
    Embedded { rows: Tensor, tail: Vec<usize> },
}

impl Prompt {
    pub fn len(&self) -> usize {
        match self {
            Prompt::Tokens(t) => t.len(),
            Prompt::Embedded { rows, tail } => rows.rows() + tail.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Temperature(f64),
}

/// Sampled or argmaxed continuation plus the log-probability of each chosen
/// token under the untempered policy (softmax of raw logits).
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub tokens: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub hit_eos: bool,
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let mut probs = vec![0.0; row.len()];
    kernels::softmax_slice(row, &mut probs);
    probs[idx].ln()
}

fn argmax_lowest_id(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_tempered<R: Rng>(row: &[f64], t: f64, rng: &mut R) -> usize {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row.iter().map(|&x| ((x - max) / t).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        r -= w;
        if r <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Autoregressive decoding with frozen parameters. Greedy mode is a pure
/// function of (prompt, params); temperature mode is a pure function of
/// (prompt, params, seed). Stops at `<eos>`, `max_new` tokens, or the
/// model's maximum sequence length.
pub fn generate(
    params: &PolicyParams,
    prompt: &Prompt,
    mode: DecodeMode,
    max_new: usize,
    seed: u64,
) -> Result<Generated, BackboneError> {
    if max_new == 0 {
        return Err(BackboneError::Invalid { what: "max_new", detail: "must be >= 1".into() });
    }
    if let DecodeMode::Temperature(t) = mode {
        if !(t > 0.0) {
            return Err(BackboneError::Invalid {
                what: "temperature",
                detail: format!("{t} is not positive"),
            });
        }
    }
    if prompt.is_empty() {
        return Err(BackboneError::EmptySequence);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tail: Vec<usize> = match prompt {
        Prompt::Tokens(t) => t.clone(),
        Prompt::Embedded { tail, .. } => tail.clone(),
    };
    let prefix_rows = match prompt {
        Prompt::Tokens(_) => None,
        Prompt::Embedded { rows, .. } => Some(rows.clone()),
    };
    let mut out = Generated { tokens: Vec::new(), logprobs: Vec::new(), hit_eos: false };
    for _ in 0..max_new {
        let len = prefix_rows.as_ref().map_or(0, |r| r.rows()) + tail.len();
        if len >= params.cfg.max_len {
            break;
        }
        let mut tape = GradTape::new();
        let ids = PolicyIds::record(&mut tape, params, false);
        let source = match &prefix_rows {
            Some(rows) => {
                let r = tape.constant(rows.clone());
                SeqSource::RowsThenTokens(r, &tail)
            }
            None => SeqSource::Tokens(&tail),
        };
        let logits = forward(&mut tape, &ids, &params.cfg, source)?;
        let lv = tape.value(logits);
        let row = lv.row(lv.rows() - 1);
        let next = match mode {
            DecodeMode::Greedy => argmax_lowest_id(row),
            DecodeMode::Temperature(t) => sample_tempered(row, t, &mut rng),
        };
        out.tokens.push(next);
        out.logprobs.push(log_softmax_at(row, next));
        tail.push(next);
        if next == EOS {
            out.hit_eos = true;
            break;
        }
    }
    Ok(out)
}

/// Log-probabilities of `generated` tokens following `prompt`, recomputed
/// from a single full forward pass. Matches `generate`'s stored values.
pub fn sequence_logprobs(
    params: &PolicyParams,
    prompt: &Prompt,
    generated: &[usize],
) -> Result<Vec<f64>, BackboneError> {
    if generated.is_empty() {
        return Err(BackboneError::EmptyTarget);
    }
    let mut tape = GradTape::new();
    let ids = PolicyIds::record(&mut tape, params, false);
    let mut tail: Vec<usize> = match prompt {
        Prompt::Tokens(t) => t.clone(),
        Prompt::Embedded { tail, .. } => tail.clone(),
    };
    tail.extend_from_slice(generated);
    let source = match prompt {
        Prompt::Tokens(_) => SeqSource::Tokens(&tail),
        Prompt::Embedded { rows, .. } => {
            let r = tape.constant(rows.clone());
            SeqSource::RowsThenTokens(r, &tail)
        }
    };
    let logits = forward(&mut tape, &ids, &params.cfg, source)?;
    let lv = tape.value(logits);
    let start = prompt.len() - 1;
    Ok(generated
        .iter()
        .enumerate()
        .map(|(j, &tok)| log_softmax_at(lv.row(start + j), tok))
        .collect())
}

/// Mean cross-entropy over the target positions only: logits row
/// `prefix_len-1+j` scores target `j`. Prompt positions contribute nothing.
pub fn sft_loss_on_tape(
    tape: &mut GradTape,
    ids: &PolicyIds,
    cfg: &BackboneConfig,
    prefix: SeqSource,
    targets: &[usize],
) -> Result<TensorId, BackboneError> {
    if targets.is_empty() {
        return Err(BackboneError::EmptyTarget);
    }
    let prefix_len = prefix.len(tape);
    if prefix_len == 0 {
        return Err(BackboneError::EmptySequence);
    }
    let source = match prefix {
        SeqSource::Tokens(toks) => {
            let mut full = toks.to_vec();
            full.extend_from_slice(targets);
            let rows = tape.embedding(ids.embed, &full)?;
            SeqSource::Rows(rows)
        }
        SeqSource::Rows(r) => SeqSource::RowsThenTokens(r, targets),
        SeqSource::RowsThenTokens(r, toks) => {
            let mut full = toks.to_vec();
            full.extend_from_slice(targets);
            let tail = tape.embedding(ids.embed, &full)?;
            let joined = tape.concat_rows(&[r, tail])?;
            SeqSource::Rows(joined)
        }
    };
    let logits = forward(tape, ids, cfg, source)?;
    let scored = tape.slice_rows(logits, prefix_len - 1, prefix_len - 1 + targets.len())?;
    let pairs: Vec<(usize, usize)> = targets.iter().copied().enumerate().collect();
    Ok(tape.cross_entropy(scored, &pairs)?)
}

/// One (prompt, answer) pair for supervised fine-tuning.
#[derive(Debug, Clone)]
pub struct SftExample {
    pub prompt: Prompt,
    pub targets: Vec<usize>,
}

/// One gradient-descent step on the mean loss over the batch; returns the
/// pre-update loss. Bumps the parameter version.
pub fn sft_step(
    params: &mut PolicyParams,
    batch: &[SftExample],
    lr: f64,
) -> Result<f64, BackboneError> {
    if batch.is_empty() {
        return Err(BackboneError::EmptyTarget);
    }
    let mut tape = GradTape::new();
    let ids = PolicyIds::record(&mut tape, params, true);
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let source = match &ex.prompt {
            Prompt::Tokens(t) => SeqSource::Tokens(t.as_slice()),
            Prompt::Embedded { rows, tail } => {
                let r = tape.constant(rows.clone());
                if tail.is_empty() {
                    SeqSource::Rows(r)
                } else {
                    SeqSource::RowsThenTokens(r, tail)
                }
            }
        };
        losses.push(sft_loss_on_tape(&mut tape, &ids, &params.cfg, source, &ex.targets)?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let mean = tape.scale(total, 1.0 / batch.len() as f64)?;
    let loss = tape.value(mean).data()[0];
    tape.backward(mean)?;
    apply_gradient_step(params, &tape, &ids, lr)?;
    Ok(loss)
}

/// `p -= lr * grad` over every parameter tensor; bumps the version counter.
pub fn apply_gradient_step(
    params: &mut PolicyParams,
    tape: &GradTape,
    ids: &PolicyIds,
    lr: f64,
) -> Result<(), BackboneError> {
    let id_order = ids.all();
    let mut tensors = params.tensors_mut();
    debug_assert_eq!(id_order.len(), tensors.len());
    for (id, tensor) in id_order.iter().zip(tensors.iter_mut()) {
        let grad = tape.grad(*id).ok_or(BackboneError::Invalid {
            what: "gradient",
            detail: "missing gradient for a trainable parameter".into(),
        })?;
        for (p, g) in tensor.data_mut().iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }
    params.version += 1;
    Ok(())
}
