//! The full model: vocabulary, series embedding, alignment parameters, and
//! the decoder backbone, with a versioned JSON checkpoint format and the
//! align-then-decode glue used by training and evaluation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{
    align, AlignError, AlignOutcome, AlignmentMode, AlignmentParamIds, AlignmentParams,
};
use crate::backbone::{
    generate, sft_loss_on_tape, BackboneConfig, BackboneError, DecodeMode, Generated, PolicyIds,
    PolicyParams, Prompt, SeqSource, Vocab, TS_CLOSE, TS_OPEN,
};
use crate::numerics::GradTape;
use crate::ts_pipeline::{PipelineConfig, TimeSeriesSet, TsEmbedIds, TsEmbedParams};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("checkpoint format version {found}, this build reads {want}")]
    Version { found: u32, want: u32 },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Encoding(#[from] serde_json::Error),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

/// Everything a run needs to reproduce the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub vocab: Vocab,
    pub pipeline: PipelineConfig,
    pub ts_embed: TsEmbedParams,
    pub alignment: AlignmentParams,
    pub backbone: PolicyParams,
    pub align_mode: AlignmentMode,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    model: ModelParams,
}

impl ModelParams {
    /// Fresh seeded model. The alignment stage and the backbone share the
    /// embedding width, so `pipeline.dim` must equal `backbone.dim`.
    #[allow(clippy::too_many_arguments)]
    pub fn seeded(
        vocab: Vocab,
        backbone_cfg: BackboneConfig,
        pipeline: PipelineConfig,
        align_tokens: usize,
        align_heads: usize,
        share_projections: bool,
        align_mode: AlignmentMode,
        max_patches: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if pipeline.dim != backbone_cfg.dim {
            return Err(ModelError::DimensionMismatch(format!(
                "pipeline dim {} vs backbone dim {}",
                pipeline.dim, backbone_cfg.dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ts_embed = TsEmbedParams::seeded(pipeline.patch_len, pipeline.dim, max_patches, &mut rng);
        let alignment = AlignmentParams::seeded(
            align_tokens,
            pipeline.dim,
            align_heads,
            share_projections,
            &mut rng,
        );
        let backbone = PolicyParams::seeded(vocab.len(), backbone_cfg, &mut rng);
        Ok(ModelParams { vocab, pipeline, ts_embed, alignment, backbone, align_mode })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let ck = Checkpoint { format_version: CHECKPOINT_VERSION, model: self.clone() };
        let text = serde_json::to_string(&ck)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(ModelError::Version { found: ck.format_version, want: CHECKPOINT_VERSION });
        }
        let mut model = ck.model;
        model.vocab.rebuild_index();
        Ok(model)
    }
}

/// Tape handles for every trainable tensor in the model, recorded together
/// so one backward pass reaches all of them.
#[derive(Debug, Clone)]
pub struct ModelIds {
    pub policy: PolicyIds,
    pub ts_embed: TsEmbedIds,
    pub align: AlignmentParamIds,
}

impl ModelIds {
    pub fn record(tape: &mut GradTape, model: &ModelParams, trainable: bool) -> Self {
        ModelIds {
            policy: PolicyIds::record(tape, &model.backbone, trainable),
            ts_embed: TsEmbedIds::record(tape, &model.ts_embed, trainable),
            align: AlignmentParamIds::record(tape, &model.alignment, trainable),
        }
    }

    /// All parameter ids, ordered to match `model_tensors_mut`.
    pub fn all(&self) -> Vec<crate::numerics::TensorId> {
        let mut out = self.policy.all();
        out.extend([self.ts_embed.w, self.ts_embed.pos]);
        out.extend(self.align.bank);
        for a in &self.align.extract {
            out.extend([a.wq, a.wk, a.wv, a.wo]);
        }
        for a in &self.align.interact {
            out.extend([a.wq, a.wk, a.wv, a.wo]);
        }
        out
    }
}

/// Mutable references to every model tensor, in `ModelIds::all` order.
pub fn model_tensors_mut(model: &mut ModelParams) -> Vec<&mut crate::numerics::Tensor> {
    let mut out = model.backbone.tensors_mut();
    out.extend(model.ts_embed.tensors_mut());
    out.extend(model.alignment.tensors_mut());
    out
}

/// Runs the alignment stage for one (question, series) pair on `tape`,
/// using the backbone's embedding table for text.
pub fn align_on_tape(
    tape: &mut GradTape,
    ids: &ModelIds,
    model: &ModelParams,
    question: &[usize],
    ts: &TimeSeriesSet,
) -> Result<AlignOutcome, AlignError> {
    align(
        tape,
        question,
        ts,
        ids.policy.embed,
        &ids.ts_embed,
        &ids.align,
        &model.pipeline,
        model.align_mode,
        (TS_OPEN, TS_CLOSE),
    )
}

/// Builds the generation prompt for a sample: aligned embedding rows, frozen
/// off-tape.
pub fn prompt_for(
    model: &ModelParams,
    question: &[usize],
    ts: &TimeSeriesSet,
) -> Result<Prompt, ModelError> {
    let mut tape = GradTape::new();
    let ids = ModelIds::record(&mut tape, model, false);
    let out = align_on_tape(&mut tape, &ids, model, question, ts)?;
    Ok(Prompt::Embedded { rows: tape.value(out.seq.embeddings).clone(), tail: Vec::new() })
}

/// Align + decode for one sample.
pub fn respond(
    model: &ModelParams,
    question: &[usize],
    ts: &TimeSeriesSet,
    mode: DecodeMode,
    max_new: usize,
    seed: u64,
) -> Result<Generated, ModelError> {
    let prompt = prompt_for(model, question, ts)?;
    Ok(generate(&model.backbone, &prompt, mode, max_new, seed)?)
}

/// One supervised example: question token ids, its series, and the target
/// token ids to score.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub question: Vec<usize>,
    pub ts: TimeSeriesSet,
    pub targets: Vec<usize>,
}

/// One joint supervised update: the alignment stage and the backbone sit on
/// the same tape, so a single backward pass trains both. Returns the mean
/// batch loss before the update.
pub fn sft_model_step(
    model: &mut ModelParams,
    batch: &[TrainSample],
    lr: f64,
) -> Result<f64, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::Backbone(BackboneError::EmptyTarget));
    }
    let mut tape = GradTape::new();
    let ids = ModelIds::record(&mut tape, model, true);
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let out = align_on_tape(&mut tape, &ids, model, &ex.question, &ex.ts)?;
        losses.push(sft_loss_on_tape(
            &mut tape,
            &ids.policy,
            &model.backbone.cfg,
            SeqSource::Rows(out.seq.embeddings),
            &ex.targets,
        )?);
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l).map_err(BackboneError::from)?;
    }
    let mean = tape.scale(total, 1.0 / batch.len() as f64).map_err(BackboneError::from)?;
    let loss = tape.value(mean).data()[0];
    tape.backward(mean).map_err(BackboneError::from)?;
    let id_order = ids.all();
    let mut tensors = model_tensors_mut(model);
    debug_assert_eq!(id_order.len(), tensors.len());
    for (id, tensor) in id_order.iter().zip(tensors.iter_mut()) {
        let grad = tape.grad(*id).expect("trainable leaf has gradient");
        for (p, g) in tensor.data_mut().iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }
    model.backbone.version += 1;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::EOS;

    fn tiny_model(seed: u64) -> ModelParams {
        let vocab = Vocab::with_words(["up", "down", "flat", "cycle", "a", "b", "c", "d"]);
        let backbone_cfg =
            BackboneConfig { dim: 16, heads: 2, blocks: 2, ffn_hidden: 32, max_len: 64 };
        let pipeline = PipelineConfig { patch_len: 4, window: 3, dim: 16 };
        ModelParams::seeded(
            vocab,
            backbone_cfg,
            pipeline,
            2,
            2,
            false,
            AlignmentMode::ThreePattern,
            16,
            seed,
        )
        .unwrap()
    }

    fn sample_question(model: &ModelParams) -> Vec<usize> {
        model.vocab.encode("up down <ts><ts/> cycle")
    }

    fn sample_series() -> TimeSeriesSet {
        TimeSeriesSet::new(vec![vec![0.0, 0.5, 1.2, 0.7, 1.9, 2.4, 1.8, 3.0]]).unwrap()
    }

    #[test]
    fn seeded_model_rejects_dim_mismatch() {
        let vocab = Vocab::with_words(["x"]);
        let backbone_cfg = BackboneConfig { dim: 16, ..BackboneConfig::default() };
        let pipeline = PipelineConfig { patch_len: 4, window: 3, dim: 8 };
        assert!(matches!(
            ModelParams::seeded(
                vocab,
                backbone_cfg,
                pipeline,
                2,
                2,
                false,
                AlignmentMode::ThreePattern,
                8,
                0,
            ),
            Err(ModelError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn prompt_has_spliced_length() {
        let model = tiny_model(1);
        let q = sample_question(&model);
        let ts = sample_series();
        let prompt = prompt_for(&model, &q, &ts).unwrap();
        // L=5 tokens, M=1, N=2 patches (8 points / patch_len 4): 5 + 2 - 2.
        assert_eq!(prompt.len(), q.len() + 2 - 2);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = tiny_model(2);
        model.save(&path).unwrap();
        let loaded = ModelParams::load(&path).unwrap();
        assert_eq!(model, loaded);

        let q = sample_question(&model);
        let ts = sample_series();
        let a = respond(&model, &q, &ts, DecodeMode::Greedy, 12, 0).unwrap();
        let b = respond(&loaded, &q, &ts, DecodeMode::Greedy, 12, 0).unwrap();
        assert_eq!(a, b);
        // The reloaded vocab index still resolves symbols.
        assert_eq!(loaded.vocab.id("<eos>"), Some(EOS));
    }

    #[test]
    fn checkpoint_version_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = tiny_model(3);
        let ck = Checkpoint { format_version: 99, model };
        std::fs::write(&path, serde_json::to_string(&ck).unwrap()).unwrap();
        assert!(matches!(ModelParams::load(&path), Err(ModelError::Version { found: 99, .. })));
    }

    #[test]
    fn respond_is_deterministic_in_greedy_mode() {
        let model = tiny_model(4);
        let q = sample_question(&model);
        let ts = sample_series();
        let a = respond(&model, &q, &ts, DecodeMode::Greedy, 10, 0).unwrap();
        let b = respond(&model, &q, &ts, DecodeMode::Greedy, 10, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_ids_cover_all_tensor_slots() {
        let mut model = tiny_model(5);
        let mut tape = GradTape::new();
        let ids = ModelIds::record(&mut tape, &model, false);
        let order = ids.all();
        let tensors = model_tensors_mut(&mut model);
        assert_eq!(order.len(), tensors.len());
        for (id, t) in order.iter().zip(tensors) {
            assert_eq!(tape.value(*id).shape(), t.shape());
        }
    }
}
