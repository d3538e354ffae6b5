use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GradTape, NumericsError, Tensor, TensorId};

/// Projection weights for one attention block, each `d x d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl AttentionParams {
    pub fn seeded<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let limit = 1.0 / (dim as f64).sqrt();
        AttentionParams {
            wq: Tensor::uniform(vec![dim, dim], limit, rng),
            wk: Tensor::uniform(vec![dim, dim], limit, rng),
            wv: Tensor::uniform(vec![dim, dim], limit, rng),
            wo: Tensor::uniform(vec![dim, dim], limit, rng),
        }
    }

    /// Identity projections; attention then mixes raw value rows directly.
    pub fn identity(dim: usize) -> Self {
        let mut eye = Tensor::zeros(vec![dim, dim]);
        for i in 0..dim {
            eye.data_mut()[i * dim + i] = 1.0;
        }
        AttentionParams { wq: eye.clone(), wk: eye.clone(), wv: eye.clone(), wo: eye }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }
}

/// Tape handles for one attention block's projections.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParamIds {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
}

impl AttentionParamIds {
    pub fn record(tape: &mut GradTape, params: &AttentionParams, trainable: bool) -> Self {
        let mut put = |t: &Tensor| {
            let mut t = t.clone();
            t.set_requires_grad(trainable);
            tape.leaf(t)
        };
        AttentionParamIds {
            wq: put(&params.wq),
            wk: put(&params.wk),
            wv: put(&params.wv),
            wo: put(&params.wo),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    None,
    Causal,
}

/// Multi-head attention: per-head Q/K/V projections of width `d / heads`,
/// scores scaled by `1/sqrt(head_dim)`, softmax over keys, heads concatenated
/// and passed through the output projection.
pub fn multi_head_attention(
    tape: &mut GradTape,
    query: TensorId,
    key: TensorId,
    value: TensorId,
    heads: usize,
    params: &AttentionParamIds,
    mask: AttnMask,
) -> Result<TensorId, NumericsError> {
    let d = tape.value(query).cols();
    if heads == 0 || d % heads != 0 {
        return Err(NumericsError::InvalidArgument {
            op: "multi_head_attention",
            detail: format!("{heads} heads do not divide dim {d}"),
        });
    }
    if tape.value(key).cols() != d || tape.value(value).cols() != d {
        return Err(NumericsError::ShapeMismatch {
            op: "multi_head_attention",
            detail: format!(
                "query {:?}, key {:?}, value {:?}",
                tape.value(query).shape(),
                tape.value(key).shape(),
                tape.value(value).shape()
            ),
        });
    }
    if tape.value(key).rows() != tape.value(value).rows() {
        return Err(NumericsError::ShapeMismatch {
            op: "multi_head_attention",
            detail: "key/value row counts differ".into(),
        });
    }
    if mask == AttnMask::Causal && tape.value(query).rows() != tape.value(key).rows() {
        return Err(NumericsError::InvalidArgument {
            op: "multi_head_attention",
            detail: "causal mask requires square attention".into(),
        });
    }
    let head_dim = d / heads;
    let q = tape.matmul(query, params.wq)?;
    let k = tape.matmul(key, params.wk)?;
    let v = tape.matmul(value, params.wv)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale)?;
        let weights = match mask {
            AttnMask::None => tape.softmax(scaled, 1)?,
            AttnMask::Causal => tape.causal_softmax(scaled)?,
        };
        head_outs.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&head_outs)?;
    tape.matmul(merged, params.wo)
}
