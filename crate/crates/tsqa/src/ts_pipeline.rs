//! Series-side pipeline: instance normalization, right-padding and patching,
//! linear patch embedding with per-position offsets, and moving-average
//! latent decomposition into trend and seasonal components.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{GradTape, NumericsError, Tensor, TensorId};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("time series set must contain at least one non-empty series")]
    EmptySeries,
    #[error("invalid patch length {0}")]
    BadPatchLength(usize),
    #[error("position table holds {have} rows but {need} patches per series are required")]
    PositionTableTooSmall { have: usize, need: usize },
    #[error("series set carries no normalization statistics")]
    MissingStats,
    #[error("degenerate projection: {0}")]
    DegenerateProjection(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// A bundle of M series; lengths may differ. Normalization statistics are
/// attached once `instance_normalize` has run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSet {
    series: Vec<Vec<f64>>,
    stats: Option<Vec<NormStats>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl TimeSeriesSet {
    pub fn new(series: Vec<Vec<f64>>) -> Result<Self, PipelineError> {
        if series.is_empty() || series.iter().any(|s| s.is_empty()) {
            return Err(PipelineError::EmptySeries);
        }
        Ok(TimeSeriesSet { series, stats: None })
    }

    pub fn series(&self) -> &[Vec<f64>] {
        &self.series
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn stats(&self) -> Option<&[NormStats]> {
        self.stats.as_deref()
    }

    pub fn max_len(&self) -> usize {
        self.series.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Centers and scales each series by its own mean and population standard
/// deviation. A constant series divides by 1 and records std = 1.
pub fn instance_normalize(ts: &TimeSeriesSet) -> TimeSeriesSet {
    let mut out = Vec::with_capacity(ts.series.len());
    let mut stats = Vec::with_capacity(ts.series.len());
    for s in &ts.series {
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let var = s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = if var.sqrt() > 0.0 { var.sqrt() } else { 1.0 };
        out.push(s.iter().map(|x| (x - mean) / std).collect());
        stats.push(NormStats { mean, std });
    }
    TimeSeriesSet { series: out, stats: Some(stats) }
}

/// Inverts `instance_normalize` using the stored statistics.
pub fn denormalize(ts: &TimeSeriesSet) -> Result<TimeSeriesSet, PipelineError> {
    let stats = ts.stats.as_ref().ok_or(PipelineError::MissingStats)?;
    let series = ts
        .series
        .iter()
        .zip(stats)
        .map(|(s, st)| s.iter().map(|x| x * st.std + st.mean).collect())
        .collect();
    Ok(TimeSeriesSet { series, stats: None })
}

/// M x N grid of length-P windows over right-padded series. Rows are ordered
/// series-major, then patch index.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    rows: Vec<f64>,
    patch_len: usize,
    series_count: usize,
    patches_per_series: usize,
    pad_len: Vec<usize>,
}

impl PatchGrid {
    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    pub fn series_count(&self) -> usize {
        self.series_count
    }

    pub fn patches_per_series(&self) -> usize {
        self.patches_per_series
    }

    pub fn pad_len(&self) -> &[usize] {
        &self.pad_len
    }

    pub fn padded_len(&self) -> usize {
        self.patches_per_series * self.patch_len
    }

    /// One patch as a slice: series `m`, patch index `n`.
    pub fn patch(&self, m: usize, n: usize) -> &[f64] {
        let p = self.patch_len;
        let idx = m * self.patches_per_series + n;
        &self.rows[idx * p..(idx + 1) * p]
    }

    pub fn row_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.series_count * self.patches_per_series, self.patch_len],
            self.rows.clone(),
        )
        .expect("grid data is finite")
    }
}

/// Right-pads every series with its last observed value to the smallest
/// common multiple of `patch_len`, then cuts non-overlapping windows.
pub fn pad_and_patch(ts: &TimeSeriesSet, patch_len: usize) -> Result<PatchGrid, PipelineError> {
    if patch_len == 0 {
        return Err(PipelineError::BadPatchLength(patch_len));
    }
    if ts.is_empty() {
        return Err(PipelineError::EmptySeries);
    }
    let max_len = ts.max_len();
    let padded = max_len.div_ceil(patch_len) * patch_len;
    let n = padded / patch_len;
    let m = ts.len();
    let mut rows = Vec::with_capacity(m * padded);
    let mut pad_len = Vec::with_capacity(m);
    for s in &ts.series {
        let last = *s.last().expect("series non-empty");
        pad_len.push(padded - s.len());
        rows.extend_from_slice(s);
        rows.extend(std::iter::repeat(last).take(padded - s.len()));
    }
    Ok(PatchGrid {
        rows,
        patch_len,
        series_count: m,
        patches_per_series: n,
        pad_len,
    })
}

/// Learned patch embedding: a `P x d` linear map plus one learned offset row
/// per within-series patch position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsEmbedParams {
    pub w: Tensor,
    pub pos: Tensor,
}

impl TsEmbedParams {
    /// `w` gets scaled-uniform init; the per-position offsets start at zero
    /// so an untrained embedding is purely linear in the patch values.
    pub fn seeded<R: Rng>(patch_len: usize, dim: usize, max_patches: usize, rng: &mut R) -> Self {
        let limit = 1.0 / (patch_len as f64).sqrt();
        TsEmbedParams {
            w: Tensor::uniform(vec![patch_len, dim], limit, rng),
            pos: Tensor::zeros(vec![max_patches, dim]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 2] {
        [&self.w, &self.pos]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.w, &mut self.pos]
    }
}

/// Tape handles for the patch embedding parameters.
#[derive(Debug, Clone, Copy)]
pub struct TsEmbedIds {
    pub w: TensorId,
    pub pos: TensorId,
}

impl TsEmbedIds {
    pub fn record(tape: &mut GradTape, params: &TsEmbedParams, trainable: bool) -> Self {
        let mut put = |t: &Tensor| {
            let mut t = t.clone();
            t.set_requires_grad(trainable);
            tape.leaf(t)
        };
        TsEmbedIds { w: put(&params.w), pos: put(&params.pos) }
    }
}

/// Normalizes, pads, patches, and embeds a series set into `(M*N) x d` rows:
/// each window through the linear map plus its within-series position offset.
pub fn patch_and_embed(
    tape: &mut GradTape,
    ts: &TimeSeriesSet,
    patch_len: usize,
    embed: &TsEmbedIds,
) -> Result<(TensorId, PatchGrid), PipelineError> {
    let normalized = if ts.stats.is_some() { ts.clone() } else { instance_normalize(ts) };
    let grid = pad_and_patch(&normalized, patch_len)?;
    let n = grid.patches_per_series();
    let pos_rows = tape.value(embed.pos).rows();
    if n > pos_rows {
        return Err(PipelineError::PositionTableTooSmall { have: pos_rows, need: n });
    }
    let patches = tape.constant(grid.row_tensor());
    let projected = tape.matmul(patches, embed.w)?;
    let pos_slice = tape.slice_rows(embed.pos, 0, n)?;
    let tiled = tape.tile_rows(pos_slice, grid.series_count())?;
    let out = tape.add(projected, tiled)?;
    Ok((out, grid))
}

/// Trend, seasonal, and full views of the embedded patch rows, all
/// `(M*N) x d` on the same tape. `full = trend + seasonal` by construction.
#[derive(Debug, Clone, Copy)]
pub struct LatentComponents {
    pub full: TensorId,
    pub trend: TensorId,
    pub seasonal: TensorId,
    /// Effective pooling width after clamping to the block size.
    pub window: usize,
}

/// Splits embedded rows into trend (centered moving average along the patch
/// axis, per series block, replicate padding) and seasonal (residual).
/// `window` must be odd; widths above N clamp to the largest odd value <= N.
pub fn latent_decompose(
    tape: &mut GradTape,
    x_ts: TensorId,
    series_count: usize,
    window: usize,
) -> Result<LatentComponents, PipelineError> {
    let rows = tape.value(x_ts).rows();
    if series_count == 0 || rows % series_count != 0 {
        return Err(PipelineError::LengthMismatch(format!(
            "{rows} rows do not divide into {series_count} series blocks"
        )));
    }
    let block = rows / series_count;
    let mut eff = window;
    if eff > block {
        eff = if block % 2 == 1 { block } else { block - 1 };
    }
    let trend = tape.moving_average_rows(x_ts, block, eff)?;
    let seasonal = tape.sub(x_ts, trend)?;
    Ok(LatentComponents { full: x_ts, trend, seasonal, window: eff })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub patch_len: usize,
    pub window: usize,
    pub dim: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { patch_len: 8, window: 5, dim: 64 }
    }
}

/// Correlation report from `verify_decomposition`, plus enough context to
/// reproduce it. A correlation is `None` when the ground-truth signal is
/// flat, which leaves it undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub series_len: usize,
    pub padded_len: usize,
    pub patch_count: usize,
    pub patch_len: usize,
    pub window: usize,
    pub trend_corr: Option<f64>,
    pub seasonal_corr: Option<f64>,
}

fn fmt_corr(c: Option<f64>) -> String {
    match c {
        Some(v) => format!("{v:.6}"),
        None => "n/a".into(),
    }
}

impl DecompositionReport {
    pub fn to_text(&self) -> String {
        format!(
            "decomposition fidelity\n\
             ----------------------\n\
             series length   {}\n\
             padded length   {}\n\
             patches         {}\n\
             patch length    {}\n\
             pooling window  {}\n\
             |trend corr|    {}\n\
             |seasonal corr| {}\n",
            self.series_len,
            self.padded_len,
            self.patch_count,
            self.patch_len,
            self.window,
            fmt_corr(self.trend_corr),
            fmt_corr(self.seasonal_corr)
        )
    }

    pub fn to_kv(&self) -> String {
        format!(
            "series_len={}\npadded_len={}\npatch_count={}\npatch_len={}\nwindow={}\ntrend_corr={}\nseasonal_corr={}\n",
            self.series_len,
            self.padded_len,
            self.patch_count,
            self.patch_len,
            self.window,
            fmt_corr(self.trend_corr),
            fmt_corr(self.seasonal_corr)
        )
    }
}

/// Embeds one series with seeded parameters, decomposes it, projects the
/// latent trend and seasonal rows to one scalar per patch via the first
/// principal component, and reports absolute Pearson correlation against the
/// patch-averaged ground-truth signals.
pub fn verify_decomposition(
    series: &[f64],
    gt_trend: &[f64],
    gt_seasonal: &[f64],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<DecompositionReport, PipelineError> {
    if series.len() != gt_trend.len() || series.len() != gt_seasonal.len() {
        return Err(PipelineError::LengthMismatch(format!(
            "series {} vs ground truth {}/{}",
            series.len(),
            gt_trend.len(),
            gt_seasonal.len()
        )));
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ts = TimeSeriesSet::new(vec![series.to_vec()])?;
    let max_patches = series.len().div_ceil(cfg.patch_len);
    let params = TsEmbedParams::seeded(cfg.patch_len, cfg.dim, max_patches, &mut rng);

    let mut tape = GradTape::new();
    let ids = TsEmbedIds::record(&mut tape, &params, false);
    let (x_ts, grid) = patch_and_embed(&mut tape, &ts, cfg.patch_len, &ids)?;
    let parts = latent_decompose(&mut tape, x_ts, 1, cfg.window)?;

    let trend_proj = pca_project(tape.value(parts.trend))?;
    let seasonal_proj = pca_project(tape.value(parts.seasonal))?;
    let gt_trend_avg = patch_average(gt_trend, cfg.patch_len, grid.padded_len());
    let gt_seasonal_avg = patch_average(gt_seasonal, cfg.patch_len, grid.padded_len());

    // A flat ground-truth component leaves its correlation undefined; the
    // latent projection side was already checked for degeneracy above.
    let corr = |proj: &[f64], gt: &[f64]| -> Result<Option<f64>, PipelineError> {
        if has_variance(gt) {
            Ok(Some(pearson(proj, gt)?.abs()))
        } else {
            Ok(None)
        }
    };

    Ok(DecompositionReport {
        series_len: series.len(),
        padded_len: grid.padded_len(),
        patch_count: grid.patches_per_series(),
        patch_len: cfg.patch_len,
        window: parts.window,
        trend_corr: corr(&trend_proj, &gt_trend_avg)?,
        seasonal_corr: corr(&seasonal_proj, &gt_seasonal_avg)?,
    })
}

fn has_variance(xs: &[f64]) -> bool {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() > 0.0
}

/// Mean of each non-overlapping window after replicate-padding to
/// `padded_len`.
fn patch_average(signal: &[f64], patch_len: usize, padded_len: usize) -> Vec<f64> {
    let last = *signal.last().expect("non-empty signal");
    let padded: Vec<f64> = signal
        .iter()
        .copied()
        .chain(std::iter::repeat(last))
        .take(padded_len)
        .collect();
    padded.chunks(patch_len).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

/// Projects each row of a matrix onto the dominant eigenvector of the
/// column-centered covariance, found by power iteration from a fixed start.
pub fn pca_project(m: &Tensor) -> Result<Vec<f64>, PipelineError> {
    let (n, d) = (m.rows(), m.cols());
    let mut centered = m.data().to_vec();
    for j in 0..d {
        let mean: f64 = (0..n).map(|i| m.at(i, j)).sum::<f64>() / n as f64;
        for i in 0..n {
            centered[i * d + j] -= mean;
        }
    }
    // Fixed, slightly asymmetric start so the iteration cannot begin exactly
    // orthogonal to the dominant direction for generic inputs.
    let mut v: Vec<f64> = (0..d).map(|j| 1.0 + 0.001 * j as f64).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    for _ in 0..200 {
        let u: Vec<f64> = (0..n)
            .map(|i| (0..d).map(|j| centered[i * d + j] * v[j]).sum())
            .collect();
        let mut w = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                w[j] += centered[i * d + j] * u[i];
            }
        }
        let nrm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm < 1e-300 {
            return Err(PipelineError::DegenerateProjection(
                "component matrix has no variance".into(),
            ));
        }
        v = w.iter().map(|x| x / nrm).collect();
    }
    let proj: Vec<f64> = (0..n)
        .map(|i| (0..d).map(|j| centered[i * d + j] * v[j]).sum())
        .collect();
    let var = proj.iter().map(|x| x * x).sum::<f64>();
    if var < 1e-24 {
        return Err(PipelineError::DegenerateProjection("projection has no variance".into()));
    }
    Ok(proj)
}

/// Pearson correlation; errors when either input has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, PipelineError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(PipelineError::LengthMismatch(format!("{} vs {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return Err(PipelineError::DegenerateProjection("zero variance in correlation".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::naive_moving_average;
    use rand::SeedableRng;

    fn embed_ids(tape: &mut GradTape, p: usize, d: usize, n: usize, seed: u64) -> TsEmbedIds {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let params = TsEmbedParams::seeded(p, d, n, &mut rng);
        TsEmbedIds::record(tape, &params, false)
    }

    #[test]
    fn normalize_constant_series() {
        let ts = TimeSeriesSet::new(vec![vec![5.0, 5.0, 5.0]]).unwrap();
        let out = instance_normalize(&ts);
        assert_eq!(out.series()[0], vec![0.0, 0.0, 0.0]);
        assert_eq!(out.stats().unwrap()[0].std, 1.0);
    }

    #[test]
    fn normalize_unit_series_is_identity() {
        let ts = TimeSeriesSet::new(vec![vec![-1.0, 1.0]]).unwrap();
        let out = instance_normalize(&ts);
        assert_eq!(out.series()[0], vec![-1.0, 1.0]);
    }

    #[test]
    fn normalize_population_std() {
        let ts = TimeSeriesSet::new(vec![vec![1.0, 2.0, 3.0]]).unwrap();
        let out = instance_normalize(&ts);
        let expect = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((out.series()[0][0] + expect).abs() < 1e-4 * expect.abs() + 1e-9);
        assert!((out.series()[0][0] + 1.2247).abs() < 1e-4);
        assert!(out.series()[0][1].abs() < 1e-12);
        assert!((out.series()[0][2] - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn normalize_denormalize_roundtrip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        let raw: Vec<f64> = (0..37).map(|_| rng.gen_range(-40.0..90.0)).collect();
        let ts = TimeSeriesSet::new(vec![raw.clone(), vec![3.0; 9]]).unwrap();
        let back = denormalize(&instance_normalize(&ts)).unwrap();
        for (a, b) in back.series()[0].iter().zip(&raw) {
            assert!((a - b).abs() <= 1e-9);
        }
        for x in &back.series()[1] {
            assert!((x - 3.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn normalized_series_have_unit_stats() {
        let ts = TimeSeriesSet::new(vec![vec![4.0, 9.0, -3.0, 2.5, 0.0], vec![1.0, 7.0]]).unwrap();
        let out = instance_normalize(&ts);
        for s in out.series() {
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let var = s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            assert!(mean.abs() <= 1e-9);
            assert!((var.sqrt() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn padding_arithmetic() {
        let ts = TimeSeriesSet::new(vec![vec![1.0; 5], vec![2.0; 3]]).unwrap();
        let grid = pad_and_patch(&ts, 4).unwrap();
        assert_eq!(grid.padded_len(), 8);
        assert_eq!(grid.patches_per_series(), 2);
        assert_eq!(grid.pad_len(), &[3, 5]);
        // Padding replicates the last observed value.
        assert_eq!(grid.patch(1, 1), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn patches_reconstruct_padded_series() {
        let ts = TimeSeriesSet::new(vec![vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]]).unwrap();
        let grid = pad_and_patch(&ts, 3).unwrap();
        let mut flat = Vec::new();
        for n in 0..grid.patches_per_series() {
            flat.extend_from_slice(grid.patch(0, n));
        }
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn embed_shapes_and_zero_linearity() {
        let mut tape = GradTape::new();
        let ids = embed_ids(&mut tape, 3, 6, 2, 9);
        let ts = TimeSeriesSet::new(vec![vec![0.0; 5], vec![0.0; 6]]).unwrap();
        let (x, grid) = patch_and_embed(&mut tape, &ts, 3, &ids).unwrap();
        assert_eq!(grid.patches_per_series(), 2);
        assert_eq!(tape.value(x).shape(), &[4, 6]);
        // Zero series, zero offsets: every row is exactly zero.
        assert!(tape.value(x).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn embed_rejects_empty_set() {
        let bad = TimeSeriesSet::new(vec![]);
        assert!(matches!(bad, Err(PipelineError::EmptySeries)));
    }

    #[test]
    fn decompose_matches_windowed_mean_oracle() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for n in 1..=16usize {
            for &k in &[1usize, 3, 5, 7] {
                let series: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let mut tape = GradTape::new();
                let x = tape.constant(
                    Tensor::new(vec![n, 1], series.clone()).unwrap(),
                );
                let parts = latent_decompose(&mut tape, x, 1, k).unwrap();
                let eff = parts.window;
                let oracle = naive_moving_average(&series, eff);
                for (a, b) in tape.value(parts.trend).data().iter().zip(&oracle) {
                    assert!((a - b).abs() <= 1e-12, "n={n} k={k}");
                }
            }
        }
    }

    #[test]
    fn decompose_constant_rows() {
        let mut tape = GradTape::new();
        let x = tape.constant(Tensor::from_rows(&vec![vec![2.0, 3.0]; 6]).unwrap());
        let parts = latent_decompose(&mut tape, x, 1, 5).unwrap();
        assert_eq!(tape.value(parts.trend).data(), tape.value(parts.full).data());
        assert!(tape.value(parts.seasonal).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decompose_window_one_is_identity() {
        let mut tape = GradTape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0], vec![4.0], vec![9.0]]).unwrap());
        let parts = latent_decompose(&mut tape, x, 1, 1).unwrap();
        assert_eq!(tape.value(parts.trend).data(), &[1.0, 4.0, 9.0]);
        assert!(tape.value(parts.seasonal).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decompose_spec_window_example() {
        let mut tape = GradTape::new();
        let x = tape.constant(
            Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap(),
        );
        let parts = latent_decompose(&mut tape, x, 1, 3).unwrap();
        let t = tape.value(parts.trend).data().to_vec();
        let expect = [1.0 / 3.0, 1.0, 2.0, 3.0, 11.0 / 3.0];
        for (a, b) in t.iter().zip(expect) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn decompose_rejects_even_window_and_clamps_large() {
        let mut tape = GradTape::new();
        let x = tape.constant(Tensor::from_rows(&vec![vec![1.0]; 4]).unwrap());
        assert!(latent_decompose(&mut tape, x, 1, 2).is_err());
        let parts = latent_decompose(&mut tape, x, 1, 99).unwrap();
        assert_eq!(parts.window, 3);
    }

    #[test]
    fn reconstruction_is_bitwise() {
        // full = trend + seasonal holds exactly in the residual direction:
        // the stored seasonal must equal full - trend recomputed directly.
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let rows: Vec<Vec<f64>> =
            (0..12).map(|_| (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let mut tape = GradTape::new();
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let parts = latent_decompose(&mut tape, x, 2, 5).unwrap();
        let full = tape.value(parts.full).data();
        let trend = tape.value(parts.trend).data();
        let seasonal = tape.value(parts.seasonal).data();
        for i in 0..full.len() {
            assert_eq!(seasonal[i], full[i] - trend[i]);
        }
    }

    #[test]
    fn decompose_keeps_series_blocks_separate() {
        // Two series, one all 1s and one all -1s: with blockwise pooling the
        // trend equals the input exactly; cross-series pooling would bleed.
        let mut tape = GradTape::new();
        let mut rows = vec![vec![1.0]; 4];
        rows.extend(vec![vec![-1.0]; 4]);
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let parts = latent_decompose(&mut tape, x, 2, 3).unwrap();
        assert_eq!(tape.value(parts.trend).data(), tape.value(parts.full).data());
    }

    #[test]
    fn gradient_flows_through_embedding_and_decomposition() {
        use crate::numerics::check_gradient;
        let w = Tensor::uniform(
            vec![4, 6],
            0.5,
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(3),
        );
        let err = check_gradient(
            |tape, wid| {
                let ts = TimeSeriesSet::new(vec![vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.5, 0.25, 1.0]])
                    .unwrap();
                let pos = tape.leaf(Tensor::zeros(vec![2, 6]));
                let ids = TsEmbedIds { w: wid, pos };
                let (x, _) = patch_and_embed(tape, &ts, 4, &ids).map_err(unwrap_numerics)?;
                let parts = latent_decompose(tape, x, 1, 3).map_err(unwrap_numerics)?;
                let s = tape.mul(parts.seasonal, parts.seasonal)?;
                tape.sum_all(s)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "err={err}");
    }

    fn unwrap_numerics(e: PipelineError) -> NumericsError {
        match e {
            PipelineError::Numerics(n) => n,
            other => NumericsError::InvalidArgument {
                op: "pipeline",
                detail: other.to_string(),
            },
        }
    }

    #[test]
    fn pca_recovers_dominant_direction() {
        // Rows vary only along (3, 4)/5; projection must match that variation.
        let rows: Vec<Vec<f64>> =
            (0..10).map(|i| vec![3.0 * i as f64, 4.0 * i as f64]).collect();
        let proj = pca_project(&Tensor::from_rows(&rows).unwrap()).unwrap();
        let expect: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let r = pearson(&proj, &expect).unwrap();
        assert!(r.abs() > 1.0 - 1e-9);
    }

    #[test]
    fn pca_rejects_constant_matrix() {
        let m = Tensor::from_rows(&vec![vec![1.0, 2.0]; 5]).unwrap();
        assert!(matches!(pca_project(&m), Err(PipelineError::DegenerateProjection(_))));
    }

    #[test]
    fn pearson_known_values() {
        let a = [1.0, 2.0, 3.0];
        assert!((pearson(&a, &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&a, &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&a, &[5.0, 5.0, 5.0]).is_err());
    }

    fn make_series(len: usize, slope: f64, amp: f64, period: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut series = Vec::with_capacity(len);
        let mut trend = Vec::with_capacity(len);
        let mut seasonal = Vec::with_capacity(len);
        for t in 0..len {
            let tr = slope * t as f64;
            let se = amp * (2.0 * std::f64::consts::PI * t as f64 / period).sin();
            trend.push(tr);
            seasonal.push(se);
            series.push(tr + se);
        }
        (series, trend, seasonal)
    }

    #[test]
    fn verify_pure_trend() {
        let (s, t, se) = make_series(128, 0.05, 0.0, 16.0);
        let report =
            verify_decomposition(&s, &t, &se, &PipelineConfig::default(), 11).unwrap();
        let corr = report.trend_corr.expect("trend ground truth varies");
        assert!(corr >= 0.99, "trend corr {corr}");
        assert!(report.seasonal_corr.is_none());
    }

    #[test]
    fn verify_pure_sinusoid() {
        let (s, t, se) = make_series(128, 0.0, 1.0, 16.0);
        let report =
            verify_decomposition(&s, &t, &se, &PipelineConfig::default(), 12).unwrap();
        let corr = report.seasonal_corr.expect("seasonal ground truth varies");
        assert!(corr >= 0.9, "seasonal corr {corr}");
    }

    #[test]
    fn verify_white_noise_produces_report() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let noise: Vec<f64> = (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zeros = vec![0.0; 96];
        // Ground truth components are flat, so correlate against the noise
        // itself split arbitrarily; only report production is asserted.
        let report =
            verify_decomposition(&noise, &noise, &noise, &PipelineConfig::default(), 14);
        assert!(report.is_ok() || matches!(report, Err(PipelineError::DegenerateProjection(_))));
        let _ = zeros;
    }

    #[test]
    fn verify_trend_plus_sinusoid_hits_thresholds() {
        let (s, t, se) = make_series(256, 0.02, 1.0, 16.0);
        let report =
            verify_decomposition(&s, &t, &se, &PipelineConfig::default(), 15).unwrap();
        let tc = report.trend_corr.unwrap();
        let sc = report.seasonal_corr.unwrap();
        assert!(tc >= 0.95, "trend corr {tc}");
        assert!(sc >= 0.90, "seasonal corr {sc}");
    }

    #[test]
    fn report_rendering_is_stable() {
        let (s, t, se) = make_series(64, 0.05, 1.0, 16.0);
        let report =
            verify_decomposition(&s, &t, &se, &PipelineConfig::default(), 16).unwrap();
        let text = report.to_text();
        let kv = report.to_kv();
        assert!(text.contains("|trend corr|"));
        assert!(kv.contains("trend_corr="));
        assert!(kv.contains("seasonal_corr="));
    }
}
