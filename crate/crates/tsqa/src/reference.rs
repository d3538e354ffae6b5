//! Slow, independent reference implementations used to cross-check the main
//! code paths in tests. Nothing here shares loops or intermediates with the
//! implementations under test: attention is a literal per-position loop and
//! the common-subsequence length comes from exhaustive enumeration.

use crate::numerics::{AttentionParams, Tensor};

/// Per-position loop attention with explicit head slices. O(n * m * d) with
/// no batching, used as the oracle for `multi_head_attention`.
pub fn naive_attention(
    query: &Tensor,
    key: &Tensor,
    value: &Tensor,
    heads: usize,
    params: &AttentionParams,
    causal: bool,
) -> Tensor {
    let d = query.cols();
    let head_dim = d / heads;
    let n = query.rows();
    let m = key.rows();
    let project = |x: &Tensor, w: &Tensor| -> Vec<Vec<f64>> {
        (0..x.rows())
            .map(|i| {
                (0..d).map(|j| (0..d).map(|p| x.at(i, p) * w.at(p, j)).sum::<f64>()).collect()
            })
            .collect()
    };
    let q = project(query, &params.wq);
    let k = project(key, &params.wk);
    let v = project(value, &params.wv);
    let mut merged = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let lo = h * head_dim;
        for i in 0..n {
            let visible = if causal { i + 1 } else { m };
            let mut scores = Vec::with_capacity(visible);
            for j in 0..visible {
                let mut dot = 0.0;
                for p in 0..head_dim {
                    dot += q[i][lo + p] * k[j][lo + p];
                }
                scores.push(dot / (head_dim as f64).sqrt());
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for p in 0..head_dim {
                let mut acc = 0.0;
                for j in 0..visible {
                    acc += exps[j] / total * v[j][lo + p];
                }
                merged[i][lo + p] = acc;
            }
        }
    }
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|p| merged[i][p] * params.wo.at(p, j)).sum();
        }
    }
    Tensor::new(vec![n, d], out).expect("oracle output is finite")
}

/// Longest common subsequence length by enumerating every subsequence of `a`
/// and testing it against `b`. Exponential in `a.len()`; keep inputs short.
pub fn lcs_by_enumeration<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let n = a.len();
    assert!(n <= 20, "enumeration oracle is exponential");
    let mut best = 0;
    for mask in 0u32..(1 << n) {
        let len = mask.count_ones() as usize;
        if len <= best {
            continue;
        }
        let mut bi = 0;
        let mut ok = true;
        for (i, item) in a.iter().enumerate() {
            if mask & (1 << i) == 0 {
                continue;
            }
            let mut found = false;
            while bi < b.len() {
                bi += 1;
                if b[bi - 1] == *item {
                    found = true;
                    break;
                }
            }
            if !found {
                ok = false;
                break;
            }
        }
        if ok {
            best = len;
        }
    }
    best
}

/// Centered moving average of a plain series with replicate padding, written
/// as a direct windowed sum.
pub fn naive_moving_average(series: &[f64], window: usize) -> Vec<f64> {
    assert!(window % 2 == 1 && window > 0);
    let n = series.len() as isize;
    let half = (window / 2) as isize;
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for o in -half..=half {
                let p = (i + o).clamp(0, n - 1) as usize;
                acc += series[p];
            }
            acc / window as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_lcs_known_cases() {
        let a: Vec<char> = "acde".chars().collect();
        let b: Vec<char> = "abcd".chars().collect();
        assert_eq!(lcs_by_enumeration(&a, &b), 3);
        assert_eq!(lcs_by_enumeration(&a, &a), 4);
        let empty: Vec<char> = vec![];
        assert_eq!(lcs_by_enumeration(&empty, &b), 0);
        let c: Vec<char> = "xyz".chars().collect();
        assert_eq!(lcs_by_enumeration(&c, &b), 0);
    }

    #[test]
    fn naive_moving_average_window_one_is_identity() {
        let s = [3.0, 1.0, 4.0, 1.0, 5.0];
        assert_eq!(naive_moving_average(&s, 1), s.to_vec());
    }
}
