//! Raw forward kernels shared by the tape ops. Each output element is
//! accumulated in a fixed sequential order, so the parallel matmul (rows fan
//! out, each row stays sequential) is bitwise identical to the sequential one.

/// Row-parallel matmul threshold: below this many output elements the rayon
/// dispatch overhead dominates.
const PAR_MIN_ELEMS: usize = 16 * 1024;

pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &av) in row.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                dst[j] += av * brow[j];
            }
        }
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    use rayon::prelude::*;
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, dst)| {
        let row = &a[i * k..(i + 1) * k];
        for (p, &av) in row.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                dst[j] += av * brow[j];
            }
        }
    });
    out
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m * n >= PAR_MIN_ELEMS && m > 1 {
        return matmul_par(a, b, m, k, n);
    }
    matmul_seq(a, b, m, k, n)
}

/// Softmax of one contiguous slice, written into `out`. Subtracts the max so
/// large logits stay finite.
pub fn softmax_slice(src: &[f64], out: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(src) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Tanh-approximated GELU and its derivative.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] x [[5],[6]] = [[17],[39]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0];
        assert_eq!(matmul_seq(&a, &b, 2, 2, 1), vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_identity() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let b = [2.0, 3.0, 4.0, 5.0];
        assert_eq!(matmul_seq(&a, &b, 2, 2, 2), b.to_vec());
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn matmul_par_bitwise_matches_seq() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (m, k, n) = (64, 37, 53);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(matmul_seq(&a, &b, m, k, n), matmul_par(&a, &b, m, k, n));
    }

    #[test]
    fn softmax_handles_large_inputs() {
        let src = [1000.0, 1000.0];
        let mut out = [0.0; 2];
        softmax_slice(&src, &mut out);
        assert_eq!(out, [0.5, 0.5]);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - num).abs() < 1e-8, "x={x}");
        }
    }
}
