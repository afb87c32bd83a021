//! Naive 64-bit reference implementations.
//!
//! These follow the textbook definitions with plain loops and share no code
//! with the optimized kernels, so they can serve as oracles for both the test
//! suite and the `verify` command.

use crate::matrix::Matrix;

fn at(m: &Matrix<f64>, r: usize, c: usize) -> f64 {
    m.data()[r * m.cols() + c]
}

pub fn matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
    assert_eq!(a.cols(), b.rows());
    let mut out = vec![0.0; a.rows() * b.cols()];
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += at(a, i, k) * at(b, k, j);
            }
            out[i * b.cols() + j] = acc;
        }
    }
    Matrix::from_vec(a.rows(), b.cols(), out).unwrap()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Attention of each query over an explicit list of key positions.
fn attend_positions(
    q: &Matrix<f64>,
    k: &Matrix<f64>,
    v: &Matrix<f64>,
    i: usize,
    positions: &[usize],
    scale: f64,
) -> Vec<f64> {
    let d = q.cols();
    let logits: Vec<f64> = positions
        .iter()
        .map(|&j| (0..d).map(|c| at(q, i, c) * at(k, j, c)).sum::<f64>() * scale)
        .collect();
    let w = softmax(&logits);
    let mut out = vec![0.0; v.cols()];
    for (p, &j) in w.iter().zip(positions) {
        for c in 0..v.cols() {
            out[c] += p * at(v, j, c);
        }
    }
    out
}

/// `softmax(scale · QKᵀ + causal) V`.
pub fn causal_attention(q: &Matrix<f64>, k: &Matrix<f64>, v: &Matrix<f64>, scale: f64) -> Matrix<f64> {
    let n = q.rows();
    let mut out = Vec::with_capacity(n * v.cols());
    for i in 0..n {
        let positions: Vec<usize> = (0..=i).collect();
        out.extend(attend_positions(q, k, v, i, &positions, scale));
    }
    Matrix::from_vec(n, v.cols(), out).unwrap()
}

/// Gather-then-dense: for every segment, materialize the tokens of the given
/// blocks and run causal attention over them.
pub fn gathered_attention(
    q: &Matrix<f64>,
    k: &Matrix<f64>,
    v: &Matrix<f64>,
    segment_size: usize,
    block_size: usize,
    selections: &[Vec<usize>],
    scale: f64,
) -> Matrix<f64> {
    let n = q.rows();
    let mut out = Vec::with_capacity(n * v.cols());
    for (seg, blocks) in selections.iter().enumerate() {
        let mut gathered = Vec::new();
        for &b in blocks {
            for t in b * block_size..((b + 1) * block_size).min(n) {
                gathered.push(t);
            }
        }
        for i in seg * segment_size..((seg + 1) * segment_size).min(n) {
            let visible: Vec<usize> = gathered.iter().copied().filter(|&t| t <= i).collect();
            out.extend(attend_positions(q, k, v, i, &visible, scale));
        }
    }
    Matrix::from_vec(n, v.cols(), out).unwrap()
}

/// Step-by-step criticality estimate for one head: reshape, extrema, four
/// softmaxed score maps, average, maximum, causal mask, fusion.
pub fn criticality(
    q: &Matrix<f64>,
    k: &Matrix<f64>,
    segment_size: usize,
    block_size: usize,
    prev: Option<&Matrix<f64>>,
    alpha: f64,
    scale_logits: bool,
) -> Matrix<f64> {
    let n = q.rows();
    let d = q.cols();
    let n1 = n.div_ceil(segment_size);
    let n2 = n.div_ceil(block_size);

    let extrema = |m: &Matrix<f64>, groups: usize, size: usize| {
        let mut hi = vec![vec![f64::NEG_INFINITY; d]; groups];
        let mut lo = vec![vec![f64::INFINITY; d]; groups];
        for t in 0..n {
            let g = t / size;
            for c in 0..d {
                let x = at(m, t, c);
                if x > hi[g][c] {
                    hi[g][c] = x;
                }
                if x < lo[g][c] {
                    lo[g][c] = x;
                }
            }
        }
        (hi, lo)
    };
    let (q_max, q_min) = extrema(q, n1, segment_size);
    let (k_max, k_min) = extrema(k, n2, block_size);

    let scale = if scale_logits { 1.0 / (d as f64).sqrt() } else { 1.0 };
    let score_map = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        a.iter()
            .map(|qa| {
                let logits: Vec<f64> = b
                    .iter()
                    .map(|kb| qa.iter().zip(kb).map(|(x, y)| x * y).sum::<f64>() * scale)
                    .collect();
                softmax(&logits)
            })
            .collect()
    };
    let s1 = score_map(&q_max, &k_max);
    let s2 = score_map(&q_max, &k_min);
    let s3 = score_map(&q_min, &k_max);
    let s4 = score_map(&q_min, &k_min);

    let mut s = vec![0.0; n1 * n2];
    for i in 0..n1 {
        let seg_last = ((i + 1) * segment_size).min(n) - 1;
        for j in 0..n2 {
            let s_max = (s1[i][j] + s3[i][j]) / 2.0;
            let s_min = (s2[i][j] + s4[i][j]) / 2.0;
            let mut x = if s_max > s_min { s_max } else { s_min };
            if j * block_size > seg_last {
                x = 0.0;
            }
            if let Some(p) = prev {
                x = alpha * x + (1.0 - alpha) * at(p, i, j);
            }
            s[i * n2 + j] = x;
        }
    }
    Matrix::from_vec(n1, n2, s).unwrap()
}

/// Top-`k` of `q · K[j]` over `j <= i` by sorting every logit; ties to the
/// lower index. Returns ascending indices.
pub fn top_k_by_sort(q: &[f64], k: &Matrix<f64>, i: usize, top: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = (0..=i)
        .map(|j| ((0..q.len()).map(|c| q[c] * at(k, j, c)).sum(), j))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut idx: Vec<usize> = all.into_iter().take(top).map(|(_, j)| j).collect();
    idx.sort();
    idx
}
