//! Dense causal attention and the QKV projection.
//!
//! This is the unpruned baseline and the reference the block-sparse path is
//! checked against. Causal masking is applied to the logits before softmax.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{dot, Element, HeadView, Matrix};

/// Rows processed per rayon task.
const ROW_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Projections<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

/// Single-head attention result.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput<T> {
    /// `n × head_dim` output rows.
    pub output: Matrix<T>,
    /// `n × n` attention weights, kept only when requested.
    pub weights: Option<Matrix<T>>,
    /// Number of (query, key) pairs scored.
    pub pairs: u64,
}

/// Which logits survive into the softmax.
#[derive(Debug, Clone, Copy)]
pub enum Mask<'a> {
    None,
    /// Column `j` visible to row `i` iff `j <= i`.
    Causal,
    /// Row-major `rows × cols` visibility, `true` = visible.
    Explicit(&'a [bool]),
}

/// Token rows times weights: `Q = X·W_Q` and likewise for K and V.
pub fn project<T: Element>(
    x: &Matrix<T>,
    w_q: &Matrix<T>,
    w_k: &Matrix<T>,
    w_v: &Matrix<T>,
) -> Result<Projections<T>> {
    let d = x.cols();
    for (name, w) in [("W_Q", w_q), ("W_K", w_k), ("W_V", w_v)] {
        if w.shape() != (d, d) {
            return Err(Error::config(format!(
                "{name} is {}x{}, expected {d}x{d}",
                w.rows(),
                w.cols()
            )));
        }
    }
    Ok(Projections {
        q: x.matmul(w_q)?,
        k: x.matmul(w_k)?,
        v: x.matmul(w_v)?,
    })
}

/// Stabilized softmax over a slice, in place.
pub(crate) fn softmax_slice<T: Element>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / sum;
    }
}

/// Row-wise softmax. Masked positions come out exactly zero.
pub fn softmax_rows<T: Element>(m: &Matrix<T>, mask: Mask<'_>) -> Result<Matrix<T>> {
    let (rows, cols) = m.shape();
    if let Mask::Explicit(bits) = mask {
        if bits.len() != rows * cols {
            return Err(Error::config("mask shape does not match matrix"));
        }
    }
    let mut out = Matrix::zeros(rows, cols);
    let mut buf = Vec::with_capacity(cols);
    let mut idx = Vec::with_capacity(cols);
    for r in 0..rows {
        idx.clear();
        match mask {
            Mask::None => idx.extend(0..cols),
            Mask::Causal => idx.extend(0..cols.min(r + 1)),
            Mask::Explicit(bits) => {
                idx.extend((0..cols).filter(|&c| bits[r * cols + c]));
            }
        }
        if idx.is_empty() {
            return Err(Error::FullyMasked { row: r });
        }
        buf.clear();
        buf.extend(idx.iter().map(|&c| m.get(r, c)));
        softmax_slice(&mut buf);
        let row = out.row_mut(r);
        for (&c, &p) in idx.iter().zip(&buf) {
            row[c] = p;
        }
    }
    Ok(out)
}

/// Anything that hands out key/value rows by index.
pub(crate) trait RowSource<T> {
    fn row(&self, i: usize) -> &[T];
}

impl<T: Element> RowSource<T> for HeadView<'_, T> {
    fn row(&self, i: usize) -> &[T] {
        HeadView::row(self, i)
    }
}

/// Contiguous `len × dim` buffer of gathered rows.
pub(crate) struct Packed<'a, T> {
    pub data: &'a [T],
    pub dim: usize,
}

impl<T> RowSource<T> for Packed<'_, T> {
    fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Attends `query` to the first `visible` rows of `keys`/`values`, writing the
/// output row and leaving the normalized weights in `probs[..visible]`.
pub(crate) fn attend_row<T: Element>(
    query: &[T],
    keys: &impl RowSource<T>,
    values: &impl RowSource<T>,
    visible: usize,
    scale: T,
    probs: &mut Vec<T>,
    out: &mut [T],
) {
    probs.clear();
    probs.extend((0..visible).map(|j| scale * dot(query, keys.row(j))));
    softmax_slice(probs);
    out.iter_mut().for_each(|o| *o = T::zero());
    for (j, &p) in probs.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(values.row(j)) {
            *o = *o + p * v;
        }
    }
}

fn check_qkv<T: Element>(q: &HeadView<'_, T>, k: &HeadView<'_, T>, v: &HeadView<'_, T>) -> Result<()> {
    if q.rows() != k.rows() || q.rows() != v.rows() {
        return Err(Error::config(format!(
            "sequence lengths differ: q {}, k {}, v {}",
            q.rows(),
            k.rows(),
            v.rows()
        )));
    }
    if q.dim() != k.dim() {
        return Err(Error::config("query and key head dims differ"));
    }
    if q.rows() == 0 {
        return Err(Error::EmptyInput("attention over zero tokens"));
    }
    Ok(())
}

/// Exact causal attention `softmax(scale · QKᵀ) V` for one head.
pub fn dense_causal_attention<T: Element>(
    q: HeadView<'_, T>,
    k: HeadView<'_, T>,
    v: HeadView<'_, T>,
    scale: T,
    retain_weights: bool,
) -> Result<AttentionOutput<T>> {
    check_qkv(&q, &k, &v)?;
    if !(scale > T::zero()) {
        return Err(Error::config("scale must be positive"));
    }
    let n = q.rows();
    let dv = v.dim();
    let mut output = Matrix::zeros(n, dv);
    let mut weights = retain_weights.then(|| Matrix::zeros(n, n));

    let run = |start: usize, out_rows: &mut [T], mut w_rows: Option<&mut [T]>| {
        let mut probs = Vec::with_capacity(n);
        for (local, out) in out_rows.chunks_mut(dv).enumerate() {
            let i = start + local;
            attend_row(q.row(i), &k, &v, i + 1, scale, &mut probs, out);
            if let Some(w) = w_rows.as_deref_mut() {
                w[local * n..local * n + i + 1].copy_from_slice(&probs);
            }
        }
    };

    match weights.as_mut() {
        Some(w) => output
            .data_mut()
            .par_chunks_mut(ROW_CHUNK * dv)
            .zip(w.data_mut().par_chunks_mut(ROW_CHUNK * n))
            .enumerate()
            .for_each(|(c, (o, w))| run(c * ROW_CHUNK, o, Some(w))),
        None => output
            .data_mut()
            .par_chunks_mut(ROW_CHUNK * dv)
            .enumerate()
            .for_each(|(c, o)| run(c * ROW_CHUNK, o, None)),
    }

    let n64 = n as u64;
    Ok(AttentionOutput {
        output,
        weights,
        pairs: n64 * (n64 + 1) / 2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::rng::SplitMix64;

    fn row(xs: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(1, xs.len(), xs.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let s = softmax_rows(&row(&[0.0; 4]), Mask::None).unwrap();
        assert_eq!(s.data(), &[0.25; 4]);
        let s = softmax_rows(&row(&[0.0, 3f64.ln()]), Mask::None).unwrap();
        assert!((s.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let s = softmax_rows(&Matrix::<f32>::from_vec(1, 2, vec![1000.0, 0.0]).unwrap(), Mask::None).unwrap();
        assert!(s.data().iter().all(|x| x.is_finite()));
        assert!((s.get(0, 0) - 1.0).abs() < 1e-6);
        assert!(s.get(0, 1) < 1e-6);
    }

    #[test]
    fn softmax_masks_are_exact_zero() {
        let m = Matrix::<f64>::from_fn(3, 3, |r, c| (r + 2 * c) as f64);
        let s = softmax_rows(&m, Mask::Causal).unwrap();
        assert_eq!(s.get(0, 1), 0.0);
        assert_eq!(s.get(1, 2), 0.0);
        assert_eq!(s.get(0, 0), 1.0);
        let bits = [false, true, false];
        let s = softmax_rows(&row(&[5.0, 1.0, 9.0]), Mask::Explicit(&bits)).unwrap();
        assert_eq!(s.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let bits = [false, false];
        assert!(matches!(
            softmax_rows(&row(&[1.0, 2.0]), Mask::Explicit(&bits)),
            Err(Error::FullyMasked { row: 0 })
        ));
    }

    #[test]
    fn identity_and_zero_projection() {
        let mut g = SplitMix64::new(1);
        let x: Matrix<f32> = g.normal_matrix(5, 4, 1.0);
        let id = Matrix::identity(4);
        let p = project(&x, &id, &id, &id).unwrap();
        assert_eq!(p.q, x);
        assert_eq!(p.k, x);
        assert_eq!(p.v, x);
        let z = Matrix::<f32>::zeros(5, 4);
        let w: Matrix<f32> = g.normal_matrix(4, 4, 1.0);
        let p = project(&z, &w, &w, &w).unwrap();
        assert!(p.q.data().iter().chain(p.k.data()).chain(p.v.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn projection_matches_f64_oracle() {
        let mut g = SplitMix64::new(2);
        let x: Matrix<f32> = g.normal_matrix(4, 4, 1.0);
        let ws: Vec<Matrix<f32>> = (0..3).map(|_| g.normal_matrix(4, 4, 1.0)).collect();
        let p = project(&x, &ws[0], &ws[1], &ws[2]).unwrap();
        for (got, w) in [&p.q, &p.k, &p.v].into_iter().zip(&ws) {
            let want = reference::matmul(&x.cast::<f64>(), &w.cast::<f64>());
            for (a, b) in got.data().iter().zip(want.data()) {
                let rel = (*a as f64 - b).abs() / b.abs().max(1.0);
                assert!(rel < 1e-5);
            }
        }
        assert!(project(&x, &Matrix::zeros(3, 3), &ws[1], &ws[2]).is_err());
    }

    #[test]
    fn single_token_attends_to_itself() {
        let q = Matrix::<f32>::from_vec(1, 2, vec![0.3, -1.0]).unwrap();
        let v = Matrix::<f32>::from_vec(1, 2, vec![7.0, 8.0]).unwrap();
        let o = dense_causal_attention(q.view(), q.view(), v.view(), 0.5, false).unwrap();
        assert_eq!(o.output.data(), v.data());
    }

    #[test]
    fn equal_logits_give_prefix_mean() {
        let n = 6;
        let q = Matrix::<f64>::zeros(n, 3);
        let mut g = SplitMix64::new(3);
        let v: Matrix<f64> = g.normal_matrix(n, 3, 1.0);
        let o = dense_causal_attention(q.view(), q.view(), v.view(), 1.0, true).unwrap();
        for i in 0..n {
            for c in 0..3 {
                let mean = (0..=i).map(|j| v.get(j, c)).sum::<f64>() / (i + 1) as f64;
                assert!((o.output.get(i, c) - mean).abs() < 1e-12);
            }
        }
        assert_eq!(o.pairs, 21);
    }

    #[test]
    fn random_instance_matches_oracle() {
        let mut g = SplitMix64::new(4);
        let (n, d) = (32, 8);
        let q: Matrix<f32> = g.normal_matrix(n, d, 1.0);
        let k: Matrix<f32> = g.normal_matrix(n, d, 1.0);
        let v: Matrix<f32> = g.normal_matrix(n, d, 1.0);
        let scale = 1.0 / (d as f32).sqrt();
        let o = dense_causal_attention(q.view(), k.view(), v.view(), scale, true).unwrap();
        let want = reference::causal_attention(&q.cast(), &k.cast(), &v.cast(), 1.0 / (d as f64).sqrt());
        assert!(o.output.cast::<f64>().max_abs_diff(&want).unwrap() < 1e-5);

        let w = o.weights.unwrap();
        for i in 0..n {
            let s: f32 = w.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(w.row(i)[i + 1..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn mismatched_lengths_error() {
        let a = Matrix::<f32>::zeros(4, 2);
        let b = Matrix::<f32>::zeros(3, 2);
        assert!(dense_causal_attention(a.view(), b.view(), a.view(), 1.0, false).is_err());
        assert!(dense_causal_attention(a.view(), a.view(), a.view(), 0.0, false).is_err());
    }
}
