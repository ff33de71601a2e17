//! Scaled dot-product and multi-head attention, and sinusoidal positional
//! encodings. Token matrices hold one token per row.
//!
//! Every output row is computed from its own query row with a fixed operation
//! order, and sums over keys are accumulated in sorted order. Permuting the
//! queries permutes the output rows bit for bit, and permuting keys together
//! with values leaves the output unchanged bit for bit.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// `n_positions × d` table; column `j` uses frequency `10000^(-j/d)`, with
/// sine on even columns and cosine on odd columns.
pub fn positional_encoding(n_positions: usize, d: usize) -> Result<DMatrix<f64>> {
    if d % 2 != 0 || d == 0 {
        return Err(Error::OddDimension(d));
    }
    Ok(DMatrix::from_fn(n_positions, d, |pos, j| {
        let angle = pos as f64 / 10000f64.powf(j as f64 / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

fn head_dim(d: usize, h: usize) -> Result<usize> {
    if h == 0 || d == 0 || d % h != 0 {
        return Err(Error::ShapeMismatch(format!(
            "embedding dimension {d} is not divisible by {h} heads"
        )));
    }
    Ok(d / h)
}

/// Sum that does not depend on the order of the terms.
fn ordered_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// `x · w`, one row at a time with a fixed accumulation order.
fn row_product(x: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), w.ncols(), |i, c| {
        (0..x.ncols()).fold(0.0, |acc, k| acc + x[(i, k)] * w[(k, c)])
    })
}

/// Row-wise `softmax(Q Kᵀ / √(d/h))`.
pub fn attention_weights(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    d: usize,
    h: usize,
) -> Result<DMatrix<f64>> {
    let dk = head_dim(d, h)?;
    if q.ncols() != k.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "queries have width {} but keys have width {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if k.nrows() == 0 {
        return Err(Error::ShapeMismatch("no keys".into()));
    }
    let scale = (dk as f64).sqrt();
    let mut scores = DMatrix::from_fn(q.nrows(), k.nrows(), |i, j| {
        (0..q.ncols()).fold(0.0, |acc, c| acc + q[(i, c)] * k[(j, c)]) / scale
    });
    let mut terms = Vec::with_capacity(k.nrows());
    for mut row in scores.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        terms.clear();
        terms.extend(row.iter());
        let sum = ordered_sum(&mut terms);
        row /= sum;
    }
    Ok(scores)
}

/// `softmax(Q Kᵀ / √(d/h)) V`.
pub fn scaled_attention(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    d: usize,
    h: usize,
) -> Result<DMatrix<f64>> {
    if k.nrows() != v.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} keys but {} values",
            k.nrows(),
            v.nrows()
        )));
    }
    let w = attention_weights(q, k, d, h)?;
    let mut terms = Vec::with_capacity(v.nrows());
    Ok(DMatrix::from_fn(q.nrows(), v.ncols(), |i, c| {
        terms.clear();
        terms.extend((0..v.nrows()).map(|j| w[(i, j)] * v[(j, c)]));
        ordered_sum(&mut terms)
    }))
}

/// Query, key and value projections of one head, each `d × d/h`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjection {
    pub query: DMatrix<f64>,
    pub key: DMatrix<f64>,
    pub value: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadParams {
    heads: Vec<HeadProjection>,
    /// `d × d`.
    output: DMatrix<f64>,
}

impl MultiHeadParams {
    pub fn new(heads: Vec<HeadProjection>, output: DMatrix<f64>) -> Result<Self> {
        let d = output.nrows();
        if output.ncols() != d {
            return Err(Error::ShapeMismatch(
                "output projection must be square".into(),
            ));
        }
        let dk = head_dim(d, heads.len())?;
        for head in &heads {
            for w in [&head.query, &head.key, &head.value] {
                if w.shape() != (d, dk) {
                    return Err(Error::ShapeMismatch(format!(
                        "head projection is {:?}, expected ({d}, {dk})",
                        w.shape()
                    )));
                }
            }
        }
        Ok(MultiHeadParams { heads, output })
    }

    /// Gaussian weights with std `1/√d`.
    pub fn random<R: Rng + ?Sized>(d: usize, h: usize, rng: &mut R) -> Result<Self> {
        let dk = head_dim(d, h)?;
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
        let mut draw = |r, c| DMatrix::from_fn(r, c, |_, _| normal.sample(rng));
        let heads = (0..h)
            .map(|_| HeadProjection {
                query: draw(d, dk),
                key: draw(d, dk),
                value: draw(d, dk),
            })
            .collect();
        let output = draw(d, d);
        MultiHeadParams::new(heads, output)
    }

    pub fn heads(&self) -> &[HeadProjection] {
        &self.heads
    }

    pub fn output(&self) -> &DMatrix<f64> {
        &self.output
    }

    pub fn dim(&self) -> usize {
        self.output.nrows()
    }
}

/// Concatenated per-head attention followed by the output projection.
/// Self-attention passes the same tokens as `x_q` and `x_kv`.
pub fn multi_head_attention(
    x_q: &DMatrix<f64>,
    x_kv: &DMatrix<f64>,
    params: &MultiHeadParams,
) -> Result<DMatrix<f64>> {
    let d = params.dim();
    let h = params.heads.len();
    let dk = head_dim(d, h)?;
    for x in [x_q, x_kv] {
        if x.ncols() != d {
            return Err(Error::ShapeMismatch(format!(
                "tokens have width {}, expected {d}",
                x.ncols()
            )));
        }
    }
    let mut concat = DMatrix::zeros(x_q.nrows(), d);
    for (i, head) in params.heads.iter().enumerate() {
        let out = scaled_attention(
            &row_product(x_q, &head.query),
            &row_product(x_kv, &head.key),
            &row_product(x_kv, &head.value),
            d,
            h,
        )?;
        concat.columns_mut(i * dk, dk).copy_from(&out);
    }
    Ok(row_product(&concat, &params.output))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn positional_encoding_examples() {
        let pe = positional_encoding(100, 64).unwrap();
        for j in 0..64 {
            assert_eq!(pe[(0, j)], if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
        let mut min_gap = f64::INFINITY;
        for a in 0..100 {
            for b in (a + 1)..100 {
                min_gap = min_gap.min((pe.row(a) - pe.row(b)).amax());
            }
        }
        assert!(min_gap > 1e-6);
        assert!(matches!(
            positional_encoding(4, 7),
            Err(Error::OddDimension(7))
        ));
        // Odd column 1 uses exponent 1/d.
        let pe = positional_encoding(3, 4).unwrap();
        assert!((pe[(2, 1)] - (2.0 / 10000f64.powf(0.25)).cos()).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_two_key_case() {
        let q = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let v = k.clone();
        let w = attention_weights(&q, &k, 2, 1).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let e = s.exp();
        assert!((w[(0, 0)] - e / (e + 1.0)).abs() < 1e-15);
        assert!((w[(0, 1)] - 1.0 / (e + 1.0)).abs() < 1e-15);
        let out = scaled_attention(&q, &k, &v, 2, 1).unwrap();
        assert!((out[(0, 0)] - w[(0, 0)]).abs() < 1e-15);
    }

    #[test]
    fn singleton_and_uniform_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = DMatrix::from_fn(4, 8, |_, _| rng.random_range(-1.0..1.0));
        let k = DMatrix::from_fn(1, 8, |_, _| rng.random_range(-1.0..1.0));
        let v = DMatrix::from_fn(1, 3, |_, _| rng.random_range(-1.0..1.0));
        let out = scaled_attention(&q, &k, &v, 8, 2).unwrap();
        for r in 0..4 {
            assert!((out.row(r) - v.row(0)).amax() < 1e-15);
        }
        let q = DMatrix::zeros(2, 8);
        let k = DMatrix::from_fn(5, 8, |_, _| rng.random_range(-1.0..1.0));
        let v = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
        let out = scaled_attention(&q, &k, &v, 8, 2).unwrap();
        let mean = v.row_mean();
        assert!((out.row(1) - mean).amax() < 1e-15);
    }

    #[test]
    fn single_head_identity_projection_reduces_to_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 6;
        let eye = DMatrix::<f64>::identity(d, d);
        let params = MultiHeadParams::new(
            vec![HeadProjection {
                query: eye.clone(),
                key: eye.clone(),
                value: eye.clone(),
            }],
            eye,
        )
        .unwrap();
        let x = DMatrix::from_fn(5, d, |_, _| rng.random_range(-1.0..1.0));
        let a = multi_head_attention(&x, &x, &params).unwrap();
        let b = scaled_attention(&x, &x, &x, d, 1).unwrap();
        assert!((a - b).amax() < 1e-14);
    }

    fn random_tokens(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
    }

    fn permute_rows(x: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, c| x[(perm[i], c)])
    }

    #[test]
    fn permutation_symmetries_are_exact() {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 32;
        for h in [1, 2, 4, 8] {
            let params = MultiHeadParams::random(d, h, &mut rng).unwrap();
            let xq = random_tokens(&mut rng, 5, d);
            let xkv = random_tokens(&mut rng, 7, d);
            let base = multi_head_attention(&xq, &xkv, &params).unwrap();
            let mut perm: Vec<usize> = (0..7).collect();
            perm.shuffle(&mut rng);
            assert_eq!(
                multi_head_attention(&xq, &permute_rows(&xkv, &perm), &params).unwrap(),
                base
            );
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut rng);
            assert_eq!(
                multi_head_attention(&permute_rows(&xq, &perm), &xkv, &params).unwrap(),
                permute_rows(&base, &perm)
            );
            let w = attention_weights(&xq, &xkv, d, h).unwrap();
            for row in w.row_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let q = DMatrix::zeros(2, 4);
        let k = DMatrix::zeros(3, 5);
        assert!(matches!(
            scaled_attention(&q, &k, &DMatrix::zeros(3, 2), 4, 1),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            scaled_attention(&q, &DMatrix::zeros(3, 4), &DMatrix::zeros(2, 2), 4, 1),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(MultiHeadParams::random(10, 3, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
