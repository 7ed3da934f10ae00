//! Dense f64 substrate: matrices, softmax, cosine similarity, rotary
//! embeddings and a reproducible random source.
//!
//! # Random numbers
//!
//! All seeded values come from ChaCha8 (`rand_chacha::ChaCha8Rng`), seeded
//! through `SeedableRng::seed_from_u64`. A uniform draw takes the top 53 bits
//! of one `next_u64` call, `u = (x >> 11) * 2^-53`, which is exact in f64 and
//! identical on every platform. [`seeded_matrix`] fills row-major, one draw
//! per entry, mapping `u` to `scale * (2u - 1)`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::param(
                "data",
                format!("non-finite entry at flat index {bad}"),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::LengthMismatch {
                    expected: cols,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// Row vector times matrix: `x · self`, with `x.len() == self.rows()`.
    pub fn left_mul(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "left_mul dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (xi, row) in x.iter().zip(self.iter_rows()) {
            if *xi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeParams {
    head_dim: usize,
    base: f64,
}

impl RopeParams {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::OddHeadDim(head_dim));
        }
        if !(base > 1.0) || !base.is_finite() {
            return Err(Error::param("base", format!("must exceed 1, got {base}")));
        }
        Ok(Self { head_dim, base })
    }

    pub fn with_default_base(head_dim: usize) -> Result<Self> {
        Self::new(head_dim, 10_000.0)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Angular frequency of the `k`-th rotated pair.
    pub fn frequency(&self, k: usize) -> f64 {
        self.base.powf(-2.0 * k as f64 / self.head_dim as f64)
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Max-subtracted softmax. `mask[i] == false` drops entry `i` (weight 0).
pub fn softmax(row: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if let Some(m) = mask {
        if m.len() != row.len() {
            return Err(Error::LengthMismatch {
                expected: row.len(),
                got: m.len(),
            });
        }
    }
    let keep = |i: usize| mask.map_or(true, |m| m[i]);
    let max = (0..row.len())
        .filter(|&i| keep(i))
        .map(|i| row[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::AllMasked);
    }
    let mut out: Vec<f64> = (0..row.len())
        .map(|i| if keep(i) { (row[i] - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// Rotates consecutive pairs `(x[2k], x[2k+1])` by `position * base^(-2k/head_dim)`.
pub fn rope_rotate(x: &[f64], position: usize, params: &RopeParams) -> Result<Vec<f64>> {
    if x.len() % 2 != 0 {
        return Err(Error::OddHeadDim(x.len()));
    }
    if x.len() != params.head_dim {
        return Err(Error::LengthMismatch {
            expected: params.head_dim,
            got: x.len(),
        });
    }
    let mut out = vec![0.0; x.len()];
    for k in 0..x.len() / 2 {
        let theta = position as f64 * params.frequency(k);
        let (sin, cos) = theta.sin_cos();
        let (a, b) = (x[2 * k], x[2 * k + 1]);
        out[2 * k] = a * cos - b * sin;
        out[2 * k + 1] = a * sin + b * cos;
    }
    Ok(out)
}

/// Reproducible uniform source; see the module docs for the exact recipe.
#[derive(Debug, Clone)]
pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        lo + (self.0.next_u64() % (hi - lo + 1) as u64) as usize
    }

    pub fn vector(&mut self, len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|_| scale * (2.0 * self.unit() - 1.0)).collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.range(0, i);
            items.swap(i, j);
        }
    }
}

/// Row-major uniform `[-scale, scale]` fill from a fresh [`SeededRng`].
pub fn seeded_matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> Result<Matrix> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::param("scale", format!("must be positive, got {scale}")));
    }
    let mut rng = SeededRng::new(seed);
    Ok(Matrix {
        rows,
        cols,
        data: rng.vector(rows * cols, scale),
    })
}
