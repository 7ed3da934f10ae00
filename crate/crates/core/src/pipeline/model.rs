//! Deterministic pre-norm decoder with seeded weights.
//!
//! Every weight tensor is drawn by [`seeded_matrix`] from a seed derived from
//! `(model seed, layer, slot)` with a splitmix64 step, so two models built
//! from the same shape and seed are bit-identical.

use crate::error::{Error, Result};
use crate::layout::SequenceLayout;
use crate::numeric::{dot, rope_rotate, seeded_matrix, Matrix, RopeParams};
use crate::schedule::ModelShape;

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f64>,
    /// `d x m`
    pub w_up: Matrix,
    /// `m x d`
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub shape: ModelShape,
    pub vocab: usize,
    pub seed: u64,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    pub lm_head: Matrix,
    pub rope: RopeParams,
    /// Additive logit on vision keys, per 1-based layer (index 0 unused).
    pub vision_key_bias: Vec<f64>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn derive_seed(seed: u64, layer: usize, slot: u64) -> u64 {
    splitmix64(seed ^ splitmix64(((layer as u64) << 8) | slot))
}

fn gains(len: usize, seed: u64) -> Result<Vec<f64>> {
    Ok(seeded_matrix(1, len, seed, 0.1)?
        .data()
        .iter()
        .map(|g| 1.0 + g)
        .collect())
}

pub fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = dot(x, x) / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

impl ToyModel {
    pub fn new(shape: ModelShape, vocab: usize, seed: u64) -> Result<Self> {
        shape.validate()?;
        if vocab == 0 {
            return Err(Error::param("vocab", "must be positive"));
        }
        let rope = RopeParams::with_default_base(shape.head_dim())?;
        let d = shape.hidden;
        let m = shape.ffn;
        let sd = 1.0 / (d as f64).sqrt();
        let sm = 1.0 / (m as f64).sqrt();
        let mut layers = Vec::with_capacity(shape.layers);
        for l in 1..=shape.layers {
            let s = |slot| derive_seed(seed, l, slot);
            layers.push(LayerWeights {
                attn_norm: gains(d, s(0))?,
                wq: seeded_matrix(d, d, s(1), sd)?,
                wk: seeded_matrix(d, d, s(2), sd)?,
                wv: seeded_matrix(d, d, s(3), sd)?,
                wo: seeded_matrix(d, d, s(4), sd)?,
                ffn_norm: gains(d, s(5))?,
                w_up: seeded_matrix(d, m, s(6), sd)?,
                w_down: seeded_matrix(m, d, s(7), sm)?,
            });
        }
        Ok(Self {
            shape,
            vocab,
            seed,
            layers,
            final_norm: gains(d, derive_seed(seed, 0, 8))?,
            lm_head: seeded_matrix(d, vocab, derive_seed(seed, 0, 9), sd)?,
            rope,
            vision_key_bias: vec![0.0; shape.layers + 1],
        })
    }

    /// Penalizes attention to vision keys by `kappa * (l - 1)` at layer `l`,
    /// so deeper layers lean on vision less and less.
    pub fn with_vision_decay(mut self, kappa: f64) -> Self {
        for (l, b) in self.vision_key_bias.iter_mut().enumerate().skip(1) {
            *b = -kappa * (l - 1) as f64;
        }
        self
    }

    pub fn num_layers(&self) -> usize {
        self.shape.layers
    }

    pub fn hidden(&self) -> usize {
        self.shape.hidden
    }

    pub(crate) fn weights(&self, l: usize) -> &LayerWeights {
        &self.layers[l - 1]
    }

    fn rotate_heads(&self, x: Vec<f64>, position: usize) -> Vec<f64> {
        let hd = self.shape.head_dim();
        let mut out = Vec::with_capacity(x.len());
        for chunk in x.chunks(hd) {
            out.extend(rope_rotate(chunk, position, &self.rope).expect("head_dim checked at construction"));
        }
        out
    }

    /// Rotated query of an already normalized row.
    pub fn query(&self, l: usize, normed: &[f64], position: usize) -> Vec<f64> {
        self.rotate_heads(self.weights(l).wq.left_mul(normed), position)
    }

    /// Rotated key and plain value of an already normalized row.
    pub fn key_value(&self, l: usize, normed: &[f64], position: usize) -> (Vec<f64>, Vec<f64>) {
        let w = self.weights(l);
        (
            self.rotate_heads(w.wk.left_mul(normed), position),
            w.wv.left_mul(normed),
        )
    }

    pub fn attn_input(&self, l: usize, hidden: &[f64]) -> Vec<f64> {
        rms_norm(hidden, &self.weights(l).attn_norm)
    }

    /// Output projection, residual and feed-forward for one row.
    pub fn finish_row(&self, l: usize, hidden: &[f64], heads_out: &[f64]) -> Vec<f64> {
        let w = self.weights(l);
        let attn = w.wo.left_mul(heads_out);
        let mid: Vec<f64> = hidden.iter().zip(&attn).map(|(h, a)| h + a).collect();
        let up: Vec<f64> = w.w_up.left_mul(&rms_norm(&mid, &w.ffn_norm)).into_iter().map(silu).collect();
        let down = w.w_down.left_mul(&up);
        mid.iter().zip(&down).map(|(h, f)| h + f).collect()
    }

    pub fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        self.lm_head.left_mul(&rms_norm(hidden, &self.final_norm))
    }
}

/// A prompt: its layout and one embedding row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub layout: SequenceLayout,
    pub embeddings: Matrix,
}

impl Prompt {
    pub fn new(layout: SequenceLayout, embeddings: Matrix) -> Result<Self> {
        if embeddings.rows() != layout.len() {
            return Err(Error::LengthMismatch {
                expected: layout.len(),
                got: embeddings.rows(),
            });
        }
        Ok(Self { layout, embeddings })
    }

    /// Uniform `[-1, 1]` embeddings. Vision rows come from `vision_seed`,
    /// the rest from `seed`, so swapping the image keeps the text identical.
    pub fn synthetic(layout: SequenceLayout, hidden: usize, seed: u64, vision_seed: u64) -> Result<Self> {
        let text = seeded_matrix(layout.len(), hidden, seed, 1.0)?;
        let vision = seeded_matrix(layout.len(), hidden, vision_seed, 1.0)?;
        let mut emb = text;
        for v in layout.vision_tokens() {
            emb.row_mut(v).copy_from_slice(vision.row(v));
        }
        Self::new(layout, emb)
    }

    pub fn with_vision_rows(&self, rows: &Matrix) -> Result<Self> {
        let vision: Vec<usize> = self.layout.vision_tokens().collect();
        if rows.rows() != vision.len() || rows.cols() != self.embeddings.cols() {
            return Err(Error::LengthMismatch {
                expected: vision.len(),
                got: rows.rows(),
            });
        }
        let mut emb = self.embeddings.clone();
        for (r, &v) in vision.iter().enumerate() {
            emb.row_mut(v).copy_from_slice(rows.row(r));
        }
        Self::new(self.layout.clone(), emb)
    }

    /// Drops the vision block, keeping every remaining token's position id.
    pub fn text_only(&self) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut rows = Vec::new();
        for t in self.layout.tokens() {
            if !self.layout.is_vision(t.index) {
                let mut t = *t;
                rows.push(self.embeddings.row(t.index).to_vec());
                t.index = tokens.len();
                tokens.push(t);
            }
        }
        Self::new(SequenceLayout::from_tokens(tokens)?, Matrix::from_rows(&rows)?)
    }

    pub fn vision_rows(&self) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = self
            .layout
            .vision_tokens()
            .map(|v| self.embeddings.row(v).to_vec())
            .collect();
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.embeddings.cols()));
        }
        Matrix::from_rows(&rows)
    }
}
