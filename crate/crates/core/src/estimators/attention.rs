//! Multi-head self-attention block with residuals and per-token feature
//! normalization. Tokens are columns of a `d_model x N` matrix, so permuting
//! input columns permutes output columns identically (equivariance).

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpCache, MlpGrad};

const LN_EPS: f64 = 1e-5;

/// Per-feature scale and shift applied after standardizing each token
/// (column) over its features.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: DVector<f64>,
    pub shift: DVector<f64>,
}

pub struct LayerNormCache {
    normalized: DMatrix<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm { scale: DVector::from_element(dim, 1.0), shift: DVector::zeros(dim) }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, LayerNormCache) {
        let d = x.nrows();
        let n = x.ncols();
        let mut normalized = DMatrix::zeros(d, n);
        let mut out = DMatrix::zeros(d, n);
        let mut inv_std = Vec::with_capacity(n);
        for c in 0..n {
            let col = x.column(c);
            let mean = col.sum() / d as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for r in 0..d {
                let xh = (x[(r, c)] - mean) * is;
                normalized[(r, c)] = xh;
                out[(r, c)] = self.scale[r] * xh + self.shift[r];
            }
        }
        (out, LayerNormCache { normalized, inv_std })
    }

    /// Returns (d_input, d_scale, d_shift).
    pub fn backward(
        &self,
        cache: &LayerNormCache,
        grad_out: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let d = grad_out.nrows();
        let n = grad_out.ncols();
        let mut d_scale = DVector::zeros(d);
        let mut d_shift = DVector::zeros(d);
        let mut d_input = DMatrix::zeros(d, n);
        for c in 0..n {
            let mut mean_dxh = 0.0;
            let mut mean_dxh_xh = 0.0;
            for r in 0..d {
                let dy = grad_out[(r, c)];
                let xh = cache.normalized[(r, c)];
                d_scale[r] += dy * xh;
                d_shift[r] += dy;
                let dxh = dy * self.scale[r];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh;
            }
            mean_dxh /= d as f64;
            mean_dxh_xh /= d as f64;
            let is = cache.inv_std[c];
            for r in 0..d {
                let dxh = grad_out[(r, c)] * self.scale[r];
                let xh = cache.normalized[(r, c)];
                d_input[(r, c)] = is * (dxh - mean_dxh - xh * mean_dxh_xh);
            }
        }
        (d_input, d_scale, d_shift)
    }
}

/// One transformer encoder block: multi-head scaled dot-product attention,
/// residual + norm, position-wise feedforward, residual + norm. No
/// positional information anywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub query_proj: DMatrix<f64>,
    pub key_proj: DMatrix<f64>,
    pub value_proj: DMatrix<f64>,
    pub output_proj: DMatrix<f64>,
    pub n_heads: usize,
    pub feedforward: Mlp,
    pub norm_attn: LayerNorm,
    pub norm_ff: LayerNorm,
}

pub struct AttentionCache {
    input: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    /// Row-stochastic attention matrix per head.
    attn: Vec<DMatrix<f64>>,
    mixed: DMatrix<f64>,
    ln1: LayerNormCache,
    ff: MlpCache,
    ln2: LayerNormCache,
}

/// Gradients shaped like [`AttentionBlock`].
#[derive(Debug, Clone)]
pub struct AttentionGrad {
    pub query_proj: DMatrix<f64>,
    pub key_proj: DMatrix<f64>,
    pub value_proj: DMatrix<f64>,
    pub output_proj: DMatrix<f64>,
    pub feedforward: MlpGrad,
    pub norm_attn_scale: DVector<f64>,
    pub norm_attn_shift: DVector<f64>,
    pub norm_ff_scale: DVector<f64>,
    pub norm_ff_shift: DVector<f64>,
}

fn init_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = rng.gen_range(-bound..bound);
        }
    }
    m
}

impl AttentionBlock {
    pub fn init<R: Rng>(d_model: usize, n_heads: usize, ff_width: usize, rng: &mut R) -> Result<Self> {
        if d_model % n_heads != 0 {
            return Err(Error::validation(format!(
                "d_model {d_model} not divisible by n_heads {n_heads}"
            )));
        }
        Ok(AttentionBlock {
            query_proj: init_matrix(d_model, d_model, rng),
            key_proj: init_matrix(d_model, d_model, rng),
            value_proj: init_matrix(d_model, d_model, rng),
            output_proj: init_matrix(d_model, d_model, rng),
            n_heads,
            feedforward: Mlp::init(&[d_model, ff_width, d_model], Activation::ReLU, rng),
            norm_attn: LayerNorm::new(d_model),
            norm_ff: LayerNorm::new(d_model),
        })
    }

    pub fn d_model(&self) -> usize {
        self.query_proj.nrows()
    }

    pub fn d_head(&self) -> usize {
        self.d_model() / self.n_heads
    }

    /// Forward pass over `tokens` (`d_model x N`, tokens as columns).
    pub fn forward(&self, tokens: &DMatrix<f64>) -> Result<(DMatrix<f64>, AttentionCache)> {
        let d = self.d_model();
        let n = tokens.ncols();
        if tokens.nrows() != d {
            return Err(Error::dimension(format!(
                "token dimension {} != d_model {d}",
                tokens.nrows()
            )));
        }
        if n == 0 {
            return Err(Error::validation("attention requires at least one token"));
        }
        let q = &self.query_proj * tokens;
        let k = &self.key_proj * tokens;
        let v = &self.value_proj * tokens;
        let dk = self.d_head();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut attn = Vec::with_capacity(self.n_heads);
        let mut mixed = DMatrix::zeros(d, n);
        for h in 0..self.n_heads {
            let rows = h * dk;
            let qh = q.rows(rows, dk);
            let kh = k.rows(rows, dk);
            let vh = v.rows(rows, dk);
            let mut scores = qh.transpose() * kh; // N x N, row i = query i
            scores *= scale;
            if !scores.iter().all(|s| s.is_finite()) {
                return Err(Error::numeric("non-finite attention scores"));
            }
            // Row-wise softmax with max subtraction.
            for i in 0..n {
                let mut row = scores.row_mut(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
            }
            // Output column i is sum_j A_ij v_j.
            mixed.rows_mut(rows, dk).copy_from(&(vh * scores.transpose()));
            attn.push(scores);
        }
        let projected = &self.output_proj * &mixed;
        let residual = tokens + projected;
        let (x1, ln1) = self.norm_attn.forward(&residual);
        let (ff_out, ff) = self.feedforward.forward_cache(&x1)?;
        let residual2 = &x1 + ff_out;
        let (out, ln2) = self.norm_ff.forward(&residual2);
        Ok((out, AttentionCache { input: tokens.clone(), q, k, v, attn, mixed, ln1, ff, ln2 }))
    }

    /// Backprop through the block; returns parameter gradients and the
    /// gradient with respect to the input tokens.
    pub fn backward(
        &self,
        cache: &AttentionCache,
        grad_out: &DMatrix<f64>,
    ) -> Result<(AttentionGrad, DMatrix<f64>)> {
        let d = self.d_model();
        let n = cache.input.ncols();
        let dk = self.d_head();
        let scale = 1.0 / (dk as f64).sqrt();

        let (d_res2, ln2_scale, ln2_shift) = self.norm_ff.backward(&cache.ln2, grad_out);
        // residual2 = x1 + ff(x1)
        let (ff_grad, d_x1_ff) = self.feedforward.backward_batch(&cache.ff, &d_res2)?;
        let d_x1 = &d_res2 + d_x1_ff;
        let (d_res1, ln1_scale, ln1_shift) = self.norm_attn.backward(&cache.ln1, &d_x1);
        // residual = tokens + output_proj * mixed
        let d_proj = &d_res1;
        let d_wo = d_proj * cache.mixed.transpose();
        let d_mixed = self.output_proj.transpose() * d_proj;

        let mut d_q = DMatrix::zeros(d, n);
        let mut d_k = DMatrix::zeros(d, n);
        let mut d_v = DMatrix::zeros(d, n);
        for h in 0..self.n_heads {
            let rows = h * dk;
            let a = &cache.attn[h];
            let qh = cache.q.rows(rows, dk);
            let kh = cache.k.rows(rows, dk);
            let vh = cache.v.rows(rows, dk);
            let d_yh = d_mixed.rows(rows, dk);
            // Yh = Vh A^T
            d_v.rows_mut(rows, dk).copy_from(&(&d_yh * a));
            let d_a = d_yh.transpose() * vh; // N x N
            // softmax rows: dS_i = A_i o (dA_i - <dA_i, A_i>)
            let mut d_s = DMatrix::zeros(n, n);
            for i in 0..n {
                let dot: f64 = (0..n).map(|j| d_a[(i, j)] * a[(i, j)]).sum();
                for j in 0..n {
                    d_s[(i, j)] = a[(i, j)] * (d_a[(i, j)] - dot) * scale;
                }
            }
            // S = scale * Qh^T Kh
            d_q.rows_mut(rows, dk).copy_from(&(kh * d_s.transpose()));
            d_k.rows_mut(rows, dk).copy_from(&(qh * &d_s));
        }
        let x = &cache.input;
        let d_wq = &d_q * x.transpose();
        let d_wk = &d_k * x.transpose();
        let d_wv = &d_v * x.transpose();
        let d_input = &d_res1
            + self.query_proj.transpose() * d_q
            + self.key_proj.transpose() * d_k
            + self.value_proj.transpose() * d_v;
        Ok((
            AttentionGrad {
                query_proj: d_wq,
                key_proj: d_wk,
                value_proj: d_wv,
                output_proj: d_wo,
                feedforward: ff_grad,
                norm_attn_scale: ln1_scale,
                norm_attn_shift: ln1_shift,
                norm_ff_scale: ln2_scale,
                norm_ff_shift: ln2_shift,
            },
            d_input,
        ))
    }

    /// Attention matrices of the last forward pass (test hook).
    pub fn attention_matrices(&self, tokens: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        Ok(self.forward(tokens)?.1.attn)
    }

    pub fn param_count(&self) -> usize {
        4 * self.d_model() * self.d_model()
            + self.feedforward.param_count()
            + 4 * self.d_model()
    }

    pub fn collect_params(&self, out: &mut Vec<f64>) {
        for m in [&self.query_proj, &self.key_proj, &self.value_proj, &self.output_proj] {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.push(m[(r, c)]);
                }
            }
        }
        out.extend(self.norm_attn.scale.iter());
        out.extend(self.norm_attn.shift.iter());
        self.feedforward.collect_params(out);
        out.extend(self.norm_ff.scale.iter());
        out.extend(self.norm_ff.shift.iter());
    }

    pub fn assign_params(&mut self, src: &[f64], pos: &mut usize) {
        let d = self.query_proj.nrows();
        for m in [&mut self.query_proj, &mut self.key_proj, &mut self.value_proj, &mut self.output_proj] {
            for r in 0..d {
                for c in 0..d {
                    m[(r, c)] = src[*pos];
                    *pos += 1;
                }
            }
        }
        for v in self.norm_attn.scale.iter_mut().chain(self.norm_attn.shift.iter_mut()) {
            *v = src[*pos];
            *pos += 1;
        }
        self.feedforward.assign_params(src, pos);
        for v in self.norm_ff.scale.iter_mut().chain(self.norm_ff.shift.iter_mut()) {
            *v = src[*pos];
            *pos += 1;
        }
    }
}

impl AttentionGrad {
    /// Flattening order matches [`AttentionBlock::collect_params`].
    pub fn collect(&self, out: &mut Vec<f64>) {
        for m in [&self.query_proj, &self.key_proj, &self.value_proj, &self.output_proj] {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.push(m[(r, c)]);
                }
            }
        }
        out.extend(self.norm_attn_scale.iter());
        out.extend(self.norm_attn_shift.iter());
        self.feedforward.collect(out);
        out.extend(self.norm_ff_scale.iter());
        out.extend(self.norm_ff_shift.iter());
    }
}
