//! Deep Sets estimator: per-token encoder, permutation-invariant pooling,
//! decoder. Tokens are the `[x; y]` pairs of a task's support set.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpCache, MlpGrad};
use crate::tasks::Task;

/// Pooling operator over the encoded token set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    /// Preserves set-size information.
    Sum,
    /// Set-size invariant; also defines the empty-set pool as the zero
    /// vector.
    Mean,
}

impl Pool {
    pub fn code(self) -> u8 {
        match self {
            Pool::Sum => 0,
            Pool::Mean => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Pool::Sum),
            1 => Ok(Pool::Mean),
            c => Err(Error::Parse(format!("unknown pool code {c}"))),
        }
    }
}

/// Token matrix of a task: column `j` is `[x_j; y_j]`, shape `(p+1) x N`.
pub fn task_tokens(task: &Task) -> DMatrix<f64> {
    let p = task.p();
    let n = task.n_obs;
    let mut tokens = DMatrix::zeros(p + 1, n);
    for j in 0..n {
        for i in 0..p {
            tokens[(i, j)] = task.inputs[(j, i)];
        }
        tokens[(p, j)] = task.outputs[j];
    }
    tokens
}

/// Encoder-pool-decoder set estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepSetsModel {
    pub encoder: Mlp,
    pub pool: Pool,
    pub decoder: Mlp,
}

pub struct DeepSetsCache {
    encoder: MlpCache,
    decoder: MlpCache,
    n_tokens: usize,
}

#[derive(Debug, Clone)]
pub struct DeepSetsGrad {
    pub encoder: MlpGrad,
    pub decoder: MlpGrad,
}

impl DeepSetsModel {
    /// Default architecture: encoder three hidden layers of 128 (ReLU) into a
    /// 128-wide latent, decoder two hidden layers of 128.
    pub fn init<R: Rng>(p: usize, pool: Pool, rng: &mut R) -> Self {
        Self::init_with(p, pool, &[128, 128, 128], 128, &[128, 128], rng)
    }

    pub fn init_with<R: Rng>(
        p: usize,
        pool: Pool,
        encoder_hidden: &[usize],
        latent: usize,
        decoder_hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut enc_widths = vec![p + 1];
        enc_widths.extend_from_slice(encoder_hidden);
        enc_widths.push(latent);
        let mut dec_widths = vec![latent];
        dec_widths.extend_from_slice(decoder_hidden);
        dec_widths.push(p);
        DeepSetsModel {
            encoder: Mlp::init(&enc_widths, Activation::ReLU, rng),
            pool,
            decoder: Mlp::init(&dec_widths, Activation::ReLU, rng),
        }
    }

    pub fn p(&self) -> usize {
        self.decoder.output_width()
    }

    pub fn latent_width(&self) -> usize {
        self.encoder.output_width()
    }

    /// Estimate the coefficient vector from a task's support set.
    pub fn forward(&self, task: &Task) -> Result<DVector<f64>> {
        Ok(self.forward_cache(task)?.0)
    }

    pub fn forward_cache(&self, task: &Task) -> Result<(DVector<f64>, DeepSetsCache)> {
        if task.n_obs == 0 {
            return Err(Error::validation("set estimator requires a non-empty task"));
        }
        let tokens = task_tokens(task);
        self.forward_tokens(&tokens)
    }

    /// Forward pass on an explicit token matrix (columns are tokens).
    pub fn forward_tokens(&self, tokens: &DMatrix<f64>) -> Result<(DVector<f64>, DeepSetsCache)> {
        let n = tokens.ncols();
        let (encoded, encoder) = self.encoder.forward_cache(tokens)?;
        let pooled = self.pool_columns(&encoded);
        let pooled_mat = DMatrix::from_column_slice(pooled.len(), 1, pooled.as_slice());
        let (out, decoder) = self.decoder.forward_cache(&pooled_mat)?;
        Ok((out.column(0).into_owned(), DeepSetsCache { encoder, decoder, n_tokens: n }))
    }

    /// Pooled summary of a token set; the empty mean-pool is the zero vector.
    pub fn pool_columns(&self, encoded: &DMatrix<f64>) -> DVector<f64> {
        let n = encoded.ncols();
        let mut z = DVector::zeros(encoded.nrows());
        for c in 0..n {
            z += encoded.column(c);
        }
        if self.pool == Pool::Mean && n > 0 {
            z /= n as f64;
        }
        z
    }

    /// Backprop the estimate gradient; returns parameter gradients and the
    /// gradient with respect to the token matrix.
    pub fn backward(
        &self,
        cache: &DeepSetsCache,
        grad_estimate: &DVector<f64>,
    ) -> Result<(DeepSetsGrad, DMatrix<f64>)> {
        let grad_mat =
            DMatrix::from_column_slice(grad_estimate.len(), 1, grad_estimate.as_slice());
        let (decoder_grad, d_pooled) = self.decoder.backward_batch(&cache.decoder, &grad_mat)?;
        let n = cache.n_tokens;
        let share = match self.pool {
            Pool::Sum => 1.0,
            Pool::Mean => 1.0 / n.max(1) as f64,
        };
        let latent = self.latent_width();
        let mut d_encoded = DMatrix::zeros(latent, n);
        for c in 0..n {
            for r in 0..latent {
                d_encoded[(r, c)] = d_pooled[(r, 0)] * share;
            }
        }
        let (encoder_grad, d_tokens) = self.encoder.backward_batch(&cache.encoder, &d_encoded)?;
        Ok((DeepSetsGrad { encoder: encoder_grad, decoder: decoder_grad }, d_tokens))
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    pub fn collect_params(&self, out: &mut Vec<f64>) {
        self.encoder.collect_params(out);
        self.decoder.collect_params(out);
    }

    pub fn assign_params(&mut self, src: &[f64], pos: &mut usize) {
        self.encoder.assign_params(src, pos);
        self.decoder.assign_params(src, pos);
    }
}

impl DeepSetsGrad {
    pub fn collect(&self, out: &mut Vec<f64>) {
        self.encoder.collect(out);
        self.decoder.collect(out);
    }
}
