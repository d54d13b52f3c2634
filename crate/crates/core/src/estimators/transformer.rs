//! Set Transformer estimator: token embedding, attention blocks without
//! positional encodings, mean pooling, and either a plain regression head or
//! the two-head sparse variant (magnitude + sparsity gate).

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpCache, MlpGrad};
use crate::tasks::Task;

use super::attention::{AttentionBlock, AttentionCache, AttentionGrad};
use super::deepsets::task_tokens;

/// Gate probabilities are clamped to this open interval.
pub const GATE_FLOOR: f64 = 1e-6;

/// Output of the sparse two-head model.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseHeadOutput {
    pub magnitude: DVector<f64>,
    /// Inclusion probabilities, strictly inside (0, 1).
    pub gate_prob: DVector<f64>,
    /// `magnitude .* gate_prob` (training estimate).
    pub beta_soft: DVector<f64>,
    /// `magnitude .* 1[gate_prob > 0.5]` (reporting estimate).
    pub beta_hard: DVector<f64>,
}

impl SparseHeadOutput {
    /// Split a raw `2p` head output into magnitudes and gated estimates.
    pub fn from_raw(raw: &DVector<f64>) -> Self {
        let p = raw.len() / 2;
        let magnitude = DVector::from_fn(p, |i, _| raw[i]);
        let gate_prob = DVector::from_fn(p, |i, _| {
            let g = 1.0 / (1.0 + (-raw[p + i]).exp());
            g.clamp(GATE_FLOOR, 1.0 - GATE_FLOOR)
        });
        let beta_soft = magnitude.component_mul(&gate_prob);
        let beta_hard =
            DVector::from_fn(p, |i, _| if gate_prob[i] > 0.5 { magnitude[i] } else { 0.0 });
        SparseHeadOutput { magnitude, gate_prob, beta_soft, beta_hard }
    }

    /// Gradient of the raw head output given a gradient on `beta_soft`.
    pub fn backward_soft(&self, raw: &DVector<f64>, d_beta_soft: &DVector<f64>) -> DVector<f64> {
        let p = self.magnitude.len();
        let mut d_raw = DVector::zeros(2 * p);
        for i in 0..p {
            let g = self.gate_prob[i];
            d_raw[i] = d_beta_soft[i] * g;
            // Clamped gates are flat; the sigmoid derivative applies only in
            // the interior.
            let sig = 1.0 / (1.0 + (-raw[p + i]).exp());
            let interior = sig > GATE_FLOOR && sig < 1.0 - GATE_FLOOR;
            d_raw[p + i] = if interior {
                d_beta_soft[i] * self.magnitude[i] * g * (1.0 - g)
            } else {
                0.0
            };
        }
        d_raw
    }
}

/// Head variant of the transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    /// Regression head emitting the coefficient estimate directly.
    Point,
    /// Two-head output: magnitudes and gate logits, width `2p`.
    Sparse,
}

impl OutputHead {
    pub fn code(self) -> u8 {
        match self {
            OutputHead::Point => 0,
            OutputHead::Sparse => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(OutputHead::Point),
            1 => Ok(OutputHead::Sparse),
            c => Err(Error::Parse(format!("unknown output head code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetTransformerModel {
    pub token_embed: Mlp,
    pub blocks: Vec<AttentionBlock>,
    pub head: Mlp,
    pub output: OutputHead,
    pub p: usize,
}

pub struct TransformerCache {
    embed: MlpCache,
    blocks: Vec<AttentionCache>,
    head: MlpCache,
    n_tokens: usize,
    raw: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct TransformerGrad {
    pub token_embed: MlpGrad,
    pub blocks: Vec<AttentionGrad>,
    pub head: MlpGrad,
}

impl SetTransformerModel {
    /// Default architecture: d_model 64, 4 heads, 2 blocks, feedforward 128.
    pub fn init<R: Rng>(p: usize, output: OutputHead, rng: &mut R) -> Result<Self> {
        Self::init_with(p, output, 64, 4, 2, 128, 64, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init_with<R: Rng>(
        p: usize,
        output: OutputHead,
        d_model: usize,
        n_heads: usize,
        n_blocks: usize,
        ff_width: usize,
        head_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let out_width = match output {
            OutputHead::Point => p,
            OutputHead::Sparse => 2 * p,
        };
        let blocks = (0..n_blocks)
            .map(|_| AttentionBlock::init(d_model, n_heads, ff_width, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(SetTransformerModel {
            token_embed: Mlp::init(&[p + 1, d_model], Activation::Identity, rng),
            blocks,
            head: Mlp::init(&[d_model, head_hidden, out_width], Activation::ReLU, rng),
            output,
            p,
        })
    }

    pub fn d_model(&self) -> usize {
        self.token_embed.output_width()
    }

    /// Raw head output (length `p` for Point, `2p` for Sparse) with cached
    /// intermediates.
    pub fn forward_cache(&self, task: &Task) -> Result<(DVector<f64>, TransformerCache)> {
        if task.n_obs == 0 {
            return Err(Error::validation("set estimator requires a non-empty task"));
        }
        let tokens = task_tokens(task);
        let n = tokens.ncols();
        let (mut x, embed) = self.token_embed.forward_cache(&tokens)?;
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&x)?;
            block_caches.push(cache);
            x = next;
        }
        // Mean pooling over tokens.
        let d = self.d_model();
        let mut pooled = DVector::zeros(d);
        for c in 0..n {
            pooled += x.column(c);
        }
        pooled /= n as f64;
        let pooled_mat = DMatrix::from_column_slice(d, 1, pooled.as_slice());
        let (raw, head) = self.head.forward_cache(&pooled_mat)?;
        let raw = raw.column(0).into_owned();
        Ok((raw.clone(), TransformerCache { embed, blocks: block_caches, head, n_tokens: n, raw }))
    }

    /// Point estimate of the coefficient vector. The sparse variant reports
    /// its soft-gated estimate.
    pub fn forward_point(&self, task: &Task) -> Result<DVector<f64>> {
        let (raw, _) = self.forward_cache(task)?;
        Ok(match self.output {
            OutputHead::Point => raw,
            OutputHead::Sparse => SparseHeadOutput::from_raw(&raw).beta_soft,
        })
    }

    /// Full two-head output; errors if this model has a plain head.
    pub fn forward_sparse(&self, task: &Task) -> Result<SparseHeadOutput> {
        if self.output != OutputHead::Sparse {
            return Err(Error::validation("model has no sparsity gate"));
        }
        let (raw, _) = self.forward_cache(task)?;
        Ok(SparseHeadOutput::from_raw(&raw))
    }

    /// Backprop a gradient on the raw head output.
    pub fn backward(
        &self,
        cache: &TransformerCache,
        d_raw: &DVector<f64>,
    ) -> Result<TransformerGrad> {
        let d = self.d_model();
        let n = cache.n_tokens;
        let d_raw_mat = DMatrix::from_column_slice(d_raw.len(), 1, d_raw.as_slice());
        let (head_grad, d_pooled) = self.head.backward_batch(&cache.head, &d_raw_mat)?;
        let mut d_x = DMatrix::zeros(d, n);
        for c in 0..n {
            for r in 0..d {
                d_x[(r, c)] = d_pooled[(r, 0)] / n as f64;
            }
        }
        let mut block_grads = vec![None; self.blocks.len()];
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let (grad, d_in) = block.backward(&cache.blocks[i], &d_x)?;
            block_grads[i] = Some(grad);
            d_x = d_in;
        }
        let (embed_grad, _) = self.token_embed.backward_batch(&cache.embed, &d_x)?;
        Ok(TransformerGrad {
            token_embed: embed_grad,
            blocks: block_grads.into_iter().map(|g| g.unwrap()).collect(),
            head: head_grad,
        })
    }

    pub fn cached_raw(cache: &TransformerCache) -> &DVector<f64> {
        &cache.raw
    }

    pub fn param_count(&self) -> usize {
        self.token_embed.param_count()
            + self.blocks.iter().map(|b| b.param_count()).sum::<usize>()
            + self.head.param_count()
    }

    pub fn collect_params(&self, out: &mut Vec<f64>) {
        self.token_embed.collect_params(out);
        for b in &self.blocks {
            b.collect_params(out);
        }
        self.head.collect_params(out);
    }

    pub fn assign_params(&mut self, src: &[f64], pos: &mut usize) {
        self.token_embed.assign_params(src, pos);
        for b in &mut self.blocks {
            b.assign_params(src, pos);
        }
        self.head.assign_params(src, pos);
    }
}

impl TransformerGrad {
    pub fn collect(&self, out: &mut Vec<f64>) {
        self.token_embed.collect(out);
        for b in &self.blocks {
            b.collect(out);
        }
        self.head.collect(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{rng_from, stream_rng};
    use crate::tasks::{gen_clustered_meta, ClusteredPriorSpec};
    use rand::seq::SliceRandom;

    fn small_model(p: usize, output: OutputHead, seed: u64) -> SetTransformerModel {
        let mut rng = rng_from(seed);
        SetTransformerModel::init_with(p, output, 8, 2, 2, 16, 8, &mut rng).unwrap()
    }

    fn sample_task(p: usize, seed: u64) -> Task {
        let spec = ClusteredPriorSpec::sample(p, 2, 1.0, 1.0, 6, 10, seed).unwrap();
        gen_clustered_meta(&spec, 1, 1, seed + 1).unwrap().tasks.remove(0)
    }

    #[test]
    fn output_is_permutation_invariant() {
        let model = small_model(3, OutputHead::Point, 1);
        let task = sample_task(3, 2);
        let base = model.forward_point(&task).unwrap();
        for s in 0..20u64 {
            let mut order: Vec<usize> = (0..task.n_obs).collect();
            order.shuffle(&mut stream_rng(s, 1));
            let mut t = task.clone();
            for (dst, &src) in order.iter().enumerate() {
                for c in 0..task.p() {
                    t.inputs[(dst, c)] = task.inputs[(src, c)];
                }
                t.outputs[dst] = task.outputs[src];
            }
            let out = model.forward_point(&t).unwrap();
            assert!((&out - &base).norm() < 1e-9);
        }
    }

    #[test]
    fn low_gates_zero_out_hard_estimate() {
        let raw = DVector::from_vec(vec![2.0, 3.0, -10.0, -0.5]); // gates ~ 0, 0.378
        let out = SparseHeadOutput::from_raw(&raw);
        assert!(out.gate_prob.iter().all(|g| *g <= 0.5));
        assert!(out.beta_hard.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gating_definition() {
        // gate_prob (0.9, 0.2), magnitude (2, 3):
        // beta_hard = (2, 0), beta_soft = (1.8, 0.6).
        let logit_09 = (0.9f64 / 0.1).ln();
        let logit_02 = (0.2f64 / 0.8).ln();
        let raw = DVector::from_vec(vec![2.0, 3.0, logit_09, logit_02]);
        let out = SparseHeadOutput::from_raw(&raw);
        assert!((out.beta_hard[0] - 2.0).abs() < 1e-12);
        assert_eq!(out.beta_hard[1], 0.0);
        assert!((out.beta_soft[0] - 1.8).abs() < 1e-12);
        assert!((out.beta_soft[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn hard_and_soft_estimates_are_consistent() {
        let model = small_model(4, OutputHead::Sparse, 3);
        for s in 0..10 {
            let out = model.forward_sparse(&sample_task(4, 50 + s)).unwrap();
            for i in 0..4 {
                assert!(out.gate_prob[i] > 0.0 && out.gate_prob[i] < 1.0);
                if out.gate_prob[i] > 0.5 {
                    assert_eq!(out.beta_hard[i], out.magnitude[i]);
                    assert!((out.beta_soft[i] - out.magnitude[i] * out.gate_prob[i]).abs() < 1e-12);
                } else {
                    assert_eq!(out.beta_hard[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = small_model(3, OutputHead::Point, 5);
        let task = sample_task(3, 6);
        let target = DVector::from_vec(vec![0.1, -0.4, 0.2]);
        let (raw, cache) = model.forward_cache(&task).unwrap();
        let grads = model.backward(&cache, &(2.0 * (&raw - &target))).unwrap();
        let mut analytic = Vec::new();
        grads.collect(&mut analytic);
        let mut params = Vec::new();
        model.collect_params(&mut params);
        let mut probe = model.clone();
        let worst = crate::nn::grad_check(
            &mut params,
            &analytic,
            |p| {
                let mut pos = 0;
                probe.assign_params(p, &mut pos);
                let (raw, _) = probe.forward_cache(&task).unwrap();
                (&raw - &target).norm_squared()
            },
            crate::nn::FD_STEP,
        );
        assert!(worst < 1e-4, "worst discrepancy {worst}");
    }

    #[test]
    fn sparse_soft_gradients_match_finite_differences() {
        let model = small_model(2, OutputHead::Sparse, 7);
        let task = sample_task(2, 8);
        let target = DVector::from_vec(vec![0.5, -0.5]);
        let loss_of = |m: &SetTransformerModel| {
            let out = m.forward_sparse(&task).unwrap();
            (&out.beta_soft - &target).norm_squared()
        };
        let (raw, cache) = model.forward_cache(&task).unwrap();
        let out = SparseHeadOutput::from_raw(&raw);
        let d_soft = 2.0 * (&out.beta_soft - &target);
        let d_raw = out.backward_soft(&raw, &d_soft);
        let grads = model.backward(&cache, &d_raw).unwrap();
        let mut analytic = Vec::new();
        grads.collect(&mut analytic);
        let mut params = Vec::new();
        model.collect_params(&mut params);
        let mut probe = model.clone();
        let worst = crate::nn::grad_check(
            &mut params,
            &analytic,
            |p| {
                let mut pos = 0;
                probe.assign_params(p, &mut pos);
                loss_of(&probe)
            },
            crate::nn::FD_STEP,
        );
        assert!(worst < 1e-4, "worst discrepancy {worst}");
    }
}
