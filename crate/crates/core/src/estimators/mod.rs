//! Permutation-invariant neural estimators and their shared training loop.

pub mod attention;
pub mod deepsets;
pub mod transformer;

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{read_mlp, write_mlp, AdamState};
use crate::seed::stream_rng;
use crate::tasks::Task;

pub use attention::{AttentionBlock, AttentionGrad, LayerNorm};
pub use deepsets::{task_tokens, DeepSetsCache, DeepSetsGrad, DeepSetsModel, Pool};
pub use transformer::{
    OutputHead, SetTransformerModel, SparseHeadOutput, TransformerCache, TransformerGrad,
};

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean squared error against the true coefficients, averaged over
    /// coordinates.
    ParamMse,
    /// Mean squared prediction error on the task's own observations.
    PredictiveMse,
}

impl LossKind {
    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "param_mse" => Ok(LossKind::ParamMse),
            "predictive_mse" => Ok(LossKind::PredictiveMse),
            t => Err(Error::Parse(format!("unknown loss kind {t}"))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            LossKind::ParamMse => "param_mse",
            LossKind::PredictiveMse => "predictive_mse",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_tasks: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// Epochs (1-based, after the update) at which to snapshot parameters.
    pub checkpoint_epochs: Vec<usize>,
    /// Re-draw a joint coordinate permutation and sign flip of `(X, beta)`
    /// per task per epoch. Exact for priors that are exchangeable and
    /// sign-symmetric across coordinates (the robustness and sparse task
    /// families); invalid under the clustered prior, whose centroids break
    /// the symmetry.
    pub augment_coordinates: bool,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_tasks: usize, learning_rate: f64, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_tasks,
            learning_rate,
            loss: LossKind::ParamMse,
            seed,
            checkpoint_epochs: Vec::new(),
            augment_coordinates: false,
        }
    }
}

/// Apply a joint coordinate permutation and sign flip: `X'_{.j} = s_j
/// X_{.pi(j)}`, `beta'_j = s_j beta_{pi(j)}`, leaving `X' beta' = X beta` and
/// hence the outputs unchanged.
fn coordinate_augmented<R: Rng>(task: &Task, rng: &mut R) -> Task {
    let p = task.p();
    let mut perm: Vec<usize> = (0..p).collect();
    perm.shuffle(rng);
    let signs: Vec<f64> = (0..p).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    let inputs = DMatrix::from_fn(task.n_obs, p, |r, j| signs[j] * task.inputs[(r, perm[j])]);
    let beta_true = DVector::from_fn(p, |j, _| signs[j] * task.beta_true[perm[j]]);
    Task { inputs, beta_true, ..task.clone() }
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_mse: f64,
}

/// Loss curve plus any parameter snapshots taken along the way.
#[derive(Debug, Clone)]
pub struct TrainingTrace {
    pub records: Vec<EpochRecord>,
    pub checkpoints: Vec<(usize, Vec<f64>)>,
}

/// Either of the two set estimators behind one training interface.
#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorModel {
    DeepSets(DeepSetsModel),
    SetTransformer(SetTransformerModel),
}

pub enum EstimatorCache {
    DeepSets(DeepSetsCache),
    SetTransformer(TransformerCache),
}

impl EstimatorModel {
    pub fn kind(&self) -> &'static str {
        match self {
            EstimatorModel::DeepSets(_) => "deep_sets",
            EstimatorModel::SetTransformer(m) => match m.output {
                OutputHead::Point => "set_transformer",
                OutputHead::Sparse => "set_transformer_sparse",
            },
        }
    }

    pub fn p(&self) -> usize {
        match self {
            EstimatorModel::DeepSets(m) => m.p(),
            EstimatorModel::SetTransformer(m) => m.p,
        }
    }

    fn gated(&self) -> bool {
        matches!(
            self,
            EstimatorModel::SetTransformer(SetTransformerModel { output: OutputHead::Sparse, .. })
        )
    }

    /// Raw head output and backprop cache.
    pub fn forward_raw(&self, task: &Task) -> Result<(DVector<f64>, EstimatorCache)> {
        match self {
            EstimatorModel::DeepSets(m) => {
                let (out, cache) = m.forward_cache(task)?;
                Ok((out, EstimatorCache::DeepSets(cache)))
            }
            EstimatorModel::SetTransformer(m) => {
                let (out, cache) = m.forward_cache(task)?;
                Ok((out, EstimatorCache::SetTransformer(cache)))
            }
        }
    }

    /// Coefficient estimate used during training (soft gates for the sparse
    /// head).
    pub fn estimate(&self, task: &Task) -> Result<DVector<f64>> {
        let (raw, _) = self.forward_raw(task)?;
        Ok(self.raw_to_estimate(&raw))
    }

    /// Reporting estimate: hard-thresholded gates for the sparse head,
    /// identical to [`EstimatorModel::estimate`] otherwise.
    pub fn estimate_hard(&self, task: &Task) -> Result<DVector<f64>> {
        let (raw, _) = self.forward_raw(task)?;
        if self.gated() {
            Ok(SparseHeadOutput::from_raw(&raw).beta_hard)
        } else {
            Ok(raw)
        }
    }

    fn raw_to_estimate(&self, raw: &DVector<f64>) -> DVector<f64> {
        if self.gated() {
            SparseHeadOutput::from_raw(raw).beta_soft
        } else {
            raw.clone()
        }
    }

    fn backward_flat(&self, cache: &EstimatorCache, d_raw: &DVector<f64>) -> Result<Vec<f64>> {
        let mut flat = Vec::with_capacity(self.param_count());
        match (self, cache) {
            (EstimatorModel::DeepSets(m), EstimatorCache::DeepSets(c)) => {
                let (grad, _) = m.backward(c, d_raw)?;
                grad.collect(&mut flat);
            }
            (EstimatorModel::SetTransformer(m), EstimatorCache::SetTransformer(c)) => {
                let grad = m.backward(c, d_raw)?;
                grad.collect(&mut flat);
            }
            _ => return Err(Error::validation("cache does not match estimator")),
        }
        Ok(flat)
    }

    pub fn param_count(&self) -> usize {
        match self {
            EstimatorModel::DeepSets(m) => m.param_count(),
            EstimatorModel::SetTransformer(m) => m.param_count(),
        }
    }

    pub fn collect_params(&self, out: &mut Vec<f64>) {
        match self {
            EstimatorModel::DeepSets(m) => m.collect_params(out),
            EstimatorModel::SetTransformer(m) => m.collect_params(out),
        }
    }

    pub fn assign_params(&mut self, src: &[f64], pos: &mut usize) {
        match self {
            EstimatorModel::DeepSets(m) => m.assign_params(src, pos),
            EstimatorModel::SetTransformer(m) => m.assign_params(src, pos),
        }
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.param_count() {
            return Err(Error::dimension(format!(
                "parameter vector length {} != model size {}",
                src.len(),
                self.param_count()
            )));
        }
        let mut pos = 0;
        self.assign_params(src, &mut pos);
        Ok(())
    }
}

/// Loss value and gradient with respect to the raw head output.
fn task_loss(
    model: &EstimatorModel,
    raw: &DVector<f64>,
    task: &Task,
    loss: LossKind,
) -> (f64, DVector<f64>) {
    let beta = model.raw_to_estimate(raw);
    let (value, d_beta) = match loss {
        LossKind::ParamMse => {
            let diff = &beta - &task.beta_true;
            (diff.norm_squared(), 2.0 * diff)
        }
        LossKind::PredictiveMse => {
            let n = task.n_obs as f64;
            let resid = &task.inputs * &beta - &task.outputs;
            (resid.norm_squared() / n, 2.0 / n * task.inputs.transpose() * resid)
        }
    };
    let d_raw = if model.gated() {
        SparseHeadOutput::from_raw(raw).backward_soft(raw, &d_beta)
    } else {
        d_beta
    };
    (value, d_raw)
}

/// Mean loss over `tasks` and its flat parameter gradient; the entry point
/// the finite-difference checks drive.
pub fn loss_and_grad(
    model: &EstimatorModel,
    tasks: &[Task],
    loss: LossKind,
) -> Result<(f64, Vec<f64>)> {
    if tasks.is_empty() {
        return Err(Error::validation("need at least one task"));
    }
    let scale = 1.0 / tasks.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; model.param_count()];
    for task in tasks {
        let (raw, cache) = model.forward_raw(task)?;
        let (value, d_raw) = task_loss(model, &raw, task, loss);
        total += value;
        let flat = model.backward_flat(&cache, &(scale * d_raw))?;
        for (a, g) in grad.iter_mut().zip(&flat) {
            *a += g;
        }
    }
    Ok((total * scale, grad))
}

/// Mini-batch training with adaptive-moment updates. Task order is
/// reshuffled each epoch from the config seed; the trace records per-epoch
/// mean train loss and held-out coefficient MSE.
pub fn train_estimator(
    model: &mut EstimatorModel,
    train: &[Task],
    heldout: &[Task],
    config: &TrainConfig,
) -> Result<TrainingTrace> {
    if train.is_empty() {
        return Err(Error::validation("no training tasks"));
    }
    if config.batch_tasks == 0 {
        return Err(Error::validation("batch size must be positive"));
    }
    let n_params = model.param_count();
    let mut params = Vec::with_capacity(n_params);
    model.collect_params(&mut params);
    let mut adam = AdamState::new(n_params, config.learning_rate);
    let mut records = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::new();

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(config.seed, epoch as u64));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_tasks) {
            let mut grad_acc = vec![0.0; n_params];
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let augmented;
                let task: &Task = if config.augment_coordinates {
                    let stream = ((epoch as u64) << 32) ^ idx as u64;
                    augmented = coordinate_augmented(&train[idx], &mut stream_rng(config.seed, stream));
                    &augmented
                } else {
                    &train[idx]
                };
                let (raw, cache) = model.forward_raw(task)?;
                let (value, d_raw) = task_loss(model, &raw, task, config.loss);
                if !value.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        msg: format!("non-finite loss on task seed {}", task.task_seed),
                    });
                }
                batch_loss += value;
                let flat = model.backward_flat(&cache, &d_raw)?;
                for (g, f) in grad_acc.iter_mut().zip(&flat) {
                    *g += f;
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in grad_acc.iter_mut() {
                *g *= inv;
            }
            adam.step(&mut params, &grad_acc)?;
            model.set_params(&params)?;
            epoch_loss += batch_loss;
        }
        let train_loss = epoch_loss / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Training { epoch, msg: "training diverged".into() });
        }
        let heldout_mse = if heldout.is_empty() {
            f64::NAN
        } else {
            evaluate_estimator(model, heldout, EvalMetric::MseBeta)?
        };
        records.push(EpochRecord { epoch, train_loss, heldout_mse });
        if config.checkpoint_epochs.contains(&epoch) {
            checkpoints.push((epoch, params.clone()));
        }
    }
    Ok(TrainingTrace { records, checkpoints })
}

/// Evaluation metric over a task set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMetric {
    /// Coefficient MSE of the training-time estimate.
    MseBeta,
    /// Cosine similarity between the hard estimate and the truth.
    Cosine,
}

/// Mean metric value over `tasks`.
pub fn evaluate_estimator(
    model: &EstimatorModel,
    tasks: &[Task],
    metric: EvalMetric,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::validation("no evaluation tasks"));
    }
    match metric {
        EvalMetric::MseBeta => {
            let estimates = tasks
                .iter()
                .map(|t| model.estimate(t))
                .collect::<Result<Vec<_>>>()?;
            let truths: Vec<DVector<f64>> = tasks.iter().map(|t| t.beta_true.clone()).collect();
            crate::metrics::mse_beta(&estimates, &truths)
        }
        EvalMetric::Cosine => {
            let mut total = 0.0;
            for task in tasks {
                total +=
                    crate::metrics::cosine_similarity(&model.estimate_hard(task)?, &task.beta_true)?;
            }
            Ok(total / tasks.len() as f64)
        }
    }
}

// ---------------------------------------------------------------------------
// Estimator checkpoints: kind byte, architecture header, then parameters.
// ---------------------------------------------------------------------------

const EST_MAGIC: &[u8; 4] = b"AEST";

fn write_matrix<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            w.write_all(&m[(r, c)].to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(rows, cols);
    let mut buf = [0u8; 8];
    for row in 0..rows {
        for col in 0..cols {
            r.read_exact(&mut buf)?;
            m[(row, col)] = f64::from_le_bytes(buf);
        }
    }
    Ok(m)
}

fn write_vector<W: Write>(w: &mut W, v: &DVector<f64>) -> Result<()> {
    for x in v.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_vector<R: Read>(r: &mut R, len: usize) -> Result<DVector<f64>> {
    let mut v = DVector::zeros(len);
    let mut buf = [0u8; 8];
    for i in 0..len {
        r.read_exact(&mut buf)?;
        v[i] = f64::from_le_bytes(buf);
    }
    Ok(v)
}

fn write_block<W: Write>(w: &mut W, b: &AttentionBlock) -> Result<()> {
    w.write_all(&(b.n_heads as u32).to_le_bytes())?;
    for m in [&b.query_proj, &b.key_proj, &b.value_proj, &b.output_proj] {
        write_matrix(w, m)?;
    }
    write_vector(w, &b.norm_attn.scale)?;
    write_vector(w, &b.norm_attn.shift)?;
    write_mlp(w, &b.feedforward)?;
    write_vector(w, &b.norm_ff.scale)?;
    write_vector(w, &b.norm_ff.shift)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_block<R: Read>(r: &mut R, d_model: usize) -> Result<AttentionBlock> {
    let n_heads = read_u32(r)? as usize;
    if n_heads == 0 || d_model % n_heads != 0 {
        return Err(Error::Parse(format!("bad head count {n_heads} for d_model {d_model}")));
    }
    let query_proj = read_matrix(r, d_model, d_model)?;
    let key_proj = read_matrix(r, d_model, d_model)?;
    let value_proj = read_matrix(r, d_model, d_model)?;
    let output_proj = read_matrix(r, d_model, d_model)?;
    let mut norm_attn = LayerNorm::new(d_model);
    norm_attn.scale = read_vector(r, d_model)?;
    norm_attn.shift = read_vector(r, d_model)?;
    let feedforward = read_mlp(r)?;
    let mut norm_ff = LayerNorm::new(d_model);
    norm_ff.scale = read_vector(r, d_model)?;
    norm_ff.shift = read_vector(r, d_model)?;
    Ok(AttentionBlock {
        query_proj,
        key_proj,
        value_proj,
        output_proj,
        n_heads,
        feedforward,
        norm_attn,
        norm_ff,
    })
}

pub fn write_estimator<W: Write>(w: &mut W, model: &EstimatorModel) -> Result<()> {
    w.write_all(EST_MAGIC)?;
    match model {
        EstimatorModel::DeepSets(m) => {
            w.write_all(&[0u8, m.pool.code()])?;
            write_mlp(w, &m.encoder)?;
            write_mlp(w, &m.decoder)?;
        }
        EstimatorModel::SetTransformer(m) => {
            w.write_all(&[1u8, m.output.code()])?;
            w.write_all(&(m.p as u32).to_le_bytes())?;
            w.write_all(&(m.blocks.len() as u32).to_le_bytes())?;
            write_mlp(w, &m.token_embed)?;
            for b in &m.blocks {
                write_block(w, b)?;
            }
            write_mlp(w, &m.head)?;
        }
    }
    Ok(())
}

pub fn read_estimator<R: Read>(r: &mut R) -> Result<EstimatorModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != EST_MAGIC {
        return Err(Error::Parse("bad estimator checkpoint magic".into()));
    }
    let mut header = [0u8; 2];
    r.read_exact(&mut header)?;
    match header[0] {
        0 => {
            let pool = Pool::from_code(header[1])?;
            let encoder = read_mlp(r)?;
            let decoder = read_mlp(r)?;
            Ok(EstimatorModel::DeepSets(DeepSetsModel { encoder, pool, decoder }))
        }
        1 => {
            let output = OutputHead::from_code(header[1])?;
            let p = read_u32(r)? as usize;
            let n_blocks = read_u32(r)? as usize;
            let token_embed = read_mlp(r)?;
            let d_model = token_embed.output_width();
            let mut blocks = Vec::with_capacity(n_blocks);
            for _ in 0..n_blocks {
                blocks.push(read_block(r, d_model)?);
            }
            let head = read_mlp(r)?;
            Ok(EstimatorModel::SetTransformer(SetTransformerModel {
                token_embed,
                blocks,
                head,
                output,
                p,
            }))
        }
        k => Err(Error::Parse(format!("unknown estimator kind {k}"))),
    }
}
