//! Conditional flow-matching posterior sampler: a set-valued context
//! encoder, a velocity field trained on the straight-line transport path,
//! and ODE integration from the Gaussian base law to posterior samples.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, Vector2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::estimators::{task_tokens, DeepSetsModel, Pool, TrainConfig};
use crate::nn::{read_mlp, write_mlp, Activation, AdamState, Mlp};
use crate::seed::{derive_seed, rng_from, stream_rng};
use crate::tasks::{gen_ring_task, RingPriorSpec, Task};

/// Velocity-field sampler conditioned on a set-encoded context vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub context_encoder: DeepSetsModel,
    /// Maps `(t, beta_t, r)` to a 2-D velocity; input width `3 + d_ctx`.
    pub velocity_net: Mlp,
    pub d_ctx: usize,
}

/// One batch of straight-line training pairs: `zt = (1 - t) z0 + t z1`.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    pub z0: Vec<Vector2<f64>>,
    pub z1: Vec<Vector2<f64>>,
    pub t: Vec<f64>,
    pub zt: Vec<Vector2<f64>>,
}

impl FlowBatch {
    pub fn new(z0: Vec<Vector2<f64>>, z1: Vec<Vector2<f64>>, t: Vec<f64>) -> Result<Self> {
        if z0.len() != z1.len() || z0.len() != t.len() {
            return Err(Error::dimension("batch field lengths disagree"));
        }
        if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation("interpolation times must lie in [0, 1]"));
        }
        let zt = z0
            .iter()
            .zip(&z1)
            .zip(&t)
            .map(|((a, b), ti)| (1.0 - ti) * a + *ti * b)
            .collect();
        Ok(FlowBatch { z0, z1, t, zt })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Integration scheme for the sampling ODE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdeScheme {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy)]
pub struct OdeConfig {
    pub n_steps: usize,
    pub scheme: OdeScheme,
}

impl Default for OdeConfig {
    fn default() -> Self {
        OdeConfig { n_steps: 50, scheme: OdeScheme::Rk4 }
    }
}

impl OdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::validation("integration needs at least one step"));
        }
        Ok(())
    }
}

impl FlowModel {
    /// Default: mean-pooled set encoder into a 32-wide context, velocity net
    /// of four 128-wide Tanh layers (smooth fields integrate better than
    /// piecewise-linear ones).
    pub fn init<R: Rng>(rng: &mut R) -> Self {
        Self::init_with(32, &[64, 64], 64, &[64], &[128, 128, 128, 128], rng)
    }

    pub fn init_with<R: Rng>(
        d_ctx: usize,
        encoder_hidden: &[usize],
        latent: usize,
        context_hidden: &[usize],
        velocity_hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut enc_widths = vec![3];
        enc_widths.extend_from_slice(encoder_hidden);
        enc_widths.push(latent);
        let mut ctx_widths = vec![latent];
        ctx_widths.extend_from_slice(context_hidden);
        ctx_widths.push(d_ctx);
        let context_encoder = DeepSetsModel {
            encoder: Mlp::init(&enc_widths, Activation::ReLU, rng),
            pool: Pool::Mean,
            decoder: Mlp::init(&ctx_widths, Activation::ReLU, rng),
        };
        let mut vel_widths = vec![3 + d_ctx];
        vel_widths.extend_from_slice(velocity_hidden);
        vel_widths.push(2);
        FlowModel { context_encoder, velocity_net: Mlp::init(&vel_widths, Activation::Tanh, rng), d_ctx }
    }

    /// Context vector of a task. The empty task pools over zero tokens,
    /// which the mean pool defines as the zero vector, so the prior case is
    /// well-defined.
    pub fn context(&self, task: &Task) -> Result<DVector<f64>> {
        if task.p() != 2 {
            return Err(Error::dimension(format!("flow context needs p = 2, got {}", task.p())));
        }
        let tokens = task_tokens(task);
        Ok(self.context_encoder.forward_tokens(&tokens)?.0)
    }

    /// Velocity at `(t, z)` under context `r`.
    pub fn velocity(&self, t: f64, z: &Vector2<f64>, r: &DVector<f64>) -> Result<Vector2<f64>> {
        let mut input = DVector::zeros(3 + self.d_ctx);
        input[0] = t;
        input[1] = z[0];
        input[2] = z[1];
        for i in 0..self.d_ctx {
            input[3 + i] = r[i];
        }
        let out = self.velocity_net.forward(&input)?;
        Ok(Vector2::new(out[0], out[1]))
    }

    pub fn param_count(&self) -> usize {
        self.context_encoder.param_count() + self.velocity_net.param_count()
    }

    pub fn collect_params(&self, out: &mut Vec<f64>) {
        self.context_encoder.collect_params(out);
        self.velocity_net.collect_params(out);
    }

    pub fn assign_params(&mut self, src: &[f64], pos: &mut usize) {
        self.context_encoder.assign_params(src, pos);
        self.velocity_net.assign_params(src, pos);
    }

    pub fn set_params(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.param_count() {
            return Err(Error::dimension("parameter vector length mismatch"));
        }
        let mut pos = 0;
        self.assign_params(src, &mut pos);
        Ok(())
    }
}

/// Flow-matching loss over a batch paired with its generating tasks:
/// `mean |v(t, zt, r) - (z1 - z0)|^2`. Returns the loss and the flat
/// parameter gradient (encoder first, then velocity net).
pub fn cfm_loss(model: &FlowModel, batch: &FlowBatch, tasks: &[Task]) -> Result<(f64, Vec<f64>)> {
    let b = batch.len();
    if b == 0 || tasks.len() != b {
        return Err(Error::validation("batch and task list must be equal and non-empty"));
    }
    // Contexts per item, with per-task encoder caches retained.
    let mut ctx_caches = Vec::with_capacity(b);
    let mut vel_input = DMatrix::zeros(3 + model.d_ctx, b);
    for (i, task) in tasks.iter().enumerate() {
        if task.p() != 2 {
            return Err(Error::dimension("flow tasks must be 2-dimensional"));
        }
        let tokens = task_tokens(task);
        let (r, cache) = model.context_encoder.forward_tokens(&tokens)?;
        vel_input[(0, i)] = batch.t[i];
        vel_input[(1, i)] = batch.zt[i][0];
        vel_input[(2, i)] = batch.zt[i][1];
        for j in 0..model.d_ctx {
            vel_input[(3 + j, i)] = r[j];
        }
        ctx_caches.push(cache);
    }
    let (v, vel_cache) = model.velocity_net.forward_cache(&vel_input)?;
    let mut loss = 0.0;
    let mut d_v = DMatrix::zeros(2, b);
    for i in 0..b {
        let target = batch.z1[i] - batch.z0[i];
        let e0 = v[(0, i)] - target[0];
        let e1 = v[(1, i)] - target[1];
        loss += e0 * e0 + e1 * e1;
        d_v[(0, i)] = 2.0 * e0 / b as f64;
        d_v[(1, i)] = 2.0 * e1 / b as f64;
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::Training { epoch: 0, msg: "non-finite flow-matching loss".into() });
    }
    let (vel_grad, d_input) = model.velocity_net.backward_batch(&vel_cache, &d_v)?;

    let n_enc = model.context_encoder.param_count();
    let mut flat = vec![0.0; model.param_count()];
    for (i, cache) in ctx_caches.iter().enumerate() {
        let d_r = DVector::from_fn(model.d_ctx, |j, _| d_input[(3 + j, i)]);
        let (enc_grad, _) = model.context_encoder.backward(cache, &d_r)?;
        let mut item = Vec::with_capacity(n_enc);
        enc_grad.collect(&mut item);
        for (acc, g) in flat[..n_enc].iter_mut().zip(&item) {
            *acc += g;
        }
    }
    let mut vel_flat = Vec::with_capacity(model.param_count() - n_enc);
    vel_grad.collect(&mut vel_flat);
    flat[n_enc..].copy_from_slice(&vel_flat);
    Ok((loss, flat))
}

/// Integrate a generic 2-D time-dependent field from t = 0 to 1.
pub fn integrate<F>(field: F, z0: &Vector2<f64>, ode: &OdeConfig) -> Result<Vector2<f64>>
where
    F: Fn(f64, &Vector2<f64>) -> Result<Vector2<f64>>,
{
    ode.validate()?;
    if !z0.iter().all(|v| v.is_finite()) {
        return Err(Error::validation("initial state is not finite"));
    }
    let h = 1.0 / ode.n_steps as f64;
    let mut z = *z0;
    for step in 0..ode.n_steps {
        let t = step as f64 * h;
        z = match ode.scheme {
            OdeScheme::Euler => z + h * field(t, &z)?,
            OdeScheme::Rk4 => {
                let k1 = field(t, &z)?;
                let k2 = field(t + 0.5 * h, &(z + 0.5 * h * k1))?;
                let k3 = field(t + 0.5 * h, &(z + 0.5 * h * k2))?;
                let k4 = field(t + h, &(z + h * k3))?;
                z + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            }
        };
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!("non-finite state at step {step}")));
        }
    }
    Ok(z)
}

/// One posterior sample: integrate the learned field from `z0` under the
/// task's context.
pub fn integrate_flow(
    model: &FlowModel,
    task: &Task,
    z0: &Vector2<f64>,
    ode: &OdeConfig,
) -> Result<Vector2<f64>> {
    let r = model.context(task)?;
    integrate(|t, z| model.velocity(t, z, &r), z0, ode)
}

/// Draw `n_samples` posterior samples (rows). All particles advance in one
/// batched forward pass per integration stage; deterministic given the seed.
pub fn sample_posterior(
    model: &FlowModel,
    task: &Task,
    n_samples: usize,
    ode: &OdeConfig,
    seed: u64,
) -> Result<DMatrix<f64>> {
    ode.validate()?;
    if n_samples == 0 {
        return Ok(DMatrix::zeros(0, 2));
    }
    let r = model.context(task)?;
    let mut rng = rng_from(seed);
    // State matrix: particles as columns.
    let mut z = DMatrix::from_fn(2, n_samples, |_, _| StandardNormal.sample(&mut rng));
    let h = 1.0 / ode.n_steps as f64;
    let eval = |t: f64, state: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let mut input = DMatrix::zeros(3 + model.d_ctx, n_samples);
        for c in 0..n_samples {
            input[(0, c)] = t;
            input[(1, c)] = state[(0, c)];
            input[(2, c)] = state[(1, c)];
            for j in 0..model.d_ctx {
                input[(3 + j, c)] = r[j];
            }
        }
        model.velocity_net.forward_batch(&input)
    };
    for step in 0..ode.n_steps {
        let t = step as f64 * h;
        z = match ode.scheme {
            OdeScheme::Euler => &z + h * eval(t, &z)?,
            OdeScheme::Rk4 => {
                let k1 = eval(t, &z)?;
                let k2 = eval(t + 0.5 * h, &(&z + 0.5 * h * &k1))?;
                let k3 = eval(t + 0.5 * h, &(&z + 0.5 * h * &k2))?;
                let k4 = eval(t + h, &(&z + h * &k3))?;
                &z + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            }
        };
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!("non-finite state at step {step}")));
        }
    }
    let mut out = DMatrix::zeros(n_samples, 2);
    for i in 0..n_samples {
        out[(i, 0)] = z[(0, i)];
        out[(i, 1)] = z[(1, i)];
    }
    Ok(out)
}

/// Number of observations for one flow training task: the empty (prior)
/// task with probability 1/4, otherwise uniform on 1..=20.
fn training_n_obs<R: Rng>(rng: &mut R) -> usize {
    if rng.gen::<f64>() < 0.25 {
        0
    } else {
        rng.gen_range(1..=20)
    }
}

/// Train the flow on freshly simulated ring tasks. Every batch item draws a
/// new `(beta, task)` pair from the generative process, `z0` from the 2-D
/// standard Gaussian base law, and `t` uniform on `[0, 1]`.
pub fn train_flow(
    model: &mut FlowModel,
    spec: &RingPriorSpec,
    n_tasks: usize,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    spec.validate()?;
    if n_tasks == 0 {
        return Err(Error::validation("flow training needs at least one task per epoch"));
    }
    if cfg.batch_tasks == 0 {
        return Err(Error::validation("batch size must be positive"));
    }
    let n_params = model.param_count();
    let mut params = Vec::with_capacity(n_params);
    model.collect_params(&mut params);
    let mut adam = AdamState::new(n_params, cfg.learning_rate);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut item = 0usize;
        while item < n_tasks {
            let batch_n = cfg.batch_tasks.min(n_tasks - item);
            let mut tasks = Vec::with_capacity(batch_n);
            let mut z0 = Vec::with_capacity(batch_n);
            let mut z1 = Vec::with_capacity(batch_n);
            let mut t = Vec::with_capacity(batch_n);
            for j in 0..batch_n {
                let stream = (epoch as u64) * n_tasks as u64 + (item + j) as u64;
                let task_seed = derive_seed(cfg.seed, stream);
                let mut rng = stream_rng(cfg.seed, stream ^ (1 << 63));
                let task = gen_ring_task(spec, training_n_obs(&mut rng), task_seed)?;
                z1.push(Vector2::new(task.beta_true[0], task.beta_true[1]));
                z0.push(Vector2::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                ));
                t.push(rng.gen::<f64>());
                tasks.push(task);
            }
            let batch = FlowBatch::new(z0, z1, t)?;
            let (loss, grads) = cfm_loss(model, &batch, &tasks).map_err(|e| match e {
                Error::Training { msg, .. } => Error::Training { epoch, msg },
                other => other,
            })?;
            epoch_loss += loss * batch_n as f64;
            adam.step(&mut params, &grads)?;
            model.set_params(&params)?;
            item += batch_n;
        }
        let mean_loss = epoch_loss / n_tasks as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Training { epoch, msg: "flow training diverged".into() });
        }
        epoch_losses.push(mean_loss);
    }
    Ok(epoch_losses)
}

/// Staged schedule around [`train_flow`]: 40% of the epochs at `lr`, 40% at
/// `0.3 lr`, the rest at `0.1 lr` with a 4x batch. The late low-noise phase
/// settles the velocity field well below the plateau a constant step size
/// leaves behind.
pub fn train_flow_staged(
    model: &mut FlowModel,
    spec: &RingPriorSpec,
    n_tasks: usize,
    epochs: usize,
    batch_tasks: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let head = epochs * 2 / 5;
    let tail = epochs - 2 * head;
    let phases = [
        (head, learning_rate, batch_tasks),
        (head, 0.3 * learning_rate, batch_tasks),
        (tail, 0.1 * learning_rate, 4 * batch_tasks),
    ];
    let mut losses = Vec::with_capacity(epochs);
    for (i, &(e, lr, b)) in phases.iter().enumerate() {
        if e == 0 {
            continue;
        }
        let cfg = TrainConfig::new(e, b.min(n_tasks), lr, derive_seed(seed, 1000 + i as u64));
        losses.extend(train_flow(model, spec, n_tasks, &cfg)?);
    }
    Ok(losses)
}

// ---------------------------------------------------------------------------
// Checkpoints.
// ---------------------------------------------------------------------------

const FLOW_MAGIC: &[u8; 4] = b"AFLW";

pub fn write_flow<W: Write>(w: &mut W, model: &FlowModel) -> Result<()> {
    w.write_all(FLOW_MAGIC)?;
    w.write_all(&[model.context_encoder.pool.code()])?;
    w.write_all(&(model.d_ctx as u32).to_le_bytes())?;
    write_mlp(w, &model.context_encoder.encoder)?;
    write_mlp(w, &model.context_encoder.decoder)?;
    write_mlp(w, &model.velocity_net)?;
    Ok(())
}

pub fn read_flow<R: Read>(r: &mut R) -> Result<FlowModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FLOW_MAGIC {
        return Err(Error::Parse("bad flow checkpoint magic".into()));
    }
    let mut pool_code = [0u8; 1];
    r.read_exact(&mut pool_code)?;
    let mut d_ctx_buf = [0u8; 4];
    r.read_exact(&mut d_ctx_buf)?;
    let d_ctx = u32::from_le_bytes(d_ctx_buf) as usize;
    let encoder = read_mlp(r)?;
    let decoder = read_mlp(r)?;
    let velocity_net = read_mlp(r)?;
    if velocity_net.input_width() != 3 + d_ctx {
        return Err(Error::Parse("velocity net width disagrees with context size".into()));
    }
    Ok(FlowModel {
        context_encoder: DeepSetsModel {
            encoder,
            pool: Pool::from_code(pool_code[0])?,
            decoder,
        },
        velocity_net,
        d_ctx,
    })
}
