//! Minimal differentiable numerics: dense layers, hand-rolled backprop,
//! an adaptive-moment optimizer, finite-difference gradient verification and
//! a flat binary checkpoint format. Everything is 64-bit.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    ReLU,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::ReLU => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative as a function of the pre-activation. The ReLU subgradient
    /// at 0 is taken to be 0.
    #[inline]
    pub fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
            Activation::Identity => 1.0,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::ReLU => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::ReLU),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            c => Err(Error::Parse(format!("unknown activation code {c}"))),
        }
    }
}

/// One affine layer: `a = act(W x + b)` with `W` of shape `n_out x n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

/// Fully-connected network; the final layer is always `Identity`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Per-layer gradients, shaped like the corresponding [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpGrad {
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

/// Cached intermediates of a batched forward pass (inputs as columns).
pub struct MlpCache {
    input: DMatrix<f64>,
    preacts: Vec<DMatrix<f64>>,
    acts: Vec<DMatrix<f64>>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::validation("network needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[1].weights.ncols() != w[0].weights.nrows() {
                return Err(Error::dimension(format!(
                    "layer widths do not chain: {} -> {}",
                    w[0].weights.nrows(),
                    w[1].weights.ncols()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.weights.nrows() {
                return Err(Error::dimension("bias length differs from layer width"));
            }
        }
        if layers.last().unwrap().activation != Activation::Identity {
            return Err(Error::validation("final layer activation must be Identity"));
        }
        Ok(Mlp { layers })
    }

    /// Fan-in-scaled uniform weights, zero biases. `widths` includes input
    /// and output widths; hidden layers get `hidden_act`.
    pub fn init<R: Rng>(widths: &[usize], hidden_act: Activation, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "need input and output widths");
        let n_layers = widths.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                let (n_in, n_out) = (widths[l], widths[l + 1]);
                let bound = 1.0 / (n_in as f64).sqrt();
                // Row-major fill order keeps checkpoints byte-stable across
                // layouts.
                let mut weights = DMatrix::zeros(n_out, n_in);
                for r in 0..n_out {
                    for c in 0..n_in {
                        weights[(r, c)] = rng.gen_range(-bound..bound);
                    }
                }
                DenseLayer {
                    weights,
                    bias: DVector::zeros(n_out),
                    activation: if l + 1 == n_layers { Activation::Identity } else { hidden_act },
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().weights.nrows()
    }

    /// Forward pass on a single input vector.
    pub fn forward(&self, input: &DVector<f64>) -> Result<DVector<f64>> {
        if input.len() != self.input_width() {
            return Err(Error::dimension(format!(
                "input length {} != first layer width {}",
                input.len(),
                self.input_width()
            )));
        }
        let mut a = input.clone();
        for layer in &self.layers {
            let mut z = &layer.weights * &a + &layer.bias;
            for v in z.iter_mut() {
                *v = layer.activation.apply(*v);
            }
            a = z;
        }
        Ok(a)
    }

    /// Batched forward pass; columns of `input` are independent samples.
    pub fn forward_batch(&self, input: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_cache(input)?.0)
    }

    /// Batched forward pass that retains intermediates for backprop.
    pub fn forward_cache(&self, input: &DMatrix<f64>) -> Result<(DMatrix<f64>, MlpCache)> {
        if input.nrows() != self.input_width() {
            return Err(Error::dimension(format!(
                "input rows {} != first layer width {}",
                input.nrows(),
                self.input_width()
            )));
        }
        let n = input.ncols();
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut a = input.clone();
        for layer in &self.layers {
            let mut z = &layer.weights * &a;
            for c in 0..n {
                let mut col = z.column_mut(c);
                col += &layer.bias;
            }
            preacts.push(z.clone());
            for v in z.iter_mut() {
                *v = layer.activation.apply(*v);
            }
            acts.push(z.clone());
            a = z;
        }
        Ok((a, MlpCache { input: input.clone(), preacts, acts }))
    }

    /// Backprop a batched output gradient; returns parameter gradients and
    /// the gradient with respect to the input columns.
    pub fn backward_batch(
        &self,
        cache: &MlpCache,
        grad_out: &DMatrix<f64>,
    ) -> Result<(MlpGrad, DMatrix<f64>)> {
        let l_count = self.layers.len();
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(l_count);
        let mut delta = grad_out.clone();
        for l in (0..l_count).rev() {
            let layer = &self.layers[l];
            // d(activation)
            if layer.activation != Activation::Identity {
                let z = &cache.preacts[l];
                for (d, zv) in delta.iter_mut().zip(z.iter()) {
                    *d *= layer.activation.deriv(*zv);
                }
            }
            if !delta.iter().all(|v| v.is_finite()) {
                return Err(Error::numeric(format!("non-finite gradient at layer {l}")));
            }
            let a_prev = if l == 0 { &cache.input } else { &cache.acts[l - 1] };
            let dw = &delta * a_prev.transpose();
            let db = DVector::from_fn(delta.nrows(), |r, _| delta.row(r).sum());
            grads.push((dw, db));
            delta = layer.weights.transpose() * delta;
        }
        grads.reverse();
        Ok((MlpGrad { layers: grads }, delta))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Append parameters (per layer: weights row-major, then bias).
    pub fn collect_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            for r in 0..l.weights.nrows() {
                for c in 0..l.weights.ncols() {
                    out.push(l.weights[(r, c)]);
                }
            }
            out.extend(l.bias.iter());
        }
    }

    /// Read parameters back in [`Mlp::collect_params`] order.
    pub fn assign_params(&mut self, src: &[f64], pos: &mut usize) {
        for l in &mut self.layers {
            for r in 0..l.weights.nrows() {
                for c in 0..l.weights.ncols() {
                    l.weights[(r, c)] = src[*pos];
                    *pos += 1;
                }
            }
            for b in l.bias.iter_mut() {
                *b = src[*pos];
                *pos += 1;
            }
        }
    }
}

impl MlpGrad {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrad {
            layers: mlp
                .layers
                .iter()
                .map(|l| (DMatrix::zeros(l.weights.nrows(), l.weights.ncols()), DVector::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn add(&mut self, other: &MlpGrad) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            *w *= s;
            *b *= s;
        }
    }

    /// Same flattening order as [`Mlp::collect_params`].
    pub fn collect(&self, out: &mut Vec<f64>) {
        for (w, b) in &self.layers {
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    out.push(w[(r, c)]);
                }
            }
            out.extend(b.iter());
        }
    }
}

// ---------------------------------------------------------------------------
// Adaptive-moment optimizer on flat parameter vectors.
// ---------------------------------------------------------------------------

/// Adam state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_stab: f64,
}

impl AdamState {
    pub fn new(n_params: usize, learning_rate: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon_stab: 1e-8,
        }
    }

    /// One bias-corrected update in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::dimension("optimizer buffers do not match parameters"));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.first_moment[i] = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            self.second_moment[i] =
                self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first_moment[i] / bc1;
            let v_hat = self.second_moment[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon_stab);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification.
// ---------------------------------------------------------------------------

/// Central-difference step used throughout the gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Worst parameter-wise relative discrepancy between `analytic` and central
/// finite differences of `loss` at `params`. Small gradients are compared
/// absolutely (denominator floored at 1).
pub fn grad_check<F: FnMut(&[f64]) -> f64>(
    params: &mut [f64],
    analytic: &[f64],
    mut loss: F,
    step: f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len());
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + step;
        let up = loss(params);
        params[i] = orig - step;
        let down = loss(params);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

// ---------------------------------------------------------------------------
// Checkpoints: flat binary, header then row-major 64-bit parameters.
// ---------------------------------------------------------------------------

const MLP_MAGIC: &[u8; 4] = b"AMLP";

/// Write an MLP checkpoint: magic, layer count, per-layer (n_out, n_in,
/// activation code), then parameters in [`Mlp::collect_params`] order as
/// little-endian f64.
pub fn write_mlp<W: Write>(w: &mut W, mlp: &Mlp) -> Result<()> {
    w.write_all(MLP_MAGIC)?;
    w.write_all(&(mlp.layers.len() as u32).to_le_bytes())?;
    for l in &mlp.layers {
        w.write_all(&(l.weights.nrows() as u32).to_le_bytes())?;
        w.write_all(&(l.weights.ncols() as u32).to_le_bytes())?;
        w.write_all(&[l.activation.code()])?;
    }
    let mut params = Vec::with_capacity(mlp.param_count());
    mlp.collect_params(&mut params);
    for p in params {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_mlp<R: Read>(r: &mut R) -> Result<Mlp> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MLP_MAGIC {
        return Err(Error::Parse("bad checkpoint magic".into()));
    }
    let n_layers = read_u32(r)? as usize;
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let n_out = read_u32(r)? as usize;
        let n_in = read_u32(r)? as usize;
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        shapes.push((n_out, n_in, Activation::from_code(code[0])?));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (n_out, n_in, act) in shapes {
        let mut weights = DMatrix::zeros(n_out, n_in);
        let mut buf = [0u8; 8];
        for row in 0..n_out {
            for col in 0..n_in {
                r.read_exact(&mut buf)?;
                weights[(row, col)] = f64::from_le_bytes(buf);
            }
        }
        let mut bias = DVector::zeros(n_out);
        for i in 0..n_out {
            r.read_exact(&mut buf)?;
            bias[i] = f64::from_le_bytes(buf);
        }
        layers.push(DenseLayer { weights, bias, activation: act });
    }
    Mlp::new(layers)
}
