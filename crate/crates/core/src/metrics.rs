//! Metrics and uncertainty quantification: coefficient error, cosine
//! similarity, simulation-based bootstrap stability, the energy two-sample
//! statistic and mode coverage of posterior samples.

use nalgebra::{DMatrix, DVector, Vector2};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::oracles::GaussianMixture;
use crate::seed::{derive_seed, rng_from};
use crate::tasks::{NoiseRegime, Task};

/// Stability summary of one estimator at one support-set size.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapReport {
    pub n_obs: usize,
    pub n_replicates: usize,
    pub per_coef_sd: DVector<f64>,
    /// Arithmetic mean of `per_coef_sd`.
    pub sigma_boot: f64,
    pub regime_tag: String,
}

/// One metric value destined for the run-level CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub metric_name: String,
    pub value: f64,
    pub n_tasks: usize,
    pub seed: u64,
    pub model_tag: String,
    pub checkpoint_epoch: String,
}

/// Mean squared Euclidean distance between estimate and truth over tasks.
pub fn mse_beta(estimates: &[DVector<f64>], truths: &[DVector<f64>]) -> Result<f64> {
    if estimates.len() != truths.len() {
        return Err(Error::validation(format!(
            "{} estimates vs {} truths",
            estimates.len(),
            truths.len()
        )));
    }
    if estimates.is_empty() {
        return Err(Error::validation("empty task list"));
    }
    let mut total = 0.0;
    for (e, t) in estimates.iter().zip(truths) {
        if e.len() != t.len() {
            return Err(Error::dimension(format!(
                "estimate length {} != truth length {}",
                e.len(),
                t.len()
            )));
        }
        total += (e - t).norm_squared();
    }
    Ok(total / estimates.len() as f64)
}

/// Cosine similarity plus a degeneracy flag: a zero vector yields value 0
/// with the flag set rather than an error, because fully-gated sparse
/// estimates can be exactly zero.
pub fn cosine_similarity_flagged(a: &DVector<f64>, b: &DVector<f64>) -> Result<(f64, bool)> {
    if a.len() != b.len() {
        return Err(Error::dimension(format!("lengths {} vs {}", a.len(), b.len())));
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Ok((0.0, true));
    }
    Ok(((a.dot(b) / (na * nb)).clamp(-1.0, 1.0), false))
}

/// Cosine similarity, with the degenerate zero-vector case mapped to 0.
pub fn cosine_similarity(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    Ok(cosine_similarity_flagged(a, b)?.0)
}

/// Simulation-based bootstrap: regenerate `b` datasets of size `n_obs` from
/// the fixed coefficients under the noise regime, rerun the estimator on
/// each, and report per-coefficient standard deviations with the unbiased
/// denominator. Replicates are reduced in replicate order.
pub fn bootstrap_stability<F>(
    estimate: F,
    beta_true: &DVector<f64>,
    n_obs: usize,
    b: usize,
    regime: &NoiseRegime,
    seed: u64,
) -> Result<BootstrapReport>
where
    F: Fn(&Task) -> Result<DVector<f64>>,
{
    if b < 2 {
        return Err(Error::validation("bootstrap needs at least 2 replicates"));
    }
    if n_obs == 0 {
        return Err(Error::validation("bootstrap needs at least one observation"));
    }
    regime.validate()?;
    let p = beta_true.len();
    let mut estimates = Vec::with_capacity(b);
    for rep in 0..b {
        let rep_seed = derive_seed(seed, rep as u64);
        let mut rng = rng_from(rep_seed);
        let inputs = DMatrix::from_fn(n_obs, p, |_, _| StandardNormal.sample(&mut rng));
        let noise = DVector::from_fn(n_obs, |_, _| regime.sample(&mut rng));
        let outputs = &inputs * beta_true + noise;
        let task = Task {
            inputs,
            outputs,
            beta_true: beta_true.clone(),
            n_obs,
            regime_tag: regime.kind.tag().to_string(),
            task_seed: rep_seed,
        };
        let est = estimate(&task)?;
        if est.len() != p {
            return Err(Error::dimension(format!(
                "estimator returned length {} for p = {p}",
                est.len()
            )));
        }
        estimates.push(est);
    }
    let mut per_coef_sd = DVector::zeros(p);
    for j in 0..p {
        let mean = estimates.iter().map(|e| e[j]).sum::<f64>() / b as f64;
        let var =
            estimates.iter().map(|e| (e[j] - mean).powi(2)).sum::<f64>() / (b as f64 - 1.0);
        per_coef_sd[j] = var.sqrt();
    }
    let sigma_boot = per_coef_sd.sum() / p as f64;
    Ok(BootstrapReport {
        n_obs,
        n_replicates: b,
        per_coef_sd,
        sigma_boot,
        regime_tag: regime.kind.tag().to_string(),
    })
}

/// Energy two-sample statistic between sample sets (rows are samples):
/// `E|X-Y| - E|X-X'|/2 - E|Y-Y'|/2` with all pair means taken as complete
/// V-statistics. Zero in expectation iff the sampling laws coincide, and
/// exactly zero for identical sample sets.
pub fn energy_distance(samples_a: &DMatrix<f64>, samples_b: &DMatrix<f64>) -> Result<f64> {
    let n = samples_a.nrows();
    let m = samples_b.nrows();
    if n < 2 || m < 2 {
        return Err(Error::validation("energy distance needs at least 2 samples per set"));
    }
    if samples_a.ncols() != samples_b.ncols() {
        return Err(Error::dimension("sample dimensions disagree"));
    }
    let d = samples_a.ncols();
    let dist = |x: &DMatrix<f64>, i: usize, y: &DMatrix<f64>, j: usize| {
        (0..d).map(|c| (x[(i, c)] - y[(j, c)]).powi(2)).sum::<f64>().sqrt()
    };
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += dist(samples_a, i, samples_b, j);
        }
    }
    cross /= (n * m) as f64;
    let mut within_a = 0.0;
    for i in 0..n {
        for j in 0..n {
            within_a += dist(samples_a, i, samples_a, j);
        }
    }
    within_a /= (n * n) as f64;
    let mut within_b = 0.0;
    for i in 0..m {
        for j in 0..m {
            within_b += dist(samples_b, i, samples_b, j);
        }
    }
    within_b /= (m * m) as f64;
    Ok(cross - 0.5 * within_a - 0.5 * within_b)
}

/// Share of samples whose nearest component mean is component k, per k.
pub fn mode_coverage(samples: &DMatrix<f64>, mix: &GaussianMixture) -> Result<DVector<f64>> {
    let n = samples.nrows();
    if n == 0 {
        return Err(Error::validation("mode coverage needs at least one sample"));
    }
    if samples.ncols() != 2 {
        return Err(Error::dimension("samples must be 2-dimensional"));
    }
    let k = mix.n_components();
    let mut counts = vec![0usize; k];
    for i in 0..n {
        let s = Vector2::new(samples[(i, 0)], samples[(i, 1)]);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, mu) in mix.means.iter().enumerate() {
            let d = (s - mu).norm_squared();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        counts[best] += 1;
    }
    Ok(DVector::from_iterator(k, counts.iter().map(|c| *c as f64 / n as f64)))
}
