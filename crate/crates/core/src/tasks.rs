//! Seeded generators for the four synthetic regression task families:
//! clustered-prior tasks, high-variance robust tasks with non-Gaussian noise,
//! sparse-coefficient tasks, and 2-D ring-mixture tasks.
//!
//! Every task is a pure function of its spec and a 64-bit task seed (see
//! [`crate::seed`]), so a `MetaDataset` regenerates bit-identically from
//! `(spec, seed)`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, stream_rng};

/// One regression problem: a support set plus the ground truth it was
/// generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    /// Design matrix, `n_obs x p`.
    pub inputs: DMatrix<f64>,
    /// Responses, length `n_obs`.
    pub outputs: DVector<f64>,
    /// Ground-truth coefficient vector, length `p`.
    pub beta_true: DVector<f64>,
    pub n_obs: usize,
    /// Label of the generating regime (e.g. `"gaussian"`, `"k50"`).
    pub regime_tag: String,
    pub task_seed: u64,
}

impl Task {
    pub fn p(&self) -> usize {
        self.beta_true.len()
    }
}

/// Ordered collection of tasks with a train/test split.
///
/// The first `n_train` tasks are the training split; the rest are held out.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaDataset {
    pub tasks: Vec<Task>,
    pub n_train: usize,
    pub n_test: usize,
    pub global_seed: u64,
    pub spec_tag: String,
}

impl MetaDataset {
    pub fn new(tasks: Vec<Task>, n_train: usize, global_seed: u64, spec_tag: String) -> Result<Self> {
        if n_train > tasks.len() {
            return Err(Error::validation(format!(
                "n_train {} exceeds task count {}",
                n_train,
                tasks.len()
            )));
        }
        let n_test = tasks.len() - n_train;
        Ok(MetaDataset { tasks, n_train, n_test, global_seed, spec_tag })
    }

    pub fn train_tasks(&self) -> &[Task] {
        &self.tasks[..self.n_train]
    }

    pub fn test_tasks(&self) -> &[Task] {
        &self.tasks[self.n_train..]
    }
}

/// Clustered task prior: every coefficient vector equals one of `K` fixed
/// centroids drawn once from `N(0, tau^2 I_p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredPriorSpec {
    pub p: usize,
    pub k: usize,
    pub tau: f64,
    pub sigma_noise: f64,
    pub n_obs_min: usize,
    pub n_obs_max: usize,
    /// `K x p`; fixed after sampling and shared by train and test sets.
    pub centroids: DMatrix<f64>,
}

impl ClusteredPriorSpec {
    /// Sample the centroid set once; the result is reused for every task
    /// generated from this spec.
    pub fn sample(
        p: usize,
        k: usize,
        tau: f64,
        sigma_noise: f64,
        n_obs_min: usize,
        n_obs_max: usize,
        seed: u64,
    ) -> Result<Self> {
        if k < 1 {
            return Err(Error::validation("cluster count K must be >= 1"));
        }
        if p < 1 {
            return Err(Error::validation("feature dimension p must be >= 1"));
        }
        if tau < 0.0 || !tau.is_finite() {
            return Err(Error::validation("centroid scale tau must be finite and >= 0"));
        }
        if sigma_noise <= 0.0 || !sigma_noise.is_finite() {
            return Err(Error::validation("sigma_noise must be positive"));
        }
        if n_obs_min > n_obs_max || n_obs_min == 0 {
            return Err(Error::validation("need 1 <= n_obs_min <= n_obs_max"));
        }
        let mut rng = stream_rng(seed, 0);
        let centroids =
            DMatrix::from_fn(k, p, |_, _| tau * rng.sample::<f64, _>(StandardNormal));
        Ok(ClusteredPriorSpec { p, k, tau, sigma_noise, n_obs_min, n_obs_max, centroids })
    }
}

/// Residual distribution for the robustness experiment. All regimes have
/// exact mean zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegimeKind {
    Gaussian,
    Asymmetric,
    Bimodal,
    Trimodal,
}

impl RegimeKind {
    pub fn tag(self) -> &'static str {
        match self {
            RegimeKind::Gaussian => "gaussian",
            RegimeKind::Asymmetric => "asymmetric",
            RegimeKind::Bimodal => "bimodal",
            RegimeKind::Trimodal => "trimodal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRegime {
    pub kind: RegimeKind,
    pub mixture_weights: Vec<f64>,
    pub mixture_means: Vec<f64>,
    pub mixture_sds: Vec<f64>,
}

impl NoiseRegime {
    pub fn gaussian() -> Self {
        NoiseRegime {
            kind: RegimeKind::Gaussian,
            mixture_weights: vec![1.0],
            mixture_means: vec![0.0],
            mixture_sds: vec![1.0],
        }
    }

    /// Shifted exponential: `E - 1` with `E ~ Exp(1)`. The mixture fields are
    /// placeholders; sampling does not use them.
    pub fn asymmetric() -> Self {
        NoiseRegime {
            kind: RegimeKind::Asymmetric,
            mixture_weights: vec![1.0],
            mixture_means: vec![0.0],
            mixture_sds: vec![1.0],
        }
    }

    /// Two well-separated components with weights {0.8, 0.2}; means chosen so
    /// the mixture mean is exactly zero.
    pub fn bimodal() -> Self {
        NoiseRegime {
            kind: RegimeKind::Bimodal,
            mixture_weights: vec![0.8, 0.2],
            mixture_means: vec![-1.0, 4.0],
            mixture_sds: vec![1.0, 0.5],
        }
    }

    /// Three components with weights {0.8, 0.1, 0.1} and mixture mean zero.
    pub fn trimodal() -> Self {
        NoiseRegime {
            kind: RegimeKind::Trimodal,
            mixture_weights: vec![0.8, 0.1, 0.1],
            mixture_means: vec![0.0, -5.0, 5.0],
            mixture_sds: vec![1.0, 0.7, 0.7],
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "gaussian" => Ok(Self::gaussian()),
            "asymmetric" => Ok(Self::asymmetric()),
            "bimodal" => Ok(Self::bimodal()),
            "trimodal" => Ok(Self::trimodal()),
            other => Err(Error::validation(format!("unknown noise regime `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.mixture_weights;
        if w.len() != self.mixture_means.len() || w.len() != self.mixture_sds.len() {
            return Err(Error::validation("regime component vectors have unequal lengths"));
        }
        if (w.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::validation("mixture weights must sum to 1"));
        }
        if self.mixture_sds.iter().any(|s| *s <= 0.0) {
            return Err(Error::validation("mixture sds must be positive"));
        }
        let mean: f64 = w
            .iter()
            .zip(&self.mixture_means)
            .map(|(wi, mi)| wi * mi)
            .sum();
        if mean.abs() > 1e-9 {
            return Err(Error::validation("noise regime must have mean zero"));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self.kind {
            RegimeKind::Gaussian => rng.sample(StandardNormal),
            RegimeKind::Asymmetric => {
                let e: f64 = Exp1.sample(rng);
                e - 1.0
            }
            RegimeKind::Bimodal | RegimeKind::Trimodal => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut idx = self.mixture_weights.len() - 1;
                for (i, w) in self.mixture_weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        idx = i;
                        break;
                    }
                }
                self.mixture_means[idx]
                    + self.mixture_sds[idx] * rng.sample::<f64, _>(StandardNormal)
            }
        }
    }
}

/// Sparse coefficient tasks: a percentage `k` of the `p` coefficients is
/// exactly zero; the rest are Gaussian with sd `coef_sd`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTaskSpec {
    pub p: usize,
    /// Percent of coefficients that are zero, in [0, 100].
    pub sparsity_percent: u32,
    pub coef_sd: f64,
    pub n_obs_min: usize,
    pub n_obs_max: usize,
}

impl SparseTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sparsity_percent > 100 {
            return Err(Error::validation("sparsity percent must lie in [0, 100]"));
        }
        if self.coef_sd <= 0.0 || !self.coef_sd.is_finite() {
            return Err(Error::validation("coef_sd must be positive"));
        }
        if self.p == 0 || self.n_obs_min == 0 || self.n_obs_min > self.n_obs_max {
            return Err(Error::validation("invalid sparse task dimensions"));
        }
        Ok(())
    }

    /// Number of nonzero coefficients: `round(p * (1 - k/100))`.
    pub fn support_size(&self) -> usize {
        (self.p as f64 * (1.0 - self.sparsity_percent as f64 / 100.0)).round() as usize
    }
}

/// Ring-mixture prior over 2-D coefficients: `K` equally weighted Gaussian
/// modes on a circle of given radius.
#[derive(Debug, Clone, PartialEq)]
pub struct RingPriorSpec {
    pub k: usize,
    pub radius: f64,
    pub component_sd: f64,
    pub obs_noise_sd: f64,
}

impl Default for RingPriorSpec {
    fn default() -> Self {
        RingPriorSpec { k: 8, radius: 5.0, component_sd: 0.35, obs_noise_sd: 1.0 }
    }
}

impl RingPriorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::validation("ring mode count must be >= 1"));
        }
        if self.radius <= 0.0 || self.component_sd <= 0.0 || self.obs_noise_sd <= 0.0 {
            return Err(Error::validation("ring scales must be positive"));
        }
        Ok(())
    }

    /// Mode centers at angles `2*pi*k/K`, `k = 0..K-1`.
    pub fn mode_centers(&self) -> Vec<nalgebra::Vector2<f64>> {
        (0..self.k)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / self.k as f64;
                nalgebra::Vector2::new(self.radius * a.cos(), self.radius * a.sin())
            })
            .collect()
    }
}

fn standard_normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    // Row-major fill so the draw order matches the per-observation layout.
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = rng.sample(StandardNormal);
        }
    }
    m
}

fn linear_responses<R: Rng>(
    x: &DMatrix<f64>,
    beta: &DVector<f64>,
    regime: &NoiseRegime,
    noise_scale: f64,
    rng: &mut R,
) -> DVector<f64> {
    let mut y = x * beta;
    for v in y.iter_mut() {
        *v += noise_scale * regime.sample(rng);
    }
    y
}

/// Generate one clustered-prior task for a given task seed.
fn clustered_task(spec: &ClusteredPriorSpec, task_seed: u64) -> Task {
    let mut rng = stream_rng(task_seed, 0);
    let centroid_idx = rng.gen_range(0..spec.k);
    let beta_true = spec.centroids.row(centroid_idx).transpose();
    let n_obs = rng.gen_range(spec.n_obs_min..=spec.n_obs_max);
    let inputs = standard_normal_matrix(&mut rng, n_obs, spec.p);
    let outputs =
        linear_responses(&inputs, &beta_true, &NoiseRegime::gaussian(), spec.sigma_noise, &mut rng);
    Task {
        inputs,
        outputs,
        beta_true,
        n_obs,
        regime_tag: format!("cluster{centroid_idx}"),
        task_seed,
    }
}

/// Meta-dataset for the latent-structure experiment: every `beta_true` is one
/// of the spec's centroids, chosen uniformly.
pub fn gen_clustered_meta(
    spec: &ClusteredPriorSpec,
    n_tasks: usize,
    n_train: usize,
    seed: u64,
) -> Result<MetaDataset> {
    if n_tasks < 1 {
        return Err(Error::validation("n_tasks must be >= 1"));
    }
    let tasks: Vec<Task> = (0..n_tasks)
        .map(|t| clustered_task(spec, derive_seed(seed, t as u64)))
        .collect();
    MetaDataset::new(tasks, n_train, seed, format!("clustered_k{}", spec.k))
}

/// Meta-dataset for the robustness experiment: `beta ~ N(0, prior_sd^2 I_p)`,
/// residuals drawn from `regime`.
#[allow(clippy::too_many_arguments)]
pub fn gen_robust_meta(
    p: usize,
    prior_sd: f64,
    regime: &NoiseRegime,
    n_obs_min: usize,
    n_obs_max: usize,
    n_tasks: usize,
    n_train: usize,
    seed: u64,
) -> Result<MetaDataset> {
    if prior_sd <= 0.0 || !prior_sd.is_finite() {
        return Err(Error::validation("prior_sd must be positive"));
    }
    if p == 0 || n_obs_min == 0 || n_obs_min > n_obs_max {
        return Err(Error::validation("invalid robust task dimensions"));
    }
    regime.validate()?;
    let tasks: Vec<Task> = (0..n_tasks)
        .map(|t| {
            let task_seed = derive_seed(seed, t as u64);
            let mut rng = stream_rng(task_seed, 0);
            let beta_true =
                DVector::from_fn(p, |_, _| prior_sd * rng.sample::<f64, _>(StandardNormal));
            let n_obs = rng.gen_range(n_obs_min..=n_obs_max);
            let inputs = standard_normal_matrix(&mut rng, n_obs, p);
            let outputs = linear_responses(&inputs, &beta_true, regime, 1.0, &mut rng);
            Task {
                inputs,
                outputs,
                beta_true,
                n_obs,
                regime_tag: regime.kind.tag().to_string(),
                task_seed,
            }
        })
        .collect();
    MetaDataset::new(tasks, n_train, seed, format!("robust_{}", regime.kind.tag()))
}

/// Generate one sparse task at a given sparsity percent.
fn sparse_task(spec: &SparseTaskSpec, sparsity_percent: u32, task_seed: u64) -> Task {
    let spec = SparseTaskSpec { sparsity_percent, ..spec.clone() };
    let mut rng = stream_rng(task_seed, 0);
    let support = spec.support_size();
    // Uniform support without replacement: partial Fisher-Yates over indices.
    let mut idx: Vec<usize> = (0..spec.p).collect();
    for i in 0..support.min(spec.p) {
        let j = rng.gen_range(i..spec.p);
        idx.swap(i, j);
    }
    let mut beta_true = DVector::zeros(spec.p);
    for &j in idx.iter().take(support) {
        beta_true[j] = spec.coef_sd * rng.sample::<f64, _>(StandardNormal);
    }
    let n_obs = rng.gen_range(spec.n_obs_min..=spec.n_obs_max);
    let inputs = standard_normal_matrix(&mut rng, n_obs, spec.p);
    let outputs =
        linear_responses(&inputs, &beta_true, &NoiseRegime::gaussian(), 1.0, &mut rng);
    Task {
        inputs,
        outputs,
        beta_true,
        n_obs,
        regime_tag: format!("k{sparsity_percent}"),
        task_seed,
    }
}

/// Meta-dataset for the sparse recovery experiment: `tasks_per_level` tasks at
/// each sparsity level, shuffled deterministically before the split so a
/// prefix split is stratified.
pub fn gen_sparse_meta(
    spec: &SparseTaskSpec,
    tasks_per_level: usize,
    levels: &[u32],
    n_train: usize,
    seed: u64,
) -> Result<MetaDataset> {
    spec.validate()?;
    for &k in levels {
        if k > 100 {
            return Err(Error::validation(format!("sparsity level {k} outside [0, 100]")));
        }
    }
    let mut tasks = Vec::with_capacity(tasks_per_level * levels.len());
    for (li, &level) in levels.iter().enumerate() {
        for i in 0..tasks_per_level {
            let stream = (li * tasks_per_level + i) as u64;
            tasks.push(sparse_task(spec, level, derive_seed(seed, stream)));
        }
    }
    // Deterministic shuffle on its own stream, so per-task seeds stay tied to
    // (level, index) regardless of the final ordering.
    let mut rng = stream_rng(seed, u64::MAX);
    for i in (1..tasks.len()).rev() {
        let j = rng.gen_range(0..=i);
        tasks.swap(i, j);
    }
    MetaDataset::new(tasks, n_train, seed, "sparse".to_string())
}

/// One task from the ring-mixture prior. `n_obs = 0` yields an empty support
/// set (the posterior is then the prior).
pub fn gen_ring_task(spec: &RingPriorSpec, n_obs: usize, seed: u64) -> Result<Task> {
    spec.validate()?;
    let mut rng = stream_rng(seed, 0);
    let centers = spec.mode_centers();
    let mode = rng.gen_range(0..spec.k);
    let beta_true = DVector::from_fn(2, |i, _| {
        centers[mode][i] + spec.component_sd * rng.sample::<f64, _>(StandardNormal)
    });
    let inputs = standard_normal_matrix(&mut rng, n_obs, 2);
    let outputs =
        linear_responses(&inputs, &beta_true, &NoiseRegime::gaussian(), spec.obs_noise_sd, &mut rng);
    Ok(Task {
        inputs,
        outputs,
        beta_true,
        n_obs,
        regime_tag: "ring".to_string(),
        task_seed: seed,
    })
}

// ---------------------------------------------------------------------------
// Persistence: manifest + one CSV per task.
// ---------------------------------------------------------------------------

fn fmt_vec(v: &DVector<f64>) -> String {
    let mut s = String::new();
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{x}");
    }
    s
}

impl MetaDataset {
    /// Write the dataset to `dir`: a `manifest` file with spec fields, seeds
    /// and counts, plus `task_NNNNN.csv` per task (first line `beta_true`,
    /// then `n_obs` lines of `x_1,...,x_p,y`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        let _ = writeln!(manifest, "spec_tag={}", self.spec_tag);
        let _ = writeln!(manifest, "global_seed={}", self.global_seed);
        let _ = writeln!(manifest, "n_train={}", self.n_train);
        let _ = writeln!(manifest, "n_test={}", self.n_test);
        let _ = writeln!(manifest, "n_tasks={}", self.tasks.len());
        for (i, task) in self.tasks.iter().enumerate() {
            let _ = writeln!(
                manifest,
                "task_{i:05}={},{},{}",
                task.task_seed, task.regime_tag, task.n_obs
            );
        }
        std::fs::write(dir.join("manifest"), manifest)?;
        for (i, task) in self.tasks.iter().enumerate() {
            let mut body = String::new();
            let _ = writeln!(body, "{}", fmt_vec(&task.beta_true));
            for r in 0..task.n_obs {
                for c in 0..task.p() {
                    let _ = write!(body, "{},", task.inputs[(r, c)]);
                }
                let _ = writeln!(body, "{}", task.outputs[r]);
            }
            std::fs::write(dir.join(format!("task_{i:05}.csv")), body)?;
        }
        Ok(())
    }

    /// Inverse of [`MetaDataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = std::fs::read_to_string(dir.join("manifest"))?;
        let mut spec_tag = String::new();
        let mut global_seed = 0u64;
        let mut n_train = 0usize;
        let mut n_tasks = 0usize;
        let mut meta: Vec<(u64, String, usize)> = Vec::new();
        for line in manifest.lines() {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad manifest line `{line}`")))?;
            match key {
                "spec_tag" => spec_tag = value.to_string(),
                "global_seed" => {
                    global_seed =
                        value.parse().map_err(|e| Error::Parse(format!("global_seed: {e}")))?
                }
                "n_train" => {
                    n_train = value.parse().map_err(|e| Error::Parse(format!("n_train: {e}")))?
                }
                "n_test" => {}
                "n_tasks" => {
                    n_tasks = value.parse().map_err(|e| Error::Parse(format!("n_tasks: {e}")))?
                }
                k if k.starts_with("task_") => {
                    let mut parts = value.splitn(3, ',');
                    let seed: u64 = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::Parse(format!("bad task line `{line}`")))?;
                    let tag = parts
                        .next()
                        .ok_or_else(|| Error::Parse(format!("bad task line `{line}`")))?
                        .to_string();
                    let n_obs: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::Parse(format!("bad task line `{line}`")))?;
                    meta.push((seed, tag, n_obs));
                }
                other => return Err(Error::Parse(format!("unknown manifest key `{other}`"))),
            }
        }
        if meta.len() != n_tasks {
            return Err(Error::Parse("manifest task count mismatch".into()));
        }
        let mut tasks = Vec::with_capacity(n_tasks);
        for (i, (task_seed, regime_tag, n_obs)) in meta.into_iter().enumerate() {
            let body = std::fs::read_to_string(dir.join(format!("task_{i:05}.csv")))?;
            let mut lines = body.lines();
            let beta_line =
                lines.next().ok_or_else(|| Error::Parse(format!("task {i}: empty file")))?;
            let beta: Vec<f64> = beta_line
                .split(',')
                .map(|s| s.parse().map_err(|e| Error::Parse(format!("task {i}: {e}"))))
                .collect::<Result<_>>()?;
            let p = beta.len();
            let mut inputs = DMatrix::zeros(n_obs, p);
            let mut outputs = DVector::zeros(n_obs);
            for (r, line) in lines.enumerate() {
                let vals: Vec<f64> = line
                    .split(',')
                    .map(|s| s.parse().map_err(|e| Error::Parse(format!("task {i}: {e}"))))
                    .collect::<Result<_>>()?;
                if vals.len() != p + 1 {
                    return Err(Error::Parse(format!("task {i}: row {r} has wrong width")));
                }
                for c in 0..p {
                    inputs[(r, c)] = vals[c];
                }
                outputs[r] = vals[p];
            }
            tasks.push(Task {
                inputs,
                outputs,
                beta_true: DVector::from_vec(beta),
                n_obs,
                regime_tag,
                task_seed,
            });
        }
        MetaDataset::new(tasks, n_train, global_seed, spec_tag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clustered_spec(p: usize, k: usize, tau: f64, seed: u64) -> ClusteredPriorSpec {
        ClusteredPriorSpec::sample(p, k, tau, 1.0, 10, 30, seed).unwrap()
    }

    #[test]
    fn degenerate_prior_yields_zero_beta() {
        let spec = clustered_spec(3, 1, 0.0, 1);
        let meta = gen_clustered_meta(&spec, 20, 15, 2).unwrap();
        for t in &meta.tasks {
            assert!(t.beta_true.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn every_beta_is_exactly_a_centroid() {
        let spec = clustered_spec(20, 5, 3.0, 11);
        let meta = gen_clustered_meta(&spec, 200, 150, 12).unwrap();
        for t in &meta.tasks {
            let matches = (0..spec.k)
                .any(|k| (0..spec.p).all(|j| t.beta_true[j] == spec.centroids[(k, j)]));
            assert!(matches, "beta_true is not bit-equal to any centroid");
        }
    }

    #[test]
    fn centroid_variance_matches_prior_scale() {
        // Monte Carlo moment check: centroid entries are iid N(0, tau^2), so
        // their mean square should be close to tau^2 = 9. Use a large K*p so
        // the Monte Carlo error is well under the tolerance.
        let spec = clustered_spec(50, 200, 3.0, 31);
        let mean_sq = spec.centroids.iter().map(|c| c * c).sum::<f64>()
            / (spec.centroids.nrows() * spec.centroids.ncols()) as f64;
        assert!(
            (mean_sq - 9.0).abs() < 0.15 * 9.0,
            "per-coordinate variance {mean_sq} not within 15% of 9"
        );
    }

    #[test]
    fn invalid_clustered_spec_is_rejected() {
        assert!(ClusteredPriorSpec::sample(3, 0, 1.0, 1.0, 10, 20, 0).is_err());
        assert!(ClusteredPriorSpec::sample(3, 2, -1.0, 1.0, 10, 20, 0).is_err());
        assert!(ClusteredPriorSpec::sample(3, 2, 1.0, 0.0, 10, 20, 0).is_err());
    }

    #[test]
    fn gaussian_regime_sample_sd_near_one() {
        let mut rng = stream_rng(5, 0);
        let regime = NoiseRegime::gaussian();
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| regime.sample(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var.sqrt() - 1.0).abs() < 0.02);
    }

    #[test]
    fn asymmetric_regime_moments() {
        // Exp(1) - 1: mean 0, variance 1, skewness 2.
        let mut rng = stream_rng(6, 0);
        let regime = NoiseRegime::asymmetric();
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| regime.sample(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let m3 = draws.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n as f64;
        let skew = m3 / var.powf(1.5);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((skew - 2.0).abs() < 0.2, "skewness {skew}");
    }

    #[test]
    fn all_regimes_have_mean_near_zero() {
        for regime in [
            NoiseRegime::gaussian(),
            NoiseRegime::asymmetric(),
            NoiseRegime::bimodal(),
            NoiseRegime::trimodal(),
        ] {
            regime.validate().unwrap();
            let mut rng = stream_rng(7, regime.kind.tag().len() as u64);
            let n = 100_000;
            let draws: Vec<f64> = (0..n).map(|_| regime.sample(&mut rng)).collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            let se = (var / n as f64).sqrt();
            assert!(mean.abs() < 3.0 * se, "{}: mean {mean} vs 3se {}", regime.kind.tag(), 3.0 * se);
        }
    }

    #[test]
    fn robust_meta_split_counts() {
        let meta = gen_robust_meta(4, 9.0, &NoiseRegime::gaussian(), 10, 30, 6000, 5400, 3).unwrap();
        assert_eq!(meta.n_train, 5400);
        assert_eq!(meta.n_test, 600);
        assert_eq!(meta.tasks.len(), 6000);
    }

    #[test]
    fn sparse_meta_counts_and_supports() {
        let spec = SparseTaskSpec { p: 20, sparsity_percent: 0, coef_sd: 3f64.sqrt(), n_obs_min: 10, n_obs_max: 20 };
        let levels: Vec<u32> = (1..=20).map(|i| i * 5).collect();
        let meta = gen_sparse_meta(&spec, 300, &levels, 5400, 9).unwrap();
        assert_eq!(meta.tasks.len(), 6000);
        for t in &meta.tasks {
            let k: u32 = t.regime_tag[1..].parse().unwrap();
            let expect_nonzero = (20.0 * (1.0 - k as f64 / 100.0)).round() as usize;
            let nonzero = t.beta_true.iter().filter(|v| **v != 0.0).count();
            assert_eq!(nonzero, expect_nonzero, "level {k}");
        }
    }

    #[test]
    fn full_sparsity_gives_zero_vector() {
        let spec = SparseTaskSpec { p: 20, sparsity_percent: 100, coef_sd: 1.0, n_obs_min: 5, n_obs_max: 5 };
        let t = sparse_task(&spec, 100, 77);
        assert!(t.beta_true.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn half_sparsity_gives_ten_nonzeros() {
        let spec = SparseTaskSpec { p: 20, sparsity_percent: 50, coef_sd: 1.0, n_obs_min: 5, n_obs_max: 5 };
        for s in 0..50 {
            let t = sparse_task(&spec, 50, s);
            assert_eq!(t.beta_true.iter().filter(|v| **v != 0.0).count(), 10);
        }
    }

    #[test]
    fn sparse_level_out_of_range_is_rejected() {
        let spec = SparseTaskSpec { p: 20, sparsity_percent: 0, coef_sd: 1.0, n_obs_min: 5, n_obs_max: 5 };
        assert!(gen_sparse_meta(&spec, 1, &[101], 0, 0).is_err());
    }

    #[test]
    fn ring_mode_centers() {
        let spec = RingPriorSpec::default();
        let centers = spec.mode_centers();
        let r = 5.0 / 2f64.sqrt();
        assert!((centers[0] - nalgebra::Vector2::new(5.0, 0.0)).norm() < 1e-12);
        assert!((centers[1] - nalgebra::Vector2::new(r, r)).norm() < 1e-12);
        assert!((centers[2] - nalgebra::Vector2::new(0.0, 5.0)).norm() < 1e-12);
    }

    #[test]
    fn ring_task_with_no_observations() {
        let spec = RingPriorSpec::default();
        let t = gen_ring_task(&spec, 0, 4).unwrap();
        assert_eq!(t.n_obs, 0);
        assert_eq!(t.inputs.nrows(), 0);
        assert_eq!(t.outputs.len(), 0);
        assert!(t.beta_true.norm() > 0.0);
    }

    #[test]
    fn ring_modes_are_equally_likely() {
        let spec = RingPriorSpec::default();
        let centers = spec.mode_centers();
        let mut counts = vec![0usize; spec.k];
        let n = 100_000;
        for s in 0..n {
            let t = gen_ring_task(&spec, 0, derive_seed(100, s)).unwrap();
            let b = nalgebra::Vector2::new(t.beta_true[0], t.beta_true[1]);
            let nearest = (0..spec.k)
                .min_by(|&a, &c| {
                    (b - centers[a]).norm().partial_cmp(&(b - centers[c]).norm()).unwrap()
                })
                .unwrap();
            counts[nearest] += 1;
        }
        for c in counts {
            let share = c as f64 / n as f64;
            assert!((share - 0.125).abs() < 0.01, "bucket share {share}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = clustered_spec(6, 3, 2.0, 21);
        let a = gen_clustered_meta(&spec, 50, 40, 22).unwrap();
        let b = gen_clustered_meta(&spec, 50, 40, 22).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_and_test_seeds_are_disjoint() {
        let spec = clustered_spec(4, 2, 1.0, 23);
        let meta = gen_clustered_meta(&spec, 100, 80, 24).unwrap();
        let train: std::collections::HashSet<u64> =
            meta.train_tasks().iter().map(|t| t.task_seed).collect();
        assert!(meta.test_tasks().iter().all(|t| !train.contains(&t.task_seed)));
    }

    #[test]
    fn save_load_roundtrip() {
        let spec = clustered_spec(5, 2, 1.5, 41);
        let meta = gen_clustered_meta(&spec, 12, 9, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        meta.save(dir.path()).unwrap();
        let loaded = MetaDataset::load(dir.path()).unwrap();
        assert_eq!(meta, loaded);
    }
}
