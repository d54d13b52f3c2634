//! Experiment orchestration: flat text configs, seeded end-to-end runs of
//! the four experiments, CSV artifacts with a checksummed manifest, and the
//! flow-versus-MCMC timing benchmark.
//!
//! Every artifact except timing CSVs is byte-deterministic in
//! (config, root seed).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector, Vector2};
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimators::{
    evaluate_estimator, train_estimator, write_estimator, DeepSetsModel, EstimatorModel,
    EvalMetric, OutputHead, Pool, SetTransformerModel, TrainConfig, TrainingTrace,
};
use crate::flow::{sample_posterior, train_flow_staged, write_flow, FlowModel, OdeConfig, OdeScheme};
use crate::metrics::{bootstrap_stability, cosine_similarity, mode_coverage, mse_beta};
use crate::oracles::{
    bayes_posterior_mean_clustered, exact_ring_posterior, ols_fit, rw_metropolis, sample_mixture,
    write_mixture, GaussianMixture, McmcConfig,
};
use crate::seed::{derive_seed, rng_from};
use crate::tasks::{
    gen_clustered_meta, gen_ring_task, gen_robust_meta, gen_sparse_meta, ClusteredPriorSpec,
    NoiseRegime, RingPriorSpec, SparseTaskSpec, Task,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    LatentStructure,
    Robustness,
    SparseRecovery,
    RingPosterior,
}

impl ExperimentKind {
    pub fn tag(self) -> &'static str {
        match self {
            ExperimentKind::LatentStructure => "latent_structure",
            ExperimentKind::Robustness => "robustness",
            ExperimentKind::SparseRecovery => "sparse_recovery",
            ExperimentKind::RingPosterior => "ring_posterior",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "latent_structure" => Ok(ExperimentKind::LatentStructure),
            "robustness" => Ok(ExperimentKind::Robustness),
            "sparse_recovery" => Ok(ExperimentKind::SparseRecovery),
            "ring_posterior" => Ok(ExperimentKind::RingPosterior),
            t => Err(Error::Parse(format!("unknown experiment {t}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Reduced task counts and epochs; preserves every ordering the paper
    /// reports while staying CI-friendly.
    Desk,
    Paper,
}

impl Profile {
    pub fn tag(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            t => Err(Error::Parse(format!("unknown profile {t}"))),
        }
    }
}

/// Everything one run needs; field defaults depend on (experiment, profile).
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub profile: Profile,
    pub root_seed: u64,
    pub output_dir: PathBuf,
    pub epochs: usize,
    pub batch_tasks: usize,
    pub learning_rate: f64,
    pub checkpoints: Vec<usize>,
    pub train_tasks: usize,
    pub test_tasks: usize,
    pub p: usize,
    pub tau: f64,
    pub sigma_noise: f64,
    pub n_obs_min: usize,
    pub n_obs_max: usize,
    pub k_values: Vec<usize>,
    pub prior_sd: f64,
    pub sparsity_levels: Vec<u32>,
    pub tasks_per_level: usize,
    pub coef_sd: f64,
    pub bootstrap_replicates: usize,
    pub bootstrap_grid: Vec<usize>,
    pub flow_tasks: usize,
    pub flow_epochs: usize,
    pub n_samples: usize,
    pub bench_tasks: usize,
    pub bench_samples: usize,
}

impl ExperimentConfig {
    pub fn new(
        experiment: ExperimentKind,
        profile: Profile,
        root_seed: u64,
        output_dir: PathBuf,
    ) -> Self {
        let desk = profile == Profile::Desk;
        let mut cfg = ExperimentConfig {
            experiment,
            profile,
            root_seed,
            output_dir,
            epochs: 50,
            batch_tasks: 32,
            learning_rate: 1e-3,
            checkpoints: Vec::new(),
            train_tasks: if desk { 2000 } else { 5000 },
            test_tasks: 200,
            p: 20,
            tau: 3.0,
            sigma_noise: 1.0,
            n_obs_min: 10,
            n_obs_max: 30,
            k_values: vec![5, 10, 50],
            prior_sd: 9.0,
            sparsity_levels: Vec::new(),
            tasks_per_level: if desk { 150 } else { 300 },
            coef_sd: 3f64.sqrt(),
            bootstrap_replicates: if desk { 40 } else { 100 },
            bootstrap_grid: vec![50, 100, 200, 500, 1000],
            flow_tasks: 256,
            flow_epochs: if desk { 4000 } else { 8000 },
            n_samples: 2000,
            bench_tasks: 5,
            bench_samples: 500,
        };
        match experiment {
            ExperimentKind::LatentStructure => {}
            ExperimentKind::Robustness => {
                cfg.epochs = 100;
                cfg.learning_rate = 3e-4;
                cfg.checkpoints = vec![10, 50, 100];
                cfg.train_tasks = if desk { 1000 } else { 5400 };
                cfg.test_tasks = if desk { 200 } else { 600 };
            }
            ExperimentKind::SparseRecovery => {
                cfg.epochs = 100;
                cfg.sparsity_levels = if desk {
                    vec![20, 50, 80]
                } else {
                    (1..=20).map(|i| 5 * i).collect()
                };
                cfg.n_obs_min = if desk { 40 } else { 400 };
                cfg.n_obs_max = if desk { 60 } else { 500 };
            }
            ExperimentKind::RingPosterior => {
                cfg.batch_tasks = 64;
            }
        }
        cfg
    }

    /// Apply `key = value` override lines; `#` starts a comment. Unknown
    /// keys are errors so typos fail fast.
    pub fn apply_overrides(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: String| Error::Parse(format!("key {key}: {e}"));
            match key {
                "experiment" => self.experiment = ExperimentKind::from_tag(value)?,
                "profile" => self.profile = Profile::from_tag(value)?,
                "seed" => self.root_seed = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                "out" => self.output_dir = PathBuf::from(value),
                "epochs" => self.epochs = parse_num(key, value)?,
                "batch_tasks" => self.batch_tasks = parse_num(key, value)?,
                "learning_rate" => self.learning_rate = parse_real(key, value)?,
                "checkpoints" => self.checkpoints = parse_list(key, value)?,
                "train_tasks" => self.train_tasks = parse_num(key, value)?,
                "test_tasks" => self.test_tasks = parse_num(key, value)?,
                "p" => self.p = parse_num(key, value)?,
                "tau" => self.tau = parse_real(key, value)?,
                "sigma_noise" => self.sigma_noise = parse_real(key, value)?,
                "n_obs_min" => self.n_obs_min = parse_num(key, value)?,
                "n_obs_max" => self.n_obs_max = parse_num(key, value)?,
                "k_values" => self.k_values = parse_list(key, value)?,
                "prior_sd" => self.prior_sd = parse_real(key, value)?,
                "sparsity_levels" => self.sparsity_levels = parse_list(key, value)?,
                "tasks_per_level" => self.tasks_per_level = parse_num(key, value)?,
                "coef_sd" => self.coef_sd = parse_real(key, value)?,
                "bootstrap_replicates" => self.bootstrap_replicates = parse_num(key, value)?,
                "bootstrap_grid" => self.bootstrap_grid = parse_list(key, value)?,
                "flow_tasks" => self.flow_tasks = parse_num(key, value)?,
                "flow_epochs" => self.flow_epochs = parse_num(key, value)?,
                "n_samples" => self.n_samples = parse_num(key, value)?,
                "bench_tasks" => self.bench_tasks = parse_num(key, value)?,
                "bench_samples" => self.bench_samples = parse_num(key, value)?,
                other => return Err(Error::Parse(format!("unknown config key {other}"))),
            }
        }
        Ok(())
    }

    /// Read a config file. The file must name the experiment; remaining keys
    /// override the (experiment, profile) defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut experiment = None;
        let mut profile = Profile::Desk;
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if let Some((k, v)) = line.split_once('=') {
                match k.trim() {
                    "experiment" => experiment = Some(ExperimentKind::from_tag(v.trim())?),
                    "profile" => profile = Profile::from_tag(v.trim())?,
                    _ => {}
                }
            }
        }
        let experiment =
            experiment.ok_or_else(|| Error::Parse("config is missing the experiment key".into()))?;
        let mut cfg = ExperimentConfig::new(experiment, profile, 0, PathBuf::from("runs"));
        cfg.apply_overrides(&text)?;
        Ok(cfg)
    }

    /// Canonical key=value dump (stored in the manifest).
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment = {}", self.experiment.tag());
        let _ = writeln!(s, "profile = {}", self.profile.tag());
        let _ = writeln!(s, "seed = {}", self.root_seed);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_tasks = {}", self.batch_tasks);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "checkpoints = {}", join(&self.checkpoints));
        let _ = writeln!(s, "train_tasks = {}", self.train_tasks);
        let _ = writeln!(s, "test_tasks = {}", self.test_tasks);
        let _ = writeln!(s, "p = {}", self.p);
        let _ = writeln!(s, "tau = {}", self.tau);
        let _ = writeln!(s, "sigma_noise = {}", self.sigma_noise);
        let _ = writeln!(s, "n_obs_min = {}", self.n_obs_min);
        let _ = writeln!(s, "n_obs_max = {}", self.n_obs_max);
        let _ = writeln!(s, "k_values = {}", join(&self.k_values));
        let _ = writeln!(s, "prior_sd = {}", self.prior_sd);
        let _ = writeln!(s, "sparsity_levels = {}", join(&self.sparsity_levels));
        let _ = writeln!(s, "tasks_per_level = {}", self.tasks_per_level);
        let _ = writeln!(s, "coef_sd = {}", self.coef_sd);
        let _ = writeln!(s, "bootstrap_replicates = {}", self.bootstrap_replicates);
        let _ = writeln!(s, "bootstrap_grid = {}", join(&self.bootstrap_grid));
        let _ = writeln!(s, "flow_tasks = {}", self.flow_tasks);
        let _ = writeln!(s, "flow_epochs = {}", self.flow_epochs);
        let _ = writeln!(s, "n_samples = {}", self.n_samples);
        let _ = writeln!(s, "bench_tasks = {}", self.bench_tasks);
        let _ = writeln!(s, "bench_samples = {}", self.bench_samples);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && self.checkpoints.iter().any(|c| *c > self.epochs || *c == 0) {
            return Err(Error::validation("checkpoints must lie in 1..=epochs"));
        }
        if self.n_obs_min == 0 || self.n_obs_min > self.n_obs_max {
            return Err(Error::validation("bad n_obs range"));
        }
        if self.batch_tasks == 0 || self.learning_rate <= 0.0 {
            return Err(Error::validation("bad training settings"));
        }
        Ok(())
    }
}

fn parse_num(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|e| Error::Parse(format!("key {key}: {e}")))
}

fn parse_real(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|e| Error::Parse(format!("key {key}: {e}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse().map_err(|e: T::Err| Error::Parse(format!("key {key}: {e}"))))
        .collect()
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

// ---------------------------------------------------------------------------
// Manifest.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub config_snapshot: String,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// (file name, sha256 hex) per artifact.
    pub artifacts: Vec<(String, String)>,
    pub complete: bool,
}

impl RunManifest {
    fn write(&self, dir: &Path) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "version = {}", self.version);
        let _ = writeln!(s, "status = {}", if self.complete { "complete" } else { "incomplete" });
        let _ = writeln!(s, "started_unix = {}", self.started_unix);
        let _ = writeln!(s, "finished_unix = {}", self.finished_unix);
        s.push_str("[config]\n");
        s.push_str(&self.config_snapshot);
        s.push_str("[artifacts]\n");
        for (name, hash) in &self.artifacts {
            let _ = writeln!(s, "{name} {hash}");
        }
        fs::write(dir.join("manifest.txt"), s)?;
        Ok(())
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    Ok(hex)
}

fn write_lines(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut s = String::with_capacity(header.len() + 1 + rows.len() * 32);
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::validation(format!("stage {name}: {e}")))
}

// ---------------------------------------------------------------------------
// Run orchestration.
// ---------------------------------------------------------------------------

/// Run one experiment end to end. Artifacts land in the config's output
/// directory next to a checksummed manifest; any stage failure leaves a
/// manifest marked incomplete and propagates the error with the stage name.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let started = unix_now();
    let mut manifest = RunManifest {
        config_snapshot: cfg.snapshot(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        finished_unix: 0,
        artifacts: Vec::new(),
        complete: false,
    };
    manifest.write(&dir)?;
    let result = match cfg.experiment {
        ExperimentKind::LatentStructure => run_latent_structure(cfg, &dir),
        ExperimentKind::Robustness => run_robustness(cfg, &dir),
        ExperimentKind::SparseRecovery => run_sparse_recovery(cfg, &dir),
        ExperimentKind::RingPosterior => run_ring_posterior(cfg, &dir),
    };
    manifest.finished_unix = unix_now();
    match result {
        Ok(files) => {
            for f in files {
                let name = f
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                manifest.artifacts.push((name, sha256_hex(&f)?));
            }
            manifest.complete = true;
            manifest.write(&dir)?;
            Ok(manifest)
        }
        Err(e) => {
            manifest.write(&dir)?;
            Err(e)
        }
    }
}

fn fresh_deep_sets(p: usize, seed: u64) -> EstimatorModel {
    EstimatorModel::DeepSets(DeepSetsModel::init(p, Pool::Mean, &mut rng_from(seed)))
}

fn fresh_transformer(p: usize, head: OutputHead, seed: u64) -> Result<EstimatorModel> {
    Ok(EstimatorModel::SetTransformer(SetTransformerModel::init(
        p,
        head,
        &mut rng_from(seed),
    )?))
}

fn push_dynamics(rows: &mut Vec<String>, model: &str, trace: &TrainingTrace) {
    for r in &trace.records {
        rows.push(format!("{model},train,{},{}", r.epoch, r.train_loss));
        rows.push(format!("{model},heldout,{},{}", r.epoch, r.heldout_mse));
    }
}

fn train_config(cfg: &ExperimentConfig, seed_stream: u64) -> TrainConfig {
    let mut t = TrainConfig::new(
        cfg.epochs,
        cfg.batch_tasks,
        cfg.learning_rate,
        derive_seed(cfg.root_seed, seed_stream),
    );
    t.checkpoint_epochs = cfg.checkpoints.clone();
    t
}

/// Experiment I: latent structure. Trains both set estimators per centroid
/// count and writes the Table 1 layout plus learning dynamics.
fn run_latent_structure(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dyn_rows = Vec::new();
    let mut metric_rows = Vec::new();
    let mut ols_cells = Vec::new();
    let mut ds_cells = Vec::new();
    let mut st_cells = Vec::new();
    for (ki, &k) in cfg.k_values.iter().enumerate() {
        let spec = stage(
            "generate",
            ClusteredPriorSpec::sample(
                cfg.p,
                k,
                cfg.tau,
                cfg.sigma_noise,
                cfg.n_obs_min,
                cfg.n_obs_max,
                derive_seed(cfg.root_seed, 10 + ki as u64),
            ),
        )?;
        let meta = stage(
            "generate",
            gen_clustered_meta(
                &spec,
                cfg.train_tasks + cfg.test_tasks,
                cfg.train_tasks,
                derive_seed(cfg.root_seed, 20 + ki as u64),
            ),
        )?;
        let test = meta.test_tasks();
        let n_test = test.len();
        let truths: Vec<DVector<f64>> = test.iter().map(|t| t.beta_true.clone()).collect();

        let ols: Vec<DVector<f64>> =
            stage("ols", test.iter().map(ols_fit).collect::<Result<_>>())?;
        let ols_mse = mse_beta(&ols, &truths)?;
        let oracle: Vec<DVector<f64>> = stage(
            "oracle",
            test.iter().map(|t| bayes_posterior_mean_clustered(t, &spec)).collect::<Result<_>>(),
        )?;
        let oracle_mse = mse_beta(&oracle, &truths)?;

        let mut ds = fresh_deep_sets(cfg.p, derive_seed(cfg.root_seed, 30 + ki as u64));
        let ds_trace = stage(
            "train_deep_sets",
            train_estimator(&mut ds, meta.train_tasks(), test, &train_config(cfg, 40 + ki as u64)),
        )?;
        let ds_mse = evaluate_estimator(&ds, test, EvalMetric::MseBeta)?;

        // A single attention block with halved batches optimizes much faster
        // than the stacked default at this experiment's task budget.
        let mut st = EstimatorModel::SetTransformer(SetTransformerModel::init_with(
            cfg.p,
            OutputHead::Point,
            64,
            4,
            1,
            128,
            64,
            &mut rng_from(derive_seed(cfg.root_seed, 50 + ki as u64)),
        )?);
        let mut st_cfg = train_config(cfg, 60 + ki as u64);
        st_cfg.batch_tasks = (cfg.batch_tasks / 2).max(1);
        let st_trace = stage(
            "train_set_transformer",
            train_estimator(&mut st, meta.train_tasks(), test, &st_cfg),
        )?;
        let st_mse = evaluate_estimator(&st, test, EvalMetric::MseBeta)?;

        if ki == 0 {
            push_dynamics(&mut dyn_rows, "deep_sets", &ds_trace);
            push_dynamics(&mut dyn_rows, "set_transformer", &st_trace);
        }
        ols_cells.push(format!("{ols_mse}"));
        ds_cells.push(format!("{ds_mse}"));
        st_cells.push(format!("{st_mse}"));
        for (tag, v) in [
            ("ols", ols_mse),
            ("bayes_oracle", oracle_mse),
            ("deep_sets", ds_mse),
            ("set_transformer", st_mse),
        ] {
            metric_rows.push(format!(
                "{},{tag},{},mse_beta_k{k},{v},{n_test},{}",
                cfg.experiment.tag(),
                cfg.epochs,
                cfg.root_seed
            ));
        }
    }
    let header = format!(
        "model,{}",
        cfg.k_values.iter().map(|k| format!("k{k}")).collect::<Vec<_>>().join(",")
    );
    let table = dir.join("table1.csv");
    write_lines(
        &table,
        &header,
        &[
            format!("ols,{}", ols_cells.join(",")),
            format!("deep_sets,{}", ds_cells.join(",")),
            format!("set_transformer,{}", st_cells.join(",")),
        ],
    )?;
    let dynamics = dir.join("learning_dynamics.csv");
    write_lines(&dynamics, "model,split,epoch,mse", &dyn_rows)?;
    let metrics = dir.join("metrics.csv");
    write_lines(
        &metrics,
        "experiment,model_tag,checkpoint,metric_name,value,n_tasks,seed",
        &metric_rows,
    )?;
    Ok(vec![table, dynamics, metrics])
}

/// Experiment II: noise robustness. Both estimators train under Gaussian
/// noise; checkpoints are evaluated on held-out sets from every regime, and
/// the trained transformer is swept through the bootstrap grid.
fn run_robustness(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let regimes = [
        NoiseRegime::gaussian(),
        NoiseRegime::asymmetric(),
        NoiseRegime::bimodal(),
        NoiseRegime::trimodal(),
    ];
    let train_meta = stage(
        "generate",
        gen_robust_meta(
            cfg.p,
            cfg.prior_sd,
            &regimes[0],
            cfg.n_obs_min,
            cfg.n_obs_max,
            cfg.train_tasks,
            cfg.train_tasks,
            derive_seed(cfg.root_seed, 1),
        ),
    )?;
    let mut test_sets = Vec::new();
    for (i, regime) in regimes.iter().enumerate() {
        let meta = stage(
            "generate",
            gen_robust_meta(
                cfg.p,
                cfg.prior_sd,
                regime,
                cfg.n_obs_min,
                cfg.n_obs_max,
                cfg.test_tasks,
                0,
                derive_seed(cfg.root_seed, 2 + i as u64),
            ),
        )?;
        test_sets.push(meta.tasks);
    }

    let mut dyn_rows = Vec::new();
    let mut table_rows = Vec::new();
    let mut trained_st: Option<EstimatorModel> = None;
    for model_tag in ["deep_sets", "set_transformer"] {
        let mut model = match model_tag {
            "deep_sets" => fresh_deep_sets(cfg.p, derive_seed(cfg.root_seed, 10)),
            _ => fresh_transformer(cfg.p, OutputHead::Point, derive_seed(cfg.root_seed, 11))?,
        };
        let mut tcfg = train_config(cfg, 12 + if model_tag == "deep_sets" { 0 } else { 1 });
        // The robust prior is exchangeable and sign-symmetric across
        // coordinates, so symmetry augmentation is exact here.
        tcfg.augment_coordinates = true;
        let trace = stage(
            "train",
            train_estimator(&mut model, train_meta.train_tasks(), &test_sets[0], &tcfg),
        )?;
        push_dynamics(&mut dyn_rows, model_tag, &trace);
        for (epoch, params) in &trace.checkpoints {
            let mut snapshot = model.clone();
            snapshot.set_params(params)?;
            for (regime, tests) in regimes.iter().zip(&test_sets) {
                let mse = evaluate_estimator(&snapshot, tests, EvalMetric::MseBeta)?;
                table_rows.push(format!("{model_tag},{},{epoch},{mse}", regime.kind.tag()));
            }
        }
        if model_tag == "set_transformer" {
            trained_st = Some(model);
        }
    }

    let st = trained_st.expect("transformer trained above");
    let mut beta_rng = rng_from(derive_seed(cfg.root_seed, 30));
    let beta_star = DVector::from_fn(cfg.p, |_, _| {
        cfg.prior_sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut beta_rng)
    });
    let mut boot_rows = Vec::new();
    for (i, regime) in regimes.iter().enumerate() {
        for (j, &n) in cfg.bootstrap_grid.iter().enumerate() {
            let report = stage(
                "bootstrap",
                bootstrap_stability(
                    |t| st.estimate_hard(t),
                    &beta_star,
                    n,
                    cfg.bootstrap_replicates,
                    regime,
                    derive_seed(cfg.root_seed, 40 + (i * cfg.bootstrap_grid.len() + j) as u64),
                ),
            )?;
            boot_rows.push(format!(
                "set_transformer,{},{n},{}",
                regime.kind.tag(),
                report.sigma_boot
            ));
        }
    }

    let table = dir.join("table2.csv");
    write_lines(&table, "model,regime,checkpoint_epoch,mse", &table_rows)?;
    let dynamics = dir.join("learning_dynamics.csv");
    write_lines(&dynamics, "model,split,epoch,mse", &dyn_rows)?;
    let bootstrap = dir.join("bootstrap.csv");
    write_lines(&bootstrap, "model,regime,N,sigma_boot", &boot_rows)?;
    Ok(vec![table, dynamics, bootstrap])
}

/// Experiment III: sparse recovery with the two-head transformer; per-level
/// cosine similarity of hard estimates, plus the stability sweep.
fn run_sparse_recovery(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    if cfg.sparsity_levels.is_empty() {
        return Err(Error::validation("sparse recovery needs at least one level"));
    }
    let spec = SparseTaskSpec {
        p: cfg.p,
        sparsity_percent: cfg.sparsity_levels[0],
        coef_sd: cfg.coef_sd,
        n_obs_min: cfg.n_obs_min,
        n_obs_max: cfg.n_obs_max,
    };
    let n_total = cfg.tasks_per_level * cfg.sparsity_levels.len();
    let n_train = n_total * 4 / 5;
    let meta = stage(
        "generate",
        gen_sparse_meta(
            &spec,
            cfg.tasks_per_level,
            &cfg.sparsity_levels,
            n_train,
            derive_seed(cfg.root_seed, 1),
        ),
    )?;
    let mut model =
        fresh_transformer(cfg.p, OutputHead::Sparse, derive_seed(cfg.root_seed, 2))?;
    let mut tcfg = train_config(cfg, 3);
    // Sparse supports are exchangeable and sign-symmetric across
    // coordinates, so symmetry augmentation is exact here.
    tcfg.augment_coordinates = true;
    let trace = stage(
        "train",
        train_estimator(&mut model, meta.train_tasks(), meta.test_tasks(), &tcfg),
    )?;

    let mut cos_rows = Vec::new();
    for &level in &cfg.sparsity_levels {
        let tag = format!("k{level}");
        let tests: Vec<&Task> =
            meta.test_tasks().iter().filter(|t| t.regime_tag == tag).collect();
        if tests.is_empty() {
            return Err(Error::validation(format!("no held-out tasks at level {level}")));
        }
        let mut total = 0.0;
        for t in &tests {
            total += cosine_similarity(&model.estimate_hard(t)?, &t.beta_true)?;
        }
        cos_rows.push(format!("{level},{},{}", total / tests.len() as f64, tests.len()));
    }

    let mut boot_rows = Vec::new();
    for (li, &level) in cfg.sparsity_levels.iter().enumerate() {
        // One fixed sparse truth per level, drawn from that level's prior.
        let probe = gen_sparse_meta(
            &SparseTaskSpec { sparsity_percent: level, ..spec.clone() },
            1,
            &[level],
            1,
            derive_seed(cfg.root_seed, 50 + li as u64),
        )?;
        let beta_star = probe.tasks[0].beta_true.clone();
        for (j, &n) in cfg.bootstrap_grid.iter().enumerate() {
            let report = stage(
                "bootstrap",
                bootstrap_stability(
                    |t| model.estimate_hard(t),
                    &beta_star,
                    n,
                    cfg.bootstrap_replicates,
                    &NoiseRegime::gaussian(),
                    derive_seed(cfg.root_seed, 60 + (li * cfg.bootstrap_grid.len() + j) as u64),
                ),
            )?;
            boot_rows.push(format!("{level},{n},{}", report.sigma_boot));
        }
    }

    let mut dyn_rows = Vec::new();
    push_dynamics(&mut dyn_rows, "set_transformer_sparse", &trace);

    let cosine = dir.join("sparse_cosine.csv");
    write_lines(&cosine, "level,cosine,n_tasks", &cos_rows)?;
    let table4 = dir.join("table4.csv");
    write_lines(&table4, "level,N,sigma_boot", &boot_rows)?;
    let dynamics = dir.join("learning_dynamics.csv");
    write_lines(&dynamics, "model,split,epoch,mse", &dyn_rows)?;
    let checkpoint = dir.join("sparse_model.bin");
    let mut buf = Vec::new();
    write_estimator(&mut buf, &model)?;
    fs::write(&checkpoint, buf)?;
    Ok(vec![cosine, table4, dynamics, checkpoint])
}

/// Experiment IV: the ring posterior. Trains the flow, samples it against
/// the exact posterior and the Metropolis baseline, and benchmarks timing.
fn run_ring_posterior(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let spec = RingPriorSpec::default();
    let mut flow = FlowModel::init(&mut rng_from(derive_seed(cfg.root_seed, 1)));
    let losses = stage(
        "train_flow",
        train_flow_staged(
            &mut flow,
            &spec,
            cfg.flow_tasks,
            cfg.flow_epochs,
            cfg.batch_tasks,
            cfg.learning_rate,
            derive_seed(cfg.root_seed, 2),
        ),
    )?;
    let loss_rows: Vec<String> =
        losses.iter().enumerate().map(|(e, l)| format!("{},{l}", e + 1)).collect();

    let ode = OdeConfig::default();
    let tasks = [
        ("prior", gen_ring_task(&spec, 0, derive_seed(cfg.root_seed, 3))?),
        // Two observations keep the posterior visibly multimodal.
        ("informative", gen_ring_task(&spec, 2, derive_seed(cfg.root_seed, 4))?),
    ];
    let mut sample_rows = Vec::new();
    let mut oracle_rows = Vec::new();
    let mut coverage_rows = Vec::new();
    let mut files = Vec::new();
    for (i, (task_id, task)) in tasks.iter().enumerate() {
        let seed = derive_seed(cfg.root_seed, 10 + i as u64);
        let samples = stage("sample_flow", sample_posterior(&flow, task, cfg.n_samples, &ode, seed))?;
        for r in 0..samples.nrows() {
            sample_rows.push(format!(
                "{},{},{r},{task_id},{seed}",
                samples[(r, 0)],
                samples[(r, 1)]
            ));
        }
        let posterior = stage("oracle", exact_ring_posterior(task, &spec))?;
        let mixture_path = dir.join(format!("posterior_{task_id}.txt"));
        let mut buf = Vec::new();
        write_mixture(&mut buf, &posterior)?;
        fs::write(&mixture_path, buf)?;
        files.push(mixture_path);
        let oracle_seed = derive_seed(cfg.root_seed, 20 + i as u64);
        let oracle_samples = sample_mixture(&posterior, cfg.n_samples, oracle_seed)?;
        for r in 0..oracle_samples.nrows() {
            oracle_rows.push(format!(
                "{},{},{r},{task_id},{oracle_seed}",
                oracle_samples[(r, 0)],
                oracle_samples[(r, 1)]
            ));
        }
        let shares = mode_coverage(&samples, &posterior)?;
        for k in 0..posterior.n_components() {
            coverage_rows.push(format!(
                "{task_id},{k},{},{}",
                shares[k], posterior.weights[k]
            ));
        }
    }

    // Metropolis baseline on the informative task.
    let posterior = exact_ring_posterior(&tasks[1].1, &spec)?;
    let mcmc_cfg = McmcConfig { seed: derive_seed(cfg.root_seed, 30), ..Default::default() };
    let (states, rate) =
        stage("mcmc", rw_metropolis(|b| posterior.log_density(b), &mcmc_cfg))?;
    let mut mcmc_rows = Vec::with_capacity(cfg.n_samples.min(states.nrows()) + 1);
    for r in 0..states.nrows().min(cfg.n_samples) {
        mcmc_rows.push(format!("{},{},{r},informative,{}", states[(r, 0)], states[(r, 1)], mcmc_cfg.seed));
    }
    mcmc_rows.push(format!("# acceptance_rate,{rate},,,"));

    // Particle trajectories on the prior task at five snapshot times.
    let trajectory_rows = flow_trajectories(&flow, &tasks[0].1, 200, derive_seed(cfg.root_seed, 31))?;

    let flow_loss = dir.join("flow_loss.csv");
    write_lines(&flow_loss, "epoch,loss", &loss_rows)?;
    let flow_samples = dir.join("flow_samples.csv");
    write_lines(&flow_samples, "beta1,beta2,sample_index,task_id,seed", &sample_rows)?;
    let oracle_samples = dir.join("oracle_samples.csv");
    write_lines(&oracle_samples, "beta1,beta2,sample_index,task_id,seed", &oracle_rows)?;
    let mcmc_samples = dir.join("mcmc_samples.csv");
    write_lines(&mcmc_samples, "beta1,beta2,sample_index,task_id,seed", &mcmc_rows)?;
    let coverage = dir.join("mode_coverage.csv");
    write_lines(&coverage, "task_id,component,flow_share,oracle_weight", &coverage_rows)?;
    let trajectory = dir.join("flow_trajectory.csv");
    write_lines(&trajectory, "t,particle_id,beta1,beta2", &trajectory_rows)?;
    let checkpoint = dir.join("flow_model.bin");
    let mut buf = Vec::new();
    write_flow(&mut buf, &flow)?;
    fs::write(&checkpoint, buf)?;
    let timing = stage("bench", bench_timing(cfg, &flow, cfg.bench_tasks))?;
    files.extend([
        flow_loss,
        flow_samples,
        oracle_samples,
        mcmc_samples,
        coverage,
        trajectory,
        checkpoint,
        timing,
    ]);
    Ok(files)
}

/// Integrate `n_particles` base draws and record states at the snapshot
/// times {0, 0.25, 0.5, 0.75, 1}.
fn flow_trajectories(
    flow: &FlowModel,
    task: &Task,
    n_particles: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let r = flow.context(task)?;
    let mut rng = rng_from(seed);
    let n_steps = 40usize; // multiple of 4, so the snapshots land on steps
    let h = 1.0 / n_steps as f64;
    let mut rows = Vec::new();
    for pid in 0..n_particles {
        let mut z = Vector2::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
        rows.push(format!("0,{pid},{},{}", z[0], z[1]));
        for step in 0..n_steps {
            let t = step as f64 * h;
            let k1 = flow.velocity(t, &z, &r)?;
            let k2 = flow.velocity(t + 0.5 * h, &(z + 0.5 * h * k1), &r)?;
            let k3 = flow.velocity(t + 0.5 * h, &(z + 0.5 * h * k2), &r)?;
            let k4 = flow.velocity(t + h, &(z + h * k3), &r)?;
            z += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if (step + 1) % (n_steps / 4) == 0 {
                rows.push(format!("{},{pid},{},{}", (step + 1) as f64 * h, z[0], z[1]));
            }
        }
    }
    // Deterministic order: sort by snapshot time, then particle.
    rows.sort_by(|a, b| {
        let pa: Vec<&str> = a.splitn(3, ',').collect();
        let pb: Vec<&str> = b.splitn(3, ',').collect();
        let ta: f64 = pa[0].parse().unwrap();
        let tb: f64 = pb[0].parse().unwrap();
        ta.partial_cmp(&tb).unwrap().then(
            pa[1].parse::<usize>().unwrap().cmp(&pb[1].parse::<usize>().unwrap()),
        )
    });
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Figure data.
// ---------------------------------------------------------------------------

/// Re-emit a completed run's data for one figure as `figure_<id>.csv` in the
/// run directory. The ids map onto the run artifacts; an unknown id is a
/// validation error.
pub fn emit_figure_data(run_dir: &Path, figure_id: &str) -> Result<PathBuf> {
    let (source, header) = match figure_id {
        "learning_dynamics" => ("learning_dynamics.csv", "model,split,epoch,mse"),
        "bootstrap" => ("bootstrap.csv", "model,regime,N,sigma_boot"),
        "sparse_cosine" => ("sparse_cosine.csv", "level,cosine,n_tasks"),
        "posterior_samples" => ("flow_samples.csv", "beta1,beta2,sample_index,task_id,seed"),
        "flow_trajectory" => ("flow_trajectory.csv", "t,particle_id,beta1,beta2"),
        id => return Err(Error::validation(format!("unknown figure id {id}"))),
    };
    let src = run_dir.join(source);
    if !src.exists() {
        return Err(Error::validation(format!(
            "figure {figure_id} needs {source}; run the matching experiment first"
        )));
    }
    let text = fs::read_to_string(&src)?;
    if text.lines().next() != Some(header) {
        return Err(Error::validation(format!("{source} has an unexpected header")));
    }
    let out = run_dir.join(format!("figure_{figure_id}.csv"));
    fs::write(&out, text)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Timing benchmark.
// ---------------------------------------------------------------------------

/// Integrated autocorrelation time of a scalar series by Geyer's initial
/// positive sequence, floored at 1.
fn integrated_autocorr_time(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 4 {
        return 1.0;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let var = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return n as f64;
    }
    let acf = |lag: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..n - lag {
            s += (series[i] - mean) * (series[i + lag] - mean);
        }
        s / (n as f64 * var)
    };
    let mut tau = 1.0;
    let mut lag = 1;
    while lag + 1 < n / 2 {
        let pair = acf(lag) + acf(lag + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    tau.max(1.0)
}

/// Autocorrelation time of the chain's mode occupancy: pilot length divided
/// by the number of nearest-mode switches. A chain that never crosses a
/// density valley gets charged the full pilot length per effective sample.
fn mode_switch_time(states: &DMatrix<f64>, mix: &GaussianMixture) -> f64 {
    let n = states.nrows();
    let nearest = |i: usize| -> usize {
        let s = Vector2::new(states[(i, 0)], states[(i, 1)]);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, mu) in mix.means.iter().enumerate() {
            let d = (s - mu).norm_squared();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    };
    let mut switches = 0usize;
    let mut prev = nearest(0);
    for i in 1..n {
        let cur = nearest(i);
        if cur != prev {
            switches += 1;
        }
        prev = cur;
    }
    n as f64 / switches.max(1) as f64
}

const MCMC_STEP_CAP: usize = 20_000_000;

/// Time the flow sampler against the Metropolis baseline on shared ring
/// tasks at equal effective sample counts: the chain length is scaled by the
/// larger of the coordinate and mode-occupancy autocorrelation times from a
/// pilot run (capped), since raw Metropolis draws are far from independent
/// on a multimodal posterior. Writes per-task wall times to `timing.csv`.
pub fn bench_timing(cfg: &ExperimentConfig, flow: &FlowModel, n_tasks: usize) -> Result<PathBuf> {
    let path = cfg.output_dir.join("timing.csv");
    fs::create_dir_all(&cfg.output_dir)?;
    let mut rows = Vec::new();
    let spec = RingPriorSpec::default();
    let ode = OdeConfig { n_steps: 50, scheme: OdeScheme::Rk4 };
    for i in 0..n_tasks {
        // n_obs = 2 keeps the posterior genuinely multimodal, the regime the
        // ring experiment is about.
        let task = gen_ring_task(&spec, 2, derive_seed(cfg.root_seed, 100 + i as u64))?;
        let posterior = exact_ring_posterior(&task, &spec)?;

        let start = Instant::now();
        let _ = sample_posterior(flow, &task, cfg.bench_samples, &ode, derive_seed(cfg.root_seed, 200 + i as u64))?;
        let flow_ms = start.elapsed().as_secs_f64() * 1e3;
        rows.push(format!("flow,{i},{flow_ms}"));

        let pilot_cfg = McmcConfig {
            n_steps: 20_000,
            burn_in: 5_000,
            seed: derive_seed(cfg.root_seed, 300 + i as u64),
            ..Default::default()
        };
        let (pilot, _) = rw_metropolis(|b| posterior.log_density(b), &pilot_cfg)?;
        let coord: Vec<f64> = (0..pilot.nrows()).map(|r| pilot[(r, 0)]).collect();
        let tau = integrated_autocorr_time(&coord).max(mode_switch_time(&pilot, &posterior));
        let n_steps = (5_000 + (cfg.bench_samples as f64 * tau).ceil() as usize).min(MCMC_STEP_CAP);
        let run_cfg = McmcConfig {
            n_steps,
            burn_in: 5_000,
            seed: derive_seed(cfg.root_seed, 400 + i as u64),
            ..Default::default()
        };
        let start = Instant::now();
        let _ = rw_metropolis(|b| posterior.log_density(b), &run_cfg)?;
        let mcmc_ms = start.elapsed().as_secs_f64() * 1e3;
        rows.push(format!("mcmc,{i},{mcmc_ms}"));
    }
    write_lines(&path, "method,task_id,wall_ms", &rows)?;
    Ok(path)
}

/// Median per-task wall times (flow, mcmc) parsed back out of a timing CSV.
pub fn timing_medians(path: &Path) -> Result<(f64, f64)> {
    let text = fs::read_to_string(path)?;
    let mut flow = Vec::new();
    let mut mcmc = Vec::new();
    for line in text.lines().skip(1) {
        let mut parts = line.split(',');
        let method = parts.next().unwrap_or("");
        let _task = parts.next();
        let ms: f64 = parts
            .next()
            .ok_or_else(|| Error::Parse("short timing row".into()))?
            .parse()
            .map_err(|e| Error::Parse(format!("bad wall time: {e}")))?;
        match method {
            "flow" => flow.push(ms),
            "mcmc" => mcmc.push(ms),
            m => return Err(Error::Parse(format!("unknown method {m}"))),
        }
    }
    let median = |v: &mut Vec<f64>| -> Result<f64> {
        if v.is_empty() {
            return Err(Error::validation("no timing rows"));
        }
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(v[v.len() / 2])
    };
    Ok((median(&mut flow)?, median(&mut mcmc)?))
}
