//! Command-line entry point: dataset generation, estimator training and
//! evaluation, the sampler timing benchmark, and one-shot reproduction of
//! the tables and figures.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use amortlab::estimators::{
    evaluate_estimator, read_estimator, train_estimator, write_estimator, DeepSetsModel,
    EstimatorModel, EvalMetric, OutputHead, Pool, SetTransformerModel, TrainConfig,
};
use amortlab::flow::{read_flow, FlowModel};
use amortlab::harness::{
    bench_timing, emit_figure_data, run_experiment, ExperimentConfig, ExperimentKind, Profile,
};
use amortlab::seed::{derive_seed, rng_from};
use amortlab::tasks::{
    gen_clustered_meta, gen_ring_task, gen_robust_meta, gen_sparse_meta, ClusteredPriorSpec,
    MetaDataset, NoiseRegime, RingPriorSpec, SparseTaskSpec,
};

#[derive(Parser)]
#[command(name = "amlab", about = "Amortized estimation laboratory", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct RunOpts {
    /// Flat key=value config file; defaults come from experiment and profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment tag (latent_structure, robustness, sparse_recovery,
    /// ring_posterior); required when no config file is given.
    #[arg(long)]
    experiment: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// desk or paper.
    #[arg(long)]
    profile: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate and save a meta-dataset for an experiment.
    Generate {
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Train one estimator on a saved meta-dataset.
    Train {
        /// Dataset directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        /// deep_sets, set_transformer, or set_transformer_sparse.
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_tasks: usize,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated checkpoint epochs.
        #[arg(long)]
        checkpoints: Option<String>,
        /// Output checkpoint file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved estimator checkpoint on a dataset's held-out split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// mse_beta or cosine.
        #[arg(long, default_value = "mse_beta")]
        metric: String,
    },
    /// Time the flow sampler against the Metropolis baseline on ring tasks.
    Bench {
        #[command(flatten)]
        opts: RunOpts,
        /// Trained flow checkpoint; a fresh initialization is timed if
        /// absent (wall time does not depend on the weights).
        #[arg(long)]
        flow: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<usize>,
    },
    /// Rebuild a table or figure end to end from a seed.
    Reproduce {
        /// table1, table2, table4, fig1, fig2, fig3, fig4, or fig5.
        target: String,
        #[command(flatten)]
        opts: RunOpts,
    },
}

fn build_config(opts: &RunOpts, experiment: Option<ExperimentKind>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = if let Some(path) = &opts.config {
        ExperimentConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?
    } else {
        let kind = match (&opts.experiment, experiment) {
            (Some(tag), _) => ExperimentKind::from_tag(tag)?,
            (None, Some(kind)) => kind,
            (None, None) => bail!("pass --config or --experiment"),
        };
        let profile = match &opts.profile {
            Some(p) => Profile::from_tag(p)?,
            None => Profile::Desk,
        };
        ExperimentConfig::new(kind, profile, 0, PathBuf::from("runs"))
    };
    if let Some(kind) = experiment {
        if cfg.experiment != kind {
            bail!("target needs experiment {}, config says {}", kind.tag(), cfg.experiment.tag());
        }
    }
    if let Some(tag) = &opts.profile {
        let profile = Profile::from_tag(tag)?;
        if opts.config.is_none() && cfg.profile != profile {
            cfg = ExperimentConfig::new(cfg.experiment, profile, cfg.root_seed, cfg.output_dir);
        }
        cfg.profile = profile;
    }
    if let Some(seed) = opts.seed {
        cfg.root_seed = seed;
    }
    if let Some(out) = &opts.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn generate(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    match cfg.experiment {
        ExperimentKind::LatentStructure => {
            for (ki, &k) in cfg.k_values.iter().enumerate() {
                let spec = ClusteredPriorSpec::sample(
                    cfg.p,
                    k,
                    cfg.tau,
                    cfg.sigma_noise,
                    cfg.n_obs_min,
                    cfg.n_obs_max,
                    derive_seed(cfg.root_seed, 10 + ki as u64),
                )?;
                let meta = gen_clustered_meta(
                    &spec,
                    cfg.train_tasks + cfg.test_tasks,
                    cfg.train_tasks,
                    derive_seed(cfg.root_seed, 20 + ki as u64),
                )?;
                let dir = cfg.output_dir.join(format!("k{k}"));
                meta.save(&dir)?;
                println!("wrote {} tasks to {}", meta.tasks.len(), dir.display());
            }
        }
        ExperimentKind::Robustness => {
            let regimes = [
                NoiseRegime::gaussian(),
                NoiseRegime::asymmetric(),
                NoiseRegime::bimodal(),
                NoiseRegime::trimodal(),
            ];
            let train = gen_robust_meta(
                cfg.p,
                cfg.prior_sd,
                &regimes[0],
                cfg.n_obs_min,
                cfg.n_obs_max,
                cfg.train_tasks,
                cfg.train_tasks,
                derive_seed(cfg.root_seed, 1),
            )?;
            let dir = cfg.output_dir.join("train");
            train.save(&dir)?;
            println!("wrote {} tasks to {}", train.tasks.len(), dir.display());
            for (i, regime) in regimes.iter().enumerate() {
                let meta = gen_robust_meta(
                    cfg.p,
                    cfg.prior_sd,
                    regime,
                    cfg.n_obs_min,
                    cfg.n_obs_max,
                    cfg.test_tasks,
                    0,
                    derive_seed(cfg.root_seed, 2 + i as u64),
                )?;
                let dir = cfg.output_dir.join(format!("test_{}", regime.kind.tag()));
                meta.save(&dir)?;
                println!("wrote {} tasks to {}", meta.tasks.len(), dir.display());
            }
        }
        ExperimentKind::SparseRecovery => {
            let spec = SparseTaskSpec {
                p: cfg.p,
                sparsity_percent: cfg.sparsity_levels[0],
                coef_sd: cfg.coef_sd,
                n_obs_min: cfg.n_obs_min,
                n_obs_max: cfg.n_obs_max,
            };
            let n_total = cfg.tasks_per_level * cfg.sparsity_levels.len();
            let meta = gen_sparse_meta(
                &spec,
                cfg.tasks_per_level,
                &cfg.sparsity_levels,
                n_total * 4 / 5,
                derive_seed(cfg.root_seed, 1),
            )?;
            meta.save(&cfg.output_dir)?;
            println!("wrote {} tasks to {}", meta.tasks.len(), cfg.output_dir.display());
        }
        ExperimentKind::RingPosterior => {
            let spec = RingPriorSpec::default();
            let tasks: Vec<_> = (0..cfg.bench_tasks)
                .map(|i| gen_ring_task(&spec, 2, derive_seed(cfg.root_seed, 100 + i as u64)))
                .collect::<Result<_, _>>()?;
            let n = tasks.len();
            let meta = MetaDataset::new(tasks, 0, cfg.root_seed, "ring".into())?;
            meta.save(&cfg.output_dir)?;
            println!("wrote {n} tasks to {}", cfg.output_dir.display());
        }
    }
    Ok(())
}

fn init_model(tag: &str, p: usize, seed: u64) -> anyhow::Result<EstimatorModel> {
    let mut rng = rng_from(seed);
    Ok(match tag {
        "deep_sets" => EstimatorModel::DeepSets(DeepSetsModel::init(p, Pool::Mean, &mut rng)),
        "set_transformer" => {
            EstimatorModel::SetTransformer(SetTransformerModel::init(p, OutputHead::Point, &mut rng)?)
        }
        "set_transformer_sparse" => {
            EstimatorModel::SetTransformer(SetTransformerModel::init(p, OutputHead::Sparse, &mut rng)?)
        }
        other => bail!("unknown model tag {other}"),
    })
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Generate { opts } => {
            let cfg = build_config(&opts, None)?;
            generate(&cfg).context("stage generate")?;
        }
        Cmd::Train { data, model, epochs, batch_tasks, learning_rate, seed, checkpoints, out } => {
            let meta = MetaDataset::load(&data)
                .with_context(|| format!("loading dataset {}", data.display()))?;
            let p = meta.tasks.first().map(|t| t.p()).context("dataset is empty")?;
            let mut estimator = init_model(&model, p, derive_seed(seed, 1))?;
            let mut tcfg = TrainConfig::new(epochs, batch_tasks, learning_rate, seed);
            if let Some(list) = checkpoints {
                tcfg.checkpoint_epochs = list
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse().context("bad checkpoint epoch"))
                    .collect::<anyhow::Result<_>>()?;
            }
            let trace = train_estimator(&mut estimator, meta.train_tasks(), meta.test_tasks(), &tcfg)
                .context("stage train")?;
            let mut buf = Vec::new();
            write_estimator(&mut buf, &estimator)?;
            fs::write(&out, buf)?;
            if let Some(last) = trace.records.last() {
                println!(
                    "trained {model} for {epochs} epochs: train_loss {}, heldout_mse {}",
                    last.train_loss, last.heldout_mse
                );
            }
            println!("saved checkpoint to {}", out.display());
        }
        Cmd::Evaluate { model, data, metric } => {
            let metric = match metric.as_str() {
                "mse_beta" => EvalMetric::MseBeta,
                "cosine" => EvalMetric::Cosine,
                other => bail!("unknown metric {other}"),
            };
            let bytes = fs::read(&model)?;
            let estimator = read_estimator(&mut bytes.as_slice()).context("stage load_model")?;
            let meta = MetaDataset::load(&data)?;
            let tasks =
                if meta.test_tasks().is_empty() { &meta.tasks[..] } else { meta.test_tasks() };
            let value = evaluate_estimator(&estimator, tasks, metric).context("stage evaluate")?;
            println!("{} on {} tasks: {value}", estimator.kind(), tasks.len());
        }
        Cmd::Bench { opts, flow, tasks } => {
            let cfg = build_config(&opts, Some(ExperimentKind::RingPosterior))?;
            let flow_model = match flow {
                Some(path) => {
                    let bytes = fs::read(&path)?;
                    read_flow(&mut bytes.as_slice()).context("stage load_flow")?
                }
                None => FlowModel::init(&mut rng_from(derive_seed(cfg.root_seed, 1))),
            };
            let n_tasks = tasks.unwrap_or(cfg.bench_tasks);
            let path = bench_timing(&cfg, &flow_model, n_tasks).context("stage bench")?;
            report_timing(&path)?;
        }
        Cmd::Reproduce { target, opts } => {
            let (kind, figure) = match target.as_str() {
                "table1" => (ExperimentKind::LatentStructure, None),
                "fig1" => (ExperimentKind::LatentStructure, Some("learning_dynamics")),
                "table2" => (ExperimentKind::Robustness, None),
                "fig2" => (ExperimentKind::Robustness, Some("bootstrap")),
                "fig3" => (ExperimentKind::SparseRecovery, Some("sparse_cosine")),
                "table4" => (ExperimentKind::SparseRecovery, None),
                "fig4" => (ExperimentKind::RingPosterior, Some("posterior_samples")),
                "fig5" => (ExperimentKind::RingPosterior, Some("flow_trajectory")),
                other => bail!("unknown reproduce target {other}"),
            };
            let cfg = build_config(&opts, Some(kind))?;
            let manifest = run_experiment(&cfg)?;
            println!(
                "run complete: {} artifacts in {}",
                manifest.artifacts.len(),
                cfg.output_dir.display()
            );
            if let Some(figure_id) = figure {
                let out = emit_figure_data(&cfg.output_dir, figure_id)?;
                println!("figure data: {}", out.display());
            }
        }
    }
    Ok(())
}

fn report_timing(path: &Path) -> anyhow::Result<()> {
    match amortlab::harness::timing_medians(path) {
        Ok((flow_ms, mcmc_ms)) => println!(
            "median per-task wall time: flow {flow_ms:.1} ms, mcmc {mcmc_ms:.1} ms ({})",
            path.display()
        ),
        Err(_) => println!("wrote {}", path.display()),
    }
    Ok(())
}
