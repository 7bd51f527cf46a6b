use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use pfnbo::acqopt::SearchSpace;
use pfnbo::bench::{
    emit_report, make_benchmark, run_comparison, BenchmarkFile, EbGpEiOptimizer,
    ExactGpEiOptimizer, PfnPoolOptimizer, PoolOptimizer, RandomSearchOptimizer,
};
use pfnbo::bo::{run_bo, AcqChoice, BoConfig, InitDesign};
use pfnbo::oracle::{GpFunctionSampler, HyperPriors, KernelSpec, MapFitConfig};
use pfnbo::pfn::{
    build_layout_from_prior, load, save, train, PfnConfig, PlainPriorProvider, StyleInput,
    StyleVocab,
};
use pfnbo::priors::{BatchConfig, PriorConfig};
use pfnbo::{Error, Result};

/// Prior-fitted surrogates for Bayesian optimization.
#[derive(Parser)]
#[command(name = "pfnbo", version, about)]
struct Cli {
    /// Structured config file; flags override individual keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a surrogate on a synthetic prior and write a checkpoint.
    Train(TrainArgs),
    /// Run the optimization loop against an objective.
    BoRun(BoRunArgs),
    /// Generate a discrete benchmark from a prior.
    Bench(BenchArgs),
    /// Compare optimizers on a benchmark and emit reports.
    Compare(CompareArgs),
    /// Sample datasets from the configured prior and dump them as CSV.
    InspectPrior(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
    /// Override the configured training step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the configured batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override the prior family (simple-gp | hebo | bnn).
    #[arg(long)]
    prior: Option<String>,
}

#[derive(Args)]
struct BoRunArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    model: PathBuf,
    /// Objective spec: gp-sample:<d>, pool:<file>:<index>, or branin.
    #[arg(long)]
    objective: String,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    budget: Option<usize>,
    /// ei | pi | ucb | ei-on-mean | kg | ei-kg
    #[arg(long)]
    acq: Option<String>,
    /// sobol | min | mid
    #[arg(long)]
    init: Option<String>,
    /// Enable inference-time input warping.
    #[arg(long)]
    warp: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 100)]
    tasks: usize,
    #[arg(long, default_value_t = 200)]
    points: usize,
    #[arg(long, default_value_t = 1)]
    dims: usize,
    #[arg(long)]
    prior: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    bench: PathBuf,
    /// Comma-separated: random, gp-ei, eb-gp-ei, pfn-ei, pfn-ei-raw, pfn-kg,
    /// pfn-ei-kg. The pfn variants need --model.
    #[arg(long)]
    optimizers: String,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 50)]
    budget: usize,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 5)]
    count: usize,
    #[arg(long, default_value_t = 50)]
    points: usize,
    #[arg(long, default_value_t = 2)]
    dims: usize,
    #[arg(long)]
    prior: Option<String>,
}

/// Optional config-file sections; anything absent falls back to defaults.
#[derive(Debug, Default, Serialize, Deserialize)]
struct FileConfig {
    model: Option<PfnConfig>,
    prior: Option<PriorConfig>,
    bo: Option<BoConfig>,
    batch: Option<BatchOverrides>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct BatchOverrides {
    max_dim: Option<usize>,
    min_points: Option<usize>,
    max_points: Option<usize>,
    group_size: Option<usize>,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn prior_by_name(name: &str) -> Result<PriorConfig> {
    match name {
        "simple-gp" => Ok(PriorConfig::simple_gp()),
        "hebo" => Ok(PriorConfig::hebo()),
        "bnn" => Ok(PriorConfig::bnn()),
        other => Err(Error::Config(format!("unknown prior {other:?}"))),
    }
}

fn resolve_prior(file: &FileConfig, flag: Option<&String>) -> Result<PriorConfig> {
    match flag {
        Some(name) => prior_by_name(name),
        None => Ok(file.prior.clone().unwrap_or_else(PriorConfig::simple_gp)),
    }
}

fn batch_config(file: &FileConfig, prior: PriorConfig, capacity: usize) -> BatchConfig {
    let mut batch = BatchConfig::new(prior, capacity);
    if let Some(over) = &file.batch {
        if let Some(v) = over.max_dim {
            batch.max_dim = v;
        }
        if let Some(v) = over.min_points {
            batch.min_points = v;
        }
        if let Some(v) = over.max_points {
            batch.max_points = v;
        }
        if let Some(v) = over.group_size {
            batch.group_size = v;
        }
    }
    batch
}

fn cmd_train(file: &FileConfig, args: &TrainArgs) -> Result<()> {
    let mut model_cfg = file.model.clone().unwrap_or_default();
    if let Some(steps) = args.steps {
        model_cfg.total_steps = steps;
    }
    if let Some(batch_size) = args.batch_size {
        model_cfg.batch_size = batch_size;
    }
    let mut prior = resolve_prior(file, args.prior.as_ref())?;
    if model_cfg.style == StyleVocab::UserPrior {
        prior.user_prior = true;
    }
    let mut batch = batch_config(file, prior, model_cfg.capacity);
    batch.min_points = model_cfg.min_points;
    batch.max_points = model_cfg.max_points;

    let layout = build_layout_from_prior(
        &batch,
        model_cfg.num_buckets,
        model_cfg.layout_samples,
        args.seed,
    )?;
    let provider = PlainPriorProvider::new(batch, model_cfg.style);
    let output = args.output.clone();
    let mut sink = move |model: &pfnbo::pfn::PfnModel, step: usize| -> Result<()> {
        let mut path = output.clone();
        path.set_extension(format!("step{step}.pfn"));
        save(model, &path)
    };
    let (model, report) = train(&provider, layout, model_cfg, args.seed, Some(&mut sink))?;
    save(&model, &args.output)?;
    println!(
        "trained {} steps, final loss {:.4}, checkpoint {}",
        model.trained_steps(),
        report.tail_mean_ce(50),
        args.output.display()
    );
    Ok(())
}

fn parse_acq(name: &str) -> Result<AcqChoice> {
    Ok(match name {
        "ei" => AcqChoice::Ei,
        "pi" => AcqChoice::Pi,
        "ucb" => AcqChoice::Ucb { quantile: 0.95 },
        "ei-on-mean" => AcqChoice::EiOnMean,
        "kg" => AcqChoice::Kg,
        "ei-kg" => AcqChoice::EiKgMix {
            kg_probability: 0.5,
        },
        other => return Err(Error::Config(format!("unknown acquisition {other:?}"))),
    })
}

fn parse_init(name: &str) -> Result<InitDesign> {
    Ok(match name {
        "sobol" => InitDesign::Sobol,
        "min" => InitDesign::Min,
        "mid" => InitDesign::Mid,
        other => return Err(Error::Config(format!("unknown initial design {other:?}"))),
    })
}

fn cmd_bo_run(file: &FileConfig, args: &BoRunArgs) -> Result<()> {
    let model = load(&args.model)?;
    let mut bo = file.bo.clone().unwrap_or_default();
    if let Some(budget) = args.budget {
        bo.budget = budget;
    }
    if let Some(acq) = &args.acq {
        bo.acq = parse_acq(acq)?;
    }
    if let Some(init) = &args.init {
        bo.init = parse_init(init)?;
    }
    if args.warp {
        bo.enable_warp = true;
    }
    let style = match model.config().style {
        StyleVocab::None => StyleInput::None,
        StyleVocab::UserPrior => StyleInput::UserPrior(pfnbo::priors::UserPriorSpec::none(1)),
        StyleVocab::Mode => StyleInput::Mode(pfnbo::pfn::HeadMode::Plain),
    };

    let parts: Vec<&str> = args.objective.split(':').collect();
    let trajectory = match parts.as_slice() {
        ["gp-sample", d] => {
            let d: usize = d
                .parse()
                .map_err(|_| Error::Config("bad gp-sample dimension".into()))?;
            let mut f = GpFunctionSampler::new(KernelSpec::default_rbf(), args.seed ^ 0xabcd);
            let mut objective =
                |x: &[f64]| f.eval(x).map_err(|e| e.to_string());
            run_bo(
                &mut objective,
                &model,
                &SearchSpace::unit_cube(d),
                &bo,
                &style,
                args.seed,
            )?
        }
        ["pool", path, index] => {
            let text = fs::read_to_string(path)?;
            let bench: BenchmarkFile = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("benchmark file: {e}")))?;
            let tasks = bench.to_tasks()?;
            let idx: usize = index
                .parse()
                .map_err(|_| Error::Config("bad pool index".into()))?;
            let task = tasks
                .get(idx)
                .ok_or_else(|| Error::Config(format!("no task {idx}")))?;
            let space = SearchSpace::discrete_pool(task.x.clone());
            let mut objective = |x: &[f64]| {
                task.lookup(x)
                    .ok_or_else(|| "point not in pool".to_string())
            };
            run_bo(&mut objective, &model, &space, &bo, &style, args.seed)?
        }
        ["branin"] => {
            let mut objective = |x: &[f64]| {
                let x1 = -5.0 + 15.0 * x[0];
                let x2 = 15.0 * x[1];
                let b = 5.1 / (4.0 * std::f64::consts::PI.powi(2));
                let c = 5.0 / std::f64::consts::PI;
                let t = 1.0 / (8.0 * std::f64::consts::PI);
                let f = (x2 - b * x1 * x1 + c * x1 - 6.0).powi(2)
                    + 10.0 * (1.0 - t) * x1.cos()
                    + 10.0;
                Ok::<f64, String>(-f)
            };
            run_bo(
                &mut objective,
                &model,
                &SearchSpace::unit_cube(2),
                &bo,
                &style,
                args.seed,
            )?
        }
        _ => {
            return Err(Error::Config(format!(
                "unknown objective {:?}",
                args.objective
            )))
        }
    };

    let csv_path = args.output.with_extension("csv");
    let meta_path = args.output.with_extension("meta.json");
    let mut csv = fs::File::create(&csv_path)?;
    trajectory.write_csv(&mut csv)?;
    let mut meta = fs::File::create(&meta_path)?;
    trajectory.write_metadata(&mut meta)?;
    println!(
        "{} evaluations, incumbent {:.6}, wrote {} and {}",
        trajectory.steps.len(),
        trajectory.incumbent().unwrap_or(f64::NAN),
        csv_path.display(),
        meta_path.display()
    );
    Ok(())
}

fn cmd_bench(file: &FileConfig, args: &BenchArgs) -> Result<()> {
    let prior = resolve_prior(file, args.prior.as_ref())?;
    let tasks = make_benchmark(&prior, args.tasks, args.points, args.dims, args.seed)?;
    let bench = BenchmarkFile::from_tasks(&tasks);
    let json = serde_json::to_string_pretty(&bench)
        .map_err(|e| Error::Config(format!("serialize benchmark: {e}")))?;
    fs::write(&args.output, json)?;
    println!(
        "wrote {} tasks x {} points (d={}) to {}",
        args.tasks,
        args.points,
        args.dims,
        args.output.display()
    );
    Ok(())
}

fn cmd_compare(file: &FileConfig, args: &CompareArgs) -> Result<()> {
    let text = fs::read_to_string(&args.bench)?;
    let bench: BenchmarkFile = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("benchmark file: {e}")))?;
    let tasks = bench.to_tasks()?;

    let model = match &args.model {
        Some(path) => Some(load(path)?),
        None => None,
    };
    let bo = file.bo.clone().unwrap_or_default();

    let mut owned: Vec<Box<dyn PoolOptimizer>> = Vec::new();
    for name in args.optimizers.split(',') {
        match name.trim() {
            "random" => owned.push(Box::new(RandomSearchOptimizer::new("random"))),
            "gp-ei" => owned.push(Box::new(ExactGpEiOptimizer::default_rbf("gp-ei"))),
            "eb-gp-ei" => owned.push(Box::new(EbGpEiOptimizer::new(
                "eb-gp-ei",
                HyperPriors::default(),
                MapFitConfig::default(),
            ))),
            pfn @ ("pfn-ei" | "pfn-ei-raw" | "pfn-kg" | "pfn-ei-kg") => {
                let model = model
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("{pfn} needs --model")))?;
                let mut cfg = bo.clone();
                let style = match model.config().style {
                    StyleVocab::None => StyleInput::None,
                    StyleVocab::UserPrior => {
                        StyleInput::UserPrior(pfnbo::priors::UserPriorSpec::none(bench.dims))
                    }
                    StyleVocab::Mode => StyleInput::Mode(pfnbo::pfn::HeadMode::Plain),
                };
                match pfn {
                    "pfn-ei" => cfg.acq = AcqChoice::Ei,
                    "pfn-ei-raw" => {
                        cfg.acq = AcqChoice::Ei;
                        cfg.enable_output_transform = false;
                    }
                    "pfn-kg" => cfg.acq = AcqChoice::Kg,
                    _ => {
                        cfg.acq = AcqChoice::EiKgMix {
                            kg_probability: 0.5,
                        }
                    }
                }
                owned.push(Box::new(PfnPoolOptimizer::new(pfn, model, cfg, style)));
            }
            other => return Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
    let refs: Vec<&dyn PoolOptimizer> = owned.iter().map(|b| b.as_ref() as _).collect();
    let report = run_comparison(&refs, &tasks, args.budget, args.reps, args.seed)?;
    emit_report(&report, &args.output)?;
    println!(
        "{} runs ({} failed); reports in {}",
        report.completed_runs,
        report.failed_runs,
        args.output.display()
    );
    for p in &report.pairwise {
        println!(
            "{} vs {}: wins {} / {} ties {}",
            p.a, p.b, p.wins_a, p.wins_b, p.ties
        );
    }
    Ok(())
}

fn cmd_inspect(file: &FileConfig, args: &InspectArgs) -> Result<()> {
    let prior = resolve_prior(file, args.prior.as_ref())?;
    let sampler = prior.sampler();
    fs::create_dir_all(&args.output)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    for i in 0..args.count {
        let ds = sampler.sample(args.points, args.dims, &mut rng)?;
        let mut out = fs::File::create(args.output.join(format!("dataset_{i}.csv")))?;
        ds.write_csv(&mut out)?;
    }
    println!(
        "wrote {} datasets ({} x d={}) to {}",
        args.count,
        args.points,
        args.dims,
        args.output.display()
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = load_config(cli.config.as_deref()).and_then(|file| match &cli.command {
        Command::Train(args) => cmd_train(&file, args),
        Command::BoRun(args) => cmd_bo_run(&file, args),
        Command::Bench(args) => cmd_bench(&file, args),
        Command::Compare(args) => cmd_compare(&file, args),
        Command::InspectPrior(args) => cmd_inspect(&file, args),
    });
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
