use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use icl_ensemble::distributions::Combination;
use icl_ensemble::harness::cost::{cost_model, CostModelInput};
use icl_ensemble::harness::dataset::{read_jsonl, write_jsonl};
use icl_ensemble::harness::experiment::{
    load_config, prepare_moicl, run_experiment, score_weights, train_method, write_outputs, ExperimentConfig,
    MethodSpec,
};
use icl_ensemble::harness::{build_task, presets, Method};
use icl_ensemble::partitioning::PartitionStrategy;
use icl_ensemble::training::Trainable;
use icl_ensemble::weighting::WeightCheckpoint;

#[derive(Parser)]
#[command(name = "icl-ensemble", version, about = "Learned mixtures of in-context experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task and write pool/train/dev/test JSONL files.
    GenTask(Source),
    /// Partition a demonstration pool into k subsets.
    Partition(PartitionArgs),
    /// Train one MoICL method on one seed; writes checkpoint.json and trace.json.
    Train(Source),
    /// Score one method (or a checkpoint) on the test split; writes report.json.
    Eval(EvalArgs),
    /// Run the full method × seed grid; writes report.json and summary.csv.
    Sweep(Source),
    /// Evaluate the inference cost model.
    Cost(CostArgs),
}

#[derive(Args)]
struct Source {
    /// Experiment config (JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config: default, noise, ood, imbalance, sparse.
    #[arg(long)]
    preset: Option<String>,
    /// Restrict to one seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Restrict to one method (replaces the grid when combined with --k).
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    k_prime: Option<usize>,
    #[arg(long)]
    combination: Option<Combination>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: Source,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct PartitionArgs {
    /// Demonstration pool (JSONL).
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value = "static")]
    strategy: StrategyArg,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum StrategyArg {
    Static,
    RandomSize,
    Bm25,
}

impl From<StrategyArg> for PartitionStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Static => PartitionStrategy::Static,
            StrategyArg::RandomSize => PartitionStrategy::RandomSize,
            StrategyArg::Bm25 => PartitionStrategy::Bm25,
        }
    }
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value = "concat")]
    method: Method,
    #[arg(long, default_value_t = 1.0)]
    c_llm: f64,
    #[arg(long, default_value_t = 1.0)]
    c_hyper: f64,
    #[arg(long)]
    k_prime: Option<usize>,
}

impl Source {
    /// Load the config and apply flag overrides.
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => load_config(path).with_context(|| format!("loading {}", path.display()))?,
            (None, Some(name)) => presets::preset(name)?,
            (None, None) => bail!("one of --config or --preset is required"),
        };
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(method) = self.method {
            let matching: Vec<MethodSpec> = cfg
                .methods
                .iter()
                .filter(|m| m.method == method && self.k.is_none_or(|k| m.k == Some(k)))
                .cloned()
                .collect();
            cfg.methods = if matching.is_empty() {
                let mut spec = MethodSpec::new(method);
                spec.k = self.k;
                vec![spec]
            } else {
                matching
            };
        }
        for m in &mut cfg.methods {
            if self.k.is_some() && m.method != Method::Concat && m.method != Method::Ensemble {
                m.k = self.k;
            }
            if self.k_prime.is_some() && m.method == Method::MoiclSparse {
                m.k_prime = self.k_prime;
            }
            if self.combination.is_some() {
                m.combination = self.combination;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn single(&self) -> Result<(ExperimentConfig, MethodSpec, u64)> {
        let cfg = self.resolve()?;
        let trainable: Vec<&MethodSpec> = cfg.methods.iter().filter(|m| m.method.is_moicl()).collect();
        let spec = match trainable.as_slice() {
            [one] => (*one).clone(),
            [] => bail!("no MoICL method selected; pass --method"),
            _ => bail!("several MoICL methods in the config; pick one with --method and --k"),
        };
        let seed = cfg.seeds[0];
        Ok((cfg, spec, seed))
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenTask(src) => {
            let cfg = src.resolve()?;
            let task = build_task(&cfg.task_for_seed(cfg.seeds[0]))?;
            fs::create_dir_all(&src.out_dir)?;
            for (name, split) in [("pool", &task.pool), ("train", &task.train), ("dev", &task.dev), ("test", &task.test)] {
                write_jsonl(src.out_dir.join(format!("{name}.jsonl")), split)?;
            }
            write_json(&src.out_dir.join("vocabulary.json"), &task.vocabulary)?;
            println!("wrote task to {}", src.out_dir.display());
        }
        Command::Partition(args) => {
            let pool = read_jsonl(&args.pool)?;
            let strategy: PartitionStrategy = args.strategy.into();
            let partition = strategy.apply(&pool, args.k, args.seed)?;
            fs::create_dir_all(&args.out_dir)?;
            let path = args.out_dir.join("partition.json");
            write_json(&path, &partition)?;
            println!("sizes {:?} -> {}", partition.sizes(), path.display());
        }
        Command::Train(src) => {
            let (cfg, spec, seed) = src.single()?;
            let trained = train_method(&cfg, &spec, seed)?;
            fs::create_dir_all(&src.out_dir)?;
            write_json(&src.out_dir.join("checkpoint.json"), &trained.model.checkpoint())?;
            write_json(&src.out_dir.join("partition.json"), &trained.prep.partition)?;
            if let Some(trace) = &trained.trace {
                write_json(&src.out_dir.join("trace.json"), trace)?;
            }
            let value = score_weights(&trained.model.weights(), &trained.prep, trained.combination, cfg.metric)?;
            println!("{} seed {seed}: test {} = {value:.4}", spec.display_name(), cfg.metric.as_str());
        }
        Command::Eval(args) => {
            let src = &args.source;
            fs::create_dir_all(&src.out_dir)?;
            match &args.checkpoint {
                Some(path) => {
                    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    let ck: WeightCheckpoint = serde_json::from_str(&text)?;
                    let (cfg, mut spec, seed) = src.single()?;
                    spec.k = Some(ck.k);
                    let prep = prepare_moicl(&cfg, &spec, seed)?;
                    let subsets = prep.partition.resolve(&prep.task.pool)?;
                    let model = Trainable::from_checkpoint(&ck, &subsets)?;
                    let combination = cfg.cell_training(&spec, seed).combination;
                    let value = score_weights(&model.weights(), &prep, combination, cfg.metric)?;
                    let out = serde_json::json!({
                        "method": spec.display_name(),
                        "seed": seed,
                        "metric": cfg.metric,
                        "value": value,
                    });
                    write_json(&src.out_dir.join("eval.json"), &out)?;
                    println!("{} seed {seed}: test {} = {value:.4}", spec.display_name(), cfg.metric.as_str());
                }
                None => {
                    let cfg = src.resolve()?;
                    let (report, rows) = run_experiment(&cfg)?;
                    write_outputs(&src.out_dir, &report, &rows)?;
                    print_summary(&report);
                }
            }
        }
        Command::Sweep(src) => {
            let cfg = src.resolve()?;
            let (report, rows) = run_experiment(&cfg)?;
            write_outputs(&src.out_dir, &report, &rows)?;
            print_summary(&report);
        }
        Command::Cost(args) => {
            let units = cost_model(&CostModelInput {
                n: args.n,
                k: args.k,
                c_llm: args.c_llm,
                c_hyper: args.c_hyper,
                method: args.method,
                k_prime: args.k_prime,
            })?;
            println!("{units}");
        }
    }
    Ok(())
}

fn print_summary(report: &icl_ensemble::harness::RunReport) {
    for m in &report.methods {
        let std = m.std.map(|s| format!(" ± {s:.4}")).unwrap_or_default();
        println!("{:<24} {} {:.4}{std}", m.name, m.metric.as_str(), m.mean);
    }
}
