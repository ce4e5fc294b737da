//! Command-line front end: fit a model from a CSV, predict on a grid,
//! compute batch-allocation designs, simulate random-assignment quality,
//! and run benchmark experiments.
//!
//! Exit codes: 0 success, 2 usage, 3 data or input, 4 numerical or
//! internal-state failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sbt::bart::{BartConfig, SplitPrior};
use sbt::bench::{reports_to_csv, run_experiment, ExperimentSpec, TestFunction};
use sbt::design::{
    a_criterion, constrained_allocation, minmax_criterion, multinomial_draw, optimal_allocation,
    phi_fixed, Allocation, BoxConstraint,
};
use sbt::error::{Error, Result};
use sbt::io::{
    accept_rates, diagnostics_to_csv, load_dataset, load_grid, predictions_to_csv, read_model,
    write_manifest, write_model, Manifest, SPEC_VERSION,
};
use sbt::sharded::{sbt_fit, sbt_predict, AuxMode, SbtConfig};

#[derive(Parser)]
#[command(name = "sbt", version, about = "Sharded additive regression trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a CSV dataset and persist it with run artifacts.
    Fit(FitArgs),
    /// Evaluate a persisted model on a prediction grid.
    Predict(PredictArgs),
    /// Compute an optimal batch allocation and report a criterion value.
    Design(DesignArgs),
    /// Simulate the design criterion of random equal-mass assignments.
    DesignSim(DesignSimArgs),
    /// Run a benchmark experiment on a synthetic test function.
    Bench(BenchArgs),
}

#[derive(Args)]
struct FitArgs {
    /// Training CSV with a header row; the response is the last column
    /// unless --y-col names one.
    data: PathBuf,
    /// Response column name.
    #[arg(long)]
    y_col: Option<String>,
    /// Directory for model.txt, manifest.json, and diagnostics.csv.
    #[arg(long)]
    out: PathBuf,
    /// Trees per shard ensemble.
    #[arg(long, default_value_t = 20)]
    ntree: usize,
    /// Variance-model tree count; only 1 is supported.
    #[arg(long, default_value_t = 1)]
    ntreeh: usize,
    /// Cutpoints per input dimension.
    #[arg(long, default_value_t = 100)]
    numcut: usize,
    /// Maximum sharding-tree depth (0 disables sharding).
    #[arg(long, default_value_t = 2)]
    shardepth: usize,
    /// Assign shard blocks by random permutation instead of dataset order.
    #[arg(long)]
    randshard: bool,
    /// Sharding-tree split probability; 1.0 freezes the balanced tree,
    /// smaller values sample the tree by grow/prune moves.
    #[arg(long, default_value_t = 1.0)]
    shardpsplit: f64,
    /// Minimum observations per shard.
    #[arg(long, default_value_t = 10)]
    nmin: usize,
    /// Minimum observations per terminal node.
    #[arg(long, default_value_t = 5)]
    min_leaf: usize,
    /// Relative birth,death proposal weights.
    #[arg(long, default_value = "0.5,0.5", value_parser = parse_pair)]
    pbd: (f64, f64),
    /// Probability of a change-rule proposal.
    #[arg(long, default_value_t = 0.1)]
    probchv: f64,
    /// Accepted for interface compatibility; ignored with a warning.
    #[arg(long)]
    probchvh: Option<f64>,
    /// Split-probability base of the tree prior.
    #[arg(long, default_value_t = 0.45)]
    alpha: f64,
    /// Known noise standard deviation; omit to sample the variance.
    #[arg(long)]
    sigma: Option<f64>,
    /// Worker threads for parallel shard updates.
    #[arg(long, default_value_t = 4)]
    tc: usize,
    /// Total MCMC iterations.
    #[arg(long, default_value_t = 1000)]
    nmcmc: usize,
    /// Burn-in iterations discarded from the front.
    #[arg(long, default_value_t = 500)]
    burn: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model family tag; only "bart" is supported.
    #[arg(long, default_value = "bart")]
    model: String,
}

#[derive(Args)]
struct PredictArgs {
    /// Model dump written by `fit`.
    model: PathBuf,
    /// Prediction grid CSV: input columns only, raw units.
    grid: PathBuf,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Auxiliary routing draws per posterior sample.
    #[arg(long, default_value_t = 1)]
    ndraws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionName {
    /// Product of batch fractions (maximized by the balanced allocation).
    Phi,
    /// Largest inverse batch size.
    Minmax,
    /// Sum of inverse batch sizes.
    A,
}

impl CriterionName {
    fn label(self) -> &'static str {
        match self {
            CriterionName::Phi => "phi",
            CriterionName::Minmax => "minmax",
            CriterionName::A => "a",
        }
    }

    fn value(self, alloc: &Allocation) -> Result<f64> {
        match self {
            CriterionName::Phi => phi_fixed(alloc),
            CriterionName::Minmax => Ok(minmax_criterion(alloc)),
            CriterionName::A => Ok(a_criterion(alloc)),
        }
    }
}

#[derive(Args)]
struct DesignArgs {
    /// Total observations to allocate.
    #[arg(long)]
    n: u64,
    /// Number of batches.
    #[arg(long)]
    b: usize,
    #[arg(long, value_enum, default_value_t = CriterionName::Phi)]
    criterion: CriterionName,
    /// Per-batch lower bounds, comma separated; requires --upper.
    #[arg(long)]
    lower: Option<String>,
    /// Per-batch upper bounds, comma separated; requires --lower.
    #[arg(long)]
    upper: Option<String>,
    /// Output JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DesignSimArgs {
    #[arg(long, default_value_t = 1000)]
    n: u64,
    #[arg(long, default_value_t = 4)]
    b: usize,
    /// Random assignments to draw.
    #[arg(long, default_value_t = 10000)]
    batches: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Test function: branin, friedman, step, or constant.
    #[arg(long)]
    function: String,
    /// Level used when --function constant is selected.
    #[arg(long, default_value_t = 1.0)]
    constant: f64,
    /// Training points.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Input dimension.
    #[arg(long, default_value_t = 2)]
    d: usize,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    #[arg(long, default_value_t = 0.0)]
    noise_sd: f64,
    /// Trees per ensemble.
    #[arg(long, default_value_t = 10)]
    ntree: usize,
    /// Plain-model training fractions, comma separated; may be empty.
    #[arg(long, default_value = "0.25,0.5,1.0")]
    fractions: String,
    /// Sharding depths to benchmark, comma separated; may be empty.
    #[arg(long, default_value = "0,1,2")]
    shardepths: String,
    #[arg(long, default_value_t = 20)]
    replicates: usize,
    #[arg(long, default_value_t = 1000)]
    nmcmc: usize,
    #[arg(long, default_value_t = 500)]
    burn: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads.
    #[arg(long, default_value_t = 4)]
    tc: usize,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected two comma-separated numbers, got '{s}'"));
    }
    let a = parts[0].trim().parse().map_err(|_| format!("bad number '{}'", parts[0]))?;
    let b = parts[1].trim().parse().map_err(|_| format!("bad number '{}'", parts[1]))?;
    Ok((a, b))
}

fn parse_list<T: std::str::FromStr>(s: &str, flag: &str) -> Result<Vec<T>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("{flag}: bad list entry '{p}'")))
        })
        .collect()
}

fn write_or_print(path: &Option<PathBuf>, content: &str) -> Result<()> {
    match path {
        Some(p) => {
            std::fs::write(p, content)?;
            Ok(())
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn thread_pool(tc: usize) -> Result<rayon::ThreadPool> {
    if tc < 1 {
        return Err(Error::Usage("--tc must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(tc)
        .build()
        .map_err(|e| Error::State(format!("thread pool: {e}")))
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    if args.model != "bart" {
        return Err(Error::Usage(format!(
            "unsupported --model '{}'; only 'bart' is available",
            args.model
        )));
    }
    if args.ntreeh != 1 {
        return Err(Error::Usage("--ntreeh must be 1; variance forests are not supported".into()));
    }
    if args.nmcmc <= args.burn {
        return Err(Error::Usage(format!(
            "--nmcmc ({}) must exceed --burn ({})",
            args.nmcmc, args.burn
        )));
    }
    if args.tc < 1 {
        return Err(Error::Usage("--tc must be at least 1".into()));
    }
    if args.shardepth > 16 {
        return Err(Error::Usage("--shardepth must be at most 16".into()));
    }
    if args.probchvh.is_some() {
        eprintln!("warning: --probchvh is accepted for compatibility and ignored");
    }

    let data = load_dataset(&args.data, args.y_col.as_deref())?;
    for w in &data.warnings {
        eprintln!("warning: {w}");
    }

    let config = SbtConfig {
        bart: BartConfig {
            m: args.ntree,
            numcut: args.numcut,
            split_prior: SplitPrior::GaltonWatson { alpha: args.alpha },
            tau: None,
            sigma_fixed: args.sigma,
            nu: 3.0,
            lambda: None,
            pbd: args.pbd,
            probchv: args.probchv,
            min_leaf: args.min_leaf,
        },
        shardepth: args.shardepth,
        n_min: args.nmin,
        shardpsplit: args.shardpsplit,
    };
    let aux = AuxMode::Blocks {
        n_blocks: 1usize << args.shardepth,
        permuted: args.randshard,
    };

    let pool = thread_pool(args.tc)?;
    let fit = pool.install(|| {
        sbt_fit(&data.x, &data.y, &aux, &config, args.nmcmc, args.burn, args.seed)
    })?;

    std::fs::create_dir_all(&args.out)?;
    let model_path = args.out.join("model.txt");
    write_model(&model_path, &fit, &data.rescaler)?;

    let (tu_accept_rate, tree_accept_rate) = accept_rates(&fit.diagnostics, args.ntree);
    let manifest = Manifest {
        spec_version: SPEC_VERSION,
        seed: args.seed,
        n: data.x.n_rows(),
        d: data.x.n_cols(),
        x_names: data.x_names.clone(),
        y_name: data.y_name.clone(),
        ntree: args.ntree,
        numcut: args.numcut,
        shardepth: args.shardepth,
        shardpsplit: args.shardpsplit,
        n_min: args.nmin,
        min_leaf: args.min_leaf,
        randshard: args.randshard,
        n_mcmc: args.nmcmc,
        burn: args.burn,
        sigma: args.sigma,
        split_alpha: args.alpha,
        pbd: args.pbd,
        probchv: args.probchv,
        tc: args.tc,
        shard_sizes_per_sample: fit
            .samples
            .iter()
            .map(|s| s.shards.iter().map(|sh| sh.n_b).collect())
            .collect(),
        tu_accept_rate,
        tree_accept_rate,
    };
    let manifest_path = args.out.join("manifest.json");
    write_manifest(&manifest_path, &manifest)?;

    let diag_path = args.out.join("diagnostics.csv");
    std::fs::write(&diag_path, diagnostics_to_csv(&fit.diagnostics))?;

    println!("wrote {}", model_path.display());
    println!("wrote {}", manifest_path.display());
    println!("wrote {}", diag_path.display());
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let (fit, rescaler) = read_model(&args.model)?;
    let (raw_grid, _names) = load_grid(&args.grid)?;
    if raw_grid.n_cols() != rescaler.d() {
        return Err(Error::Input(format!(
            "grid has {} columns, model expects {}",
            raw_grid.n_cols(),
            rescaler.d()
        )));
    }
    let grid = rescaler.apply(&raw_grid)?;
    let predictions = sbt_predict(&fit, &grid, args.seed, args.ndraws)?;
    write_or_print(&args.out, &predictions_to_csv(&predictions))
}

fn cmd_design(args: &DesignArgs) -> Result<()> {
    let alloc = match (&args.lower, &args.upper) {
        (None, None) => optimal_allocation(args.n, args.b)?,
        (Some(lower), Some(upper)) => {
            let lower: Vec<u64> = parse_list(lower, "--lower")?;
            let upper: Vec<u64> = parse_list(upper, "--upper")?;
            if lower.len() != args.b || upper.len() != args.b {
                return Err(Error::Usage(format!(
                    "--lower and --upper must list {} bounds",
                    args.b
                )));
            }
            constrained_allocation(args.n, &BoxConstraint::new(lower, upper)?)?
        }
        _ => {
            return Err(Error::Usage(
                "--lower and --upper must be given together".into(),
            ))
        }
    };
    let value = args.criterion.value(&alloc)?;
    let body = serde_json::json!({
        "criterion": args.criterion.label(),
        "n": args.n,
        "B": args.b,
        "allocation": alloc.counts(),
        "value": value,
    });
    let text = serde_json::to_string_pretty(&body)
        .map_err(|e| Error::State(format!("design serialization: {e}")))?;
    write_or_print(&args.out, &format!("{text}\n"))
}

fn cmd_design_sim(args: &DesignSimArgs) -> Result<()> {
    use rand::SeedableRng;
    if args.b < 1 || args.n < 1 || args.batches < 1 {
        return Err(Error::Usage("need --n >= 1, --b >= 1, --batches >= 1".into()));
    }
    let masses = vec![1.0 / args.b as f64; args.b];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
    let mut out = String::from("batch_index,phi\n");
    for i in 0..args.batches {
        let counts = multinomial_draw(&mut rng, args.n, &masses);
        let phi = phi_fixed(&Allocation::new(counts)?)?;
        use std::fmt::Write as _;
        let _ = writeln!(out, "{i},{phi}");
    }
    write_or_print(&args.out, &out)
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let function = match args.function.as_str() {
        "branin" => TestFunction::Branin,
        "friedman" => TestFunction::Friedman,
        "step" => TestFunction::Step,
        "constant" => TestFunction::Constant(args.constant),
        other => {
            return Err(Error::Usage(format!(
                "unknown --function '{other}'; use branin, friedman, step, or constant"
            )))
        }
    };
    let spec = ExperimentSpec {
        function,
        n: args.n,
        n_test: args.n_test,
        d: args.d,
        noise_sd: args.noise_sd,
        m: args.ntree,
        bart_fractions: parse_list(&args.fractions, "--fractions")?,
        shardepths: parse_list(&args.shardepths, "--shardepths")?,
        replicates: args.replicates,
        n_mcmc: args.nmcmc,
        burn: args.burn,
        seed: args.seed,
    };
    let pool = thread_pool(args.tc)?;
    let reports = pool.install(|| run_experiment(&spec))?;
    write_or_print(&args.out, &reports_to_csv(&reports)?)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Design(args) => cmd_design(args),
        Command::DesignSim(args) => cmd_design_sim(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
