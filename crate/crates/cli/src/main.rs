use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use obfunas::arch::{
    canonical_hash, canonicalize, enumerate_space, parse_architecture, serialize_architecture,
    ArchError, Architecture, Backbone, CellGraph, Family, OpLabel, SpaceConstraints,
};
use obfunas::flops::{flops_of_arch, FlopsCount};
use obfunas::network::{
    build_network, load_network, load_network_files, save_network, ConcreteNetwork, InitPolicy,
};
use obfunas::oracle::{load_accuracy_table, AccuracyTable, FitnessOracle};
use obfunas::search::{
    brute_force_search, evolve, reachable_masks, SearchConfig, SearchReport, Tau, DEFAULT_BUDGET,
};
use obfunas::transforms::{
    apply_plan, check_function_preserving, parse_plan, parse_strategy_set, serialize_plan,
    StrategyKind,
};

#[derive(Parser)]
#[command(name = "obfunas", version, about = "Function-preserving architecture obfuscation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check an architecture document.
    Validate {
        #[arg(short, long)]
        input: PathBuf,
    },
    /// Apply a plan to a network and write the mask.
    Obfuscate {
        #[arg(short, long)]
        input: PathBuf,
        /// Weights file; without it the victim is initialized from --init-seed.
        #[arg(short, long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
        #[arg(short, long)]
        plan: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Compare two saved networks on random inputs.
    Verify {
        #[arg(short = 'a', long)]
        first: PathBuf,
        #[arg(short = 'b', long)]
        second: PathBuf,
        #[arg(short = 'n', long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0.0)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the FLOPs of an architecture.
    Flops {
        #[arg(short, long)]
        input: PathBuf,
    },
    /// Write every cell of a bounded space as canonical documents.
    Enumerate {
        #[arg(long, default_value_t = 2)]
        min_nodes: usize,
        #[arg(long)]
        max_nodes: usize,
        #[arg(long, default_value_t = 9)]
        max_edges: usize,
        /// Comma-separated interior op labels.
        #[arg(long, default_value = "conv3x3-bn-relu,conv1x1-bn-relu,maxpool3x3")]
        ops: String,
        /// Architecture whose backbone the cells are placed in.
        #[arg(long)]
        like: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Write an accuracy table from the synthetic oracle.
    GenTable {
        /// Directory of architecture documents.
        #[arg(long, conflicts_with = "reachable_from", required_unless_present = "reachable_from")]
        space: Option<PathBuf>,
        /// Victim whose reachable masks make up the table.
        #[arg(long)]
        reachable_from: Option<PathBuf>,
        #[arg(long, default_value = "all")]
        strategies: String,
        #[arg(long, default_value_t = 2)]
        max_plan_length: usize,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: usize,
        #[arg(long, default_value = "synthetic")]
        oracle: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Search for the mask with the lowest accuracy under a FLOPs bound.
    Search(SearchArgs),
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    victim: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    /// `synthetic` or a `hash,accuracy` CSV file.
    #[arg(long)]
    oracle: String,
    #[arg(long, default_value_t = 0)]
    oracle_seed: u64,
    #[arg(long, conflicts_with = "tau_mult")]
    tau: Option<u64>,
    #[arg(long)]
    tau_mult: Option<f64>,
    #[arg(long, default_value_t = 32)]
    pop: usize,
    #[arg(long, default_value_t = 2000)]
    cycles: usize,
    #[arg(long, default_value_t = 4)]
    tournament: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "all")]
    strategies: String,
    #[arg(long, default_value_t = 4)]
    max_plan_length: usize,
    /// Check every feasible individual for function preservation.
    #[arg(long)]
    verify_masks: bool,
    /// Exhaustive search instead of evolution.
    #[arg(long)]
    brute_force: bool,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: usize,
    #[arg(short, long)]
    output: Option<PathBuf>,
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    plan_out: Option<PathBuf>,
}

/// Failure that has already been reported; maps to exit code 1.
#[derive(Debug)]
struct Reported;

impl std::fmt::Display for Reported {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("reported")
    }
}

impl std::error::Error for Reported {}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Parsed and canonicalized, so node ids match canonical positions.
fn load_arch(path: &Path) -> Result<Architecture> {
    let arch = parse_architecture(&read(path)?).with_context(|| path.display().to_string())?;
    Ok(canonicalize(&arch))
}

fn load_victim(arch: &Path, weights: Option<&Path>, init_seed: u64) -> Result<ConcreteNetwork> {
    match weights {
        Some(w) => Ok(load_network_files(arch, w)?),
        None => Ok(build_network(&load_arch(arch)?, InitPolicy::default(), init_seed)?),
    }
}

fn strategies(text: &str) -> Result<Vec<StrategyKind>> {
    let set = parse_strategy_set(text).map_err(anyhow::Error::msg)?;
    if set.is_empty() {
        bail!("strategy set is empty");
    }
    Ok(set)
}

fn default_backbone() -> Backbone {
    Backbone {
        family: Family::CellStack,
        stem_channels: 4,
        num_stacks: 1,
        cells_per_stack: 1,
        input_shape: [3, 8, 8],
        num_classes: 10,
    }
}

fn parse_ops(text: &str) -> Result<Vec<OpLabel>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| {
            serde_json::from_value(serde_json::json!({ "kind": name }))
                .with_context(|| format!("unknown op label {name:?}"))
        })
        .collect()
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg = format!("{msg}: {c}");
        }
    }
    msg
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate { input } => {
            let report = match parse_architecture(&read(&input)?) {
                Ok(arch) => {
                    println!("ok hash={}", canonical_hash(&arch)?);
                    return Ok(());
                }
                Err(ArchError::Invalid(report)) => report,
                Err(e) => return Err(anyhow::Error::new(e).context(input.display().to_string())),
            };
            println!("invalid: {report}");
            return Err(Reported.into());
        }
        Command::Obfuscate { input, weights, init_seed, plan, output } => {
            let victim = load_victim(&input, weights.as_deref(), init_seed)?;
            let plan = parse_plan(&read(&plan)?).map_err(anyhow::Error::msg).context("plan")?;
            let mask = apply_plan(&victim, &plan)?;
            save_network(&mask, &output)?;
            println!(
                "hash={} {}",
                canonical_hash(&mask.architecture())?,
                obfunas::flops::flops_of_network(&mask)
            );
        }
        Command::Verify { first, second, samples, tol, seed } => {
            let f = load_network(&first)?;
            let g = load_network(&second)?;
            let r = check_function_preserving(&f, &g, samples, seed, tol)?;
            println!("max_diff={} {}", r.max_abs_diff, if r.pass { "pass" } else { "fail" });
            if !r.pass {
                return Err(Reported.into());
            }
        }
        Command::Flops { input } => {
            let arch = load_arch(&input)?;
            println!("{}", flops_of_arch(&arch)?);
        }
        Command::Enumerate { min_nodes, max_nodes, max_edges, ops, like, output } => {
            let backbone = match like {
                Some(p) => load_arch(&p)?.backbone,
                None => default_backbone(),
            };
            let proto = Architecture::new(backbone, CellGraph::chain(&[]));
            let constraints = SpaceConstraints {
                min_nodes,
                max_nodes,
                max_edges,
                ops: parse_ops(&ops)?,
            };
            fs::create_dir_all(&output).with_context(|| format!("creating {}", output.display()))?;
            let mut n = 0;
            for (i, arch) in enumerate_space(&proto, &constraints).enumerate() {
                write(&output.join(format!("{i:06}.json")), &format!("{}\n", serialize_architecture(&arch)?))?;
                n += 1;
            }
            println!("architectures={n}");
        }
        Command::GenTable { space, reachable_from, strategies: set, max_plan_length, budget, oracle, seed, output } => {
            if oracle != "synthetic" {
                bail!("gen-table only supports --oracle synthetic, got {oracle:?}");
            }
            let oracle = FitnessOracle::synthetic(seed);
            let archs: Vec<Architecture> = match (space, reachable_from) {
                (Some(dir), _) => {
                    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
                        .with_context(|| format!("reading {}", dir.display()))?
                        .map(|e| e.map(|e| e.path()))
                        .collect::<Result<_, _>>()?;
                    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
                    paths.sort();
                    paths.iter().map(|p| load_arch(p)).collect::<Result<_>>()?
                }
                (None, Some(victim)) => {
                    let net = build_network(&load_arch(&victim)?, InitPolicy::default(), 0)?;
                    reachable_masks(net.skeleton(), &strategies(&set)?, max_plan_length, budget)?
                        .into_iter()
                        .map(|(_, s)| s.architecture())
                        .collect()
                }
                (None, None) => unreachable!("clap requires one source"),
            };
            let mut table = AccuracyTable::new();
            for arch in &archs {
                table.insert(canonical_hash(arch)?, oracle.query(arch)?);
            }
            write(&output, &table.to_csv())?;
            println!("rows={}", table.len());
        }
        Command::Search(args) => search(args)?,
    }
    Ok(())
}

fn search(args: SearchArgs) -> Result<()> {
    let victim = load_victim(&args.victim, args.weights.as_deref(), args.init_seed)?;
    let oracle = if args.oracle == "synthetic" {
        FitnessOracle::synthetic(args.oracle_seed)
    } else {
        FitnessOracle::Table(load_accuracy_table(Path::new(&args.oracle))?)
    };
    let tau = match (args.tau, args.tau_mult) {
        (Some(t), _) => Tau::Absolute(t),
        (None, Some(m)) => Tau::Multiplier(m),
        (None, None) => Tau::Multiplier(1.15),
    };
    let set = strategies(&args.strategies)?;
    let report: SearchReport = if args.brute_force {
        brute_force_search(&victim, &oracle, tau, &set, args.max_plan_length, args.budget)?
    } else {
        let config = SearchConfig {
            population_size: args.pop,
            cycles: args.cycles,
            tournament_size: args.tournament,
            seed: args.seed,
            tau,
            strategies: set,
            max_plan_length: args.max_plan_length,
            verify_masks: args.verify_masks,
        };
        evolve(&victim, &oracle, &config)?
    };
    let json = format!("{}\n", report.to_json());
    match &args.output {
        Some(p) => write(p, &json)?,
        None => print!("{json}"),
    }
    if let Some(p) = &args.history {
        write(p, &report.history_csv())?;
    }
    if let Some(p) = &args.plan_out {
        write(p, &format!("{}\n", serialize_plan(&report.best_plan)))?;
    }
    println!(
        "best_fitness={} mask_accuracy={} victim_accuracy={} mflops_victim={:.2} mflops_mask={:.2} hash={}",
        report.best_fitness,
        report.mask_accuracy,
        report.victim_accuracy,
        FlopsCount(report.flops_victim).mflops(),
        FlopsCount(report.flops_mask).mflops(),
        report.best_arch_hash
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Reported>() => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
