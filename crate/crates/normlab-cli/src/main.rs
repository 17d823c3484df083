use clap::{Args, Parser, Subcommand};
use normlab_cli::{apply_overrides, parse_config_text, rerun, run_command, CliError};
use std::collections::BTreeMap;
use std::path::PathBuf;

/// Normalization-placement laboratory: gradient verification, bound
/// campaigns, layer-wise diagnostics, cost accounting, toy training.
#[derive(Parser)]
#[command(name = "normlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` config key.
    #[arg(long)]
    seed: Option<u64>,
    /// Where outputs and the manifest land.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads for parallel campaigns (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// key=value settings applied over the config file.
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Analytic attention Jacobians against finite differences.
    Gradcheck(RunArgs),
    /// Gradient-norm bound campaign across all three attention variants.
    Bounds(RunArgs),
    /// Layer-wise gradient/cosine/entropy snapshots during brief training.
    Profile(RunArgs),
    /// Normalization parameter and FLOPs accounting.
    Flops(RunArgs),
    /// Toy causal-LM training run.
    Train(RunArgs),
    /// Re-run the command recorded in a manifest into a fresh directory.
    Rerun {
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn execute(name: &str, args: &RunArgs) -> Result<bool, CliError> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    let mut map = match &args.config {
        Some(path) => parse_config_text(&std::fs::read_to_string(path)?)?,
        None => BTreeMap::new(),
    };
    apply_overrides(&mut map, &args.overrides)?;
    if let Some(seed) = args.seed {
        map.insert("seed".to_string(), seed.to_string());
    }
    let inputs = args.config.iter().map(|p| p.display().to_string()).collect();
    let out_dir = args
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("normlab_out").join(name));
    let outcome = run_command(name, &map, inputs, &out_dir)?;
    println!("{}", outcome.summary);
    println!("outputs in {}", out_dir.display());
    Ok(outcome.passed)
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gradcheck(args) => execute("gradcheck", args),
        Command::Bounds(args) => execute("bounds", args),
        Command::Profile(args) => execute("profile", args),
        Command::Flops(args) => execute("flops", args),
        Command::Train(args) => execute("train", args),
        Command::Rerun { manifest, out_dir, threads } => {
            if let Some(n) = threads {
                rayon::ThreadPoolBuilder::new().num_threads(*n).build_global().ok();
            }
            rerun(manifest, out_dir).map(|outcome| {
                println!("{}", outcome.summary);
                println!("outputs in {}", out_dir.display());
                outcome.passed
            })
        }
    };
    std::process::exit(match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    });
}
