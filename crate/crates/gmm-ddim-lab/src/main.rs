use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gmm_ddim_lab::config::ExperimentConfig;
use gmm_ddim_lab::run::{
    emit_summary, run_ablate, run_single, run_sweep, run_verify, write_csv, write_verify_csv,
    SweepOutcome, VerifySettings,
};

#[derive(Parser)]
#[command(
    name = "gmm-ddim-lab",
    about = "Diffusion sampling laboratory: DDPM/DDIM and mixture-kernel DDIM \
             on synthetic targets with exact denoisers",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a single sampling cell from the scalar config settings.
    Sample(RunArgs),
    /// Run the full sweep cross product and write one CSV row per cell.
    Sweep(RunArgs),
    /// Run the K x s ablation grid at the configured method, steps, and eta.
    Ablate(RunArgs),
    /// Run the independent oracle suites and write a pass/fail report.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file of dotted `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV path (defaults to <subcommand>.csv).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides sampler.seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key override, e.g. --set sampler.eta=0.5 (wins over the file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Which oracle suite to run: moments, elbo, posterior, or all.
    #[arg(long, default_value = "all")]
    oracle: String,
    /// Mixture components K of the kernel under test.
    #[arg(long, short = 'k', default_value_t = 2)]
    components: usize,
    /// Sampling steps S (schedule subsequence length).
    #[arg(long, short = 's', default_value_t = 3)]
    steps: usize,
    /// State dimension D.
    #[arg(long, short = 'd', default_value_t = 4)]
    dim: usize,
    /// Kernel scheme: gmm_rand, gmm_ortho, or gmm_ortho_vub.
    #[arg(long, default_value = "gmm_ortho")]
    scheme: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Offset scale s of the kernel under test.
    #[arg(long, default_value_t = 0.1)]
    scale: f64,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    /// Monte Carlo chains for the simulation oracle.
    #[arg(long, default_value_t = 20_000)]
    chains: usize,
    /// Diffusion steps T of the underlying schedule.
    #[arg(long, default_value_t = 100)]
    total_steps: usize,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch() -> gmm_ddim_lab::Result<bool> {
    match Cli::parse().cmd {
        Cmd::Sample(a) => run_and_write(&a, "sample.csv", run_single),
        Cmd::Sweep(a) => run_and_write(&a, "sweep.csv", run_sweep),
        Cmd::Ablate(a) => run_and_write(&a, "ablate.csv", run_ablate),
        Cmd::Verify(a) => verify(&a),
    }
}

fn run_and_write(
    args: &RunArgs,
    default_out: &str,
    runner: fn(&ExperimentConfig) -> gmm_ddim_lab::Result<SweepOutcome>,
) -> gmm_ddim_lab::Result<bool> {
    let cfg = ExperimentConfig::load(args.config.as_deref(), &args.set, args.seed)?;
    let out_path = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(default_out));
    let outcome = runner(&cfg)?;
    println!(
        "{} cells (cross product {}, deduplicated {})",
        outcome.records.len(),
        outcome.cross_product,
        outcome.deduplicated
    );
    let mut file = std::fs::File::create(&out_path)?;
    write_csv(&mut file, &outcome, &cfg)?;
    let mut stdout = std::io::stdout().lock();
    emit_summary(&mut stdout, &outcome)?;
    let failed = outcome.records.iter().filter(|r| !r.ok()).count();
    if failed > 0 {
        println!("{failed} cell(s) failed; see {}", out_path.display());
    }
    println!("wrote {}", out_path.display());
    Ok(outcome.all_ok())
}

fn verify(args: &VerifyArgs) -> gmm_ddim_lab::Result<bool> {
    let settings = VerifySettings {
        oracle: args.oracle.clone(),
        components: args.components,
        steps: args.steps,
        dim: args.dim,
        scheme: args.scheme.clone(),
        seed: args.seed,
        scale: args.scale,
        eta: args.eta,
        chains: args.chains,
        total_steps: args.total_steps,
        ..VerifySettings::default()
    };
    let rows = run_verify(&settings)?;
    let out_path = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("verify.csv"));
    let mut file = std::fs::File::create(&out_path)?;
    write_verify_csv(&mut file, &rows)?;
    let failed = rows.iter().filter(|r| !r.pass).count();
    println!(
        "verify: {} checks, {} failed; wrote {}",
        rows.len(),
        failed,
        out_path.display()
    );
    Ok(failed == 0)
}
