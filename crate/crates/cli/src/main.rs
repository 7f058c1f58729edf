//! `imc`: seeded recovery, concentration and dimension experiments.
//!
//! Exit codes: 0 success, 2 invalid arguments or configuration, 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use imc_core::experiments::{run, DecoderKind, ExperimentConfig, ExperimentKind, RunOutput, SupportKind};
use imc_core::measurement::EnsembleKind;
use imc_core::recovery::AltMinInit;

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "imc", version, about = "Structured matrix recovery experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Success rate of a decoder against the number of measurements.
    Phase(Overrides),
    /// Empirical small-ball probabilities against the analytic bounds.
    Concentration(Overrides),
    /// Box-counting dimension of a sampled support set.
    Dimension(Overrides),
    /// Phase sweep of the sparse-factor decoder with rank-one measurements.
    Example1(Overrides),
}

/// Flags override values from `--config`, which override the preset.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON config file; keys mirror the config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output CSV; metadata goes to `<out>.meta.json`. Without it the CSV goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    l1: Option<usize>,
    #[arg(long)]
    l2: Option<usize>,
    /// dense | rankone
    #[arg(long)]
    ensemble: Option<EnsembleKind>,
    /// Radius of the balls the measurement vectors are drawn from.
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    k_step: Option<usize>,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// enumerate | altmin | sparsefactor
    #[arg(long)]
    decoder: Option<DecoderKind>,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// random | spectral
    #[arg(long)]
    init: Option<AltMinInit>,
    #[arg(long)]
    success_rel_err: Option<f64>,
    /// Cap on support pairs for the sparse-factor decoder.
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    cloud_size: Option<usize>,
    /// lowrank | sparsefactor | factorset | pointcloud
    #[arg(long)]
    support: Option<SupportKind>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    rho_min: Option<f64>,
    #[arg(long)]
    rho_max: Option<f64>,
    /// Norm bound of generated supports.
    #[arg(long)]
    bound: Option<f64>,
    /// Point-cloud CSV for `--support pointcloud`.
    #[arg(long)]
    points: Option<PathBuf>,
    /// Record wall-clock seconds per sweep point (makes output time-dependent).
    #[arg(long)]
    record_timing: bool,
}

macro_rules! overlay {
    ($config:ident, $flags:ident, $($field:ident => $target:ident),* $(,)?) => {
        $(if let Some(v) = $flags.$field.clone() { $config.$target = v.into(); })*
    };
}

impl Overrides {
    fn apply(&self, config: &mut ExperimentConfig) {
        overlay!(config, self,
            m => m, n => n, r => r, l1 => l1, l2 => l2, ensemble => ensemble, s => s,
            k_min => k_min, k_max => k_max, k_step => k_step, trials => trials, seed => master_seed,
            decoder => decoder, restarts => restarts, max_iters => max_iters, init => init,
            success_rel_err => success_rel_err, budget => budget, cloud_size => cloud_size,
            support => support, samples => samples, levels => levels, bound => bound,
        );
        if let Some(w) = self.workers {
            config.workers = Some(w);
        }
        if let Some(rho) = self.rho_min {
            config.rho_min = Some(rho);
        }
        if let Some(rho) = self.rho_max {
            config.rho_max = Some(rho);
        }
        if let Some(path) = &self.points {
            config.points_path = Some(path.clone());
        }
        if let Some(path) = &self.out {
            config.output_path = Some(path.clone());
        }
        config.record_timing |= self.record_timing;
    }
}

fn load_config(kind: ExperimentKind, flags: &Overrides) -> Result<ExperimentConfig, String> {
    let mut config = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            ExperimentConfig::from_json_over_preset(&text, Some(kind)).map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => ExperimentConfig::preset(kind),
    };
    flags.apply(&mut config);
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

fn summary(output: &RunOutput) -> String {
    match output {
        RunOutput::Phase(run) => {
            let rates: Vec<String> = run.records.iter().map(|r| format!("k={}:{:.3}", r.k, r.success_rate)).collect();
            format!("reference k* = {}; success rates {}", run.reference_dim, rates.join(" "))
        }
        RunOutput::Concentration(rows) => {
            let violations = rows.iter().filter(|r| !r.dominated()).count();
            format!("{} thresholds, {violations} bound violations", rows.len())
        }
        RunOutput::Dimension(run) => format!(
            "slope {:.4} (reference {}), r2 {:.4}, counts {:?}",
            run.estimate.slope, run.reference, run.estimate.r2, run.estimate.counts
        ),
    }
}

fn execute(kind: ExperimentKind, flags: &Overrides) -> ExitCode {
    let config = match load_config(kind, flags) {
        Ok(config) => config,
        Err(message) => {
            eprintln!("error: {message}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(config.workers.unwrap_or(0)).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    let output = match pool.install(|| run(&config)) {
        Ok(output) => output,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    let written = match &config.output_path {
        Some(path) => output.write(&config, path),
        None => output.csv().map(|csv| print!("{csv}")),
    };
    if let Err(e) = written {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_RUNTIME);
    }
    for warning in output.warnings() {
        eprintln!("warning: {warning}");
    }
    eprintln!("{}: {}", kind.name(), summary(&output));
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Phase(flags) => execute(ExperimentKind::Phase, flags),
        Command::Concentration(flags) => execute(ExperimentKind::Concentration, flags),
        Command::Dimension(flags) => execute(ExperimentKind::Dimension, flags),
        Command::Example1(flags) => execute(ExperimentKind::Example1, flags),
    }
}
