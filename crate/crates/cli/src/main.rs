//! Experiment runner: adversarial-dropout domain adaptation and
//! semi-supervised GAN training on synthetic 2-D benchmarks, with gradient
//! checking and decision-boundary rendering.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adr_core::adr::{AdrConfig, TrainVariant};
use adr_core::ganssl::GanConfig;
use adr_core::losses::EntropyTermVariant;
use adr_core::nn::OptimizerKind;
use adr_core::Error;

use adr_cli::runner::{
    self, AdaptRunConfig, BoundaryConfig, GanRunConfig, HeadChoice,
};

#[derive(Parser)]
#[command(name = "adr", version, about = "Adversarial dropout training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adversarial-dropout domain adaptation on rotated two-moons data.
    AdaptAdr(AdaptArgs),
    /// Entropy-adversary baseline on the same benchmark.
    AdaptEnt(AdaptArgs),
    /// Non-adapted baseline: classification on source only.
    AdaptSourceOnly(AdaptArgs),
    /// Semi-supervised GAN training on a 2-D Gaussian mixture.
    GanSsl(GanArgs),
    /// Finite-difference check of every op and training objective.
    Gradcheck(GradcheckArgs),
    /// Re-render the boundary panels of a finished run directory.
    RenderBoundary(RenderArgs),
}

#[derive(Args)]
struct AdaptArgs {
    /// Output directory; one seed-<n> subdirectory per run.
    #[arg(long)]
    out: PathBuf,

    /// Comma-separated seed list.
    #[arg(long, default_value = "0,1,2,3,4")]
    seeds: String,

    /// Load a fully resolved config.json and rerun it (tuning flags ignored).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Points per domain.
    #[arg(long, default_value_t = 300)]
    moons_n: usize,

    /// Isotropic noise standard deviation.
    #[arg(long, default_value_t = 0.1)]
    moons_noise: f64,

    /// Target-domain rotation in degrees, about the source centroid.
    #[arg(long, default_value_t = 30.0)]
    rotation_degrees: f64,

    #[arg(long, default_value_t = 0.5)]
    dropout_rate: f64,

    /// Generator updates per outer iteration in the adversarial step.
    #[arg(long, default_value_t = 4)]
    step3_repeats: usize,

    #[arg(long, default_value_t = 2e-4)]
    learning_rate: f64,

    #[arg(long, value_enum, default_value_t = OptArg::Adam)]
    optimizer: OptArg,

    #[arg(long, default_value_t = 64)]
    batch_source: usize,

    #[arg(long, default_value_t = 64)]
    batch_target: usize,

    #[arg(long, default_value_t = 3000)]
    iterations: usize,

    #[arg(long, default_value_t = 50)]
    eval_interval: usize,

    /// Class-usage regularizer variant in the generator objective.
    #[arg(long, value_enum, default_value_t = EntropyTermArg::Marginal)]
    entropy_term: EntropyTermArg,

    /// Boundary panel resolution (pixels per side).
    #[arg(long, default_value_t = 256)]
    boundary_resolution: usize,

    /// Which head the boundary panels use.
    #[arg(long, value_enum, default_value_t = HeadArg::Cprime)]
    boundary_head: HeadArg,

    /// Also dump the generated datasets as CSV.
    #[arg(long, default_value_t = false)]
    dump_data: bool,
}

#[derive(Args)]
struct GanArgs {
    /// Output directory; one seed-<n> subdirectory per run.
    #[arg(long)]
    out: PathBuf,

    #[arg(long, default_value = "0,1,2,3,4")]
    seeds: String,

    /// Load a fully resolved config.json and rerun it (tuning flags ignored).
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long, default_value_t = 8)]
    z_dim: usize,

    #[arg(long, default_value_t = 2)]
    classes: usize,

    #[arg(long, default_value_t = 10)]
    labels_per_class: usize,

    #[arg(long, default_value_t = 2000)]
    unlabeled: usize,

    /// Radius of the circle the mixture means sit on.
    #[arg(long, default_value_t = 2.0)]
    separation: f64,

    /// Standard deviation of each mixture component.
    #[arg(long, default_value_t = 1.25)]
    mixture_noise: f64,

    #[arg(long, default_value_t = 0.5)]
    dropout_rate: f64,

    #[arg(long, default_value_t = 2e-4)]
    learning_rate: f64,

    #[arg(long, default_value_t = 64)]
    batch_size: usize,

    #[arg(long, default_value_t = 2000)]
    iterations: usize,

    /// Which critic hidden layer provides the feature-matching map.
    #[arg(long, default_value_t = 1)]
    feature_layer: usize,

    #[arg(long, default_value_t = 50)]
    eval_interval: usize,

    /// Drop both twin-sensitivity terms from the objectives.
    #[arg(long, default_value_t = false)]
    disable_adversarial: bool,

    /// Drop the class-usage term from the critic objective.
    #[arg(long, default_value_t = false)]
    disable_balance: bool,

    /// Swap the signs of the two critic sensitivity terms (ablation).
    #[arg(long, default_value_t = false)]
    flip_adv_signs: bool,

    /// Held-out test points per class.
    #[arg(long, default_value_t = 1000)]
    test_per_class: usize,

    /// Generated samples dumped to samples.csv at the end.
    #[arg(long, default_value_t = 500)]
    sample_dump: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random instances per check.
    #[arg(long, default_value_t = 20)]
    instances: usize,

    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,

    /// Relative-error tolerance.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,

    #[arg(long, default_value_t = 0xADC0FFEE)]
    seed: u64,
}

#[derive(Args)]
struct RenderArgs {
    /// A finished seed-<n> run directory (config.json + model.ckpt).
    #[arg(long)]
    run: PathBuf,

    #[arg(long)]
    resolution: Option<usize>,

    #[arg(long, value_enum)]
    head: Option<HeadArg>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum OptArg {
    Adam,
    Sgd,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum EntropyTermArg {
    Marginal,
    PerSampleLiteral,
    Conditional,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum HeadArg {
    C,
    Cprime,
}

impl From<HeadArg> for HeadChoice {
    fn from(h: HeadArg) -> HeadChoice {
        match h {
            HeadArg::C => HeadChoice::C,
            HeadArg::Cprime => HeadChoice::CPrime,
        }
    }
}

fn adapt_config(args: &AdaptArgs, variant: TrainVariant) -> AdaptRunConfig {
    AdaptRunConfig {
        variant,
        moons: adr_core::datasets::MoonsConfig {
            n_per_domain: args.moons_n,
            noise_std: args.moons_noise,
            rotation_degrees: args.rotation_degrees,
            seed: 0,
        },
        train: AdrConfig {
            dropout_rate: args.dropout_rate,
            n_step3_repeats: args.step3_repeats,
            learning_rate: args.learning_rate,
            optimizer: match args.optimizer {
                OptArg::Adam => OptimizerKind::Adam,
                OptArg::Sgd => OptimizerKind::Sgd,
            },
            batch_size_source: args.batch_source,
            batch_size_target: args.batch_target,
            total_outer_iterations: args.iterations,
            entropy_term_variant: match args.entropy_term {
                EntropyTermArg::Marginal => EntropyTermVariant::Marginal,
                EntropyTermArg::PerSampleLiteral => EntropyTermVariant::PerSampleLiteral,
                EntropyTermArg::Conditional => EntropyTermVariant::Conditional,
            },
            eval_interval: args.eval_interval,
            ..AdrConfig::default()
        },
        boundary: BoundaryConfig {
            resolution: args.boundary_resolution,
            padding: 0.2,
            head: args.boundary_head.into(),
        },
    }
}

fn gan_config(args: &GanArgs) -> GanRunConfig {
    GanRunConfig {
        gan: GanConfig {
            z_dim: args.z_dim,
            n_classes: args.classes,
            n_labeled_per_class: args.labels_per_class,
            n_unlabeled: args.unlabeled,
            separation: args.separation,
            mixture_noise: args.mixture_noise,
            dropout_rate: args.dropout_rate,
            learning_rate: args.learning_rate,
            batch_size: args.batch_size,
            total_iterations: args.iterations,
            feature_layer: args.feature_layer,
            eval_interval: args.eval_interval,
            use_adversarial: !args.disable_adversarial,
            use_balance: !args.disable_balance,
            flip_adv_signs: args.flip_adv_signs,
            ..GanConfig::default()
        },
        test_per_class: args.test_per_class,
        sample_dump: args.sample_dump,
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, Error> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::contract(format!("bad config file: {e}")))
}

/// Exit codes: 0 success, 1 runtime failure (divergence, I/O), 2 bad usage.
fn exit_for(err: &Error) -> u8 {
    match err {
        Error::Contract(_) | Error::ShapeMismatch { .. } => 2,
        _ => 1,
    }
}

fn run_adapt(args: AdaptArgs, variant: TrainVariant) -> Result<(), Error> {
    let seeds = runner::seeds_arg(&args.seeds).map_err(Error::contract)?;
    let base: AdaptRunConfig = match &args.config {
        Some(path) => load_json(path)?,
        None => adapt_config(&args, variant),
    };
    let summary = runner::run_adapt_sweep(&args.out, &base, &seeds, args.dump_data)?;
    print!("{summary}");
    Ok(())
}

fn run_gan(args: GanArgs) -> Result<(), Error> {
    let seeds = runner::seeds_arg(&args.seeds).map_err(Error::contract)?;
    let base: GanRunConfig = match &args.config {
        Some(path) => load_json(path)?,
        None => gan_config(&args),
    };
    let summary = runner::run_gan_sweep(&args.out, &base, &seeds)?;
    print!("{summary}");
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<(), Error> {
    let checks =
        adr_core::gradcheck::full_suite(args.instances, args.step, args.tolerance, args.seed)?;
    let mut all_ok = true;
    for check in &checks {
        println!(
            "{:<26} instances={:<3} max_err={:.3e} tol={:.0e} {}",
            check.name,
            check.instances,
            check.max_err,
            check.tol,
            if check.passed { "ok" } else { "FAILED" }
        );
        all_ok &= check.passed;
    }
    if all_ok {
        println!("all {} checks passed", checks.len());
        Ok(())
    } else {
        Err(Error::Diverged {
            iteration: 0,
            detail: "gradient checks failed".into(),
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::AdaptAdr(args) => run_adapt(args, TrainVariant::Adr),
        Command::AdaptEnt(args) => run_adapt(args, TrainVariant::Ent),
        Command::AdaptSourceOnly(args) => run_adapt(args, TrainVariant::SourceOnly),
        Command::GanSsl(args) => run_gan(args),
        Command::Gradcheck(args) => run_gradcheck(args),
        Command::RenderBoundary(args) => adr_cli::runner::render_boundary_dir(
            &args.run,
            args.resolution,
            args.head.map(HeadChoice::from),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_for(&err))
        }
    }
}
