//! `ddec`: generate reference data, coarsen, train, solve and verify
//! structure-preserving surrogate models.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ddec::coarsen::{block_partition, build_coarse, greedy_partition, verify_coarse};
use ddec::io::{self, MapFile, Quantity, StateFile};
use ddec::model::State;
use ddec::reference::{case_model, generate_dataset, Case, CaseSpec, Partitioner};
use ddec::solve::{newton_solve, NewtonOptions};
use ddec::train::train;
use ddec::verify::structure_report;
use ddec::ChainComplex;

const EXIT_VERIFY: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_TARGET: u8 = 3;

#[derive(Parser)]
#[command(name = "ddec", version, about = "Structure-preserving surrogate models on coarse cell complexes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutDir {
    /// Existing output directory.
    #[arg(long, env = "DDEC_OUT", default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct PartitionArgs {
    /// Blocks per direction.
    #[arg(long)]
    parts: Option<usize>,
    /// Use greedy region growing with this many parts instead of blocks.
    #[arg(long)]
    greedy: Option<usize>,
    #[arg(long, default_value_t = 0)]
    partition_seed: u64,
}

impl PartitionArgs {
    fn partitioner(&self, default_parts: usize) -> Partitioner {
        match self.greedy {
            Some(parts) => Partitioner::Greedy {
                parts,
                seed: self.partition_seed,
            },
            None => Partitioner::Block {
                parts: self.parts.unwrap_or(default_parts),
            },
        }
    }
}

#[derive(Args, Debug)]
struct TrainOpts {
    /// Dataset directory or manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Epochs at which the learning rate is multiplied by `--lr-gamma`.
    #[arg(long, value_delimiter = ',')]
    lr_milestones: Option<Vec<usize>>,
    #[arg(long)]
    lr_gamma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Perturbation scale of the network term.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Stop once the RMS mismatch of an epoch falls below this.
    #[arg(long)]
    target_rms: Option<f64>,
    /// Disable the stopping target.
    #[arg(long, conflicts_with = "target_rms")]
    no_target: bool,
    /// Start each forward solve from the previous state of the sample.
    #[arg(long)]
    warm_start: bool,
    /// One update per epoch from the averaged gradient.
    #[arg(long)]
    batch: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the fine reference problem for each alpha and write coarse samples.
    Generate {
        /// d1, d2 or magneto.
        #[arg(long)]
        case: Case,
        /// Fine cells per direction.
        #[arg(long, default_value_t = 50)]
        fine: usize,
        #[command(flatten)]
        partition: PartitionArgs,
        /// Comma-separated inclusion coefficients.
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        /// Inclusion radius.
        #[arg(long)]
        radius: Option<f64>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Coarsen a fine complex file.
    Coarsen {
        #[arg(long)]
        fine: PathBuf,
        #[command(flatten)]
        partition: PartitionArgs,
        #[command(flatten)]
        out: OutDir,
    },
    /// Train a surrogate on a generated dataset.
    Train {
        #[command(flatten)]
        opts: TrainOpts,
        #[command(flatten)]
        out: OutDir,
    },
    /// Solve a problem with a trained model.
    Solve {
        #[arg(long)]
        model: PathBuf,
        /// Sample file providing boundary values and source.
        #[arg(long)]
        problem: PathBuf,
        /// Height of the profile line.
        #[arg(long, default_value_t = 0.5)]
        y: f64,
        /// potential, flux or primal-flux.
        #[arg(long)]
        quantity: Option<Quantity>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Check the structural identities of a model.
    Verify {
        #[arg(long)]
        model: PathBuf,
        /// Random cochains per level.
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the profile of a sample's coarse data.
    Export {
        /// Model whose complex and metric the sample lives on.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        problem: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        y: f64,
        #[arg(long)]
        quantity: Option<Quantity>,
        #[command(flatten)]
        out: OutDir,
    },
}

/// An error that maps to a specific exit code.
#[derive(Debug)]
struct Exit(u8);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "exit {}", self.0)
    }
}

impl std::error::Error for Exit {}

fn out_dir(o: &OutDir) -> Result<&Path> {
    if !o.out.is_dir() {
        bail!("output directory {} does not exist", o.out.display());
    }
    Ok(&o.out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn generate(
    case: Case,
    fine: usize,
    partition: &PartitionArgs,
    alphas: Option<Vec<f64>>,
    radius: Option<f64>,
    out: &OutDir,
) -> Result<()> {
    let dir = out_dir(out)?;
    let mut spec = CaseSpec::new(case, fine);
    spec.partitioner = partition.partitioner(case.default_parts());
    if let Some(a) = alphas {
        spec.alphas = a;
    }
    if let Some(r) = radius {
        spec.radius = r;
    }
    let ds = generate_dataset(&spec)?;
    let m = io::write_dataset(dir, &ds)?;
    for s in &m.samples {
        println!("{}  {}", s.sha256, s.path);
    }
    println!("{}  {}", m.coarse.sha256, m.coarse.path);
    Ok(())
}

fn coarsen(fine: &Path, partition: &PartitionArgs, out: &OutDir) -> Result<()> {
    let dir = out_dir(out)?;
    let (c, fine_sha256) = io::read_file::<ChainComplex>(fine)?;
    let labels = match partition.partitioner(3) {
        Partitioner::Block { parts } => block_partition(&c, parts, parts)?,
        Partitioner::Greedy { parts, seed } => greedy_partition(&c, parts, seed)?,
    };
    let (coarse, map) = build_coarse(&c, &labels)?;
    let report = verify_coarse(&coarse, &map, &c)?;
    let coarse_sha256 = io::write_file(&dir.join("coarse.json"), &coarse)?;
    io::write_file(
        &dir.join("map.json"),
        &MapFile {
            fine_sha256,
            coarse_sha256,
            map,
        },
    )?;
    println!("coarse counts {:?}", coarse.counts());
    println!("{report:?}");
    if !report.pass() {
        return Err(Exit(EXIT_VERIFY).into());
    }
    Ok(())
}

fn train_cmd(o: &TrainOpts, out: &OutDir) -> Result<()> {
    let dir = out_dir(out)?;
    let ds = io::read_dataset(&o.data)?;
    let case = ds.spec.case;
    let mut mo = case_model(case, &ds.coarse, o.seed)?;
    if let Some(e) = o.epsilon {
        mo.epsilon = e;
        mo.trainable.net = e > 0.0;
    }
    let mut cfg = case.train_config();
    cfg.seed = o.seed;
    cfg.warm_start = o.warm_start;
    cfg.batch_average = o.batch;
    if let Some(n) = o.epochs {
        cfg.epochs = n;
    }
    if let Some(r) = o.lr {
        cfg.learning_rate = r;
    }
    if let Some(m) = &o.lr_milestones {
        cfg.lr_milestones = m.clone();
    }
    if let Some(g) = o.lr_gamma {
        cfg.lr_gamma = g;
    }
    if o.target_rms.is_some() || o.no_target {
        cfg.target_rms = o.target_rms;
    }
    let outcome = train(mo, &ds.samples, &cfg)?;
    io::write_file(&dir.join("model.json"), &outcome.model)?;
    write_text(&dir.join("history.csv"), &outcome.history.to_csv())?;
    println!(
        "epochs {}  final rms {:e}  eps {}",
        outcome.epochs_run, outcome.final_rms, outcome.model.epsilon
    );
    if cfg.target_rms.is_some() && !outcome.reached_target {
        eprintln!("training target not reached");
        return Err(Exit(EXIT_TARGET).into());
    }
    Ok(())
}

fn load_problem(model: &Path, problem: &Path) -> Result<(ddec::model::SurrogateModel, String, io::SampleFile)> {
    let (mut mo, model_sha256) = io::read_model(model)?;
    let complex_sha256 = io::sha256_hex(io::to_text(&mo.complex)?.as_bytes());
    let sample = io::read_sample(problem, Some(&complex_sha256))?;
    sample.sample.apply(&mut mo)?;
    Ok((mo, model_sha256, sample))
}

fn solve_cmd(model: &Path, problem: &Path, y: f64, quantity: Option<Quantity>, out: &OutDir) -> Result<()> {
    let dir = out_dir(out)?;
    let (mo, model_sha256, sample) = load_problem(model, problem)?;
    let sol = newton_solve(&mo, &State::zeros(&mo), &NewtonOptions::default())?;
    if !sol.report.converged {
        bail!("Newton did not converge: residuals {:?}", sol.report.residual_norms);
    }
    let q = quantity.unwrap_or_else(|| Quantity::default_for(&mo));
    let profile = io::state_profile(&mo, &sol.state, q, y)?;
    io::write_file(
        &dir.join("state.json"),
        &StateFile {
            model_sha256,
            problem: sample.sample.name.clone(),
            state: sol.state,
            report: sol.report.clone(),
        },
    )?;
    write_text(&dir.join("profile.csv"), &profile.to_csv())?;
    println!(
        "{}: {} Newton iterations, residual {:e}",
        sample.sample.name,
        sol.report.iterations,
        sol.report.final_residual()
    );
    Ok(())
}

fn verify_cmd(model: &Path, trials: usize, seed: u64) -> Result<()> {
    let (mo, _) = io::read_file::<ddec::model::SurrogateModel>(model)?;
    let report = structure_report(&mo, trials, seed)?;
    for l in report.lines() {
        println!("{l}");
    }
    let failures = report.failures();
    if failures.is_empty() {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL: {}", failures.join(", "));
        Err(Exit(EXIT_VERIFY).into())
    }
}

fn export_cmd(model: &Path, problem: &Path, y: f64, quantity: Option<Quantity>, out: &OutDir) -> Result<()> {
    let dir = out_dir(out)?;
    let (mo, _, sample) = load_problem(model, problem)?;
    let q = quantity.unwrap_or(if mo.k == mo.complex.dim() { Quantity::Potential } else { Quantity::Flux });
    let profile = io::data_profile(&mo, &sample.sample, q, y)?;
    write_text(&dir.join("data_profile.csv"), &profile.to_csv())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            case,
            fine,
            partition,
            alphas,
            radius,
            out,
        } => generate(case, fine, &partition, alphas, radius, &out),
        Command::Coarsen { fine, partition, out } => coarsen(&fine, &partition, &out),
        Command::Train { opts, out } => train_cmd(&opts, &out),
        Command::Solve {
            model,
            problem,
            y,
            quantity,
            out,
        } => solve_cmd(&model, &problem, y, quantity, &out),
        Command::Verify { model, trials, seed } => verify_cmd(&model, trials, seed),
        Command::Export {
            model,
            problem,
            y,
            quantity,
            out,
        } => export_cmd(&model, &problem, y, quantity, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<Exit>() {
            Some(Exit(code)) => ExitCode::from(*code),
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(EXIT_USAGE)
            }
        },
    }
}
