//! `geolatent`: self-checks, synthetic data, two-stage training, sampling and
//! evaluation.
//!
//! Exit codes: 0 success, 1 validation failure, 2 I/O failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geolatent::checkpoint::Checkpoint;
use geolatent::config::RunConfig;
use geolatent::data::{
    default_templates, read_dataset, templates_from_molecules, write_dataset, write_xyz, Vocabulary,
};
use geolatent::geometry::fault;
use geolatent::pipeline::{self, AeModel, LdmModel, Stage};
use geolatent::selfcheck::{self, CheckOptions};
use geolatent::training::LossRecord;
use geolatent::Error;

#[derive(Parser, Debug)]
#[command(
    name = "geolatent",
    version,
    about = "Latent diffusion for small 3D molecules"
)]
struct Cli {
    /// Master seed; overrides `seed` in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run configuration (flat TOML key = value file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the invariant battery.
    Check {
        /// Fewer trials, for smoke tests.
        #[arg(long)]
        quick: bool,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write a synthetic template dataset (.xyz or manifest by extension).
    GenSynthetic {
        /// Labelled XYZ file of rigid templates; defaults to HF, water, methane.
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Number of molecules; overrides `synthetic_count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the autoencoder.
    TrainAe {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the latent denoiser against a frozen autoencoder checkpoint.
    TrainLdm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ae: PathBuf,
    },
    /// Generate molecules into an XYZ file.
    Sample {
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        ldm: PathBuf,
        #[arg(long)]
        n: usize,
        /// Target property value for conditional checkpoints.
        #[arg(long, allow_negative_numbers = true)]
        condition: Option<f64>,
    },
    /// Compute quality metrics of a molecule file and write them as JSON.
    Eval {
        #[arg(long)]
        samples: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_io() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

/// Prefix an error with the path it concerns, keeping its exit class.
fn at<T>(path: &Path, r: geolatent::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| {
        let mut f = Failure::from(e);
        if !f.message.contains(&*path.to_string_lossy()) {
            f.message = format!("{}: {}", path.display(), f.message);
        }
        f
    })
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_path(cli: &Cli) -> Result<&Path, Failure> {
    cli.out
        .as_deref()
        .ok_or_else(|| Failure::validation("--out is required for this command"))
}

/// Loss log next to a checkpoint: `model.ckpt` gets `model.log.tsv`.
fn log_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("log.tsv")
}

fn finish_stage<M>(stage: Stage<M>, out: &Path, to_ckpt: impl Fn(&M) -> Checkpoint) -> Outcome {
    at(out, to_ckpt(&stage.model).save(out))?;
    write_text(&log_path(out), &pipeline::format_log(&stage.log))?;
    report_losses(&stage.log);
    match stage.aborted {
        None => {
            println!("wrote {}", out.display());
            Ok(())
        }
        Some(e) => Err(Failure::validation(format!(
            "{e}; last finite parameters saved to {}",
            out.display()
        ))),
    }
}

fn report_losses(log: &[LossRecord]) {
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!(
            "loss {:.6} at iteration {} -> {:.6} at iteration {}",
            first.loss, first.iteration, last.loss, last.iteration
        );
    }
}

fn cmd_check(cli: &Cli, quick: bool, inject_fault: Option<&str>) -> Outcome {
    match inject_fault {
        None => {}
        Some("cog") => fault::set_broken_cog(true),
        Some(other) => return Err(Failure::validation(format!("unknown fault `{other}`"))),
    }
    let mut opts = CheckOptions {
        seed: cli.seed.unwrap_or(0),
        ..CheckOptions::default()
    };
    if quick {
        opts.equivariance_trials = 10;
        opts.loss_trials = 5;
        opts.sampling_steps = 20;
        opts.nodes = 6;
    }
    let outcomes = selfcheck::run_all(&opts);
    for o in &outcomes {
        println!("{}", o.line());
    }
    let summary = selfcheck::summarize(&outcomes);
    println!(
        "summary {}",
        serde_json::to_string(&summary).expect("summary serialises")
    );
    if summary.failed > 0 {
        return Err(Failure::validation(format!(
            "failing checks: {}",
            summary.failing.join(", ")
        )));
    }
    Ok(())
}

fn cmd_gen_synthetic(cli: &Cli, templates: Option<&Path>, count: Option<usize>) -> Outcome {
    let mut cfg = load_config(cli)?;
    if let Some(c) = count {
        cfg.synthetic_count = c;
    }
    let templates = match templates {
        Some(p) => templates_from_molecules(at(p, read_dataset(p, &Vocabulary::default()))?),
        None => default_templates(),
    };
    let data = pipeline::generate_synthetic(&cfg, templates)?;
    let out = out_path(cli)?;
    at(out, write_dataset(&data, out))?;
    println!("wrote {} molecules to {}", data.len(), out.display());
    Ok(())
}

fn cmd_train_ae(cli: &Cli, data: &Path) -> Outcome {
    let cfg = load_config(cli)?;
    let out = out_path(cli)?;
    let molecules = at(data, read_dataset(data, &Vocabulary::default()))?;
    let stage = at(data, pipeline::train_ae_stage(&molecules, &cfg))?;
    finish_stage(stage, out, AeModel::to_checkpoint)
}

fn load_ae(path: &Path) -> Result<AeModel, Failure> {
    at(
        path,
        Checkpoint::load(path).and_then(|c| AeModel::from_checkpoint(&c)),
    )
}

fn cmd_train_ldm(cli: &Cli, data: &Path, ae_path: &Path) -> Outcome {
    let cfg = load_config(cli)?;
    let out = out_path(cli)?;
    let ae = load_ae(ae_path)?;
    let molecules = at(data, read_dataset(data, &ae.vocab))?;
    let stage = pipeline::train_ldm_stage(&molecules, &ae, &cfg)?;
    finish_stage(stage, out, LdmModel::to_checkpoint)
}

fn cmd_sample(
    cli: &Cli,
    ae_path: &Path,
    ldm_path: &Path,
    n: usize,
    condition: Option<f64>,
) -> Outcome {
    let out = out_path(cli)?;
    let ae = load_ae(ae_path)?;
    let ldm = at(
        ldm_path,
        Checkpoint::load(ldm_path).and_then(|c| LdmModel::from_checkpoint(&c)),
    )?;
    let seed = match (cli.seed, &cli.config) {
        (Some(s), _) => s,
        (None, Some(_)) => load_config(cli)?.seed,
        (None, None) => ldm.seed,
    };
    let molecules = pipeline::sample_molecules(&ae, &ldm, n, condition, seed)?;
    at(out, write_xyz(&molecules, out, &format!("seed={seed}")))?;
    println!(
        "wrote {} molecules to {} (seed {seed})",
        molecules.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(cli: &Cli, samples: &Path) -> Outcome {
    let out = out_path(cli)?;
    let molecules = at(samples, read_dataset(samples, &Vocabulary::default()))?;
    let report = at(samples, pipeline::evaluate(&molecules))?;
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    write_text(out, &(json.clone() + "\n"))?;
    println!("{json}");
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Check {
            quick,
            inject_fault,
        } => cmd_check(cli, *quick, inject_fault.as_deref()),
        Command::GenSynthetic { templates, count } => {
            cmd_gen_synthetic(cli, templates.as_deref(), *count)
        }
        Command::TrainAe { data } => cmd_train_ae(cli, data),
        Command::TrainLdm { data, ae } => cmd_train_ldm(cli, data, ae),
        Command::Sample {
            ae,
            ldm,
            n,
            condition,
        } => cmd_sample(cli, ae, ldm, *n, *condition),
        Command::Eval { samples } => cmd_eval(cli, samples),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors are validation failures; code 2 is reserved for I/O
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
