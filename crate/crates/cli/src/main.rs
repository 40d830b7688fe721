use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use permbarrier_cli::run::{self, CertificateFile};
use permbarrier_cli::spec::{self, Mode, Overrides, ProblemSpec};
use permbarrier_cli::CliError;

/// Maximum-volume barrier certificates for polynomial systems.
#[derive(Parser)]
#[command(name = "permbarrier", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the spec's mode and write certificate.json, report.json and region.csv.
    Run(Common),
    /// Verify a given certificate without synthesis.
    Check(WithCertificate),
    /// Simulate the closed loop from the certified region; writes trajectories.csv.
    Simulate {
        #[command(flatten)]
        args: WithCertificate,
        /// Use the min-norm CLF/CBF QP controller instead of the polynomial one.
        #[arg(long)]
        qp: bool,
    },
    /// Write the region grid for a certificate.
    ExportRegion {
        #[command(flatten)]
        args: WithCertificate,
        /// Points per axis.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Write a starting specification.
    Init {
        /// Destination file; printed to stdout when absent.
        path: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "doa")]
        template: Mode,
    },
}

#[derive(Args)]
struct Common {
    /// Problem specification (JSON).
    spec: PathBuf,
    /// Output directory.
    out_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    cert_degree: Option<u32>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct WithCertificate {
    #[command(flatten)]
    common: Common,
    /// certificate.json from a previous run; overrides the spec's certificate.
    #[arg(long)]
    certificate: Option<PathBuf>,
}

impl Common {
    fn out(&self) -> PathBuf {
        self.out.clone().or_else(|| self.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"))
    }

    fn overrides(&self) -> Result<Overrides, CliError> {
        Ok(Overrides {
            gamma: self.gamma,
            cert_degree: self.cert_degree,
            max_iterations: self.max_iters,
            seed: self.seed,
            sdp_tolerance: run::tolerance_from_env()?,
        })
    }
}

fn load(args: &WithCertificate, mode: Mode) -> Result<(ProblemSpec, String), CliError> {
    let (mut spec, text) = ProblemSpec::load(&args.common.spec)?;
    spec.mode = mode;
    if let Some(path) = &args.certificate {
        let cert = CertificateFile::load(path)?;
        spec = spec.with_certificate(&cert.variables, cert.h, cert.u)?;
    }
    Ok((spec, text))
}

fn report(outcome: &run::Outcome) -> ExitCode {
    for line in &outcome.messages {
        println!("{line}");
    }
    if outcome.verified {
        println!("verified");
        ExitCode::SUCCESS
    } else {
        println!("verification FAILED");
        ExitCode::from(2)
    }
}

fn execute(command: Command) -> Result<ExitCode, CliError> {
    match command {
        Command::Run(args) => {
            let (spec, text) = ProblemSpec::load(&args.spec)?;
            let problem = spec.resolve(&args.overrides()?, Some(&text))?;
            Ok(report(&run::run(&problem, &args.out())?))
        }
        Command::Check(args) => {
            let (spec, text) = load(&args, Mode::Check)?;
            let problem = spec.resolve(&args.common.overrides()?, Some(&text))?;
            Ok(report(&run::run(&problem, &args.common.out())?))
        }
        Command::Simulate { args, qp } => {
            let (mut spec, text) = load(&args, Mode::Simulate)?;
            if qp {
                spec.simulate.get_or_insert_with(Default::default).qp = true;
            }
            let problem = spec.resolve(&args.common.overrides()?, Some(&text))?;
            Ok(report(&run::run(&problem, &args.common.out())?))
        }
        Command::ExportRegion { args, resolution } => {
            let (mut spec, text) = load(&args, Mode::Check)?;
            if let Some(r) = resolution {
                spec.export.get_or_insert(spec::ExportSpec { r#box: None, resolution: None }).resolution = Some(r);
            }
            let problem = spec.resolve(&args.common.overrides()?, Some(&text))?;
            let out = args.common.out();
            std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
            let h = problem.h.as_ref().expect("check mode has a certificate");
            let rows = run::export_region(&problem, h, None, &out.join("region.csv"))?;
            println!("wrote region.csv ({rows} rows)");
            Ok(ExitCode::SUCCESS)
        }
        Command::Init { path, template } => {
            let mut text = spec::template(template).to_json();
            text.push('\n');
            match path {
                Some(p) => write(&p, &text)?,
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
