mod config;
mod pipeline;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use diagdim_core::cover::{brick_cover, verify_cover};
use diagdim_core::space::{Family, GridSpec, Metric};
use serde_json::{json, Value};

use crate::config::{AUTO_BRICK_FACTOR, DEFAULT_EPS, DEFAULT_HAT_SAMPLES, DEFAULT_TEST_PROPAGATION};
use crate::pipeline::*;

const EXIT_USAGE: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(name = "diagdim", version, about = "Diagonal dimension witnesses for finite metric spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Metric spaces.
    #[command(subcommand)]
    Space(SpaceCmd),
    /// Colored covers.
    #[command(subcommand)]
    Cover(CoverCmd),
    /// Witness construction and checks.
    #[command(subcommand)]
    Witness(WitnessCmd),
    /// Extract a colored cover from a witness.
    Extract(ExtractArgs),
    /// Consolidate artifacts into report.json and report.txt.
    Report(ReportArgs),
    /// Approximation error over several scales.
    Sweep(SweepArgs),
    /// Run the stages listed in a config file.
    Run(RunArgs),
}

#[derive(Subcommand)]
enum SpaceCmd {
    /// Generate an interval or grid.
    Gen(SpaceGenArgs),
}

#[derive(Subcommand)]
enum CoverCmd {
    /// Brick cover of a generated space.
    Gen(CoverGenArgs),
    /// Verify a cover at a scale.
    Check(CoverCheckArgs),
}

#[derive(Subcommand)]
enum WitnessCmd {
    /// Build the partition-of-unity witness from a cover.
    Build(WitnessBuildArgs),
    /// Evaluate the six witness conditions.
    Check(WitnessCheckArgs),
    /// Renormalize the witness and check the resulting bounds.
    Hat(WitnessHatArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    L1,
    Linf,
}

#[derive(Args)]
struct GridArgs {
    /// Side lengths, comma separated; one side gives an interval.
    #[arg(long, value_delimiter = ',', required = true)]
    sides: Vec<usize>,
    #[arg(long, value_enum, default_value = "linf")]
    metric: MetricArg,
    #[arg(long, default_value_t = 1.0)]
    spacing: f64,
}

impl GridArgs {
    fn spec(&self) -> GridSpec {
        GridSpec {
            family: if self.sides.len() == 1 { Family::Interval } else { Family::Grid },
            sides: self.sides.clone(),
            metric: match self.metric {
                MetricArg::L1 => Metric::L1,
                MetricArg::Linf => Metric::Linf,
            },
            spacing: self.spacing,
        }
    }
}

#[derive(Args)]
struct SpaceGenArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value = SPACE_FILE)]
    out: PathBuf,
}

#[derive(Args)]
struct CoverGenArgs {
    #[arg(long, default_value = SPACE_FILE)]
    space: PathBuf,
    #[arg(long)]
    r: f64,
    /// Brick side; defaults to 6r.
    #[arg(long)]
    brick_side: Option<f64>,
    #[arg(long, default_value = COVER_FILE)]
    out: PathBuf,
}

#[derive(Args)]
struct CoverCheckArgs {
    #[arg(long, default_value = SPACE_FILE)]
    space: PathBuf,
    #[arg(long, default_value = COVER_FILE)]
    cover: PathBuf,
    #[arg(long)]
    r: f64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WitnessBuildArgs {
    #[arg(long, default_value = SPACE_FILE)]
    space: PathBuf,
    #[arg(long, default_value = COVER_FILE)]
    cover: PathBuf,
    #[arg(long)]
    r: f64,
    #[arg(long, default_value_t = 1)]
    fiber: usize,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    #[arg(long, default_value_t = DEFAULT_TEST_PROPAGATION)]
    test_propagation: f64,
    #[arg(long, default_value = WITNESS_FILE)]
    out: PathBuf,
}

#[derive(Args)]
struct WitnessCheckArgs {
    #[arg(long, default_value = SPACE_FILE)]
    space: PathBuf,
    #[arg(long, default_value = WITNESS_FILE)]
    witness: PathBuf,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value = CONDITIONS_FILE)]
    out: PathBuf,
}

#[derive(Args)]
struct WitnessHatArgs {
    #[arg(long, default_value = SPACE_FILE)]
    space: PathBuf,
    #[arg(long, default_value = WITNESS_FILE)]
    witness: PathBuf,
    #[arg(long, default_value_t = DEFAULT_HAT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Conditions file to fold the result into; written standalone otherwise.
    #[arg(long)]
    conditions: Option<PathBuf>,
    #[arg(long, default_value = "hat.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long, default_value = SPACE_FILE)]
    space: PathBuf,
    #[arg(long, default_value = WITNESS_FILE)]
    witness: PathBuf,
    #[arg(long)]
    r: f64,
    #[arg(long, default_value_t = diagdim_core::extract::IDENTITY_TOL)]
    tol: f64,
    #[arg(long, default_value = EXTRACTION_FILE)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding the artifacts.
    #[arg(long, default_value = ".")]
    dir: PathBuf,
    /// Where to write the report; defaults to the artifact directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [5.0, 10.0, 20.0, 40.0])]
    radii: Vec<f64>,
    /// Smallest brick side; each scale uses max(this, 3r).
    #[arg(long, default_value_t = 30.0)]
    brick_side: f64,
    #[arg(long, default_value_t = 1)]
    fiber: usize,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    #[arg(long, default_value_t = DEFAULT_TEST_PROPAGATION)]
    test_propagation: f64,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value = SWEEP_FILE)]
    out: PathBuf,
}

/// Flags fill keys the config file leaves out.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    fiber: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<String>>,
}

impl RunArgs {
    fn flags(&self) -> serde_json::Map<String, Value> {
        let mut m = serde_json::Map::new();
        if let Some(r) = self.r {
            m.insert("r".into(), json!(r));
        }
        if let Some(f) = self.fiber {
            m.insert("fiber".into(), json!(f));
        }
        if let Some(e) = self.eps {
            m.insert("eps".into(), json!(e));
        }
        if let Some(s) = self.seed {
            m.insert("seed".into(), json!(s));
        }
        if let Some(o) = &self.output {
            m.insert("output".into(), json!(o));
        }
        if let Some(s) = &self.stages {
            m.insert("stages".into(), json!(s));
        }
        m
    }
}

enum Failure {
    Usage(anyhow::Error),
    Stage(StageError),
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Failure::Stage(e)
    }
}

fn done(path: &Path) {
    eprintln!("wrote {}", path.display());
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Space(SpaceCmd::Gen(a)) => {
            let space = space_from_spec(&a.grid.spec()).map_err(Failure::Usage)?;
            write_json(&a.out, &space.to_json()).map_err(|e| stage_err("space gen", &a.out, e))?;
            done(&a.out);
        }
        Command::Cover(CoverCmd::Gen(a)) => {
            let space = load_space(&a.space).map_err(|e| stage_err("cover gen", &a.space, e))?;
            let side = a.brick_side.unwrap_or(AUTO_BRICK_FACTOR * a.r);
            let cover = brick_cover(&space, a.r, side).map_err(|e| stage_err("cover gen", &a.out, e))?;
            write_json(&a.out, &cover_artifact(&cover, &space, a.r)).map_err(|e| stage_err("cover gen", &a.out, e))?;
            done(&a.out);
        }
        Command::Cover(CoverCmd::Check(a)) => {
            let space = load_space(&a.space).map_err(|e| stage_err("cover check", &a.space, e))?;
            let cover = load_cover(&a.cover, &space).map_err(|e| stage_err("cover check", &a.cover, e))?;
            let rep = verify_cover(&cover, &space, a.r);
            let mut v = serde_json::to_value(&rep).expect("report serializes");
            v["pass"] = json!(rep.passes());
            v["r"] = json!(a.r);
            match &a.out {
                Some(out) => {
                    write_json(out, &v).map_err(|e| stage_err("cover check", out, e))?;
                    done(out);
                }
                None => println!("{}", serde_json::to_string_pretty(&v).expect("json")),
            }
        }
        Command::Witness(WitnessCmd::Build(a)) => {
            let space = load_space(&a.space).map_err(|e| stage_err("witness build", &a.space, e))?;
            let cover = load_cover(&a.cover, &space).map_err(|e| stage_err("witness build", &a.cover, e))?;
            let w = build_witness(space, &cover, a.r, a.fiber, a.eps, a.test_propagation)
                .map_err(|e| stage_err("witness build", &a.out, e))?;
            let v = witness_artifact(&w, a.r, a.test_propagation).map_err(|e| stage_err("witness build", &a.out, e))?;
            write_json(&a.out, &v).map_err(|e| stage_err("witness build", &a.out, e))?;
            done(&a.out);
        }
        Command::Witness(WitnessCmd::Check(a)) => {
            let space = load_space(&a.space).map_err(|e| stage_err("witness check", &a.space, e))?;
            let w = load_witness(&a.witness, space).map_err(|e| stage_err("witness check", &a.witness, e))?;
            let v = conditions_artifact(&w, a.tol).map_err(|e| stage_err("witness check", &a.out, e))?;
            write_json(&a.out, &v).map_err(|e| stage_err("witness check", &a.out, e))?;
            done(&a.out);
        }
        Command::Witness(WitnessCmd::Hat(a)) => {
            let space = load_space(&a.space).map_err(|e| stage_err("witness hat", &a.space, e))?;
            let w = load_witness(&a.witness, space).map_err(|e| stage_err("witness hat", &a.witness, e))?;
            let hat = hat_artifact(&w, a.samples, a.seed).map_err(|e| stage_err("witness hat", &a.witness, e))?;
            match &a.conditions {
                Some(path) => {
                    let mut cond = read_json(path).map_err(|e| stage_err("witness hat", path, e))?;
                    cond["hat"] = hat;
                    write_json(path, &cond).map_err(|e| stage_err("witness hat", path, e))?;
                    done(path);
                }
                None => {
                    write_json(&a.out, &hat).map_err(|e| stage_err("witness hat", &a.out, e))?;
                    done(&a.out);
                }
            }
        }
        Command::Extract(a) => {
            let space = load_space(&a.space).map_err(|e| stage_err("extract", &a.space, e))?;
            let w = load_witness(&a.witness, space).map_err(|e| stage_err("extract", &a.witness, e))?;
            let v = extraction_artifact(&w, a.r, a.tol).map_err(|e| stage_err("extract", &a.witness, e))?;
            write_json(&a.out, &v).map_err(|e| stage_err("extract", &a.out, e))?;
            done(&a.out);
        }
        Command::Report(a) => {
            let out_dir = a.out_dir.unwrap_or_else(|| a.dir.clone());
            let path = report::write_report(&a.dir, &out_dir).map_err(|e| stage_err("report", &a.dir, e))?;
            done(&path);
        }
        Command::Sweep(a) => {
            let space = space_from_spec(&a.grid.spec()).map_err(Failure::Usage)?;
            let v = sweep_artifact(&space, &a.radii, a.brick_side, a.fiber, a.eps, a.test_propagation, a.tol)
                .map_err(|e| stage_err("sweep", &a.out, e))?;
            write_json(&a.out, &v).map_err(|e| stage_err("sweep", &a.out, e))?;
            done(&a.out);
        }
        Command::Run(a) => {
            let cfg = config::load(&a.config, &a.flags()).map_err(Failure::Usage)?;
            pipeline::run(&cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_STAGE)
        }
    }
}
