use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use meshreduce::cli::{self, CliError, ExperimentConfig};
use meshreduce::{CostParams, Scheme};

const CONFIG_HELP: &str = "\
Config files are flat TOML. Keys:
  width, height    mesh size (required unless given as flags)
  region           failed block as WIDTHxHEIGHT@X,Y, e.g. \"4x2@4,2\"; omit for a healthy mesh
  scheme           OneD | OneD_FT | TwoColor | RowPair | RowPair_FT
  element_count    elements per chip payload (default 1024)
  element_size     bytes per element (default 4)
  alpha            per-step latency in seconds (default 1e-6)
  beta             seconds per byte on a link (default 1e-9)
  seed             payload RNG seed (default 7)
Flags override values from the file.

Exit codes: 0 success, 1 config or build error, 2 allreduce mismatch.";

#[derive(Parser)]
#[command(name = "meshreduce", version, about = "Allreduce schedules for 2-D meshes with failed chips", after_long_help = CONFIG_HELP)]
struct Opts {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a schedule and write schedule.json plus one DOT file per phase.
    Plan(Common),
    /// Execute with seeded payloads and check every chip against the oracle.
    Run(Common),
    /// Estimate time and write per-link traffic.
    Cost(Common),
    /// Compare a healthy-mesh config with its fault-tolerant counterpart.
    Compare {
        #[arg(long)]
        full: PathBuf,
        #[arg(long)]
        ft: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Cost healthy schemes on N x N meshes and fit time ~ N^k.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,64")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "OneD,RowPair")]
        schemes: Vec<Scheme>,
        #[arg(long, default_value_t = 1 << 20)]
        elements: usize,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// WIDTHxHEIGHT@X,Y, or "none".
    #[arg(long)]
    region: Option<String>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    elements: Option<usize>,
    #[arg(long)]
    element_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => {
                let (Some(w), Some(h)) = (self.width, self.height) else {
                    return Err(CliError::Config(
                        "give --config or both --width and --height".into(),
                    ));
                };
                ExperimentConfig::new(w, h, None, Scheme::RowPair)
            }
        };
        if let Some(v) = self.width {
            cfg.width = v;
        }
        if let Some(v) = self.height {
            cfg.height = v;
        }
        if let Some(v) = &self.region {
            cfg.region = Some(v.clone());
        }
        if let Some(v) = &self.scheme {
            cfg.scheme = v.clone();
        }
        if let Some(v) = self.elements {
            cfg.element_count = v;
        }
        if let Some(v) = self.element_size {
            cfg.element_size = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        Ok(cfg)
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Plan(c) => {
            let out = cli::cmd_plan(&c.resolve()?, &c.out)?;
            print!("{}", out.summary);
            println!("wrote {}", out.schedule_path.display());
        }
        Cmd::Run(c) => {
            let cfg = c.resolve()?;
            match cli::cmd_run(&cfg, &c.out) {
                Ok(o) => println!("{}", o.verdict_line()),
                Err(CliError::Mismatch(d)) => {
                    println!("FAIL max deviation {d}");
                    return Err(CliError::Mismatch(d));
                }
                Err(e) => return Err(e),
            }
        }
        Cmd::Cost(c) => print!("{}", cli::cmd_cost(&c.resolve()?, &c.out)?.render()),
        Cmd::Compare { full, ft, out } => {
            let full = ExperimentConfig::load(&full)?;
            let ft = ExperimentConfig::load(&ft)?;
            print!("{}", cli::cmd_compare(&full, &ft, &out)?.render());
        }
        Cmd::Sweep {
            sizes,
            schemes,
            elements,
            alpha,
            beta,
            out,
        } => {
            let d = CostParams::default();
            let params = CostParams {
                alpha: alpha.unwrap_or(d.alpha),
                beta: beta.unwrap_or(d.beta),
                ..d
            };
            print!(
                "{}",
                cli::cmd_sweep(&sizes, &schemes, elements, &params, out.as_deref())?.render()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let opts = Opts::parse();
    match run(opts.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
