use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use junctionforge::api::{self, AppState};
use junctionforge::config::RunConfig;
use junctionforge::run;

#[derive(Parser)]
#[command(name = "junctionforge", version, about = "Design and evaluate surface-trap X-junctions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and validate a layout; writes layout.json.
    Layout(Common),
    /// Trace the RF-null path of a voltage assignment; writes trace.csv, map.csv and report.json.
    Evaluate(Common),
    /// Run a voltage, geometry or hybrid search.
    Optimize(Common),
    /// Extract a pseudo-potential level set as STL or OBJ.
    Isosurface(Common),
    /// Serve the HTTP API used by the console.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// RNG seed, overriding `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(o) = &self.out {
            c.out_dir = o.clone();
        }
        if self.seed.is_some() {
            c.seed = self.seed;
        }
        c.check()?;
        Ok(c)
    }
}

fn main() -> ExitCode {
    match run_cli() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run_cli() -> Result<()> {
    junctionforge::init_threads()?;
    let cli = Cli::parse();
    match cli.command {
        Command::Layout(c) => {
            let config = c.load()?;
            let layout = run::cmd_layout(&config)?;
            println!("layout {} with {} electrodes", layout.hash(), layout.electrodes.len());
        }
        Command::Evaluate(c) => print(&run::cmd_evaluate(&c.load()?)?),
        Command::Optimize(c) => print(&run::cmd_optimize(&c.load()?)?),
        Command::Isosurface(c) => print(&run::cmd_isosurface(&c.load()?)?),
        Command::Serve { common, port } => {
            let state = AppState::new(common.load()?)?;
            tokio::runtime::Runtime::new()?.block_on(api::serve(state, port))?;
        }
    }
    Ok(())
}

fn print(report: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(report).expect("report serialises"));
}
