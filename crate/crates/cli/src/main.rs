use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fracmet::config::RouteChoice;
use fracmet::{run, Context, Overrides};

#[derive(Parser)]
#[command(name = "fracmet", version, about = "Fractional Laplacians and Sobolev geodesics of metrics on the flat torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for random test data; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Eigenvalues of 1 + Δ on the configured bundle.
    Spectrum(Common),
    /// Apply or emit f(1 + Δ) by the spectral and/or contour route.
    Calc {
        #[command(flatten)]
        common: Common,
        /// Function, e.g. `z^-0.5`.
        #[arg(long = "function")]
        function: Option<String>,
        #[arg(long, value_enum)]
        route: Option<RouteArg>,
    },
    /// Finite-difference checks of every metric derivative.
    Dcheck {
        #[command(flatten)]
        common: Common,
        /// Comma-separated decreasing steps.
        #[arg(long, value_delimiter = ',')]
        epsilons: Option<Vec<f64>>,
    },
    /// Integrate a geodesic and emit its trace.
    Geodesic(Common),
    /// Logarithm map from the configured metric to a target metric file.
    Shoot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Run the full invariant suite.
    Verify(Common),
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum RouteArg {
    Spectral,
    Contour,
    Both,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common, mut ov) = match cli.command {
        Command::Spectrum(c) => ("spectrum", c, Overrides::default()),
        Command::Calc { common, function, route } => {
            let route = route.map(|r| match r {
                RouteArg::Spectral => RouteChoice::Spectral,
                RouteArg::Contour => RouteChoice::Contour,
                RouteArg::Both => RouteChoice::Both,
            });
            ("calc", common, Overrides { function, route, ..Default::default() })
        }
        Command::Dcheck { common, epsilons } => ("dcheck", common, Overrides { epsilons, ..Default::default() }),
        Command::Geodesic(c) => ("geodesic", c, Overrides::default()),
        Command::Shoot { common, target } => ("shoot", common, Overrides { target, ..Default::default() }),
        Command::Verify(c) => ("verify", c, Overrides::default()),
    };
    ov.out = common.out;
    ov.seed = common.seed;
    let result = Context::load(&common.config, &ov).and_then(|ctx| run(name, &ctx));
    match result {
        Ok((report, path)) => {
            for line in report.summary_lines() {
                println!("{line}");
            }
            println!("{} {} -> {}", if report.passed { "PASSED" } else { "FAILED" }, name, path.display());
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("fracmet {name}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
