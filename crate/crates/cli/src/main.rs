//! `toothmatch`: batch front end for synthesis, the segmentation pipeline
//! stages, matching and evaluation.
//!
//! Exit codes: 0 success, 1 I/O, 2 schema or spec error, 3 degenerate input.
//! Log level comes from `TOOTHMATCH_LOG` (default `warn`).

mod commands;
mod config;
mod error;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{MatchArgs, Overrides, SynthArgs};
use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "toothmatch",
    version,
    about = "Tooth instance segmentation pipeline tools"
)]
struct Cli {
    /// Worker threads for scans processed side by side.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ScanArgs {
    /// Pipeline config file (or, for eval and pipeline, a directory of
    /// `*/config.json` scans).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_ord: Option<f64>,
    #[arg(long)]
    lambda_cent: Option<f64>,
}

impl ScanArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            lambda_ord: self.lambda_ord,
            lambda_cent: self.lambda_cent,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labeled arch, its ground truth and a pipeline config.
    Synth {
        /// Arch spec JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Perturbation spec JSON; writes a corrupted perfect prediction.
        #[arg(long)]
        perturb: Option<PathBuf>,
        /// Write the third-molar confusion case instead of an arch spec.
        #[arg(long)]
        flip_case: bool,
    },
    /// Encode the mesh into 128-channel face features.
    Features(ScanArgs),
    /// Project faces onto the occlusal image and sample the embedding grid.
    Project(ScanArgs),
    /// Gate the sampled embeddings into the face features.
    Fuse {
        #[command(flatten)]
        scan: ScanArgs,
        #[arg(long)]
        skip_fusion: bool,
    },
    /// Decode instances from the (fused) features.
    Infer {
        #[command(flatten)]
        scan: ScanArgs,
        #[arg(long)]
        skip_fusion: bool,
    },
    /// Match predicted instances to ground-truth teeth.
    Match {
        #[command(flatten)]
        scan: ScanArgs,
        /// Use a saturated prediction built from the ground truth.
        #[arg(long)]
        perfect: bool,
        /// Add every similarity matrix to the report.
        #[arg(long)]
        dump_similarity: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics and losses for one scan or a directory of scans.
    Eval {
        #[command(flatten)]
        scan: ScanArgs,
        #[arg(long)]
        perfect: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage from mesh to metrics in one run.
    Pipeline {
        #[command(flatten)]
        scan: ScanArgs,
        #[arg(long)]
        skip_fusion: bool,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::schema(format!("--jobs: {e}")))?;
    }
    match cli.command {
        Command::Synth {
            config,
            out,
            seed,
            perturb,
            flip_case,
        } => commands::synth(&SynthArgs {
            config,
            out,
            seed,
            perturb,
            flip_case,
        }),
        Command::Features(s) => commands::features(&s.config, &s.overrides()),
        Command::Project(s) => commands::project(&s.config, &s.overrides()),
        Command::Fuse { scan, skip_fusion } => {
            commands::fuse(&scan.config, &scan.overrides(), skip_fusion)
        }
        Command::Infer { scan, skip_fusion } => {
            commands::infer(&scan.config, &scan.overrides(), skip_fusion)
        }
        Command::Match {
            scan,
            perfect,
            dump_similarity,
            out,
        } => commands::match_cmd(
            &scan.config,
            &scan.overrides(),
            &MatchArgs {
                perfect,
                dump_similarity,
                out,
            },
        ),
        Command::Eval { scan, perfect, out } => {
            commands::eval(&scan.config, &scan.overrides(), perfect, out.as_deref())
        }
        Command::Pipeline { scan, skip_fusion } => {
            commands::pipeline(&scan.config, &scan.overrides(), skip_fusion)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TOOTHMATCH_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
