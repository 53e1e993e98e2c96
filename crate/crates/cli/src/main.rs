use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use irap_cli::analyze::{analyze, AnalyzeOptions, Pairing};
use irap_cli::evaluate::{evaluate, EvalProtocol};
use irap_cli::service::{serve, ServiceConfig};
use irap_cli::synthesize::{generate_scenes, synthesize, SynthesizeOptions};
use irap_cli::CommandError;
use irap_core::geometry::RansacConfig;
use irap_core::irap::PairKind;
use irap_core::matcher::{GridMatcher, NullMatcher, OracleMatcher, PairMatcher};

#[derive(Parser)]
#[command(name = "irap", version, about = "RGB-NIR registration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MatcherChoice {
    /// Built-in gradient-histogram matcher.
    Grid,
    /// Ground-truth correspondences.
    Oracle,
    /// No matches at all.
    Null,
}

impl MatcherChoice {
    fn build(self) -> Box<dyn PairMatcher> {
        match self {
            MatcherChoice::Grid => Box::new(GridMatcher::default()),
            MatcherChoice::Oracle => Box::new(OracleMatcher::default()),
            MatcherChoice::Null => Box::new(NullMatcher),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PairingChoice {
    Matches,
    Dense,
}

fn parse_kind(s: &str) -> Result<PairKind, String> {
    PairKind::parse(s).ok_or_else(|| format!("unknown pair kind {s:?}; expected rgb-rgb, nir-nir, rgb-nir or nir-rgb"))
}

#[derive(Subcommand)]
enum Command {
    /// Gradient distributions and Q/EPE statistics for a manifest.
    Analyze {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 16)]
        patch_size: usize,
        #[arg(long, default_value_t = 8)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "grid")]
        matcher: MatcherChoice,
        #[arg(long, value_enum, default_value = "matches")]
        pairing: PairingChoice,
        #[arg(long, value_delimiter = ',', value_parser = parse_kind, default_value = "rgb-nir,nir-rgb")]
        pairs: Vec<PairKind>,
        #[arg(long, default_value_t = 10)]
        q_bins: usize,
    },
    /// Corner-error AUC of a matcher over the manifest's derived pairs.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 480)]
        shorter_side: usize,
        #[arg(long, default_value_t = 1000)]
        max_matches: usize,
        #[arg(long, value_delimiter = ',', default_value = "3,5,10")]
        thresholds: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3.0)]
        ransac_threshold: f64,
        #[arg(long, value_enum, default_value = "grid")]
        matcher: MatcherChoice,
        /// Restrict to these pair kinds.
        #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
        pairs: Option<Vec<PairKind>>,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Synthetic quadruplets with planted homographies.
    Synthesize {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        aligned_fraction: f64,
        /// Leave records as drafts for interactive annotation.
        #[arg(long)]
        draft: bool,
    },
    /// Seeded synthetic base scenes for `synthesize`.
    Scenes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// HTTP annotation service.
    Serve {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
}

fn run(cli: Cli) -> Result<(), CommandError> {
    match cli.command {
        Command::Analyze { manifest, patch_size, bins, out, matcher, pairing, pairs, q_bins } => {
            let opts = AnalyzeOptions {
                patch_size,
                bins,
                q_bins,
                pairing: match pairing {
                    PairingChoice::Matches => Pairing::Matches,
                    PairingChoice::Dense => Pairing::Dense,
                },
                kinds: pairs,
                ..AnalyzeOptions::default()
            };
            let summary = analyze(&manifest, &out, matcher.build().as_ref(), &opts)?;
            println!("{}", serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)?);
        }
        Command::Evaluate { manifest, shorter_side, max_matches, thresholds, seed, ransac_threshold, matcher, pairs, report, json } => {
            let protocol = EvalProtocol {
                resize_shorter_side: shorter_side,
                max_matches,
                auc_thresholds: thresholds,
                ransac: RansacConfig { seed, threshold: ransac_threshold, ..RansacConfig::default() },
            };
            let result = evaluate(&manifest, &protocol, matcher.build().as_ref(), pairs.as_deref())?;
            if let Some(path) = report {
                std::fs::write(&path, result.to_json()).map_err(anyhow::Error::from)?;
            }
            if json {
                println!("{}", result.to_json());
            } else {
                print!("{}", result.render_table());
            }
        }
        Command::Synthesize { base, count, seed, out, aligned_fraction, draft } => {
            let opts = SynthesizeOptions { count, seed, aligned_fraction, draft, ..SynthesizeOptions::default() };
            let m = synthesize(&base, &out, &opts)?;
            log::info!("wrote {} quadruplets and {} derived pairs to {}", m.quadruplets().count(), m.pairs.len(), out.display());
        }
        Command::Scenes { out, count, size, seed } => {
            for p in generate_scenes(&out, count, size, seed)? {
                println!("{}", p.display());
            }
        }
        Command::Serve { manifest, bind } => {
            let rt = tokio::runtime::Runtime::new().map_err(anyhow::Error::from)?;
            rt.block_on(serve(&manifest, &bind, ServiceConfig::default()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("IRAP_LOG", "info")).init();
    // clap's own usage-error code (2) would collide with the missing-input code
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(CommandError::Argument(String::new()).exit_code() as u8);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
