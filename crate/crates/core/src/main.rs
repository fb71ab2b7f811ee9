use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gasvsf::checks::Scope;
use gasvsf::cli::{
    cmd_eval, cmd_export_clip, cmd_export_offsets, cmd_export_run_offsets, cmd_generate, cmd_gradcheck,
    cmd_objectness_list, cmd_objectness_manifest, cmd_train, gradcheck_line, ExportFormat,
};
use gasvsf::config::RunConfig;
use gasvsf::{Error, Result};

/// Synthetic gas-leak video, voxel-shift detector training and evaluation.
#[derive(Parser)]
#[command(name = "gasvsf", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed of every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override one dotted key, e.g. `--set scene.noise_sigma=2` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test splits.
    Generate {
        /// Generate a single split of this many clips instead.
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Train a detector on a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Shorthand for `--set model.variant=NAME`.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Evaluate a trained run on a manifest (default output: RUN/eval).
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// tensorcore, vsf or detector (repeatable; default all).
        #[arg(long)]
        scope: Vec<String>,
    },
    /// Objectness scores of annotated boxes, as CSV (stdout without --out).
    Objectness {
        #[arg(long, conflicts_with = "boxes", required_unless_present = "boxes")]
        manifest: Option<PathBuf>,
        /// File of `image.pgm x1 y1 x2 y2` lines.
        #[arg(long)]
        boxes: Option<PathBuf>,
    },
    /// Export a clip, an offset dump or a run's offsets as PGM or CSV.
    Export {
        /// Clip directory (alone: frames and boxes; with --run: input window).
        #[arg(long)]
        clip: Option<PathBuf>,
        /// `[H, W, T, 3]` VSFT offset dump.
        #[arg(long, conflicts_with_all = ["clip", "run"])]
        offsets: Option<PathBuf>,
        /// Trained run whose shift offsets are exported.
        #[arg(long, requires = "clip")]
        run: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long, default_value_t = 0)]
        window: usize,
        #[arg(long, default_value_t = 0)]
        channel: usize,
    },
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref()
        .ok_or_else(|| Error::InvalidArgument("--out is required for this command".into()))
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let mut overrides = c.overrides.clone();
    match &cli.command {
        Command::Generate { clips: Some(n) } => {
            overrides.push(format!("dataset.train={n}"));
            overrides.push("dataset.test=0".into());
        }
        Command::Train { variant: Some(v), .. } => overrides.push(format!("model.variant={v}")),
        _ => {}
    }
    let cfg = RunConfig::load(c.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Generate { .. } => {
            for p in cmd_generate(&cfg, require_out(&c.out)?, c.seed)? {
                println!("{}", p.display());
            }
        }
        Command::Train { manifest, .. } => {
            let out = require_out(&c.out)?;
            let report = cmd_train(&cfg, &manifest, out, c.seed)?;
            if let Some(last) = report.epoch_means().last() {
                println!("final epoch mean loss {last:.6}");
            }
        }
        Command::Eval { run, manifest } => {
            let out = c.out.clone().unwrap_or_else(|| run.join("eval"));
            print!("{}", cmd_eval(&cfg, &run, &manifest, &out)?.to_table());
        }
        Command::Gradcheck { scope } => {
            let scopes = if scope.is_empty() {
                Scope::ALL.to_vec()
            } else {
                scope.iter().map(|s| Scope::from_name(s)).collect::<Result<_>>()?
            };
            let checks = cmd_gradcheck(&scopes)?;
            for ch in &checks {
                println!("{}", gradcheck_line(ch));
            }
            let failed: Vec<&str> = checks.iter().filter(|ch| !ch.report.passed).map(|ch| ch.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::Check(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
        Command::Objectness { manifest, boxes } => {
            let sink: Box<dyn Write> = match &c.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
                    let p = dir.join("objectness.csv");
                    Box::new(std::fs::File::create(&p).map_err(|e| Error::Io { path: p, source: e })?)
                }
                None => Box::new(std::io::stdout().lock()),
            };
            let sink = std::io::BufWriter::new(sink);
            match (manifest, boxes) {
                (Some(m), _) => cmd_objectness_manifest(&m, sink)?,
                (None, Some(b)) => cmd_objectness_list(&b, sink)?,
                (None, None) => unreachable!("clap requires one source"),
            }
        }
        Command::Export { clip, offsets, run, format, window, channel } => {
            let out = require_out(&c.out)?;
            let format = ExportFormat::from_name(&format)?;
            let files = match (offsets, run, clip) {
                (Some(dump), _, _) => cmd_export_offsets(&dump, format, out)?,
                (None, Some(run), Some(clip)) => cmd_export_run_offsets(&run, &clip, window, channel, format, out)?,
                (None, None, Some(clip)) => cmd_export_clip(&clip, format, out)?,
                _ => return Err(Error::InvalidArgument("export needs --clip, --offsets or --run with --clip".into())),
            };
            println!("{} files written to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
