use clap::Parser;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use torlab_cli::report::RunEnvelope;
use torlab_cli::tasks::Format;
use torlab_cli::{parse_config, run, CliError};

/// Desk-scale experiments for linear random walks on the torus.
#[derive(Parser, Debug)]
#[command(name = "torlab", version)]
struct Args {
    /// Task to run; must match the `task.name` in the config
    /// (decompose, lyapunov, walk, fourier, granulate, audit-nc,
    /// sumproduct, flatten, drift, e2e, fixtures).
    task: String,

    /// Path to the experiment config (JSON). Optional for `fixtures`.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory for the report and artifacts.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads (results are identical for any thread count).
    #[arg(long)]
    threads: Option<usize>,

    /// Artifact format for tabular outputs.
    #[arg(long, default_value = "json")]
    format: String,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(3))
        }
    }
}

fn execute(args: &Args) -> torlab_cli::Result<()> {
    let format = match args.format.as_str() {
        "json" => Format::Json,
        "csv" => Format::Csv,
        other => {
            return Err(CliError::Config(format!(
                "--format must be json or csv, got {other:?}"
            )))
        }
    };
    let text = match (&args.config, args.task.as_str()) {
        (Some(path), _) => std::fs::read_to_string(path)?,
        (None, "fixtures") => {
            r#"{ "system": "F1", "task": { "name": "fixtures" } }"#.to_string()
        }
        (None, _) => return Err(CliError::Config("--config is required".into())),
    };
    let cfg = parse_config(&text)?;
    if cfg.task.name() != args.task {
        return Err(CliError::Config(format!(
            "subcommand {:?} does not match config task {:?}",
            args.task,
            cfg.task.name()
        )));
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    let started = std::time::Instant::now();
    let (report, artifacts) = match args.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
            pool.install(|| run(&cfg, seed, format))?
        }
        None => run(&cfg, seed, format)?,
    };
    let wall = started.elapsed().as_millis();
    let body = report.body_bytes();
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("report.json"), &body)?;
        let envelope = RunEnvelope { wall_clock_ms: wall };
        std::fs::write(
            out.join("meta.json"),
            serde_json::to_string_pretty(&envelope).expect("envelope serializes"),
        )?;
        for a in &artifacts {
            std::fs::write(out.join(&a.name), &a.bytes)?;
        }
        std::fs::write(out.join("config.json"), cfg.canonical())?;
    } else {
        std::io::stdout().write_all(&body)?;
    }
    eprintln!(
        "{}: done in {} ms ({} warnings, {} artifacts)",
        report.task,
        wall,
        report.warnings.len(),
        artifacts.len()
    );
    Ok(())
}
