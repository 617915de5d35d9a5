use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use coea_core::config::RunConfig;
use coea_core::ingest::UserId;
use coea_core::pipeline::Run;
use coea_core::Error;

const LOCK_FILE: &str = ".coea.lock";

#[derive(Parser, Debug)]
#[command(name = "coea", version, about = "Exploratory category recommendation pipeline")]
struct Cli {
    /// TOML run configuration; the preset is used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in configuration used when --config is absent.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Published)]
    preset: Preset,

    /// Overrides the run seed and the synthetic world seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Preset {
    Published,
    Desk,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse the interaction log and build per-user windows.
    Ingest,
    /// Train the long-term sequence encoder and encode every user.
    TrainEncoder,
    /// Train the residual quantizer and assign group IDs.
    TrainRqvae,
    /// Build semantic groups and pick the default group.
    Group,
    /// Generate group profiles through the gateway.
    Profile,
    /// Supervised policy fine-tuning and reward-model training.
    Bootstrap,
    /// Run co-optimization cycles and rebuild the category store.
    PcoRun,
    /// KL ablation on the synthetic world.
    Ablation,
    /// Category metrics and similarity analyses.
    Eval {
        /// Cut-off K; the configured value when absent.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Look up the stored categories for a user.
    Query {
        #[arg(long)]
        user: String,
        /// Comma-separated short-window categories, overriding the user's own.
        #[arg(long, value_delimiter = ',')]
        categories: Option<Vec<String>>,
    },
    /// Write the store as TSV.
    Export {
        /// Output file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Rewrite the store log with one line per key.
    Compact,
    /// Every stage from ingest to eval.
    Run,
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

/// Held for the duration of a verb; removed on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map(|_: File| RunLock(path.clone()))
            .map_err(|e| {
                anyhow::Error::new(Error::Config(format!(
                    "{} is locked by another command ({e}); remove {} if no command is running",
                    dir.display(),
                    path.display()
                )))
            })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => match cli.preset {
            Preset::Published => RunConfig::published(),
            Preset::Desk => RunConfig::desk(),
        },
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.synthetic.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let _lock = RunLock::acquire(&cli.out_dir)?;
    let run = Run::new(&cli.out_dir, cfg)?;
    match &cli.command {
        Command::Ingest => {
            let s = run.ingest()?;
            println!(
                "{} events, {} users, {} categories; train/valid/test {}/{}/{}",
                s.events, s.users, s.categories, s.train, s.valid, s.test
            );
        }
        Command::TrainEncoder => println!("encoded {} users", run.train_encoder()?),
        Command::TrainRqvae => println!("{} occupied group IDs", run.train_rqvae()?),
        Command::Group => {
            let g = run.group()?;
            println!("{} groups; default group {}", g.groups.len(), g.default_csid);
        }
        Command::Profile => println!("{} group profiles", run.profile()?),
        Command::Bootstrap => println!("{} preference pairs", run.bootstrap()?),
        Command::PcoRun => {
            let reports = run.pco_run()?;
            print!("{}", coea_core::pco::reports_csv(&reports));
        }
        Command::Ablation => {
            for (alpha, rows) in run.ablation()? {
                if let Some((rel, nov)) = rows.last() {
                    println!("alpha {alpha}: final relevance {rel:.4}, novelty {nov:.4}");
                }
            }
        }
        Command::Eval { k } => print!("{}", run.eval(*k)?.csv()),
        Command::Query { user, categories } => {
            let q = run.query(&UserId::new(user.as_str()), categories.clone())?;
            println!("{}", serde_json::to_string_pretty(&q)?);
        }
        Command::Export { output } => {
            let tsv = run.export()?;
            match output {
                Some(p) => fs::write(p, tsv).with_context(|| format!("cannot write {}", p.display()))?,
                None => print!("{tsv}"),
            }
        }
        Command::Compact => println!("{} records", run.compact()?),
        Command::Run => print!("{}", run.run_all()?.csv()),
        Command::ShowConfig => unreachable!("handled above"),
    }
    Ok(())
}

/// 1 usage, 2 data, 3 backend or transport.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Backend { .. }) => 3,
        Some(e) if e.is_data_error() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
