use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use trajmamba::config::RunConfig;
use trajmamba::pipeline;
use trajmamba::tasks::{Mode, Task};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "trajmamba", version, about = "Trajectory representation learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set epochs=1`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic city and raw trajectories.
    GenData(Common),
    /// Decimate, filter and split the raw trajectories.
    Preprocess(Common),
    /// Map-match trajectories to roads and nearest POIs.
    Annotate(Common),
    /// Contrastive pre-training of the encoder.
    Pretrain(Common),
    /// Embed every preprocessed trajectory with a checkpoint.
    Embed(Common),
    /// Evaluate a downstream task and write a report.
    Eval {
        #[command(flatten)]
        common: Common,
        /// destination, arrival_time (or eta) or simsearch.
        #[arg(long)]
        task: Option<Task>,
        /// frozen or finetune.
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Time encoding against a full-attention baseline over sequence lengths.
    Bench(Common),
}

fn resolve(common: &Common, extra: Vec<String>) -> trajmamba::Result<RunConfig> {
    let mut overrides = common.set.clone();
    overrides.extend(extra);
    RunConfig::resolve(common.config.as_deref(), &overrides)
}

fn run(cmd: Command) -> trajmamba::Result<()> {
    match cmd {
        Command::GenData(c) => {
            let cfg = resolve(&c, vec![])?;
            let n = pipeline::gen_data(&cfg)?;
            println!("wrote {n} trajectories to {}", cfg.data_dir.display());
        }
        Command::Preprocess(c) => {
            let cfg = resolve(&c, vec![])?;
            let s = pipeline::preprocess(&cfg)?;
            println!("kept {} trajectories (train {}, val {}, test {})", s.train.len() + s.val.len() + s.test.len(), s.train.len(), s.val.len(), s.test.len());
        }
        Command::Annotate(c) => {
            let cfg = resolve(&c, vec![])?;
            let n = pipeline::annotate(&cfg)?;
            println!("annotated {n} trajectories");
        }
        Command::Pretrain(c) => {
            let cfg = resolve(&c, vec![])?;
            let curve = pipeline::pretrain(&cfg)?;
            for s in &curve {
                println!("epoch {:>3}  loss {:.6}  tau {:.5}", s.epoch, s.mean_loss, s.tau);
            }
            println!("checkpoint in {}", cfg.checkpoint_dir.display());
        }
        Command::Embed(c) => {
            let cfg = resolve(&c, vec![])?;
            let dir = pipeline::embed(&cfg)?;
            println!("embeddings in {}", dir.display());
        }
        Command::Eval { common, task, mode } => {
            let mut extra = Vec::new();
            if let Some(t) = task {
                extra.push(format!("task={t}"));
            }
            if let Some(m) = mode {
                extra.push(format!("mode={m}"));
            }
            let cfg = resolve(&common, extra)?;
            let report = pipeline::eval(&cfg)?;
            for (k, v) in &report.metrics {
                println!("{k}: {v}");
            }
            println!("report in {}", pipeline::report_path(&cfg).display());
        }
        Command::Bench(c) => {
            let cfg = resolve(&c, vec![])?;
            println!("n,trajmamba_s,attention_s");
            for r in pipeline::bench(&cfg)? {
                println!("{},{:.6},{:.6}", r.n, r.trajmamba_s, r.attention_s);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
