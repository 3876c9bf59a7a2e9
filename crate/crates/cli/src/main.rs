use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use xlkd::models::{Family, Task};
use xlkd::runner::{Baseline, Run, RunConfig};
use xlkd::Error;

#[derive(Parser)]
#[command(name = "xlkd", version, about = "Label-free cross-lingual transfer by two-step distillation on synthetic languages")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration. Defaults to <out>/config.json when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    task: Option<TaskArg>,
    #[arg(long, global = true, value_enum)]
    arch: Option<ArchArg>,
    #[arg(long, global = true, value_enum)]
    target_arch: Option<ArchArg>,
    #[arg(long, global = true)]
    balanced: bool,
    #[arg(long, global = true)]
    augment: bool,
    #[arg(long, global = true)]
    pivot_size: Option<usize>,
    /// Every source/target architecture pair.
    #[arg(long, global = true)]
    grid: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate corpora and tokenizers.
    GenData,
    /// Train the off-the-shelf source-language model.
    TrainSource,
    /// Two-step distillation into every target language.
    Pipeline,
    Baseline {
        #[arg(value_enum)]
        which: BaselineArg,
    },
    Reference {
        #[arg(value_enum)]
        which: ReferenceArg,
    },
    /// Score a saved model on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lang: String,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Render report.json, report.md and grid CSVs from the stored rows.
    Report,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Sentence,
    Word,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Transformer,
    Bilstm,
    Cnn,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    TranslateTest,
    TranslateTrainPseudo,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReferenceArg {
    GoldSupervised,
}

impl From<ArchArg> for Family {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Transformer => Family::Transformer,
            ArchArg::Bilstm => Family::Bilstm,
            ArchArg::Cnn => Family::Cnn,
        }
    }
}

fn resolve_config(c: &Common) -> Result<RunConfig, Error> {
    let stored = c.out.join("config.json");
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None if stored.exists() => RunConfig::load(&stored)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.task {
        cfg.task = match t {
            TaskArg::Sentence => Task::Sentence,
            TaskArg::Word => Task::Word,
        };
    }
    if let Some(a) = c.arch {
        cfg.arch = a.into();
    }
    if let Some(a) = c.target_arch {
        cfg.target_arch = Some(a.into());
    }
    cfg.options.balanced |= c.balanced;
    cfg.options.augment |= c.augment;
    cfg.grid |= c.grid;
    if c.pivot_size.is_some() {
        cfg.pivot_size = c.pivot_size;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_gate(run: &Run) {
    for g in run.gate_report() {
        eprintln!(
            "label reads {}/{}: attempted {} successful {} blocked {}",
            g.lang, g.split, g.attempted, g.successful, g.blocked
        );
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), Error> {
    let cfg = resolve_config(&cli.common)?;
    let mut run = Run::open(&cli.common.out, cfg)?;
    info!("run directory {}", run.dir().display());
    let result = match &cli.command {
        Command::GenData => {
            let m = run.gen_data()?;
            for (path, f) in &m.files {
                println!("{path}\t{}\t{}", f.lines, f.sha256);
            }
            Ok(())
        }
        Command::TrainSource => {
            let arch = run.config.arch;
            let (_, row) = run.train_source(arch)?;
            print_json(&row)
        }
        Command::Pipeline => {
            let rows = run.pipeline();
            print_gate(&run);
            print_json(&rows?)
        }
        Command::Baseline { which } => {
            let which = match which {
                BaselineArg::TranslateTest => Baseline::TranslateTest,
                BaselineArg::TranslateTrainPseudo => Baseline::TranslateTrainPseudo,
            };
            let row = run.baseline(which);
            print_gate(&run);
            print_json(&row?)
        }
        Command::Reference { which: ReferenceArg::GoldSupervised } => {
            let row = run.reference();
            print_gate(&run);
            print_json(&row?)
        }
        Command::Eval { model, lang, split } => {
            let s = run.eval_model(Path::new(model), lang, split)?;
            println!("{s:.6}");
            Ok(())
        }
        Command::Report => {
            let r = run.report()?;
            print!("{}", r.to_markdown());
            Ok(())
        }
    };
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_label_gate() || e.to_string().contains("label gate") {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
