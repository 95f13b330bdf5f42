use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use labseq::experiment::{
    ablate, attention_table, evaluate_run, gen_data, load_split, train_run, AblationAxes, ReportFormat, Representation, RunConfig, ValueMode, SPLITS,
};
use labseq::textualize::{EventFilter, TimeMode};
use labseq::train::LossMode;
use labseq::{Error, Result};

/// Lab value forecasting over ICU event streams.
#[derive(Debug, Parser)]
#[command(name = "labseq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort and write train/val/test JSONL.
    GenData {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        n_patients: Option<usize>,
        /// Scale every lab's circadian amplitude.
        #[arg(long)]
        circadian_scale: Option<f64>,
        /// Keep medication events but remove their effect on labs.
        #[arg(long)]
        no_med_coupling: bool,
    },
    /// Fit the vocabulary (and quantile bins) on the train split.
    BuildVocab {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a model; the vocabulary is built first when absent.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from last.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Predict every lab event of a split and compare with the baselines.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "test")]
        split: String,
        /// csv, json or both.
        #[arg(long, default_value = "both")]
        report: ReportFormat,
        /// Score failed parses as the item's training mean.
        #[arg(long)]
        fallback: bool,
    },
    /// Train and evaluate the cross product of the given axes.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        value_modes: Vec<ValueMode>,
        #[arg(long, value_delimiter = ',')]
        time_modes: Vec<TimeMode>,
        #[arg(long, value_delimiter = ',')]
        loss_modes: Vec<LossMode>,
        /// Event sets such as `labevent,labevent+medication,all`.
        #[arg(long, value_delimiter = ',')]
        event_sets: Vec<EventFilter>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Event-level attention of one prediction, as CSV on stdout.
    Attn {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        stay: String,
        /// Event ordinal of the target lab; defaults to the stay's last lab.
        #[arg(long)]
        target: Option<usize>,
    },
}

/// Config file plus flag overrides shared by every subcommand.
#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    time_mode: Option<TimeMode>,
    #[arg(long)]
    value_mode: Option<ValueMode>,
    #[arg(long)]
    loss_mode: Option<LossMode>,
    #[arg(long)]
    events: Option<EventFilter>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    max_epochs: Option<u32>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<u32>,
    /// Run on one thread.
    #[arg(long)]
    deterministic: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { cfg.$($field).+ = v.clone(); })*
            };
        }
        set!(
            seed => seed,
            data_dir => data_dir,
            out_dir => out_dir,
            time_mode => time_mode,
            value_mode => value_mode,
            loss_mode => loss_mode,
            events => events,
            max_seq_len => model.max_seq_len,
            max_epochs => train.max_epochs,
            lr => train.lr,
            batch_size => train.batch_size,
            patience => train.patience,
        );
        if self.max_steps.is_some() {
            cfg.train.max_steps = self.max_steps;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

const THREADS_ENV: &str = "LABSEQ_THREADS";

fn init_threads(deterministic: bool) -> Result<()> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v.parse::<usize>().map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
        Err(_) => 0,
    };
    let threads = if deterministic { 1 } else { threads };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Other(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            run,
            n_patients,
            circadian_scale,
            no_med_coupling,
        } => {
            init_threads(run.deterministic)?;
            let mut cfg = run.resolve()?;
            if let Some(n) = n_patients {
                cfg.data.synthetic.n_patients = n;
            }
            if let Some(s) = circadian_scale {
                cfg.data.synthetic = cfg.data.synthetic.with_circadian_scale(s);
            }
            if no_med_coupling {
                cfg.data.synthetic = cfg.data.synthetic.without_medication_coupling();
            }
            cfg.validate()?;
            let counts = gen_data(&cfg.data, &cfg.data_dir)?;
            println!("{:<6} {:>9} {:>7} {:>11} {:>8}", "split", "patients", "stays", "lab_events", "events");
            for c in counts {
                println!("{:<6} {:>9} {:>7} {:>11} {:>8}", c.split, c.patients, c.stays, c.lab_events, c.events);
            }
        }
        Command::BuildVocab { run } => {
            init_threads(run.deterministic)?;
            let cfg = run.resolve()?;
            let rep = Representation::fit(&cfg, &load_split(&cfg.data_dir, "train")?)?;
            rep.save(&cfg.out_dir)?;
            println!("vocabulary: {} tokens, hash {}", rep.vocab.len(), rep.vocab.hash());
        }
        Command::Train { run, resume } => {
            init_threads(run.deterministic)?;
            let cfg = run.resolve()?;
            let s = train_run(&cfg, resume)?;
            for r in &s.history {
                println!("epoch {:>3} step {:>6} train {:.4} val {:.4}{}", r.epoch, r.step, r.train_loss, r.val_loss, if r.improved { " *" } else { "" });
            }
            let best = s.best_val_loss.map_or("-".into(), |v| format!("{v:.4}"));
            println!("{} epochs, {} steps, best val loss {best}, {} parameters", s.epochs, s.steps, s.n_params);
        }
        Command::Evaluate { run, split, report, fallback } => {
            init_threads(run.deterministic)?;
            let mut cfg = run.resolve()?;
            cfg.eval.fallback |= fallback;
            let summary = evaluate_run(&cfg, &split, report)?;
            print!("{}", summary.table());
        }
        Command::Ablate {
            run,
            value_modes,
            time_modes,
            loss_modes,
            event_sets,
            seeds,
        } => {
            init_threads(run.deterministic)?;
            let cfg = run.resolve()?;
            let mut axes = AblationAxes::single(&cfg);
            macro_rules! axis {
                ($($name:ident),*) => { $(if !$name.is_empty() { axes.$name = $name; })* };
            }
            axis!(value_modes, time_modes, loss_modes, event_sets, seeds);
            let rows = ablate(&cfg, &axes)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!("{} legs, {failed} failed; table in {}", rows.len(), cfg.out_dir.join("ablation.csv").display());
            if failed > 0 {
                return Err(Error::Other(format!("{failed} ablation legs failed")));
            }
        }
        Command::Attn { run, split, stay, target } => {
            init_threads(run.deterministic)?;
            let cfg = run.resolve()?;
            if !SPLITS.contains(&split.as_str()) {
                return Err(Error::Config(format!("split {split:?} not in {SPLITS:?}")));
            }
            print!("{}", attention_table(&cfg, &split, &stay, target)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
