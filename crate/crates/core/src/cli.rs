//! Command-line front end. `run` is the whole program minus process exit,
//! so it can be driven from tests.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser as ClapParser, Subcommand, ValueEnum};

use crate::config::Config;
use crate::corpus::{
    self, compute_priors, convert_flat_table, plan_folds, ConversationTree, CorpusStats, FoldPlan,
};
use crate::error::{Error, Result};
use crate::evaluation::{run_cv, ConfusionCounts, MetricsReport};
use crate::parsing::{read_predictions, write_predictions, Parser};
use crate::training::{Checkpoint, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, ClapParser)]
#[command(
    name = "discparse",
    version,
    about = "Multi-label discourse tagging of discussion trees"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InputFormat {
    Jsonl,
    Flat,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// KEY=VALUE applied after the config file; KEY may be `section.key` or a
    /// bare key that is unique across sections.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Corpus file (overrides data.corpus).
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a corpus, print its counts and write it in canonical form.
    Ingest {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "jsonl")]
        from: InputFormat,
        /// Where to write the canonical JSON-lines corpus.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Per-label prior probabilities as CSV.
    Priors {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; `--fold` holds that fold out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fold: Option<usize>,
        /// Continue the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Tag trees with a trained checkpoint.
    Tag {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Tag only this fold's trees.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        per_branch: bool,
    },
    /// Score a predictions file against the gold labels.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Full tree-grouped cross-validation.
    Cv {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        per_branch: bool,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Divergence { .. } | Error::FoldsDiverged(_) => EXIT_DIVERGED,
                _ => EXIT_USAGE,
            }
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Ingest {
            input,
            from,
            output,
        } => cmd_ingest(&input, from, output.as_deref(), out),
        Command::Priors { common } => cmd_priors(&common, out),
        Command::Train {
            common,
            fold,
            resume,
        } => cmd_train(&common, fold, resume, out),
        Command::Tag {
            common,
            checkpoint,
            fold,
            per_branch,
        } => cmd_tag(&common, &checkpoint, fold, per_branch, out),
        Command::Evaluate {
            common,
            predictions,
            fold,
            format,
        } => cmd_evaluate(&common, &predictions, fold, format, out),
        Command::Cv {
            common,
            jobs,
            per_branch,
            format,
        } => cmd_cv(&common, jobs, per_branch, format, out),
    }
}

fn put(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn output_dir(common: &Common) -> Result<&Path> {
    common
        .output
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("--output DIR is required".into()))
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = Config::load(common.config.as_deref(), &common.overrides)?;
    if let Some(c) = &common.corpus {
        cfg.data.corpus = Some(c.clone());
    }
    Ok(cfg)
}

fn load_corpus(cfg: &Config) -> Result<Vec<ConversationTree>> {
    let path = cfg.data.corpus.as_ref().ok_or_else(|| {
        Error::Config("no corpus given (set data.corpus or pass --corpus)".into())
    })?;
    corpus::ingest(path)
}

fn fold_plan(cfg: &Config, trees: &[ConversationTree]) -> Result<FoldPlan> {
    let plan = match &cfg.data.folds {
        Some(p) => FoldPlan::load(p)?,
        None => plan_folds(trees, cfg.cv.n_folds, cfg.cv.fold_seed)?,
    };
    if let Some(t) = trees.iter().find(|t| plan.fold_of(t.tree_id()).is_none()) {
        return Err(Error::InvalidArgument(format!(
            "tree {} has no fold in the fold plan",
            t.tree_id()
        )));
    }
    Ok(plan)
}

fn check_fold(plan: &FoldPlan, fold: usize) -> Result<()> {
    if fold >= plan.n_folds() {
        return Err(Error::InvalidArgument(format!(
            "fold {fold} out of range (plan has {})",
            plan.n_folds()
        )));
    }
    Ok(())
}

fn cmd_ingest(
    input: &Path,
    from: InputFormat,
    output: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let trees = match from {
        InputFormat::Jsonl => corpus::ingest(input)?,
        InputFormat::Flat => convert_flat_table(input)?,
    };
    let s = CorpusStats::of(&trees);
    put(
        out,
        &format!(
            "trees: {}\nbranches: {}\nutterances: {}\nauthors: {}\nlabel assignments: {}\n",
            s.trees, s.branches, s.utterances, s.authors, s.label_assignments
        ),
    )?;
    if let Some(path) = output {
        corpus::write_jsonl(&trees, create(path)?)?;
    }
    Ok(())
}

fn cmd_priors(common: &Common, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(common)?;
    let priors = compute_priors(&load_corpus(&cfg)?)?;
    match &common.output {
        Some(p) => priors.write_csv(create(p)?),
        None => priors.write_csv(out),
    }
}

fn write_snapshot(dir: &Path, cfg: &Config) -> Result<()> {
    let path = dir.join("config.toml");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))
}

fn cmd_train(
    common: &Common,
    fold: Option<usize>,
    resume: bool,
    out: &mut dyn Write,
) -> Result<()> {
    let dir = output_dir(common)?;
    let cfg = if resume {
        let mut c = Checkpoint::load(dir)?.config;
        if let Some(p) = &common.corpus {
            c.data.corpus = Some(p.clone());
        }
        c
    } else {
        load_config(common)?
    };
    let trees = load_corpus(&cfg)?;
    let (train, held_out): (Vec<&ConversationTree>, BTreeSet<String>) = match fold {
        Some(f) => {
            let plan = fold_plan(&cfg, &trees)?;
            check_fold(&plan, f)?;
            let (tr, te) = plan.split(&trees, f);
            (tr, te.iter().map(|t| t.tree_id().to_string()).collect())
        }
        None => (trees.iter().collect(), BTreeSet::new()),
    };
    let log_path = dir.join("train_log.jsonl");
    let log = if resume {
        BufWriter::new(
            fs::OpenOptions::new()
                .append(true)
                .create(true)
                .open(&log_path)
                .map_err(|e| Error::io(&log_path, e))?,
        )
    } else {
        create(&log_path)?
    };
    let trainer = if resume {
        Trainer::resume(Checkpoint::load(dir)?, &train, &held_out)?
    } else {
        Trainer::new(&cfg, &train, &held_out)?
    };
    let mut trainer = trainer.with_log(log);
    write_snapshot(dir, trainer.config())?;
    trainer.run()?;
    let ckpt = trainer.into_checkpoint();
    ckpt.save(dir)?;
    put(
        out,
        &format!(
            "trained {} steps; checkpoint written to {}\n",
            ckpt.step,
            dir.display()
        ),
    )
}

fn cmd_tag(
    common: &Common,
    checkpoint: &Path,
    fold: Option<usize>,
    per_branch: bool,
    out: &mut dyn Write,
) -> Result<()> {
    if !checkpoint.join("config.json").is_file() {
        return Err(Error::Checkpoint(format!(
            "no checkpoint at {}",
            checkpoint.display()
        )));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut cfg = ckpt.config.clone();
    if common.config.is_some() || !common.overrides.is_empty() {
        let given = load_config(common)?;
        cfg.parser = given.parser;
        cfg.data = given.data;
        cfg.cv = given.cv;
    }
    if let Some(c) = &common.corpus {
        cfg.data.corpus = Some(c.clone());
    }
    let per_branch = per_branch || cfg.parser.per_branch;
    let trees = load_corpus(&cfg)?;
    let selected: Vec<&ConversationTree> = match fold {
        Some(f) => {
            let plan = fold_plan(&cfg, &trees)?;
            check_fold(&plan, f)?;
            plan.split(&trees, f).1
        }
        None => trees.iter().collect(),
    };
    let parser = Parser::new(&ckpt.model, &cfg.parser)?;
    let mut records = Vec::new();
    for t in &selected {
        records.extend(parser.records(t, per_branch)?);
    }
    match &common.output {
        Some(dir) => {
            let path = dir.join("predictions.jsonl");
            write_predictions(&records, create(&path)?)?;
            put(
                out,
                &format!(
                    "{} predictions written to {}\n",
                    records.len(),
                    path.display()
                ),
            )
        }
        None => write_predictions(&records, out),
    }
}

fn emit_report(
    report: &MetricsReport,
    stem: &str,
    dir: Option<&Path>,
    format: Format,
    out: &mut dyn Write,
) -> Result<()> {
    if let Some(dir) = dir {
        report.write_label_csv(create(&dir.join(format!("{stem}_labels.csv")))?)?;
        let mut f = create(&dir.join(format!("{stem}_categories.json")))?;
        serde_json::to_writer_pretty(&mut f, &report.category_json())?;
        f.flush().map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{stem}.txt"));
        fs::write(&path, report.table()).map_err(|e| Error::io(&path, e))?;
    }
    match format {
        Format::Table => put(out, &report.table()),
        Format::Json => {
            let text = serde_json::to_string_pretty(&report.category_json())?;
            put(out, &format!("{text}\n"))
        }
        Format::Csv => report.write_label_csv(out),
    }
}

fn cmd_evaluate(
    common: &Common,
    predictions: &Path,
    fold: Option<usize>,
    format: Format,
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = load_config(common)?;
    let trees = load_corpus(&cfg)?;
    let priors = compute_priors(&trees)?;
    let f = File::open(predictions).map_err(|e| Error::io(predictions, e))?;
    let records = read_predictions(BufReader::new(f))?;
    let all: Vec<&ConversationTree> = trees.iter().collect();
    let counts = ConfusionCounts::from_records(&all, &records)?;
    let report = MetricsReport::from_counts(counts, &priors, cfg.eval.weighting, fold)?;
    let stem = fold.map_or("report".to_string(), |f| format!("fold_{f}"));
    emit_report(&report, &stem, common.output.as_deref(), format, out)
}

fn cmd_cv(
    common: &Common,
    jobs: Option<usize>,
    per_branch: bool,
    format: Format,
    out: &mut dyn Write,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(j) = jobs {
        cfg.cv.jobs = j;
    }
    cfg.parser.per_branch |= per_branch;
    cfg.validate()?;
    let trees = load_corpus(&cfg)?;
    let priors = compute_priors(&trees)?;
    let plan = fold_plan(&cfg, &trees)?;
    let dir = common.output.as_deref();
    if let Some(d) = dir {
        write_snapshot(d, &cfg)?;
        plan.save(d.join("folds.json"))?;
    }
    let outcome = run_cv(&trees, &cfg, &plan, &priors)?;
    for (i, f) in outcome.folds.iter().enumerate() {
        if let Some(d) = dir {
            write_predictions(
                &f.predictions,
                create(&d.join(format!("fold_{i}_predictions.jsonl")))?,
            )?;
        }
        emit_report(&f.report, &format!("fold_{i}"), dir, format, out)?;
    }
    emit_report(&outcome.mean, "mean", dir, format, out)?;
    if let Some(reason) = &outcome.mean.failure {
        return Err(Error::FoldsDiverged(reason.clone()));
    }
    Ok(())
}
