//! The `fedpheno` command line.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::corpus::{generate_corpus, read_records, write_records, PatientRecord, SynthConfig};
use crate::error::{Error, Result};
use crate::experiment::{
    pretrain, read_summary, run_experiment, run_phenotyping, ExperimentSpec, ModelConfig,
    PhenotypingMode,
};
use crate::federation::{FedConfig, RoundLog};
use crate::neural::{random_grad_checks, Activation};
use crate::representation::FrozenEncoder;

/// Exit status for argument errors.
pub const EXIT_USAGE: i32 = 2;
/// Largest relative gradient error `gradcheck` accepts (exclusive).
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "fedpheno", version, about = "Two-stage federated phenotyping simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus (pretrain.tsv, phenotype.tsv, corpus.toml).
    Gen(GenArgs),
    /// Train the stage-1 encoder, centralized or federated.
    Pretrain(PretrainArgs),
    /// Train and evaluate stage-2 SVMs on a phenotype cohort.
    Phenotype(PhenotypeArgs),
    /// Run one of the seven experiments end to end.
    Experiment(ExperimentArgs),
    /// Tabulate finished experiment directories.
    Report(ReportArgs),
    /// Check analytic DAN gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// TOML file with corpus settings (the fields of a `[corpus]` section).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    num_codes: Option<usize>,
    #[arg(long)]
    num_diseases: Option<usize>,
    #[arg(long)]
    patients_pretrain: Option<usize>,
    #[arg(long)]
    patients_phenotype: Option<usize>,
    #[arg(long)]
    latent_noise: Option<f64>,
    #[arg(long)]
    prevalence: Option<f64>,
    #[arg(long)]
    questionable_rate: Option<f64>,
}

/// Schedule flags shared by both training stages.
#[derive(Debug, Args)]
struct ScheduleArgs {
    #[arg(long)]
    sites: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    silo_skew: Option<f64>,
}

impl ScheduleArgs {
    fn apply(&self, fed: &mut FedConfig) {
        if let Some(v) = self.sites {
            fed.num_sites = v;
        }
        if let Some(v) = self.rounds {
            fed.global_rounds = v;
        }
        if let Some(v) = self.epochs {
            fed.local_spec.epochs_per_round = v;
        }
        if let Some(v) = self.lr {
            fed.local_spec.lr = v;
        }
        if let Some(v) = self.batch_size {
            fed.local_spec.batch_size = v;
        }
        if let Some(v) = self.silo_skew {
            fed.silo_skew = v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PretrainMode {
    Centralized,
    Federated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ActivationArg {
    Relu,
    Tanh,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Tanh => Activation::Tanh,
        }
    }
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// Code-labelled records (TSV).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML with optional `[model]` and `[fed]` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "federated")]
    mode: PretrainMode,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Defaults to one more than the largest concept ID in the data.
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long, value_enum)]
    activation: Option<ActivationArg>,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PhenotypeModeArg {
    Centralized,
    Federated,
    SingleSource,
}

impl From<PhenotypeModeArg> for PhenotypingMode {
    fn from(m: PhenotypeModeArg) -> Self {
        match m {
            PhenotypeModeArg::Centralized => PhenotypingMode::Centralized,
            PhenotypeModeArg::Federated => PhenotypingMode::Federated,
            PhenotypeModeArg::SingleSource => PhenotypingMode::SingleSource,
        }
    }
}

#[derive(Debug, Args)]
struct PhenotypeArgs {
    /// Phenotype-labelled records (TSV).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Encoder directory from `pretrain`; TF-IDF features when omitted.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// TOML with optional `[model]` and `[fed]` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "federated")]
    mode: PhenotypeModeArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// TF-IDF dimension; defaults to one more than the largest concept ID.
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    min_class_count: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Experiment number, 1 to 7.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=7))]
    id: Option<u8>,
    /// Full or partial experiment TOML; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Repeatable; replaces the configured seed list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Defaults to `runs/exp<id>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Experiment output directories.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    configs: usize,
    #[arg(long, default_value_t = 100)]
    coords: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, value_enum, default_value = "relu")]
    activation: ActivationArg,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct StageFile {
    model: ModelConfig,
    fed: Option<FedConfig>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

fn load_records(path: &Path) -> Result<Vec<PatientRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(BufReader::new(file), &path.display().to_string())
}

fn save_records(path: &Path, records: &[PatientRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_records(&mut out, records)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn inferred_vocab(records: &[PatientRecord]) -> usize {
    records
        .iter()
        .flat_map(|r| r.doc.tokens.iter())
        .max()
        .map_or(1, |&t| t as usize + 1)
}

fn cmd_gen(args: GenArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg: SynthConfig = match &args.config {
        Some(p) => parse_toml(p)?,
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field {
                cfg.$field = v;
            }
        )*};
    }
    set!(
        seed,
        vocab_size,
        num_codes,
        num_diseases,
        patients_pretrain,
        patients_phenotype,
        latent_noise,
        prevalence,
        questionable_rate
    );
    let corpus = generate_corpus(&cfg)?;
    create_dir(&args.out)?;
    save_records(&args.out.join("pretrain.tsv"), &corpus.pretrain)?;
    save_records(&args.out.join("phenotype.tsv"), &corpus.phenotype)?;
    let snapshot = toml::to_string(&cfg).expect("corpus config serializes");
    write_file(&args.out.join("corpus.toml"), snapshot)?;
    writeln!(
        out,
        "wrote {} pre-training and {} phenotype records to {}",
        corpus.pretrain.len(),
        corpus.phenotype.len(),
        args.out.display()
    )
    .ok();
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs, out: &mut dyn Write) -> Result<()> {
    let file: StageFile = match &args.config {
        Some(p) => parse_toml(p)?,
        None => StageFile::default(),
    };
    let mut model = file.model;
    if let Some(v) = args.embed_dim {
        model.embed_dim = v;
    }
    if let Some(v) = args.hidden_dim {
        model.hidden_dim = v;
    }
    if let Some(v) = args.activation {
        model.activation = v.into();
    }
    model.validate()?;
    let mut fed = file.fed.unwrap_or_else(FedConfig::representation_default);
    args.schedule.apply(&mut fed);

    let records = load_records(&args.data)?;
    let vocab = args.vocab_size.unwrap_or_else(|| inferred_vocab(&records));
    let federated = args.mode == PretrainMode::Federated;
    let trained = pretrain(&records, vocab, &model, &fed, federated, args.seed)?;

    create_dir(&args.out)?;
    let snapshot = format!(
        "seed = {}\nfederated = {federated}\nvocab_size = {vocab}\n\n[model]\n{}\n[fed]\n{}",
        args.seed,
        toml::to_string(&model).expect("model config serializes"),
        toml::to_string(&fed).expect("fed config serializes"),
    );
    write_file(&args.out.join("config.toml"), &snapshot)?;
    trained.encoder.save(&args.out, &snapshot)?;
    if !trained.logs.is_empty() {
        let mut buf = Vec::new();
        RoundLog::write_lines(&trained.logs, &mut buf).map_err(|e| Error::io(&args.out, e))?;
        write_file(&args.out.join("rounds.jsonl"), buf)?;
    }
    writeln!(
        out,
        "encoder (H={}) written to {}",
        trained.encoder.hidden_dim(),
        args.out.display()
    )
    .ok();
    Ok(())
}

fn cmd_phenotype(args: PhenotypeArgs, out: &mut dyn Write) -> Result<()> {
    let file: StageFile = match &args.config {
        Some(p) => parse_toml(p)?,
        None => StageFile::default(),
    };
    let mut model = file.model;
    if let Some(v) = args.min_class_count {
        model.min_class_count = v;
    }
    if let Some(v) = args.test_fraction {
        model.test_fraction = v;
    }
    let mut fed = file.fed.unwrap_or_else(FedConfig::phenotype_default);
    args.schedule.apply(&mut fed);

    let records = load_records(&args.data)?;
    let encoder = args.encoder.as_deref().map(FrozenEncoder::load).transpose()?;
    let vocab = args.vocab_size.unwrap_or_else(|| inferred_vocab(&records));
    let run = run_phenotyping(
        &records,
        encoder.as_ref(),
        vocab,
        &model,
        args.mode.into(),
        &fed,
        args.seed,
    )?;

    create_dir(&args.out)?;
    write_file(&args.out.join("report.csv"), run.report.to_csv())?;
    write_file(&args.out.join("report.json"), run.report.to_json() + "\n")?;
    for svm in &run.svms {
        let stem = match svm.site {
            None => format!("svm_d{}", svm.disease),
            Some(k) => format!("svm_d{}_site{k}", svm.disease),
        };
        svm.model.save(&args.out, &stem, svm.disease)?;
    }
    for (d, logs) in &run.logs {
        let mut buf = Vec::new();
        RoundLog::write_lines(logs, &mut buf).map_err(|e| Error::io(&args.out, e))?;
        write_file(&args.out.join(format!("rounds_d{d}.jsonl")), buf)?;
    }
    write!(out, "{}", run.report.to_csv()).ok();
    Ok(())
}

fn cmd_experiment(args: ExperimentArgs, out: &mut dyn Write) -> Result<()> {
    let mut spec = match (&args.config, args.id) {
        (Some(path), id) => {
            let spec = ExperimentSpec::from_toml(&read_text(path)?, id)?;
            match id {
                Some(id) if id != spec.id => {
                    return Err(Error::config(
                        "id",
                        format!("--id {id} conflicts with id {} in the config", spec.id),
                    ))
                }
                _ => spec,
            }
        }
        (None, Some(id)) => ExperimentSpec::for_id(id)?,
        (None, None) => return Err(Error::config("id", "give --id or a --config with an id")),
    };
    if !args.seeds.is_empty() {
        spec.seeds = args.seeds;
    }
    spec.validate()?;
    let dir = args
        .out
        .unwrap_or_else(|| PathBuf::from(format!("runs/exp{}", spec.id)));
    let run = run_experiment(&spec)?;
    run.write(&dir)?;
    let avg = &run.summary.mean.average;
    writeln!(
        out,
        "experiment {}: precision {:.4} recall {:.4} f1 {:.4} (f1 std {:.4}, {} seeds) -> {}",
        spec.id,
        avg.precision,
        avg.recall,
        avg.f1,
        run.summary.std.average.f1,
        spec.seeds.len(),
        dir.display()
    )
    .ok();
    Ok(())
}

fn cmd_report(args: ReportArgs, out: &mut dyn Write) -> Result<()> {
    let mut rows = args
        .dirs
        .iter()
        .map(|d| read_summary(d).map(|s| (d, s)))
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|(_, s)| s.id);
    writeln!(
        out,
        "{:<4}{:<16}{:<15}{:>10}{:>10}{:>10}{:>10}  dir",
        "exp", "representation", "phenotyping", "precision", "recall", "f1", "f1_std"
    )
    .ok();
    for (dir, s) in rows {
        let m = &s.mean.average;
        writeln!(
            out,
            "{:<4}{:<16}{:<15}{:>10.4}{:>10.4}{:>10.4}{:>10.4}  {}",
            s.id,
            format!("{:?}", s.representation).to_lowercase(),
            format!("{:?}", s.phenotyping).to_lowercase(),
            m.precision,
            m.recall,
            m.f1,
            s.std.average.f1,
            dir.display()
        )
        .ok();
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs, out: &mut dyn Write) -> Result<bool> {
    let runs = random_grad_checks(
        args.configs,
        args.coords,
        args.seed,
        args.activation.into(),
        args.step,
    )?;
    let mut worst: f64 = 0.0;
    for (i, (shape, report)) in runs.iter().enumerate() {
        writeln!(
            out,
            "config {i}: V={} E={} H={} M={} doc_len={} coords={} max_rel_error={:.3e}",
            shape.vocab,
            shape.embed,
            shape.hidden,
            shape.outputs,
            shape.doc_len,
            report.coords_checked,
            report.max_rel_error
        )
        .ok();
        worst = worst.max(report.max_rel_error);
    }
    let pass = worst < GRAD_CHECK_TOLERANCE;
    writeln!(
        out,
        "max relative error {worst:.3e} ({} at tolerance {GRAD_CHECK_TOLERANCE:e})",
        if pass { "pass" } else { "FAIL" }
    )
    .ok();
    Ok(pass)
}

/// Parses `argv` (program name first) and runs the command, writing normal
/// output to `out` and diagnostics to `err`. Returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                write!(out, "{text}").ok();
            } else {
                write!(err, "{text}").ok();
            }
            return code;
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a, out),
        Command::Pretrain(a) => cmd_pretrain(a, out),
        Command::Phenotype(a) => cmd_phenotype(a, out),
        Command::Experiment(a) => cmd_experiment(a, out),
        Command::Report(a) => cmd_report(a, out),
        Command::Gradcheck(a) => match cmd_gradcheck(a, out) {
            Ok(true) => Ok(()),
            Ok(false) => return 1,
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            writeln!(err, "fedpheno: error: {e}").ok();
            1
        }
    }
}

/// [`run`] bound to the process's stdout and stderr.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(argv, &mut stdout.lock(), &mut stderr.lock())
}
