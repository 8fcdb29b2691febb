//! The `knowgrade` command line.
//!
//! Every subcommand reads its flags from the command line and, optionally,
//! from a `--config` file of `key = value` lines whose keys are flag names
//! (`lr = 0.005`, `train_end = 2015-2`). Flags given on the command line win.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::data::{
    build_samples, ingest, split_chronological, write_records, Dataset, DatasetSplit,
    GradeEncoding, Sample, Vocabulary, MIN_PRIOR_COURSES,
};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::models::{Model, ModelConfig, ModelKind, PredictionContext, PriorCourse};
use crate::synthesis::{generate, write_outputs, GeneratorKind, SynthSpec};
use crate::training::{grid_search, history_tsv, train, GridSpec, TrainConfig};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "knowgrade",
    version,
    about = "Knowledge-based grade prediction"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// File of `key = value` defaults for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a transcript CSV and write it back in normalized form.
    Ingest(IngestArgs),
    /// Split a transcript chronologically and report eligible targets.
    Split(SplitCmd),
    /// Train one model and write its checkpoint and loss history.
    Train(TrainCmd),
    /// Evaluate a checkpoint on the test (or validation) targets.
    Evaluate(EvaluateCmd),
    /// Grid search over hyperparameters, then keep the best model.
    Grid(GridCmd),
    /// Generate a synthetic transcript from a planted model.
    Synth(SynthCmd),
    /// Show the attention a model pays to a student's courses.
    Explain(ExplainCmd),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Transcript CSV with columns student_id,course_id,term,grade.
    #[arg(long, value_name = "CSV")]
    pub input: PathBuf,
    /// Grade notation: auto, letter or points.
    #[arg(long, default_value = "auto", value_parser = parse_encoding)]
    pub encoding: GradeEncoding,
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Where to write the normalized CSV.
    #[arg(long, value_name = "CSV")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// Last calendar term of the training partition.
    #[arg(long)]
    pub train_end: String,
    /// Last calendar term of the validation partition.
    #[arg(long)]
    pub val_end: String,
}

#[derive(Debug, Clone, Args)]
pub struct SplitCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// mf, krm-sum, krm-avg, mak, nak-soft, nak-sparse, cmak or cnak.
    #[arg(long)]
    pub model: ModelKind,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub attn_dim: usize,
    #[arg(long, default_value_t = 0.0)]
    pub decay: f64,
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    /// Score prior courses on plain provided vectors instead of grade-weighted ones.
    #[arg(long)]
    pub no_grade_weighting: bool,
}

impl ModelArgs {
    fn config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            kind: self.model,
            dim: self.dim,
            attn_dim: self.attn_dim,
            decay: self.decay,
            gamma: self.gamma,
            grade_weighted_attention: !self.no_grade_weighting,
            seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 1e-5)]
    pub l2: f64,
    #[arg(long, default_value_t = 0.005)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 200)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// Apply the L2 penalty to bias terms as well.
    #[arg(long)]
    pub regularize_biases: bool,
    /// Seeds initialization and shuffling.
    #[arg(long)]
    pub seed: u64,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            l2: self.l2,
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            regularize_biases: self.regularize_biases,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Expected model kind; must match the checkpoint.
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Expected embedding dimension; must match the checkpoint.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Evaluate the validation targets instead of the test targets.
    #[arg(long)]
    pub validation: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GridCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_delimiter = ',', default_values_t = GridSpec::default().dims)]
    pub grid_dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = GridSpec::default().l2s)]
    pub grid_l2s: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = GridSpec::default().lrs)]
    pub grid_lrs: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = GridSpec::default().attn_dims)]
    pub grid_attn_dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = GridSpec::default().gammas)]
    pub grid_gammas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = GridSpec::default().decays)]
    pub grid_decays: Vec<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthCmd {
    /// Planted model: krm or nak.
    #[arg(long, default_value = "krm")]
    pub generator: GeneratorKind,
    #[arg(long, default_value_t = 500)]
    pub students: usize,
    #[arg(long, default_value_t = 60)]
    pub courses: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 6)]
    pub terms: usize,
    #[arg(long, default_value_t = 4)]
    pub courses_per_term: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.3)]
    pub decay: f64,
    #[arg(long, default_value_t = 0.25)]
    pub scale: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ExplainCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub student: String,
    /// Target course. When the student never took it, the prediction is for
    /// the term after their last one.
    #[arg(long)]
    pub course: String,
    /// Write `attention.tsv` here instead of printing the table.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn parse_encoding(s: &str) -> std::result::Result<GradeEncoding, String> {
    match s {
        "auto" => Ok(GradeEncoding::Auto),
        "letter" => Ok(GradeEncoding::Letter),
        "points" => Ok(GradeEncoding::Points),
        _ => Err(format!(
            "unknown encoding '{s}' (expected auto, letter or points)"
        )),
    }
}

/// Maps an error to its exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parameter(_) => EXIT_USAGE,
        Error::Diverged { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Turns `key = value` lines into flags. Blank lines and `#` comments are
/// skipped; `true`/`false` values toggle switches.
pub fn config_flags(text: &str) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i as u64 + 1,
            message: format!("expected key = value: {line}"),
        })?;
        let flag = format!("--{}", key.trim().replace('_', "-"));
        match value.trim() {
            "true" => out.push(flag.into()),
            "false" => {}
            v => {
                out.push(flag.into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

/// Inserts flags from `--config FILE` right after the subcommand name so
/// that flags on the command line override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let pos = args.iter().position(|a| a == "--config");
    let path = match pos {
        Some(p) => args.get(p + 1).cloned(),
        None => args
            .iter()
            .find_map(|a| a.to_str()?.strip_prefix("--config=").map(OsString::from)),
    };
    let Some(path) = path else {
        return Ok(args);
    };
    let path = PathBuf::from(path);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let flags = config_flags(&text)?;
    // The subcommand is the first argument that is not a global flag.
    let mut sub = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--config" {
            i += 2;
        } else if a.starts_with('-') {
            i += 1;
        } else {
            sub = Some(i);
            break;
        }
    }
    let Some(sub) = sub else {
        return Ok(args);
    };
    let mut out = args[..=sub].to_vec();
    out.extend(flags);
    out.extend_from_slice(&args[sub + 1..]);
    Ok(out)
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Diagnostics go to stderr, tables to stdout.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Explain(a) => cmd_explain(a),
    }
}

fn load(data: &DataArgs) -> Result<Dataset> {
    let (dataset, stats) = ingest(&data.input, data.encoding)?;
    log::info!(
        "{}: {} rows, {} pass/fail dropped, {} students",
        data.input.display(),
        stats.rows,
        stats.dropped_pass_fail,
        dataset.num_students()
    );
    Ok(dataset)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", dir.display()),
        ))
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    let (dataset, stats) = ingest(&a.data.input, a.data.encoding)?;
    let vocab = Vocabulary::from_records(dataset.records().iter());
    println!("rows: {}", stats.rows);
    println!("dropped_pass_fail: {}", stats.dropped_pass_fail);
    println!("records: {}", dataset.len());
    println!("students: {}", vocab.students().len());
    println!("courses: {}", vocab.courses().len());
    if let Some(out) = &a.out {
        dataset.export(out)?;
    }
    Ok(())
}

fn split_summary(dataset: &Dataset, split: &DatasetSplit) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "train_end: {}", split.train_end);
    let _ = writeln!(out, "val_end: {}", split.val_end);
    let _ = writeln!(out, "records: {}", dataset.len());
    let _ = writeln!(out, "train: {}", split.train.len());
    let _ = writeln!(out, "train_targets: {}", split.train_targets(dataset).len());
    let _ = writeln!(out, "validation: {}", split.validation.len());
    let _ = writeln!(out, "test: {}", split.test.len());
    for (name, ex) in [
        ("validation", split.excluded_validation),
        ("test", split.excluded_test),
    ] {
        let _ = writeln!(out, "{name}_excluded_too_few_prior: {}", ex.too_few_prior);
        let _ = writeln!(out, "{name}_excluded_unseen_course: {}", ex.unseen_course);
    }
    out
}

fn cmd_split(a: &SplitCmd) -> Result<()> {
    let dataset = load(&a.data)?;
    let split = split_chronological(&dataset, &a.split.train_end, &a.split.val_end)?;
    let summary = split_summary(&dataset, &split);
    print!("{summary}");
    if let Some(dir) = &a.out_dir {
        create_dir(dir)?;
        write(&dir.join("split.txt"), &summary)?;
        for (name, indices) in [
            ("train.csv", &split.train),
            ("validation.csv", &split.validation),
            ("test.csv", &split.test),
        ] {
            let file = std::fs::File::create(dir.join(name))?;
            write_records(
                indices.iter().map(|&i| &dataset.records()[i]),
                std::io::BufWriter::new(file),
            )?;
        }
    }
    Ok(())
}

/// Vocabulary, training and validation samples.
struct Prepared {
    vocab: Vocabulary,
    train: Vec<Sample>,
    validation: Vec<Sample>,
}

fn prepare(data: &DataArgs, split: &SplitArgs, kind: ModelKind) -> Result<Prepared> {
    let dataset = load(data)?;
    let split = split_chronological(&dataset, &split.train_end, &split.val_end)?;
    let vocab = split.vocabulary(&dataset);
    let need_student = kind.uses_students();
    let (train, skipped) = build_samples(
        &dataset,
        &split.train_targets(&dataset),
        &vocab,
        need_student,
    );
    if train.is_empty() {
        return Err(Error::Config(
            "no training targets: every training record is in its student's first term".into(),
        ));
    }
    let (validation, skipped_val) =
        build_samples(&dataset, &split.validation, &vocab, need_student);
    log::info!(
        "{} training samples ({skipped} skipped), {} validation samples ({skipped_val} skipped)",
        train.len(),
        validation.len()
    );
    Ok(Prepared {
        vocab,
        train,
        validation,
    })
}

fn cmd_train(a: &TrainCmd) -> Result<()> {
    let model_cfg = a.model.config(a.train.seed);
    model_cfg.validate()?;
    let train_cfg = a.train.config();
    train_cfg.validate()?;
    let p = prepare(&a.data, &a.split, model_cfg.kind)?;
    let model = Model::init(model_cfg, p.vocab.courses().len(), p.vocab.students().len())?;
    let outcome = train(model, &p.train, &p.validation, &train_cfg)?;
    let (best_epoch, best_mse) = (outcome.best_epoch, outcome.best_validation_mse());
    create_dir(&a.out_dir)?;
    Checkpoint {
        model: outcome.model,
        vocab: p.vocab,
        train: Some(train_cfg),
    }
    .save(&a.out_dir.join("checkpoint.txt"))?;
    write(
        &a.out_dir.join("history.tsv"),
        &history_tsv(&outcome.history),
    )?;
    println!("best_epoch: {best_epoch}");
    println!("validation_mse: {best_mse}");
    Ok(())
}

fn cmd_evaluate(a: &EvaluateCmd) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = &ck.model.config;
    if let Some(kind) = a.model {
        if kind != cfg.kind {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {} model, expected {kind}",
                cfg.kind
            )));
        }
    }
    if let Some(dim) = a.dim {
        if dim != cfg.dim {
            return Err(Error::Checkpoint(format!(
                "checkpoint has dimension {}, expected {dim}",
                cfg.dim
            )));
        }
    }
    let dataset = load(&a.data)?;
    let split = split_chronological(&dataset, &a.split.train_end, &a.split.val_end)?;
    let (name, targets) = if a.validation {
        ("validation", &split.validation)
    } else {
        ("test", &split.test)
    };
    let (samples, skipped) = build_samples(&dataset, targets, &ck.vocab, cfg.kind.uses_students());
    if samples.is_empty() {
        return Err(Error::Contract(format!(
            "no eligible {name} targets: a target needs at least {MIN_PRIOR_COURSES} earlier \
             courses and a course that appears in the training partition \
             ({} candidates, {} excluded for too few prior courses, {} for unseen courses, \
             {skipped} outside the checkpoint's vocabulary)",
            targets.len(),
            if a.validation {
                split.excluded_validation
            } else {
                split.excluded_test
            }
            .too_few_prior,
            if a.validation {
                split.excluded_validation
            } else {
                split.excluded_test
            }
            .unseen_course,
        )));
    }
    let report = evaluate(&ck.model, &samples)?;
    create_dir(&a.out_dir)?;
    let text = report.to_text();
    write(&a.out_dir.join("report.txt"), &text)?;
    write(
        &a.out_dir.join("report.json"),
        &format!("{}\n", report.to_json_line()),
    )?;
    print!("{text}");
    Ok(())
}

fn cmd_grid(a: &GridCmd) -> Result<()> {
    let base_model = a.model.config(a.train.seed);
    let base_train = a.train.config();
    base_train.validate()?;
    let grid = GridSpec {
        dims: a.grid_dims.clone(),
        l2s: a.grid_l2s.clone(),
        lrs: a.grid_lrs.clone(),
        attn_dims: a.grid_attn_dims.clone(),
        gammas: a.grid_gammas.clone(),
        decays: a.grid_decays.clone(),
    };
    let p = prepare(&a.data, &a.split, base_model.kind)?;
    let (n_courses, n_students) = (p.vocab.courses().len(), p.vocab.students().len());
    let report = grid_search(
        &base_model,
        &base_train,
        &grid,
        n_courses,
        n_students,
        &p.train,
        &p.validation,
    )?;
    create_dir(&a.out_dir)?;
    write(&a.out_dir.join("grid.tsv"), &report.to_tsv())?;

    let best = report.best_point();
    let (mut model_cfg, mut train_cfg) = (base_model, base_train);
    best.apply(&mut model_cfg, &mut train_cfg);
    let model = Model::init(model_cfg, n_courses, n_students)?;
    let outcome = train(model, &p.train, &p.validation, &train_cfg)?;
    let (best_epoch, best_mse) = (outcome.best_epoch, outcome.best_validation_mse());
    Checkpoint {
        model: outcome.model,
        vocab: p.vocab,
        train: Some(train_cfg),
    }
    .save(&a.out_dir.join("checkpoint.txt"))?;
    write(
        &a.out_dir.join("history.tsv"),
        &history_tsv(&outcome.history),
    )?;
    println!(
        "best: dim={} l2={} lr={} attn_dim={} gamma={} decay={}",
        best.dim, best.l2, best.lr, best.attn_dim, best.gamma, best.decay
    );
    println!("best_epoch: {best_epoch}");
    println!("validation_mse: {best_mse}");
    Ok(())
}

fn cmd_synth(a: &SynthCmd) -> Result<()> {
    let spec = SynthSpec {
        n_students: a.students,
        n_courses: a.courses,
        dim: a.dim,
        terms_per_student: a.terms,
        courses_per_term: a.courses_per_term,
        noise: a.noise,
        prerequisites: None,
        seed: a.seed,
        decay: a.decay,
        scale: a.scale,
    };
    let synthetic = generate(&spec, a.generator)?;
    write_outputs(&synthetic, &a.out_dir)?;
    println!("records: {}", synthetic.dataset.len());
    println!("clamped: {}", synthetic.clamped);
    if let Some(mass) = synthetic.prereq_mass {
        println!("prerequisite_mass: {mass}");
    }
    Ok(())
}

/// Context of the student's record of `course`, or of a hypothetical record
/// in the term after their last one.
fn explain_context(
    dataset: &Dataset,
    vocab: &Vocabulary,
    student: &str,
    course: &str,
    need_student: bool,
) -> Result<PredictionContext> {
    let records = dataset
        .student_records(student)
        .ok_or_else(|| Error::UnknownEntity {
            kind: "student",
            id: student.to_string(),
        })?;
    if let Some(idx) = dataset.find(student, course) {
        return dataset.context(idx, vocab, need_student);
    }
    let target = vocab.course(course).ok_or_else(|| Error::UnknownEntity {
        kind: "course",
        id: course.to_string(),
    })?;
    let next = records.last().map_or(1, |r| r.term + 1);
    Ok(PredictionContext {
        student: vocab.student(student),
        target,
        prior: records
            .iter()
            .filter_map(|r| {
                Some(PriorCourse {
                    course: vocab.course(&r.course)?,
                    grade: r.centered,
                    gap: next - r.term,
                })
            })
            .collect(),
        concurrent: Vec::new(),
    })
}

/// `section<TAB>course<TAB>weight` rows by descending weight, zero weights
/// omitted.
pub fn attention_table(
    model: &Model,
    vocab: &Vocabulary,
    ctx: &PredictionContext,
) -> Result<String> {
    let kind = model.kind();
    if !kind.is_attentive() {
        return Err(Error::Config(format!(
            "{kind} has no attention weights to explain"
        )));
    }
    let trace = model.forward(ctx)?;
    let mut out = String::from("section\tcourse\tweight\n");
    let mut section = |name: &str, courses: Vec<usize>, weights: &[f64]| {
        let mut rows: Vec<(usize, f64)> =
            courses.into_iter().zip(weights.iter().copied()).collect();
        rows.retain(|(_, w)| *w > 0.0);
        rows.sort_by(|a, b| b.1.total_cmp(&a.1));
        for (c, w) in rows {
            let _ = writeln!(out, "{name}\t{}\t{w}", vocab.courses()[c]);
        }
    };
    if let Some(a) = trace.prior_attention() {
        section(
            "prior",
            ctx.prior.iter().map(|p| p.course).collect(),
            &a.weights,
        );
    }
    if let Some(a) = trace.concurrent_attention() {
        section("concurrent", ctx.concurrent.clone(), &a.weights);
    }
    let _ = writeln!(
        out,
        "# prediction\t{}\t{}",
        vocab.courses()[ctx.target],
        trace.prediction
    );
    Ok(out)
}

fn cmd_explain(a: &ExplainCmd) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    if !ck.model.kind().is_attentive() {
        return Err(Error::Config(format!(
            "{} has no attention weights to explain",
            ck.model.kind()
        )));
    }
    let dataset = load(&a.data)?;
    let ctx = explain_context(
        &dataset,
        &ck.vocab,
        &a.student,
        &a.course,
        ck.model.kind().uses_students(),
    )?;
    if ctx.prior.is_empty() {
        return Err(Error::Contract(format!(
            "student {} has no known courses before {}",
            a.student, a.course
        )));
    }
    let table = attention_table(&ck.model, &ck.vocab, &ctx)?;
    match &a.out_dir {
        Some(dir) => {
            create_dir(dir)?;
            write(&dir.join("attention.tsv"), &table)?;
        }
        None => print!("{table}"),
    }
    Ok(())
}
