//! Command implementations behind the `arrn` binary.

use std::fmt::Display;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use arrn_core::fusion::{argmax, eval_sample_seed, evaluate, fuse};
use arrn_core::gradcheck::{self, LARGE_MODEL_PARAMS};
use arrn_core::model::stream_forward;
use arrn_core::skeleton::{generate_synthetic, load_dataset, save_dataset, SynthOptions};
use arrn_core::train::EpochRecord;
use arrn_core::{
    Model, ModelConfig, OpKind, SkeletonFrame, SkeletonSequence, StreamKind, TrainReport, Trainer,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "arrn",
    version,
    about = "Two-stream attentional recurrent relational network for skeleton action recognition"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled synthetic dataset.
    Synth(SynthArgs),
    /// Train one or both streams and write the model and a report.
    Train(TrainArgs),
    /// Report per-stream and fused accuracy of a model on a dataset.
    Eval(EvalArgs),
    /// Print class probabilities for every sequence in a file.
    Predict(PredictArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Sequences per class.
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[arg(long, default_value_t = 5)]
    pub joints: usize,
    #[arg(long, default_value_t = 6)]
    pub min_frames: usize,
    #[arg(long, default_value_t = 12)]
    pub max_frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Standard deviation of per-coordinate Gaussian noise.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StreamChoice {
    Joint,
    Line,
    Both,
}

impl StreamChoice {
    pub fn kinds(self) -> Vec<StreamKind> {
        match self {
            StreamChoice::Joint => vec![StreamKind::Joint],
            StreamChoice::Line => vec![StreamKind::Line],
            StreamChoice::Both => StreamKind::BOTH.to_vec(),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config file, or `preset:NAME` for a bundled preset.
    #[arg(long)]
    pub config: String,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Directory receiving model.json and report.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = StreamChoice::Both)]
    pub stream: StreamChoice,
    /// Freeze the attention mask at ones.
    #[arg(long)]
    pub no_attention: bool,
    /// Overrides the config's rng_seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also write per-sample probabilities as JSON.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// JSON-lines sequences; the label field is optional.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// TOML config file or `preset:NAME`; defaults to the tiny preset.
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Corrupt the backward rule of one operation (negative control).
    #[arg(long, hide = true, value_parser = parse_op)]
    pub corrupt_grad: Option<OpKind>,
}

fn parse_op(s: &str) -> Result<OpKind, String> {
    OpKind::from_name(s).ok_or_else(|| {
        let names: Vec<_> = OpKind::ALL.iter().map(|o| o.name()).collect();
        format!(
            "unknown operation `{s}`; expected one of {}",
            names.join(", ")
        )
    })
}

/// A failed command: message for stderr plus the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn failure(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<arrn_core::Error> for CliError {
    fn from(e: arrn_core::Error) -> Self {
        CliError::failure(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            // The reader went away; nothing useful left to report.
            return CliError {
                code: 0,
                message: String::new(),
            };
        }
        CliError::failure(e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

fn at_path<T, E: Display>(path: &Path, r: Result<T, E>) -> CliResult<T> {
    r.map_err(|e| CliError::failure(format!("{}: {e}", path.display())))
}

fn require_file(path: &Path) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::failure(format!(
            "{}: no such file",
            path.display()
        )))
    }
}

/// Runs a parsed command, writing its report to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Predict(a) => cmd_predict(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
    }
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> CliResult {
    let data = generate_synthetic(&SynthOptions {
        classes: args.classes,
        samples_per_class: args.samples,
        joints: args.joints,
        min_frames: args.min_frames,
        max_frames: args.max_frames,
        noise: args.noise,
        seed: args.seed,
    })?;
    at_path(&args.out, save_dataset(&args.out, &data))?;
    writeln!(
        out,
        "wrote {} sequences to {}",
        data.len(),
        args.out.display()
    )?;
    Ok(())
}

fn load_config(source: &str) -> CliResult<ModelConfig> {
    let path = Path::new(source);
    if !source.starts_with("preset:") {
        require_file(path)?;
    }
    at_path(path, ModelConfig::load(path))
}

fn load_data(path: &Path, config: &ModelConfig) -> CliResult<Vec<SkeletonSequence>> {
    require_file(path)?;
    at_path(path, load_dataset(path, &config.dataset_spec()))
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn write_epoch_table(out: &mut dyn Write, record: &EpochRecord) -> std::io::Result<()> {
    writeln!(
        out,
        "{:<8} {:>12} {:>10} {:>10} {:>12}",
        "stream", "train loss", "train acc", "val acc", "lr"
    )?;
    for kind in StreamKind::BOTH {
        if let Some(s) = record.stream(kind) {
            writeln!(
                out,
                "{:<8} {:>12.6} {:>10} {:>10} {:>12e}",
                kind.name(),
                s.loss,
                pct(s.train_accuracy),
                pct(s.val_accuracy),
                s.learning_rate
            )?;
        }
    }
    if let Some(f) = &record.fused {
        writeln!(
            out,
            "{:<8} {:>12} {:>10} {:>10} {:>12}",
            "fused",
            "-",
            pct(f.train_accuracy),
            pct(f.val_accuracy),
            "-"
        )?;
    }
    Ok(())
}

/// Trains, writes `model.json` and `report.json` under `--out` and
/// returns the report.
pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> CliResult<TrainReport> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.rng_seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if args.no_attention {
        config.attention = false;
    }
    config.validate()?;
    let train = load_data(&args.train, &config)?;
    let val = load_data(&args.val, &config)?;
    let streams = args.stream.kinds();

    let mut trainer = Trainer::new(&config, &streams, &train, &val)?;
    for _ in 0..config.epochs {
        let record = trainer.run_epoch()?;
        if !args.quiet {
            let summary: Vec<String> = StreamKind::BOTH
                .iter()
                .filter_map(|&k| {
                    record.stream(k).map(|s| {
                        format!(
                            "{} loss {:.4} train {} val {}",
                            k.name(),
                            s.loss,
                            pct(s.train_accuracy),
                            pct(s.val_accuracy)
                        )
                    })
                })
                .collect();
            eprintln!(
                "epoch {:>4}/{}: {}",
                record.epoch,
                config.epochs,
                summary.join(" | ")
            );
        }
    }
    let (model, report) = trainer.finish()?;

    at_path(&args.out, fs::create_dir_all(&args.out))?;
    let model_path = args.out.join("model.json");
    let report_path = args.out.join("report.json");
    at_path(&model_path, model.save(&model_path))?;
    at_path(&report_path, fs::write(&report_path, report.to_json()))?;

    writeln!(
        out,
        "trained {} epoch(s), attention {}",
        report.epochs.len(),
        if config.attention { "on" } else { "off" }
    )?;
    if let Some(last) = report.epochs.last() {
        write_epoch_table(out, last)?;
    }
    for sel in &report.selected {
        writeln!(
            out,
            "{} stream keeps epoch {} (val {})",
            sel.stream,
            sel.epoch,
            pct(sel.val_accuracy)
        )?;
    }
    if let Some(w) = &report.fusion {
        writeln!(out, "fusion weights: alpha = {} beta = {}", w.alpha, w.beta)?;
    }
    writeln!(out, "model written to {}", model_path.display())?;
    writeln!(out, "report written to {}", report_path.display())?;
    Ok(report)
}

fn load_model(path: &Path) -> CliResult<Model> {
    require_file(path)?;
    at_path(path, Model::load(path))
}

/// Summary line printed by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub samples: usize,
    pub alpha: f64,
    pub beta: f64,
    pub joint_accuracy: Option<f64>,
    pub line_accuracy: Option<f64>,
    pub fused_accuracy: Option<f64>,
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> CliResult {
    let model = load_model(&args.model)?;
    let data = load_data(&args.data, &model.config)?;
    if data.is_empty() {
        return Err(CliError::failure(format!(
            "{}: dataset is empty",
            args.data.display()
        )));
    }
    let eval = evaluate(&model, &data, model.config.alpha, model.config.beta)?;
    let summary = EvalSummary {
        samples: eval.samples,
        alpha: eval.alpha,
        beta: eval.beta,
        joint_accuracy: eval.joint_accuracy,
        line_accuracy: eval.line_accuracy,
        fused_accuracy: eval.fused_accuracy,
    };
    writeln!(
        out,
        "{}",
        serde_json::to_string(&summary).expect("summary serializes")
    )?;
    writeln!(out, "{:<8} {:>10}", "stream", "accuracy")?;
    for (name, acc) in [
        ("joint", eval.joint_accuracy),
        ("line", eval.line_accuracy),
        ("fused", eval.fused_accuracy),
    ] {
        if let Some(acc) = acc {
            writeln!(out, "{name:<8} {:>10}", pct(acc))?;
        }
    }
    if let Some(path) = &args.output {
        let json = serde_json::to_string_pretty(&eval).expect("evaluation serializes") + "\n";
        at_path(path, fs::write(path, json))?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct PredictInput {
    #[serde(default)]
    label: Option<usize>,
    frames: Vec<SkeletonFrame>,
}

/// One line of `predict` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub probabilities: Vec<f64>,
    pub prediction: usize,
}

fn read_predict_inputs(path: &Path, joints: usize) -> CliResult<Vec<PredictInput>> {
    require_file(path)?;
    let file = at_path(path, fs::File::open(path))?;
    let mut inputs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = at_path(path, line)?;
        if line.trim().is_empty() {
            continue;
        }
        let fail =
            |msg: String| CliError::failure(format!("{}: line {}: {msg}", path.display(), i + 1));
        let input: PredictInput = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
        if input.frames.is_empty() {
            return Err(fail("sequence has no frames".into()));
        }
        for (t, f) in input.frames.iter().enumerate() {
            if f.num_joints() != joints {
                return Err(fail(format!(
                    "frame {t}: expected {joints} joints, found {}",
                    f.num_joints()
                )));
            }
            if !f.is_finite() {
                return Err(fail(format!("frame {t}: non-finite coordinate")));
            }
        }
        inputs.push(input);
    }
    Ok(inputs)
}

pub fn cmd_predict(args: &PredictArgs, out: &mut dyn Write) -> CliResult {
    let model = load_model(&args.model)?;
    let config = &model.config;
    let inputs = read_predict_inputs(&args.input, config.joints)?;
    if inputs.is_empty() {
        return Err(CliError::failure(format!(
            "{}: no sequences",
            args.input.display()
        )));
    }
    for (index, input) in inputs.into_iter().enumerate() {
        let seq = SkeletonSequence {
            label: input.label.unwrap_or(0),
            frames: input.frames,
        };
        let seed = eval_sample_seed(config.rng_seed, index);
        let probs: Vec<Vec<f64>> = model
            .streams()
            .map(|p| stream_forward(&seq, p, config, seed))
            .collect::<arrn_core::Result<_>>()?;
        let probabilities = match probs.as_slice() {
            [single] => single.clone(),
            [joint, line] => fuse(joint, line, config.alpha, config.beta)?,
            _ => return Err(CliError::failure("model has no streams")),
        };
        let p = Prediction {
            index,
            label: input.label,
            prediction: argmax(&probabilities),
            probabilities,
        };
        writeln!(
            out,
            "{}",
            serde_json::to_string(&p).expect("prediction serializes")
        )?;
    }
    Ok(())
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> CliResult {
    let config = match &args.config {
        Some(source) => load_config(source)?,
        None => ModelConfig::tiny(),
    };
    if !(args.epsilon > 0.0 && args.epsilon.is_finite()) {
        return Err(CliError {
            code: EXIT_USAGE,
            message: format!("--epsilon must be positive, got {}", args.epsilon),
        });
    }
    let mut passed = true;
    for kind in StreamKind::BOTH {
        let check =
            gradcheck::check_stream(&config, kind, args.seed, args.epsilon, args.corrupt_grad)?;
        if check.params > LARGE_MODEL_PARAMS {
            eprintln!(
                "warning: {kind} stream has {} parameters; a full finite-difference check will be slow",
                check.params
            );
        }
        writeln!(
            out,
            "{kind} stream: {} parameters, loss {:.6}",
            check.params, check.loss
        )?;
        for g in &check.groups {
            let status = if g.max_rel_error <= gradcheck::TOLERANCE {
                "ok"
            } else {
                "FAIL"
            };
            writeln!(
                out,
                "  {:<28} {:>6} {:>12.3e}  {status}",
                g.name, g.count, g.max_rel_error
            )?;
        }
        writeln!(out, "  max relative error {:.3e}", check.max_rel_error())?;
        passed &= check.passed(gradcheck::TOLERANCE);
    }
    writeln!(
        out,
        "gradient check {} (epsilon {:e}, tolerance {:e})",
        if passed { "passed" } else { "FAILED" },
        args.epsilon,
        gradcheck::TOLERANCE
    )?;
    if passed {
        Ok(())
    } else {
        Err(CliError::failure("gradient check failed"))
    }
}
