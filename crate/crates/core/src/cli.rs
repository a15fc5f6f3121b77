//! Command-line front end. `main` only forwards to [`run`].

use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path as FsPath, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench::{run_bench, scaling_report, write_csv, BenchSpec, Precision};
use crate::causal::{CausalEncoderStream, CausalStream};
use crate::check::{run_checks, CheckConfig};
use crate::encoder::{forward, pooling_norms, Checkpoint, EncoderConfig, EncoderParams, Head};
use crate::error::{Error, Result};
use crate::mixer::{MixerConfig, ProjectionSet, Variant};
use crate::segment::SegmentMap;
use crate::tasks::{TaskKind, TaskSpec};
use crate::tensor::{Real, SeededRng};
use crate::train::{train, write_curve, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SUITE_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_BUDGET: i32 = 4;
pub const EXIT_IO: i32 = 5;

const EXIT_HELP: &str = "Exit status: 0 success, 1 a check suite failed, 2 usage or config error, \
3 numeric error (non-finite values, divergence), 4 benchmark memory budget exceeded, 5 i/o error.";

#[derive(Debug, Parser)]
#[command(name = "ponet", version, about = "Pooling-network token mixer: checks, benchmarks, training, streaming", after_help = EXIT_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the fused/naive, op-count, gradient and causal suites; prints a JSON report.
    Check(Common),
    /// Time mixers over a length sweep; writes CSV rows and prints fitted exponents to stderr.
    Bench(Common),
    /// Train an encoder on a synthetic task; --out receives the learning curve CSV.
    Train(Common),
    /// Stream rows (or token ids) through the causal mixer, one output line per input line.
    Stream(Common),
    /// Per-layer GA/SMP/LMP/mean activation norms of a model, as CSV.
    Norms(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config; unknown fields are rejected. Defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Floating-point width (bench and stream; the others are 64-bit only).
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Output file instead of stdout.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

/// Maps an error onto the documented exit status.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) | Error::Diverged { .. } => EXIT_NUMERIC,
        Error::Budget { .. } => EXIT_BUDGET,
        Error::Io(_) => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdin: &mut dyn Read, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { stdout.write_all(text.as_bytes()) } else { stderr.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli.command, stdin, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, stdin: &mut dyn Read, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Check(c) => cmd_check(&c, stdout, stderr),
        Command::Bench(c) => cmd_bench(&c, stdout, stderr),
        Command::Train(c) => cmd_train(&c, stdout),
        Command::Stream(c) => cmd_stream(&c, stdin, stdout),
        Command::Norms(c) => cmd_norms(&c, stdout),
    }
}

fn load_config<C: DeserializeOwned + Default>(path: Option<&FsPath>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))
        }
    }
}

fn only_f64(c: &Common, cmd: &str) -> Result<()> {
    if c.precision == Some(PrecisionArg::F32) {
        return Err(Error::config(format!("{cmd} runs at 64-bit only")));
    }
    Ok(())
}

fn with_output(out: Option<&FsPath>, stdout: &mut dyn Write, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match out {
        Some(p) => {
            let mut file = io::BufWriter::new(File::create(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?);
            f(&mut file)?;
            file.flush()?;
            Ok(())
        }
        None => f(stdout),
    }
}

fn cmd_check(c: &Common, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    only_f64(c, "check")?;
    let mut cfg: CheckConfig = load_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let report = run_checks(&cfg)?;
    for s in &report.suites {
        writeln!(stderr, "{:<12} {} ({} cases, max error {:e})", s.name, if s.passed { "ok" } else { "FAILED" }, s.cases, s.max_error)?;
    }
    with_output(c.out.as_deref(), stdout, |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)?;
        Ok(())
    })?;
    Ok(if report.passed { EXIT_OK } else { EXIT_SUITE_FAILED })
}

fn cmd_bench(c: &Common, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let mut spec: BenchSpec = load_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    if let Some(p) = c.precision {
        spec.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    let rows = run_bench(&spec, |r| {
        let _ = writeln!(stderr, "{} N={} {:.4}s", r.mixer.name(), r.length, r.median_seconds);
    })?;
    with_output(c.out.as_deref(), stdout, |w| write_csv(&rows, w))?;
    if spec.lengths.len() >= 3 {
        for fit in scaling_report(&rows)? {
            writeln!(stderr, "{} fitted exponent {:.3}", fit.mixer.name(), fit.exponent)?;
        }
    }
    Ok(EXIT_OK)
}

/// Encoder shape for `train`; vocabulary, length and classes come from the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub variant: Variant,
    pub head: Head,
    pub lmp_window: usize,
    pub share_kv: bool,
    pub dropout_rate: f64,
    pub ffn_hidden: Option<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            d: 32,
            layers: 2,
            heads: 2,
            variant: Variant::Full,
            head: Head::ClsToken,
            lmp_window: 3,
            share_kv: true,
            dropout_rate: 0.0,
            ffn_hidden: None,
        }
    }
}

impl ModelSpec {
    pub fn encoder_for(&self, task: &TaskSpec) -> EncoderConfig {
        let mixer = MixerConfig { lmp_window: self.lmp_window, share_kv: self.share_kv, ..MixerConfig::new(self.d, self.heads) }
            .with_variant(self.variant);
        EncoderConfig {
            mixer,
            head: self.head,
            dropout_rate: self.dropout_rate,
            ffn_hidden: self.ffn_hidden,
            ..EncoderConfig::new(task.vocab, task.length, self.d, self.layers, task.num_classes())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRun {
    pub task: TaskSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Where to write the trained parameters, if anywhere.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            task: TaskSpec { kind: TaskKind::SegmentMaxId, length: 64, vocab: 64, segments: 4, seed: 0 },
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            checkpoint: None,
        }
    }
}

#[derive(Serialize)]
struct TrainSummary {
    task: TaskKind,
    variant: Variant,
    seed: u64,
    steps: usize,
    final_loss: f64,
    final_accuracy: f64,
}

fn cmd_train(c: &Common, stdout: &mut dyn Write) -> Result<i32> {
    only_f64(c, "train")?;
    let mut run: TrainRun = load_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        run.train.seed = s;
    }
    let model = run.model.encoder_for(&run.task);
    let result = train(&run.task, &model, &run.train)?;
    if let Some(p) = &c.out {
        let file = File::create(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
        write_curve(&result.curve, io::BufWriter::new(file))?;
    }
    if let Some(p) = &run.checkpoint {
        Checkpoint::from_params(&model, &result.params).save(p)?;
    }
    let summary = TrainSummary {
        task: run.task.kind,
        variant: run.model.variant,
        seed: run.train.seed,
        steps: run.train.steps,
        final_loss: result.curve.last().map_or(f64::NAN, |p| p.loss),
        final_accuracy: result.final_accuracy,
    };
    serde_json::to_writer(&mut *stdout, &summary)?;
    writeln!(stdout)?;
    Ok(EXIT_OK)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    /// Each line holds one row of numbers.
    #[default]
    Rows,
    /// Each line holds one token id, fed through a causal encoder.
    Tokens,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub mode: StreamMode,
    /// Input file; stdin when absent.
    pub input: Option<PathBuf>,
    /// Rows mode: mixer settings (width inferred from the first row when absent).
    pub mixer: Option<MixerConfig>,
    /// Tokens mode: model shape for a random initialisation.
    pub model: Option<EncoderConfig>,
    /// Tokens mode: trained parameters (takes precedence over `model`).
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,
}

/// Line marking that the next row opens a new segment.
pub const SEGMENT_MARK: &str = "--";

/// Splits stream input into (row text, starts-new-segment) pairs. The first
/// row always starts a segment; blank lines and `#` comments are skipped.
pub fn parse_stream_lines<R: BufRead>(input: R) -> Result<Vec<(Vec<String>, bool)>> {
    let mut out = Vec::new();
    let mut pending = true;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if t == SEGMENT_MARK {
            pending = true;
            continue;
        }
        let fields: Vec<String> =
            t.split(|ch: char| ch == ',' || ch.is_whitespace()).filter(|f| !f.is_empty()).map(str::to_string).collect();
        if fields.is_empty() {
            return Err(Error::Input(format!("line {}: no values", i + 1)));
        }
        out.push((fields, pending));
        pending = false;
    }
    Ok(out)
}

fn parse_row<T: Real + std::str::FromStr>(fields: &[String], line: usize) -> Result<Vec<T>> {
    fields
        .iter()
        .map(|f| f.parse::<T>().map_err(|_| Error::Input(format!("row {line}: '{f}' is not a number"))))
        .collect()
}

fn write_row<T: std::fmt::Display>(w: &mut dyn Write, row: &[T]) -> Result<()> {
    let text: Vec<String> = row.iter().map(|v| v.to_string()).collect();
    writeln!(w, "{}", text.join(","))?;
    Ok(())
}

fn stream_rows<T: Real + std::str::FromStr + std::fmt::Display>(
    lines: &[(Vec<String>, bool)],
    cfg: &StreamConfig,
    w: &mut dyn Write,
) -> Result<()> {
    let Some((first, _)) = lines.first() else { return Ok(()) };
    let mixer = match &cfg.mixer {
        Some(m) => m.clone(),
        None => MixerConfig::new(first.len(), 1).with_variant(Variant::NoSsGa),
    };
    let d = mixer.d;
    let mut rng = SeededRng::new(cfg.seed);
    let params = ProjectionSet::<f64>::random_with_bias(d, mixer.share_kv, 1.0 / (d as f64).sqrt(), &mut rng).cast::<T>();
    let mut stream = CausalStream::new(params, mixer)?;
    for (i, (fields, boundary)) in lines.iter().enumerate() {
        let row = parse_row::<T>(fields, i + 1)?;
        if row.len() != d {
            return Err(Error::Input(format!("row {} has {} values, expected {d}", i + 1, row.len())));
        }
        write_row(w, &stream.step(&row, *boundary)?)?;
    }
    Ok(())
}

fn stream_tokens(lines: &[(Vec<String>, bool)], cfg: &StreamConfig, w: &mut dyn Write) -> Result<()> {
    let (model, params) = match (&cfg.checkpoint, &cfg.model) {
        (Some(p), _) => Checkpoint::load(p)?.into_params()?,
        (None, Some(m)) => {
            let params = EncoderParams::init(m, &mut SeededRng::new(cfg.seed))?;
            (m.clone(), params)
        }
        (None, None) => return Err(Error::config("tokens mode needs `model` or `checkpoint`")),
    };
    let mut stream = CausalEncoderStream::new(params, model)?;
    for (i, (fields, boundary)) in lines.iter().enumerate() {
        if fields.len() != 1 {
            return Err(Error::Input(format!("line {}: expected one token id", i + 1)));
        }
        let id: u32 = fields[0].parse().map_err(|_| Error::Input(format!("line {}: bad token id '{}'", i + 1, fields[0])))?;
        write_row(w, &stream.step(id, *boundary)?)?;
    }
    Ok(())
}

fn cmd_stream(c: &Common, stdin: &mut dyn Read, stdout: &mut dyn Write) -> Result<i32> {
    let mut cfg: StreamConfig = load_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let lines = match &cfg.input {
        Some(p) => parse_stream_lines(BufReader::new(File::open(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?))?,
        None => parse_stream_lines(BufReader::new(stdin))?,
    };
    with_output(c.out.as_deref(), stdout, |w| match (cfg.mode, c.precision) {
        (StreamMode::Rows, Some(PrecisionArg::F32)) => stream_rows::<f32>(&lines, &cfg, w),
        (StreamMode::Rows, _) => stream_rows::<f64>(&lines, &cfg, w),
        (StreamMode::Tokens, Some(PrecisionArg::F32)) => Err(Error::config("token streaming runs at 64-bit only")),
        (StreamMode::Tokens, _) => stream_tokens(&lines, &cfg, w),
    })?;
    Ok(EXIT_OK)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormsConfig {
    pub model: EncoderConfig,
    /// Trained parameters; a seeded random initialisation otherwise.
    pub checkpoint: Option<PathBuf>,
    /// Random token sequences averaged over.
    pub samples: usize,
    pub segments: usize,
    pub seed: u64,
}

impl Default for NormsConfig {
    fn default() -> Self {
        NormsConfig {
            model: EncoderConfig::new(64, 64, 32, 2, 2),
            checkpoint: None,
            samples: 8,
            segments: 4,
            seed: 0,
        }
    }
}

fn cmd_norms(c: &Common, stdout: &mut dyn Write) -> Result<i32> {
    only_f64(c, "norms")?;
    let mut cfg: NormsConfig = load_config(c.config.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if cfg.samples == 0 {
        return Err(Error::config("samples must be positive"));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let (model, params) = match &cfg.checkpoint {
        Some(p) => Checkpoint::load(p)?.into_params()?,
        None => {
            let params = EncoderParams::init(&cfg.model, &mut rng.fork(1))?;
            (cfg.model.clone(), params)
        }
    };
    let n = model.max_len;
    let seg = SegmentMap::even(n, cfg.segments)?;
    let mut runs = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let tokens: Vec<u32> = (0..n).map(|_| rng.below(model.vocab_size) as u32).collect();
        runs.push(Some(forward(&tokens, &seg, &params, &model, None)?.diagnostics()));
    }
    let rows = pooling_norms(&runs, model.mixer.heads)?;
    with_output(c.out.as_deref(), stdout, |w| {
        let mut csv = csv::Writer::from_writer(w);
        for r in &rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    })?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str], input: &str) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("ponet").chain(args.iter().copied()), &mut input.as_bytes(), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn stream_line_parsing() {
        let lines = parse_stream_lines("1, 2\n\n# c\n3 4\n--\n5,6\n".as_bytes()).unwrap();
        let flags: Vec<bool> = lines.iter().map(|l| l.1).collect();
        assert_eq!(flags, [true, false, true]);
        assert_eq!(lines[1].0, ["3", "4"]);
    }

    #[test]
    fn stream_emits_one_line_per_row() {
        let input: String = (0..10).map(|i| format!("{i},{},0.5\n", i * 2)).collect();
        let (code, out, err) = call(&["stream"], &input);
        assert_eq!(code, 0, "{err}");
        assert_eq!(out.lines().count(), 10);
        assert!(out.lines().all(|l| l.split(',').count() == 3));
        let (code32, out32, _) = call(&["stream", "--precision", "f32"], &input);
        assert_eq!(code32, 0);
        assert_eq!(out32.lines().count(), 10);
    }

    #[test]
    fn stream_rejects_ragged_rows() {
        let (code, _, err) = call(&["stream"], "1,2\n3\n");
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("expected 2"), "{err}");
    }

    #[test]
    fn unknown_flags_and_fields_are_usage_errors() {
        assert_eq!(call(&["check", "--bogus"], "").0, EXIT_USAGE);
        assert_eq!(call(&["frobnicate"], "").0, EXIT_USAGE);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"samples": 2, "colour": "red"}"#).unwrap();
        let (code, _, err) = call(&["norms", "--config", p.to_str().unwrap()], "");
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("colour"), "{err}");
        assert_eq!(call(&["train", "--precision", "f32"], "").0, EXIT_USAGE);
    }

    #[test]
    fn help_lists_every_flag() {
        let (code, out, _) = call(&["bench", "--help"], "");
        assert_eq!(code, 0);
        for flag in ["--config", "--seed", "--precision", "--out"] {
            assert!(out.contains(flag), "{flag} missing from help");
        }
        let (_, top, _) = call(&["--help"], "");
        for sub in ["check", "bench", "train", "stream", "norms"] {
            assert!(top.contains(sub));
        }
    }

    #[test]
    fn norms_rows_per_layer_and_branch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.json");
        let mut cfg = NormsConfig { samples: 2, ..Default::default() };
        cfg.model = EncoderConfig::new(16, 16, 8, 3, 2);
        std::fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
        let (code, out, err) = call(&["norms", "--config", p.to_str().unwrap()], "");
        assert_eq!(code, 0, "{err}");
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines[0], "layer,branch,value");
        assert_eq!(lines.len() - 1, 3 * 4);
        let (_, again, _) = call(&["norms", "--config", p.to_str().unwrap()], "");
        assert_eq!(out, again);
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::NonFinite("x")), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Diverged { step: 3, loss: f64::NAN }), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Budget { needed: 2, budget: 1 }), EXIT_BUDGET);
        assert_eq!(exit_code(&Error::config("x")), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Io("x".into())), EXIT_IO);
    }
}
