//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 2 for invalid input or configuration, 3 when a run aborts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autodiff::Tensor;
use crate::data::{apply_shift, load_csv, make_blobs, save_csv, write_csv, DomainDataset, ShiftSpec};
use crate::dependency::{alpha_sweep, log_coefficient_capped, sample_complexity, ComplexityInputs, DiscreteJoint};
use crate::error::{Error, Result};
use crate::hsic::hsic_biased;
use crate::kernels::{Bandwidth, KernelConfig};
use crate::training::{run_experiment, write_outputs, ExperimentConfig, Summary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_ABORT: i32 = 3;

/// Environment variable that replaces the seed list of `train` configs.
pub const SEED_ENV: &str = "FHA_LAB_SEED";

#[derive(Debug, Parser)]
#[command(name = "fha-lab", version, about = "Few-shot hypothesis adaptation laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate or transform datasets as CSV.
    #[command(subcommand)]
    Data(DataCommand),
    /// Biased HSIC between two equally long CSV feature files.
    Hsic(HsicArgs),
    /// Log-coefficient of a joint probability table.
    Logcoef(LogcoefArgs),
    /// Unlabeled and labeled sample sizes, up to the constants c1 and c2.
    Complexity(ComplexityArgs),
    /// Run an experiment config over all its seeds.
    Train(TrainArgs),
    /// Tabulate every summary JSON in a directory.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Gaussian blobs with means on a circle of radius 4.
    MakeBlobs(MakeBlobsArgs),
    /// Scale, rotate (first two dims) and translate a dataset.
    Shift(ShiftArgs),
}

#[derive(Debug, Args)]
pub struct MakeBlobsArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Samples per class.
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Standard deviation of the per-class Gaussian noise.
    #[arg(long, default_value_t = 0.6)]
    pub spread: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ShiftArgs {
    /// Input dataset CSV.
    #[arg(long)]
    pub input: PathBuf,
    /// Rotation of the first two dimensions, in radians.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub angle: f64,
    /// Comma-separated translation, padded with zeros.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub offset: Vec<f64>,
    /// Comma-separated positive scale factors (one shared, or one per dim).
    #[arg(long, value_delimiter = ',')]
    pub scale: Vec<f64>,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HsicArgs {
    /// First feature CSV (dataset format, or a header plus numeric columns).
    pub x: PathBuf,
    /// Second feature CSV with the same number of rows.
    pub y: PathBuf,
    /// Fixed kernel bandwidth; the median heuristic when absent.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Value added to each gram diagonal. Training uses 1e-6.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    /// Print the square root of the estimate instead.
    #[arg(long)]
    pub sqrt: bool,
}

#[derive(Debug, Args)]
pub struct LogcoefArgs {
    /// CSV with one column per coordinate and the probability last; an
    /// optional header row is skipped.
    pub table: PathBuf,
    /// Maximum ratio evaluations per log-influence.
    #[arg(long, default_value_t = crate::dependency::DEFAULT_ENUMERATION_CAP)]
    pub cap: u64,
}

#[derive(Debug, Args)]
pub struct ComplexityArgs {
    /// Target error, in (0, 1).
    #[arg(long)]
    pub epsilon: f64,
    /// Failure probability, in (0, 1).
    #[arg(long)]
    pub delta: f64,
    /// Log-coefficient of the unlabeled sample, below 0.5.
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    /// VC dimension of the compatibility-induced class.
    #[arg(long)]
    pub vc_dim: f64,
    /// Compatibility defect of the optimal hypothesis, in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    pub t: f64,
    /// Expected number of splits by sufficiently compatible hypotheses.
    #[arg(long, default_value_t = 1.0)]
    pub split_count: f64,
    /// Constant of the confidence term.
    #[arg(long, default_value_t = 1.0)]
    pub c1: f64,
    /// Constant of the capacity term.
    #[arg(long, default_value_t = 1.0)]
    pub c2: f64,
    /// Also print a CSV sweep over comma-separated alpha values
    /// (default 0, 0.05, ..., 0.45).
    #[arg(
        long,
        num_args = 0..=1,
        value_delimiter = ',',
        default_missing_value = "0,0.05,0.1,0.15,0.2,0.25,0.3,0.35,0.4,0.45"
    )]
    pub sweep: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for metrics CSVs and the summary JSON.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Seeds run in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory holding summary JSON files.
    pub dir: PathBuf,
    /// Where to write accuracy_grid.csv and diversity.csv; defaults to DIR.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and executes the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(cli.command, &mut stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NumericAbort { .. } | Error::NonFiniteGradient { .. } | Error::Degenerate(_) => EXIT_ABORT,
        _ => EXIT_INVALID,
    }
}

pub fn execute(command: Command, out: &mut dyn std::io::Write) -> Result<()> {
    match command {
        Command::Data(DataCommand::MakeBlobs(a)) => {
            let ds = make_blobs(a.classes, a.per_class, a.dim, a.spread, a.seed)?;
            emit_dataset(&ds, a.out.as_deref(), out)
        }
        Command::Data(DataCommand::Shift(a)) => {
            let ds = load_csv(&a.input, None)?;
            let shift = ShiftSpec::Composite {
                angle: a.angle,
                offset: a.offset,
                factors: a.scale,
            };
            let shifted = apply_shift(&ds, &shift)?;
            emit_dataset(&shifted, a.out.as_deref(), out)
        }
        Command::Hsic(a) => cmd_hsic(&a, out),
        Command::Logcoef(a) => {
            let joint = read_joint(&a.table)?;
            let v = log_coefficient_capped(&joint, a.cap)?;
            writeln!(out, "{}", sig12(v)).map_err(stdout_err)
        }
        Command::Complexity(a) => cmd_complexity(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Report(a) => cmd_report(&a.dir, a.out.as_deref(), out),
    }
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn emit_dataset(ds: &DomainDataset, path: Option<&Path>, out: &mut dyn std::io::Write) -> Result<()> {
    match path {
        Some(p) => save_csv(ds, p),
        None => write_csv(ds, out).map_err(stdout_err),
    }
}

/// `v` with 12 significant digits in positional notation.
pub fn sig12(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (11 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Feature matrix from a dataset CSV, or from any headered all-numeric CSV.
fn read_features(path: &Path) -> Result<Tensor> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            row: 0,
            message: e.to_string(),
        })?;
    let header = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    if header.iter().any(|h| h == "label") {
        return Ok(load_csv(path, None)?.features);
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            row: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let row = rec
            .iter()
            .map(|c| {
                c.trim().parse::<f64>().map_err(|_| Error::Csv {
                    path: path.to_path_buf(),
                    row: line,
                    message: format!("non-numeric cell `{c}`"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            row: 2,
            message: "no data rows".into(),
        });
    }
    Tensor::from_rows(&rows)
}

fn cmd_hsic(a: &HsicArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let x = read_features(&a.x)?;
    let y = read_features(&a.y)?;
    if x.rows() != y.rows() {
        return Err(Error::invalid(format!(
            "{} has {} rows but {} has {}",
            a.x.display(),
            x.rows(),
            a.y.display(),
            y.rows()
        )));
    }
    let cfg = KernelConfig {
        bandwidth: a.sigma.map_or(Bandwidth::MEDIAN, Bandwidth::Fixed),
        jitter: a.jitter,
    };
    cfg.validate()?;
    let v = hsic_biased(&x, &y, &cfg)?.value;
    let v = if a.sqrt { v.sqrt() } else { v };
    writeln!(out, "{}", sig12(v)).map_err(stdout_err)
}

fn read_joint(path: &Path) -> Result<DiscreteJoint> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            row: 0,
            message: e.to_string(),
        })?;
    let mut rows = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k + 1;
        let rec = rec.map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            row: line,
            message: e.to_string(),
        })?;
        let cells: Vec<&str> = rec.iter().map(str::trim).collect();
        let bad = |m: String| Error::Csv {
            path: path.to_path_buf(),
            row: line,
            message: m,
        };
        if cells.len() < 2 {
            return Err(bad("need at least one coordinate and a probability".into()));
        }
        let (coords, p) = cells.split_at(cells.len() - 1);
        let parsed: std::result::Result<Vec<usize>, _> = coords.iter().map(|c| c.parse::<usize>()).collect();
        let prob = p[0].parse::<f64>();
        match (parsed, prob) {
            (Ok(a), Ok(p)) => rows.push((a, p)),
            _ if line == 1 => continue,
            _ => {
                return Err(bad(format!(
                    "expected integer coordinates and a probability, got {cells:?}"
                )))
            }
        }
    }
    DiscreteJoint::from_rows(&rows)
}

fn cmd_complexity(a: &ComplexityArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let inputs = ComplexityInputs {
        epsilon: a.epsilon,
        delta: a.delta,
        alpha: a.alpha,
        vc_dim: a.vc_dim,
        t: a.t,
        split_count: a.split_count,
        c1: a.c1,
        c2: a.c2,
    };
    let sizes = sample_complexity(&inputs)?;
    let mut text = format!(
        "m_u = {}\nm_l = {}\n(up to the constants c1 = {}, c2 = {})\n",
        sizes.unlabeled, sizes.labeled, a.c1, a.c2
    );
    if let Some(alphas) = &a.sweep {
        text.push_str("alpha,m_u,m_l\n");
        for (alpha, s) in alpha_sweep(&inputs, alphas)? {
            text.push_str(&format!("{alpha},{},{}\n", s.unlabeled, s.labeled));
        }
    }
    out.write_all(text.as_bytes()).map_err(stdout_err)
}

fn cmd_train(a: &TrainArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Ok(raw) = std::env::var(SEED_ENV) {
        let seed = raw
            .trim()
            .parse::<u64>()
            .map_err(|_| Error::config(SEED_ENV, format!("not an unsigned integer: `{raw}`")))?;
        cfg.seeds = vec![seed];
    }
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    let runs = run_experiment(&cfg, a.jobs)?;
    let (summary, written) = write_outputs(&runs, &a.out)?;
    let mut text = format!(
        "{} m_l={} accuracy {}±{} over {} seed(s)\n",
        summary.method,
        summary.labeled_per_class,
        summary.accuracy.mean,
        summary.accuracy.std,
        summary.seeds.len()
    );
    for p in written {
        text.push_str(&format!("wrote {}\n", p.display()));
    }
    out.write_all(text.as_bytes()).map_err(stdout_err)
}

/// Every `summary_*.json` directly inside `dir`, sorted by method then m_l.
pub fn collect_summaries(dir: &Path) -> Result<Vec<Summary>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut summaries = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with("summary_") && name.ends_with(".json") {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            summaries.push(serde_json::from_str::<Summary>(&text)?);
        }
    }
    if summaries.is_empty() {
        return Err(Error::invalid(format!("no summary JSON files in {}", dir.display())));
    }
    summaries.sort_by(|a, b| (a.method.name(), a.labeled_per_class).cmp(&(b.method.name(), b.labeled_per_class)));
    Ok(summaries)
}

fn cell(mean: f64, std: f64) -> String {
    format!("{mean}±{std}")
}

fn cmd_report(dir: &Path, out_dir: Option<&Path>, out: &mut dyn std::io::Write) -> Result<()> {
    let summaries = collect_summaries(dir)?;
    let out_dir = out_dir.unwrap_or(dir);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let shots: Vec<usize> = {
        let mut v: Vec<usize> = summaries.iter().map(|s| s.labeled_per_class).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut grid: BTreeMap<&str, BTreeMap<usize, String>> = BTreeMap::new();
    for s in &summaries {
        grid.entry(s.method.name())
            .or_default()
            .insert(s.labeled_per_class, cell(s.accuracy.mean, s.accuracy.std));
    }
    let mut csv_text = String::from("method");
    for m in &shots {
        csv_text.push_str(&format!(",ml{m}"));
    }
    csv_text.push('\n');
    let mut table = format!("{:<24}", "method");
    for m in &shots {
        table.push_str(&format!(" | {:<44}", format!("m_l={m}")));
    }
    table.push('\n');
    for (method, cells) in &grid {
        csv_text.push_str(method);
        table.push_str(&format!("{method:<24}"));
        for m in &shots {
            let c = cells.get(m).cloned().unwrap_or_default();
            csv_text.push_str(&format!(",{c}"));
            table.push_str(&format!(" | {c:<44}"));
        }
        csv_text.push('\n');
        table.push('\n');
    }
    let grid_path = out_dir.join("accuracy_grid.csv");
    std::fs::write(&grid_path, &csv_text).map_err(|e| Error::io(&grid_path, e))?;

    let mut div = String::from("method,labeled_per_class,diversity_semantic,diversity_raw\n");
    for s in &summaries {
        let f = |st: &Option<crate::training::Stat>| st.as_ref().map(|x| cell(x.mean, x.std)).unwrap_or_default();
        div.push_str(&format!(
            "{},{},{},{}\n",
            s.method,
            s.labeled_per_class,
            f(&s.diversity_semantic),
            f(&s.diversity_raw)
        ));
    }
    let div_path = out_dir.join("diversity.csv");
    std::fs::write(&div_path, &div).map_err(|e| Error::io(&div_path, e))?;
    out.write_all(table.as_bytes()).map_err(stdout_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(sig12(0.1548181), "0.154818100000");
        assert_eq!(sig12(400.0), "400.000000000");
        assert_eq!(sig12(0.0), "0");
        assert_eq!(sig12(2f64.ln()), "0.693147180560");
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
