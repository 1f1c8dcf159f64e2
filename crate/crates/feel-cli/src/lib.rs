//! Command implementations behind the `feel` binary: experiment
//! execution, metrics persistence, algorithm comparison, and the
//! numerical verification suites.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use feel_sim::config::{Algorithm, RunConfig};
use feel_sim::report::{self, RoundReport};
use feel_sim::runner::Runner;
use feel_sim::verify::{run_suite, SuiteReport, VerifySuite};
use feel_sim::SimError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Failure modes mapped onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or inputs; exit 2.
    Config(String),
    /// A contract violation or I/O failure mid-run; exit 3.
    Runtime(String),
    /// A verification property failed; exit 1.
    VerifyFailed,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::VerifyFailed => EXIT_VERIFY_FAILED,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Runtime(msg) => write!(f, "runtime error: {msg}"),
            CliError::VerifyFailed => write!(f, "verification failed"),
        }
    }
}

fn config_stage(err: SimError) -> CliError {
    CliError::Config(err.to_string())
}

fn run_stage(err: SimError) -> CliError {
    match err {
        SimError::ContractViolation(msg) => CliError::Runtime(format!("contract violation: {msg}")),
        other => CliError::Runtime(other.to_string()),
    }
}

fn io_runtime(err: std::io::Error) -> CliError {
    CliError::Runtime(err.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsFormat {
    Csv,
    JsonLines,
}

/// Experiment provenance record, written before the run starts and
/// finalized with the end timestamp afterwards.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub started_unix: u64,
    #[serde(default)]
    pub finished_unix: Option<u64>,
    pub outputs: Vec<String>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_manifest(path: &Path, manifest: &Manifest) -> Result<(), CliError> {
    let text =
        serde_json::to_string_pretty(manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text).map_err(io_runtime)
}

fn load_config(
    config_path: &Path,
    seed_override: Option<u64>,
    max_rounds_override: Option<u64>,
) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::parse_path(config_path).map_err(config_stage)?;
    if let Some(seed) = seed_override {
        cfg.run.seed = seed;
    }
    if let Some(rounds) = max_rounds_override {
        cfg.run.max_rounds = rounds;
    }
    cfg.validate().map_err(config_stage)?;
    Ok(cfg)
}

fn metrics_file_name(format: MetricsFormat) -> &'static str {
    match format {
        MetricsFormat::Csv => "metrics.csv",
        MetricsFormat::JsonLines => "metrics.jsonl",
    }
}

fn write_metrics(
    path: &Path,
    format: MetricsFormat,
    config_hash: &str,
    reports: &[RoundReport],
) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(io_runtime)?;
    let writer = std::io::BufWriter::new(file);
    match format {
        MetricsFormat::Csv => report::write_csv(writer, config_hash, reports),
        MetricsFormat::JsonLines => report::write_jsonl(writer, config_hash, reports),
    }
    .map_err(run_stage)
}

/// Execute one configured experiment; writes `manifest.json` and a
/// per-round metrics file into `out_dir`.
pub fn cmd_run(
    config_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
    max_rounds_override: Option<u64>,
    format: MetricsFormat,
) -> Result<(), CliError> {
    let cfg = load_config(config_path, seed_override, max_rounds_override)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::Config(e.to_string()))?;

    let metrics_name = metrics_file_name(format);
    let mut manifest = Manifest {
        config_hash: cfg.hash(),
        seed: cfg.run.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: now_unix(),
        finished_unix: None,
        outputs: vec![metrics_name.to_string()],
        config: cfg.clone(),
    };
    let manifest_path = out_dir.join("manifest.json");
    write_manifest(&manifest_path, &manifest)?;

    let runner = Runner::new(cfg.clone()).map_err(config_stage)?;
    let result = runner.run().map_err(run_stage)?;
    write_metrics(
        &out_dir.join(metrics_name),
        format,
        &manifest.config_hash,
        &result.reports,
    )?;

    manifest.finished_unix = Some(now_unix());
    write_manifest(&manifest_path, &manifest)?;

    if let Some(last) = result.reports.last() {
        println!(
            "{}: {} rounds, {} resource blocks, final accuracy {:.4}",
            cfg.run.algorithm.name(),
            last.round,
            last.blocks_cum,
            last.accuracy
        );
    } else {
        println!("{}: no rounds executed", cfg.run.algorithm.name());
    }
    Ok(())
}

/// Per-algorithm totals plus accuracy sampled at shared block budgets.
#[derive(Debug, Clone, Serialize)]
pub struct CompareSummary {
    pub algorithm: String,
    pub rounds: u64,
    pub blocks: u64,
    pub final_accuracy: f64,
    /// Accuracy at each shared budget checkpoint (25/50/75/100% of the
    /// smallest per-algorithm total).
    pub accuracy_at_budget: Vec<(u64, f64)>,
}

/// Run all three algorithms under a shared seed and emit one combined
/// metrics file keyed by algorithm plus a summary table.
pub fn cmd_compare(
    config_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
    max_rounds_override: Option<u64>,
    format: MetricsFormat,
) -> Result<Vec<CompareSummary>, CliError> {
    let base = load_config(config_path, seed_override, max_rounds_override)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::Config(e.to_string()))?;

    let algorithms = [Algorithm::TcsH, Algorithm::TcsD, Algorithm::TopK];
    let metrics_name = match format {
        MetricsFormat::Csv => "metrics.csv",
        MetricsFormat::JsonLines => "metrics.jsonl",
    };
    let mut manifest = Manifest {
        config_hash: base.hash(),
        seed: base.run.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: now_unix(),
        finished_unix: None,
        outputs: vec![metrics_name.to_string(), "summary.csv".to_string()],
        config: base.clone(),
    };
    let manifest_path = out_dir.join("manifest.json");
    write_manifest(&manifest_path, &manifest)?;

    let mut all_reports: Vec<(Algorithm, Vec<RoundReport>)> = Vec::new();
    for algorithm in algorithms {
        let mut cfg = base.clone();
        cfg.run.algorithm = algorithm;
        log::info!("compare: running {}", algorithm.name());
        let runner = Runner::new(cfg).map_err(config_stage)?;
        let result = runner.run().map_err(run_stage)?;
        all_reports.push((algorithm, result.reports));
    }

    // Combined metrics keyed by algorithm.
    {
        let mut text = String::new();
        match format {
            MetricsFormat::Csv => {
                let _ = writeln!(text, "# config_hash={}", manifest.config_hash);
                let _ = writeln!(text, "algorithm,{}", report::CSV_HEADER);
                for (algorithm, reports) in &all_reports {
                    for r in reports {
                        let _ = writeln!(text, "{},{}", algorithm.name(), r.csv_line());
                    }
                }
            }
            MetricsFormat::JsonLines => {
                let _ = writeln!(text, "{{\"config_hash\":\"{}\"}}", manifest.config_hash);
                for (algorithm, reports) in &all_reports {
                    for r in reports {
                        let mut value = serde_json::to_value(r)
                            .map_err(|e| CliError::Runtime(e.to_string()))?;
                        value["algorithm"] = serde_json::Value::String(algorithm.name().into());
                        let _ = writeln!(text, "{value}");
                    }
                }
            }
        }
        fs::write(out_dir.join(metrics_name), text).map_err(io_runtime)?;
    }

    let summaries = summarize(&all_reports);
    let mut summary_csv = String::from("algorithm,rounds,blocks,final_accuracy");
    if let Some(first) = summaries.first() {
        for (budget, _) in &first.accuracy_at_budget {
            let _ = write!(summary_csv, ",acc_at_{budget}");
        }
    }
    summary_csv.push('\n');
    for s in &summaries {
        let _ = write!(
            summary_csv,
            "{},{},{},{}",
            s.algorithm, s.rounds, s.blocks, s.final_accuracy
        );
        for (_, acc) in &s.accuracy_at_budget {
            let _ = write!(summary_csv, ",{acc}");
        }
        summary_csv.push('\n');
    }
    fs::write(out_dir.join("summary.csv"), &summary_csv).map_err(io_runtime)?;

    manifest.finished_unix = Some(now_unix());
    write_manifest(&manifest_path, &manifest)?;

    println!("algorithm  rounds  blocks        final_acc");
    for s in &summaries {
        println!(
            "{:<9}  {:>6}  {:>12}  {:.4}",
            s.algorithm, s.rounds, s.blocks, s.final_accuracy
        );
    }
    Ok(summaries)
}

fn summarize(all_reports: &[(Algorithm, Vec<RoundReport>)]) -> Vec<CompareSummary> {
    let min_blocks = all_reports
        .iter()
        .filter_map(|(_, r)| r.last().map(|last| last.blocks_cum))
        .min()
        .unwrap_or(0);
    let budgets: Vec<u64> = [1u64, 2, 3, 4].iter().map(|q| min_blocks * q / 4).collect();

    all_reports
        .iter()
        .map(|(algorithm, reports)| {
            let accuracy_at_budget = budgets
                .iter()
                .map(|&b| {
                    let acc = reports
                        .iter()
                        .rfind(|r| r.blocks_cum <= b)
                        .map_or(f64::NAN, |r| r.accuracy);
                    (b, acc)
                })
                .collect();
            CompareSummary {
                algorithm: algorithm.name().to_string(),
                rounds: reports.last().map_or(0, |r| r.round),
                blocks: reports.last().map_or(0, |r| r.blocks_cum),
                final_accuracy: reports.last().map_or(f64::NAN, |r| r.accuracy),
                accuracy_at_budget,
            }
        })
        .collect()
}

/// Run one verification suite, printing a pass/fail line per property.
pub fn cmd_verify(suite: &str, seed: u64, trials: Option<u64>) -> Result<SuiteReport, CliError> {
    let suite: VerifySuite = suite.parse().map_err(config_stage)?;
    let report = run_suite(suite, seed, trials);
    for check in &report.checks {
        let tag = if check.passed { "PASS" } else { "FAIL" };
        println!(
            "[{tag}] {}::{}: {}",
            report.suite, check.name, check.details
        );
        if let Some(counterexample) = &check.counterexample {
            eprintln!("counterexample: {counterexample}");
        }
    }
    if report.passed {
        Ok(report)
    } else {
        Err(CliError::VerifyFailed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_config(dir: &Path) -> std::path::PathBuf {
        let text = r#"
[run]
algorithm = "tcs_h"
seed = 11
slot_budget = 100000
max_rounds = 2

[fleet]
n_devices = 3
h_steps = 2
batch_size = 6
eta = 0.05
digital_schedule_size = 2

[compression]
q_bits = 8
k_global = 30
k_local = 8

[channel]
m_subchannels = 4
noise_var = 1e-6
sigma_t = 5.0
p_bar_mw = 5.0

[model]
hidden_layers = [8]

[data]
source = "synthetic"
partition = "iid"
classes = 3
train_samples = 48
test_samples = 24
feature_dim = 5
separation = 3.0
"#;
        let path = dir.join("config.toml");
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn run_writes_manifest_and_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let config = example_config(dir.path());
        let out = dir.path().join("out");
        cmd_run(&config, &out, None, None, MetricsFormat::Csv).unwrap();

        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        assert!(manifest.finished_unix.is_some());
        let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert!(metrics.starts_with(&format!("# config_hash={}", manifest.config_hash)));
        // Two round rows plus hash comment and header.
        assert_eq!(metrics.lines().count(), 4);
    }

    #[test]
    fn run_rejects_invalid_config() {
        let dir = tempfile::tempdir().unwrap();
        let config = example_config(dir.path());
        let text = fs::read_to_string(&config)
            .unwrap()
            .replace("q_bits = 8", "q_bits = 1");
        fs::write(&config, text).unwrap();
        let err = cmd_run(
            &config,
            &dir.path().join("out"),
            None,
            None,
            MetricsFormat::Csv,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let config = example_config(dir.path());
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        cmd_run(&config, &out_a, None, None, MetricsFormat::Csv).unwrap();
        cmd_run(&config, &out_b, None, None, MetricsFormat::Csv).unwrap();
        let a = fs::read(out_a.join("metrics.csv")).unwrap();
        let b = fs::read(out_b.join("metrics.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn compare_emits_summary_schema() {
        let dir = tempfile::tempdir().unwrap();
        let config = example_config(dir.path());
        let out = dir.path().join("cmp");
        let summaries = cmd_compare(&config, &out, None, Some(2), MetricsFormat::Csv).unwrap();
        assert_eq!(summaries.len(), 3);
        for s in &summaries {
            assert!(s.rounds > 0);
            assert!(s.blocks > 0);
            assert!(s.final_accuracy.is_finite());
            assert_eq!(s.accuracy_at_budget.len(), 4);
        }
        let combined = fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert!(combined
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("algorithm,round,"));
        assert!(combined.contains("tcs_h,1,"));
        assert!(combined.contains("top_k,1,"));
        let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
        assert!(summary.starts_with("algorithm,rounds,blocks,final_accuracy,acc_at_"));
    }

    #[test]
    fn verify_dispatches_and_reports() {
        let report = cmd_verify("gradcheck", 99, Some(2)).unwrap();
        assert!(report.passed);
        assert!(cmd_verify("bogus", 1, None).is_err());
    }

    #[test]
    fn jsonl_metrics_carry_full_records() {
        let dir = tempfile::tempdir().unwrap();
        let config = example_config(dir.path());
        let out = dir.path().join("out");
        cmd_run(&config, &out, None, None, MetricsFormat::JsonLines).unwrap();
        let text = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
        let row: RoundReport = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        assert_eq!(row.round, 1);
        assert!(!row.power_round.is_empty());
    }
}
