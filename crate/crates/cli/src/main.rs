//! `slidescout`: generate synthetic slides, explore them, replay traces and
//! summarize results.
//!
//! Exit codes: 0 success, 1 validation failure (aborted run, replay
//! mismatch), 2 I/O, parse or configuration error.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use slidescout_core::engine::{self, BackendKind, RunConfig, RunReport, REPORT_JSON};
use slidescout_core::protocol::{read_trace, Clock, Confidence, RunOutcome, TraceEvent};
use slidescout_core::slide::{generate_synthetic, SyntheticSlideSpec};
use slidescout_core::stats::{
    self, diagnosis_matches, ExplorationSummary, OutcomeRecord, ResultRow, StatResult, StatsError,
};

#[derive(Parser)]
#[command(name = "slidescout", version, about = "Agent-driven exploration of whole-slide images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic slide from a spec file or a random seed.
    Synth(SynthArgs),
    /// Explore a slide and write trace.jsonl, report.md, report.json and thumbnail.png.
    Explore(ExploreArgs),
    /// Check a recorded trace against its slide; mock runs are re-executed.
    Replay(ReplayArgs),
    /// Top-k accuracy, confidence strata and permutation tests for outcome records.
    Eval(EvalArgs),
    /// Regions viewed per magnification class over a set of traces.
    Stats(StatsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Slide spec (JSON, or TOML by extension).
    #[arg(required_unless_present = "random", conflicts_with = "random")]
    spec: Option<PathBuf>,
    /// Output slide directory.
    #[arg(long, short)]
    out: PathBuf,
    /// Generate a random slide from this seed instead of reading a spec.
    #[arg(long, value_name = "SEED")]
    random: Option<u64>,
    /// Base width and height for `--random`.
    #[arg(long, default_value_t = 4096)]
    width: u32,
    #[arg(long, default_value_t = 4096)]
    height: u32,
    /// Overrides the texture seed of the spec.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExploreArgs {
    slide: PathBuf,
    /// Flat TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_parser = parse_backend)]
    backend: Option<BackendKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_rounds: Option<u32>,
    #[arg(long)]
    fan_out: Option<usize>,
    #[arg(long)]
    explorer_budget: Option<u32>,
    /// Explorer threads; 0 means one per task of a round.
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    clinical_context: Option<String>,
    /// Event timestamps: `logical` (sequence numbers) or `system`. Defaults
    /// to logical for the deterministic backends.
    #[arg(long, value_parser = parse_clock)]
    clock: Option<Clock>,
}

#[derive(Args)]
struct ReplayArgs {
    trace: PathBuf,
    slide: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Outcome records, one JSON object per line.
    outcomes: PathBuf,
    /// Second outcome file, case-aligned with the first, for a paired test.
    compare: Option<PathBuf>,
    #[arg(long, default_value_t = 1, value_parser = parse_k)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    replicates: usize,
    #[arg(long, default_value_t = 10000)]
    permutations: usize,
    /// Directory for results.csv and results.json.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// Glob matching trace files, e.g. 'runs/*/trace.jsonl'.
    pattern: String,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

fn parse_k(s: &str) -> Result<usize, String> {
    match s {
        "1" => Ok(1),
        "3" => Ok(3),
        _ => Err(format!("k must be 1 or 3, got {s}")),
    }
}

fn parse_clock(s: &str) -> Result<Clock, String> {
    match s {
        "logical" => Ok(Clock::Logical),
        "system" => Ok(Clock::System),
        _ => Err(format!("unknown clock {s:?}; expected logical or system")),
    }
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    match s {
        "mock" => Ok(BackendKind::Mock),
        "chaos" => Ok(BackendKind::Chaos),
        "http" => Ok(BackendKind::Http),
        _ => Err(format!("unknown backend {s:?}; expected mock, chaos or http")),
    }
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { code: 2, error: e.into() }
    }
}

fn invalid(error: anyhow::Error) -> Failure {
    Failure { code: 1, error }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Explore(a) => cmd_explore(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Stats(a) => cmd_stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn is_toml(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "toml")
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let mut spec = match (a.random, &a.spec) {
        (Some(seed), _) => SyntheticSlideSpec::random(seed, a.width, a.height),
        (None, Some(path)) => {
            let text = read_text(path)?;
            if is_toml(path) {
                toml::from_str(&text).with_context(|| format!("{}", path.display()))?
            } else {
                serde_json::from_str(&text).with_context(|| format!("{}", path.display()))?
            }
        }
        (None, None) => unreachable!("clap requires a spec or --random"),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let slide = generate_synthetic(&spec, &a.out)?;
    println!(
        "wrote slide {} ({}x{}, {} levels, {} lesion foci) to {}",
        slide.slide_id(),
        slide.base_width(),
        slide.base_height(),
        slide.levels().len(),
        spec.lesions.len(),
        a.out.display()
    );
    Ok(())
}

/// File values first, then any flags given on the command line.
fn load_config(a: &ExploreArgs) -> anyhow::Result<RunConfig> {
    let (mut config, clock_in_file) = match &a.config {
        Some(path) => {
            let table: toml::Table =
                toml::from_str(&read_text(path)?).with_context(|| format!("{}", path.display()))?;
            let clock_in_file = table.contains_key("clock");
            let config: RunConfig = table.try_into().with_context(|| format!("{}", path.display()))?;
            (config, clock_in_file)
        }
        None => (RunConfig::default(), false),
    };
    if let Some(v) = a.backend {
        config.backend = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.max_rounds {
        config.max_rounds = v;
    }
    if let Some(v) = a.fan_out {
        config.fan_out = v;
    }
    if let Some(v) = a.explorer_budget {
        config.explorer_budget = v;
    }
    if let Some(v) = a.parallelism {
        config.parallelism = v;
    }
    if let Some(v) = &a.clinical_context {
        config.clinical_context = v.clone();
    }
    if let Some(v) = a.clock {
        config.clock = v;
    } else if !clock_in_file && config.backend.is_deterministic() {
        config.clock = Clock::Logical;
    }
    config.validate().map_err(|e| anyhow!("invalid configuration: {e}"))?;
    Ok(config)
}

fn cmd_explore(a: ExploreArgs) -> CmdResult {
    let config = load_config(&a)?;
    let slide_dir = fs::canonicalize(&a.slide).with_context(|| format!("cannot open {}", a.slide.display()))?;
    let out_abs = std::path::absolute(&a.out)?;
    if out_abs.starts_with(&slide_dir) {
        return Err(anyhow!("output directory {} lies inside the slide directory", a.out.display()).into());
    }
    let output = engine::run_exploration(&slide_dir, &config)?;
    engine::write_outputs(&a.out, &output).with_context(|| format!("cannot write to {}", a.out.display()))?;
    let report = output.report();
    match &output.outcome {
        RunOutcome::Completed { report: d } => {
            println!("{}: {} ({} confidence)", report.slide_id, d.primary_diagnosis, d.confidence);
            println!("differentials: {}; {}", d.differentials[0], d.differentials[1]);
            println!(
                "{} rounds, {} tasks, {} views ({} high power), {} ROIs cited",
                report.rounds,
                report.tasks_issued,
                report.views.total(),
                report.views.high,
                d.cited_rois.len()
            );
            println!("outputs in {}", a.out.display());
            Ok(())
        }
        RunOutcome::Aborted { reason } => {
            Err(invalid(anyhow!("run aborted: {reason} (trace written to {})", a.out.display())))
        }
    }
}

fn load_trace(path: &Path) -> anyhow::Result<Vec<TraceEvent>> {
    let file = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    read_trace(BufReader::new(file)).with_context(|| format!("{}", path.display()))
}

fn cmd_replay(a: ReplayArgs) -> CmdResult {
    let events = load_trace(&a.trace)?;
    let outcome = engine::replay(&events, &a.slide)?;
    let mut problems: Vec<String> = Vec::new();
    problems.extend(outcome.violations.iter().map(|v| v.to_string()));
    problems.extend(outcome.fold_error.iter().map(|e| e.to_string()));
    problems.extend(outcome.view_mismatches.iter().cloned());
    problems.extend(outcome.rerun_mismatches.iter().cloned());

    // A report.json next to the trace must match the regenerated one byte for byte.
    let stored = a.trace.parent().map(|d| d.join(REPORT_JSON)).filter(|p| p.is_file());
    if let (Some(path), Some(regenerated)) = (&stored, &outcome.report_json) {
        if read_text(path)? != *regenerated {
            problems.push(format!("{} differs from the regenerated report", path.display()));
        }
    }

    println!("{} events, {} views re-extracted", outcome.events, outcome.views_checked);
    if outcome.reexecuted {
        println!("run re-executed with the recorded configuration");
    } else {
        println!("backend is not deterministic; structure and views checked only");
    }
    if problems.is_empty() {
        println!("replay ok");
        return Ok(());
    }
    for p in &problems {
        eprintln!("mismatch: {p}");
    }
    Err(invalid(anyhow!("replay found {} problem(s)", problems.len())))
}

fn load_outcomes(path: &Path) -> anyhow::Result<Vec<OutcomeRecord>> {
    let file = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    stats::read_outcomes(BufReader::new(file)).with_context(|| format!("{}", path.display()))
}

#[derive(Serialize)]
struct TestResult {
    name: String,
    p_value: f64,
    permutations: usize,
    seed: u64,
}

#[derive(Serialize)]
struct EvalResults {
    metrics: Vec<ResultRow>,
    tests: Vec<TestResult>,
}

fn print_metric(name: &str, r: &StatResult) {
    println!("{name:<24} {:.3}  95% CI [{:.3}, {:.3}]  n={}", r.point, r.ci_low, r.ci_high, r.n);
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let records = load_outcomes(&a.outcomes)?;
    if records.is_empty() {
        return Err(anyhow!("{} holds no outcome records", a.outcomes.display()).into());
    }
    let matcher = &diagnosis_matches;
    let mut metrics = Vec::new();
    let mut tests = Vec::new();

    let topk = stats::topk_accuracy(&records, a.k, matcher, a.replicates, a.seed)?;
    print_metric(&format!("top{}", a.k), &topk);
    metrics.push(ResultRow { metric: format!("top{}", a.k), result: topk });

    let strata = stats::confidence_stratified_accuracy(&records, matcher, a.replicates, a.seed)?;
    for (label, r) in strata.iter().rev() {
        let name = format!("top1_{}_confidence", label.to_string().to_lowercase());
        print_metric(&name, r);
        metrics.push(ResultRow { metric: name, result: *r });
    }
    if strata.len() == 2 {
        let scores = |c: Confidence| {
            let stratum: Vec<OutcomeRecord> = records.iter().filter(|r| r.confidence == c).cloned().collect();
            stats::hit_scores(&stratum, 1, matcher)
        };
        let p = stats::unpaired_permutation_pvalue(
            &scores(Confidence::High),
            &scores(Confidence::Low),
            a.permutations,
            a.seed,
        )?;
        println!("{:<24} p={p:.4}  (unpaired permutation, {} permutations)", "high_vs_low_confidence", a.permutations);
        tests.push(TestResult {
            name: "high_vs_low_confidence".into(),
            p_value: p,
            permutations: a.permutations,
            seed: a.seed,
        });
    }

    if let Some(other_path) = &a.compare {
        let other = load_outcomes(other_path)?;
        if let Some(i) = records.iter().zip(&other).position(|(x, y)| x.case_id != y.case_id) {
            return Err(anyhow!(
                "case {} of {} is {:?} but {:?} in {}",
                i + 1,
                a.outcomes.display(),
                records[i].case_id,
                other[i].case_id,
                other_path.display()
            )
            .into());
        }
        let p = stats::paired_permutation_pvalue(
            &stats::hit_scores(&records, a.k, matcher),
            &stats::hit_scores(&other, a.k, matcher),
            a.permutations,
            a.seed,
        )
        .map_err(|e| match e {
            StatsError::LengthMismatch(x, y) => {
                anyhow!("length mismatch: {} has {x} records, {} has {y}", a.outcomes.display(), other_path.display())
            }
            e => e.into(),
        })?;
        let name = format!("paired_top{}", a.k);
        println!("{name:<24} p={p:.4}  (paired permutation, {} permutations)", a.permutations);
        tests.push(TestResult { name, p_value: p, permutations: a.permutations, seed: a.seed });
    }

    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        fs::write(dir.join("results.csv"), stats::results_csv(&metrics))?;
        let json = serde_json::to_string_pretty(&EvalResults { metrics, tests })?;
        fs::write(dir.join("results.json"), json + "\n")?;
    }
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> CmdResult {
    let mut paths: Vec<PathBuf> =
        glob::glob(&a.pattern).with_context(|| format!("bad pattern {:?}", a.pattern))?.collect::<Result<_, _>>()?;
    paths.sort();
    if paths.is_empty() {
        return Err(anyhow!("no traces match {:?}", a.pattern).into());
    }
    let traces = paths.iter().map(|p| load_trace(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let summary = stats::exploration_summary(&traces)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        print_summary(&summary, &traces);
    }
    Ok(())
}

fn print_summary(s: &ExplorationSummary, traces: &[Vec<TraceEvent>]) {
    let completed = traces.iter().filter(|t| RunReport::from_events(t).status == "completed").count();
    println!("{} traces ({} completed)", s.traces, completed);
    println!("regions viewed per slide, mean (sd):");
    for (name, m) in [("high (>=10x)", s.high), ("medium", s.medium), ("low (<2.5x)", s.low), ("total", s.total)] {
        println!("  {name:<13} {:>8.2} ({:.2})", m.mean, m.sd);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn backend_names() {
        assert_eq!(parse_backend("chaos"), Ok(BackendKind::Chaos));
        assert!(parse_backend("gpt").unwrap_err().contains("expected mock, chaos or http"));
    }
}
