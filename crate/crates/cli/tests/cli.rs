mod common;

use std::path::Path;

use common::{fixture, run, s, tree};
use slidescout_core::engine::RunReport;
use slidescout_core::slide::SyntheticSlideSpec;

/// Writes the fixture spec and generates it under `dir/slide`.
fn fixture_slide(dir: &Path) -> std::path::PathBuf {
    let spec = dir.join("spec.json");
    std::fs::write(&spec, serde_json::to_string_pretty(&SyntheticSlideSpec::fixture()).unwrap()).unwrap();
    let slide = dir.join("slide");
    let (code, out, err) = run(&["synth", s(&spec), "--out", s(&slide)]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("wrote slide fixture (2048x1536, 3 levels, 2 lesion foci)"), "{out}");
    slide
}

#[test]
fn synth_from_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let slide = dir.path().join("s");
    let (code, out, _) = run(&["synth", "--random", "5", "--width", "1024", "--height", "768", "-o", s(&slide)]);
    assert_eq!(code, 0);
    assert!(out.contains("synthetic-0005 (1024x768"), "{out}");
    assert!(slide.join("manifest.json").is_file());
    assert!(slide.join("truth.json").is_file());
}

#[test]
fn synth_reads_toml_specs_and_honours_the_seed_flag() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(&spec, toml::to_string(&SyntheticSlideSpec::random(2, 1024, 1024)).unwrap()).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run(&["synth", s(&spec), "-o", s(&a)]).0, 0);
    assert_eq!(run(&["synth", s(&spec), "-o", s(&b), "--seed", "99"]).0, 0);
    let level0 = |p: &Path| tree(&p.join("level_0"));
    assert_ne!(level0(&a), level0(&b));
}

#[test]
fn synth_rejects_bad_specs() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    let mut bad = SyntheticSlideSpec::fixture();
    bad.tissue[0].x1 = 9000;
    std::fs::write(&spec, serde_json::to_string(&bad).unwrap()).unwrap();
    let (code, _, err) = run(&["synth", s(&spec), "-o", s(&dir.path().join("x"))]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error:"), "{err}");
    let (code, _, err) = run(&["synth", s(&dir.path().join("missing.json")), "-o", s(&dir.path().join("y"))]);
    assert_eq!(code, 2);
    assert!(err.contains("cannot read"), "{err}");
}

#[test]
fn explore_writes_every_output_and_leaves_the_slide_alone() {
    let dir = tempfile::tempdir().unwrap();
    let slide = fixture_slide(dir.path());
    let before = tree(&slide);
    let out = dir.path().join("run");
    let (code, stdout, err) = run(&["explore", s(&slide), "-o", s(&out)]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.starts_with("fixture: adenocarcinoma (High confidence)"), "{stdout}");
    for f in ["trace.jsonl", "report.md", "report.json", "thumbnail.png"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let report: RunReport = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.diagnosis.unwrap().primary_diagnosis, "adenocarcinoma");
    let thumb = image::open(out.join("thumbnail.png")).unwrap();
    assert_eq!((thumb.width(), thumb.height()), (896, 672));
    assert_eq!(before, tree(&slide));
}

#[test]
fn same_invocation_gives_the_same_output_tree() {
    let dir = tempfile::tempdir().unwrap();
    let slide = fixture_slide(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert_eq!(run(&["explore", s(&slide), "-o", s(out), "--seed", "3"]).0, 0);
    }
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let slide = fixture_slide(dir.path());
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "max_rounds = 1\nfan_out = 1\nclinical_context = \"65-year-old, colon biopsy\"\n").unwrap();
    let out = dir.path().join("run");
    let (code, _, err) = run(&["explore", s(&slide), "-c", s(&config), "-o", s(&out), "--fan-out", "2"]);
    assert_eq!(code, 0, "{err}");
    let trace = std::fs::read_to_string(out.join("trace.jsonl")).unwrap();
    let init: serde_json::Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    let cfg = &init["payload"]["config"];
    assert_eq!((cfg["max_rounds"].as_u64(), cfg["fan_out"].as_u64()), (Some(1), Some(2)));
    assert_eq!(init["payload"]["clinical_context"], "65-year-old, colon biopsy");
    assert_eq!(cfg["clock"], "logical");
    assert_eq!(init["wall_time"], 0);
}

#[test]
fn explicit_system_clock_is_kept() {
    let dir = tempfile::tempdir().unwrap();
    let slide = fixture_slide(dir.path());
    let out = dir.path().join("run");
    assert_eq!(run(&["explore", s(&slide), "-o", s(&out), "--clock", "system"]).0, 0);
    let trace = std::fs::read_to_string(out.join("trace.jsonl")).unwrap();
    let init: serde_json::Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    assert!(init["wall_time"].as_u64().unwrap() > 1_600_000_000_000);
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let slide = fixture_slide(dir.path());
    let out = dir.path().join("run");
    let (code, _, err) = run(&["explore", s(&slide), "-o", s(&out), "--fan-out", "0"]);
    assert_eq!(code, 2);
    assert!(err.contains("fan_out must be at least 1"), "{err}");

    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "max_round = 3\n").unwrap();
    let (code, _, err) = run(&["explore", s(&slide), "-c", s(&config), "-o", s(&out)]);
    assert_eq!(code, 2);
    assert!(err.contains("unknown field `max_round`"), "{err}");

    let (code, _, err) = run(&["explore", s(&slide), "-o", s(&slide.join("out"))]);
    assert_eq!(code, 2);
    assert!(err.contains("inside the slide directory"), "{err}");
    assert!(!slide.join("out").exists());

    let (code, _, _) = run(&["explore", s(&dir.path().join("nowhere")), "-o", s(&out)]);
    assert_eq!(code, 2);
    assert!(!out.exists());
}

#[test]
fn aborted_runs_exit_with_1_and_keep_their_trace() {
    let dir = tempfile::tempdir().unwrap();
    let slide = fixture_slide(dir.path());
    let config = dir.path().join("chaos.toml");
    std::fs::write(&config, "backend = \"chaos\"\nfailure_rate = 0.9\nmax_retries = 0\nretry_base_delay_ms = 0\n")
        .unwrap();
    let out = dir.path().join("run");
    let (code, _, err) = run(&["explore", s(&slide), "-c", s(&config), "-o", s(&out)]);
    assert_eq!(code, 1, "{err}");
    assert!(err.contains("run aborted"), "{err}");
    let report = std::fs::read_to_string(out.join("report.json")).unwrap();
    assert!(report.contains("\"status\": \"aborted\""), "{report}");
    assert_eq!(run(&["replay", s(&out.join("trace.jsonl")), s(&slide)]).0, 0);
}

#[test]
fn unreachable_endpoint_aborts_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let slide = fixture_slide(dir.path());
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let endpoint = format!("http://127.0.0.1:{port}/v1/chat/completions");
    let config = dir.path().join("http.toml");
    std::fs::write(
        &config,
        format!(
            "backend = \"http\"\npolicy_endpoint = \"{endpoint}\"\ncaptioner_endpoint = \"{endpoint}\"\n\
             max_retries = 0\ntimeout_secs = 2.0\n"
        ),
    )
    .unwrap();
    let out = dir.path().join("run");
    let (code, _, err) = run(&["explore", s(&slide), "-c", s(&config), "-o", s(&out)]);
    assert_eq!(code, 1, "{err}");
    assert!(err.contains(&format!("127.0.0.1:{port}")), "{err}");
    let (code, stdout, _) = run(&["replay", s(&out.join("trace.jsonl")), s(&slide)]);
    assert_eq!(code, 0);
    assert!(stdout.contains("structure and views checked only"), "{stdout}");
}

#[test]
fn replay_accepts_an_untouched_run() {
    let dir = tempfile::tempdir().unwrap();
    let slide = fixture_slide(dir.path());
    let out = dir.path().join("run");
    assert_eq!(run(&["explore", s(&slide), "-o", s(&out)]).0, 0);
    let before = tree(&out);
    let (code, stdout, err) = run(&["replay", s(&out.join("trace.jsonl")), s(&slide)]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("replay ok"), "{stdout}");
    assert_eq!(before, tree(&out));
}

#[test]
fn replay_flags_an_edited_report() {
    let dir = tempfile::tempdir().unwrap();
    let slide = fixture_slide(dir.path());
    let out = dir.path().join("run");
    assert_eq!(run(&["explore", s(&slide), "-o", s(&out)]).0, 0);
    let path = out.join("report.json");
    let edited = std::fs::read_to_string(&path).unwrap().replace("adenocarcinoma", "melanoma");
    std::fs::write(&path, edited).unwrap();
    let (code, _, err) = run(&["replay", s(&out.join("trace.jsonl")), s(&slide)]);
    assert_eq!(code, 1);
    assert!(err.contains("differs from the regenerated report"), "{err}");
}

#[test]
fn replay_flags_an_edited_trace() {
    let dir = tempfile::tempdir().unwrap();
    let slide = fixture_slide(dir.path());
    let out = dir.path().join("run");
    assert_eq!(run(&["explore", s(&slide), "-o", s(&out)]).0, 0);
    let path = out.join("trace.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.swap(1, 2);
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let (code, _, err) = run(&["replay", s(&path), s(&slide)]);
    assert_eq!(code, 1);
    assert!(err.contains("mismatch:"), "{err}");

    std::fs::write(&path, "{not json\n").unwrap();
    assert_eq!(run(&["replay", s(&path), s(&slide)]).0, 2);
    assert_eq!(run(&["replay", s(&out.join("none.jsonl")), s(&slide)]).0, 2);
}

#[test]
fn eval_prints_the_confidence_strata() {
    let (code, out, err) = run(&["eval", s(&fixture("confidence_outcomes.jsonl"))]);
    assert_eq!(code, 0, "{err}");
    let line = |name: &str| out.lines().find(|l| l.starts_with(name)).unwrap_or_else(|| panic!("{out}")).to_string();
    assert!(line("top1 ").contains(" 0.860 "), "{out}");
    assert!(line("top1_high_confidence").contains(" 0.906 "), "{out}");
    assert!(line("top1_low_confidence").contains(" 0.778 "), "{out}");
    assert!(line("top1_high_confidence").contains("n=96"));
    assert!(line("top1_low_confidence").contains("n=54"));
    let p: f64 = line("high_vs_low_confidence").split("p=").nth(1).unwrap()[..6].parse().unwrap();
    assert!(p < 0.05, "{p}");
}

#[test]
fn eval_top3_and_output_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("ev");
    let (code, out, _) = run(&["eval", s(&fixture("confidence_outcomes.jsonl")), "--k", "3", "-o", s(&out_dir)]);
    assert_eq!(code, 0);
    assert!(out.starts_with("top3 "), "{out}");
    let csv = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("metric,point,ci_low,ci_high,n,seed"));
    assert!(csv.lines().any(|l| l.starts_with("top1_high_confidence,0.906250,")), "{csv}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("results.json")).unwrap()).unwrap();
    assert_eq!(json["metrics"].as_array().unwrap().len(), 3);
    assert_eq!(json["tests"][0]["name"], "high_vs_low_confidence");
}

#[test]
fn eval_is_reproducible_and_seeded() {
    let f = fixture("confidence_outcomes.jsonl");
    let a = run(&["eval", s(&f), "--seed", "4", "--replicates", "300", "--permutations", "500"]);
    let b = run(&["eval", s(&f), "--seed", "4", "--replicates", "300", "--permutations", "500"]);
    let c = run(&["eval", s(&f), "--seed", "5", "--replicates", "300", "--permutations", "500"]);
    assert_eq!(a, b);
    assert_ne!(a.1, c.1);
}

#[test]
fn eval_paired_tests() {
    let f = fixture("confidence_outcomes.jsonl");
    let (code, out, _) = run(&["eval", s(&f), s(&f), "--permutations", "200"]);
    assert_eq!(code, 0);
    assert!(out.lines().any(|l| l.starts_with("paired_top1") && l.contains("p=1.0000")), "{out}");

    let (code, _, err) = run(&["eval", s(&f), s(&fixture("outcomes_short.jsonl"))]);
    assert_eq!(code, 2);
    assert!(err.contains("length mismatch"), "{err}");
}

#[test]
fn eval_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    let good = std::fs::read_to_string(fixture("confidence_outcomes.jsonl")).unwrap();
    let first = good.lines().next().unwrap();
    std::fs::write(&bad, format!("{first}\n{{\"case_id\": 3}}\n")).unwrap();
    let (code, _, err) = run(&["eval", s(&bad)]);
    assert_eq!(code, 2);
    assert!(err.contains("line 2"), "{err}");

    let (code, _, err) = run(&["eval", s(&fixture("confidence_outcomes.jsonl")), "--k", "2"]);
    assert_eq!(code, 2);
    assert!(err.contains("k must be 1 or 3"), "{err}");

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "\n").unwrap();
    let (code, _, err) = run(&["eval", s(&empty)]);
    assert_eq!(code, 2);
    assert!(err.contains("no outcome records"), "{err}");
}

#[test]
fn stats_summarizes_traces() {
    let dir = tempfile::tempdir().unwrap();
    let slide = fixture_slide(dir.path());
    for (name, budget) in [("r1", "24"), ("r2", "2")] {
        let out = dir.path().join("runs").join(name);
        assert_eq!(run(&["explore", s(&slide), "-o", s(&out), "--explorer-budget", budget]).0, 0);
    }
    let pattern = format!("{}/runs/*/trace.jsonl", dir.path().display());
    let (code, out, err) = run(&["stats", &pattern]);
    assert_eq!(code, 0, "{err}");
    assert!(out.starts_with("2 traces (2 completed)"), "{out}");
    let (code, out, _) = run(&["stats", &pattern, "--json"]);
    assert_eq!(code, 0);
    let summary: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(summary["traces"], 2);
    assert!(summary["total"]["mean"].as_f64().unwrap() > 0.0);

    let (code, _, err) = run(&["stats", &format!("{}/nothing/*.jsonl", dir.path().display())]);
    assert_eq!(code, 2);
    assert!(err.contains("no traces match"), "{err}");
}
