use std::fs;
use std::path::{Path, PathBuf};

use ragtrace::cli::{run, EXIT_FORMAT, EXIT_OK, EXIT_SEMANTIC, EXIT_USAGE};
use ragtrace::fixtures::{generate_fixture, generate_hypothesis_fixture, FixtureSpec, HypothesisFixtureSpec};
use ragtrace::scoring::{parse_score_reports, ScoreReport};
use serde_json::Value;
use tempfile::TempDir;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn fx(name: &str) -> String {
    fixtures().join(name).display().to_string()
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn ragtrace(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(
        std::iter::once("ragtrace").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    Run {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

/// A small detection corpus on disk: (dir, traces path, embeddings path).
fn corpus(n: usize) -> (TempDir, String, String) {
    let dir = tempfile::tempdir().unwrap();
    let f = generate_fixture(&FixtureSpec {
        n_responses: n,
        tokens_per_response: 6,
        ..Default::default()
    });
    let t = dir.path().join("traces.jsonl");
    let e = dir.path().join("emb.lume");
    fs::write(&t, &f.traces).unwrap();
    fs::write(&e, &f.embeddings).unwrap();
    (dir, t.display().to_string(), e.display().to_string())
}

fn reports(stdout: &str) -> Vec<ScoreReport> {
    parse_score_reports(stdout.as_bytes()).unwrap()
}

#[test]
fn one_token_scores_by_hand() {
    let r = ragtrace(&[
        "score",
        "--traces",
        &fx("one_token.jsonl"),
        "--embeddings",
        &fx("toy.lume"),
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let rep = &reports(&r.stdout)[0];
    let t = &rep.per_token[0];
    // Renormalized ctx {5: 2/3, 6: 1/3} against rand {6: 1} with k(5,6) = 1/2.
    assert!((t.external - 4.0 / 9.0).abs() < 1e-15);
    assert_eq!(t.internal, 0.5);
    assert!((rep.response_score - (0.25 - 2.0 / 9.0)).abs() < 1e-15);
    assert_eq!(rep.baseline_perplexity, 2.0);
    assert_eq!(t.truncation_mass, (0.75, 0.75));
}

#[test]
fn lambda_endpoints() {
    let (_d, t, e) = corpus(5);
    let at = |l: &str| reports(&ragtrace(&["score", "--traces", &t, "--embeddings", &e, "--lambda", l]).stdout);
    for (r0, r1) in at("0").iter().zip(&at("1")) {
        for (a, b) in r0.per_token.iter().zip(&r1.per_token) {
            assert_eq!(a.hallucination, -a.external);
            assert_eq!(b.hallucination, b.internal);
        }
    }
}

#[test]
fn unnormalized_weights_change_values_not_masses() {
    let (_d, t, e) = corpus(5);
    let base = reports(&ragtrace(&["score", "--traces", &t, "--embeddings", &e]).stdout);
    let raw = reports(&ragtrace(&["score", "--traces", &t, "--embeddings", &e, "--no-renormalize"]).stdout);
    let mut changed = 0;
    for (a, b) in base.iter().zip(&raw) {
        for (x, y) in a.per_token.iter().zip(&b.per_token) {
            assert_eq!(x.truncation_mass, y.truncation_mass);
            assert_eq!(x.internal, y.internal);
            if x.external != y.external {
                changed += 1;
            }
        }
    }
    assert!(changed > 0);
}

#[test]
fn score_writes_output_file() {
    let (d, t, e) = corpus(4);
    let out = d.path().join("scores.jsonl");
    let r = ragtrace(&[
        "score",
        "--traces",
        &t,
        "--embeddings",
        &e,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.code, EXIT_OK);
    assert!(r.stdout.is_empty());
    assert_eq!(reports(&fs::read_to_string(&out).unwrap()).len(), 4);
    let leftovers = fs::read_dir(d.path()).unwrap().count();
    assert_eq!(leftovers, 3);
}

#[test]
fn validate_reports_counts() {
    let (_d, t, e) = corpus(7);
    let r = ragtrace(&["validate", "--traces", &t, "--embeddings", &e]);
    assert_eq!(r.code, EXIT_OK);
    let v: Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["responses"], 7);
    assert_eq!(v["tokens"], 42);
}

#[test]
fn missing_inputs_are_usage_or_format_errors() {
    assert_eq!(
        ragtrace(&["score", "--traces", &fx("one_token.jsonl")]).code,
        EXIT_USAGE
    );
    assert_eq!(
        ragtrace(&["validate", "--traces", "/nonexistent/x.jsonl"]).code,
        EXIT_FORMAT
    );
    assert_eq!(
        ragtrace(&["score", "--kernel", "rbf", "--traces", &fx("one_token.jsonl")]).code,
        EXIT_USAGE
    );
    assert_eq!(ragtrace(&["--version"]).code, EXIT_OK);
}

#[test]
fn missing_dist_rand_is_semantic() {
    let dir = tempfile::tempdir().unwrap();
    let line = fs::read_to_string(fixtures().join("one_token.jsonl")).unwrap();
    let t = dir.path().join("t.jsonl");
    fs::write(&t, line.replace(r#","dist_rand":[[6,0.75]]"#, "")).unwrap();
    let r = ragtrace(&[
        "score",
        "--traces",
        t.to_str().unwrap(),
        "--embeddings",
        &fx("toy.lume"),
    ]);
    assert_eq!(r.code, EXIT_SEMANTIC);
    assert!(r.stderr.contains("token 0"), "{}", r.stderr);
}

#[test]
fn evaluate_separable_corpus() {
    let (_d, t, e) = corpus(60);
    let r = ragtrace(&["evaluate", "--traces", &t, "--embeddings", &e]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let v: Value = serde_json::from_str(&r.stdout).unwrap();
    assert!(v["auroc"].as_f64().unwrap() >= 0.95);
    assert_eq!(v["lambda"], 0.5);
    assert_eq!(v["kernel"], "cosine");
    assert_eq!(v["errors"].as_array().unwrap().len(), 0);
    assert_eq!(v["trace_digests"][&t].as_str().unwrap().len(), 64);
}

#[test]
fn evaluate_from_scores_and_label_file() {
    let (d, t, e) = corpus(30);
    let scores = d.path().join("s.jsonl");
    assert_eq!(
        ragtrace(&[
            "score",
            "--traces",
            &t,
            "--embeddings",
            &e,
            "--out",
            scores.to_str().unwrap()
        ])
        .code,
        0
    );
    let direct: Value =
        serde_json::from_str(&ragtrace(&["evaluate", "--traces", &t, "--embeddings", &e]).stdout).unwrap();

    let labels = d.path().join("labels.jsonl");
    let f = generate_fixture(&FixtureSpec {
        n_responses: 30,
        tokens_per_response: 6,
        ..Default::default()
    });
    let rows: String = f
        .labels
        .iter()
        .map(|(id, y)| format!("{{\"response_id\":\"{id}\",\"label\":{y}}}\n"))
        .collect();
    fs::write(&labels, rows).unwrap();
    let r = ragtrace(&[
        "evaluate",
        "--scores",
        scores.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let v: Value = serde_json::from_str(&r.stdout).unwrap();
    for k in ["auroc", "auprc", "pcc", "f1_opt", "threshold_opt"] {
        assert_eq!(v[k], direct[k], "{k}");
    }
    assert!(v["scores_digest"].is_string());
}

#[test]
fn all_positive_labels_surface_auroc_error() {
    let (d, t, e) = corpus(10);
    let f = generate_fixture(&FixtureSpec {
        n_responses: 10,
        tokens_per_response: 6,
        ..Default::default()
    });
    let labels = d.path().join("pos.jsonl");
    let rows: String = f
        .labels
        .iter()
        .map(|(id, _)| format!("{{\"response_id\":\"{id}\",\"label\":true}}\n"))
        .collect();
    fs::write(&labels, rows).unwrap();
    let r = ragtrace(&[
        "evaluate",
        "--traces",
        &t,
        "--embeddings",
        &e,
        "--labels",
        labels.to_str().unwrap(),
    ]);
    assert_eq!(r.code, EXIT_SEMANTIC);
    let v: Value = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(v["auprc"], 1.0);
    assert!(v["auroc"].is_null());
    let errors = v["errors"].as_array().unwrap();
    assert!(errors.iter().any(|e| e.as_str().unwrap().starts_with("auroc")));
}

#[test]
fn malformed_label_file() {
    let (d, t, e) = corpus(3);
    let labels = d.path().join("bad.jsonl");
    fs::write(&labels, "{\"response_id\":\"x\",\"label\":\"yes\"}\n").unwrap();
    let r = ragtrace(&[
        "evaluate",
        "--traces",
        &t,
        "--embeddings",
        &e,
        "--labels",
        labels.to_str().unwrap(),
    ]);
    assert_eq!(r.code, EXIT_FORMAT);
    assert!(r.stderr.contains("line 1"));
}

fn csv_rows(s: &str) -> Vec<Vec<String>> {
    s.lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn lambda_sweep_has_nine_rows() {
    let (_d, t, e) = corpus(20);
    let r = ragtrace(&["ablate", "--sweep", "lambda", "--traces", &t, "--embeddings", &e]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    assert!(r
        .stdout
        .starts_with("sweep,setting,n_responses,auroc,auprc,pcc,f1_opt\n"));
    let rows = csv_rows(&r.stdout);
    assert_eq!(rows.len(), 9);
    let settings: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(
        settings,
        ["0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9"]
    );
    assert!(rows.iter().all(|r| r[4].parse::<f64>().is_ok()));

    let eval: Value =
        serde_json::from_str(&ragtrace(&["evaluate", "--traces", &t, "--embeddings", &e]).stdout).unwrap();
    assert_eq!(rows[4][3].parse::<f64>().unwrap(), eval["auroc"].as_f64().unwrap());
}

#[test]
fn kernel_sweep_has_six_rows() {
    let (_d, t, e) = corpus(20);
    let r = ragtrace(&["ablate", "--sweep", "kernel", "--traces", &t, "--embeddings", &e]);
    let settings: Vec<String> = csv_rows(&r.stdout).into_iter().map(|r| r[1].clone()).collect();
    assert_eq!(settings, ["cosine", "rbf_0.5", "rbf_0.7", "rbf_1", "rbf_2", "rbf_3"]);
}

#[test]
fn noise_tag_sweep_groups_by_tag_then_file() {
    let (d, t, e) = corpus(12);
    let text = fs::read_to_string(&t).unwrap();
    let (head, tail): (Vec<&str>, Vec<&str>) = {
        let lines: Vec<&str> = text.lines().collect();
        (lines[..6].to_vec(), lines[6..].to_vec())
    };
    let tagged: String = head
        .iter()
        .map(|l| l.replace("\"meta\":{", "\"meta\":{\"noise_tag\":\"remove30\",") + "\n")
        .collect();
    let a = d.path().join("tagged.jsonl");
    let b = d.path().join("plain.jsonl");
    fs::write(&a, tagged).unwrap();
    fs::write(&b, tail.join("\n") + "\n").unwrap();
    let r = ragtrace(&[
        "ablate",
        "--sweep",
        "noise-tag",
        "--traces",
        a.to_str().unwrap(),
        "--traces",
        b.to_str().unwrap(),
        "--embeddings",
        &e,
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let rows = csv_rows(&r.stdout);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][1], "remove30");
    assert_eq!(rows[0][2], "6");
    assert_eq!(rows[1][1], b.display().to_string());
}

#[test]
fn unknown_sweep_is_usage_error() {
    let r = ragtrace(&["ablate", "--sweep", "temperature", "--traces", &fx("one_token.jsonl")]);
    assert_eq!(r.code, EXIT_USAGE);
    assert!(!r.stderr.is_empty());
}

#[test]
fn config_file_and_flag_precedence() {
    let (d, t, e) = corpus(4);
    let conf = d.path().join("run.conf");
    fs::write(&conf, format!("traces = {t}\nembeddings = {e}\nlambda = 0\n")).unwrap();
    let from_file = reports(&ragtrace(&["score", "--config", conf.to_str().unwrap()]).stdout);
    assert_eq!(from_file[0].lambda, 0.0);
    let flagged = reports(&ragtrace(&["score", "--config", conf.to_str().unwrap(), "--lambda", "1"]).stdout);
    assert_eq!(flagged[0].lambda, 1.0);

    fs::write(&conf, "colour = blue\n").unwrap();
    assert_eq!(
        ragtrace(&["score", "--config", conf.to_str().unwrap()]).code,
        EXIT_USAGE
    );
}

#[test]
fn hypotheses_report() {
    let dir = tempfile::tempdir().unwrap();
    let f = generate_hypothesis_fixture(&HypothesisFixtureSpec {
        prompts_per_task: 5,
        tokens_per_response: 4,
        ..Default::default()
    });
    let t = dir.path().join("h.jsonl");
    let e = dir.path().join("h.lume");
    fs::write(&t, &f.traces).unwrap();
    fs::write(&e, &f.embeddings).unwrap();
    let r = ragtrace(&[
        "hypotheses",
        "--traces",
        t.to_str().unwrap(),
        "--embeddings",
        e.to_str().unwrap(),
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let v: Vec<Value> = serde_json::from_str(&r.stdout).unwrap();
    let names: Vec<&str> = v.iter().map(|h| h["hypothesis"].as_str().unwrap()).collect();
    assert_eq!(names, ["H1", "H2", "H3", "H4"]);
    for h in &v {
        assert_eq!(h["status"], "tested");
        assert!(h["t_stat"].as_f64().unwrap() > 0.0);
    }

    let r = ragtrace(&[
        "hypotheses",
        "--traces",
        t.to_str().unwrap(),
        "--embeddings",
        e.to_str().unwrap(),
        "--unit",
        "response",
    ]);
    let v: Vec<Value> = serde_json::from_str(&r.stdout).unwrap();
    assert_eq!(v[0]["n_a"], 15);
}

#[test]
fn fixture_command_writes_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fx");
    let r = ragtrace(&[
        "fixture",
        "--responses",
        "8",
        "--tokens",
        "3",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.code, EXIT_OK, "{}", r.stderr);
    let v = ragtrace(&[
        "validate",
        "--traces",
        out.join("traces.jsonl").to_str().unwrap(),
        "--embeddings",
        out.join("embeddings.lume").to_str().unwrap(),
    ]);
    assert_eq!(v.code, EXIT_OK);
    assert_eq!(fs::read_to_string(out.join("labels.jsonl")).unwrap().lines().count(), 8);
}
