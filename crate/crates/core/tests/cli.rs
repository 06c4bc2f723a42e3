mod common;

use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use lenbench::report::{read_csv, read_json, read_plotdata};

fn lenbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lenbench"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn markov_spec() -> String {
    format!("markov:{}", common::model_path().display())
}

#[test]
fn compare_prints_delta_table_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (json, csv) = (dir.path().join("r.json"), dir.path().join("r.csv"));
    let out = lenbench(&[
        "compare",
        "--corpus",
        s(&common::corpus_path()),
        "--backend",
        &markov_spec(),
        "--lengths",
        "1024,2048",
        "--window",
        "1024",
        "--out-json",
        s(&json),
        "--out-csv",
        s(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let table: Vec<&str> = stdout
        .lines()
        .skip_while(|l| !l.starts_with("model"))
        .collect();
    assert_eq!(table.len(), 4, "{stdout}");
    let report = read_json(&json).unwrap();
    assert_eq!(report.records.len(), 4);
    assert_eq!(report.deltas.as_ref().unwrap().len(), 2);
    assert_eq!(report.manifest.config["command"], "compare");
    assert_eq!(
        report.manifest.corpus_fingerprint.as_ref().unwrap().len(),
        64
    );
    assert_eq!(read_csv(&csv).unwrap().len(), 4);
}

#[test]
fn exit_codes_by_error_class() {
    assert_eq!(code(&lenbench(&["score", "--no-such-flag"])), 1);
    assert_eq!(code(&lenbench(&["--help"])), 0);
    let corpus = common::corpus_path();
    let out = lenbench(&[
        "score",
        "--corpus",
        s(&corpus),
        "--backend",
        "remote:http://127.0.0.1:1",
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let out = lenbench(&[
        "score",
        "--corpus",
        s(&corpus),
        "--backend",
        &markov_spec(),
        "--lengths",
        "100000",
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus too small"));
    let out = lenbench(&["score", "--corpus", s(&corpus), "--backend", "warp:x"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    let json = dir.path().join("r.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "corpus": common::corpus_path(),
            "backend": markov_spec(),
            "window-sizes": [16, 64],
            "lengths": [512],
        })
        .to_string(),
    )
    .unwrap();
    let plot = dir.path().join("plot.csv");
    let out = lenbench(&[
        "sweep-window",
        "--config",
        s(&config),
        "--window-sizes",
        "32,128,512",
        "--out-plot",
        s(&plot),
        "--out-json",
        s(&json),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let (x, rows) = read_plotdata(&plot).unwrap();
    assert_eq!(x, "window_size");
    assert_eq!(
        rows.iter().map(|r| r.x).collect::<Vec<_>>(),
        vec![32, 128, 512]
    );

    // the echoed options re-run the same experiment
    let report = read_json(&json).unwrap();
    let echoed = dir.path().join("echo.json");
    std::fs::write(&echoed, report.manifest.config["options"].to_string()).unwrap();
    let json2 = dir.path().join("r2.json");
    let out = lenbench(&[
        "sweep-window",
        "--config",
        s(&echoed),
        "--out-json",
        s(&json2),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        read_json(&json2).unwrap().data_section(),
        report.data_section()
    );
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn fit_serve_and_compare_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m1.json");
    let out = lenbench(&[
        "fit-markov",
        "--corpus",
        s(&common::corpus_path()),
        "-k",
        "1",
        "--out",
        s(&model),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let mut child = Command::new(env!("CARGO_BIN_EXE_lenbench"))
        .args(["serve", "--model", s(&model), "--bind", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let server = Server(child);
    let url = line
        .trim()
        .strip_prefix("listening on ")
        .expect("address line")
        .to_string();

    let run = |backend: &str, name: &str| {
        let path = dir.path().join(name);
        let out = lenbench(&[
            "compare",
            "--corpus",
            s(&common::corpus_path()),
            "--backend",
            backend,
            "--lengths",
            "256,1024",
            "--window",
            "256",
            "--parallelism",
            "4",
            "--out-json",
            s(&path),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        read_json(&path).unwrap()
    };
    let direct = run(&format!("markov:{}", model.display()), "direct.json");
    let remote = run(&format!("remote:{url}"), "remote.json");
    drop(server);
    assert_eq!(direct.data_section(), remote.data_section());
}

#[test]
fn record_then_replay_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let corpus = common::corpus_path();
    let common_args = [
        "--corpus",
        s(&corpus),
        "--protocol",
        "sliding",
        "--window",
        "64",
        "--stride",
        "32",
        "--lengths",
        "512",
    ];
    let mut rec = vec!["record-trace", "--run", "score", "--trace-out", s(&trace)];
    rec.extend(common_args);
    let markov = markov_spec();
    rec.extend(["--backend", &markov, "--out-json", s(&a)]);
    let out = lenbench(&rec);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let replay_spec = format!("trace:{}", trace.display());
    let mut rep = vec!["score"];
    rep.extend(common_args);
    rep.extend(["--backend", &replay_spec, "--out-json", s(&b)]);
    let out = lenbench(&rep);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        read_json(&a).unwrap().data_section(),
        read_json(&b).unwrap().data_section()
    );

    // a different protocol asks for contexts the trace never saw
    let out = lenbench(&[
        "score",
        "--corpus",
        s(&common::corpus_path()),
        "--backend",
        &replay_spec,
        "--lengths",
        "512",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("context hash"));
}

#[test]
fn generate_writes_loadable_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("g.jsonl");
    let out = lenbench(&[
        "generate",
        "--model",
        s(&common::model_path()),
        "--tokens",
        "3000",
        "--doc-len",
        "1000",
        "--seed",
        "5",
        "--out",
        s(&out_path),
    ]);
    assert_eq!(code(&out), 0);
    let corpus =
        lenbench::corpus::Corpus::load(&out_path, "jsonl-tokens".parse().unwrap()).unwrap();
    assert_eq!(corpus.documents.len(), 3);
    assert_eq!(corpus.total_tokens(), 3000);
    assert_eq!(corpus.vocab_size, 64);
}
