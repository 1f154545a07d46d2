use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn wordalign(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wordalign"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn check_fixture(name: &str) {
    let dir = fixtures().join(name);
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().to_str().unwrap();
    let args = read(dir.join("args.txt"));
    let mut argv: Vec<&str> = vec!["extract"];
    argv.extend(args.split_whitespace());
    argv.extend(["--corpus", "corpus.jsonl", "--out", out_dir, "--workers", "2"]);
    ok(&wordalign(&dir, &argv));
    assert_eq!(
        read(tmp.path().join("alignments.txt")),
        read(dir.join("expected/alignments.txt")),
        "fixture {name}"
    );
}

#[test]
fn fixture_copy_model() {
    check_fixture("copy");
}

#[test]
fn fixture_split_words_with_config_file() {
    check_fixture("split");
}

#[test]
fn fixture_precomputed_embeddings() {
    check_fixture("embeddings");
}

fn copy_dir() -> PathBuf {
    fixtures().join("copy")
}

#[test]
fn config_file_and_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# extraction\nthreshold = 0.3\nlayer = 1\nskip_bad = false\n").unwrap();
    let out = tmp.path().join("out");
    let res = wordalign(
        &copy_dir(),
        &[
            "extract",
            "--model",
            "model.acwt",
            "--corpus",
            "corpus.jsonl",
            "--config",
            cfg.to_str().unwrap(),
            "--layer",
            "2",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    ok(&res);
    let echo = read(out.join("config.txt"));
    assert!(echo.contains("layer = 2\n"), "{echo}");
    assert!(echo.contains("threshold = 0.3\n"), "{echo}");
    assert!(echo.contains("model = model.acwt\n"), "{echo}");
    assert!(!echo.contains("out ="), "{echo}");
    assert!(!echo.contains("config ="), "{echo}");
}

#[test]
fn layer_defaults_to_model_and_is_echoed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    ok(&wordalign(
        &copy_dir(),
        &["extract", "--model", "model.acwt", "--corpus", "corpus.jsonl", "--out", out],
    ));
    let echo = read(tmp.path().join("config.txt"));
    assert!(echo.contains("layer = 2\n"), "{echo}");
    assert!(echo.contains("threshold = 0.1\n"), "{echo}");
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "treshold = 0.2\n").unwrap();
    let res = wordalign(
        &copy_dir(),
        &[
            "extract",
            "--model",
            "model.acwt",
            "--corpus",
            "corpus.jsonl",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            tmp.path().to_str().unwrap(),
        ],
    );
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("treshold"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = copy_dir();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    for argv in [
        vec!["extract", "--corpus", "corpus.jsonl", "--out", out],
        vec!["extract", "--model", "model.acwt", "--corpus", "corpus.jsonl", "--out", out, "--bogus"],
        vec!["extract", "--model", "model.acwt", "--corpus", "corpus.jsonl", "--out", out, "--layer", "9"],
        vec!["eval", "--pred", "x", "--gold", "y", "--gold-index-base", "2", "--out", out],
        vec!["train", "--model", "model.acwt", "--corpus", "corpus.jsonl", "--out", out, "--keep-best"],
    ] {
        let res = wordalign(&dir, &argv);
        assert_eq!(res.status.code(), Some(2), "{argv:?}: {}", String::from_utf8_lossy(&res.stderr));
    }
}

#[test]
fn data_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c.jsonl");
    fs::write(
        &corpus,
        r#"{"id":"a","src":["x"],"tgt":["y"],"src_ids":[99],"tgt_ids":[5],"src_words":[0],"tgt_words":[0]}"#,
    )
    .unwrap();
    let res = wordalign(
        &copy_dir(),
        &[
            "extract",
            "--model",
            "model.acwt",
            "--corpus",
            corpus.to_str().unwrap(),
            "--out",
            tmp.path().join("o").to_str().unwrap(),
        ],
    );
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn format_errors_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let junk = tmp.path().join("junk.acwt");
    fs::write(&junk, b"NOPE0000").unwrap();
    let res = wordalign(
        &copy_dir(),
        &[
            "extract",
            "--model",
            junk.to_str().unwrap(),
            "--corpus",
            "corpus.jsonl",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert_eq!(res.status.code(), Some(4), "{}", String::from_utf8_lossy(&res.stderr));

    let corpus = tmp.path().join("c.jsonl");
    fs::write(&corpus, "{\"id\": \"a\", \"src\": [\n").unwrap();
    let res = wordalign(
        &copy_dir(),
        &[
            "extract",
            "--model",
            "model.acwt",
            "--corpus",
            corpus.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
    );
    assert_eq!(res.status.code(), Some(4), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn numeric_errors_exit_5() {
    let tmp = tempfile::tempdir().unwrap();
    let res = wordalign(
        &copy_dir(),
        &[
            "train",
            "--model",
            "model.acwt",
            "--corpus",
            "corpus.jsonl",
            "--steps",
            "5",
            "--lr",
            "1e30",
            "--out",
            tmp.path().to_str().unwrap(),
        ],
    );
    assert_eq!(res.status.code(), Some(5), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn skip_bad_keeps_line_numbers() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c.jsonl");
    let good = r#"{"id":"g","src":["a"],"tgt":["a"],"src_ids":[5],"tgt_ids":[5],"src_words":[0],"tgt_words":[0]}"#;
    let bad = r#"{"id":"b","src":["a"],"tgt":["a"],"src_ids":[500],"tgt_ids":[5],"src_words":[0],"tgt_words":[0]}"#;
    fs::write(&corpus, format!("{good}\n{bad}\n{good}\n").replacen("\"g\"", "\"g1\"", 1)).unwrap();
    let out = tmp.path().join("o");
    let argv = [
        "extract",
        "--model",
        "model.acwt",
        "--corpus",
        corpus.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    assert_eq!(wordalign(&copy_dir(), &argv).status.code(), Some(3));

    let mut with_skip = argv.to_vec();
    with_skip.push("--skip-bad");
    ok(&wordalign(&copy_dir(), &with_skip));
    assert_eq!(read(out.join("alignments.txt")), "0-0\n\n0-0\n");
    let skipped = read(out.join("skipped.txt"));
    assert!(skipped.starts_with("b\t"), "{skipped}");
}

#[test]
fn eval_with_one_based_gold() {
    let tmp = tempfile::tempdir().unwrap();
    let pred = tmp.path().join("pred.txt");
    let gold = tmp.path().join("gold.txt");
    // 0-based pred: {0-0, 1-1, 1-2}; 1-based gold: sure {0-0, 1-1}, possible {2-2}
    fs::write(&pred, "0-0 1-1 1-2\n\n").unwrap();
    fs::write(&gold, "1-1 2-2 3?3\n1-1\n").unwrap();
    let out = tmp.path().join("o");
    let res = wordalign(
        tmp.path(),
        &[
            "eval",
            "--pred",
            "pred.txt",
            "--gold",
            "gold.txt",
            "--gold-index-base",
            "1",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    ok(&res);
    // |A|=3, |S|=3, |A∩S|=2, |A∩P|=2 -> AER = 1 - 4/6
    let csv = read(out.join("report.csv"));
    let total = csv.lines().last().unwrap();
    let aer: f64 = total.split(',').nth(1).unwrap().parse().unwrap();
    assert!((aer - (1.0 - 4.0 / 6.0)).abs() < 1e-6, "{csv}");
    assert!(read(out.join("config.txt")).contains("gold-index-base = 1\n"));

    let res = wordalign(
        tmp.path(),
        &["eval", "--pred", "pred.txt", "--gold", "gold.txt", "--out", out.to_str().unwrap()],
    );
    ok(&res);
    let csv = read(out.join("report.csv"));
    let aer: f64 = csv.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((aer - (1.0 - 4.0 / 6.0)).abs() > 1e-3, "base 0 must read the file differently");
}

#[test]
fn train_then_extract_with_adapters() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t");
    let res = wordalign(
        &copy_dir(),
        &[
            "train",
            "--model",
            "model.acwt",
            "--corpus",
            "corpus.jsonl",
            "--valid",
            "corpus.jsonl",
            "--steps",
            "3",
            "--batch-size",
            "2",
            "--validate-every",
            "2",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    ok(&res);
    assert_eq!(read(out.join("loss.csv")).lines().count(), 4);
    let validation = read(out.join("validation.csv"));
    let steps: Vec<&str> = validation.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "2", "3"]);

    let ex = tmp.path().join("x");
    ok(&wordalign(
        &copy_dir(),
        &[
            "extract",
            "--model",
            "model.acwt",
            "--adapters",
            out.join("adapters.acwt").to_str().unwrap(),
            "--corpus",
            "corpus.jsonl",
            "--out",
            ex.to_str().unwrap(),
        ],
    ));
    assert_eq!(read(ex.join("alignments.txt")).lines().count(), 4);
}

#[test]
fn analyze_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("a");
    let res = wordalign(
        &fixtures().join("split"),
        &[
            "analyze",
            "--model",
            "model.acwt",
            "--corpus",
            "corpus.jsonl",
            "--heatmaps",
            "2",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    ok(&res);
    let sweep = read(out.join("layer_sweep.csv"));
    assert_eq!(sweep.lines().count(), 1 + 4, "{sweep}");
    assert!(sweep.lines().next().unwrap().contains("de-en"));
    assert_eq!(read(out.join("rep_analysis.csv")).lines().count(), 1 + 4);
    assert!(fs::read(out.join("curves.ppm")).unwrap().starts_with(b"P6\n"));
    assert!(fs::read(out.join("heatmaps/0001.pgm")).unwrap().starts_with(b"P5\n"));
    assert!(!out.join("heatmaps/0002.pgm").exists());
    let csv = read(out.join("heatmaps/0000.csv"));
    assert_eq!(csv.lines().next().unwrap(), "\"\",\"the\",\"house\"");
}
