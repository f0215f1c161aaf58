use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_e2e-dialogue"));
    c.env_remove("E2E_PORT").env_remove("E2E_CHECKPOINT").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_toy_writes_corpus_db_and_ontology() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen-toy", "--data", p(dir.path()), "--n", "5", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "5 dialogues");
    let train: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("train.json")).unwrap()).unwrap();
    assert_eq!(train["dialogues"].as_array().unwrap().len(), 5);
    let db: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("db.json")).unwrap()).unwrap();
    assert_eq!(db.as_array().unwrap().len(), 20);
    assert!(dir.path().join("ontology.json").exists());

    let again = tempfile::tempdir().unwrap();
    assert!(run(&["gen-toy", "--data", p(again.path()), "--n", "5", "--seed", "3"]).status.success());
    assert_eq!(
        std::fs::read(dir.path().join("train.json")).unwrap(),
        std::fs::read(again.path().join("train.json")).unwrap()
    );
}

#[test]
fn gen_toy_copy_ablation_writes_held_out_values() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen-toy", "--data", p(dir.path()), "--n", "20", "--copy-ablation"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let held: Vec<String> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("held_out.json")).unwrap()).unwrap();
    assert_eq!(held.len(), 4);
    let train = std::fs::read_to_string(dir.path().join("train.json")).unwrap();
    for v in &held {
        assert!(!train.contains(&format!(" {v} ")), "{v} leaked into training");
    }
    assert!(dir.path().join("test.json").exists());
}

#[test]
fn show_config_reports_sources() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("settings.toml");
    std::fs::write(&file, "[train]\nepochs = 3\nbatch_size = 5\n[serve]\nport = 1000\n").unwrap();
    let o = bin()
        .args(["--config", p(&file), "--batch-size", "7", "--show-config", "serve"])
        .env("E2E_PORT", "2000")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("train.epochs = 3  (file "), "{out}");
    assert!(out.contains("train.batch_size = 7  (flag --batch-size)"), "{out}");
    assert!(out.contains("serve.port = 2000  (env E2E_PORT)"), "{out}");
    assert!(out.contains("train.warmup_steps = 4000  (default)"), "{out}");
}

#[test]
fn bad_settings_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("settings.toml");
    std::fs::write(&file, "[model]\nheads = 3\n").unwrap();
    let o = run(&["--config", p(&file), "gradcheck"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("model.heads"), "{}", stderr(&o));

    let o = run(&["eval", "--data", p(dir.path())]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--checkpoint"), "{}", stderr(&o));

    let o = run(&["train", "--data", p(dir.path())]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("not found"), "{}", stderr(&o));
}

#[test]
fn train_eval_chat_pipeline() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    assert!(run(&["gen-toy", "--data", p(data.path()), "--n", "4"]).status.success());

    let o = run(&["train", "--data", p(data.path()), "--out", p(out.path()), "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(out.path().join("metrics.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    assert_eq!(last["epoch"], 1);
    assert!(last["loss"].as_f64().unwrap().is_finite());
    let ckpt = out.path().join("last.ckpt");
    assert!(ckpt.exists());

    let o = run(&["eval", "--data", p(data.path()), "--split", "train", "--checkpoint", p(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for key in ["success_f1", "bleu", "bspan_exact_match"] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }

    let mut child = bin()
        .args(["chat", "--data", p(data.path())])
        .env("E2E_CHECKPOINT", &ckpt)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"i want italian food\nquit\n").unwrap();
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("system: "), "{text}");
    assert!(text.contains("[bspan: "), "{text}");
}

#[test]
fn no_copynet_flag_reaches_the_model() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    assert!(run(&["gen-toy", "--data", p(data.path()), "--n", "2"]).status.success());
    let o = run(&["--no-copynet", "--show-config", "train"]);
    assert!(stdout(&o).contains("model.copy = false  (flag --no-copynet)"));
    let o = run(&["train", "--no-copynet", "--data", p(data.path()), "--out", p(out.path()), "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["eval", "--data", p(data.path()), "--split", "train", "--checkpoint", p(&out.path().join("last.ckpt"))]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn convert_camrest_writes_splits() {
    let src = tempfile::tempdir().unwrap();
    let dials: Vec<String> = (0..10)
        .map(|i| {
            format!(
                r#"{{"dial": [{{"usr": {{"transcript": "cheap food {i}", "slu": [{{"act": "inform", "slots": [["pricerange", "cheap"]]}}]}}, "sys": {{"sent": "pizza hut is cheap"}}}}]}}"#
            )
        })
        .collect();
    std::fs::write(src.path().join("dials.json"), format!("[{}]", dials.join(","))).unwrap();
    std::fs::write(
        src.path().join("db.json"),
        r#"[{"name": "pizza hut", "food": "italian", "area": "north", "pricerange": "cheap", "phone": "01223"}]"#,
    )
    .unwrap();
    std::fs::write(
        src.path().join("otgy.json"),
        r#"{"informable": {"pricerange": ["cheap"], "food": ["italian"]}, "requestable": ["phone"]}"#,
    )
    .unwrap();
    let data = tempfile::tempdir().unwrap();
    let o = run(&[
        "convert-camrest",
        "--data",
        p(data.path()),
        "--input",
        p(&src.path().join("dials.json")),
        "--source-db",
        p(&src.path().join("db.json")),
        "--source-ontology",
        p(&src.path().join("otgy.json")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "train: 6 dialogues\ndev: 2 dialogues\ntest: 2 dialogues\n");
    let train = std::fs::read_to_string(data.path().join("train.json")).unwrap();
    assert!(train.contains("name_SLOT is pricerange_SLOT"), "{train}");
    for f in ["dev.json", "test.json", "db.json", "ontology.json"] {
        assert!(data.path().join(f).exists(), "{f}");
    }
}

#[test]
fn shipped_configs_resolve() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (name, expect) in [
        ("toy.toml", "train.epochs = 200  (file "),
        ("copy-ablation.toml", "model.word_dropout = 0.3  (file "),
    ] {
        let o = run(&["--config", p(&root.join(name)), "--show-config", "train"]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        assert!(stdout(&o).contains(expect), "{name}: {}", stdout(&o));
    }
}
