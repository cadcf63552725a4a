use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 10] = [
    "--set",
    "data.sections=4",
    "--set",
    "data.size=256",
    "--set",
    "data.radius=120",
    "--set",
    "data.patch=16",
    "--set",
    "data.stride=8",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posdiffae"))
        .args(args)
        .env_remove("POSDIFFAE_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn gen(out: &Path, extra: &[&str]) {
    let mut args = vec!["gen-data", "--seed", "3", "--out", out.to_str().unwrap()];
    args.extend(SMALL);
    args.extend(extra);
    ok(&args);
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen(&a, &["--set", "data.jpeg_qf=[5]", "--set", "data.tear_fraction=0.1"]);
    gen(&b, &["--set", "data.jpeg_qf=[5]", "--set", "data.tear_fraction=0.1"]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 100);
    assert!(ta.iter().any(|(n, _)| n.ends_with("config.toml")));
    assert!(ta.iter().any(|(n, _)| n.ends_with("manifest.json")));
    assert!(ta == tb);
}

#[test]
fn train_then_classify_reports_accuracy_and_replays() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("g");
    gen(&data, &[]);
    let ds = data.join("dataset");
    let train = t.path().join("train");
    ok(&[
        "train",
        "--data",
        ds.to_str().unwrap(),
        "--out",
        train.to_str().unwrap(),
        "--set",
        "model.preset=tiny",
        "--set",
        "train.epochs=1",
    ]);
    let history = fs::read_to_string(train.join("history.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = history.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0]["total"].is_number());
    assert!(train.join("loss_curve.svg").exists());

    let model = train.join("model.safetensors");
    let cls = t.path().join("cls");
    ok(&[
        "classify",
        "--model",
        model.to_str().unwrap(),
        "--data",
        ds.to_str().unwrap(),
        "--out",
        cls.to_str().unwrap(),
    ]);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(cls.join("metrics.json")).unwrap()).unwrap();
    let acc = m["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(m["precision"].as_array().unwrap().len(), 4);

    let rep = t.path().join("replay");
    let o = ok(&[
        "replay",
        train.join("manifest.json").to_str().unwrap(),
        "--out",
        rep.to_str().unwrap(),
    ]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("identical"));
    assert_eq!(fs::read(rep.join("model.safetensors")).unwrap(), fs::read(&model).unwrap());
}

#[test]
fn replay_detects_changed_outputs() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    gen(&a, &[]);
    let path = a.join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    let first = m["outputs"].as_object().unwrap().keys().next().unwrap().clone();
    m["outputs"][&first] = serde_json::Value::String("0".repeat(64));
    fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
    let o = run(&["replay", path.to_str().unwrap(), "--out", t.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains(&format!("differs: {first}")));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["train"]).status.code(), Some(2));

    let o = run(&["gen-data", "--set", "train.epochs=0", "--out", t.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochs"));

    let o = run(&["gen-data", "--set", "data.bogus=1", "--out", t.path().join("y").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn runtime_errors_exit_1() {
    let t = tempfile::tempdir().unwrap();
    let o = run(&[
        "classify",
        "--model",
        t.path().join("missing.safetensors").to_str().unwrap(),
        "--data",
        t.path().join("missing").to_str().unwrap(),
        "--out",
        t.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));

    let busy = t.path().join("busy");
    fs::create_dir_all(&busy).unwrap();
    fs::write(busy.join("keep"), "x").unwrap();
    let mut args = vec!["gen-data", "--out", busy.to_str().unwrap()];
    args.extend(SMALL);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not empty"));
}
