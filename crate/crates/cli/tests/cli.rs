use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dcmesh(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcmesh")).args(args).current_dir(dir).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn worked_example_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcmesh(&["worked-example"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("5 messages / 5 transmitted rounds"));
    assert!(out.contains("(5,130) t=26"));
    assert!(out.contains("(2,74) t=37"));
    assert!(out.trim_end().ends_with("PASS"));
}

#[test]
fn worked_example_ignores_seed_and_group() {
    let dir = tempfile::tempdir().unwrap();
    let tree = |args: &[&str]| -> String {
        let o = dcmesh(args, dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
        stdout(&o).lines().filter(|l| l.starts_with(' ')).collect::<Vec<_>>().join("\n")
    };
    let base = tree(&["worked-example", "-o", "a.jsonl"]);
    assert_eq!(base, tree(&["worked-example", "--seed", "99"]));
    assert_eq!(base, tree(&["worked-example", "--group", "production", "-o", "b.jsonl"]));
    assert_ne!(fs::read(dir.path().join("a.jsonl")).unwrap(), fs::read(dir.path().join("b.jsonl")).unwrap());
}

#[test]
fn run_then_verify_agree() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dcmesh(&["worked-example", "--emit-scenario", "s.toml"], dir.path()).status.code(), Some(0));
    let o = dcmesh(&["run", "s.toml", "-o", "t.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("5 messages / 5 transmitted rounds"));
    assert!(stdout(&o).contains("proofs: 20 verified, 0 failed"));
    let v = dcmesh(&["verify", "t.jsonl"], dir.path());
    assert_eq!(v.status.code(), Some(0), "{}", stdout(&v));
}

#[test]
fn empty_scenario_is_one_round() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("e.toml"), "n = 3\nsenders = []\n").unwrap();
    let o = dcmesh(&["run", "e.toml", "-o", "e.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("0 messages / 1 round"));
}

#[test]
fn bad_pad_exits_two_and_names_culprit() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("b.toml"),
        "n = 5\nsenders = [{ participant = 0, payload = 9 }]\n\
         adversaries = [{ participant = 2, strategy = \"bad_pad\" }]\n",
    )
    .unwrap();
    let o = dcmesh(&["run", "b.toml", "-o", "b.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("verdict: P2 aggregate_mismatch"));
    assert!(dir.path().join("b.jsonl").exists());
    assert_eq!(dcmesh(&["verify", "b.jsonl"], dir.path()).status.code(), Some(0));
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("x.toml"), "n = 0\nsenders = []\n").unwrap();
    fs::write(dir.path().join("y.toml"), "n = 4\nsenders = []\nbogus = 1\n").unwrap();
    assert_eq!(dcmesh(&["run", "x.toml"], dir.path()).status.code(), Some(1));
    assert_eq!(dcmesh(&["run", "y.toml"], dir.path()).status.code(), Some(1));
    assert_eq!(dcmesh(&["run", "missing.toml"], dir.path()).status.code(), Some(1));
    assert_eq!(dcmesh(&["verify", "missing.jsonl"], dir.path()).status.code(), Some(1));
}

#[test]
fn truncated_transcript_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    dcmesh(&["worked-example", "-o", "t.jsonl"], dir.path());
    let text = fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    fs::write(dir.path().join("cut.jsonl"), &text[..text.len() / 2]).unwrap();
    assert_eq!(dcmesh(&["verify", "cut.jsonl"], dir.path()).status.code(), Some(1));
}

fn flip_first_proof(v: &mut Value) -> bool {
    match v {
        Value::Object(map) => {
            if let Some(Value::String(p)) = map.get_mut("proof") {
                let mut bytes = hex::decode(&*p).unwrap();
                let mid = bytes.len() / 2;
                bytes[mid] ^= 0x01;
                *p = hex::encode(bytes);
                return true;
            }
            map.values_mut().any(flip_first_proof)
        }
        Value::Array(items) => items.iter_mut().any(flip_first_proof),
        _ => false,
    }
}

#[test]
fn flipped_proof_bit_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    dcmesh(&["worked-example", "-o", "t.jsonl"], dir.path());
    let text = fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let idx = lines
        .iter()
        .position(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            flip_first_proof(&mut v)
        })
        .expect("some record carries a proof");
    let mut v: Value = serde_json::from_str(&lines[idx]).unwrap();
    flip_first_proof(&mut v);
    lines[idx] = serde_json::to_string(&v).unwrap();
    fs::write(dir.path().join("f.jsonl"), lines.join("\n") + "\n").unwrap();
    let o = dcmesh(&["verify", "f.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains(&format!("divergence at record {idx}")));
}
