mod common;

use std::path::Path;
use std::process::{Command, Output};

use prix::sim::read_scenes;

fn prix(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prix"))
        .args(args)
        .current_dir(dir)
        .env_remove("PRIX_SEED")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), common::TINY).unwrap();
    dir
}

#[test]
fn gen_scenes() {
    let dir = setup();
    let d = dir.path();
    let o = prix(&["gen-scenes", "--kind", "all", "--count", "6", "--seed", "4", "--out", "s.jsonl"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let scenes = read_scenes(&d.join("s.jsonl")).unwrap();
    assert_eq!(scenes.len(), 6);
    let o = prix(&["gen-scenes", "--kind", "jam", "--count", "2", "--seed", "4", "--out", "j.jsonl"], d);
    assert_eq!(code(&o), 0);
    assert!(read_scenes(&d.join("j.jsonl")).unwrap().iter().all(|s| s.kind.name() == "jam"));
    let o = prix(&["gen-scenes", "--kind", "highway", "--count", "2", "--seed", "4", "--out", "x.jsonl"], d);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_eval_and_seed_override() {
    let dir = setup();
    let d = dir.path();
    let o = prix(&["train", "--config", "tiny.json", "--out", "m.prix"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = std::fs::read_to_string(d.join("m.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,lr,total,plan,det,sem");
    assert_eq!(lines.len(), 3);

    prix(&["gen-scenes", "--kind", "all", "--count", "4", "--seed", "9", "--out", "e.jsonl"], d);
    let eval = |metrics: &str| {
        let o = prix(&["eval", "--ckpt", "m.prix", "--scenes", "e.jsonl", "--metrics", metrics], d);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read_to_string(d.join(metrics)).unwrap()
    };
    let a = eval("a.json");
    let b = eval("b.json");
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    let mut want = vec!["NC", "DAC", "TTC", "Comf.", "EP", "PDMS"];
    let mut got = keys.clone();
    want.sort();
    got.sort();
    assert_eq!(got, want);
    let per = std::fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(per.lines().count(), 5);

    let with_seed = Command::new(env!("CARGO_BIN_EXE_prix"))
        .args(["train", "--config", "tiny.json", "--out", "s.prix"])
        .current_dir(d)
        .env("PRIX_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(code(&with_seed), 0);
    assert_ne!(std::fs::read(d.join("m.prix")).unwrap(), std::fs::read(d.join("s.prix")).unwrap());
    let bad_seed = Command::new(env!("CARGO_BIN_EXE_prix"))
        .args(["train", "--config", "tiny.json", "--out", "t.prix"])
        .current_dir(d)
        .env("PRIX_SEED", "eleven")
        .output()
        .unwrap();
    assert_eq!(code(&bad_seed), 2);
}

#[test]
fn config_errors_exit_2() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), r#"{"seed": 1, "learning_rate": 3}"#).unwrap();
    let o = prix(&["train", "--config", "bad.json", "--out", "m.prix"], d);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"));
    assert_eq!(code(&prix(&["train", "--config", "missing.json", "--out", "m.prix"], d)), 2);
    assert_eq!(code(&prix(&["ablate", "--study", "nope", "--config", "tiny.json", "--out", "a.csv"], d)), 2);
}

#[test]
fn data_errors_exit_3() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("junk.prix"), b"not a checkpoint").unwrap();
    prix(&["gen-scenes", "--kind", "all", "--count", "2", "--seed", "1", "--out", "s.jsonl"], d);
    let o = prix(&["eval", "--ckpt", "junk.prix", "--scenes", "s.jsonl", "--metrics", "m.json"], d);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("magic"));
    std::fs::write(d.join("broken.jsonl"), "{\"kind\": 1}\n").unwrap();
    let o = prix(&["score", "--scenes", "broken.jsonl", "--submission", "x.jsonl", "--metrics", "m.json"], d);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("broken.jsonl:1"));
}

#[test]
fn score_command() {
    let dir = setup();
    let d = dir.path();
    prix(&["gen-scenes", "--kind", "all", "--count", "4", "--seed", "2", "--out", "s.jsonl"], d);
    let scenes = read_scenes(&d.join("s.jsonl")).unwrap();
    let line = |i: usize| serde_json::json!({ "scene_id": i, "waypoints": scenes[i].ego_gt.waypoints }).to_string();

    let all: Vec<String> = (0..4).rev().map(line).collect();
    std::fs::write(d.join("gt.jsonl"), all.join("\n")).unwrap();
    let o = prix(&["score", "--scenes", "s.jsonl", "--submission", "gt.jsonl", "--metrics", "m.json"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("m.json")).unwrap()).unwrap();
    assert_eq!(v["PDMS"].as_f64().unwrap(), 1.0);

    std::fs::write(d.join("gap.jsonl"), [line(0), line(2)].join("\n")).unwrap();
    let o = prix(&["score", "--scenes", "s.jsonl", "--submission", "gap.jsonl", "--metrics", "m.json"], d);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("1, 3"), "{}", stderr(&o));

    std::fs::write(d.join("dup.jsonl"), [line(0), line(1), line(1)].join("\n")).unwrap();
    let o = prix(&["score", "--scenes", "s.jsonl", "--submission", "dup.jsonl", "--metrics", "m.json"], d);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("dup.jsonl:3"));

    std::fs::write(d.join("bad.jsonl"), format!("{}\n{{\"scene_id\": 1}}\n", line(0))).unwrap();
    let o = prix(&["score", "--scenes", "s.jsonl", "--submission", "bad.jsonl", "--metrics", "m.json"], d);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("bad.jsonl:2"));

    let short = serde_json::json!({ "scene_id": 0, "waypoints": [[1.0, 0.0, 0.0]] }).to_string();
    let rest: Vec<String> = (1..4).map(line).collect();
    std::fs::write(d.join("short.jsonl"), format!("{short}\n{}", rest.join("\n"))).unwrap();
    let o = prix(&["score", "--scenes", "s.jsonl", "--submission", "short.jsonl", "--metrics", "m.json"], d);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("0 ("), "{}", stderr(&o));
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = setup();
    let d = dir.path();
    let o = prix(
        &["ablate", "--study", "cart_presence", "--config", "tiny.json", "--out", "a.csv", "--timing-runs", "2"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.join("a.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,params,sa_params,pdms,epdms,ade,final_loss,planner_ms,e2e_ms");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("with_cart,"));
    assert!(lines[2].starts_with("no_cart,"));
}
