use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use safemerge::merge::MergeRecipe;
use safemerge::tensor_store::{load_checkpoint, save_checkpoint};
use safemerge::toy_lm::{init_model, ToyLmConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_safemerge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

fn tiny_pool(dir: &Path) {
    let out = run(&["gen-data", "--k", "60", "--seed", "5", "--out-dir", s(dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&[
        "train-toy",
        "--out-dir",
        s(dir),
        "--seed",
        "5",
        "--d-model",
        "8",
        "--n-layers",
        "1",
        "--base-steps",
        "30",
        "--expert-steps",
        "30",
        "--base-expert-items",
        "10",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn two_models(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = ToyLmConfig {
        d_model: 8,
        n_layers: 1,
        ..ToyLmConfig::default()
    };
    let (a, b) = (dir.join("a.safetensors"), dir.join("b.safetensors"));
    save_checkpoint(&init_model(&cfg, 1).unwrap(), &a).unwrap();
    save_checkpoint(&init_model(&cfg, 2).unwrap(), &b).unwrap();
    (a, b)
}

#[test]
fn gen_data_line_counts_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for (dir, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        let out = run(&["gen-data", "--k", "200", "--seed", seed, "--out-dir", s(dir)]);
        assert!(out.status.success());
    }
    for f in ["safety_aligned.jsonl", "safety_misaligned.jsonl", "expert.jsonl"] {
        assert_eq!(lines(&a.join(f)), 200, "{f}");
    }
    assert_eq!(lines(&a.join("heldout.jsonl")), 2 * 23);
    for f in ["safety_aligned.jsonl", "expert.jsonl", "heldout.jsonl"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.join(f)).unwrap());
        assert_ne!(x, std::fs::read(c.join(f)).unwrap());
    }
}

#[test]
fn zero_lambda_merge_returns_base() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = two_models(tmp.path());
    let recipe = tmp.path().join("r.json");
    MergeRecipe::task_arithmetic(vec![0.0]).save(&recipe).unwrap();
    let merged = tmp.path().join("m.safetensors");
    let out = run(&[
        "merge",
        "--recipe",
        s(&recipe),
        "--base",
        s(&a),
        "--expert",
        s(&b),
        "--output",
        s(&merged),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(load_checkpoint(&merged).unwrap().tensors, load_checkpoint(&a).unwrap().tensors);
}

#[test]
fn slerp_over_three_models_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = two_models(tmp.path());
    let recipe = tmp.path().join("r.json");
    MergeRecipe::slerp(0.5).save(&recipe).unwrap();
    let out = run(&[
        "merge",
        "--recipe",
        s(&recipe),
        "--base",
        s(&a),
        "--expert",
        s(&b),
        "--expert",
        s(&b),
        "--out-dir",
        s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exactly 2"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.safetensors");
    assert_eq!(run(&["inspect", s(&missing)]).status.code(), Some(3));
    assert_eq!(run(&["gen-data", "--alpha", "-1", "--out-dir", s(tmp.path())]).status.code(), Some(2));
    assert_eq!(run(&["gen-data", "--modulus", "0", "--out-dir", s(tmp.path())]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));

    let junk = tmp.path().join("junk.safetensors");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(run(&["inspect", s(&junk)]).status.code(), Some(2));

    let (a, _) = two_models(tmp.path());
    let out = run(&["inspect", s(&a)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("tok_emb"));
}

#[test]
fn toy_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_pool(dir);
    let base = dir.join("base.safetensors");
    let expert = dir.join("expert.safetensors");
    assert!(base.exists() && expert.exists());

    let report = dir.join("eval.json");
    let out = run(&["eval", "--model", s(&base), "--out-dir", s(dir), "--output", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["alignment", "accuracy", "l_safety", "l_expert", "l_merge", "alpha"] {
        assert!(v[key].is_number(), "{key}");
    }

    let grid_dir = dir.join("grid");
    let out = run(&[
        "optimize",
        "--strategy",
        "grid",
        "--method",
        "ties",
        "--out-dir",
        s(&grid_dir),
        "--data-dir",
        s(dir),
        "--base",
        s(&base),
        "--expert",
        s(&expert),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(lines(&grid_dir.join("grid.csv")), 1 + 9);
    for f in ["recipe.json", "merged.safetensors", "report.json"] {
        assert!(grid_dir.join(f).exists(), "{f}");
    }

    let evo_dir = dir.join("evo");
    let out = run(&[
        "optimize",
        "--strategy",
        "evomm",
        "--steps",
        "3",
        "--out-dir",
        s(&evo_dir),
        "--data-dir",
        s(dir),
        "--base",
        s(&base),
        "--expert",
        s(&expert),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(lines(&evo_dir.join("history.csv")), 1 + 3);
    let recipe = MergeRecipe::load(evo_dir.join("recipe.json")).unwrap();
    assert_eq!(recipe.lambdas.len(), 1);

    let cocktail = dir.join("cocktail");
    let out = run(&[
        "optimize",
        "--strategy",
        "lm-cocktail",
        "--out-dir",
        s(&cocktail),
        "--data-dir",
        s(dir),
        "--base",
        s(&expert),
        "--expert",
        s(&expert),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let recipe = MergeRecipe::load(cocktail.join("recipe.json")).unwrap();
    assert_eq!(recipe.lambdas, vec![0.5, 0.5]);
}
