use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn vita(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vita"))
        .current_dir(dir)
        .env_remove("VITA_THREADS")
        .args(args)
        .output()
        .expect("spawn vita")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn generate(dir: &Path, out: &str, seed: &str) {
    let o = vita(dir, &["generate", "--out", out, "--scenes", "6", "--seed", seed]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn generate_is_bitwise_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), "a", "3");
    generate(tmp.path(), "b", "3");
    let mut a = files(&tmp.path().join("a"));
    let mut b = files(&tmp.path().join("b"));
    let ma = a.remove(Path::new("manifest.json")).unwrap();
    let mb = b.remove(Path::new("manifest.json")).unwrap();
    assert_eq!(a, b);

    let strip = |bytes: &[u8]| {
        let mut v: Value = serde_json::from_slice(bytes).unwrap();
        let obj = v.as_object_mut().unwrap();
        obj.remove("wall_clock_s");
        obj.remove("flags");
        v
    };
    let (ma, mb) = (strip(&ma), strip(&mb));
    assert_eq!(ma, mb);
    let artifacts = ma["artifacts"].as_array().unwrap();
    assert_eq!(artifacts.len(), a.len());
    for art in artifacts {
        assert_eq!(art["sha256"].as_str().unwrap().len(), 64);
    }
    assert_eq!(ma["threads"], 1);
    assert_eq!(ma["seeds"]["scene_seed"], 3);
}

#[test]
fn different_seeds_give_different_data() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), "a", "1");
    generate(tmp.path(), "b", "2");
    let a = files(&tmp.path().join("a"));
    let b = files(&tmp.path().join("b"));
    assert_ne!(a.get(Path::new("index.jsonl")), b.get(Path::new("index.jsonl")));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    assert_eq!(code(&vita(p, &[])), 2);
    assert_eq!(code(&vita(p, &["generate"])), 2);
    assert_eq!(code(&vita(p, &["generate", "--out", "x", "--bogus"])), 2);
    assert_eq!(code(&vita(p, &["train", "--data", "d", "--out", "o", "--arch", "triple"])), 2);
    assert_eq!(code(&vita(p, &["generate", "--out", "x", "--scenes", "0"])), 2);
    assert_eq!(code(&vita(p, &["train", "--data", "d", "--out", "o", "--arch", "single", "--lambda-o", "0.5"])), 2);

    let o = Command::new(env!("CARGO_BIN_EXE_vita"))
        .current_dir(p)
        .env("VITA_THREADS", "0")
        .args(["generate", "--out", "x", "--scenes", "1"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("VITA_THREADS"));

    assert_eq!(code(&vita(p, &["--help"])), 0);
}

#[test]
fn train_eval_predict_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    generate(p, "ds", "5");

    let o = vita(p, &["train", "--data", "ds", "--out", "run", "--steps", "3", "--batch", "2", "--max-instances", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(p.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let man = json(&p.join("run/manifest.json"));
    assert_eq!(man["command"], "train");
    assert_eq!(man["config_fingerprint"].as_str().unwrap().len(), 16);

    let o = vita(p, &["eval", "--checkpoint", "run/model.vita", "--data", "ds", "--split", "val", "--report", "out/eval.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&p.join("out/eval.json"));
    for key in ["miou_a", "miou_v", "miou_o", "t_inf_ms", "t_inf_std_ms", "per_bin", "n_samples"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    assert_eq!(report["per_bin"].as_array().unwrap().len(), 3);
    assert!(p.join("out/eval.json.manifest.json").exists());

    let index = std::fs::read_to_string(p.join("ds/index.jsonl")).unwrap();
    let rec: Value = index
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .find(|r| r["excluded"] == false)
        .unwrap();
    let (image, visible) = (rec["image"].as_str().unwrap(), rec["visible"].as_str().unwrap());
    let o = vita(
        p,
        &["predict", "--checkpoint", "run/model.vita", "--image", &format!("ds/{image}"), "--visible-mask", &format!("ds/{visible}"), "--out-prefix", "pred/x"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["pred/x_amodal.pgm", "pred/x_occluded.pgm", "pred/x_manifest.json"] {
        assert!(p.join(f).exists(), "{f} missing");
    }
}

#[test]
fn train_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    generate(p, "ds", "7");
    for out in ["r1", "r2"] {
        let o = vita(p, &["train", "--data", "ds", "--out", out, "--arch", "single", "--steps", "2", "--batch", "2", "--max-instances", "3"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["model.vita", "train_log.jsonl"] {
        assert_eq!(std::fs::read(p.join("r1").join(f)).unwrap(), std::fs::read(p.join("r2").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn corrupt_checkpoint_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    generate(p, "ds", "2");
    std::fs::write(p.join("bad.vita"), b"not a checkpoint").unwrap();
    let o = vita(p, &["eval", "--checkpoint", "bad.vita", "--data", "ds"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.vita"));
    assert_eq!(code(&vita(p, &["eval", "--checkpoint", "missing.vita", "--data", "ds"])), 1);
}

#[test]
fn sweep_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    generate(p, "ds", "4");
    let o = vita(p, &["sweep", "--data", "ds", "--out", "sw", "--lambdas", "0,0.5", "--steps", "1", "--batch", "2", "--max-instances", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(p.join("sw/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lambda_o,miou_a,miou_v,miou_o");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("0.5,"));
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = vita(tmp.path(), &["gradcheck", "--report", "gc.json"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}{}", String::from_utf8_lossy(&o.stderr));
    let rows = json(&tmp.path().join("gc.json"));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 21);
    assert!(rows.iter().all(|r| r["passed"] == true));
    assert!(stdout.contains("toy_dual_model"));
}
