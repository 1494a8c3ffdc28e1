use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn liptok(out: &Path, args: &[&str]) -> std::process::Output {
    let o = Command::new(env!("CARGO_BIN_EXE_liptok"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("LIPTOK_LOG", "error")
        .output()
        .unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn synth_min_jerk(dir: &Path) -> String {
    liptok(dir, &["synth", "--seed", "3", "--set", "data.mode=min-jerk", "--set", "data.episodes=30"]);
    dir.join("dataset.jsonl").display().to_string()
}

const SMALL: [&str; 6] = ["--set", "tokenizer.hidden=16,16", "--set", "train.steps=40", "--set", "tokenizer.codebook_size=32"];

#[test]
fn synth_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    liptok(&a, &["synth", "--seed", "7", "--set", "data.episodes=100"]);
    liptok(&b, &["synth", "--seed", "7", "--set", "data.episodes=100"]);
    let fa = fs::read(a.join("dataset.jsonl")).unwrap();
    assert_eq!(fa, fs::read(b.join("dataset.jsonl")).unwrap());
    assert_eq!(String::from_utf8(fa).unwrap().lines().count(), 300);
    assert!(a.join("resolved.cfg").exists());
}

#[test]
fn train_tokenizer_metrics_depend_on_kind() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_min_jerk(&dir.path().join("data"));
    let run = |name: &str, kind: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train-tokenizer", "--seed", "1"];
        let set_data = format!("data.path={data}");
        let set_kind = format!("tokenizer.kind={kind}");
        args.extend(["--set", &set_data, "--set", &set_kind]);
        args.extend(SMALL);
        args.extend(extra);
        liptok(&out, &args);
        assert!(out.join("tokenizer.ltok").exists() && out.join("loss_curve.csv").exists());
        json(&out.join("metrics.json"))
    };
    let lip = run("lip", "lipvqvae", &[]);
    let vq = run("vq", "vqvae", &[]);
    assert!(lip["lipschitz_bound"].as_f64().unwrap() > 0.0);
    assert!(vq.get("lipschitz_bound").is_none());
    for m in [&lip, &vq] {
        assert_eq!(m["status"], "ok");
        assert_eq!(m["steps"], 40);
        assert!(m["reconstruction_mse"].as_f64().unwrap() >= 0.0);
        assert!(m["perplexity"].as_f64().unwrap() >= 1.0);
    }
    assert_eq!(run("lip2", "lipvqvae", &[]), lip);
    let free = run("gamma0", "lipvqvae", &["--set", "tokenizer.gamma=0"]);
    assert!(free["lipschitz_bound"].as_f64().unwrap() > lip["lipschitz_bound"].as_f64().unwrap());
}

#[test]
fn smoothness_rows_follow_checkpoint_order() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_min_jerk(&dir.path().join("data"));
    let set_data = format!("data.path={data}");
    let mut paths = Vec::new();
    for kind in ["mlp", "bin"] {
        let out = dir.path().join(kind);
        let set_kind = format!("tokenizer.kind={kind}");
        let mut args = vec!["train-tokenizer", "--set", &set_data, "--set", &set_kind];
        args.extend(SMALL);
        liptok(&out, &args);
        let named = dir.path().join(format!("{kind}.ltok"));
        fs::copy(out.join("tokenizer.ltok"), &named).unwrap();
        paths.push(named.display().to_string());
    }
    paths.reverse();
    let ckpts = format!("smoothness.checkpoints={}", paths.join(","));
    let out = dir.path().join("smooth");
    let o = liptok(&out, &["smoothness", "--set", &set_data, "--set", &ckpts, "--set", "smoothness.trajectories=20"]);
    let csv = fs::read_to_string(out.join("smoothness.csv")).unwrap();
    let names: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["bin", "mlp"]);
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 2);
    assert!(fs::read_to_string(out.join("latents.csv")).unwrap().starts_with("tokenizer,episode,t,dim0"));
    assert_eq!(fs::read_to_string(out.join("projection.svg")).unwrap().matches("<polyline").count(), 40);
}

#[test]
fn sweep_cells_are_complete_and_paired() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let mut args = vec![
        "sweep",
        "--workers",
        "2",
        "--set",
        "sweep.codebook_sizes=256,512,1024,2048",
        "--set",
        "sweep.lipschitz=off,on",
        "--set",
        "sweep.seeds=0,1",
        "--set",
        "data.episodes=20",
        "--set",
        "smoothness.trajectories=10",
    ];
    args.extend(&SMALL[..4]);
    liptok(&out, &args);
    let report = json(&out.join("sweep.json"));
    let cells = report["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 4 * 2 * 2);
    let hash = &cells[0]["dataset_hash"];
    assert!(cells.iter().all(|c| &c["dataset_hash"] == hash && c["status"] == "ok"));
    for k in [256, 512, 1024, 2048] {
        assert_eq!(cells.iter().filter(|c| c["codebook_size"] == k).count(), 4);
    }
    assert_eq!(fs::read_dir(out.join("cells")).unwrap().count(), 16);
    assert_eq!(fs::read_to_string(out.join("sweep.csv")).unwrap().lines().count(), 17);
    assert!(out.join("sweep.svg").exists());
}

#[test]
fn icil_with_one_kind_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("icil");
    liptok(
        &out,
        &[
            "icil",
            "--set",
            "icil.kinds=mlp",
            "--set",
            "icil.tasks=reach",
            "--set",
            "icil.seeds=0",
            "--set",
            "icil.steps=5",
            "--set",
            "icil.train_episodes=4",
            "--set",
            "icil.rollouts=2",
        ],
    );
    let table = fs::read_to_string(out.join("success_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().starts_with("mlp,reach,"));
    let svg = fs::read_to_string(out.join("correlation.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 1);
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["synth", "--set", "no.such.key=1"],
        vec!["train-tokenizer"],
        vec!["frobnicate"],
    ] {
        let o = Command::new(env!("CARGO_BIN_EXE_liptok"))
            .args(&args)
            .arg("--out")
            .arg(dir.path())
            .env("LIPTOK_LOG", "error")
            .output()
            .unwrap();
        assert!(!o.status.success(), "{args:?}");
    }
}
