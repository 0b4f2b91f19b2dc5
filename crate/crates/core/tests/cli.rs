use std::path::Path;
use std::process::{Command, Output};

fn scribseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scribseg")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "
[synth]
n_train = 6
n_val = 3
n_test = 3
size = 32

[net]
base_channels = 4
dropout_blocks = 1

[train]
iters_per_recursion = 15
batch_size = 2
lr0 = 0.003
";

fn small_dataset(dir: &Path) -> (String, String) {
    let cfg = dir.join("small.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    let data = dir.join("data");
    let o = scribseg(&["synth", "--config", &cfg, "--seed", "4", "--out", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (cfg, data.join("manifest.csv").to_str().unwrap().to_string())
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&scribseg(&["--help"])), 0);
    assert_eq!(code(&scribseg(&["--version"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    let o = scribseg(&["frobnicate"]);
    assert_eq!(code(&o), 1);
    let o = scribseg(&["pipeline", "--out", "/tmp/never-written"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("run.data"), "{}", stderr(&o));
    assert_eq!(stderr(&o).trim().lines().count(), 1);
    let o = scribseg(&["eval", "--set", "net.colour=3", "--data", "x"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("net.colour"));
    let o = scribseg(&["pipeline", "--variant", "best", "--data", "x", "--out", "y"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = scribseg(&["seed", "--data", dir.path().join("absent.csv").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let (_, manifest) = small_dataset(dir.path());
    // a mask with the wrong height
    let mask = dir.path().join("data/masks/train0001.pgm");
    let bytes = std::fs::read(&mask).unwrap();
    let mut fixed = b"P5\n32 31\n255\n".to_vec();
    let body = &bytes[bytes.len() - 32 * 32..];
    fixed.extend_from_slice(&body[..32 * 31]);
    std::fs::write(&mask, fixed).unwrap();
    let o = scribseg(&["seed", "--data", &manifest, "--out", dir.path().join("s").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("train0001"), "{}", stderr(&o));
}

#[test]
fn solver_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = small_dataset(dir.path());
    let out = dir.path().join("seeds");
    let o = scribseg(&["seed", "--config", &cfg, "--data", &manifest, "--out", out.to_str().unwrap(), "--set", "seeder.cg_max_iters=1"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = scribseg(&["seed", "--config", &cfg, "--data", &manifest, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("seeds/train0005.pgm").exists());
}

#[test]
fn pipeline_then_eval_reproduces_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = small_dataset(dir.path());
    let run = dir.path().join("bnr");
    let o = scribseg(&["pipeline", "--config", &cfg, "--data", &manifest, "--variant", "base_no_recursion", "--out", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let row = String::from_utf8(o.stdout).unwrap();
    assert!(row.contains("Base (no recursion)"));
    let report = std::fs::read_to_string(run.join("report.csv")).unwrap();

    let ev = dir.path().join("eval");
    let o = scribseg(&["eval", "--config", &cfg, "--data", &manifest, "--run", run.to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(String::from_utf8(o.stdout).unwrap(), row);
    assert_eq!(std::fs::read_to_string(ev.join("report.csv")).unwrap(), report);
    assert!(report.starts_with("variant,label,dice_mean,dice_std,n\nbase_no_recursion,1,"));

    // same config and seed give the same bytes
    let again = dir.path().join("bnr2");
    let o = scribseg(&["pipeline", "--config", &cfg, "--data", &manifest, "--variant", "base_no_recursion", "--out", again.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(again.join("report.csv")).unwrap(), report);
    assert_eq!(std::fs::read(again.join("final.ckpt")).unwrap(), std::fs::read(run.join("final.ckpt")).unwrap());
}

#[test]
fn gridsearch_writes_the_winner() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = small_dataset(dir.path());
    let run = dir.path().join("r0");
    let o = scribseg(&["train", "--config", &cfg, "--data", &manifest, "--out", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = run.join("checkpoint.ckpt");
    assert!(ckpt.exists());
    let gs = dir.path().join("gs");
    let o = scribseg(&[
        "gridsearch", "--config", &cfg, "--data", &manifest, "--checkpoint", ckpt.to_str().unwrap(),
        "--out", gs.to_str().unwrap(), "--set", "gridsearch.w1=0,0.05,0.5",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let scores = std::fs::read_to_string(gs.join("gridsearch.csv")).unwrap();
    let rows: Vec<Vec<f64>> = scores
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r[5] > rows[best][5] {
            best = i;
        }
    }
    let params = std::fs::read_to_string(gs.join("crf_params.txt")).unwrap();
    assert!(params.contains(&format!("w1 = {}", rows[best][0])), "{params}\n{scores}");

    let o = scribseg(&[
        "relabel", "--config", &cfg, "--data", &manifest, "--checkpoint", ckpt.to_str().unwrap(),
        "--variant", "sep_crf", "--out", gs.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(gs.join("targets/train0000.pgm").exists());
}
