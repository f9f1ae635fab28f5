use std::path::Path;
use std::process::{Command, Output};

use hardnet_mseg::decoder::build_mseg;
use hardnet_mseg::io::preprocess::binary_to_mask;
use hardnet_mseg::io::pnm::read_file;
use hardnet_mseg::io::{write_image, write_mask};
use hardnet_mseg::preset;
use hardnet_mseg::train::gen_blobs;

fn mseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mseg")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn summary_echoes_config_then_totals() {
    let o = mseg(&["summary", "--preset", "tiny", "--size", "64"]);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert!(s.starts_with("# config"), "{s}");
    assert!(s.contains("params 219007"), "{s}");
}

#[test]
fn json_output_has_stable_keys() {
    let o = mseg(&["--format", "json", "summary", "--preset", "tiny", "--size", "96"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["config"]["command"], "summary");
    assert_eq!(v["config"]["size"], 96);
    assert_eq!(v["summary"]["totals"]["params"], 219007);
}

#[test]
fn exit_codes() {
    assert_eq!(mseg(&["summary", "--nope"]).status.code(), Some(1));
    assert_eq!(mseg(&["summary", "--size", "16"]).status.code(), Some(1));
    assert_eq!(mseg(&["summary", "--preset", "/no/such/preset.toml"]).status.code(), Some(2));
    let o = mseg(&["eval", "--pred", "/no/such/dir", "--gt", "/no/such/dir"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    assert_eq!(mseg(&["--help"]).status.code(), Some(0));
}

#[test]
fn eval_identical_dirs_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = gen_blobs(8, 3, 64).unwrap();
    for (i, s) in d.samples.iter().enumerate() {
        let m = binary_to_mask(&s.mask_tensor());
        std::fs::write(dir.path().join(format!("img{i}.pgm")), write_mask(&m)).unwrap();
    }
    let p = dir.path().to_str().unwrap();
    let o = mseg(&["--format", "json", "eval", "--pred", p, "--gt", p]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["report"]["aggregate"]["mdice"], 1.0);
    assert_eq!(v["report"]["images"].as_array().unwrap().len(), 3);
}

#[test]
fn infer_mask_matches_image_size() {
    let dir = tempfile::tempdir().unwrap();
    let model = build_mseg(&preset::builtin("tiny").unwrap()).unwrap();
    let wpath = dir.path().join("tiny.w1");
    model.init_weights(1).write_file(&wpath).unwrap();
    let img = &gen_blobs(2, 1, 77).unwrap().samples[0].image;
    let ipath = dir.path().join("in.ppm");
    std::fs::write(&ipath, write_image(img)).unwrap();
    let mpath = dir.path().join("out.pgm");
    let o = mseg(&[
        "infer", "--preset", "tiny", "--weights", wpath.to_str().unwrap(),
        "--in", ipath.to_str().unwrap(), "--out", mpath.to_str().unwrap(), "--size", "96",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mask = read_file(&mpath).unwrap();
    assert_eq!((mask.width, mask.height, mask.channels), (77, 77, 1));
    assert!(stdout(&o).contains("prob min"));

    // weights of another preset are a data error
    let o = mseg(&[
        "infer", "--weights", wpath.to_str().unwrap(),
        "--in", ipath.to_str().unwrap(), "--out", mpath.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let o = mseg(&["gradcheck", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn train_toy_writes_weights_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("toy.w1");
    let j = dir.path().join("toy.json");
    let o = mseg(&[
        "train-toy", "--samples", "10", "--epochs", "2", "--seed", "5",
        "--out", w.to_str().unwrap(), "--json-out", j.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(Path::new(&w).exists());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&j).unwrap()).unwrap();
    assert_eq!(v["epoch_losses"].as_array().unwrap().len(), 2);
    assert_eq!(v["policy"], "adam-policy");
    assert_eq!(mseg(&["train-toy", "--policy", "rmsprop"]).status.code(), Some(1));
    assert_eq!(mseg(&["train-toy", "--scale", "huge"]).status.code(), Some(1));
}

#[test]
fn bench_reports_samples() {
    let o = mseg(&["--format", "json", "bench", "--preset", "tiny", "--size", "64", "--iters", "10"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["bench"]["latencies_ms"].as_array().unwrap().len(), 10);
    assert_eq!(mseg(&["bench", "--preset", "tiny", "--iters", "3"]).status.code(), Some(1));
}
