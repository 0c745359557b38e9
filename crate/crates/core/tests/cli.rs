use std::path::Path;
use std::process::{Command, Output};

fn camera(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camera"))
        .args(args)
        .env_remove("CAMERA_SEED")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_inputs(dir: &Path) {
    let model = dir.join("m.mcam");
    let calib = dir.join("c.mcam");
    for args in [
        vec![
            "gen-model",
            "--layers",
            "2",
            "--experts",
            "4",
            "--shared",
            "1",
            "--d-model",
            "16",
            "--d-ff",
            "8",
            "--seed",
            "3",
            "--out",
            s(&model),
        ],
        vec![
            "gen-calib",
            "--n",
            "64",
            "--d-model",
            "16",
            "--seed",
            "4",
            "--out",
            s(&calib),
        ],
    ] {
        assert!(camera(&args).status.success());
    }
}

#[test]
fn outputs_are_reproducible_and_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    gen_inputs(dir.path());
    let m = dir.path().join("m.mcam");
    let c = dir.path().join("c.mcam");
    let mut bytes = Vec::new();
    for (i, threads) in ["1", "4", "1"].iter().enumerate() {
        let out = dir.path().join(format!("q{i}.mcam"));
        let rep = dir.path().join(format!("q{i}.json"));
        let o = camera(&[
            "--threads",
            threads,
            "quantize",
            "--model",
            s(&m),
            "--calib",
            s(&c),
            "--group",
            "8",
            "--out",
            s(&out),
            "--report",
            s(&rep),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&rep).unwrap()).unwrap();
        bytes.push((
            std::fs::read(&out).unwrap(),
            report["layers"].clone(),
            report["approx_error"].clone(),
        ));
    }
    // outputs embed their own path in the manifest, so compare weights and tables
    let strip = |b: &[u8]| camera_moe::mcam::Container::from_bytes(b).unwrap().tensors;
    assert_eq!(strip(&bytes[0].0), strip(&bytes[1].0));
    assert_eq!(strip(&bytes[0].0), strip(&bytes[2].0));
    assert_eq!(bytes[0].1, bytes[1].1);
    assert_eq!(bytes[0].2, bytes[2].2);
}

#[test]
fn identical_invocations_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    gen_inputs(dir.path());
    let m = dir.path().join("m.mcam");
    let c = dir.path().join("c.mcam");
    let out = dir.path().join("p.mcam");
    let rep = dir.path().join("p.json");
    let mut runs = Vec::new();
    for _ in 0..2 {
        let o = camera(&[
            "prune",
            "--model",
            s(&m),
            "--calib",
            s(&c),
            "--lambda",
            "0.3",
            "--out",
            s(&out),
            "--report",
            s(&rep),
        ]);
        assert!(o.status.success());
        runs.push((std::fs::read(&out).unwrap(), std::fs::read(&rep).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
    let report: serde_json::Value = serde_json::from_slice(&runs[0].1).unwrap();
    let digest = report["manifest"]["inputs"][0]["sha256"].as_str().unwrap();
    assert_eq!(digest.len(), 64);
    assert_eq!(report["manifest"]["parameters"]["lambda"], 0.3);
}

#[test]
fn seed_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.mcam");
    let b = dir.path().join("b.mcam");
    assert!(
        camera(&["gen-calib", "--n", "4", "--d-model", "4", "--seed", "9", "--out", s(&a)])
            .status
            .success()
    );
    let o = Command::new(env!("CARGO_BIN_EXE_camera"))
        .args(["gen-calib", "--n", "4", "--d-model", "4", "--out", s(&b)])
        .env("CAMERA_SEED", "9")
        .output()
        .unwrap();
    assert!(o.status.success());
    let x = |p: &Path| camera_moe::calibration::load_calibration(p, None).unwrap();
    assert_eq!(x(&a), x(&b));
}

#[test]
fn validation_and_runtime_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    gen_inputs(dir.path());
    let m = dir.path().join("m.mcam");
    let c = dir.path().join("c.mcam");
    let out = dir.path().join("o.mcam");

    let o = camera(&["prune", "--lambda", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--lambda"));

    // ratios that do not sum to one are a validation error
    let o = camera(&[
        "quantize",
        "--model",
        s(&m),
        "--calib",
        s(&c),
        "--ratios",
        "0.5,0.5,0.5",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ratios"));

    // calibration width mismatch
    let o = camera(&["rank", "--model", s(&m), "--synthetic", "8,12,1,1.0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));

    // missing file is a runtime error
    let o = camera(&[
        "rank",
        "--model",
        s(&dir.path().join("none.mcam")),
        "--calib",
        s(&c),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = camera(&[
        "oracle",
        "plossless",
        "--experts",
        "64",
        "--activated",
        "4",
        "--prune",
        "0.25",
    ]);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "0.3062");
}

#[test]
fn rank_and_cssp_outputs() {
    let dir = tempfile::tempdir().unwrap();
    gen_inputs(dir.path());
    let m = dir.path().join("m.mcam");
    let r = dir.path().join("r.json");
    let o = camera(&[
        "rank",
        "--model",
        s(&m),
        "--synthetic",
        "32,16,5,1.0",
        "--layer",
        "1",
        "--alpha",
        "0.95",
        "--out",
        s(&r),
    ]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&r).unwrap()).unwrap();
    let recs = v["records"].as_array().unwrap();
    assert_eq!(recs.len(), 40);
    let mut ranks: Vec<u64> = recs.iter().map(|x| x["rank"].as_u64().unwrap()).collect();
    ranks.sort_unstable();
    assert_eq!(ranks, (0..40).collect::<Vec<u64>>());
    for key in ["flat_index", "expert", "neuron", "energy", "rank"] {
        assert!(recs[0].get(key).is_some());
    }

    let o = camera(&["oracle", "cssp", "--seed", "3"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["optimal"]["error"].as_f64().unwrap() <= v["greedy"]["error"].as_f64().unwrap() + 1e-9);

    // 40 micro-experts exceed the enumeration guard
    let o = camera(&["oracle", "cssp", "--model", s(&m), "--synthetic", "32,16,5,1.0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("enumeration guard"));
}
