use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
name = "tiny"
num_cameras = 4
ring_neighbors = 1
heads = 2
channels = 8
temporal_frames = 1
seed = 5

[[scales]]
height = 2
width = 3
projection_dim = 5

[[scales]]
height = 2
width = 2
"#;

fn ega(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ega")).args(args).output().expect("spawn ega")
}

fn read_dir(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn raster(h: usize, w: usize, c: usize, f: impl Fn(usize) -> f64) -> String {
    let vals: Vec<String> = (0..h * w * c).map(|i| f(i).to_string()).collect();
    format!("RASTER {h} {w} {c}\n{}\n", vals.join(" "))
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        fs::write(dir.path().join("target.raster"), raster(5, 6, 3, |i| (i % 7) as f64 / 7.0)).unwrap();
        fs::write(dir.path().join("cand_a.raster"), raster(5, 6, 3, |i| (i % 5) as f64 / 5.0)).unwrap();
        fs::write(dir.path().join("cand_b.raster"), raster(5, 6, 3, |i| (i % 3) as f64 / 3.0)).unwrap();
        fs::write(dir.path().join("depth.raster"), raster(5, 6, 1, |i| 1.0 + (i % 4) as f64)).unwrap();
        fs::write(dir.path().join("front.raster"), raster(4, 4, 1, |i| 2.0 + i as f64)).unwrap();
        fs::write(dir.path().join("back.raster"), raster(4, 4, 1, |i| 30.0 - i as f64)).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).display().to_string()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn subcommands(fx: &Fixture) -> Vec<Vec<String>> {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    vec![
        s(&["check-attention", "--config", &fx.path("tiny.toml")]),
        s(&["check-grads", "--preset", "minimal", "--seed", "1"]),
        s(&["cost", "--preset", "LR"]),
        s(&["sweep", "--preset", "LR", "--axis", "nt", "--points", "0,1,2", "--metric", "attnmap"]),
        s(&[
            "eval-loss",
            "--target",
            &fx.path("target.raster"),
            "--candidate",
            &fx.path("cand_a.raster"),
            "--candidate",
            &fx.path("cand_b.raster"),
            "--depth",
            &fx.path("depth.raster"),
        ]),
        s(&[
            "eval-depth",
            "--pred",
            &fx.path("front.raster"),
            "--gt",
            &fx.path("back.raster"),
            "--pred",
            &fx.path("back.raster"),
            "--gt",
            &fx.path("back.raster"),
        ]),
    ]
}

#[test]
fn every_subcommand_is_deterministic() {
    let fx = Fixture::new();
    for (i, args) in subcommands(&fx).into_iter().enumerate() {
        let out = fx.out(&format!("run{i}"));
        let mut full = args.clone();
        full.extend(["--out".into(), out.display().to_string()]);
        let argv: Vec<&str> = full.iter().map(String::as_str).collect();

        let first = ega(&argv);
        assert!(first.status.success(), "{args:?}: {}", String::from_utf8_lossy(&first.stderr));
        let before = read_dir(&out);
        assert!(before.contains_key("manifest.json"));
        let second = ega(&argv);
        assert!(second.status.success());
        assert_eq!(before, read_dir(&out), "{args:?}");
        assert_eq!(first.stdout, second.stdout);
    }
}

#[test]
fn manifest_digests_match_files() {
    let fx = Fixture::new();
    let out = fx.out("m");
    assert!(ega(&["cost", "--out", out.to_str().unwrap()]).status.success());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "cost");
    assert_eq!(manifest["config"], "preset:LR");
    for f in manifest["files"].as_array().unwrap() {
        let bytes = fs::read(out.join(f["name"].as_str().unwrap())).unwrap();
        assert_eq!(f["bytes"].as_u64().unwrap() as usize, bytes.len());
        assert_eq!(f["sha256"].as_str().unwrap().len(), 64);
    }
}

#[test]
fn seed_changes_outputs() {
    let fx = Fixture::new();
    let run = |seed: &str, name: &str| {
        let out = fx.out(name);
        assert!(ega(&["check-grads", "--seed", seed, "--out", out.to_str().unwrap()]).status.success());
        fs::read(out.join("check_grads.csv")).unwrap()
    };
    assert_ne!(run("1", "s1"), run("2", "s2"));
}

#[test]
fn cost_lr_has_thirty_instances() {
    let fx = Fixture::new();
    let out = fx.out("cost");
    assert!(ega(&["cost", "--preset", "LR", "--out", out.to_str().unwrap()]).status.success());
    let csv = fs::read_to_string(out.join("cost.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("config,stage,view,scale,flops,peak_elements"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let instances: Vec<_> = rows.iter().filter(|r| r[0] == "ega:LR" && r[1] == "total" && r[2] != "all").collect();
    assert_eq!(instances.len(), 30);
    let attn = rows.iter().find(|r| r[0] == "ega:LR" && r[1] == "attnmap" && r[2] == "3").unwrap();
    assert_eq!(attn[4], "12390400");
    assert!(rows.iter().any(|r| r[0] == "ega:LR" && r[1] == "total" && r[2] == "all"));
    assert!(rows.iter().any(|r| r[0] == "joint:LR" && r[1] == "total" && r[2] == "all"));
}

#[test]
fn eval_depth_perfect_prediction() {
    let fx = Fixture::new();
    let out = fx.out("depth");
    let gt = fx.path("back.raster");
    assert!(ega(&["eval-depth", "--pred", &gt, "--gt", &gt, "--out", out.to_str().unwrap()]).status.success());
    let csv = fs::read_to_string(out.join("depth_metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "camera,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,pixel_count");
    assert_eq!(lines[1], "back,0,0,0,0,1,1,1,16");
    assert_eq!(lines[2], "average,0,0,0,0,1,1,1,16");
}

#[test]
fn corrupted_raster_is_rejected() {
    let fx = Fixture::new();
    fs::write(fx.out("bad.raster"), "RASTER 4 4 1\n1 2 3 oops\n").unwrap();
    let gt = fx.path("back.raster");
    let out = ega(&["eval-depth", "--pred", &fx.path("bad.raster"), "--gt", &gt, "--out", fx.path("x").as_str()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.raster"));
}

#[test]
fn corrupted_parameters_fail_the_oracle_check() {
    let fx = Fixture::new();
    let cfg = fx.path("tiny.toml");
    let good = fx.out("good");
    let saved =
        ega(&["check-attention", "--config", &cfg, "--save-params", "--out", good.to_str().unwrap()]);
    assert!(saved.status.success());

    let mut bytes = fs::read(good.join("params.bin")).unwrap();
    let n = bytes.len();
    let bad = fx.out("bad.bin");
    let run = |bytes: &[u8]| {
        fs::write(&bad, bytes).unwrap();
        ega(&["check-attention", "--config", &cfg, "--params", bad.to_str().unwrap(), "--out", fx.path("o").as_str()])
    };

    bytes[n - 8..].copy_from_slice(&1e300f64.to_le_bytes());
    let out = run(&bytes);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("oracle(view=3,scale=1)"), "{stderr}");
    assert!(!stderr.contains("oracle(view=0"));
    let manifest = fs::read_to_string(fx.out("o").join("manifest.json")).unwrap();
    assert!(manifest.contains("\"passed\": false"));

    bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    let out = run(&bytes);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));

    let out = run(&bytes[..n / 2]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_report_the_line() {
    let fx = Fixture::new();
    fs::write(fx.out("broken.toml"), "name = \"b\"\nnum_cameras = 4\nheads = \"eight\"\n").unwrap();
    let out = ega(&["cost", "--config", &fx.path("broken.toml"), "--out", fx.path("b").as_str()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sweep_reports_degree() {
    let fx = Fixture::new();
    let out = fx.out("sw");
    let r = ega(&["sweep", "--axis", "ni", "--points", "1,2,3,4", "--metric", "attnmap", "--out", out.to_str().unwrap()]);
    assert!(r.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["degree"], 1);
    let r = ega(&["sweep", "--axis", "ni", "--points", "1,2", "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
}
