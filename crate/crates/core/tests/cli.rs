//! The `fedpart` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use fedpart::metrics::{LabelVolume, CSV_HEADER};

fn fedpart(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedpart")).args(args).output().unwrap()
}

fn smoke_config(dir: &Path) -> String {
    let path = dir.join("smoke.toml");
    std::fs::write(
        &path,
        r#"
schema_version = 1
seed = 4
method = { name = "fedprox", mu = 0.01 }

[training]
rounds = 2

[sites]
sites = 2
samples_per_site = 20
image_size = 32
"#,
    )
    .unwrap();
    path.display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_then_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path());
    let out = tmp.path().join("run");
    let o = fedpart(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--threads", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with(CSV_HEADER));
    assert!(text.contains("U-Net+FedProx(mu=0.01),all,average,"));
    assert_eq!(std::fs::read_to_string(out.join("report.csv")).unwrap(), text.lines().take(13).collect::<Vec<_>>().join("\n") + "\n");

    let o = fedpart(&["replay", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).trim(), "identical");

    let csv = out.join("report.csv");
    let edited = std::fs::read_to_string(&csv).unwrap().replacen(",T1,", ",T2,", 1);
    std::fs::write(&csv, edited).unwrap();
    let o = fedpart(&["replay", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("report.csv: bytes differ"), "{}", stdout(&o));
}

#[test]
fn seed_flag_overrides_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(fedpart(&["generate", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    assert!(fedpart(&["generate", "--config", &cfg, "--seed", "99", "--out", b.to_str().unwrap()]).status.success());
    let ma = std::fs::read_to_string(a.join("manifest.json")).unwrap();
    let mb = std::fs::read_to_string(b.join("manifest.json")).unwrap();
    assert!(ma.contains("\"master_seed\": 4"), "{ma}");
    assert!(mb.contains("\"master_seed\": 99"));
    let samples = std::fs::read_dir(a.join("samples")).unwrap().count();
    assert_eq!(samples, 40, "two sites of twenty samples");
}

#[test]
fn metrics_scores_two_label_files() {
    let tmp = tempfile::tempdir().unwrap();
    let mut gt = vec![0u8; 64];
    for (i, v) in gt.iter_mut().enumerate() {
        let (y, x) = (i / 8, i % 8);
        if (2..6).contains(&y) {
            *v = match x {
                1..=2 => 1,
                3..=4 => 2,
                5..=6 => 3,
                _ => 0,
            };
        }
    }
    let vol = |labels: Vec<u8>| LabelVolume {
        shape: vec![8, 8],
        spacing: vec![1.0, 1.0],
        labels,
    };
    let (p, g) = (tmp.path().join("pred.fplb"), tmp.path().join("gt.fplb"));
    std::fs::write(&p, vol(gt.clone()).to_bytes()).unwrap();
    std::fs::write(&g, vol(gt).to_bytes()).unwrap();
    let o = fedpart(&["metrics", p.to_str().unwrap(), g.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let avg = text.lines().find(|l| l.contains(",average,")).unwrap();
    assert!(avg.ends_with(",average,1,0,0,1,1,1"), "{avg}");
}

#[test]
fn bad_config_fails_with_field_names() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "[training]\nrounds = 0\nbatch_size = 0\n").unwrap();
    let o = fedpart(&["run", "--config", path.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("training.rounds") && err.contains("training.batch_size"), "{err}");
}
