use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_freqcycle"));
    c.env("FREQCYCLE_THREADS", "2");
    c
}

fn toy_csv(dir: &Path) -> PathBuf {
    let mut s = String::from("date,a,b,c\n");
    for i in 0..600u32 {
        let p = (i % 24) as f64 * std::f64::consts::TAU / 24.0;
        let noise = (i.wrapping_mul(2654435761) % 1000) as f64 / 5000.0;
        let _ = writeln!(
            s,
            "{},{},{},{}",
            stamp(i),
            p.sin() + noise,
            (2.0 * p).cos() - noise,
            0.01 * i as f64 + p.sin()
        );
    }
    let path = dir.join("toy.csv");
    std::fs::write(&path, s).unwrap();
    path
}

/// Hourly stamps starting 2020-01-01 without a date library.
fn stamp(i: u32) -> String {
    let day = i / 24;
    let (month, dom) = if day < 31 { (1, day + 1) } else { (2, day - 30) };
    format!("2020-{month:02}-{dom:02} {:02}:00:00", i % 24)
}

const FAST: [&str; 10] = [
    "--lookback", "24", "--horizon", "12", "--ffn-hidden", "8", "--epochs", "2", "--batch", "32",
];

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg("train")
        .arg("--data")
        .arg(data)
        .arg("--out")
        .arg(out)
        .args(FAST)
        .args(extra)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn metrics(dir: &Path, file: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(file)).unwrap()).unwrap()
}

#[test]
fn train_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_csv(tmp.path());
    let out = tmp.path().join("run");
    let o = train(&data, &out, &["--seed", "1"]);
    ok(&o);
    let m = metrics(&out, "metrics.json");
    assert_eq!(m["dataset"], "toy");
    assert_eq!(m["lookback"], 24);
    assert_eq!(m["horizon"], 12);
    assert_eq!(m["variant"], "full");
    assert_eq!(m["inst_norm"], true);
    assert!(m["mse"].as_f64().unwrap().is_finite());
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(out.join("model.fqck").is_file());
    assert!(out.join("config.txt").is_file());
}

#[test]
fn missing_dataset_exits_2_naming_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope").join("ettm2.csv");
    let o = train(&missing, &tmp.path().join("run"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(&missing.display().to_string()), "{err}");
}

#[test]
fn variant_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_csv(tmp.path());
    let out = tmp.path().join("run");
    ok(&train(&data, &out, &["--variant", "two_mlp"]));
    assert_eq!(metrics(&out, "metrics.json")["variant"], "two_mlp");
}

#[test]
fn eval_matches_training_metrics_and_rejects_bad_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_csv(tmp.path());
    let out = tmp.path().join("run");
    ok(&train(&data, &out, &[]));
    let ckpt = out.join("model.fqck");

    let eval_out = tmp.path().join("eval");
    let o = bin()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .arg("--out")
        .arg(&eval_out)
        .output()
        .unwrap();
    ok(&o);
    let trained = metrics(&out, "metrics.json");
    let evaluated = metrics(&eval_out, "eval_metrics.json");
    assert_eq!(trained["mse"], evaluated["mse"]);
    assert_eq!(trained["mae"], evaluated["mae"]);

    let o = bin()
        .args(["eval", "--horizon", "6", "--checkpoint"])
        .arg(&ckpt)
        .arg("--out")
        .arg(&eval_out)
        .output()
        .unwrap();
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("mismatch") && err.contains("\"horizon\":12") && err.contains("\"horizon\":6"), "{err}");

    let mut bytes = std::fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 5] ^= 0x11;
    let bad = tmp.path().join("bad.fqck");
    std::fs::write(&bad, bytes).unwrap();
    let o = bin().args(["eval", "--checkpoint"]).arg(&bad).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}

#[test]
fn config_dump_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_csv(tmp.path());
    let a = tmp.path().join("a");
    ok(&train(&data, &a, &["--seg-window", "hamming", "--seed", "7"]));

    let b = tmp.path().join("b");
    let o = bin()
        .arg("train")
        .arg("--config")
        .arg(a.join("config.txt"))
        .arg("--out")
        .arg(&b)
        .output()
        .unwrap();
    ok(&o);
    let ma = std::fs::read(a.join("metrics.json")).unwrap();
    let mb = std::fs::read(b.join("metrics.json")).unwrap();
    assert_eq!(ma, mb, "re-running from the dumped config must be bit-identical");

    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "lookback = 24\nlook_back = 3\n").unwrap();
    let o = bin().arg("train").arg("--config").arg(&cfg).arg("--data").arg(&data).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("look_back"));
}

#[test]
fn selfcheck_passes_and_detects_corrupt_adjoint() {
    let o = bin().args(["selfcheck", "--trials", "3"]).output().unwrap();
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS   rfft adjoint"));

    let o = bin()
        .args(["selfcheck", "--trials", "3", "--inject-fault", "rfft-adjoint"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("rfft adjoint"), "{err}");
}

#[test]
fn reproduce_without_data_reports_na() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("rep");
    let o = bin()
        .args(["reproduce", "table1", "--data"])
        .arg(tmp.path().join("empty"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    ok(&o);
    let md = std::fs::read_to_string(out.join("reproduce_table1.md")).unwrap();
    assert!(md.contains("N/A"));
    assert!(!md.contains("PASS") && !md.contains("FAIL"));
}

#[test]
fn bench_and_spectrum_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_csv(tmp.path());
    let out = tmp.path().join("run");
    ok(&train(&data, &out, &[]));

    let o = bin()
        .arg("bench")
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out)
        .args(FAST)
        .output()
        .unwrap();
    ok(&o);
    let b = metrics(&out, "bench.json");
    assert!(b["params_count"].as_u64().unwrap() > 0);
    assert!(b["peak_bytes"].as_u64().unwrap() > 0);

    let o = bin()
        .args(["spectrum", "--checkpoint"])
        .arg(out.join("model.fqck"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    ok(&o);
    let csv = std::fs::read_to_string(out.join("spectrum.csv")).unwrap();
    assert!(csv.starts_with("frequency_bin,mean_amp_before,mean_amp_after,ratio"));
    assert_eq!(csv.lines().count(), 1 + 24 / 2 + 1);
}
