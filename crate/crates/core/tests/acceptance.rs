//! Acceptance criteria, one printed PASS/FAIL line each.
//!
//! Criteria 1-6 run on every build. Criteria 7-14 need the benchmark CSVs and
//! are ignored by default:
//!
//! ```text
//! FREQCYCLE_DATA_DIR=/path/to/csvs cargo test --release -p freqcycle --test acceptance -- --ignored --nocapture
//! ```

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use freqcycle::autodiff::{ParamId, RealArray};
use freqcycle::config::RunConfig;
use freqcycle::data::Dataset;
use freqcycle::experiment::{self, RunSummary};
use freqcycle::model::{Model, ModelConfig, Variant, WeeklyConfig};
use freqcycle::reproduce::{self, ReproduceOptions, Status, Table};
use freqcycle::selfcheck::{self, SelfcheckOptions, SelfcheckReport, SuiteResult};
use freqcycle::sfpl::{FfnConfig, SegmentConfig};
use freqcycle::spectral::WindowKind;

fn line(id: u32, name: &str, ok: bool, detail: impl std::fmt::Display) -> bool {
    println!("[{}] criterion {id:>2} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn suites(report: &SelfcheckReport, names: &[&str]) -> Vec<SuiteResult> {
    names
        .iter()
        .map(|n| report.suites.iter().find(|s| s.name == *n).unwrap_or_else(|| panic!("no suite {n}")).clone())
        .collect()
}

fn suite_line(id: u32, name: &str, report: &SelfcheckReport, names: &[&str]) -> bool {
    let picked = suites(report, names);
    let ok = picked.iter().all(SuiteResult::passed);
    let detail = picked
        .iter()
        .map(|s| {
            let mut d = format!("{} max_err={:.2e} (tol {:e}, {} cases)", s.name, s.max_error, s.tolerance, s.cases);
            if let Some(f) = &s.failure {
                d.push_str(&format!(" first failure: {f}"));
            }
            d
        })
        .collect::<Vec<_>>()
        .join("; ");
    line(id, name, ok, detail)
}

#[test]
fn property_criteria() {
    let report = selfcheck::run(&SelfcheckOptions {
        trials: 20,
        ..SelfcheckOptions::default()
    });
    let results = [
        suite_line(1, "gradient oracle", &report, &["op gradients", "model gradients"]),
        suite_line(2, "spectral identities", &report, &["fft round trip", "fft identities"]),
        suite_line(3, "segmentation reconstruction", &report, &["segmentation"]),
        suite_line(4, "softmax and fusion", &report, &["softmax and fusion"]),
    ];
    assert!(results.iter().all(|&ok| ok), "property criteria failed");
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> RealArray {
    let n = shape.iter().product();
    RealArray::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn toy(variant: Variant) -> ModelConfig {
    ModelConfig {
        cycle_len: 4,
        segment: SegmentConfig {
            win_len: 4,
            stride: 4,
            window: WindowKind::Rect,
        },
        ffn: FfnConfig {
            hidden: 6,
            linear_only: false,
        },
        variant,
        ..ModelConfig::new(3, 16, 5)
    }
}

fn perturb(model: &mut Model, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = model.store().iter().map(|p| p.id).collect();
    for id in ids {
        let mut v = model.store().value(id).clone();
        let c: Vec<f64> = v.components().iter().map(|x| x + rng.gen_range(-0.5..0.5)).collect();
        v.set_components(&c).unwrap();
        model.store_mut().set_value(id, v).unwrap();
    }
}

/// Fills every parameter of `dst` from `src`, looking names up through `map`.
fn copy_params(src: &Model, dst: &mut Model, map: impl Fn(&str) -> String) {
    let targets: Vec<(ParamId, String)> = dst.store().iter().map(|p| (p.id, p.name.clone())).collect();
    for (id, name) in targets {
        let v = src.store().by_name(&map(&name)).unwrap().value.clone();
        dst.store_mut().set_value(id, v).unwrap();
    }
}

fn max_abs_diff(a: &RealArray, b: &RealArray) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn variant_collapses() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let starts = [0u64, 3, 17];
    let x = random(&mut rng, vec![3, 3, 16]);

    let mut two = Model::new(toy(Variant::TwoMlp), 2).unwrap();
    let mut single = toy(Variant::Full);
    single.segment = SegmentConfig {
        win_len: 16,
        stride: 1,
        window: WindowKind::Rect,
    };
    let full = Model::new(single, 2).unwrap();
    let same = two.predict(&x, &starts).unwrap() == full.predict(&x, &starts).unwrap();
    let ok_a = line(5, "two_mlp equals single-segment rect SFPL", same, format!("bit-identical={same}"));

    perturb(&mut two, &mut rng);
    let mut lpf = Model::new(toy(Variant::Lpf { cutoff: Some(9) }), 2).unwrap();
    for p in two.store().iter() {
        let id = lpf.store().by_name(&p.name).unwrap().id;
        lpf.store_mut().set_value(id, p.value.clone()).unwrap();
    }
    let gap = max_abs_diff(&lpf.predict(&x, &starts).unwrap(), &two.predict(&x, &starts).unwrap());
    let ok_b = line(5, "full-band lpf equals two_mlp", gap <= 1e-9, format!("max |diff| {gap:.2e} (tol 1e-9)"));

    let mut cfg = toy(Variant::Full);
    cfg.weekly = Some(WeeklyConfig {
        lookback: 16,
        pool_kernel: 1,
        cycle_len: 4,
    });
    let mut ms = Model::new(cfg, 3).unwrap();
    perturb(&mut ms, &mut rng);
    let mut plain = Model::new(toy(Variant::Full), 3).unwrap();
    copy_params(&ms, &mut plain, |n| n.replace("base.", "weekly."));
    let (_, weekly) = ms.branch_predictions(&x, &starts).unwrap();
    let weekly = weekly.unwrap();
    let same = weekly == plain.predict(&x, &starts).unwrap();
    let ok_c = line(
        5,
        "k=1 weekly branch equals single-scale model",
        same,
        format!("bit-identical={same}"),
    );

    assert!(ok_a && ok_b && ok_c);
}

#[test]
fn determinism() {
    let t = 480;
    let data = (0..t)
        .flat_map(|i| {
            let p = (i % 24) as f64 * std::f64::consts::TAU / 24.0;
            [p.sin() + 0.002 * i as f64, (2.0 * p).cos(), ((i * 7919) % 101) as f64 / 100.0]
        })
        .collect();
    let mut ds = Dataset::from_values("toy", RealArray::new(vec![t, 3], data).unwrap()).unwrap();
    ds.sample_interval = Some(3600.0);
    let cfg = RunConfig {
        lookback: 48,
        horizon: 12,
        ffn_hidden: 16,
        epochs: 3,
        batch: 32,
        seed: 2024,
        ..RunConfig::default()
    };
    let json = || {
        let p = experiment::prepare(&cfg, &ds).unwrap();
        let out = experiment::run(&p).unwrap();
        serde_json::to_string_pretty(&RunSummary::new(&p, out.test, out.report.best_epoch)).unwrap()
    };
    let (a, b) = (json(), json());
    assert!(line(6, "determinism", a == b, format!("metrics JSON identical={}", a == b)));
}

fn data_root() -> PathBuf {
    std::env::var_os("FREQCYCLE_DATA_DIR").map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

/// Runs one reproduction grid and prints a line per check whose name contains one of `wanted`.
fn reproduce_criteria(table: Table, wanted: &[(u32, &str)]) {
    let root = data_root();
    let opts = ReproduceOptions {
        data: Some(root.clone()),
        ..ReproduceOptions::default()
    };
    let report = reproduce::reproduce(table, &opts).unwrap();
    for note in &report.notes {
        println!("note: {note}");
    }
    let mut failed = false;
    for &(id, pattern) in wanted {
        for c in report.checks.iter().filter(|c| c.name.contains(pattern)) {
            let detail = format!("{} (rule: {})", c.measured, c.rule);
            match c.status {
                Status::Pass => {
                    line(id, &c.name, true, detail);
                }
                Status::Fail => failed |= !line(id, &c.name, false, detail),
                Status::NotAvailable | Status::Reported => {
                    println!("[N/A ] criterion {id:>2} {}: {detail}, data root {}", c.name, root.display())
                }
            }
        }
    }
    assert!(!failed, "{table} criteria failed");
}

#[test]
#[ignore = "needs ETTm2/ETTh1/ETTh2 CSVs under FREQCYCLE_DATA_DIR"]
fn table1_accuracy_and_spectrum() {
    reproduce_criteria(
        Table::Table1,
        &[(7, "ETTm2 L=96"), (8, "ETTh1 L=96"), (9, "ETTh2 L=96"), (14, "spectrum")],
    );
}

#[test]
#[ignore = "needs ETTh1 under FREQCYCLE_DATA_DIR"]
fn ablation_directionality() {
    reproduce_criteria(Table::Table3, &[(10, "")]);
}

#[test]
#[ignore = "needs ETTh2 under FREQCYCLE_DATA_DIR"]
fn frequency_method_directionality() {
    reproduce_criteria(Table::Table4, &[(11, "")]);
}

#[test]
#[ignore = "needs ETTm2 under FREQCYCLE_DATA_DIR; long lookback runs"]
fn multiscale_long_lookback() {
    reproduce_criteria(Table::Table2, &[(12, "ETTm2 multiscale")]);
}

#[test]
#[ignore = "needs ETTh1 under FREQCYCLE_DATA_DIR"]
fn window_study() {
    reproduce_criteria(Table::Windows, &[(13, "")]);
}
