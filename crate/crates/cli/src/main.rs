use std::alloc::{GlobalAlloc, Layout, System};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicU64, Ordering};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use freqcycle::checkpoint::{self, Manifest};
use freqcycle::config::RunConfig;
use freqcycle::data::{load_csv, Dataset};
use freqcycle::experiment::{prepare, run, Prepared, RunSummary};
use freqcycle::model::Model;
use freqcycle::report::{bench, spectrum_csv, spectrum_report, SpectrumShape};
use freqcycle::reproduce::{reproduce, ReproduceOptions, Table};
use freqcycle::selfcheck::{self, Fault, SelfcheckOptions};
use freqcycle::train::{evaluate, init_thread_pool};

struct CountingAlloc;

static CURRENT: AtomicU64 = AtomicU64::new(0);
static PEAK: AtomicU64 = AtomicU64::new(0);

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size() as u64, Ordering::Relaxed) + layout.size() as u64;
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size() as u64, Ordering::Relaxed);
    }
}

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Parser)]
#[command(name = "freqcycle", version, about = "Cycle-plus-spectrum forecaster: train, evaluate, reproduce, inspect")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset; writes a checkpoint, metrics JSON and history CSV.
    Train(RunArgs),
    /// Score a checkpoint on the test split of its dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run one benchmark grid (or `all`) and write a markdown/CSV report.
    Reproduce {
        table: String,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,2024", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Amplitude spectra before/after the frequency stage of a trained model.
    Spectrum {
        /// Trains a fresh model when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Parameter count, peak heap and seconds per epoch.
    Bench(RunArgs),
    /// Gradient, transform and invariant property suites.
    Selfcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Flat key = value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    lookback: Option<String>,
    #[arg(long)]
    horizon: Option<String>,
    #[arg(long)]
    cycle_len: Option<String>,
    #[arg(long)]
    seg_len: Option<String>,
    #[arg(long)]
    seg_stride: Option<String>,
    #[arg(long)]
    seg_window: Option<String>,
    #[arg(long)]
    ffn_hidden: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    multiscale: Option<String>,
    #[arg(long)]
    weekly_lookback: Option<String>,
    #[arg(long)]
    pool_kernel: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    inst_norm: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any config key, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut v: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, x: &Option<String>| {
            if let Some(x) = x {
                v.push((k.into(), x.clone()));
            }
        };
        push("lookback", &self.lookback);
        push("horizon", &self.horizon);
        push("cycle_len", &self.cycle_len);
        push("seg_len", &self.seg_len);
        push("seg_stride", &self.seg_stride);
        push("seg_window", &self.seg_window);
        push("ffn_hidden", &self.ffn_hidden);
        push("variant", &self.variant);
        push("multiscale", &self.multiscale);
        push("weekly_lookback", &self.weekly_lookback);
        push("pool_kernel", &self.pool_kernel);
        push("seed", &self.seed);
        push("lr", &self.lr);
        push("batch", &self.batch);
        push("epochs", &self.epochs);
        push("inst_norm", &self.inst_norm);
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        push("data", &path(&self.data));
        push("out", &path(&self.out));
        for kv in &self.set {
            let Some((k, x)) = kv.split_once('=') else {
                bail!("--set {kv}: expected KEY=VALUE");
            };
            v.push((k.trim().into(), x.trim().into()));
        }
        Ok(v)
    }

    /// `base` < config file < flags.
    fn resolve(&self, mut base: RunConfig) -> Result<RunConfig> {
        if let Some(path) = &self.config {
            base.apply_file(path)?;
        }
        for (k, v) in self.overrides()? {
            base.set(&k, &v)?;
        }
        Ok(base)
    }
}

/// Error carrying a specific process exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let Some(path) = &cfg.data else {
        return Err(Exit(2, "no dataset given (use --data or data = ... in the config)".into()).into());
    };
    if !path.is_file() {
        return Err(Exit(2, format!("dataset not found: {}", path.display())).into());
    }
    Ok(load_csv(path)?)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(&cfg.out)
}

fn summary_json(s: &RunSummary) -> Result<String> {
    Ok(serde_json::to_string_pretty(s)? + "\n")
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve(RunConfig::default())?;
    let ds = load_dataset(&cfg)?;
    let p = prepare(&cfg, &ds)?;
    eprintln!(
        "training {} on {} ({} rows, {} channels, {} parameters)",
        p.run.variant,
        ds.name,
        ds.len(),
        ds.channels(),
        p.fresh_model()?.param_count()
    );
    let out = run(&p)?;
    let summary = RunSummary::new(&p, out.test, out.report.best_epoch);
    let dir = out_dir(&p.run)?;
    let extra = serde_json::json!({ "run_config": p.run.dump(), "summary": &summary });
    checkpoint::save(&out.model, dir.join("model.fqck"), extra)?;
    write(&dir.join("metrics.json"), summary_json(&summary)?)?;
    write(&dir.join("history.csv"), out.report.history_csv())?;
    write(&dir.join("config.txt"), p.run.dump())?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

/// Config stored in a checkpoint, then the config file, then flags.
fn loaded(path: &Path, args: &RunArgs) -> Result<(Model, Prepared, Manifest)> {
    let (model, manifest) = checkpoint::load(path)?;
    let mut base = RunConfig::default();
    if let Some(text) = manifest.extra.get("run_config").and_then(|v| v.as_str()) {
        base.apply_str(text)?;
    }
    let cfg = args.resolve(base)?;
    let p = prepare(&cfg, &load_dataset(&cfg)?)?;
    checkpoint::check_compatible(model.config(), &p.model_config)?;
    Ok((model, p, manifest))
}

fn cmd_eval(path: &Path, args: &RunArgs) -> Result<()> {
    let (model, p, manifest) = loaded(path, args)?;
    let task = p.task();
    let test = evaluate(&model, &task, task.splits.test.clone())?;
    let best_epoch = manifest.extra["summary"]["best_epoch"].as_u64().unwrap_or(0) as usize;
    let summary = RunSummary::new(&p, test, best_epoch);
    write(&out_dir(&p.run)?.join("eval_metrics.json"), summary_json(&summary)?)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn data_root(args: &RunArgs) -> Option<PathBuf> {
    args.data
        .clone()
        .or_else(|| std::env::var_os("FREQCYCLE_DATA_DIR").map(PathBuf::from))
        .or_else(|| Some(PathBuf::from("data")))
}

fn cmd_reproduce(table: &str, seeds: &[u64], args: &RunArgs) -> Result<()> {
    let tables: Vec<Table> = if table == "all" {
        Table::ALL.to_vec()
    } else {
        vec![table.parse()?]
    };
    let mut base = args.resolve(RunConfig::default())?;
    base.data = None;
    let opts = ReproduceOptions {
        data: data_root(args),
        seeds: seeds.to_vec(),
        base,
    };
    let dir = out_dir(&opts.base)?;
    for t in tables {
        eprintln!("reproducing {t}");
        let report = reproduce(t, &opts)?;
        let md = report.markdown();
        write(&dir.join(format!("reproduce_{t}.md")), &md)?;
        write(&dir.join(format!("reproduce_{t}.csv")), report.runs_csv())?;
        write(&dir.join(format!("reproduce_{t}.json")), serde_json::to_string_pretty(&report)?)?;
        println!("{md}");
    }
    Ok(())
}

fn cmd_spectrum(checkpoint: Option<&Path>, args: &RunArgs) -> Result<()> {
    let (model, p) = match checkpoint {
        Some(path) => {
            let (model, p, _) = loaded(path, args)?;
            (model, p)
        }
        None => {
            let cfg = args.resolve(RunConfig::default())?;
            let p = prepare(&cfg, &load_dataset(&cfg)?)?;
            (run(&p)?.model, p)
        }
    };
    let rows = spectrum_report(&model, &p.task())?;
    let dir = out_dir(&p.run)?;
    write(&dir.join("spectrum.csv"), spectrum_csv(&rows))?;
    let shape = SpectrumShape::of(&rows);
    write(&dir.join("spectrum_shape.json"), serde_json::to_string_pretty(&shape)?)?;
    print!("{}", spectrum_csv(&rows));
    eprintln!(
        "upper-half bins boosted: {:.0}%, low-frequency peak retention: {:?}",
        shape.upper_boost_fraction * 100.0,
        shape.peak_retention
    );
    Ok(())
}

fn cmd_bench(args: &RunArgs) -> Result<()> {
    let mut base = RunConfig::default();
    base.epochs = 1;
    let cfg = args.resolve(base)?;
    let p = prepare(&cfg, &load_dataset(&cfg)?)?;
    let model = p.fresh_model()?;
    let task = p.task();
    let baseline = CURRENT.load(Ordering::Relaxed);
    PEAK.store(baseline, Ordering::Relaxed);
    let mut report = bench(&model, &task, &p.run.train_config()?)?;
    report.peak_bytes = Some(PEAK.load(Ordering::Relaxed).saturating_sub(baseline));
    let json = serde_json::json!({
        "dataset": p.dataset,
        "variant": p.run.variant.to_string(),
        "multiscale": p.run.multiscale,
        "lookback": p.run.lookback,
        "horizon": p.run.horizon,
        "threads": rayon_threads(),
        "params_count": report.params_count,
        "peak_bytes": report.peak_bytes,
        "secs_per_epoch": report.secs_per_epoch,
    });
    write(&out_dir(&p.run)?.join("bench.json"), serde_json::to_string_pretty(&json)?)?;
    println!("{json}");
    Ok(())
}

fn rayon_threads() -> usize {
    init_thread_pool().unwrap_or(1)
}

fn cmd_selfcheck(trials: usize, fault: Option<&str>) -> Result<()> {
    let fault = match fault {
        None => None,
        Some("rfft-adjoint") | Some("rfft_adjoint") => Some(Fault::RfftAdjoint),
        Some(other) => bail!("unknown fault {other:?}"),
    };
    let report = selfcheck::run(&SelfcheckOptions {
        trials,
        fault,
        ..SelfcheckOptions::default()
    });
    print!("{report}");
    if !report.passed() {
        let names: Vec<_> = report.failures().map(|s| s.name).collect();
        bail!("selfcheck failed: {}", names.join(", "));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_thread_pool() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match &cli.cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval { checkpoint, run } => cmd_eval(checkpoint, run),
        Command::Reproduce { table, seeds, run } => cmd_reproduce(table, seeds, run),
        Command::Spectrum { checkpoint, run } => cmd_spectrum(checkpoint.as_deref(), run),
        Command::Bench(a) => cmd_bench(a),
        Command::Selfcheck { trials, inject_fault } => cmd_selfcheck(*trials, inject_fault.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.downcast_ref::<Exit>().map_or(1, |x| x.0);
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
