use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use causalproto::config::{RunConfig, RunManifest};
use causalproto::datagen::{generate_dataset, read_manifest, write_manifest, ImageSample, Split};
use causalproto::explain::{explain_sample, render_report, Occlusion};
use causalproto::model::Branch;
use causalproto::trainer::{
    load_checkpoint, run_ablation_suite, save_checkpoint, write_results_csv, SuiteData, Trainer,
};
use causalproto::Error;

const OUT_ENV: &str = "CAUSALPROTO_OUT";
const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

#[derive(Parser)]
#[command(name = "causalproto", version, about = "Causal prototype networks on synthetic and manifest datasets")]
struct Cli {
    /// Output root; defaults to $CAUSALPROTO_OUT, then ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic train/val/test splits as manifest directories.
    GenData(ConfigArgs),
    /// Train one variant and write a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory with train/, val/ and test/ manifests.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Re-score a finished run directory without retraining.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Also write per-context class probabilities for every test sample.
        #[arg(long)]
        dump_contexts: bool,
    },
    /// Train every ablation variant for every seed.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Render prototype explanations for test samples of a trained run.
    Explain {
        /// checkpoint.json inside a run directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 3)]
        topk: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file, or the name of a bundled preset.
    #[arg(long, default_value = "desk")]
    config: String,
    /// Override one field, e.g. `--set train.beta=0.1` or `--set ablation=no_mi`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

struct Failure {
    code: u8,
    kind: String,
    msg: String,
}

impl Failure {
    fn usage(e: Error) -> Self {
        Failure {
            code: 2,
            kind: e.kind().into(),
            msg: e.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: 1,
            kind: e.kind().into(),
            msg: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            return fail(Failure {
                code: 2,
                kind: "usage".into(),
                msg: first.into(),
            });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    let msg = f.msg.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error: kind={} msg={}", f.kind, msg);
    ExitCode::from(f.code)
}

fn run(cli: Cli) -> CliResult<()> {
    let root = cli
        .out
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    match cli.command {
        Command::GenData(args) => gen_data(&load_config(&args)?, &root),
        Command::Train { config, data, run_dir } => {
            let cfg = load_config(&config)?;
            let dir = run_dir.unwrap_or_else(|| root.join(format!("{}-seed{}", cfg.train.variant(), cfg.train.seed)));
            train(cfg, data, &dir)
        }
        Command::Eval { run, dump_contexts } => eval(&run, dump_contexts),
        Command::Ablate {
            config,
            seeds,
            data,
            run_dir,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if cfg.seeds.is_empty() {
                return Err(Failure::usage(Error::Config("no seeds given".into())));
            }
            ablate(cfg, data, &run_dir.unwrap_or_else(|| root.join("ablate")))
        }
        Command::Explain {
            checkpoint,
            samples,
            topk,
            out_dir,
        } => explain(&checkpoint, samples, topk, out_dir),
    }
}

fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let path = Path::new(&args.config);
    let mut cfg = if path.exists() || args.config.ends_with(".json") {
        RunConfig::load(path)
    } else {
        RunConfig::preset(&args.config)
    }
    .map_err(Failure::usage)?;
    for o in &args.overrides {
        cfg.apply_override(o).map_err(Failure::usage)?;
    }
    cfg.validate().map_err(Failure::usage)?;
    Ok(cfg)
}

fn load_splits(cfg: &RunConfig, data_dir: Option<&Path>) -> CliResult<[Vec<ImageSample>; 3]> {
    let load = |split: Split| match data_dir {
        Some(d) => read_manifest(&d.join(split.name()), Some(cfg.data.image_size)),
        None => generate_dataset(&cfg.data, split),
    };
    Ok([load(Split::Train)?, load(Split::Val)?, load(Split::Test)?])
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Failure::from(Error::Io { path: path.into(), source: e }))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::from(Error::Io { path: path.into(), source: e })
}

fn gen_data(cfg: &RunConfig, root: &Path) -> CliResult<()> {
    let dir = root.join("data");
    for split in SPLITS {
        let samples = generate_dataset(&cfg.data, split)?;
        let manifest = write_manifest(&samples, &dir.join(split.name()))?;
        println!(
            "{} rho={} n={} {}",
            split.name(),
            cfg.data.rho(split),
            samples.len(),
            manifest.display()
        );
    }
    let layout = SPLITS
        .iter()
        .map(|s| (s.name().to_string(), format!("{}/manifest.csv", s.name())))
        .collect();
    RunManifest::new(cfg.clone(), None, layout).save(&dir)?;
    Ok(())
}

fn train(cfg: RunConfig, data: Option<PathBuf>, dir: &Path) -> CliResult<()> {
    let [train, val, test] = load_splits(&cfg, data.as_deref())?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let layout = BTreeMap::from([
        ("checkpoint".to_string(), "checkpoint.json".to_string()),
        ("metrics_log".to_string(), "metrics.jsonl".to_string()),
        ("report".to_string(), "report.json".to_string()),
    ]);
    RunManifest::new(cfg.clone(), data, layout).save(dir)?;
    let log_path = dir.join("metrics.jsonl");
    let mut log = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let mut log_err = None;
    let trainer = Trainer::new(cfg.train.clone(), cfg.data.num_classes, &train, &val)?;
    let outcome = trainer.run(|r| {
        eprintln!(
            "{} epoch {} loss {:.4} train_acc {:.3} val_bacc {}",
            r.variant,
            r.epoch,
            r.loss.total,
            r.train_acc,
            r.val_bacc.map_or("-".into(), |v| format!("{v:.3}"))
        );
        let line = serde_json::to_string(r).expect("serializable");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(io_err(&log_path)(e));
    }
    save_checkpoint(&outcome.state, &dir.join("checkpoint.json"))?;
    let tr: Vec<&ImageSample> = train.iter().collect();
    let te: Vec<&ImageSample> = test.iter().collect();
    let report = outcome.state.report(&tr, &te, cfg.train.seed)?;
    write_json(&dir.join("report.json"), &report)?;
    println!("{}", serde_json::to_string(&report).expect("serializable"));
    Ok(())
}

fn eval(run: &Path, dump_contexts: bool) -> CliResult<()> {
    let manifest = RunManifest::load(run)?;
    let cfg = &manifest.config;
    let state = load_checkpoint(&run.join("checkpoint.json"))?;
    let [train, _, test] = load_splits(cfg, manifest.data_dir.as_deref())?;
    let tr: Vec<&ImageSample> = train.iter().collect();
    let te: Vec<&ImageSample> = test.iter().collect();
    let report = state.report(&tr, &te, state.config.seed)?;
    write_json(&run.join("eval.json"), &report)?;
    println!("{}", serde_json::to_string(&report).expect("serializable"));
    if dump_contexts {
        let path = run.join("contexts.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path)(e.into()))?;
        let mut header = vec!["sample_id".to_string(), "context".to_string()];
        header.extend((0..cfg.data.num_classes).map(|c| format!("p{c}")));
        w.write_record(&header).map_err(|e| io_err(&path)(e.into()))?;
        let zc = state.encoder.encode_samples(&te, Branch::Causal, 128)?;
        for (i, s) in te.iter().enumerate() {
            let Some(out) = state.intervention(zc.row(i))? else {
                return Err(Failure::usage(Error::Config(format!(
                    "variant {} has no spurious contexts to dump",
                    state.variant()
                ))));
            };
            for (m, p) in out.per_context.iter().enumerate() {
                let mut rec = vec![s.sample_id.clone(), m.to_string()];
                rec.extend(p.iter().map(|v| format!("{v:.6}")));
                w.write_record(&rec).map_err(|e| io_err(&path)(e.into()))?;
            }
        }
        w.flush().map_err(io_err(&path))?;
        eprintln!("contexts written to {}", path.display());
    }
    Ok(())
}

fn ablate(cfg: RunConfig, data: Option<PathBuf>, dir: &Path) -> CliResult<()> {
    let [train, val, test] = load_splits(&cfg, data.as_deref())?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let layout = BTreeMap::from([("results".to_string(), "results.csv".to_string())]);
    RunManifest::new(cfg.clone(), data, layout).save(dir)?;
    let suite = SuiteData {
        train,
        val,
        test,
        num_classes: cfg.data.num_classes,
    };
    let runs = run_ablation_suite(&cfg.train, &suite, &cfg.seeds, |variant, seed, r| {
        eprintln!("{variant} seed {seed} epoch {} loss {:.4}", r.epoch, r.loss.total);
    })?;
    let reports: Vec<_> = runs.into_iter().map(|r| r.report).collect();
    let path = dir.join("results.csv");
    write_results_csv(&reports, &path)?;
    println!("{:<14} {:>6} {:>6} {:>9} {:>6} {:>6}", "variant", "bacc", "f1", "nmi", "purity", "div");
    let mut order: Vec<&str> = Vec::new();
    for r in &reports {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    for v in order {
        let rows: Vec<_> = reports.iter().filter(|r| r.variant == v).collect();
        let mean = |f: fn(&causalproto::metrics::MetricsReport) -> f64| {
            rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64
        };
        println!(
            "{:<14} {:>6.3} {:>6.3} {:>9.3} {:>6.3} {:>6.3}",
            v,
            mean(|r| r.bacc),
            mean(|r| r.f1),
            mean(|r| r.nmi),
            mean(|r| r.purity),
            mean(|r| r.div)
        );
    }
    println!("{}", path.display());
    Ok(())
}

fn explain(checkpoint: &Path, samples: usize, topk: usize, out_dir: Option<PathBuf>) -> CliResult<()> {
    let run = checkpoint.parent().unwrap_or(Path::new("."));
    let manifest = RunManifest::load(run)?;
    let state = load_checkpoint(checkpoint)?;
    let [train, _, test] = load_splits(&manifest.config, manifest.data_dir.as_deref())?;
    let library: HashMap<&str, &ImageSample> = train.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let mut bundles = Vec::new();
    for s in test.iter().take(samples) {
        bundles.push(explain_sample(&state, s, topk, Occlusion::default(), &library)?);
    }
    let dir = out_dir.unwrap_or_else(|| run.join("explain"));
    let index = render_report(&bundles, &dir)?;
    write_json(&dir.join("bundles.json"), &bundles)?;
    println!("{}", index.display());
    Ok(())
}
