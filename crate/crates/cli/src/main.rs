use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use nanocnn::bench::{bench_inference, DEFAULT_BATCH, DEFAULT_REPEATS, EXPECTED_TEST_SIZE};
use nanocnn::data::{load_cifar10_dir, load_mnist_dir, Dataset};
use nanocnn::optim::SamConfig;
use nanocnn::regularizers::{CutoutConfig, MixupConfig};
use nanocnn::train::{evaluate, train, MetricsWriter, OneCycleConfig, TrainConfig, DEFAULT_SWA_FRACTION};
use nanocnn::zoo::{self, checkpoint, ArchName, SeSettings};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Debug, Parser)]
#[command(name = "nanocnn", version, about = "Train and benchmark small CNNs on MNIST and CIFAR-10")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print a model's parameter count; exit 0 iff it matches the declared total.
    Params { model: String },
    /// Train a model and write config.json, metrics.jsonl and final.ckpt to --out.
    Train(TrainArgs),
    /// Test-set accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        test_limit: Option<usize>,
    },
    /// Single-thread inference latency over the test set.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BATCH)]
        batch: usize,
        #[arg(long, default_value_t = DEFAULT_REPEATS)]
        repeats: usize,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        test_limit: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Constant learning rate (ignored with --one-cycle).
    #[arg(long, default_value_t = nanocnn::train::DEFAULT_LR)]
    lr: f64,
    #[arg(long)]
    one_cycle: bool,
    #[arg(long, default_value_t = nanocnn::train::DEFAULT_ONE_CYCLE_LR_MAX)]
    lr_max: f64,
    #[arg(long)]
    cutout: bool,
    #[arg(long)]
    blurpool: bool,
    #[arg(long)]
    se: bool,
    #[arg(long)]
    mixup: bool,
    #[arg(long, value_name = "ALPHA")]
    label_smoothing: Option<f64>,
    #[arg(long, value_name = "RHO")]
    sam: Option<f64>,
    #[arg(long)]
    swa: bool,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn load_data(model: &str, dir: &Path) -> anyhow::Result<(Dataset, Dataset)> {
    let loaded = if model.starts_with("cifar") {
        load_cifar10_dir(dir)
    } else {
        load_mnist_dir(dir)
    };
    loaded.with_context(|| format!("loading data from {}", dir.display()))
}

fn params(model: &str) -> Result<ExitCode, Failure> {
    let arch: ArchName = model.parse().map_err(|e: zoo::ZooError| Failure::Usage(e.to_string()))?;
    let mut rng = nanocnn::Rng::new(0);
    let built = zoo::build_named::<f32>(model, &mut rng).map_err(|e| Failure::Runtime(e.into()))?;
    let count = zoo::count_params(&built);
    println!("{count}");
    let declared = zoo::declared_params(&arch.base).map_err(|e| Failure::Runtime(e.into()))?;
    if count == declared {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: {model} has {count} parameters, declared total is {declared}");
        Ok(ExitCode::from(1))
    }
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode, Failure> {
    zoo::arch_spec(&a.model).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut cfg = TrainConfig::baseline(&a.model, a.epochs, a.seed);
    cfg.batch_size = a.batch_size;
    cfg.lr = a.lr;
    cfg.one_cycle = a.one_cycle.then(|| OneCycleConfig {
        lr_max: a.lr_max,
        ..OneCycleConfig::default()
    });
    cfg.cutout = a.cutout.then(CutoutConfig::default);
    cfg.blurpool = a.blurpool;
    cfg.se = a.se.then(SeSettings::default);
    cfg.mixup = a.mixup.then(MixupConfig::default);
    cfg.label_smoothing = a.label_smoothing;
    cfg.sam = a.sam.map(|rho| SamConfig { rho });
    cfg.swa = a.swa.then_some(DEFAULT_SWA_FRACTION);
    cfg.max_steps = a.max_steps;
    cfg.train_limit = a.train_limit;
    cfg.test_limit = a.test_limit;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let (train_set, test_set) = load_data(&a.model, &a.data_dir)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("config.json"), serde_json::to_string_pretty(&cfg).context("config")? + "\n")
        .context("writing config.json")?;
    let mut writer = MetricsWriter::create(&a.out).context("opening metrics")?;
    let outcome = train(&cfg, &train_set, &test_set, Some(&mut writer)).context("training")?;
    let ckpt = a.out.join("final.ckpt");
    checkpoint::save(&outcome.model, &ckpt).with_context(|| format!("writing {}", ckpt.display()))?;
    for m in &outcome.metrics {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train {:.4}  test {:.4}  lr {:.5}  {:.1}s",
            m.epoch, m.train_loss, m.train_acc, m.test_acc, m.lr_at_epoch_end, m.wall_seconds
        );
    }
    println!("{}", serde_json::json!({
        "model": outcome.model.name(),
        "steps": outcome.steps,
        "test_acc": outcome.final_test_acc,
        "out": a.out,
    }));
    Ok(ExitCode::SUCCESS)
}

fn load_for_eval(ckpt: &Path, data_dir: &Path, limit: Option<usize>) -> anyhow::Result<(zoo::Model<f32>, Dataset)> {
    let model = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let (_, test) = load_data(model.spec().name.as_str(), data_dir)?;
    Ok((model, test.head(limit.unwrap_or(usize::MAX))))
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    match cli.command {
        Command::Params { model } => params(&model),
        Command::Train(a) => train_cmd(a),
        Command::Eval {
            ckpt,
            data_dir,
            test_limit,
        } => {
            let (mut model, test) = load_for_eval(&ckpt, &data_dir, test_limit)?;
            let acc = evaluate(&mut model, &test, 500).context("evaluating")?;
            println!("{acc}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench {
            ckpt,
            data_dir,
            batch,
            repeats,
            json,
            test_limit,
        } => {
            if repeats < 3 || batch == 0 {
                return Err(Failure::Usage("bench needs --repeats >= 3 and --batch >= 1".into()));
            }
            let (mut model, test) = load_for_eval(&ckpt, &data_dir, test_limit)?;
            if test.len() != EXPECTED_TEST_SIZE {
                eprintln!("warning: test set has {} examples, not {EXPECTED_TEST_SIZE}", test.len());
            }
            let size = checkpoint::model_size_bytes(&ckpt).context("checkpoint size")?;
            let report = bench_inference(&mut model, &test, batch, repeats, size).context("benchmark")?;
            let text = serde_json::to_string_pretty(&report).context("report")?;
            match json {
                Some(p) => std::fs::write(&p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
                None => println!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", one_line(msg.lines().next().unwrap_or("usage error")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {}", one_line(&m));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::from(1)
        }
    }
}
