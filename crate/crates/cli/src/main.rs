use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use linearconv::accounting::{alpha_sweep, cost_report, format_billions, format_millions};
use linearconv::correlation::correlation_report;
use linearconv::data::{load_dir, DatasetKind};
use linearconv::models::{ArchSpec, FilterSet, Model, Variant};
use linearconv::training::{evaluate, metrics_row, Checkpoint, TrainConfig, Trainer, METRICS_HEADER};
use linearconv::{Alpha, DType, Error, Scalar};

#[derive(Parser)]
#[command(name = "linearconv", version, about = "Train, fold and account for LinearConv networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus metrics.csv under --out.
    Train(TrainArgs),
    /// Test accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Materialize LinearConv weights into plain convolutions.
    Fold {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer parameter and FLOP table.
    Report(ReportArgs),
    /// Totals of the full-coefficient variant for each alpha in a grid.
    SweepAlpha {
        #[arg(long, default_value = "base")]
        arch: String,
        #[arg(long, default_value = "0.125,0.25,0.5,0.75,0.875")]
        grid: String,
        #[arg(long)]
        input_channels: Option<usize>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Export the filter correlation matrix of one conv layer.
    InspectCorr {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 1-based conv layer.
        #[arg(long)]
        layer: usize,
        #[arg(long, value_enum, default_value_t = Which::Primary)]
        which: Which,
        /// Output file; `.csv` or `.pgm`.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantName {
    Conv,
    Linear,
    LinearLowrank,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Primary,
    Secondary,
    Composed,
}

#[derive(Args)]
struct ModelArgs {
    /// `base`, `vgg11` or `file:PATH`.
    #[arg(long, default_value = "base")]
    arch: String,
    #[arg(long, value_enum)]
    variant: Option<VariantName>,
    #[arg(long, default_value = "0.5")]
    alpha: String,
    #[arg(long, default_value_t = 10)]
    rank: usize,
    /// Keep conv layer 1 a plain convolution.
    #[arg(long)]
    keep_first: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "mnist")]
    dataset: String,
    /// Overrides the DATA_DIR environment variable.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-2)]
    lambda: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 5)]
    decay_period: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    f64: bool,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "mnist")]
    dataset: String,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    input_channels: Option<usize>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Error plus the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Dimension { .. } | Error::Shape { .. } | Error::Geometry { .. } => 2,
            Error::Format { .. } | Error::Io(_) | Error::Checkpoint(_) => 3,
            Error::Numerical(_) | Error::NonFinite { .. } | Error::DegenerateFilter { .. } => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: msg.into(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Fold { checkpoint, out } => fold(&checkpoint, &out),
        Command::Report(args) => report(args),
        Command::SweepAlpha {
            arch,
            grid,
            input_channels,
            csv,
        } => sweep(&arch, &grid, input_channels, csv.as_deref()),
        Command::InspectCorr {
            checkpoint,
            layer,
            which,
            out,
        } => inspect(&checkpoint, layer, which, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn base_arch(name: &str) -> CliResult<ArchSpec> {
    match name {
        "base" => Ok(ArchSpec::base()),
        "vgg11" => Ok(ArchSpec::vgg11()),
        other => match other.strip_prefix("file:") {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| usage(format!("--arch {other}: {e}")))?;
                Ok(ArchSpec::parse(&text)?)
            }
            None => Err(usage(format!("--arch {other:?}: expected base, vgg11 or file:PATH"))),
        },
    }
}

fn parse_alpha(s: &str) -> CliResult<Alpha> {
    s.parse::<Alpha>().map_err(|e| usage(format!("--alpha {s}: {e}")))
}

/// Resolves the architecture flags and checks every layer.
fn arch_from(args: &ModelArgs, input_channels: Option<usize>) -> CliResult<ArchSpec> {
    let mut spec = base_arch(&args.arch)?;
    let alpha = parse_alpha(&args.alpha)?;
    if let Some(v) = args.variant {
        spec = spec.with_variant(match v {
            VariantName::Conv => Variant::Conv,
            VariantName::Linear => Variant::LinearFull { alpha },
            VariantName::LinearLowrank => Variant::LinearLowRank { alpha, rank: args.rank },
        });
    }
    if args.keep_first {
        if let Some(linearconv::models::LayerSpec::Conv(c)) = spec
            .layers
            .iter_mut()
            .find(|l| matches!(l, linearconv::models::LayerSpec::Conv(_)))
        {
            c.keep_conv = true;
        }
    }
    if let Some(c) = input_channels {
        spec = spec.with_input_channels(c);
    }
    spec.resolve()?;
    Ok(spec)
}

fn dataset_kind(s: &str) -> CliResult<DatasetKind> {
    s.parse::<DatasetKind>().map_err(|e| usage(format!("--dataset: {e}")))
}

fn data_dir(flag: Option<PathBuf>) -> CliResult<PathBuf> {
    flag.or_else(|| std::env::var_os("DATA_DIR").map(PathBuf::from))
        .ok_or_else(|| usage("no dataset directory: pass --data-dir or set DATA_DIR"))
}

/// Loading failures are data problems, whatever their error kind.
fn data_failure(e: Error) -> Failure {
    Failure {
        code: 3,
        message: e.to_string(),
    }
}

fn train(args: TrainArgs) -> CliResult {
    let kind = dataset_kind(&args.dataset)?;
    let spec = arch_from(&args.model, Some(kind.channels()))?;
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        decay_period: args.decay_period,
        lambda: args.lambda,
        seed: args.seed,
        deterministic: args.deterministic,
        precision: if args.f64 { DType::F64 } else { DType::F32 },
        augment: !args.no_augment,
        ..TrainConfig::default()
    };
    config.validate()?;
    if args.epochs == 0 {
        return Err(usage("--epochs must be at least 1"));
    }
    let dir = data_dir(args.data_dir.clone())?;
    fs::create_dir_all(&args.out)?;
    let provenance = json!({
        "command": "train",
        "arch": args.model.arch,
        "arch_text": spec.to_text(),
        "dataset": kind.to_string(),
        "data_dir": dir.display().to_string(),
        "alpha": args.model.alpha,
        "rank": args.model.rank,
        "train": config,
    });
    fs::write(
        args.out.join("config.json"),
        serde_json::to_string_pretty(&provenance).map_err(|e| usage(e.to_string()))? + "\n",
    )?;
    if args.f64 {
        run_training::<f64>(&spec, config, kind, &dir, &args.out)
    } else {
        run_training::<f32>(&spec, config, kind, &dir, &args.out)
    }
}

fn run_training<T: Scalar>(spec: &ArchSpec, config: TrainConfig, kind: DatasetKind, dir: &Path, out: &Path) -> CliResult {
    let (train, test) = load_dir::<T>(kind, dir).map_err(data_failure)?;
    eprintln!("loaded {} train / {} test samples from {}", train.len(), test.len(), dir.display());
    let model = Model::<T>::build(spec, config.seed)?;
    eprintln!("{} parameters", model.param_count());
    let epochs = config.epochs;
    let deterministic = config.deterministic;
    let mut trainer = Trainer::new(model, config)?;
    let mut metrics = fs::File::create(out.join("metrics.csv"))?;
    let mut timing = fs::File::create(out.join("timing.csv"))?;
    writeln!(metrics, "{METRICS_HEADER}")?;
    writeln!(timing, "epoch,seconds")?;
    let mut best = f64::NEG_INFINITY;
    let mut last = 0.0;
    for _ in 0..epochs {
        let m = trainer.train_epoch(&train)?;
        let ev = evaluate(trainer.model(), &test, 256)?;
        writeln!(metrics, "{}", metrics_row(&m, ev.accuracy, deterministic))?;
        writeln!(timing, "{},{:.3}", m.epoch, m.seconds)?;
        eprintln!(
            "epoch {:>3}  loss {:.4}  train {:.4}  test {:.4}  L_c {:.4}  lr {:e}  {:.1}s",
            m.epoch, m.train_loss, m.train_acc, ev.accuracy, m.corr_loss, m.lr, m.seconds
        );
        let ck = trainer.checkpoint();
        ck.save(&out.join("last.ckpt"))?;
        if ev.accuracy > best {
            best = ev.accuracy;
            ck.save(&out.join("best.ckpt"))?;
        }
        last = ev.accuracy;
    }
    println!("final test accuracy: {last:.4}");
    println!("best test accuracy: {best:.4}");
    Ok(())
}

/// Checkpoints store their precision; load in that precision.
fn checkpoint_dtype(path: &Path) -> CliResult<DType> {
    let bytes = fs::read(path)?;
    match bytes.get(12).copied().and_then(DType::from_code) {
        Some(d) if bytes.starts_with(linearconv::training::CHECKPOINT_MAGIC) => Ok(d),
        _ => Err(Error::Format {
            offset: 0,
            detail: format!("{} is not a checkpoint", path.display()),
        }
        .into()),
    }
}

fn eval(args: EvalArgs) -> CliResult {
    let kind = dataset_kind(&args.dataset)?;
    let dir = data_dir(args.data_dir)?;
    match checkpoint_dtype(&args.checkpoint)? {
        DType::F32 => eval_as::<f32>(&args.checkpoint, kind, &dir, args.batch_size),
        DType::F64 => eval_as::<f64>(&args.checkpoint, kind, &dir, args.batch_size),
    }
}

fn eval_as<T: Scalar>(path: &Path, kind: DatasetKind, dir: &Path, batch: usize) -> CliResult {
    let ck = Checkpoint::<T>::load(path)?;
    if ck.model.input_channels() != kind.channels() {
        return Err(usage(format!(
            "checkpoint expects {} input channels, {kind} has {}",
            ck.model.input_channels(),
            kind.channels()
        )));
    }
    let (_, test) = load_dir::<T>(kind, dir).map_err(data_failure)?;
    let ev = evaluate(&ck.model, &test, batch)?;
    println!("accuracy {:.4} ({}/{})  loss {:.6}", ev.accuracy, ev.correct, ev.total, ev.mean_loss);
    Ok(())
}

fn fold(path: &Path, out: &Path) -> CliResult {
    match checkpoint_dtype(path)? {
        DType::F32 => fold_as::<f32>(path, out),
        DType::F64 => fold_as::<f64>(path, out),
    }
}

fn fold_as<T: Scalar>(path: &Path, out: &Path) -> CliResult {
    let ck = Checkpoint::<T>::load(path)?;
    if !ck.model.has_linear_layers() {
        eprintln!("warning: {} has no LinearConv layers; nothing to fold", path.display());
        return Ok(());
    }
    let folded = Checkpoint {
        model: ck.model.fold()?,
        optimizer: None,
        ..ck
    };
    folded.save(out)?;
    println!("folded {} parameters into {}", folded.model.param_count(), out.display());
    Ok(())
}

fn report(args: ReportArgs) -> CliResult {
    let spec = arch_from(&args.model, args.input_channels)?;
    let r = cost_report(&spec)?;
    print!("{}", r.to_table());
    if let Some(path) = args.csv {
        fs::write(path, r.to_csv())?;
    }
    Ok(())
}

fn sweep(arch: &str, grid: &str, input_channels: Option<usize>, csv: Option<&Path>) -> CliResult {
    let mut spec = base_arch(arch)?;
    if let Some(c) = input_channels {
        spec = spec.with_input_channels(c);
    }
    let alphas = grid
        .split(',')
        .map(|s| parse_alpha(s.trim()))
        .collect::<CliResult<Vec<_>>>()?;
    let rows = alpha_sweep(&spec, &alphas)?;
    let mut text = String::from("alpha,params,inf_flops,train_flops\n");
    println!("{:>8} {:>12} {:>10} {:>16} {:>16}", "alpha", "params", "params(M)", "inf_flops", "train_flops");
    for r in &rows {
        println!(
            "{:>8} {:>12} {:>10} {:>16} {:>16}",
            format!("{:.3}", r.alpha.to_f64()),
            r.params,
            format_millions(r.params),
            format_billions(r.inference_flops),
            format_billions(r.training_flops)
        );
        text += &format!("{},{},{},{}\n", r.alpha.to_f64(), r.params, r.inference_flops, r.training_flops);
    }
    if let Some(path) = csv {
        fs::write(path, text)?;
    }
    Ok(())
}

fn inspect(path: &Path, layer: usize, which: Which, out: &Path) -> CliResult {
    let ext = out.extension().and_then(|e| e.to_str()).unwrap_or("");
    if ext != "csv" && ext != "pgm" {
        return Err(usage(format!("--out {}: expected a .csv or .pgm file", out.display())));
    }
    let filters = match checkpoint_dtype(path)? {
        DType::F32 => layer_filters::<f32>(path, layer, which)?.cast::<f64>(),
        DType::F64 => layer_filters::<f64>(path, layer, which)?,
    };
    let r = correlation_report(layer, &filters)?;
    if ext == "csv" {
        fs::write(out, r.to_csv())?;
    } else {
        fs::write(out, r.to_pgm())?;
    }
    println!(
        "layer {layer}: {} filters, L_c {:.6}, max |off-diagonal| {:.6}, numerical rank {}",
        r.filters,
        r.loss_contribution,
        r.max_off_diagonal(),
        r.numerical_rank
    );
    Ok(())
}

fn layer_filters<T: Scalar>(path: &Path, layer: usize, which: Which) -> CliResult<linearconv::Tensor<T>> {
    let ck = Checkpoint::<T>::load(path)?;
    let set = match which {
        Which::Primary => FilterSet::Primary,
        Which::Secondary => FilterSet::Secondary,
        Which::Composed => FilterSet::Composed,
    };
    Ok(ck.model.conv_filters(layer, set)?)
}
