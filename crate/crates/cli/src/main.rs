//! `bpnn` command-line driver.
//!
//! Exit codes: 0 success, 1 oracle check failed, 2 configuration error,
//! 3 data error, 4 numeric failure. Errors print one line to stderr of the
//! form `error[<kind>]: <message>`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use bpnn::analysis::{
    grad_check_layers, model_equivalence, CostReport, GradCheckOptions,
    DEFAULT_BATCH, DEFAULT_EQUIV_TOLERANCE, GRAD_CHECK_INIT_STD, DEFAULT_GRAD_TOLERANCE, DEFAULT_TRIALS, DEFAULT_WIDTH,
};
use bpnn::data::{synth_blobs, synth_copy_sequences, write_idx, DataSource, Dataset, IdxArray, IdxData};
use bpnn::network::{train, Splits};
use bpnn::{ArchitectureConfig, Error, Model, Rng, Scalar};

#[derive(Parser)]
#[command(name = "bpnn", version, about = "Bilinear-projection neural networks")]
struct Cli {
    /// Log progress (per-epoch metrics) to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Blobs,
    Seq,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, model.bpnn and cost_report.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// synth:blobs:..., synth:seq:..., idx:DIR or cifar10:DIR
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
    },
    /// Print `loss=<v> acc=<v>` for a saved model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: String,
        /// Partition to evaluate; defaults to test when the data has one,
        /// validation otherwise.
        #[arg(long, value_enum)]
        split: Option<Split>,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
    },
    /// Finite-difference gradient check of every parameter.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GRAD_TOLERANCE)]
        tolerance: f64,
        /// Probe at most this many scalars per tensor.
        #[arg(long)]
        max_probes: Option<usize>,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        /// Initialization scale of the probed parameters; tiny weights push
        /// gradients below what step-1e-6 differences can resolve.
        #[arg(long, default_value_t = GRAD_CHECK_INIT_STD)]
        init_std: f64,
    },
    /// Bilinear layers versus their expanded full projections.
    Equivcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = DEFAULT_EQUIV_TOLERANCE)]
        tolerance: f64,
    },
    /// Trainable parameter report (CSV).
    Params {
        #[arg(long)]
        config: PathBuf,
        /// Leave out the final classifier (last layer with parameters).
        #[arg(long)]
        exclude_last: bool,
        #[arg(long)]
        table: bool,
    },
    /// Forward FLOPs report (CSV), per sample.
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// Per-sample input shape such as `32x32x3`; defaults to the
        /// config input.
        #[arg(long)]
        input: Option<String>,
        #[arg(long)]
        table: bool,
    },
    /// Activation memory report (CSV).
    Memory {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BATCH)]
        batch: usize,
        /// Bytes per element.
        #[arg(long, default_value_t = DEFAULT_WIDTH)]
        width: usize,
        #[arg(long)]
        table: bool,
    },
    /// Write a synthetic dataset as IDX files (train-images.idx,
    /// train-labels.idx) into a directory.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Samples per class (blobs) or in total (seq).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        spread: f64,
        #[arg(long, default_value_t = 8)]
        vocab: usize,
        #[arg(long, default_value_t = 5)]
        len: usize,
    },
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    kind: &'static str,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Config { .. } | Error::Build(_) | Error::Param(_) | Error::Usage(_) => (2, "config"),
            Error::Numeric { .. } => (4, "numeric"),
            _ => (3, "data"),
        };
        Failure { code, kind, msg: e.to_string() }
    }
}

fn check_failed(msg: impl Into<String>) -> Failure {
    Failure { code: 1, kind: "check", msg: msg.into() }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: &PathBuf) -> Result<ArchitectureConfig, Failure> {
    Ok(ArchitectureConfig::from_path(path)?)
}

fn data_error(msg: String) -> Failure {
    Error::Data(msg).into()
}

fn cmd_train<S: Scalar>(config: PathBuf, data: &str, out: PathBuf, seed: Option<u64>) -> CmdResult {
    let mut config = load_config(&config)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let mut model = Model::<S>::build(&config)?;
    let source: DataSource = data.parse()?;
    let splits = Splits::prepare(&config, source.load()?)?;
    std::fs::create_dir_all(&out).map_err(|e| data_error(format!("{}: {e}", out.display())))?;
    let history = train(&mut model, &splits.train, &splits.val)?;
    let write = |name: &str, bytes: &[u8]| {
        let path = out.join(name);
        std::fs::write(&path, bytes).map_err(|e| data_error(format!("{}: {e}", path.display())))
    };
    write("metrics.csv", history.to_csv().as_bytes())?;
    write("model.bpnn", &model.to_bytes())?;
    let report = CostReport::new(&model, None, DEFAULT_BATCH, DEFAULT_WIDTH)?;
    write("cost_report.csv", report.to_csv().as_bytes())?;
    if let Some(best) = history.best() {
        println!(
            "best epoch {}: val_loss={} val_acc={}",
            best.epoch, best.val_loss, best.val_acc
        );
    } else {
        println!("no epochs run; saved the initialization");
    }
    Ok(())
}

fn cmd_eval<S: Scalar>(model: PathBuf, data: &str, split: Option<Split>) -> CmdResult {
    let mut model = Model::<S>::load(&model)?;
    let source: DataSource = data.parse()?;
    let config = model.config().clone();
    let splits = Splits::prepare(&config, source.load()?)?;
    let split = split.unwrap_or(if splits.test.is_some() { Split::Test } else { Split::Val });
    let set = match split {
        Split::Train => splits.train,
        Split::Val => splits.val,
        Split::Test => splits
            .test
            .ok_or_else(|| data_error("the data source has no test partition".into()))?,
        Split::All => Dataset::concat(vec![splits.train, splits.val])?,
    };
    let (loss, acc) = model.evaluate(&set)?;
    println!("loss={loss} acc={acc}");
    Ok(())
}

fn cmd_gradcheck(
    config: PathBuf,
    tolerance: f64,
    max_probes: Option<usize>,
    samples: usize,
    init_std: f64,
) -> CmdResult {
    let mut config = load_config(&config)?;
    config.init_std = init_std;
    config.validate()?;
    let model = Model::<f64>::build(&config)?;
    let mut rng = Rng::seed(config.seed ^ 0x6772_6164);
    let opts = GradCheckOptions { tolerance, max_probes, ..GradCheckOptions::default() };
    let reports = grad_check_layers(&model, samples, &mut rng, &opts)?;
    if reports.is_empty() {
        println!("no trainable parameters: vacuous pass");
        return Ok(());
    }
    println!("layer,tensor,worst_rel_error,analytic,numeric,probes,excluded");
    for c in reports.iter().flat_map(|(_, r)| &r.checks) {
        let (a, n) = c.worst_at.map_or((0.0, 0.0), |(_, a, n)| (a, n));
        println!(
            "{},{},{:e},{a:e},{n:e},{},{}",
            c.layer_name, c.tensor, c.worst, c.probes, c.excluded
        );
    }
    let mut failed = Vec::new();
    for (layer, report) in &reports {
        let verdict = if report.passed() { "ok" } else { "FAIL" };
        if !report.passed() {
            failed.push(layer.as_str());
        }
        println!("# {layer}: worst {:e} {verdict}", report.worst());
    }
    if failed.is_empty() {
        println!("gradcheck passed (tolerance {tolerance:e})");
        Ok(())
    } else {
        Err(check_failed(format!(
            "gradient check failed for {} at tolerance {tolerance:e}",
            failed.join(", ")
        )))
    }
}

fn cmd_equivcheck(config: PathBuf, trials: usize, tolerance: f64) -> CmdResult {
    let config = load_config(&config)?;
    let model = Model::<f64>::build(&config)?;
    let mut rng = Rng::seed(config.seed ^ 0x6571_7569);
    let results = model_equivalence(&model, trials.max(1), tolerance, &mut rng)?;
    println!("layer,max_deviation,samples,status");
    let mut checked = 0;
    let mut failed = Vec::new();
    for (name, report) in &results {
        match report {
            None => println!("{name},-,0,skipped"),
            Some(r) => {
                checked += 1;
                let status = if r.passed() { "ok" } else { "FAIL" };
                if !r.passed() {
                    failed.push(name.clone());
                }
                println!("{name},{:e},{},{status}", r.max_deviation, r.samples);
            }
        }
    }
    if checked == 0 {
        println!("no bilinear layers: vacuous pass");
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(check_failed(format!("equivalence failed for {}", failed.join(", "))))
    }
}

fn emit(report: &CostReport, table: bool) {
    if table {
        print!("{}", report.to_table());
    } else {
        print!("{}", report.to_csv());
    }
}

fn parse_shape(text: &str) -> Result<Vec<usize>, Failure> {
    text.split(['x', ','])
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .ok()
        .filter(|s| !s.is_empty() && !s.contains(&0))
        .ok_or_else(|| {
            Error::Config { path: "--input".into(), msg: format!("bad shape `{text}`") }.into()
        })
}

fn cmd_synth(
    kind: SynthKind,
    out: PathBuf,
    seed: u64,
    n: Option<usize>,
    (classes, dim, spread, vocab, len): (usize, usize, f64, usize, usize),
) -> CmdResult {
    let mut rng = Rng::seed(seed);
    let data = match kind {
        SynthKind::Blobs => synth_blobs(&mut rng, classes, dim, n.unwrap_or(250), spread)?,
        SynthKind::Seq => synth_copy_sequences(&mut rng, vocab, len, n.unwrap_or(2000))?,
    };
    let labels = data.targets.labels().unwrap_or(&[]);
    let bytes: Vec<u8> = labels
        .iter()
        .map(|&l| u8::try_from(l))
        .collect::<Result<_, _>>()
        .map_err(|_| data_error("labels above 255 do not fit an idx byte file".into()))?;
    std::fs::create_dir_all(&out).map_err(|e| data_error(format!("{}: {e}", out.display())))?;
    let features = IdxArray::new(
        data.features.shape().to_vec(),
        IdxData::F64(data.features.data().to_vec()),
    )?;
    write_idx(out.join("train-images.idx"), &features)?;
    write_idx(out.join("train-labels.idx"), &IdxArray::new(vec![bytes.len()], IdxData::U8(bytes))?)?;
    println!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Train { config, data, out, seed, precision } => match precision {
            Precision::F64 => cmd_train::<f64>(config, &data, out, seed),
            Precision::F32 => cmd_train::<f32>(config, &data, out, seed),
        },
        Command::Eval { model, data, split, precision } => match precision {
            Precision::F64 => cmd_eval::<f64>(model, &data, split),
            Precision::F32 => cmd_eval::<f32>(model, &data, split),
        },
        Command::Gradcheck { config, tolerance, max_probes, samples, init_std } => {
            cmd_gradcheck(config, tolerance, max_probes, samples, init_std)
        }
        Command::Equivcheck { config, trials, tolerance } => cmd_equivcheck(config, trials, tolerance),
        Command::Params { config, exclude_last, table } => {
            let model = Model::<f64>::build(&load_config(&config)?)?;
            let mut report = CostReport::new(&model, None, DEFAULT_BATCH, DEFAULT_WIDTH)?;
            if exclude_last {
                if let Some(i) = report.rows.iter().rposition(|r| r.params > 0) {
                    report.rows.remove(i);
                }
            }
            emit(&report, table);
            Ok(())
        }
        Command::Flops { config, input, table } => {
            let model = Model::<f64>::build(&load_config(&config)?)?;
            let input = input.as_deref().map(parse_shape).transpose()?;
            emit(&CostReport::new(&model, input.as_deref(), DEFAULT_BATCH, DEFAULT_WIDTH)?, table);
            Ok(())
        }
        Command::Memory { config, batch, width, table } => {
            let model = Model::<f64>::build(&load_config(&config)?)?;
            emit(&CostReport::new(&model, None, batch, width)?, table);
            Ok(())
        }
        Command::Synth { kind, out, seed, n, classes, dim, spread, vocab, len } => {
            cmd_synth(kind, out, seed, n, (classes, dim, spread, vocab, len))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = f.msg.replace('\n', " ");
            eprintln!("error[{}]: {msg}", f.kind);
            ExitCode::from(f.code)
        }
    }
}
