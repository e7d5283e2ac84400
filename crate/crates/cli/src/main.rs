use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{CommandFactory, Parser, Subcommand};
use mhnet::complexity::emit_report;
use mhnet::degradation::{self, DegradeSpec};
use mhnet::io::{load_checkpoint, read_ppm, restore_image, write_ppm, Config, Image};
use mhnet::metrics::{ChannelMode, MetricReport};
use mhnet::model::{Model, ModelConfig};
use mhnet::trainer::{train, CheckpointPlan, Corpus, TrainConfig};
use mhnet::{selfcheck, Error};

#[derive(Parser)]
#[command(name = "mhnet", version, about = "Image restoration: inference, training and diagnostics")]
struct Cli {
    /// Repeat for more log output on stderr.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Restore a degraded image with a trained checkpoint.
    Restore {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Clean reference; prints quality metrics of the output.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Score on the luma channel only.
        #[arg(long, requires = "reference")]
        y: bool,
    },
    /// Train from `DIR/clean/*.ppm` and matching `DIR/degraded/*.ppm`.
    Train {
        /// key=value file with model and optimizer settings.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the previous save is kept as `<out>.prev`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        /// Check a single block.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 3)]
        trials: u64,
    },
    /// Count parameters and multiply-accumulates.
    Complexity {
        #[arg(long, default_value_t = 32)]
        width: usize,
        /// Input size as HxW.
        #[arg(long, default_value = "256x256")]
        size: Size,
        /// Write the per-layer table here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// PSNR and SSIM between two images.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Score on the luma channel only.
        #[arg(long)]
        y: bool,
    },
    /// Apply a synthetic degradation described by a key=value file.
    Degrade {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug)]
struct Size {
    height: usize,
    width: usize,
}

impl FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got '{s}'"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("'{v}': {e}"));
        Ok(Size {
            height: parse(h)?,
            width: parse(w)?,
        })
    }
}

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

enum Failure {
    Usage(String),
    Lib(Error),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn mode(y: bool) -> ChannelMode {
    if y {
        ChannelMode::Y
    } else {
        ChannelMode::Rgb
    }
}

/// Names the file in I/O errors.
fn at_path(path: &Path) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        e => e,
    }
}

fn read(path: &Path) -> mhnet::Result<Image> {
    read_ppm(path).map_err(at_path(path))
}

fn write(img: &Image, path: &Path) -> mhnet::Result<()> {
    write_ppm(img, path).map_err(at_path(path))
}

fn read_rgb(path: &Path) -> mhnet::Result<Image> {
    let img = read(path)?;
    if img.channels == 1 {
        log::warn!("{}: gray image replicated to three channels", path.display());
    }
    Ok(img.to_rgb())
}

fn restore(ckpt: &Path, input: &Path, out: &Path, reference: Option<&Path>, y: bool) -> Result<(), Failure> {
    let model = load_checkpoint(ckpt, None).map_err(at_path(ckpt))?;
    let img = read_rgb(input)?;
    let restored = restore_image(&model, &img)?;
    write(&restored, out)?;
    if let Some(r) = reference {
        let clean = read_rgb(r)?;
        let report = MetricReport::compute(&restored.to_tensor::<f64>(), &clean.to_tensor(), mode(y))?;
        println!("{report}");
    }
    Ok(())
}

fn run_training(config: &Path, data: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = Config::load(config).map_err(at_path(config))?;
    let known: Vec<&str> = ModelConfig::KEYS.iter().chain(TrainConfig::KEYS.iter()).copied().collect();
    cfg.check_known(&known)?;
    let model_cfg = ModelConfig::from_config(&cfg)?;
    let train_cfg = TrainConfig::from_config(&cfg)?;
    let corpus = Corpus::load_dir(data, train_cfg.patch).map_err(at_path(data))?;
    log::info!("{} training pairs, {} iterations", corpus.len(), train_cfg.iterations);
    let mut model = Model::new(&model_cfg, train_cfg.seed)?;
    let plan = CheckpointPlan {
        path: out,
        every: train_cfg.checkpoint_every,
    };
    match train(&mut model, &train_cfg, &corpus, Some(plan), |r| println!("{r}")) {
        Ok(_) => Ok(()),
        Err(Error::NonFinite(m)) => Err(Failure::Numeric(m)),
        Err(e) => Err(e.into()),
    }
}

fn gradcheck(module: Option<&str>, trials: u64) -> Result<(), Failure> {
    let reports = selfcheck::run(module, trials).map_err(|e| match e {
        Error::Invalid(m) => Failure::Usage(m),
        Error::NonFinite(m) => Failure::Numeric(m),
        e => Failure::Lib(e),
    })?;
    let mut failed = 0;
    for (name, r) in &reports {
        let ok = r.passes(selfcheck::TOLERANCE);
        failed += usize::from(!ok);
        println!(
            "module={name} max_rel_error={:.3e} checked={} skipped={} {}",
            r.max_rel_error,
            r.checked,
            r.skipped_kinks,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(Failure::Numeric(format!(
            "{failed} of {} checks above {:e}",
            reports.len(),
            selfcheck::TOLERANCE
        )));
    }
    Ok(())
}

fn complexity(width: usize, size: Size, csv: Option<&Path>) -> Result<(), Failure> {
    let model = Model::new(&ModelConfig::with_width(width), 0)?;
    let report = emit_report(&model.net, size.height, size.width)?;
    println!("{}", report.summary());
    for l in report.heaviest(5) {
        log::info!("{} params={} macs={}", l.name, l.params, l.macs);
    }
    if let Some(path) = csv {
        std::fs::write(path, report.to_csv()).map_err(|e| at_path(path)(e.into()))?;
    }
    Ok(())
}

fn metrics(reference: &Path, test: &Path, y: bool) -> Result<(), Failure> {
    let r = read_rgb(reference)?.to_tensor::<f64>();
    let t = read_rgb(test)?.to_tensor::<f64>();
    println!("{}", MetricReport::compute(&t, &r, mode(y))?);
    Ok(())
}

fn degrade(spec: &Path, input: &Path, out: &Path, seed: u64) -> Result<(), Failure> {
    let mut spec = DegradeSpec::from_config(&Config::load(spec).map_err(at_path(spec))?)?;
    spec.seed = seed;
    let clean = read(input)?.to_tensor::<f64>();
    let degraded = degradation::apply(&spec, &clean)?;
    write(&Image::from_tensor(&degraded)?, out)?;
    Ok(())
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Restore {
            ckpt,
            input,
            out,
            reference,
            y,
        } => restore(&ckpt, &input, &out, reference.as_deref(), y),
        Command::Train { config, data, out } => run_training(&config, &data, &out),
        Command::Gradcheck { module, trials } => gradcheck(module.as_deref(), trials),
        Command::Complexity { width, size, csv } => complexity(width, size, csv.as_deref()),
        Command::Metrics { reference, test, y } => metrics(&reference, &test, y),
        Command::Degrade {
            spec,
            input,
            out,
            seed,
        } => degrade(&spec, &input, &out, seed),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::Invalid(_) => EXIT_USAGE,
        _ => EXIT_IO,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            if text.contains("Usage:") {
                eprint!("{text}");
            } else {
                eprintln!("{}\n{}", text.trim_end(), Cli::command().render_usage());
            }
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}\n\n{}", Cli::command().render_usage());
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_NUMERIC)
        }
        Err(Failure::Lib(e)) => {
            if matches!(e, Error::Io(_)) {
                eprintln!("error: {e}\n\n{}", Cli::command().render_usage());
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
