use std::fs::{self, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mtprompt::checkpoint::Checkpoint;
use mtprompt::config::{Preset, RunConfig};
use mtprompt::dataset::{encode_pnm, read_dataset, read_intrinsics, read_ppm, write_dataset};
use mtprompt::gradcheck::suite::run_suite;
use mtprompt::gradcheck::{GradCheckOptions, Precision};
use mtprompt::inference::{evaluate, predict, BoxRecord};
use mtprompt::scene::{generate_all, GenSpec};
use mtprompt::train::{recalibrate_bn, train, LossLog};
use mtprompt::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mtprompt",
    version,
    about = "Multi-task prompting on synthetic driving scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: usize,
        #[arg(long)]
        seed: u64,
        /// Image size as HxW.
        #[arg(long, default_value = "64x128", value_parser = parse_size)]
        size: (usize, usize),
    },
    /// Train a model and write its checkpoint.
    Train {
        /// JSON run configuration; defaults to the preset.
        #[arg(long, value_parser = existing_file)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PresetArg::Desk, conflicts_with = "config")]
        preset: PresetArg,
        /// Required to actually run the paper-scale preset.
        #[arg(long)]
        i_have_a_gpu_cluster: bool,
        #[arg(long, value_parser = existing_dir)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss log (CSV); defaults to the checkpoint path with a `.csv` extension.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from this checkpoint; its configuration is used.
        #[arg(long, value_parser = existing_file)]
        resume: Option<PathBuf>,
        /// Overrides the configured iteration count.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset and write the JSON report.
    Eval {
        #[arg(long, value_parser = existing_file)]
        ckpt: PathBuf,
        #[arg(long, value_parser = existing_dir)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Predict all three tasks for one image.
    Predict {
        #[arg(long, value_parser = existing_file)]
        ckpt: PathBuf,
        /// Binary PPM (P6) image.
        #[arg(long, value_parser = existing_file)]
        image: PathBuf,
        /// `meta.json` supplying the camera; otherwise the generator's camera for the image size.
        #[arg(long, value_parser = existing_file)]
        meta: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = PrecisionArg::Both)]
        precision: PrecisionArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
    Both,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW, e.g. 64x128")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(h)?, p(w)?))
}

fn existing_file(s: &str) -> std::result::Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_file() {
        Ok(p)
    } else {
        Err(format!("no such file: {s}"))
    }
}

fn existing_dir(s: &str) -> std::result::Result<PathBuf, String> {
    let p = PathBuf::from(s);
    if p.is_dir() {
        Ok(p)
    } else {
        Err(format!("no such directory: {s}"))
    }
}

/// Outcome that maps to an exit code: refusals are usage errors.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn gen_data(out: &Path, scenes: usize, seed: u64, (height, width): (usize, usize)) -> Result<()> {
    let spec = GenSpec {
        seed,
        num_scenes: scenes,
        height,
        width,
        ..GenSpec::default()
    };
    let samples = generate_all(&spec)?;
    write_dataset(out, &samples)?;
    println!("wrote {} scenes to {}", samples.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    config: Option<PathBuf>,
    preset: PresetArg,
    ack: bool,
    data: &Path,
    out: &Path,
    log: Option<PathBuf>,
    resume: Option<PathBuf>,
    iterations: Option<usize>,
) -> std::result::Result<(), Failure> {
    let mut ck = match (&resume, &config) {
        (Some(r), _) => Checkpoint::load(r)?,
        (None, Some(c)) => Checkpoint::init(RunConfig::load(c)?)?,
        (None, None) => {
            let p = match preset {
                PresetArg::Desk => Preset::Desk,
                PresetArg::Paper => Preset::Paper,
            };
            let cfg = RunConfig::preset(p);
            if p == Preset::Paper && !ack {
                println!("{}", cfg.to_json()?);
                return Err(Failure::Usage(
                    "the paper preset needs a GPU cluster; pass --i-have-a-gpu-cluster to run it anyway \
                     (its values are printed above)"
                        .into(),
                ));
            }
            Checkpoint::init(cfg)?
        }
    };
    if let Some(n) = iterations {
        ck.config.iterations = n;
    }
    let samples = read_dataset(data)?;
    let log_path = log.unwrap_or_else(|| out.with_extension("csv"));
    let append = resume.is_some() && log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let mut log = if append {
        LossLog::append(BufWriter::new(file))
    } else {
        LossLog::new(BufWriter::new(file)).map_err(io_err(&log_path))?
    };
    let interval = ck.config.eval_interval;
    let total = ck.config.iterations;
    train(&mut ck, &samples, |ck, b| {
        log.row(ck.iteration, b).map_err(io_err(&log_path))?;
        if ck.iteration % interval == 0 || ck.iteration == total {
            log.flush().map_err(io_err(&log_path))?;
            ck.save(out)?;
            log::info!("iteration {}/{total}: total loss {:.5}", ck.iteration, b.total);
        }
        Ok(())
    })?;
    log.flush().map_err(io_err(&log_path))?;
    recalibrate_bn(&mut ck, &samples)?;
    ck.save(out)?;
    println!("trained to iteration {}; checkpoint {}", ck.iteration, out.display());
    Ok(())
}

fn run_eval(ckpt: &Path, data: &Path, report: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let samples = read_dataset(data)?;
    let rep = evaluate(&ck, &samples)?;
    let json = rep.to_json()?;
    fs::write(report, format!("{json}\n")).map_err(io_err(report))?;
    println!("{json}");
    Ok(())
}

fn run_predict(ckpt: &Path, image: &Path, meta: Option<&Path>, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let img = read_ppm(image)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let k = match meta {
        Some(m) => read_intrinsics(m)?,
        None => GenSpec {
            height: h,
            width: w,
            ..GenSpec::default()
        }
        .intrinsics(),
    };
    let p = predict(&ck, &[&img], &[k])?.remove(0);
    fs::create_dir_all(out).map_err(io_err(out))?;
    let write = |name: &str, bytes: &[u8]| {
        let path = out.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))
    };
    write("semseg.pgm", &encode_pnm("P5", w, h, &p.semseg))?;
    let depth: Vec<u8> = p.depth.iter().flat_map(|d| d.to_le_bytes()).collect();
    write("depth.bin", &depth)?;
    let boxes: Vec<BoxRecord> = p.boxes.iter().map(BoxRecord::from).collect();
    write(
        "boxes.json",
        format!("{}\n", serde_json::to_string_pretty(&boxes)?).as_bytes(),
    )?;
    println!("{} boxes; outputs in {}", boxes.len(), out.display());
    Ok(())
}

fn run_gradcheck(precision: PrecisionArg) -> Result<bool> {
    let ps: &[Precision] = match precision {
        PrecisionArg::F32 => &[Precision::F32],
        PrecisionArg::F64 => &[Precision::F64],
        PrecisionArg::Both => &[Precision::F32, Precision::F64],
    };
    let mut ok = true;
    for &p in ps {
        for r in run_suite(p, &GradCheckOptions::default())? {
            let status = if r.passed() { "ok" } else { "FAIL" };
            println!(
                "{status:4} {:20} {:?} rel err {:.2e} (bound {:.0e}, {} coords)",
                r.name,
                p,
                r.max_rel_err,
                p.tolerance(),
                r.checked
            );
            ok &= r.passed();
        }
    }
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result: std::result::Result<(), Failure> = match cli.command {
        Command::GenData {
            out,
            scenes,
            seed,
            size,
        } => gen_data(&out, scenes, seed, size).map_err(Failure::from),
        Command::Train {
            config,
            preset,
            i_have_a_gpu_cluster,
            data,
            out,
            log,
            resume,
            iterations,
        } => run_train(
            config,
            preset,
            i_have_a_gpu_cluster,
            &data,
            &out,
            log,
            resume,
            iterations,
        ),
        Command::Eval { ckpt, data, report } => run_eval(&ckpt, &data, &report).map_err(Failure::from),
        Command::Predict { ckpt, image, meta, out } => {
            run_predict(&ckpt, &image, meta.as_deref(), &out).map_err(Failure::from)
        }
        Command::Gradcheck { precision } => match run_gradcheck(precision) {
            Ok(true) => Ok(()),
            Ok(false) => Err(Failure::Runtime(Error::Contract("gradient check failed".into()))),
            Err(e) => Err(e.into()),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
