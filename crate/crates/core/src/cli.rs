//! Command-line front end. [`run`] parses arguments, dispatches, and
//! returns the process exit code: 0 on success, 1 on usage or
//! configuration errors, 2 on data or model errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::coder::{decode_image, encode_image};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::eval::bd::{bd_rate, Metric, RdCurve};
use crate::eval::complexity::report_for;
use crate::eval::corpus::evaluate_corpus;
use crate::image_io;
use crate::interp::{write_ablations, write_bitmaps};
use crate::model::{Checkpoint, TreeCodec, LATENTS};
use crate::train::{train_loop, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "treecodec", version, about = "Tree-structured learned image codec")]
pub struct Cli {
    /// Seed for model initialisation and data order (config key `seed`, default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `key = value` config file; `default` means built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<String>,
    /// More log output.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    /// Machine-readable CSV on stdout.
    #[arg(long, global = true)]
    pub csv: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model for a λ pair.
    Train(TrainArgs),
    /// Compress an image to a `.tnbs` bitstream.
    Encode(CodecArgs),
    /// Reconstruct an image from a `.tnbs` bitstream.
    Decode(DecodeArgs),
    /// Rate and quality over an image directory, one RD point per model.
    Eval(EvalArgs),
    /// BD-rate between two curve CSV files.
    Bd(BdArgs),
    /// Per-module kMACs/pixel and parameter counts.
    Complexity(ComplexityArgs),
    /// Selective and accumulative latent propagation images.
    Ablate(AblateArgs),
    /// Per-latent bit allocation maps.
    Bitmap(BitmapArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training image directory (config key `data_dir`, default `data`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// λ pair index 0..=3 (config key `pair`, default 0).
    #[arg(long)]
    pub pair: Option<usize>,
    /// Rate-MSE tradeoff (config key `lambda1`, default 0.01).
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Rate-(1-MS-SSIM) tradeoff (config key `lambda2`, default 2.4).
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Batch size (config key `batch`, default 16).
    #[arg(long)]
    pub batch: Option<usize>,
    /// Square crop side, a multiple of 64 (config key `crop`, default 256).
    #[arg(long)]
    pub crop: Option<usize>,
    /// Adam learning rate (config key `lr`, default 1e-4).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs over the corpus (config key `epochs`, default 50).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many steps; 0 means use epochs (config key `steps`, default 0).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Steps between periodic checkpoints (config key `checkpoint_every`, default 500).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from a checkpoint with optimiser state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CodecArgs {
    /// Weight file (`.tnwt`).
    #[arg(long)]
    pub model: PathBuf,
    /// PNG or PPM image.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory; writes `<input stem>.tnbs`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    /// Weight file (`.tnwt`).
    #[arg(long)]
    pub model: PathBuf,
    /// Bitstream (`.tnbs`).
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory; writes `<input stem>.<format>`.
    #[arg(long)]
    pub out: PathBuf,
    /// Output image format.
    #[arg(long, default_value = "png", value_parser = ["png", "ppm"])]
    pub format: String,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Weight files, one RD point each.
    #[arg(long, required = true, num_args = 1..)]
    pub model: Vec<PathBuf>,
    /// Directory of test images.
    #[arg(long)]
    pub images: PathBuf,
    /// Directory for `eval_<k>.csv` and `curve.csv`; nothing is written when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Codec name in the curve CSV.
    #[arg(long, default_value = "treecodec")]
    pub name: String,
    /// Worker threads over images.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct BdArgs {
    /// Reference curve CSV (`codec,bpp,psnr,msssim`).
    #[arg(long)]
    pub base: PathBuf,
    /// Tested curve CSV.
    #[arg(long)]
    pub test: PathBuf,
    /// Quality metric: psnr or msssim.
    #[arg(long, default_value = "psnr")]
    pub metric: Metric,
}

#[derive(Args, Debug)]
pub struct ComplexityArgs {
    /// Reference height.
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    /// Reference width.
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    /// Weight file to report on instead of the configured architecture.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Directory for `complexity.txt` and `complexity.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Weight file (`.tnwt`).
    #[arg(long)]
    pub model: PathBuf,
    /// Image or directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for `<image>_sp<i>.png` and `<image>_ac<i>.png`.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads over images.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct BitmapArgs {
    /// Weight file (`.tnwt`).
    #[arg(long)]
    pub model: PathBuf,
    /// PNG or PPM image.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for `<image>_bitmap<i>.png` and `.minmax.txt` sidecars.
    #[arg(long)]
    pub out: PathBuf,
    /// Latent index 1..=4; all four when omitted.
    #[arg(long)]
    pub index: Option<usize>,
}

/// Where human output and the resolved configuration go.
struct Output<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
    csv: bool,
}

impl Output<'_> {
    fn config(&mut self, text: &str) -> Result<()> {
        let sink: &mut dyn Write = if self.csv { &mut *self.err } else { &mut *self.out };
        for line in text.lines() {
            writeln!(sink, "# {line}")?;
        }
        Ok(())
    }
}

fn is_usage(e: &Error) -> bool {
    matches!(
        e,
        Error::ConfigSyntax { .. } | Error::UnknownConfigKeys(_) | Error::ConfigValue { .. } | Error::InvalidArgument(_)
    )
}

/// Parse `args` (including the program name) and run the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    let level = if cli.verbose { "debug" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let mut io = Output { out, err, csv: cli.csv };
    match dispatch(&cli, &mut io) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(io.err, "error: {e}");
            if is_usage(&e) {
                1
            } else {
                2
            }
        }
    }
}

/// Config file entries, with `--seed` applied on top.
fn base_config(cli: &Cli) -> Result<KeyValues> {
    let mut kv = match cli.config.as_deref() {
        None | Some("default") => KeyValues::default(),
        Some(path) => KeyValues::load(Path::new(path))?,
    };
    if let Some(s) = cli.seed {
        kv.set("seed", s);
    }
    Ok(kv)
}

/// Resolve a full training configuration (file, then flags).
fn resolve(cli: &Cli, overrides: &[(&str, Option<String>)]) -> Result<TrainConfig> {
    let mut kv = base_config(cli)?;
    for (k, v) in overrides {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    let mut cfg = TrainConfig::default();
    cfg.apply(&mut kv)?;
    kv.finish()?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    log::debug!("loaded {} ({} parameters)", path.display(), crate::nn::Module::num_params(&ck.model));
    Ok(ck)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into())
}

fn dispatch(cli: &Cli, io: &mut Output<'_>) -> Result<()> {
    match &cli.command {
        Command::Train(a) => {
            let cfg = resolve(
                cli,
                &[
                    ("data_dir", a.data.as_ref().map(|p| p.display().to_string())),
                    ("pair", a.pair.map(|v| v.to_string())),
                    ("lambda1", a.lambda1.map(|v| v.to_string())),
                    ("lambda2", a.lambda2.map(|v| v.to_string())),
                    ("batch", a.batch.map(|v| v.to_string())),
                    ("crop", a.crop.map(|v| v.to_string())),
                    ("lr", a.lr.map(|v| v.to_string())),
                    ("epochs", a.epochs.map(|v| v.to_string())),
                    ("steps", a.steps.map(|v| v.to_string())),
                    ("checkpoint_every", a.checkpoint_every.map(|v| v.to_string())),
                ],
            )?;
            io.config(&cfg.to_text())?;
            let path = train_loop(&cfg, &a.out, a.resume.as_deref())?;
            writeln!(io.out, "final checkpoint: {}", path.display())?;
        }
        Command::Encode(a) => {
            io.config(&resolve(cli, &[])?.to_text())?;
            let ck = load_model(&a.model)?;
            let img = image_io::load::<f32>(&a.input)?;
            let enc = encode_image(&ck.model, &img, ck.lambda_index)?;
            std::fs::create_dir_all(&a.out)?;
            let path = a.out.join(format!("{}.tnbs", stem(&a.input)));
            std::fs::write(&path, &enc.bytes)?;
            if io.csv {
                writeln!(io.out, "file,bytes,bpp\n{},{},{}", path.display(), enc.bytes.len(), enc.bpp())?;
            } else {
                writeln!(io.out, "{}: {} bytes, {:.4} bpp", path.display(), enc.bytes.len(), enc.bpp())?;
            }
        }
        Command::Decode(a) => {
            io.config(&resolve(cli, &[])?.to_text())?;
            let ck = load_model(&a.model)?;
            let bytes = std::fs::read(&a.input)?;
            let dec = decode_image(&ck.model, &bytes)?;
            let path = a.out.join(format!("{}.{}", stem(&a.input), a.format));
            image_io::save(&path, &dec.image()?)?;
            writeln!(io.out, "{}: {}x{}", path.display(), dec.header.width, dec.header.height)?;
        }
        Command::Eval(a) => {
            io.config(&resolve(cli, &[])?.to_text())?;
            let mut points = Vec::new();
            for (k, m) in a.model.iter().enumerate() {
                let ck = load_model(m)?;
                let ev = evaluate_corpus(&ck.model, &a.images, ck.lambda_index, a.jobs)?;
                if let Some(dir) = &a.out {
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(dir.join(format!("eval_{k}.csv")), ev.to_csv())?;
                }
                let mean = ev
                    .mean()
                    .ok_or_else(|| Error::EmptyCorpus(a.images.clone()))?;
                if io.csv {
                    write!(io.out, "{}", ev.to_csv())?;
                } else {
                    writeln!(
                        io.out,
                        "{}: {} images, bpp {:.4}, PSNR {:.2} dB, MS-SSIM {:.4}",
                        m.display(),
                        ev.images.len(),
                        mean.bpp,
                        mean.psnr,
                        mean.msssim
                    )?;
                }
                points.push(mean);
            }
            let curve = RdCurve::new(a.name.clone(), points)?;
            if let Some(dir) = &a.out {
                std::fs::write(dir.join("curve.csv"), curve.to_csv())?;
                let dat: String = curve.points.iter().map(|p| format!("{} {} {}\n", p.bpp, p.psnr, p.msssim)).collect();
                std::fs::write(dir.join("curve.dat"), format!("# bpp psnr msssim\n{dat}"))?;
            }
        }
        Command::Bd(a) => {
            io.config(&format!("base = {}\ntest = {}\nmetric = {}", a.base.display(), a.test.display(), a.metric.name()))?;
            let r = bd_rate(&RdCurve::load(&a.base)?, &RdCurve::load(&a.test)?, a.metric)?;
            if io.csv {
                writeln!(io.out, "metric,bd_rate_percent,lo,hi\n{},{},{},{}", r.metric.name(), r.percent, r.metric_range.0, r.metric_range.1)?;
            } else {
                writeln!(io.out, "BD-rate ({}): {:.2}%", r.metric.name(), r.percent)?;
            }
        }
        Command::Complexity(a) => {
            let cfg = resolve(cli, &[])?;
            let report = match &a.model {
                Some(m) => {
                    let ck = load_model(m)?;
                    report_for(&ck.model, a.height, a.width)
                }
                None => {
                    io.config(&cfg.to_text())?;
                    report_for(&TreeCodec::<f32>::new(cfg.model, cfg.seed)?, a.height, a.width)
                }
            };
            if io.csv {
                write!(io.out, "{}", report.to_csv())?;
            } else {
                write!(io.out, "{}", report.to_table())?;
            }
            if let Some(dir) = &a.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("complexity.txt"), report.to_table())?;
                std::fs::write(dir.join("complexity.csv"), report.to_csv())?;
            }
        }
        Command::Ablate(a) => {
            io.config(&resolve(cli, &[])?.to_text())?;
            let ck = load_model(&a.model)?;
            let inputs = if a.input.is_dir() { image_io::list_images(&a.input)? } else { vec![a.input.clone()] };
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(a.jobs.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            let written: Vec<Vec<PathBuf>> = pool.install(|| {
                use rayon::prelude::*;
                inputs.par_iter().map(|p| write_ablations(&ck.model, p, &a.out)).collect::<Result<_>>()
            })?;
            for p in written.into_iter().flatten() {
                writeln!(io.out, "{}", p.display())?;
            }
        }
        Command::Bitmap(a) => {
            io.config(&resolve(cli, &[])?.to_text())?;
            let ck = load_model(&a.model)?;
            let indices: Vec<usize> = match a.index {
                Some(i) => vec![i],
                None => (1..=LATENTS).collect(),
            };
            for p in write_bitmaps(&ck.model, &a.input, &a.out, &indices)? {
                writeln!(io.out, "{}", p.display())?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("treecodec").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run_capture(&["encode", "--input", "a.png"]).0, 1);
        assert_eq!(run_capture(&["bogus"]).0, 1);
        assert_eq!(run_capture(&["complexity", "--nope"]).0, 1);
        let (code, out, _) = run_capture(&["bd", "--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("--metric") && out.contains("[default: psnr]"));
    }

    #[test]
    fn complexity_default_prints_table() {
        let (code, out, _) = run_capture(&["complexity", "--config", "default"]);
        assert_eq!(code, 0);
        for m in ["g_a", "g_s", "h_a (x4)", "h_s (x4)", "h_ep (x4)", "context (x4)", "encoder", "decoder", "total"] {
            assert!(out.contains(m), "{m} missing");
        }
        assert!(out.contains("# channels = 32"));
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "lambda1 = 0.01\n").unwrap();
        let cli = Cli::try_parse_from([
            "treecodec",
            "--config",
            path.to_str().unwrap(),
            "train",
            "--lambda1",
            "0.005",
            "--out",
            "x",
        ])
        .unwrap();
        let Command::Train(a) = &cli.command else { unreachable!() };
        let cfg = resolve(&cli, &[("lambda1", a.lambda1.map(|v| v.to_string()))]).unwrap();
        assert_eq!(cfg.lambda1, 0.005);
        std::fs::write(&path, "frobnicate = 1\n").unwrap();
        let (code, _, err) = run_capture(&["--config", path.to_str().unwrap(), "complexity"]);
        assert_eq!(code, 1);
        assert!(err.contains("frobnicate"));
    }

    #[test]
    fn missing_files_exit_2() {
        let (code, _, _) = run_capture(&["bd", "--base", "/nonexistent/a.csv", "--test", "/nonexistent/b.csv"]);
        assert_eq!(code, 2);
    }
}
