use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use gdsr_core::config::RunConfig;
use gdsr_core::degrade::{synthesize_lr, DegradationConfig, DegradeMode};
use gdsr_core::error::{Error, Result};
use gdsr_core::image_io::{load_ppm, save_pgm, save_ppm};
use gdsr_core::metrics::{aggregate, csv_report, psnr_y, ssim_y, text_table};
use gdsr_core::model::{compute_erf, param_breakdown, param_count, GdsrModel};
use gdsr_core::rng::Rng;
use gdsr_core::selftest;
use gdsr_core::tensor::{no_grad, Tensor};
use gdsr_core::trainer::{load_checkpoint, save_checkpoint, train_loop, Dataset};
use gdsr_core::wavelet::{rgb_to_y, swt2, WaveletFilter};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "gdsr",
    about = "Dual-branch RWKV/convolution super-resolution: train, evaluate, inspect",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a directory of HR images (manifest.txt required)
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a directory of HR images
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "bicubic")]
        mode: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "eval_report.csv")]
        report: PathBuf,
    },
    /// Super-resolve a single image
    Sr {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Synthesize a degraded LR image
    Degrade {
        #[arg(long)]
        mode: String,
        #[arg(long)]
        scale: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Decompose an image's luminance into wavelet subband graymaps
    Wavelet {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 2)]
        levels: usize,
        #[arg(long, default_value = "haar")]
        wavelet: String,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Write the effective-receptive-field map of a checkpoint
    Erf {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the parameter count of a configuration
    Params {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run gradient checks, WKV equivalence and SWT property suites
    Selftest,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    if std::env::var("GDSR_DETERMINISTIC").as_deref() == Ok("1") {
        // execution is single-threaded with fixed reduction order already;
        // the flag is accepted for compatibility
        eprintln!("deterministic mode: sequential reductions (always on)");
    }
    match cli.cmd {
        Cmd::Train {
            config,
            data,
            out,
            resume,
            seed,
        } => cmd_train(&config, &data, &out, resume.as_deref(), seed),
        Cmd::Eval {
            ckpt,
            data,
            mode,
            seed,
            report,
        } => cmd_eval(&ckpt, &data, &mode, seed, &report),
        Cmd::Sr {
            ckpt,
            input,
            output,
        } => cmd_sr(&ckpt, &input, &output),
        Cmd::Degrade {
            mode,
            scale,
            seed,
            input,
            output,
        } => cmd_degrade(&mode, scale, seed, &input, &output),
        Cmd::Wavelet {
            input,
            levels,
            wavelet,
            outdir,
        } => cmd_wavelet(&input, levels, &wavelet, &outdir),
        Cmd::Erf {
            ckpt,
            size,
            samples,
            output,
            seed,
        } => cmd_erf(&ckpt, size, samples, &output, seed),
        Cmd::Params { config } => cmd_params(&config),
        Cmd::Selftest => cmd_selftest(),
    }
}

fn cmd_train(
    config: &Path,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    seed: Option<u64>,
) -> Result<i32> {
    let mut cfg = RunConfig::from_file(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.degrade.seed = s;
    }
    print!("{}", cfg.echo());

    let model = match resume {
        Some(path) => {
            let (model, mcfg) = load_checkpoint(path)?;
            if mcfg != cfg.model {
                return Err(Error::config(format!(
                    "resume checkpoint config {mcfg:?} does not match {:?}",
                    cfg.model
                )));
            }
            println!("resumed from {}", path.display());
            model
        }
        None => GdsrModel::<f32>::new(&cfg.model, &mut Rng::new(cfg.train.seed))?,
    };

    let train_set = Dataset::<f32>::load(data)?;
    let val_dir = data.join("val");
    let val_set = if val_dir.join("manifest.txt").exists() {
        Some(Dataset::<f32>::load(&val_dir)?)
    } else {
        None
    };
    println!(
        "training on {} images{}",
        train_set.images.len(),
        val_set
            .as_ref()
            .map(|v| format!(", validating on {}", v.images.len()))
            .unwrap_or_default()
    );

    let history = train_loop(
        &model,
        &train_set,
        val_set.as_ref(),
        &cfg.degrade,
        &cfg.train,
    )?;
    save_checkpoint(out, &model)?;
    let history_path = history_path_for(out);
    std::fs::write(&history_path, history.to_csv())?;
    println!(
        "wrote {} and {} ({} steps, final loss {:.6})",
        out.display(),
        history_path.display(),
        history.rows.len(),
        history.final_loss().unwrap_or(f64::NAN)
    );
    Ok(0)
}

fn history_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".history.csv");
    out.with_file_name(name)
}

fn cmd_eval(
    ckpt: &Path,
    data: &Path,
    mode: &str,
    seed: Option<u64>,
    report: &Path,
) -> Result<i32> {
    let (model, mcfg) = load_checkpoint(ckpt)?;
    let mode = DegradeMode::parse(mode)?;
    let dcfg = DegradationConfig::new(mode, mcfg.scale, seed.unwrap_or(0));
    let set = Dataset::<f32>::load(data)?;
    let border = mcfg.scale;
    let mut rows = Vec::with_capacity(set.images.len());
    for (idx, (name, hr)) in set.images.iter().enumerate() {
        let lr = synthesize_lr(hr, &dcfg, idx as u64)?;
        let sr = no_grad(|| model.forward_image(&lr))?;
        rows.push((
            name.clone(),
            psnr_y(&sr, hr, border)?,
            ssim_y(&sr, hr, border)?,
        ));
    }
    let rep = aggregate(&rows, border);
    print!("{}", text_table(&rows, &rep));
    std::fs::write(report, csv_report(&rows))?;
    println!("wrote {}", report.display());
    Ok(0)
}

fn cmd_sr(ckpt: &Path, input: &Path, output: &Path) -> Result<i32> {
    let (model, _) = load_checkpoint(ckpt)?;
    let lr = load_ppm::<f32>(input)?;
    let sr = no_grad(|| model.forward_image(&lr))?;
    let clamped = Tensor::new(
        sr.shape().to_vec(),
        sr.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )?;
    save_ppm(output, &clamped)?;
    println!(
        "{} -> {} ({}x upscale)",
        input.display(),
        output.display(),
        model.cfg.scale
    );
    Ok(0)
}

fn cmd_degrade(mode: &str, scale: usize, seed: u64, input: &Path, output: &Path) -> Result<i32> {
    let mode = DegradeMode::parse(mode)?;
    let cfg = DegradationConfig::new(mode, scale, seed);
    let hr = load_ppm::<f32>(input)?;
    let lr = synthesize_lr(&hr, &cfg, 0)?;
    save_ppm(output, &lr)?;
    println!("{} -> {}", input.display(), output.display());
    Ok(0)
}

fn cmd_wavelet(input: &Path, levels: usize, wavelet: &str, outdir: &Path) -> Result<i32> {
    let filter = WaveletFilter::resolve(wavelet)?;
    let img = load_ppm::<f32>(input)?;
    let y = rgb_to_y(&img.detach())?;
    let pyramid = swt2(&y, &filter, levels)?;
    std::fs::create_dir_all(outdir)?;
    for (j, level) in pyramid.levels.iter().enumerate() {
        for (tag, plane) in [
            ("ll", &level.ll),
            ("lh", &level.lh),
            ("hl", &level.hl),
            ("hh", &level.hh),
        ] {
            let lo = plane.data().iter().cloned().fold(f32::MAX, f32::min);
            let hi = plane.data().iter().cloned().fold(f32::MIN, f32::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            let normalized = Tensor::new(
                plane.shape().to_vec(),
                plane.data().iter().map(|&v| (v - lo) / span).collect(),
            )?;
            let path = outdir.join(format!("level{}_{}.pgm", j + 1, tag));
            save_pgm(&path, &normalized, true)?;
            println!(
                "{}: affine v -> (v - {lo:.6}) / {span:.6}, range [{lo:.6}, {hi:.6}]",
                path.display()
            );
        }
    }
    Ok(0)
}

fn cmd_erf(ckpt: &Path, size: usize, samples: usize, output: &Path, seed: u64) -> Result<i32> {
    let (model, _) = load_checkpoint(ckpt)?;
    let mut rng = Rng::new(seed);
    let map = compute_erf(|x| model.forward(x), size, samples, &mut rng)?;
    let plane = Tensor::new(
        vec![size, size],
        map.iter().map(|&v| v as f32).collect::<Vec<f32>>(),
    )?;
    save_pgm(output, &plane, true)?;
    println!("wrote {} ({}x{}, {} samples)", output.display(), size, size, samples);
    Ok(0)
}

fn cmd_params(config: &Path) -> Result<i32> {
    let cfg = RunConfig::from_file(config)?;
    let rows = param_breakdown(&cfg.model);
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(8);
    for (name, count) in &rows {
        println!("{name:<width$}  {count:>12}");
    }
    let total = param_count(&cfg.model);
    println!("{:<width$}  {total:>12}  ({:.2}M)", "total", total as f64 / 1e6);
    Ok(0)
}

fn cmd_selftest() -> Result<i32> {
    let (outcomes, ok) = selftest::run_all();
    for c in &outcomes {
        println!(
            "{} {:<32} {}",
            if c.passed { "pass" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    if ok {
        println!("selftest: all {} checks passed", outcomes.len());
        Ok(0)
    } else {
        Err(Error::numeric(format!(
            "selftest: {} of {} checks failed",
            outcomes.iter().filter(|c| !c.passed).count(),
            outcomes.len()
        )))
    }
}
