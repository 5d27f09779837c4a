use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dffn::datagen::{load_pairs, procedural_pairs, synthesize_dir, SynthesisParams};
use dffn::fourier::{amplitude, dft2, swap_components};
use dffn::gradsuite::{run_suite, TOLERANCE};
use dffn::imageio::{read_rgb, write_rgb};
use dffn::metrics::evaluate_dirs;
use dffn::network::{init_params, param_count, DffnConfig, Variant};
use dffn::train::{enhance_image, load_checkpoint, run_ablation, RunConfig, TrainData, Trainer};
use dffn::Tensor;

#[derive(Parser)]
#[command(name = "dffn", version, about = "Dual-domain low-light image enhancement")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize low-light/ground-truth pairs from a directory of clean images.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus a per-iteration TSV log.
    Train(TrainArgs),
    /// Enhance one image with a trained checkpoint.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// PSNR/SSIM of predictions against same-named ground truth.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Swap Fourier amplitude and phase between two images.
    SwapDemo {
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Finite-difference check of every primitive, block and loss.
    Gradcheck,
    /// Per-layer parameter counts.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train several variants under one budget and compare them.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    input_dir: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, allow_hyphen_values = true)]
    alpha_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    alpha_max: Option<f64>,
    #[arg(long)]
    n_iters: Option<usize>,
    #[arg(long)]
    sigma_base: Option<f64>,
    #[arg(long)]
    sigma_slope: Option<f64>,
}

#[derive(Args)]
struct DataArgs {
    /// Directory with `low/` and `gt/`, as written by `synth`. Without it a
    /// procedural corpus is generated.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Held-out pairs in the same layout.
    #[arg(long)]
    val_dir: Option<PathBuf>,
    /// Size of the procedural corpus when no data directory is given.
    #[arg(long, default_value_t = 16)]
    synthetic_pairs: usize,
    #[arg(long, default_value_t = 4)]
    synthetic_val_pairs: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with optional `[network]`, `[train]` and `[synthesis]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out_dir: PathBuf,
    /// Continue from a checkpoint; its configuration wins over `--config`.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', default_value = "full,m_a,m_b,m_c,m_d")]
    variants: Vec<Variant>,
    /// Training iterations per variant.
    #[arg(long)]
    budget: usize,
    /// One run of every variant per seed.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Comparison TSV; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-variant iteration logs.
    #[arg(long)]
    log_dir: Option<PathBuf>,
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(RunConfig::from_toml(&text)?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn load_data(args: &DataArgs, cfg: &RunConfig) -> Result<TrainData> {
    let size = cfg.train.crop_size;
    let train = match &args.data_dir {
        Some(d) => load_pairs(d)?,
        None => procedural_pairs(args.synthetic_pairs, size, &cfg.synthesis)?,
    };
    let val = match &args.val_dir {
        Some(d) => load_pairs(d)?,
        None if args.data_dir.is_none() => {
            let p = SynthesisParams { seed: cfg.synthesis.seed.wrapping_add(1), ..cfg.synthesis.clone() };
            procedural_pairs(args.synthetic_val_pairs, size, &p)?
        }
        None => Vec::new(),
    };
    Ok(TrainData { train, val })
}

fn synth(a: SynthArgs) -> Result<()> {
    let d = SynthesisParams::default();
    let p = SynthesisParams {
        alpha_min: a.alpha_min.unwrap_or(d.alpha_min),
        alpha_max: a.alpha_max.unwrap_or(d.alpha_max),
        n_iters: a.n_iters.unwrap_or(d.n_iters),
        sigma_base: a.sigma_base.unwrap_or(d.sigma_base),
        sigma_slope: a.sigma_slope.unwrap_or(d.sigma_slope),
        seed: a.seed,
    };
    let rows = synthesize_dir(&a.input_dir, &a.output_dir, &p)?;
    println!("wrote {} pairs to {}", rows.len(), a.output_dir.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = read_config(a.config.as_deref())?;
    let mut trainer = match &a.resume {
        Some(ckpt) => {
            let t = Trainer::resume(ckpt)?;
            cfg.network = t.state.net_cfg.clone();
            cfg.train = t.state.train_cfg.clone();
            t
        }
        None => {
            if let Some(s) = a.seed {
                cfg.train.seed = s;
                cfg.network.seed = s;
            }
            Trainer::new(&cfg.network, &cfg.train)?
        }
    };
    if let Some(e) = a.epochs {
        trainer.state.train_cfg.epochs = e;
    }
    if let Some(m) = a.max_iterations {
        trainer.state.train_cfg.max_iterations = Some(m);
    }
    let data = load_data(&a.data, &cfg)?;
    fs::create_dir_all(&a.out_dir)?;
    let log_path = a.out_dir.join("train.tsv");
    let log = fs::OpenOptions::new().create(true).append(a.resume.is_some()).write(true).truncate(a.resume.is_none()).open(&log_path)?;
    let mut log = BufWriter::new(log);
    let summary = trainer.run(&data, Some(&a.out_dir), &mut log)?;
    log.flush()?;
    if let Some(r) = summary.records.last() {
        println!("iteration {} epoch {} loss {:.6}", r.iter, r.epoch, r.loss.total);
    }
    if let Some(v) = summary.val.last() {
        println!("validation psnr {:.3} dB ssim {:.4} (input {:.3} dB)", v.psnr, v.ssim, v.input_psnr);
    }
    println!("checkpoint {}", a.out_dir.join("last.ckpt").display());
    Ok(())
}

fn enhance(checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let (params, state) = load_checkpoint(checkpoint)?;
    let low = read_rgb(input)?;
    let out = enhance_image(&params, &state.store, &low)?;
    write_rgb(output, &out)?;
    Ok(())
}

fn eval(pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let report = evaluate_dirs(pred, gt)?;
    for name in &report.unmatched {
        eprintln!("warning: {name} has no counterpart, skipped");
    }
    fs::write(out, report.to_tsv())?;
    println!("{} images: psnr {:.4} dB ssim {:.5}", report.count(), report.mean_psnr, report.mean_ssim);
    Ok(())
}

fn dc_amplitude(t: &Tensor<f32>) -> Result<f64> {
    let amp = amplitude(&dft2(t)?);
    let (h, w) = (t.shape()[1], t.shape()[2]);
    Ok((0..3).map(|c| amp.data()[c * h * w] as f64).sum::<f64>() / 3.0)
}

fn swap_demo(a: &Path, b: &Path, out_dir: &Path) -> Result<()> {
    let (ia, ib) = (read_rgb(a)?, read_rgb(b)?);
    let (amp_a_pha_b, amp_b_pha_a) = swap_components(&ia, &ib)?;
    fs::create_dir_all(out_dir)?;
    write_rgb(&out_dir.join("amp_a_phase_b.png"), &amp_a_pha_b)?;
    write_rgb(&out_dir.join("amp_b_phase_a.png"), &amp_b_pha_a)?;
    println!(
        "mean a {:.6} b {:.6} amp_a_phase_b {:.6} amp_b_phase_a {:.6} | dc a {:.6} b {:.6} amp_a_phase_b {:.6} amp_b_phase_a {:.6}",
        ia.mean(),
        ib.mean(),
        amp_a_pha_b.mean(),
        amp_b_pha_a.mean(),
        dc_amplitude(&ia)?,
        dc_amplitude(&ib)?,
        dc_amplitude(&amp_a_pha_b)?,
        dc_amplitude(&amp_b_pha_a)?,
    );
    Ok(())
}

fn gradcheck() -> Result<bool> {
    let outcomes = run_suite()?;
    let mut ok = true;
    for c in &outcomes {
        let pass = c.passes(TOLERANCE);
        ok &= pass;
        println!("{}\t{:.3e}\t{}\t{}", if pass { "PASS" } else { "FAIL" }, c.max_rel_err, c.coords, c.name);
    }
    let failed = outcomes.iter().filter(|c| !c.passes(TOLERANCE)).count();
    println!("{} checks, {failed} failed (tolerance {TOLERANCE:e})", outcomes.len());
    Ok(ok)
}

fn params(config: Option<&Path>) -> Result<()> {
    let cfg: DffnConfig = read_config(config)?.network;
    let (_, store) = init_params(&cfg)?;
    print!("{}", param_count(&store).table());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    if a.budget == 0 {
        bail!("--budget must be at least 1");
    }
    let base = read_config(a.config.as_deref())?;
    let mut table = String::new();
    for (i, &seed) in a.seeds.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.network.seed = seed;
        cfg.train.seed = seed;
        cfg.train.max_iterations = Some(a.budget);
        let data = load_data(&a.data, &cfg)?;
        if data.val.is_empty() {
            bail!("ablation needs validation pairs: pass --val-dir");
        }
        let logs = a.log_dir.as_ref().map(|d| d.join(format!("seed{seed}")));
        let summary = run_ablation(&cfg.network, &cfg.train, &a.variants, &data, logs.as_deref())?;
        if !summary.same_data() {
            bail!("variants saw different batches for seed {seed}");
        }
        let tsv = summary.to_tsv();
        table.push_str(if i == 0 { &tsv } else { tsv.split_once('\n').map_or("", |(_, rest)| rest) });
    }
    match &a.out {
        Some(p) => {
            fs::write(p, &table)?;
            eprintln!("wrote {}", p.display());
        }
        None => print!("{table}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Enhance { checkpoint, input, output } => enhance(&checkpoint, &input, &output),
        Command::Eval { pred_dir, gt_dir, out } => eval(&pred_dir, &gt_dir, &out),
        Command::SwapDemo { image_a, image_b, out_dir } => swap_demo(&image_a, &image_b, &out_dir),
        Command::Gradcheck => match gradcheck() {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::FAILURE,
            Err(e) => Err(e),
        },
        Command::Params { config } => params(config.as_deref()),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
