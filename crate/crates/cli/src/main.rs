use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use geosurf::checkpoint::load_checkpoint;
use geosurf::config::TrainConfig;
use geosurf::data::{load_dataset, synthetic_blobs, write_dataset, write_pgm};
use geosurf::fags::{pseudo_source_features, sample_dirichlet, FeatureSource, FeatureStack};
use geosurf::gradsuite::{run_gradient_suite, GradTarget, GRAD_TOL, REQUIRED_PASS_FRACTION};
use geosurf::losses::{interpolation_set, InterpolationSpec};
use geosurf::metrics::feature_path_smoothness;
use geosurf::run::{ablation_row_csv, evaluate, resume, run_ablation, train, ABLATION_HEADER};
use geosurf::tensor::{read_tensor, write_tensor};
use geosurf::train::sample_latents;
use geosurf::{Error, Result};

#[derive(Parser)]
#[command(
    name = "geosurf",
    version,
    about = "Few-shot GAN training with geodesic feature augmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator/discriminator pair.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `key=value` overrides applied after the config file.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Mix GSL1 feature tensors on the geodesic surface with Dirichlet weights.
    Augment {
        #[arg(long)]
        features: PathBuf,
        /// Number of pseudo-source tensors to emit.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write k images along a random latent path and report its smoothness.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value = "all", value_parser = ["lg", "ldr", "linp", "adv", "objectives", "all"])]
        target: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint against a dataset and write one metrics row.
    Metrics {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value_t = 8)]
        paths: usize,
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// CSV destination; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the four-way ablation grid and write ablation.csv under out_dir.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Write a procedural blob dataset as PGM files.
    Synth {
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_file(path)?;
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_train(config: &Path, overrides: &[String], from: Option<&Path>) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let outcome = match from {
        Some(ckpt) => resume(&cfg, ckpt)?,
        None => train(&cfg)?,
    };
    println!("trained to step {}", outcome.state.step);
    println!("checkpoint: {}", outcome.final_checkpoint.display());
    if let Some(m) = outcome.metrics.last() {
        println!(
            "diversity={} ffd={} smoothness={}",
            m.pairwise_diversity, m.ffd, m.smoothness
        );
    }
    Ok(())
}

fn cmd_augment(features: &Path, n: usize, alpha: f64, seed: u64, out: &Path) -> Result<()> {
    let mut paths: Vec<PathBuf> = fs::read_dir(features)
        .map_err(|e| Error::Io {
            path: features.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "gsl1"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Dataset(format!(
            "no GSL1 feature tensors found in {}",
            features.display()
        )));
    }
    let stacks = paths
        .iter()
        .map(|p| {
            let t = read_tensor(p)?;
            let t = if t.shape().len() == 3 {
                t
            } else {
                let n = t.numel();
                t.reshape(vec![1, 1, n])?
            };
            FeatureStack::new(vec![(0, t)], FeatureSource::Real)
        })
        .collect::<Result<Vec<_>>>()?;
    let shape = stacks[0].layers[0].1.shape().to_vec();
    create_dir(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = String::from("index,weights\n");
    for i in 0..n {
        let omega = sample_dirichlet(stacks.len(), alpha, &mut rng)?;
        let pseudo = pseudo_source_features(&stacks, &omega)?;
        let t = pseudo.layers[0].1.clone().reshape(shape.clone())?;
        write_tensor(&out.join(format!("pseudo_{i:04}.gsl1")), &t)?;
        let w: Vec<String> = omega.weights().iter().map(f64::to_string).collect();
        weights.push_str(&format!("{i},{}\n", w.join(" ")));
    }
    write_text(&out.join("weights.csv"), &weights)?;
    println!(
        "wrote {n} pseudo-source tensors from {} inputs",
        stacks.len()
    );
    Ok(())
}

fn cmd_interpolate(checkpoint: &Path, k: usize, seed: u64, out: &Path) -> Result<()> {
    if k < 3 {
        return Err(Error::Invalid(format!("interpolate needs k >= 3, got {k}")));
    }
    let state = load_checkpoint(checkpoint)?;
    let d = state.gen.config().latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ends = sample_latents(&mut rng, 2, d);
    let path = interpolation_set(&InterpolationSpec {
        z_start: ends[0].clone(),
        z_end: ends[1].clone(),
        k,
    })?;
    let (images, features) = state.gen.generate(&path)?;
    create_dir(out)?;
    for i in 0..k {
        write_pgm(&out.join(format!("interp_{i:03}.pgm")), &images.row(i)?)?;
    }
    let smoothness = feature_path_smoothness(&features)?;
    write_text(&out.join("smoothness.txt"), &format!("{smoothness}\n"))?;
    println!("smoothness={smoothness}");
    Ok(())
}

fn cmd_gradcheck(target: &str, seed: u64) -> Result<bool> {
    let target: GradTarget = target.parse()?;
    let mut ok = true;
    for s in run_gradient_suite(target, seed)? {
        let status = if s.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<24} coords={:<4} within_tol={:.4} max_rel_error={:.3e}",
            s.name,
            s.reports.len(),
            s.pass_fraction,
            s.max_rel_error
        );
        ok &= s.passed();
    }
    println!(
        "criterion: rel_error <= {GRAD_TOL:e} on >= {:.0}% of sampled coordinates",
        REQUIRED_PASS_FRACTION * 100.0
    );
    Ok(ok)
}

fn cmd_metrics(
    checkpoint: &Path,
    dataset: &Path,
    samples: usize,
    paths: usize,
    k: usize,
    out: Option<&Path>,
) -> Result<()> {
    let state = load_checkpoint(checkpoint)?;
    let ds = load_dataset(dataset)?;
    let row = evaluate(&state, &ds, samples, paths, k)?;
    let text = format!(
        "step,diversity,ffd,smoothness\n{},{},{},{}\n",
        row.step, row.pairwise_diversity, row.ffd, row.smoothness
    );
    match out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_ablate(config: &Path, overrides: &[String], seeds: &[u64]) -> Result<()> {
    let cfg = load_config(config, overrides)?;
    let rows = run_ablation(&cfg, seeds)?;
    println!("{ABLATION_HEADER}");
    for r in &rows {
        println!("{}", ablation_row_csv(r));
    }
    println!("wrote {}", cfg.out_dir.join("ablation.csv").display());
    Ok(())
}

fn cmd_synth(n: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    let ds = synthetic_blobs(n, size, seed)?;
    write_dataset(&ds, out)?;
    println!("wrote {n} images to {}", out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            resume,
        } => cmd_train(&config, &overrides, resume.as_deref()).map(|_| true),
        Command::Augment {
            features,
            n,
            alpha,
            seed,
            out,
        } => cmd_augment(&features, n, alpha, seed, &out).map(|_| true),
        Command::Interpolate {
            checkpoint,
            k,
            seed,
            out,
        } => cmd_interpolate(&checkpoint, k, seed, &out).map(|_| true),
        Command::Gradcheck { target, seed } => cmd_gradcheck(&target, seed),
        Command::Metrics {
            checkpoint,
            dataset,
            samples,
            paths,
            k,
            out,
        } => cmd_metrics(&checkpoint, &dataset, samples, paths, k, out.as_deref()).map(|_| true),
        Command::Ablate {
            config,
            overrides,
            seeds,
        } => cmd_ablate(&config, &overrides, &seeds).map(|_| true),
        Command::Synth { n, size, seed, out } => cmd_synth(n, size, seed, &out).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
