//! Training runs: dataset loading, logging, evaluation, checkpoint cadence,
//! resume and the four-way ablation grid.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::{history_row, load_checkpoint, save_checkpoint, HISTORY_HEADER};
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{LossParts, LossReport};
use crate::metrics::{
    frechet_feature_distance, interpolation_smoothness, pairwise_diversity, MetricsRow,
};
use crate::tensor::Tensor;
use crate::train::{batch_indices_for, eval_rng, sample_latents, train_step, TrainState};

pub const LOSSES_CSV: &str = "losses.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,l_adv_g,l_adv_d,l_inp,l_dr,l_g,diversity,ffd,smoothness";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
}

pub fn checkpoint_dir(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}"))
}

/// Loads the configured dataset and checks it against the network size.
pub fn load_training_data(config: &TrainConfig) -> Result<Dataset> {
    let ds = config.dataset.load(config.image_size)?;
    let (h, w) = ds.dims();
    if h != config.image_size || w != config.image_size {
        return Err(Error::Dataset(format!(
            "images are {h}x{w} but image_size is {}",
            config.image_size
        )));
    }
    Ok(ds)
}

/// Diversity and Fréchet distance over `samples` fixed generated images, and
/// smoothness averaged over `paths` fixed latent paths of `k` points.
pub fn evaluate(
    state: &TrainState,
    dataset: &Dataset,
    samples: usize,
    paths: usize,
    k: usize,
) -> Result<MetricsRow> {
    let d = state.gen.config().latent_dim;
    let mut rng = eval_rng(state.seed);
    let latents = sample_latents(&mut rng, samples, d);
    let (images, _) = state.gen.generate(&latents)?;
    let imgs: Vec<Tensor> = (0..samples).map(|i| images.row(i)).collect::<Result<_>>()?;
    let diversity = pairwise_diversity(&imgs)?;

    let rows = |t: &Tensor| -> Vec<Vec<f64>> {
        let n = t.shape()[0];
        let per = t.numel() / n;
        t.data().chunks(per).map(<[f64]>::to_vec).collect()
    };
    let (_, _, fake_feats) = state.disc.evaluate(&images)?;
    let (_, _, real_feats) = state.disc.evaluate(&dataset.all()?)?;
    let ffd = frechet_feature_distance(&rows(&real_feats), &rows(&fake_feats))?;

    let mut smooth = 0.0;
    for _ in 0..paths {
        let ends = sample_latents(&mut rng, 2, d);
        smooth += interpolation_smoothness(&state.gen, &ends[0], &ends[1], k)?;
    }
    Ok(MetricsRow {
        step: state.step,
        pairwise_diversity: diversity,
        ffd,
        smoothness: smooth / paths as f64,
    })
}

pub fn metrics_row_csv(row: &MetricsRow, parts: &LossParts) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        row.step,
        parts.l_adv_g,
        parts.l_adv_d,
        parts.l_inp,
        parts.l_dr,
        parts.l_g,
        row.pairwise_diversity,
        row.ffd,
        row.smoothness
    )
}

/// Keeps the header and rows whose leading step is at most `step`.
fn truncate_log(path: &Path, header: &str, step: u64) -> Result<()> {
    let mut kept = format!("{header}\n");
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let s: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
            if s.is_some_and(|s| s <= step) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn open_append(path: &Path) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

/// Trains from scratch per `config`. The dataset is loaded before anything
/// is written. A fresh run writes the step-0 checkpoint first.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = load_training_data(config)?;
    let state = TrainState::new(config)?;
    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    fs::write(config.out_dir.join("config.txt"), config.to_text())
        .map_err(|e| Error::io(config.out_dir.join("config.txt"), e))?;
    save_checkpoint(&state, &checkpoint_dir(&config.out_dir, 0))?;
    run_from(state, config, &dataset)
}

/// Continues training from a checkpoint up to `config.steps`. Log rows past
/// the checkpoint's step are discarded first.
pub fn resume(config: &TrainConfig, checkpoint: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = load_training_data(config)?;
    let mut state = load_checkpoint(checkpoint)?;
    let net = state.gen.config();
    if net != config.net() || state.seed != config.seed {
        return Err(Error::Config(format!(
            "checkpoint (seed {}, latent_dim {}, image_size {}) does not match the config",
            state.seed, net.latent_dim, net.image_size
        )));
    }
    state.opt_g.lr = config.lr_g;
    state.opt_d.lr = config.lr_d;
    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    run_from(state, config, &dataset)
}

fn run_from(
    mut state: TrainState,
    config: &TrainConfig,
    dataset: &Dataset,
) -> Result<TrainOutcome> {
    let out = &config.out_dir;
    let losses_path = out.join(LOSSES_CSV);
    let metrics_path = out.join(METRICS_CSV);
    truncate_log(&losses_path, HISTORY_HEADER, state.step)?;
    truncate_log(&metrics_path, METRICS_HEADER, state.step)?;
    let mut losses = open_append(&losses_path)?;
    let mut metrics_log = open_append(&metrics_path)?;
    let mut metrics = Vec::new();
    let mut last_eval = None;
    let mut last_ckpt = checkpoint_dir(out, state.step);
    let start = state.step;

    while state.step < config.steps {
        let idx = batch_indices_for(&state, config, dataset.len());
        let real = dataset.batch(&idx)?;
        let report = train_step(&mut state, config, real)?;
        writeln!(losses, "{}", history_row(state.step, &report))
            .map_err(|e| Error::io(&losses_path, e))?;
        if config.eval_every > 0 && state.step % config.eval_every == 0 {
            let row = evaluate(
                &state,
                dataset,
                config.eval_samples,
                config.eval_paths,
                config.eval_k,
            )?;
            writeln!(metrics_log, "{}", metrics_row_csv(&row, &report.parts()))
                .map_err(|e| Error::io(&metrics_path, e))?;
            metrics.push(row);
            last_eval = Some(state.step);
        }
        if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
            losses.flush().map_err(|e| Error::io(&losses_path, e))?;
            last_ckpt = checkpoint_dir(out, state.step);
            save_checkpoint(&state, &last_ckpt)?;
        }
    }
    if state.step > start && last_eval != Some(state.step) {
        let row = evaluate(
            &state,
            dataset,
            config.eval_samples,
            config.eval_paths,
            config.eval_k,
        )?;
        let parts = state
            .history
            .last()
            .map(LossReport::parts)
            .unwrap_or_default();
        writeln!(metrics_log, "{}", metrics_row_csv(&row, &parts))
            .map_err(|e| Error::io(&metrics_path, e))?;
        metrics.push(row);
    }
    losses.flush().map_err(|e| Error::io(&losses_path, e))?;
    metrics_log
        .flush()
        .map_err(|e| Error::io(&metrics_path, e))?;
    let final_ckpt = checkpoint_dir(out, state.step);
    if final_ckpt != last_ckpt || !final_ckpt.exists() {
        save_checkpoint(&state, &final_ckpt)?;
    }
    Ok(TrainOutcome {
        final_checkpoint: final_ckpt,
        state,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub fags_on: bool,
    pub iandr_on: bool,
    pub seed: u64,
    pub metrics: MetricsRow,
    /// Every loss component of every step was finite.
    pub all_finite: bool,
}

pub const ABLATION_HEADER: &str = "fags_on,iandr_on,seed,step,diversity,ffd,smoothness,all_finite";

pub fn ablation_row_csv(r: &AblationRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        r.fags_on,
        r.iandr_on,
        r.seed,
        r.metrics.step,
        r.metrics.pairwise_diversity,
        r.metrics.ffd,
        r.metrics.smoothness,
        r.all_finite
    )
}

/// Runs `{geodesic augmentation on/off} x {interpolation + regularizer
/// on/off}` for each seed, each in its own subdirectory of `base.out_dir`.
pub fn run_ablation(base: &TrainConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &(fags_on, iandr_on) in &[(true, true), (true, false), (false, true), (false, false)] {
        for &seed in seeds {
            let cfg = TrainConfig {
                fags_on,
                iandr_on,
                seed,
                out_dir: base.out_dir.join(format!(
                    "fags{}_iandr{}_seed{seed}",
                    u8::from(fags_on),
                    u8::from(iandr_on)
                )),
                ..base.clone()
            };
            let outcome = train(&cfg)?;
            let all_finite = outcome.state.history.iter().all(|r| {
                [
                    r.l_adv_g, r.l_adv_d, r.l_inp, r.l_dr, r.l_g, r.total_g, r.total_d,
                ]
                .iter()
                .all(|v| v.is_finite())
            });
            let metrics = *outcome
                .metrics
                .last()
                .ok_or_else(|| Error::Invalid("ablation run produced no metrics".into()))?;
            rows.push(AblationRow {
                fags_on,
                iandr_on,
                seed,
                metrics,
                all_finite,
            });
        }
    }
    let path = base.out_dir.join("ablation.csv");
    let mut text = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        text.push_str(&ablation_row_csv(r));
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetSource;

    fn cfg(dir: &Path, steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            out_dir: dir.to_path_buf(),
            dataset: DatasetSource::Synthetic { n: 10, seed: 2 },
            eval_samples: 4,
            eval_paths: 2,
            eval_k: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_writes_only_the_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg(dir.path(), 0)).unwrap();
        assert!(out.final_checkpoint.join("manifest.txt").exists());
        assert!(out.metrics.is_empty());
        let losses = fs::read_to_string(dir.path().join(LOSSES_CSV)).unwrap();
        assert_eq!(losses.lines().count(), 1);
    }

    #[test]
    fn unreadable_dataset_fails_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(&dir.path().join("out"), 3);
        c.dataset = DatasetSource::Dir(dir.path().join("missing"));
        assert!(train(&c).is_err());
        assert!(!dir.path().join("out").exists());
    }

    #[test]
    fn resume_reproduces_logs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut ca = cfg(a.path(), 4);
        ca.checkpoint_every = 2;
        ca.eval_every = 2;
        train(&ca).unwrap();
        let mut cb = ca.clone();
        cb.out_dir = b.path().to_path_buf();
        cb.steps = 2;
        train(&cb).unwrap();
        cb.steps = 4;
        resume(&cb, &checkpoint_dir(b.path(), 2)).unwrap();
        for name in [LOSSES_CSV, METRICS_CSV] {
            let x = fs::read_to_string(a.path().join(name)).unwrap();
            let y = fs::read_to_string(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name}");
        }
    }
}
