//! Checkpoint directories: a `manifest.txt` of `key=value` lines, one GSL1
//! file per parameter and per optimizer moment, and the loss history.
//!
//! A checkpoint is assembled in a sibling temporary directory and renamed
//! into place, so readers never observe a partial checkpoint.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::{Lambdas, LossReport};
use crate::nets::{Discriminator, Generator, NetConfig, ParamSet};
use crate::optim::Adam;
use crate::tensor::{read_tensor, write_tensor, Tensor};
use crate::train::TrainState;

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.txt";
const HISTORY: &str = "history.csv";
pub const HISTORY_HEADER: &str = "step,l_adv_g,l_adv_d,l_inp,l_dr,l_g,total_g,total_d";

fn write_params(dir: &Path, params: &ParamSet, opt: &Adam) -> Result<()> {
    for ((name, t), (m, v)) in params.entries().iter().zip(opt.moments(params)?) {
        write_tensor(&dir.join(format!("{name}.gsl1")), t)?;
        write_tensor(&dir.join(format!("{name}.adam_m.gsl1")), &m)?;
        write_tensor(&dir.join(format!("{name}.adam_v.gsl1")), &v)?;
    }
    Ok(())
}

/// Formats one loss row; `step` is the 1-based index of the step.
pub fn history_row(step: u64, r: &LossReport) -> String {
    format!(
        "{step},{},{},{},{},{},{},{}",
        r.l_adv_g, r.l_adv_d, r.l_inp, r.l_dr, r.l_g, r.total_g, r.total_d
    )
}

fn parse_history_row(line: &str, lambdas: Lambdas) -> Result<LossReport> {
    let bad = || Error::CorruptCheckpoint(format!("bad history row {line:?}"));
    let v: Vec<f64> = line
        .split(',')
        .skip(1)
        .map(|s| s.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if v.len() != 7 {
        return Err(bad());
    }
    Ok(LossReport {
        l_adv_g: v[0],
        l_adv_d: v[1],
        l_inp: v[2],
        l_dr: v[3],
        l_g: v[4],
        total_g: v[5],
        total_d: v[6],
        lambdas,
    })
}

pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("bad checkpoint path {}", dir.display())))?
        .to_string_lossy()
        .into_owned();
    let parent = dir.parent().map(Path::to_path_buf).unwrap_or_default();
    if !parent.as_os_str().is_empty() {
        fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    }
    let tmp = parent.join(format!(".{name}.partial"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    write_params(&tmp, &state.gen.params, &state.opt_g)?;
    write_params(&tmp, &state.disc.params, &state.opt_d)?;

    let mut history = String::from(HISTORY_HEADER);
    history.push('\n');
    for (i, r) in state.history.iter().enumerate() {
        history.push_str(&history_row(i as u64 + 1, r));
        history.push('\n');
    }
    fs::write(tmp.join(HISTORY), history).map_err(|e| Error::io(tmp.join(HISTORY), e))?;

    let net = state.gen.config();
    let lambdas = state.history.last().map(|r| r.lambdas).unwrap_or_default();
    let mut m = String::new();
    let _ = writeln!(m, "format_version={CHECKPOINT_VERSION}");
    let _ = writeln!(m, "step={}", state.step);
    let _ = writeln!(m, "seed={}", state.seed);
    let _ = writeln!(m, "latent_dim={}", net.latent_dim);
    let _ = writeln!(m, "image_size={}", net.image_size);
    for (tag, opt) in [("g", &state.opt_g), ("d", &state.opt_d)] {
        let _ = writeln!(m, "adam_{tag}_t={}", opt.steps_taken());
        let _ = writeln!(m, "adam_{tag}_lr={}", opt.lr);
        let _ = writeln!(m, "adam_{tag}_beta1={}", opt.beta1);
        let _ = writeln!(m, "adam_{tag}_beta2={}", opt.beta2);
    }
    let _ = writeln!(m, "lambda1={}", lambdas.inp);
    let _ = writeln!(m, "lambda2={}", lambdas.dr);
    let _ = writeln!(m, "lambda3={}", lambdas.geo);
    fs::write(tmp.join(MANIFEST), m).map_err(|e| Error::io(tmp.join(MANIFEST), e))?;

    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

struct Manifest(BTreeMap<String, String>);

impl Manifest {
    fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| {
            Error::CorruptCheckpoint(format!("cannot read {}: {e}", path.display()))
        })?;
        let map = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| Error::CorruptCheckpoint(format!("bad manifest line {l:?}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self(map))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .0
            .get(key)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("manifest is missing {key}")))?;
        raw.parse().map_err(|_| {
            Error::CorruptCheckpoint(format!("manifest value for {key} is invalid: {raw:?}"))
        })
    }
}

fn read_checked(path: PathBuf) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::CorruptCheckpoint(format!(
            "missing {}",
            path.display()
        )));
    }
    read_tensor(&path)
}

fn load_params(dir: &Path, params: &mut ParamSet, opt: &mut Adam, t: u64) -> Result<()> {
    let mut values = Vec::with_capacity(params.len());
    let mut moments = Vec::with_capacity(params.len());
    for (name, p) in params.entries() {
        let value = read_checked(dir.join(format!("{name}.gsl1")))?;
        let m = read_checked(dir.join(format!("{name}.adam_m.gsl1")))?;
        let v = read_checked(dir.join(format!("{name}.adam_v.gsl1")))?;
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::CorruptCheckpoint(format!(
                "optimizer moments of {name} have the wrong shape"
            )));
        }
        values.push((name.clone(), value));
        moments.push((m, v));
    }
    params.load_values(&values)?;
    opt.restore(t, moments)
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let m = Manifest::read(dir)?;
    let version: u32 = m.get("format_version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let seed: u64 = m.get("seed")?;
    let net = NetConfig {
        latent_dim: m.get("latent_dim")?,
        image_size: m.get("image_size")?,
    };
    let mut gen = Generator::new(net, 0)?;
    let mut disc = Discriminator::new(net, 0)?;
    let mut opt_g = Adam::new(
        &gen.params,
        m.get("adam_g_lr")?,
        m.get("adam_g_beta1")?,
        m.get("adam_g_beta2")?,
    );
    let mut opt_d = Adam::new(
        &disc.params,
        m.get("adam_d_lr")?,
        m.get("adam_d_beta1")?,
        m.get("adam_d_beta2")?,
    );
    load_params(dir, &mut gen.params, &mut opt_g, m.get("adam_g_t")?)?;
    load_params(dir, &mut disc.params, &mut opt_d, m.get("adam_d_t")?)?;

    let lambdas = Lambdas {
        inp: m.get("lambda1")?,
        dr: m.get("lambda2")?,
        geo: m.get("lambda3")?,
    };
    let hist_path = dir.join(HISTORY);
    let text = fs::read_to_string(&hist_path).map_err(|e| {
        Error::CorruptCheckpoint(format!("cannot read {}: {e}", hist_path.display()))
    })?;
    let history = text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| parse_history_row(l, lambdas))
        .collect::<Result<Vec<_>>>()?;
    let step: u64 = m.get("step")?;
    if history.len() as u64 != step {
        return Err(Error::CorruptCheckpoint(format!(
            "history has {} rows but step is {step}",
            history.len()
        )));
    }
    Ok(TrainState {
        step,
        seed,
        gen,
        disc,
        opt_g,
        opt_d,
        history,
    })
}
