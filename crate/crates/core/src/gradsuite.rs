//! Finite-difference suites for every loss term and both objectives, built
//! on the same objective builders the trainer uses.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::synthetic_blobs;
use crate::error::{Error, Result};
use crate::fags::geodesic_scc_loss_var;
use crate::losses::distance_regularization_var;
use crate::tensor::{
    finite_diff_check, max_rel_error, pass_fraction, GradReport, Graph, Tensor, Var,
};
use crate::train::{
    discriminator_objective, generator_objective, prepare_inputs, step_rng, StepInputs, TrainState,
};

/// Relative-error tolerance per coordinate.
pub const GRAD_TOL: f64 = 1e-4;
/// Fraction of sampled coordinates that must meet [`GRAD_TOL`].
pub const REQUIRED_PASS_FRACTION: f64 = 0.99;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Lg,
    Ldr,
    Linp,
    Adv,
    Objectives,
    All,
}

impl FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lg" => Self::Lg,
            "ldr" => Self::Ldr,
            "linp" => Self::Linp,
            "adv" => Self::Adv,
            "objectives" => Self::Objectives,
            "all" => Self::All,
            other => {
                return Err(Error::Invalid(format!(
                    "unknown gradcheck target {other:?}"
                )))
            }
        })
    }
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lg => "lg",
            Self::Ldr => "ldr",
            Self::Linp => "linp",
            Self::Adv => "adv",
            Self::Objectives => "objectives",
            Self::All => "all",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub reports: Vec<GradReport>,
    pub pass_fraction: f64,
    pub max_rel_error: f64,
}

impl SuiteResult {
    fn new(name: &str, reports: Vec<GradReport>) -> Self {
        Self {
            name: name.to_string(),
            pass_fraction: pass_fraction(&reports, GRAD_TOL),
            max_rel_error: max_rel_error(&reports),
            reports,
        }
    }

    pub fn passed(&self) -> bool {
        self.pass_fraction >= REQUIRED_PASS_FRACTION
    }
}

struct Fixture {
    state: TrainState,
    inputs: StepInputs,
    config: TrainConfig,
}

fn fixture(seed: u64) -> Result<Fixture> {
    let config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let state = TrainState::new(&config)?;
    let data = synthetic_blobs(10, config.image_size, seed)?;
    let real = data.batch(&[0, 3, 5, 8])?;
    let mut rng = step_rng(seed, 0, 1);
    let inputs = prepare_inputs(&mut rng, &state.disc, &config, real)?;
    Ok(Fixture {
        state,
        inputs,
        config,
    })
}

enum Side {
    Gen,
    Disc,
}

enum Term {
    Geo,
    Dr,
    Inp,
    Adv,
    Total,
}

fn objective_suite(fx: &Fixture, side: Side, term: Term, name: &str) -> Result<SuiteResult> {
    let st = &fx.state;
    let lambdas = fx.config.lambdas;
    let reports = match side {
        Side::Disc => finite_diff_check(
            |g, dv| {
                let gv = st.gen.params.bind(g, false);
                let o = discriminator_objective(
                    g,
                    &st.gen,
                    &gv,
                    &st.disc,
                    dv,
                    &fx.inputs,
                    lambdas,
                    fx.config.adv_form,
                )?;
                pick(
                    match term {
                        Term::Geo => o.l_g,
                        Term::Inp => o.l_inp,
                        Term::Adv => Some(o.l_adv_d),
                        Term::Total => Some(o.total),
                        Term::Dr => None,
                    },
                    name,
                )
            },
            st.disc.params.entries(),
            FD_STEP,
        )?,
        Side::Gen => finite_diff_check(
            |g, gv| {
                let dv = st.disc.params.bind(g, false);
                let o = generator_objective(g, &st.gen, gv, &st.disc, &dv, &fx.inputs, lambdas)?;
                pick(
                    match term {
                        Term::Dr => o.l_dr,
                        Term::Inp => o.l_inp,
                        Term::Adv => Some(o.l_adv_g),
                        Term::Total => Some(o.total),
                        Term::Geo => None,
                    },
                    name,
                )
            },
            st.gen.params.entries(),
            FD_STEP,
        )?,
    };
    Ok(SuiteResult::new(name, reports))
}

fn pick(v: Option<Var>, name: &str) -> Result<Var> {
    v.ok_or_else(|| Error::Invalid(format!("{name}: term is disabled in the fixture")))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
    )
}

/// `L_g` as a function of free target feature maps.
fn lg_feature_suite(fx: &Fixture, seed: u64) -> Result<SuiteResult> {
    let pseudo = &fx
        .inputs
        .fags
        .as_ref()
        .ok_or_else(|| Error::Invalid("fixture has no pseudo-source".into()))?
        .pseudo;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a);
    let params = pseudo
        .layers
        .iter()
        .map(|(id, t)| {
            Ok((
                format!("target.layer{id}"),
                random_tensor(&mut rng, t.shape())?.tracked(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<usize> = pseudo.layers.iter().map(|(id, _)| *id).collect();
    let reports = finite_diff_check(
        |g, vars| {
            let targets: Vec<(usize, Var)> =
                ids.iter().copied().zip(vars.iter().copied()).collect();
            geodesic_scc_loss_var(g, pseudo, &targets)
        },
        &params,
        FD_STEP,
    )?;
    Ok(SuiteResult::new("lg/features", reports))
}

/// `L_dr` as a function of free interpolant feature maps.
fn ldr_feature_suite(fx: &Fixture, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2b);
    let k = fx.config.interp_size;
    let params = vec![(
        "features".to_string(),
        random_tensor(&mut rng, &[k, 8, 16, 16])?.tracked(),
    )];
    let reports = finite_diff_check(
        |g: &mut Graph, v| distance_regularization_var(g, v[0]),
        &params,
        FD_STEP,
    )?;
    Ok(SuiteResult::new("ldr/features", reports))
}

/// Runs the suites selected by `target` on a freshly initialized model.
pub fn run_gradient_suite(target: GradTarget, seed: u64) -> Result<Vec<SuiteResult>> {
    let fx = fixture(seed)?;
    let want = |t: GradTarget| target == GradTarget::All || target == t;
    let mut out = Vec::new();
    if want(GradTarget::Lg) {
        out.push(lg_feature_suite(&fx, seed)?);
        out.push(objective_suite(
            &fx,
            Side::Disc,
            Term::Geo,
            "lg/discriminator",
        )?);
    }
    if want(GradTarget::Ldr) {
        out.push(ldr_feature_suite(&fx, seed)?);
        out.push(objective_suite(&fx, Side::Gen, Term::Dr, "ldr/generator")?);
    }
    if want(GradTarget::Linp) {
        out.push(objective_suite(
            &fx,
            Side::Disc,
            Term::Inp,
            "linp/discriminator",
        )?);
        out.push(objective_suite(
            &fx,
            Side::Gen,
            Term::Inp,
            "linp/generator",
        )?);
    }
    if want(GradTarget::Adv) {
        out.push(objective_suite(
            &fx,
            Side::Disc,
            Term::Adv,
            "adv/discriminator",
        )?);
        out.push(objective_suite(&fx, Side::Gen, Term::Adv, "adv/generator")?);
    }
    if want(GradTarget::Objectives) {
        out.push(objective_suite(
            &fx,
            Side::Disc,
            Term::Total,
            "objective/discriminator",
        )?);
        out.push(objective_suite(
            &fx,
            Side::Gen,
            Term::Total,
            "objective/generator",
        )?);
    }
    Ok(out)
}
