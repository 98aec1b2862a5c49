//! Alternating discriminator/generator training.
//!
//! Each step draws its randomness from a ChaCha stream keyed by `(seed,
//! step)`, so a run resumed from a checkpoint replays exactly what an
//! uninterrupted run would have done.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::fags::{
    anchor_latent, geodesic_scc_loss_var, pseudo_source_features, sample_dirichlet, FeatureSource,
    FeatureStack, PseudoSourceBatch,
};
use crate::losses::{
    adv_discriminator_var_with, adv_generator_var, adversarial_losses, distance_regularization,
    distance_regularization_var, interpolation_loss_var, interpolation_set, total_objectives,
    AdvForm, InterpolationSpec, Lambdas, LossParts, LossReport,
};
use crate::nets::{latent_batch, Discriminator, Generator};
use crate::optim::Adam;
use crate::tensor::{Graph, Tensor, Var};

const STREAM_DATA: u64 = 0;
const STREAM_MODEL: u64 = 1;
const STREAM_EVAL: u64 = u64::MAX;
const GEN_SEED_SALT: u64 = 0x6765_6e00;
const DISC_SEED_SALT: u64 = 0x6469_7363;

/// The random stream used for one purpose of one step.
pub fn step_rng(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(2).wrapping_add(purpose));
    rng
}

/// Fixed stream for evaluation latents, independent of the step.
pub fn eval_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_EVAL);
    rng
}

pub fn sample_latents<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

/// `batch` indices drawn uniformly with replacement from `0..n`.
pub fn sample_batch_indices<R: Rng + ?Sized>(rng: &mut R, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed steps.
    pub step: u64,
    pub seed: u64,
    pub gen: Generator,
    pub disc: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub history: Vec<LossReport>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let gen = Generator::new(config.net(), config.seed ^ GEN_SEED_SALT)?;
        let disc = Discriminator::new(config.net(), config.seed ^ DISC_SEED_SALT)?;
        let opt_g = Adam::new(&gen.params, config.lr_g, config.beta1, config.beta2);
        let opt_d = Adam::new(&disc.params, config.lr_d, config.beta1, config.beta2);
        Ok(Self {
            step: 0,
            seed: config.seed,
            gen,
            disc,
            opt_g,
            opt_d,
            history: Vec::new(),
        })
    }
}

/// Geodesic-augmentation inputs of one step.
#[derive(Debug, Clone)]
pub struct FagsInputs {
    /// `z_bar = sum_i omega_i z_i` over the step's latent batch.
    pub anchor: Vec<f64>,
    /// Surface point of the real batch's tapped features under the same omega.
    pub pseudo: PseudoSourceBatch,
}

/// Everything random or data-dependent that one step consumes.
#[derive(Debug, Clone)]
pub struct StepInputs {
    /// `[b, 1, s, s]`.
    pub real: Tensor,
    pub latents: Vec<Vec<f64>>,
    pub interp: Option<Vec<Vec<f64>>>,
    pub fags: Option<FagsInputs>,
}

fn real_feature_stacks(
    disc: &Discriminator,
    real: &Tensor,
    taps: &[usize],
) -> Result<Vec<FeatureStack>> {
    let (_, all_taps, _) = disc.evaluate(real)?;
    let n = real.shape()[0];
    (0..n)
        .map(|i| {
            let layers =
                taps.iter()
                    .map(|id| {
                        let (_, t) = all_taps.iter().find(|(l, _)| l == id).ok_or_else(|| {
                            Error::Config(format!("tap layer {id} does not exist"))
                        })?;
                        Ok((*id, t.row(i)?))
                    })
                    .collect::<Result<_>>()?;
            FeatureStack::new(layers, FeatureSource::Real)
        })
        .collect()
}

/// Draws latents, interpolation endpoints and omega, and builds the
/// pseudo-source from the current discriminator's view of `real`.
pub fn prepare_inputs<R: Rng + ?Sized>(
    rng: &mut R,
    disc: &Discriminator,
    config: &TrainConfig,
    real: Tensor,
) -> Result<StepInputs> {
    let b = real.shape().first().copied().unwrap_or(0);
    if b != config.batch_size {
        return Err(Error::Invalid(format!(
            "real batch has {b} images, config expects {}",
            config.batch_size
        )));
    }
    let d = config.latent_dim;
    let latents = sample_latents(rng, b, d);
    let fags = if config.fags_on {
        let omega = sample_dirichlet(b, config.dirichlet_alpha, rng)?;
        let anchor = anchor_latent(&latents, &omega)?;
        let stacks = real_feature_stacks(disc, &real, &config.tap_layers()?)?;
        let pseudo = pseudo_source_features(&stacks, &omega)?;
        Some(FagsInputs { anchor, pseudo })
    } else {
        None
    };
    let interp = if config.iandr_on {
        let ends = sample_latents(rng, 2, d);
        Some(interpolation_set(&InterpolationSpec {
            z_start: ends[0].clone(),
            z_end: ends[1].clone(),
            k: config.interp_size,
        })?)
    } else {
        None
    };
    Ok(StepInputs {
        real,
        latents,
        interp,
        fags,
    })
}

fn named<T>(component: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFiniteLoss { component },
        other => other,
    })
}

/// Graph nodes of the discriminator objective
/// `L^D = L_adv^D + lambda1 L_inp + lambda3 L_g`.
#[derive(Debug, Clone)]
pub struct DiscObjective {
    pub total: Var,
    pub l_adv_d: Var,
    pub l_inp: Option<Var>,
    pub l_g: Option<Var>,
    pub real_probs: Var,
    pub fake_probs: Var,
    /// Generator features of the interpolants, `[k, c, s, s]`.
    pub interp_features: Option<Var>,
}

/// Builds `L^D`. Generator outputs are detached, so no term reaches the
/// generator parameters even when they are bound as tracked leaves.
pub fn discriminator_objective(
    g: &mut Graph,
    gen: &Generator,
    gen_vars: &[Var],
    disc: &Discriminator,
    disc_vars: &[Var],
    inputs: &StepInputs,
    lambdas: Lambdas,
    adv_form: AdvForm,
) -> Result<DiscObjective> {
    let b = inputs.latents.len();
    let k = inputs.interp.as_ref().map_or(0, Vec::len);
    let mut latents = inputs.latents.clone();
    if let Some(interp) = &inputs.interp {
        latents.extend(interp.iter().cloned());
    }
    if let Some(f) = &inputs.fags {
        latents.push(f.anchor.clone());
    }
    let z = latent_batch(g, &latents, gen.config().latent_dim)?;
    let out = gen.forward(g, gen_vars, z)?;
    let fakes = g.detach(out.images);
    let real = g.constant(&inputs.real);
    let nr = inputs.real.shape()[0];
    let images = g.concat(&[real, fakes])?;
    let d_out = disc.forward(g, disc_vars, images)?;
    let real_probs = g.slice(d_out.probs, 0, nr)?;
    let fake_probs = g.slice(d_out.probs, nr, nr + b)?;
    let l_adv_d = named(
        "adversarial discriminator",
        adv_discriminator_var_with(g, adv_form, real_probs, fake_probs),
    )?;
    let mut total = l_adv_d;

    let (l_inp, interp_features) = if k > 0 {
        let p = g.slice(d_out.probs, nr + b, nr + b + k)?;
        let l = named("interpolation", interpolation_loss_var(g, p))?;
        let scaled = g.scale(l, lambdas.inp)?;
        total = g.add(total, scaled)?;
        let feats = g.slice(out.features, b, b + k)?;
        (Some(l), Some(g.detach(feats)))
    } else {
        (None, None)
    };

    let l_g = if let Some(f) = &inputs.fags {
        let row = nr + b + k;
        let mut targets = Vec::with_capacity(f.pseudo.layers.len());
        for (id, _) in &f.pseudo.layers {
            let tap = d_out
                .tap(*id)
                .ok_or_else(|| Error::Config(format!("tap layer {id} does not exist")))?;
            let s = g.shape(tap)[1..].to_vec();
            let one = g.slice(tap, row, row + 1)?;
            targets.push((*id, g.reshape(one, &s)?));
        }
        let l = named(
            "geodesic self-correlation",
            geodesic_scc_loss_var(g, &f.pseudo, &targets),
        )?;
        let scaled = g.scale(l, lambdas.geo)?;
        total = g.add(total, scaled)?;
        Some(l)
    } else {
        None
    };

    Ok(DiscObjective {
        total,
        l_adv_d,
        l_inp,
        l_g,
        real_probs,
        fake_probs,
        interp_features,
    })
}

/// Graph nodes of the generator objective
/// `L^G = L_adv^G - lambda1 L_inp + lambda2 L_dr`.
#[derive(Debug, Clone)]
pub struct GenObjective {
    pub total: Var,
    pub l_adv_g: Var,
    pub l_inp: Option<Var>,
    pub l_dr: Option<Var>,
}

pub fn generator_objective(
    g: &mut Graph,
    gen: &Generator,
    gen_vars: &[Var],
    disc: &Discriminator,
    disc_vars: &[Var],
    inputs: &StepInputs,
    lambdas: Lambdas,
) -> Result<GenObjective> {
    let b = inputs.latents.len();
    let k = inputs.interp.as_ref().map_or(0, Vec::len);
    let mut latents = inputs.latents.clone();
    if let Some(interp) = &inputs.interp {
        latents.extend(interp.iter().cloned());
    }
    let z = latent_batch(g, &latents, gen.config().latent_dim)?;
    let out = gen.forward(g, gen_vars, z)?;
    let d_out = disc.forward(g, disc_vars, out.images)?;
    let fake_probs = g.slice(d_out.probs, 0, b)?;
    let l_adv_g = named("adversarial generator", adv_generator_var(g, fake_probs))?;
    let mut total = l_adv_g;
    let (l_inp, l_dr) = if k > 0 {
        let p = g.slice(d_out.probs, b, b + k)?;
        let l_inp = named("interpolation", interpolation_loss_var(g, p))?;
        let feats = g.slice(out.features, b, b + k)?;
        let l_dr = named(
            "distance regularization",
            distance_regularization_var(g, feats),
        )?;
        let a = g.scale(l_inp, -lambdas.inp)?;
        let c = g.scale(l_dr, lambdas.dr)?;
        total = g.add(total, a)?;
        total = g.add(total, c)?;
        (Some(l_inp), Some(l_dr))
    } else {
        (None, None)
    };
    Ok(GenObjective {
        total,
        l_adv_g,
        l_inp,
        l_dr,
    })
}

/// One discriminator update then one generator update on `inputs`.
///
/// Every reported component is evaluated at the parameters the step
/// started from, so the report satisfies the objective identities exactly.
pub fn train_step_with(
    state: &mut TrainState,
    config: &TrainConfig,
    inputs: &StepInputs,
) -> Result<LossReport> {
    let lambdas = config.lambdas;

    let mut g = Graph::new();
    let gen_vars = state.gen.params.bind(&mut g, false);
    let disc_vars = state.disc.params.bind(&mut g, true);
    let d_obj = discriminator_objective(
        &mut g,
        &state.gen,
        &gen_vars,
        &state.disc,
        &disc_vars,
        inputs,
        lambdas,
        config.adv_form,
    )?;
    let (l_adv_g, _) = adversarial_losses(g.value(d_obj.real_probs), g.value(d_obj.fake_probs));
    let l_dr = match d_obj.interp_features {
        Some(f) => {
            let feats = g.to_tensor(f);
            let maps: Vec<Tensor> = (0..feats.shape()[0])
                .map(|i| feats.row(i))
                .collect::<Result<_>>()?;
            named("distance regularization", distance_regularization(&maps))?
        }
        None => 0.0,
    };
    let parts = LossParts {
        l_adv_g,
        l_adv_d: g.scalar(d_obj.l_adv_d)?,
        l_inp: d_obj.l_inp.map(|v| g.scalar(v)).transpose()?.unwrap_or(0.0),
        l_dr,
        l_g: d_obj.l_g.map(|v| g.scalar(v)).transpose()?.unwrap_or(0.0),
    };
    let report = total_objectives(&parts, lambdas)?;
    let grads = g.backward(d_obj.total)?;
    state.disc.params.accumulate(&grads, &disc_vars)?;
    state.opt_d.step(&mut state.disc.params)?;
    drop(g);

    let mut g = Graph::new();
    let gen_vars = state.gen.params.bind(&mut g, true);
    let disc_vars = state.disc.params.bind(&mut g, false);
    let g_obj = generator_objective(
        &mut g,
        &state.gen,
        &gen_vars,
        &state.disc,
        &disc_vars,
        inputs,
        lambdas,
    )?;
    let grads = g.backward(g_obj.total)?;
    state.gen.params.accumulate(&grads, &gen_vars)?;
    state.opt_g.step(&mut state.gen.params)?;

    state.step += 1;
    state.history.push(report);
    Ok(report)
}

/// Runs one step on `real_batch` with the step's own random stream.
pub fn train_step(
    state: &mut TrainState,
    config: &TrainConfig,
    real_batch: Tensor,
) -> Result<LossReport> {
    let mut rng = step_rng(state.seed, state.step, STREAM_MODEL);
    let inputs = prepare_inputs(&mut rng, &state.disc, config, real_batch)?;
    train_step_with(state, config, &inputs)
}

/// Indices of the real batch for the step after `state.step` completed steps.
pub fn batch_indices_for(state: &TrainState, config: &TrainConfig, n_images: usize) -> Vec<usize> {
    let mut rng = step_rng(state.seed, state.step, STREAM_DATA);
    sample_batch_indices(&mut rng, n_images, config.batch_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetSource;
    use crate::data::synthetic_blobs;

    fn small_config() -> TrainConfig {
        TrainConfig {
            dataset: DatasetSource::Synthetic { n: 10, seed: 1 },
            ..TrainConfig::default()
        }
    }

    fn batch(config: &TrainConfig, state: &TrainState) -> Tensor {
        let ds = synthetic_blobs(10, 16, 1).unwrap();
        ds.batch(&batch_indices_for(state, config, ds.len()))
            .unwrap()
    }

    #[test]
    fn one_step_changes_both_networks() {
        let cfg = small_config();
        let mut s = TrainState::new(&cfg).unwrap();
        let before = s.clone();
        let real = batch(&cfg, &s);
        let r = train_step(&mut s, &cfg, real).unwrap();
        assert_eq!(s.step, 1);
        assert_ne!(s.gen.params, before.gen.params);
        assert_ne!(s.disc.params, before.disc.params);
        assert!(r.l_g > 0.0 && r.l_dr > 0.0 && r.l_inp < 0.0);
        let expect_g = r.l_adv_g - 0.8 * r.l_inp + 1.25 * r.l_dr;
        assert_eq!(r.total_g, expect_g);
    }

    #[test]
    fn ablation_zeroes_components() {
        let cfg = TrainConfig {
            fags_on: false,
            iandr_on: false,
            ..small_config()
        };
        let mut s = TrainState::new(&cfg).unwrap();
        let real = batch(&cfg, &s);
        let r = train_step(&mut s, &cfg, real).unwrap();
        assert_eq!((r.l_g, r.l_dr, r.l_inp), (0.0, 0.0, 0.0));
        assert_eq!(r.total_d, r.l_adv_d);
        assert_eq!(r.total_g, r.l_adv_g);
    }

    #[test]
    fn same_seed_same_reports() {
        let cfg = small_config();
        let run = || {
            let mut s = TrainState::new(&cfg).unwrap();
            (0..3)
                .map(|_| {
                    let real = batch(&cfg, &s);
                    train_step(&mut s, &cfg, real).unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn wrong_batch_size_rejected() {
        let cfg = small_config();
        let mut s = TrainState::new(&cfg).unwrap();
        let ds = synthetic_blobs(10, 16, 1).unwrap();
        assert!(train_step(&mut s, &cfg, ds.batch(&[0, 1]).unwrap()).is_err());
    }

    #[test]
    fn geodesic_loss_never_reaches_generator_and_regularizer_never_reaches_discriminator() {
        let cfg = small_config();
        let s = TrainState::new(&cfg).unwrap();
        let mut rng = step_rng(0, 0, STREAM_MODEL);
        let inputs = prepare_inputs(&mut rng, &s.disc, &cfg, batch(&cfg, &s)).unwrap();

        let mut g = Graph::new();
        let gv = s.gen.params.bind(&mut g, true);
        let dv = s.disc.params.bind(&mut g, true);
        let d = discriminator_objective(
            &mut g,
            &s.gen,
            &gv,
            &s.disc,
            &dv,
            &inputs,
            cfg.lambdas,
            cfg.adv_form,
        )
        .unwrap();
        let grads = g.backward(d.l_g.unwrap()).unwrap();
        for v in &gv {
            assert!(grads
                .get(*v)
                .is_none_or(|x| x.iter().all(|e| e.abs() <= 1e-12)));
        }
        assert!(dv
            .iter()
            .any(|v| grads.get(*v).is_some_and(|x| x.iter().any(|e| *e != 0.0))));

        let mut g = Graph::new();
        let gv = s.gen.params.bind(&mut g, true);
        let dv = s.disc.params.bind(&mut g, true);
        let o =
            generator_objective(&mut g, &s.gen, &gv, &s.disc, &dv, &inputs, cfg.lambdas).unwrap();
        let grads = g.backward(o.l_dr.unwrap()).unwrap();
        for v in &dv {
            assert!(grads
                .get(*v)
                .is_none_or(|x| x.iter().all(|e| e.abs() <= 1e-12)));
        }
        assert!(gv
            .iter()
            .any(|v| grads.get(*v).is_some_and(|x| x.iter().any(|e| *e != 0.0))));
    }
}
