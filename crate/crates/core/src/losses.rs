//! Adversarial, interpolation-supervision and distance-regularization losses,
//! plus the combined generator and discriminator objectives.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var, PROB_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationSpec {
    pub z_start: Vec<f64>,
    pub z_end: Vec<f64>,
    pub k: usize,
}

/// `k` evenly spaced points from `z_start` to `z_end`. Both endpoints are
/// exact and a zero-length path stays constant.
pub fn interpolation_set(spec: &InterpolationSpec) -> Result<Vec<Vec<f64>>> {
    if spec.k < 2 {
        return Err(Error::Invalid(format!(
            "interpolation needs k >= 2, got {}",
            spec.k
        )));
    }
    if spec.z_start.len() != spec.z_end.len() {
        return Err(Error::Shape {
            op: "interpolation_set",
            left: vec![spec.z_start.len()],
            right: vec![spec.z_end.len()],
        });
    }
    let last = (spec.k - 1) as f64;
    Ok((0..spec.k)
        .map(|i| {
            let t = i as f64 / last;
            spec.z_start
                .iter()
                .zip(&spec.z_end)
                .map(|(a, b)| {
                    if t <= 0.5 {
                        a + t * (b - a)
                    } else {
                        b - (1.0 - t) * (b - a)
                    }
                })
                .collect()
        })
        .collect())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `mean_i ln p_i` over the discriminator outputs on the interpolants.
pub fn interpolation_loss(probs: &[f64]) -> f64 {
    probs.iter().map(|&p| clamp_prob(p).ln()).sum::<f64>() / probs.len() as f64
}

pub fn interpolation_loss_var(g: &mut Graph, probs: Var) -> Result<Var> {
    let p = g.clamp_prob(probs)?;
    let lp = g.ln(p)?;
    g.mean(lp)
}

/// Form of the discriminator adversarial term. The generator term is
/// `-mean ln D(G(z))` under both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdvForm {
    /// `mean ln(1 - D(x)) + mean ln D(G(z))`.
    #[default]
    Direct,
    /// `-mean ln D(x) - mean ln(1 - D(G(z)))`.
    Logistic,
}

impl FromStr for AdvForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "logistic" => Ok(Self::Logistic),
            other => Err(Error::Config(format!(
                "unknown adversarial form {other:?} (direct or logistic)"
            ))),
        }
    }
}

impl fmt::Display for AdvForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Direct => "direct",
            Self::Logistic => "logistic",
        })
    }
}

fn mean_clamped(v: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    v.iter().map(|&p| f(clamp_prob(p))).sum::<f64>() / v.len() as f64
}

/// Returns `(L_adv^G, L_adv^D)`:
/// `-mean ln D(G(z))` and `mean ln(1 - D(x)) + mean ln D(G(z))`.
pub fn adversarial_losses(real_probs: &[f64], fake_probs: &[f64]) -> (f64, f64) {
    let fake_log = mean_clamped(fake_probs, f64::ln);
    (
        -fake_log,
        adv_discriminator_loss(AdvForm::Direct, real_probs, fake_probs),
    )
}

pub fn adv_discriminator_loss(form: AdvForm, real_probs: &[f64], fake_probs: &[f64]) -> f64 {
    match form {
        AdvForm::Direct => {
            mean_clamped(real_probs, |p| (1.0 - p).ln()) + mean_clamped(fake_probs, f64::ln)
        }
        AdvForm::Logistic => {
            -mean_clamped(real_probs, f64::ln) - mean_clamped(fake_probs, |p| (1.0 - p).ln())
        }
    }
}

/// `mean ln p` or, with `complement`, `mean ln(1 - p)` over clamped `p`.
fn mean_log_var(g: &mut Graph, probs: Var, complement: bool) -> Result<Var> {
    let mut p = g.clamp_prob(probs)?;
    if complement {
        let n = g.neg(p)?;
        p = g.add_scalar(n, 1.0)?;
    }
    let l = g.ln(p)?;
    g.mean(l)
}

pub fn adv_generator_var(g: &mut Graph, fake_probs: Var) -> Result<Var> {
    let m = mean_log_var(g, fake_probs, false)?;
    g.neg(m)
}

pub fn adv_discriminator_var(g: &mut Graph, real_probs: Var, fake_probs: Var) -> Result<Var> {
    adv_discriminator_var_with(g, AdvForm::Direct, real_probs, fake_probs)
}

pub fn adv_discriminator_var_with(
    g: &mut Graph,
    form: AdvForm,
    real_probs: Var,
    fake_probs: Var,
) -> Result<Var> {
    match form {
        AdvForm::Direct => {
            let real = mean_log_var(g, real_probs, true)?;
            let fake = mean_log_var(g, fake_probs, false)?;
            g.add(real, fake)
        }
        AdvForm::Logistic => {
            let real = mean_log_var(g, real_probs, false)?;
            let fake = mean_log_var(g, fake_probs, true)?;
            let sum = g.add(real, fake)?;
            g.neg(sum)
        }
    }
}

/// Target of the distance regularizer: `[1, ..., 1, k - 1]` scaled to sum 1.
pub fn distance_target(k: usize) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::Invalid(format!(
            "distance regularization needs k >= 2, got {k}"
        )));
    }
    let total = 2.0 * (k - 1) as f64;
    let mut q = vec![1.0 / total; k];
    q[k - 1] = (k - 1) as f64 / total;
    Ok(q)
}

/// Pooled spatial size used by the regularizer: a quarter per side, at least 1.
pub fn pooled_size(h: usize) -> usize {
    h.div_ceil(4).max(1)
}

/// Cyclic consecutive L2 distances `|f_i - f_{(i+1) mod k}|` between the
/// pooled features of a `[k, c, h, w]` node; shape `[k]`.
pub fn cyclic_distances_var(g: &mut Graph, feats: Var) -> Result<Var> {
    let s = g.shape(feats).to_vec();
    if s.len() != 4 {
        return Err(Error::Invalid(format!(
            "expected k x c x h x w features, got {s:?}"
        )));
    }
    let k = s[0];
    if k < 2 {
        return Err(Error::Invalid(format!(
            "distance regularization needs k >= 2, got {k}"
        )));
    }
    let pooled = g.adaptive_avg_pool2d(feats, pooled_size(s[2]), pooled_size(s[3]))?;
    let flat_len = g.shape(pooled)[1..].iter().product::<usize>();
    let flat = g.reshape(pooled, &[k, flat_len])?;
    let head = g.slice(flat, 1, k)?;
    let tail = g.slice(flat, 0, 1)?;
    let rolled = g.concat(&[head, tail])?;
    let diff = g.sub(flat, rolled)?;
    g.row_norms(diff)
}

/// KL divergence, mean-reduced over the `k` entries, between the target
/// and `log_softmax` of the cyclic distances.
pub fn distance_regularization_var(g: &mut Graph, feats: Var) -> Result<Var> {
    let dist = cyclic_distances_var(g, feats)?;
    kl_to_target_var(g, dist)
}

/// `mean_i q_i (ln q_i - log_softmax(dist)_i)`.
pub fn kl_to_target_var(g: &mut Graph, dist: Var) -> Result<Var> {
    let k = g.shape(dist).iter().product::<usize>();
    let q = distance_target(k)?;
    let log_q: Vec<f64> = q.iter().map(|v| v.ln()).collect();
    let lsm = g.log_softmax(dist)?;
    let log_q = g.input(vec![k], log_q)?;
    let q = g.input(vec![k], q)?;
    let gap = g.sub(log_q, lsm)?;
    let weighted = g.mul(q, gap)?;
    g.mean(weighted)
}

/// Plain-value `L_dr` over `k` feature maps of identical `[c, h, w]` shape.
pub fn distance_regularization(features: &[Tensor]) -> Result<f64> {
    if features.len() < 2 {
        return Err(Error::Invalid(format!(
            "distance regularization needs k >= 2, got {}",
            features.len()
        )));
    }
    let stacked = Tensor::stack(features)?;
    let mut g = Graph::new();
    let v = g.constant(&stacked);
    let l = distance_regularization_var(&mut g, v)?;
    g.scalar(l)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lambdas {
    /// Weight of the interpolation supervision term in both objectives.
    pub inp: f64,
    /// Weight of the distance regularizer in the generator objective.
    pub dr: f64,
    /// Weight of the geodesic self-correlation loss in the discriminator objective.
    pub geo: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            inp: 0.8,
            dr: 1.25,
            geo: 0.8,
        }
    }
}

/// Loss components of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub l_adv_g: f64,
    pub l_adv_d: f64,
    pub l_inp: f64,
    pub l_dr: f64,
    pub l_g: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_adv_g: f64,
    pub l_adv_d: f64,
    pub l_inp: f64,
    pub l_dr: f64,
    pub l_g: f64,
    pub total_g: f64,
    pub total_d: f64,
    pub lambdas: Lambdas,
}

impl LossReport {
    pub fn parts(&self) -> LossParts {
        LossParts {
            l_adv_g: self.l_adv_g,
            l_adv_d: self.l_adv_d,
            l_inp: self.l_inp,
            l_dr: self.l_dr,
            l_g: self.l_g,
        }
    }
}

/// `L^G = L_adv^G - l1 L_inp + l2 L_dr` and `L^D = L_adv^D + l1 L_inp + l3 L_g`.
pub fn total_objectives(parts: &LossParts, lambdas: Lambdas) -> Result<LossReport> {
    for (name, v) in [
        ("adversarial generator", parts.l_adv_g),
        ("adversarial discriminator", parts.l_adv_d),
        ("interpolation", parts.l_inp),
        ("distance regularization", parts.l_dr),
        ("geodesic self-correlation", parts.l_g),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { component: name });
        }
    }
    Ok(LossReport {
        l_adv_g: parts.l_adv_g,
        l_adv_d: parts.l_adv_d,
        l_inp: parts.l_inp,
        l_dr: parts.l_dr,
        l_g: parts.l_g,
        total_g: parts.l_adv_g - lambdas.inp * parts.l_inp + lambdas.dr * parts.l_dr,
        total_d: parts.l_adv_d + lambdas.inp * parts.l_inp + lambdas.geo * parts.l_g,
        lambdas,
    })
}
