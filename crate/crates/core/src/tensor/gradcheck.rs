use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// Coordinates sampled per parameter tensor; smaller tensors are checked in full.
const SAMPLES_PER_TENSOR: usize = 32;
const SAMPLE_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl GradReport {
    fn new(parameter: &str, index: usize, analytic: f64, numeric: f64) -> Self {
        let rel_error = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12);
        Self {
            parameter: parameter.to_string(),
            index,
            analytic,
            numeric,
            rel_error,
        }
    }
}

/// Compares reverse-mode gradients against central differences.
///
/// `loss_fn` builds a scalar loss from the bound parameter leaves (in the
/// order given). Every parameter is bound as tracked regardless of its flag.
pub fn finite_diff_check<F>(
    loss_fn: F,
    params: &[(String, Tensor)],
    step: f64,
) -> Result<Vec<GradReport>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor> = params.iter().map(|(_, t)| t.clone().tracked()).collect();
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t)).collect();
        let loss = loss_fn(&mut g, &vars)?;
        g.scalar(loss)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = work.iter().map(|t| g.leaf(t)).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(SAMPLE_SEED);
    let mut reports = Vec::new();
    for (p, (name, _)) in params.iter().enumerate() {
        let n = work[p].numel();
        let coords: Vec<usize> = if n <= SAMPLES_PER_TENSOR {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, SAMPLES_PER_TENSOR).into_vec();
            c.sort_unstable();
            c
        };
        let analytic = grads
            .get(vars[p])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        for i in coords {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let plus = eval(&work);
            work[p].data_mut()[i] = orig - step;
            let minus = eval(&work);
            work[p].data_mut()[i] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() => (a, b),
                _ => {
                    return Err(Error::NonFinite(format!(
                        "loss at perturbed coordinate {i} of parameter '{name}'"
                    )))
                }
            };
            reports.push(GradReport::new(
                name,
                i,
                analytic[i],
                (plus - minus) / (2.0 * step),
            ));
        }
    }
    Ok(reports)
}

pub fn max_rel_error(reports: &[GradReport]) -> f64 {
    reports.iter().map(|r| r.rel_error).fold(0.0, f64::max)
}

/// Fraction of reports with `rel_error <= tol`.
pub fn pass_fraction(reports: &[GradReport], tol: f64) -> f64 {
    if reports.is_empty() {
        return 1.0;
    }
    reports.iter().filter(|r| r.rel_error <= tol).count() as f64 / reports.len() as f64
}
