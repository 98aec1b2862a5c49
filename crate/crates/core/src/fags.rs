//! Feature augmentation on the geodesic surface.
//!
//! Real-image discriminator features are projected to pre-shapes and mixed
//! on the geodesic surface with Dirichlet weights, giving a pseudo-source
//! feature per tapped layer. The same weights mix latent vectors into an
//! anchor latent whose generated image supplies the target features. The
//! loss compares spatial self-correlation matrices of the two with smooth-l1.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::geometry::{geodesic_surface_point, project_preshape, WeightVector};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Real,
    Generated,
}

/// Tapped feature maps of one image, each `[c, h, w]`, ordered by layer id.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub layers: Vec<(usize, Tensor)>,
    pub source: FeatureSource,
}

impl FeatureStack {
    pub fn new(layers: Vec<(usize, Tensor)>, source: FeatureSource) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(Error::Invalid(
                    "feature layer ids must be strictly increasing".into(),
                ));
            }
        }
        for (id, t) in &layers {
            if t.shape().len() != 3 {
                return Err(Error::Invalid(format!(
                    "layer {id} feature must be c x h x w, got {:?}",
                    t.shape()
                )));
            }
            if t.numel() % 2 != 0 {
                return Err(Error::OddFeatureVolume(t.numel()));
            }
        }
        Ok(Self { layers, source })
    }
}

/// Cosine similarities between all ordered pairs of spatial positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfCorrMatrix {
    /// Row-major `(h*w) x (h*w)`.
    pub values: Vec<f64>,
    pub h: usize,
    pub w: usize,
    /// Set when some position vector had zero norm; its similarities are 0.
    pub degenerate: bool,
}

impl SelfCorrMatrix {
    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.values[p * self.positions() + q]
    }
}

#[derive(Debug, Clone)]
pub struct PseudoSourceBatch {
    /// Per-layer surface points reshaped to `[c, h, w]`.
    pub layers: Vec<(usize, Tensor)>,
    pub omega: WeightVector,
}

#[derive(Debug, Clone)]
pub struct TargetFeatureBatch {
    /// Per-layer projected anchor features reshaped to `[c, h, w]`.
    pub layers: Vec<(usize, Tensor)>,
    pub anchor: Vec<f64>,
}

/// Draws simplex weights from a symmetric Dirichlet via normalized Gamma draws.
pub fn sample_dirichlet<R: Rng + ?Sized>(
    n: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<WeightVector> {
    if n == 0 || !(alpha > 0.0) {
        return Err(Error::Invalid(format!(
            "dirichlet needs n >= 1 and alpha > 0 (n={n}, alpha={alpha})"
        )));
    }
    if n == 1 {
        return WeightVector::new(vec![1.0]);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Invalid(e.to_string()))?;
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // All-zero draws only happen through underflow at tiny alpha.
        if total > 0.0 && total.is_finite() {
            return WeightVector::new(draws.into_iter().map(|d| d / total).collect());
        }
    }
}

/// `z_bar = sum_i omega_i z_i`.
pub fn anchor_latent(latents: &[Vec<f64>], omega: &WeightVector) -> Result<Vec<f64>> {
    if latents.len() != omega.len() {
        return Err(Error::Invalid(format!(
            "{} latents but {} weights",
            latents.len(),
            omega.len()
        )));
    }
    let dim = latents[0].len();
    let mut out = vec![0.0; dim];
    for (z, &w) in latents.iter().zip(omega.weights()) {
        if z.len() != dim {
            return Err(Error::Shape {
                op: "anchor_latent",
                left: vec![dim],
                right: vec![z.len()],
            });
        }
        out.iter_mut().zip(z).for_each(|(o, v)| *o += w * v);
    }
    Ok(out)
}

/// Mixes the projected real features of every tapped layer on the geodesic
/// surface with weights `omega`.
pub fn pseudo_source_features(
    real: &[FeatureStack],
    omega: &WeightVector,
) -> Result<PseudoSourceBatch> {
    let first = real
        .first()
        .ok_or_else(|| Error::Invalid("no real feature stacks".into()))?;
    if real.len() != omega.len() {
        return Err(Error::Invalid(format!(
            "{} feature stacks but {} weights",
            real.len(),
            omega.len()
        )));
    }
    let mut layers = Vec::with_capacity(first.layers.len());
    for (li, (id, reference)) in first.layers.iter().enumerate() {
        let mut taus = Vec::with_capacity(real.len());
        for stack in real {
            let (sid, feat) = stack
                .layers
                .get(li)
                .ok_or_else(|| Error::Invalid(format!("feature stack is missing layer {id}")))?;
            if sid != id || feat.shape() != reference.shape() {
                return Err(Error::Shape {
                    op: "pseudo_source_features",
                    left: reference.shape().to_vec(),
                    right: feat.shape().to_vec(),
                });
            }
            taus.push(project_preshape(feat).map_err(|e| with_layer(e, *id))?);
        }
        let mixed = geodesic_surface_point(&taus, omega)?;
        layers.push((*id, mixed.to_tensor(reference.shape())?));
    }
    Ok(PseudoSourceBatch {
        layers,
        omega: omega.clone(),
    })
}

fn with_layer(e: Error, layer: usize) -> Error {
    match e {
        Error::DegenerateFeature { .. } => Error::DegenerateFeature { layer: Some(layer) },
        other => other,
    }
}

/// Projects the anchor image's features; plain-value counterpart of
/// [`project_preshape_var`].
pub fn target_features(stack: &FeatureStack, anchor: Vec<f64>) -> Result<TargetFeatureBatch> {
    let layers = stack
        .layers
        .iter()
        .map(|(id, t)| {
            let tau = project_preshape(t).map_err(|e| with_layer(e, *id))?;
            Ok((*id, tau.to_tensor(t.shape())?))
        })
        .collect::<Result<_>>()?;
    Ok(TargetFeatureBatch { layers, anchor })
}

/// `C(p, q) = <f(p), f(q)> / (|f(p)| |f(q)|)` over positions of a `[c, h, w]` map.
pub fn self_correlation(feature: &Tensor) -> Result<SelfCorrMatrix> {
    let s = feature.shape();
    if s.len() != 3 {
        return Err(Error::Invalid(format!(
            "self-correlation expects c x h x w, got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    let x = feature.data();
    let mut unit = vec![0.0; hw * c];
    let mut degenerate = false;
    for p in 0..hw {
        let norm = (0..c).map(|ch| x[ch * hw + p].powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            degenerate = true;
            continue;
        }
        for ch in 0..c {
            unit[p * c + ch] = x[ch * hw + p] / norm;
        }
    }
    let mut values = vec![0.0; hw * hw];
    for p in 0..hw {
        for q in p..hw {
            let v: f64 = (0..c).map(|ch| unit[p * c + ch] * unit[q * c + ch]).sum();
            values[p * hw + q] = v;
            values[q * hw + p] = v;
        }
    }
    Ok(SelfCorrMatrix {
        values,
        h,
        w,
        degenerate,
    })
}

fn smooth_l1(e: f64) -> f64 {
    if e.abs() < 1.0 {
        0.5 * e * e
    } else {
        e.abs() - 0.5
    }
}

fn scc_loss_layers(a: &[(usize, Tensor)], b: &[(usize, Tensor)]) -> Result<f64> {
    check_layers(
        a.iter().map(|(id, t)| (*id, t.shape())),
        b.iter().map(|(id, t)| (*id, t.shape())),
    )?;
    let mut total = 0.0;
    for ((_, ta), (_, tb)) in a.iter().zip(b) {
        let (ca, cb) = (self_correlation(ta)?, self_correlation(tb)?);
        let per: f64 = ca
            .values
            .iter()
            .zip(&cb.values)
            .map(|(x, y)| smooth_l1(x - y))
            .sum();
        total += per / ca.values.len() as f64;
    }
    Ok(total / a.len() as f64)
}

fn check_layers<'a>(
    a: impl ExactSizeIterator<Item = (usize, &'a [usize])>,
    b: impl ExactSizeIterator<Item = (usize, &'a [usize])>,
) -> Result<()> {
    if a.len() != b.len() || a.len() == 0 {
        return Err(Error::Invalid(format!(
            "layer mismatch: {} pseudo-source layers vs {} target layers",
            a.len(),
            b.len()
        )));
    }
    for ((ia, sa), (ib, sb)) in a.zip(b) {
        if ia != ib || sa != sb {
            return Err(Error::Invalid(format!(
                "layer mismatch: layer {ia} {sa:?} vs layer {ib} {sb:?}"
            )));
        }
    }
    Ok(())
}

/// Mean over layers of the mean elementwise smooth-l1 between self-correlation matrices.
pub fn geodesic_scc_loss(pseudo: &PseudoSourceBatch, target: &TargetFeatureBatch) -> Result<f64> {
    scc_loss_layers(&pseudo.layers, &target.layers)
}

/// Differentiable `f_p` on a `[c, h, w]` (or any even-volume) node.
pub fn project_preshape_var(g: &mut Graph, feature: Var) -> Result<Var> {
    let shape = g.shape(feature).to_vec();
    let n: usize = shape.iter().product();
    if n % 2 != 0 {
        return Err(Error::OddFeatureVolume(n));
    }
    let flat = g.reshape(feature, &[2, n / 2])?;
    let centered = g.center_rows(flat)?;
    let norm = g.norm(centered)?;
    if g.scalar(norm)? == 0.0 {
        return Err(Error::DegenerateFeature { layer: None });
    }
    let unit = g.div_by_scalar(centered, norm)?;
    g.reshape(unit, &shape)
}

/// Differentiable self-correlation of a `[c, h, w]` node, shape `[hw, hw]`.
pub fn self_correlation_var(g: &mut Graph, feature: Var) -> Result<Var> {
    let s = g.shape(feature).to_vec();
    if s.len() != 3 {
        return Err(Error::Invalid(format!(
            "self-correlation expects c x h x w, got {s:?}"
        )));
    }
    let by_channel = g.reshape(feature, &[s[0], s[1] * s[2]])?;
    let by_position = g.transpose(by_channel)?;
    let unit = g.normalize_rows(by_position)?;
    let unit_t = g.transpose(unit)?;
    g.matmul(unit, unit_t)
}

/// `L_g` with the pseudo-source held constant and the target features
/// (raw anchor-image features, one `[c, h, w]` node per layer) tracked.
pub fn geodesic_scc_loss_var(
    g: &mut Graph,
    pseudo: &PseudoSourceBatch,
    target: &[(usize, Var)],
) -> Result<Var> {
    let shapes: Vec<(usize, Vec<usize>)> = target
        .iter()
        .map(|(id, v)| (*id, g.shape(*v).to_vec()))
        .collect();
    check_layers(
        pseudo.layers.iter().map(|(id, t)| (*id, t.shape())),
        shapes.iter().map(|(id, s)| (*id, s.as_slice())),
    )?;
    let mut per_layer = Vec::with_capacity(target.len());
    for ((id, src), (_, feat)) in pseudo.layers.iter().zip(target) {
        let src_corr = self_correlation(src)?;
        let n = src_corr.positions();
        let cx = g.input(vec![n, n], src_corr.values)?;
        let projected = project_preshape_var(g, *feat).map_err(|e| with_layer(e, *id))?;
        let cz = self_correlation_var(g, projected)?;
        let diff = g.sub(cx, cz)?;
        let l = g.smooth_l1(diff)?;
        per_layer.push(g.mean(l)?);
    }
    let stacked = g.concat(&per_layer)?;
    g.mean(stacked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feature(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![c, h, w],
            (0..c * h * w).map(|_| rng.random::<f64>() - 0.5).collect(),
        )
        .unwrap()
    }

    #[test]
    fn dirichlet_single_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            sample_dirichlet(1, 1.0, &mut rng).unwrap().weights(),
            &[1.0]
        );
        let a = sample_dirichlet(4, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_dirichlet(4, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!((a.sum() - 1.0).abs() <= 1e-12);
        assert!(sample_dirichlet(0, 1.0, &mut rng).is_err());
        assert!(sample_dirichlet(3, 0.0, &mut rng).is_err());
    }

    #[test]
    fn dirichlet_moments() {
        // E[w_i] = alpha_i / sum(alpha) = 1/4 for the symmetric case.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut acc = [0.0; 4];
        let draws = 100_000;
        for _ in 0..draws {
            let w = sample_dirichlet(4, 1.0, &mut rng).unwrap();
            acc.iter_mut().zip(w.weights()).for_each(|(a, v)| *a += v);
        }
        for a in acc {
            assert!((a / draws as f64 - 0.25).abs() <= 0.01);
        }
    }

    #[test]
    fn anchor_examples() {
        let z = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let w = WeightVector::new(vec![0.25, 0.75]).unwrap();
        assert_eq!(anchor_latent(&z, &w).unwrap(), vec![0.75, 0.75]);
        let three = vec![vec![1.0, -2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        assert_eq!(
            anchor_latent(&three, &WeightVector::one_hot(3, 1).unwrap()).unwrap(),
            vec![3.0, 4.0]
        );
        let same = vec![vec![0.3, 0.7]; 3];
        let mixed = anchor_latent(&same, &WeightVector::new(vec![0.2, 0.3, 0.5]).unwrap()).unwrap();
        assert!(mixed
            .iter()
            .zip(&same[0])
            .all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(anchor_latent(&z, &WeightVector::one_hot(3, 0).unwrap()).is_err());
    }

    fn stack(seed: u64) -> FeatureStack {
        FeatureStack::new(
            vec![
                (1, feature(8, 4, 4, seed)),
                (2, feature(16, 2, 2, seed + 100)),
            ],
            FeatureSource::Real,
        )
        .unwrap()
    }

    #[test]
    fn pseudo_source_one_hot_and_single() {
        let stacks: Vec<_> = (0..3).map(stack).collect();
        let ps = pseudo_source_features(&stacks, &WeightVector::one_hot(3, 2).unwrap()).unwrap();
        for ((_, got), (_, raw)) in ps.layers.iter().zip(&stacks[2].layers) {
            let expected = project_preshape(raw).unwrap();
            assert_eq!(got.shape(), raw.shape());
            for (a, b) in got.data().iter().zip(expected.points()) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
        let single =
            pseudo_source_features(&stacks[..1], &WeightVector::new(vec![1.0]).unwrap()).unwrap();
        let expected = project_preshape(&stacks[0].layers[0].1).unwrap();
        assert_eq!(single.layers[0].1.data(), expected.points());
    }

    #[test]
    fn pseudo_source_names_degenerate_layer() {
        let mut s = stack(1);
        s.layers[1].1 = Tensor::zeros(&[16, 2, 2]);
        let err = pseudo_source_features(&[s], &WeightVector::new(vec![1.0]).unwrap()).unwrap_err();
        assert_eq!(err.to_string(), "degenerate feature at layer 2");
    }

    #[test]
    fn self_correlation_examples() {
        let shared =
            Tensor::new(vec![2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]).unwrap();
        let m = self_correlation(&shared).unwrap();
        assert!(m.values.iter().all(|v| (v - 1.0).abs() < 1e-12));

        // positions carry (1,0) and (0,1)
        let orth = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = self_correlation(&orth).unwrap();
        assert_eq!(m.values, vec![1.0, 0.0, 0.0, 1.0]);

        let mut data = feature(3, 2, 2, 4).into_data();
        data[0] = 0.0;
        data[4] = 0.0;
        data[8] = 0.0;
        let m = self_correlation(&Tensor::new(vec![3, 2, 2], data).unwrap()).unwrap();
        assert!(m.degenerate);
        assert!(m.values[..4].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn self_correlation_matrix_invariants() {
        let m = self_correlation(&feature(5, 3, 3, 11)).unwrap();
        let n = m.positions();
        for p in 0..n {
            assert!((m.get(p, p) - 1.0).abs() <= 1e-9);
            for q in 0..n {
                assert!((m.get(p, q) - m.get(q, p)).abs() <= 1e-9);
                assert!(m.get(p, q).abs() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn self_correlation_graph_matches_plain() {
        let f = feature(6, 3, 2, 5);
        let mut g = Graph::new();
        let v = g.constant(&f);
        let c = self_correlation_var(&mut g, v).unwrap();
        let plain = self_correlation(&f).unwrap();
        for (a, b) in g.value(c).iter().zip(&plain.values) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn scc_loss_constant_offset_branch() {
        // Two matrices offset by 0.5 everywhere: 0.5 * 0.25 per element.
        let e: f64 = 0.5;
        assert_eq!(smooth_l1(e), 0.125);
        assert_eq!(smooth_l1(-2.0), 1.5);
    }

    #[test]
    fn scc_loss_matches_double_loop_oracle() {
        let a = vec![(1, feature(4, 3, 3, 21)), (2, feature(8, 2, 2, 22))];
        let b = vec![(1, feature(4, 3, 3, 23)), (2, feature(8, 2, 2, 24))];
        let got = scc_loss_layers(&a, &b).unwrap();

        let cos = |t: &Tensor, p: usize, q: usize| {
            let (c, hw) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
            let d = t.data();
            let (mut dot, mut np, mut nq) = (0.0, 0.0, 0.0);
            for ch in 0..c {
                dot += d[ch * hw + p] * d[ch * hw + q];
                np += d[ch * hw + p] * d[ch * hw + p];
                nq += d[ch * hw + q] * d[ch * hw + q];
            }
            dot / (np.sqrt() * nq.sqrt())
        };
        let mut layer_means = Vec::new();
        for ((_, ta), (_, tb)) in a.iter().zip(&b) {
            let hw = ta.shape()[1] * ta.shape()[2];
            let mut acc = 0.0;
            for p in 0..hw {
                for q in 0..hw {
                    let e: f64 = cos(ta, p, q) - cos(tb, p, q);
                    acc += if e.abs() < 1.0 {
                        0.5 * e * e
                    } else {
                        e.abs() - 0.5
                    };
                }
            }
            layer_means.push(acc / (hw * hw) as f64);
        }
        let oracle = layer_means.iter().sum::<f64>() / layer_means.len() as f64;
        assert!((got - oracle).abs() <= 1e-12, "{got} vs {oracle}");
        assert_eq!(scc_loss_layers(&a, &a).unwrap(), 0.0);
        assert!((scc_loss_layers(&b, &a).unwrap() - got).abs() <= 1e-12);
    }

    #[test]
    fn scc_loss_layer_mismatch() {
        let a = vec![(1, feature(4, 2, 2, 1))];
        let b = vec![(2, feature(4, 2, 2, 1))];
        assert!(scc_loss_layers(&a, &b).is_err());
        assert!(scc_loss_layers(&a, &[]).is_err());
    }

    #[test]
    fn scc_loss_var_matches_plain() {
        let stacks: Vec<_> = (0..3).map(stack).collect();
        let omega = WeightVector::new(vec![0.2, 0.5, 0.3]).unwrap();
        let ps = pseudo_source_features(&stacks, &omega).unwrap();
        let anchor = stack(77);
        let target = target_features(&anchor, vec![]).unwrap();
        let plain = geodesic_scc_loss(&ps, &target).unwrap();

        let mut g = Graph::new();
        let vars: Vec<_> = anchor
            .layers
            .iter()
            .map(|(id, t)| (*id, g.leaf(&t.clone().tracked())))
            .collect();
        let l = geodesic_scc_loss_var(&mut g, &ps, &vars).unwrap();
        assert!((g.scalar(l).unwrap() - plain).abs() <= 1e-12);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(vars[0].1).unwrap().iter().any(|v| *v != 0.0));
    }
}
