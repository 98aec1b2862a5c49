//! Pre-shape space: projection of 2-D landmark configurations onto the unit
//! hypersphere of centered configurations, great-circle curves between two
//! pre-shapes, and the barycentric surface built from iterated curves.
//!
//! A feature map of volume `c*h*w` is read as `chw/2` planar landmarks: the
//! flat row-major buffer is split in half, first half = x row, second half =
//! y row. With that layout the `2 x m` matrix shares its buffer with the
//! flattened feature.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance for pre-shape invariants.
pub const PRESHAPE_TOL: f64 = 1e-9;
const COINCIDENT: f64 = 1e-12;
const ANTIPODAL_MARGIN: f64 = 1e-9;

/// A centered, unit-norm `2 x m` configuration stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PreShape {
    points: Vec<f64>,
}

impl PreShape {
    /// Projects a flat `2 x m` buffer: center each row, then divide by the
    /// Frobenius norm.
    pub fn project(flat: &[f64]) -> Result<Self> {
        if flat.len() % 2 != 0 || flat.is_empty() {
            return Err(Error::OddFeatureVolume(flat.len()));
        }
        let m = flat.len() / 2;
        let mut points = flat.to_vec();
        for row in points.chunks_mut(m) {
            let mean = row.iter().sum::<f64>() / m as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        let norm = points.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateFeature { layer: None });
        }
        points.iter_mut().for_each(|v| *v /= norm);
        Ok(Self { points })
    }

    /// Wraps a buffer that must already satisfy the pre-shape invariants.
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() % 2 != 0 || points.is_empty() {
            return Err(Error::OddFeatureVolume(points.len()));
        }
        let s = Self { points };
        if !s.is_valid(PRESHAPE_TOL) {
            return Err(Error::Invalid(
                "points are not a centered unit-norm configuration".into(),
            ));
        }
        Ok(s)
    }

    pub fn landmarks(&self) -> usize {
        self.points.len() / 2
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn x_row(&self) -> &[f64] {
        &self.points[..self.landmarks()]
    }

    pub fn y_row(&self) -> &[f64] {
        &self.points[self.landmarks()..]
    }

    pub fn into_points(self) -> Vec<f64> {
        self.points
    }

    pub fn inner(&self, other: &PreShape) -> f64 {
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn row_means(&self) -> (f64, f64) {
        let m = self.landmarks() as f64;
        (
            self.x_row().iter().sum::<f64>() / m,
            self.y_row().iter().sum::<f64>() / m,
        )
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let (mx, my) = self.row_means();
        mx.abs() <= tol && my.abs() <= tol && (self.norm() - 1.0).abs() <= tol
    }

    /// Reshapes back to the feature layout it was projected from.
    pub fn to_tensor(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.points.clone())
    }

    fn combine(a: &PreShape, ca: f64, b: &PreShape, cb: f64) -> PreShape {
        let mut points: Vec<f64> = a
            .points
            .iter()
            .zip(&b.points)
            .map(|(x, y)| ca * x + cb * y)
            .collect();
        // Remove rounding drift off the sphere; the combination is already centered.
        let n = points.iter().map(|v| v * v).sum::<f64>().sqrt();
        points.iter_mut().for_each(|v| *v /= n);
        PreShape { points }
    }
}

/// `f_p`: projects one feature map (any shape with even volume) to a pre-shape.
pub fn project_preshape(feature: &Tensor) -> Result<PreShape> {
    PreShape::project(feature.data())
}

/// Great-circle distance in radians, `arccos <a, b>` evaluated in the
/// cancellation-free form `2 atan2(|a - b|, |a + b|)`.
pub fn geodesic_distance(a: &PreShape, b: &PreShape) -> f64 {
    debug_assert_eq!(a.points.len(), b.points.len());
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.points.iter().zip(&b.points) {
        diff += (x - y) * (x - y);
        sum += (x + y) * (x + y);
    }
    (2.0 * diff.sqrt().atan2(sum.sqrt())).clamp(0.0, PI)
}

#[derive(Debug, Clone)]
pub struct GeodesicSpec<'a> {
    pub tau_1: &'a PreShape,
    pub tau_2: &'a PreShape,
    /// Geodesic distance between the endpoints.
    pub d: f64,
    /// Arc length from `tau_1`, in `[0, d]`.
    pub s: f64,
}

impl<'a> GeodesicSpec<'a> {
    pub fn new(tau_1: &'a PreShape, tau_2: &'a PreShape, s: f64) -> Result<Self> {
        if tau_1.points.len() != tau_2.points.len() {
            return Err(Error::Shape {
                op: "geodesic",
                left: vec![2, tau_1.landmarks()],
                right: vec![2, tau_2.landmarks()],
            });
        }
        let d = geodesic_distance(tau_1, tau_2);
        if !(0.0..=d + 1e-12).contains(&s) {
            return Err(Error::Invalid(format!(
                "arc parameter {s} outside [0, {d}]"
            )));
        }
        Ok(Self {
            tau_1,
            tau_2,
            d,
            s: s.min(d),
        })
    }

    /// Spec whose arc parameter is `fraction * d`.
    pub fn at_fraction(tau_1: &'a PreShape, tau_2: &'a PreShape, fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Invalid(format!(
                "curve fraction {fraction} outside [0, 1]"
            )));
        }
        let d = geodesic_distance(tau_1, tau_2);
        Self::new(tau_1, tau_2, fraction * d)
    }
}

/// `cos(s) tau_1 + sin(s) (tau_2 - tau_1 cos d) / sin d`.
pub fn geodesic_curve_point(spec: &GeodesicSpec<'_>) -> Result<PreShape> {
    let d = spec.d;
    if d <= COINCIDENT {
        return Ok(spec.tau_1.clone());
    }
    if d >= PI - ANTIPODAL_MARGIN {
        return Err(Error::Antipodal(d));
    }
    let (sin_s, cos_s) = spec.s.sin_cos();
    let (sin_d, cos_d) = d.sin_cos();
    let k = sin_s / sin_d;
    Ok(PreShape::combine(
        spec.tau_1,
        cos_s - k * cos_d,
        spec.tau_2,
        k,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    weights: Vec<f64>,
}

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Invalid("empty weight vector".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invalid(format!(
                "weights must be finite and nonnegative: {weights:?}"
            )));
        }
        if !(weights.iter().sum::<f64>() > 0.0) {
            return Err(Error::Invalid("weights must have a positive sum".into()));
        }
        Ok(Self { weights })
    }

    pub fn one_hot(n: usize, j: usize) -> Result<Self> {
        let mut w = vec![0.0; n];
        *w.get_mut(j)
            .ok_or_else(|| Error::Invalid(format!("one-hot index {j} out of range for {n}")))? =
            1.0;
        Self::new(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Running barycenter while folding in one pre-shape at a time.
#[derive(Debug, Clone)]
pub struct SurfaceIterationState {
    pub mu: PreShape,
    /// 1-based index of the last folded input.
    pub j: usize,
    pub cumulative_weight: f64,
}

impl SurfaceIterationState {
    pub fn start(tau_1: &PreShape, omega_1: f64) -> Self {
        Self {
            mu: tau_1.clone(),
            j: 1,
            cumulative_weight: omega_1,
        }
    }

    /// `mu_j = G_curve(mu_{j-1}, tau_j)(omega_j / sum_{i<=j} omega_i)`, the
    /// fraction scaling the current geodesic distance.
    pub fn advance(&mut self, tau_j: &PreShape, omega_j: f64) -> Result<()> {
        self.cumulative_weight += omega_j;
        self.j += 1;
        if self.cumulative_weight <= 0.0 {
            // Every weight so far is zero; the running point carries no mass.
            self.mu = tau_j.clone();
            return Ok(());
        }
        let fraction = omega_j / self.cumulative_weight;
        if fraction == 0.0 {
            return Ok(());
        }
        if fraction >= 1.0 {
            self.mu = tau_j.clone();
            return Ok(());
        }
        let spec = GeodesicSpec::at_fraction(&self.mu, tau_j, fraction)?;
        self.mu = geodesic_curve_point(&spec)?;
        Ok(())
    }
}

/// Point on the geodesic surface of `taus` with barycentric weights `omega`,
/// folded in input order.
pub fn geodesic_surface_point(taus: &[PreShape], omega: &WeightVector) -> Result<PreShape> {
    let first = taus
        .first()
        .ok_or_else(|| Error::Invalid("geodesic surface needs at least one pre-shape".into()))?;
    if taus.len() != omega.len() {
        return Err(Error::Invalid(format!(
            "{} pre-shapes but {} weights",
            taus.len(),
            omega.len()
        )));
    }
    let w = omega.weights();
    let mut state = SurfaceIterationState::start(first, w[0]);
    for (tau, &wj) in taus.iter().zip(w).skip(1) {
        if tau.points.len() != first.points.len() {
            return Err(Error::Shape {
                op: "geodesic_surface_point",
                left: vec![2, first.landmarks()],
                right: vec![2, tau.landmarks()],
            });
        }
        state.advance(tau, wj)?;
    }
    Ok(state.mu)
}
