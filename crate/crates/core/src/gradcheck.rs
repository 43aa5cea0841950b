//! Central finite-difference gradient checking.
//!
//! Vector-valued maps are reduced to a scalar with a fixed random projection
//! `L(y) = sum_i r_i y_i`, accumulated in f64, so one backward pass with
//! `dy = r` gives the full analytic gradient.
//!
//! Differences are taken on the `f64` instantiation of the same code, which
//! serves as the reference for both the `f32` gradients (training precision)
//! and the `f64` ones.
//!
//! ReLU and max-pooling make the networks piecewise smooth. A coordinate
//! whose step straddles a switch point gives a meaningless central
//! difference, so the forward and backward one-sided slopes are compared
//! first; when they disagree the coordinate is flagged as non-smooth and left
//! out of the comparison. [`Comparison::passes`] bounds how many may be
//! dropped.

use rand::Rng as _;

use crate::rng::rng_from;
use crate::tensor::{FeatureMap, Real};

/// Step for differences taken in double precision.
pub const EPS64: f64 = 1e-6;

/// Tolerance for single-precision gradients.
pub const TOL32: f64 = 1e-3;

/// Tolerance for double-precision gradients.
pub const TOL64: f64 = 1e-6;

/// Agreement required between the one-sided slopes, relative to the largest
/// gradient component.
const SMOOTH_TOL: f64 = 1e-2;

/// Uniform in [-1, 1]; values are representable in `f32`.
pub fn random_map(shape: [usize; 4], seed: u64) -> FeatureMap {
    let mut rng = rng_from(seed);
    let n = shape.iter().product();
    FeatureMap::from_vec(shape[0], shape[1], shape[2], shape[3], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("valid shape")
}

/// Projection weights shaped like `y`.
pub fn projection_like<T: Real>(y: &FeatureMap<T>, seed: u64) -> FeatureMap {
    random_map(y.shape(), seed)
}

pub fn dot<T: Real>(y: &FeatureMap<T>, r: &FeatureMap) -> f64 {
    y.data.iter().zip(&r.data).map(|(&a, &b)| a.as_f64() * f64::from(b)).sum()
}

#[derive(Debug, Clone)]
pub struct Numeric {
    pub grad: Vec<f64>,
    pub smooth: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    /// `||a - n|| / (||a|| + ||n||)` over the smooth coordinates.
    pub error: f64,
    pub compared: usize,
    pub excluded: usize,
}

impl Comparison {
    /// Error below `tol` with at most a tenth of the coordinates excluded.
    pub fn passes(&self, tol: f64) -> bool {
        self.error < tol && self.excluded * 10 <= self.compared + self.excluded
    }
}

impl Numeric {
    pub fn compare<T: Real>(&self, analytic: &[T]) -> Comparison {
        assert_eq!(analytic.len(), self.grad.len());
        let (a, n): (Vec<f64>, Vec<f64>) = analytic
            .iter()
            .zip(&self.grad)
            .zip(&self.smooth)
            .filter(|(_, &s)| s)
            .map(|((&a, &n), _)| (a.as_f64(), n))
            .unzip();
        Comparison {
            error: relative_error(&a, &n),
            compared: a.len(),
            excluded: analytic.len() - a.len(),
        }
    }
}

fn probe_all(count: usize, eps: f64, mut f: impl FnMut(usize, f64) -> f64) -> Numeric {
    let f0 = if count > 0 { f(0, 0.0) } else { 0.0 };
    let slopes: Vec<(f64, f64)> = (0..count).map(|i| ((f(i, eps) - f0) / eps, (f0 - f(i, -eps)) / eps)).collect();
    let grad: Vec<f64> = slopes.iter().map(|(up, down)| 0.5 * (up + down)).collect();
    let scale = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let smooth = slopes
        .iter()
        .map(|(up, down)| (up - down).abs() <= SMOOTH_TOL * scale)
        .collect();
    Numeric { grad, smooth }
}

/// Central differences for every coordinate of `x`.
pub fn numeric_gradient<T: Real>(x: &FeatureMap<T>, eps: f64, mut f: impl FnMut(&FeatureMap<T>) -> f64) -> Numeric {
    let mut probe = x.clone();
    probe_all(x.len(), eps, |i, delta| {
        let orig = probe.data[i];
        probe.data[i] = orig + T::lit(delta);
        let v = f(&probe);
        probe.data[i] = orig;
        v
    })
}

/// Same, for coordinates reached through a callback: `f(i, delta)` must
/// evaluate the objective with coordinate `i` shifted by `delta`.
pub fn numeric_gradient_at(count: usize, eps: f64, f: impl FnMut(usize, f64) -> f64) -> Numeric {
    probe_all(count, eps, f)
}

/// `||a - n|| / max(||a|| + ||n||, 1e-300)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (&a, &n) in analytic.iter().zip(numeric) {
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    diff.sqrt() / (na.sqrt() + nn.sqrt()).max(1e-300)
}
