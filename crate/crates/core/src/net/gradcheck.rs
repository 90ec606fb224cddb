//! Central-difference check of analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, point: &[f64]) -> Result<f64>;
    fn value_and_grad(&self, point: &[f64]) -> Result<(f64, Vec<f64>)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub coordinates: Vec<usize>,
}

/// Compares the analytic gradient at `point` with central differences of
/// step `epsilon` on `samples` coordinates drawn without replacement
/// (all coordinates when `samples` is `None` or exceeds the dimension).
pub fn gradient_check<O: Objective + ?Sized>(
    objective: &O,
    point: &[f64],
    epsilon: f64,
    samples: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    if point.len() != objective.dim() {
        return Err(Error::Argument(format!(
            "point has {} coordinates, objective expects {}",
            point.len(),
            objective.dim()
        )));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Argument(format!("invalid epsilon {epsilon}")));
    }
    let (f0, grad) = objective.value_and_grad(point)?;
    if !f0.is_finite() {
        return Err(Error::Numerical(format!("objective is {f0} at the check point")));
    }
    let n = point.len();
    let coordinates: Vec<usize> = match samples {
        Some(s) if s < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut c = index::sample(&mut rng, n, s).into_vec();
            c.sort_unstable();
            c
        }
        _ => (0..n).collect(),
    };
    let mut probe = point.to_vec();
    let mut max_rel_error = 0.0;
    let mut worst_coordinate = coordinates.first().copied().unwrap_or(0);
    for &i in &coordinates {
        let x = point[i];
        probe[i] = x + epsilon;
        let fp = objective.value(&probe)?;
        probe[i] = x - epsilon;
        let fm = objective.value(&probe)?;
        probe[i] = x;
        let numeric = (fp - fm) / (2.0 * epsilon);
        if !numeric.is_finite() {
            return Err(Error::Numerical(format!("non-finite difference at coordinate {i}")));
        }
        let rel = (grad[i] - numeric).abs() / grad[i].abs().max(1.0);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_coordinate = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_coordinate,
        coordinates,
    })
}

/// Adapts a pair of closures to [`Objective`].
pub struct FnObjective<F, G> {
    pub dim: usize,
    pub f: F,
    pub grad: G,
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, point: &[f64]) -> Result<f64> {
        Ok((self.f)(point))
    }

    fn value_and_grad(&self, point: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok(((self.f)(point), (self.grad)(point)))
    }
}
