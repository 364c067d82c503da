//! Coordinate-wise bijections between a model's native parameter space and
//! the unconstrained space the proposal family lives in.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-coordinate bijection onto the real line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordTransform {
    /// Already unconstrained.
    Identity,
    /// Positive coordinate, mapped by `ln`.
    Log,
    /// Coordinate in (0, 1), mapped by `ln(x / (1 - x))`.
    Logit,
}

/// A vector of per-coordinate transforms applied elementwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transform {
    coords: Vec<CoordTransform>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Transform {
    pub fn new(coords: Vec<CoordTransform>) -> Self {
        Self { coords }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            coords: vec![CoordTransform::Identity; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[CoordTransform] {
        &self.coords
    }

    /// Map a model-space point to the unconstrained space.
    pub fn to_unconstrained(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(theta)?;
        let mut out = theta.clone();
        for (i, t) in self.coords.iter().enumerate() {
            out[i] = match t {
                CoordTransform::Identity => theta[i],
                CoordTransform::Log => {
                    if theta[i] <= 0.0 {
                        return Err(Error::InvalidArgument(format!(
                            "coordinate {i} must be positive for log transform, got {}",
                            theta[i]
                        )));
                    }
                    theta[i].ln()
                }
                CoordTransform::Logit => {
                    if theta[i] <= 0.0 || theta[i] >= 1.0 {
                        return Err(Error::InvalidArgument(format!(
                            "coordinate {i} must lie in (0,1) for logit transform, got {}",
                            theta[i]
                        )));
                    }
                    (theta[i] / (1.0 - theta[i])).ln()
                }
            };
        }
        Ok(out)
    }

    /// Map an unconstrained point back to the model space.
    pub fn to_model(&self, unconstrained: &DVector<f64>) -> DVector<f64> {
        let mut out = unconstrained.clone();
        for (i, t) in self.coords.iter().enumerate() {
            out[i] = match t {
                CoordTransform::Identity => unconstrained[i],
                CoordTransform::Log => unconstrained[i].exp(),
                CoordTransform::Logit => sigmoid(unconstrained[i]),
            };
        }
        out
    }

    /// Log absolute Jacobian determinant of the inverse map, evaluated at an
    /// unconstrained point. Densities in the unconstrained space are the
    /// model-space density at the mapped point plus this term.
    pub fn log_jacobian_inv(&self, unconstrained: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for (i, t) in self.coords.iter().enumerate() {
            let x = unconstrained[i];
            acc += match t {
                CoordTransform::Identity => 0.0,
                // d/dx e^x = e^x
                CoordTransform::Log => x,
                // d/dx sigmoid(x) = sigmoid(x) (1 - sigmoid(x))
                CoordTransform::Logit => -softplus(x) - softplus(-x),
            };
        }
        acc
    }

    fn check_dim(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.coords.len() {
            return Err(Error::InvalidArgument(format!(
                "dimension mismatch: transform has {} coordinates, point has {}",
                self.coords.len(),
                v.len()
            )));
        }
        Ok(())
    }
}
