//! Agreement between model attention and the 0/1 alignment prior.
//!
//! Larger values mean more agreement, so the objective adds `λ·Δ`:
//! MUL is `Σ a·â`, MSE is `-½ Σ (a - â)²`. Only target rows whose prior
//! contains a 1 take part; other rows have no usable attention.

use serde::{Deserialize, Serialize};

use crate::corpus::SupervisionMatrix;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agreement {
    Mul,
    Mse,
}

impl std::str::FromStr for Agreement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mul" => Ok(Agreement::Mul),
            "mse" => Ok(Agreement::Mse),
            other => Err(Error::Validation(format!(
                "unknown agreement {other:?} (expected mul or mse)"
            ))),
        }
    }
}

impl std::fmt::Display for Agreement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Agreement::Mul => "mul",
            Agreement::Mse => "mse",
        })
    }
}

impl Agreement {
    pub fn row_value(self, a: &[f64], prior: &[u8]) -> f64 {
        match self {
            Agreement::Mul => a.iter().zip(prior).map(|(x, &p)| x * p as f64).sum(),
            Agreement::Mse => {
                -0.5 * a
                    .iter()
                    .zip(prior)
                    .map(|(x, &p)| {
                        let e = x - p as f64;
                        e * e
                    })
                    .sum::<f64>()
            }
        }
    }

    /// `∂Δ_row / ∂a`
    pub fn row_grad(self, a: &[f64], prior: &[u8]) -> Vec<f64> {
        match self {
            Agreement::Mul => prior.iter().map(|&p| p as f64).collect(),
            Agreement::Mse => a.iter().zip(prior).map(|(x, &p)| p as f64 - x).collect(),
        }
    }

    /// Δ over a full `Ty x Tx` attention matrix.
    pub fn value(self, a: &Tensor, prior: &SupervisionMatrix) -> Result<f64> {
        if a.shape() != [prior.rows(), prior.cols()] {
            return Err(Error::Shape(format!(
                "attention {:?} vs prior {}x{}",
                a.shape(),
                prior.rows(),
                prior.cols()
            )));
        }
        Ok((0..prior.rows())
            .filter(|&i| prior.row_is_aligned(i))
            .map(|i| self.row_value(a.row(i), prior.row(i)))
            .sum())
    }
}

pub fn agreement_mul(a: &Tensor, prior: &SupervisionMatrix) -> Result<f64> {
    Agreement::Mul.value(a, prior)
}

pub fn agreement_mse(a: &Tensor, prior: &SupervisionMatrix) -> Result<f64> {
    Agreement::Mse.value(a, prior)
}
