//! JSON schema for potential sets.
//!
//! ```json
//! {
//!   "dim": 2,
//!   "prior_weights": [0.5, 0.5],
//!   "clients": [
//!     {"type": "gaussian", "mean": [...], "precision": [[...], ...]},
//!     {"type": "logistic", "covariates": [[...], ...], "labels": [...], "ridge": 1.0},
//!     {"type": "quadratic_terms", "terms": [{"mean": [...], "precision": [[...], ...]}, ...]}
//!   ]
//! }
//! ```

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{
    ClientPotential, GaussianPotential, LogisticPotential, PotentialSet, QuadraticSumPotential,
    QuadraticTerm,
};

/// On-disk description of a potential set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PotentialSetSchema {
    pub dim: usize,
    pub prior_weights: Vec<f64>,
    pub clients: Vec<ClientSchema>,
}

/// On-disk description of a single client.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientSchema {
    Gaussian {
        mean: Vec<f64>,
        precision: Vec<Vec<f64>>,
    },
    Logistic {
        covariates: Vec<Vec<f64>>,
        labels: Vec<f64>,
        ridge: f64,
    },
    QuadraticTerms {
        terms: Vec<QuadraticTermSchema>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadraticTermSchema {
    pub mean: Vec<f64>,
    pub precision: Vec<Vec<f64>>,
}

fn vector_from<S: Scalar>(v: &[f64]) -> DVector<S> {
    DVector::from_fn(v.len(), |i, _| S::lit(v[i]))
}

fn matrix_from<S: Scalar>(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<S>> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(Error::InvalidInput(format!("{what} must not be empty")));
    }
    let ncols = rows[0].len();
    for row in rows {
        if row.len() != ncols {
            return Err(Error::InvalidInput(format!("{what} rows have uneven length")));
        }
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| S::lit(rows[i][j])))
}

fn vector_to(v: &DVector<impl Scalar>) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

fn matrix_to(m: &DMatrix<impl Scalar>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)].to_f64_lossy()).collect())
        .collect()
}

impl PotentialSetSchema {
    /// Validates and converts the schema into a model.
    pub fn build<S: Scalar>(&self) -> Result<PotentialSet<S>> {
        let mut clients = Vec::with_capacity(self.clients.len());
        for (i, client) in self.clients.iter().enumerate() {
            let model = match client {
                ClientSchema::Gaussian { mean, precision } => ClientPotential::Gaussian(
                    GaussianPotential::new(vector_from(mean), matrix_from(precision, "precision")?)?,
                ),
                ClientSchema::Logistic {
                    covariates,
                    labels,
                    ridge,
                } => ClientPotential::Logistic(LogisticPotential::new(
                    matrix_from(covariates, "covariates")?,
                    vector_from(labels),
                    S::lit(*ridge),
                )?),
                ClientSchema::QuadraticTerms { terms } => {
                    let terms = terms
                        .iter()
                        .map(|t| {
                            QuadraticTerm::new(
                                vector_from(&t.mean),
                                matrix_from(&t.precision, "term precision")?,
                            )
                        })
                        .collect::<Result<Vec<_>>>()?;
                    ClientPotential::QuadraticSum(QuadraticSumPotential::new(terms)?)
                }
            };
            if model.dim() != self.dim {
                return Err(Error::InvalidInput(format!(
                    "client {i} has dimension {}, expected {}",
                    model.dim(),
                    self.dim
                )));
            }
            clients.push(model);
        }
        PotentialSet::with_prior_weights(clients, vector_from(&self.prior_weights))
    }

    /// Serializes a model back into the schema.
    pub fn from_set<S: Scalar>(set: &PotentialSet<S>) -> Self {
        let clients = set
            .clients()
            .iter()
            .map(|c| match c {
                ClientPotential::Gaussian(g) => ClientSchema::Gaussian {
                    mean: vector_to(g.mean()),
                    precision: matrix_to(g.precision()),
                },
                ClientPotential::Logistic(l) => ClientSchema::Logistic {
                    covariates: matrix_to(l.covariates()),
                    labels: vector_to(l.labels()),
                    ridge: l.ridge().to_f64_lossy(),
                },
                ClientPotential::QuadraticSum(q) => ClientSchema::QuadraticTerms {
                    terms: q
                        .terms()
                        .iter()
                        .map(|t| QuadraticTermSchema {
                            mean: vector_to(t.mean()),
                            precision: matrix_to(t.precision()),
                        })
                        .collect(),
                },
            })
            .collect();
        Self {
            dim: set.dim(),
            prior_weights: vector_to(set.prior_weights()),
            clients,
        }
    }
}

/// Loads a potential set from a JSON file.
pub fn load_potential_set<S: Scalar>(path: impl AsRef<Path>) -> Result<PotentialSet<S>> {
    let text = std::fs::read_to_string(path)?;
    let schema: PotentialSetSchema = serde_json::from_str(&text)?;
    schema.build()
}

/// Writes a potential set as pretty-printed JSON.
pub fn save_potential_set<S: Scalar>(set: &PotentialSet<S>, path: impl AsRef<Path>) -> Result<()> {
    let schema = PotentialSetSchema::from_set(set);
    let text = serde_json::to_string_pretty(&schema)?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_schema_round_trips() {
        let text = r#"{
            "dim": 2,
            "prior_weights": [0.6, 0.4],
            "clients": [
                {"type": "gaussian", "mean": [0.0, 1.0], "precision": [[2.0, 0.0], [0.0, 1.0]]},
                {"type": "logistic", "covariates": [[1.0, -1.0], [0.5, 0.5]], "labels": [1, 0], "ridge": 0.5}
            ]
        }"#;
        let schema: PotentialSetSchema = serde_json::from_str(text).unwrap();
        let set: PotentialSet<f64> = schema.build().unwrap();
        assert_eq!(set.num_clients(), 2);
        assert_eq!(set.dim(), 2);

        let back = PotentialSetSchema::from_set(&set);
        let set2: PotentialSet<f64> = back.build().unwrap();
        let x = DVector::from_vec(vec![0.3, -0.7]);
        assert_eq!(set.grad_sum(&x).unwrap(), set2.grad_sum(&x).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let text = r#"{
            "dim": 3,
            "prior_weights": [1.0],
            "clients": [
                {"type": "gaussian", "mean": [0.0, 1.0], "precision": [[2.0, 0.0], [0.0, 1.0]]}
            ]
        }"#;
        let schema: PotentialSetSchema = serde_json::from_str(text).unwrap();
        assert!(schema.build::<f64>().is_err());
    }
}
