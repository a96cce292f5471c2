//! Diagonal-covariance Gaussian mixture models.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Gmm {
    weights: Vec<f64>,
    /// C×F component means.
    means: DMatrix<f64>,
    /// C×F diagonal variances.
    variances: DMatrix<f64>,
}

impl Gmm {
    pub fn new(weights: Vec<f64>, means: DMatrix<f64>, variances: DMatrix<f64>) -> Result<Self> {
        let c = weights.len();
        if c == 0 {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        if means.nrows() != c || variances.nrows() != c {
            return Err(Error::dim(c, means.nrows(), "mixture component count"));
        }
        if means.ncols() != variances.ncols() || means.ncols() == 0 {
            return Err(Error::dim(means.ncols(), variances.ncols(), "mixture feature dim"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}")));
        }
        if variances.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("variances must be strictly positive".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    pub fn variances(&self) -> &DMatrix<f64> {
        &self.variances
    }

    /// Same weights and variances, new means.
    pub fn with_means(&self, means: DMatrix<f64>) -> Result<Self> {
        Self::new(self.weights.clone(), means, self.variances.clone())
    }

    /// Log-density of `x` under component `c` alone (no mixture weight).
    pub fn component_log_density(&self, c: usize, x: &[f64]) -> f64 {
        let f = self.dim();
        let mut acc = -0.5 * f as f64 * (2.0 * PI).ln();
        for j in 0..f {
            let v = self.variances[(c, j)];
            let d = x[j] - self.means[(c, j)];
            acc -= 0.5 * (v.ln() + d * d / v);
        }
        acc
    }

    /// Component posteriors for one observation.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let logs: Vec<f64> = (0..self.n_components())
            .map(|c| self.weights[c].ln() + self.component_log_density(c, x))
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let c = if self.n_components() == 1 {
            0
        } else {
            WeightedIndex::new(&self.weights)
                .expect("weights validated at construction")
                .sample(rng)
        };
        DVector::from_fn(self.dim(), |j, _| {
            let z: f64 = StandardNormal.sample(rng);
            self.means[(c, j)] + self.variances[(c, j)].sqrt() * z
        })
    }
}
