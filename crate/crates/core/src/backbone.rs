//! Baseline forecasters that produce the intermediate forecasts, and the
//! loader for forecasts produced by external models.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{join_forecasts, read_forecasts, ForecastRecord, WindowInstance};
use crate::error::{PirError, Result};
use crate::tensor::Tensor;

/// Repeats the last `period` input steps: `ȳ[c][t] = x[c][L_in - period + (t mod period)]`.
pub fn seasonal_naive(x: &Tensor, period: usize, l_out: usize) -> Result<Tensor> {
    let (n, l_in) = (x.rows(), x.cols());
    if period == 0 || period > l_in {
        return Err(PirError::invalid(format!("seasonal period {period} must be in 1..={l_in}")));
    }
    let mut out = Vec::with_capacity(n * l_out);
    for c in 0..n {
        let row = x.row(c);
        out.extend((0..l_out).map(|t| row[l_in - period + t % period]));
    }
    Tensor::matrix(n, l_out, out)
}

/// Channel-independent ridge regression from the input window to the target
/// window. The intercept is not penalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearBackbone {
    /// One `L_out x L_in` matrix per channel.
    pub weights: Vec<Tensor>,
    /// One length-`L_out` intercept per channel.
    pub bias: Vec<Vec<f64>>,
    pub ridge: f64,
}

/// Fits one ridge regression per channel on the given windows. With
/// `ridge = 0` the minimum-norm least-squares solution is used.
pub fn fit_linear(windows: &[WindowInstance], ridge: f64) -> Result<LinearBackbone> {
    let first = windows.first().ok_or_else(|| PirError::invalid("no training windows"))?;
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(PirError::invalid(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    let (n, l_in, l_out) = (first.x.rows(), first.x.cols(), first.y.cols());
    let m = windows.len();
    let mut weights = Vec::with_capacity(n);
    let mut bias = Vec::with_capacity(n);
    for c in 0..n {
        let xs = DMatrix::from_fn(m, l_in, |i, j| windows[i].x.at(c, j));
        let ys = DMatrix::from_fn(m, l_out, |i, j| windows[i].y.at(c, j));
        let x_mean = xs.row_mean();
        let y_mean = ys.row_mean();
        let xc = DMatrix::from_fn(m, l_in, |i, j| xs[(i, j)] - x_mean[j]);
        let yc = DMatrix::from_fn(m, l_out, |i, j| ys[(i, j)] - y_mean[j]);

        let beta = solve_ridge(&xc, &yc, ridge, c)?; // L_in x L_out
        let b: Vec<f64> = (0..l_out)
            .map(|t| y_mean[t] - (0..l_in).map(|j| x_mean[j] * beta[(j, t)]).sum::<f64>())
            .collect();
        let w = Tensor::matrix(l_out, l_in, (0..l_out * l_in).map(|i| beta[(i % l_in, i / l_in)]).collect())?;
        if !w.all_finite() || b.iter().any(|v| !v.is_finite()) {
            return Err(PirError::NonFinite(format!("linear backbone weights for channel {c}")));
        }
        weights.push(w);
        bias.push(b);
    }
    Ok(LinearBackbone { weights, bias, ridge })
}

fn solve_ridge(xc: &DMatrix<f64>, yc: &DMatrix<f64>, ridge: f64, channel: usize) -> Result<DMatrix<f64>> {
    let l_in = xc.ncols();
    if ridge > 0.0 {
        let mut gram = xc.transpose() * xc;
        for j in 0..l_in {
            gram[(j, j)] += ridge;
        }
        if let Some(chol) = gram.clone().cholesky() {
            return Ok(chol.solve(&(xc.transpose() * yc)));
        }
        log::warn!("channel {channel}: ridge system not positive definite; using pseudo-inverse");
        let pinv = gram
            .pseudo_inverse(1e-12)
            .map_err(|e| PirError::invalid(format!("pseudo-inverse failed: {e}")))?;
        return Ok(pinv * (xc.transpose() * yc));
    }
    let svd = xc.clone().svd(true, true);
    let tol = svd.singular_values.max() * (xc.nrows().max(l_in) as f64) * f64::EPSILON;
    let rank = svd.rank(tol);
    if rank < l_in {
        log::warn!("channel {channel}: design matrix has rank {rank} < {l_in}; using minimum-norm solution");
    }
    svd.solve(yc, tol).map_err(|e| PirError::invalid(format!("least-squares solve failed: {e}")))
}

impl LinearBackbone {
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.weights.len();
        if x.rows() != n {
            return Err(PirError::invalid(format!("model has {n} channels, input has {}", x.rows())));
        }
        let (l_out, l_in) = (self.weights[0].rows(), self.weights[0].cols());
        if x.cols() != l_in {
            return Err(PirError::invalid(format!("model expects L_in = {l_in}, input has {}", x.cols())));
        }
        let mut out = Vec::with_capacity(n * l_out);
        for c in 0..n {
            let xr = x.row(c);
            for t in 0..l_out {
                let w = self.weights[c].row(t);
                out.push(self.bias[c][t] + w.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        Tensor::matrix(n, l_out, out)
    }
}

/// A native baseline model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backbone {
    Seasonal { period: usize, l_out: usize },
    Linear(LinearBackbone),
}

impl Backbone {
    pub fn name(&self) -> &'static str {
        match self {
            Backbone::Seasonal { .. } => "seasonal",
            Backbone::Linear(_) => "linear",
        }
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Backbone::Seasonal { period, l_out } => seasonal_naive(x, *period, *l_out),
            Backbone::Linear(m) => m.predict(x),
        }
    }

    /// Forecasts for every instance, in instance order. Only inputs are read.
    pub fn forecast(&self, instances: &[WindowInstance]) -> Result<Vec<ForecastRecord>> {
        instances
            .iter()
            .map(|w| Ok(ForecastRecord::new(w.id, self.predict(&w.x)?, self.name())))
            .collect()
    }
}

/// Reads an exchange file and aligns it to `instances` (same order).
pub fn load_external_forecasts(path: &Path, instances: &[WindowInstance]) -> Result<Vec<ForecastRecord>> {
    join_forecasts(read_forecasts(path)?, instances)
}
