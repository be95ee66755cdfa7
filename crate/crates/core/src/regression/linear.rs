//! Ridge (normal equations) and lasso (cyclic coordinate descent) on
//! standardized features. Fitted weights are reported in original units.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Penalty {
    Ridge,
    Lasso,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub penalty: Penalty,
    pub lambda: f64,
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl LinearModel {
    pub fn predict_row(&self, x: ArrayView1<f64>) -> f64 {
        self.intercept + x.iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>()
    }
}

/// Column means and deviations of a training design. Constant columns get
/// a unit scale so they standardize to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>) -> Standardizer {
        let n = x.nrows().max(1) as f64;
        let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
        let mut scale = Array1::zeros(x.ncols());
        for (j, col) in x.axis_iter(Axis(1)).enumerate() {
            let var = col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            scale[j] = if sd > 1e-12 * mean[j].abs().max(1.0) { sd } else { f64::INFINITY };
        }
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.scale
    }

    /// Maps standardized-space weights back to original units.
    fn unstandardize(&self, w_std: &Array1<f64>, y_mean: f64) -> (Vec<f64>, f64) {
        let w: Array1<f64> = w_std / &self.scale;
        let intercept = y_mean - w.dot(&self.mean);
        (w.to_vec(), intercept)
    }
}

fn check_xy(x: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!("{} rows vs {} targets", x.nrows(), y.len())));
    }
    if x.nrows() < 2 {
        return Err(Error::Data("need at least 2 training rows".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite training value".into()));
    }
    Ok(())
}

/// Solves `(XᵀX + λI) w = Xᵀy` for an already centred design. When there
/// are more columns than rows (and λ > 0) the equivalent dual system
/// `(XXᵀ + λI) α = y`, `w = Xᵀα` is used.
pub fn ridge_solve(x: ArrayView2<f64>, y: ArrayView1<f64>, lambda: f64) -> Result<Array1<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::Range(format!("ridge λ must be >= 0, got {lambda}")));
    }
    let (n, p) = x.dim();
    let singular = |e: Error| match e {
        Error::Numeric(m) if lambda == 0.0 => {
            Error::Numeric(format!("{m}; the least-squares system is singular, use λ > 0"))
        }
        other => other,
    };
    if lambda == 0.0 || p <= n {
        let mut a = x.t().dot(&x);
        for i in 0..p {
            a[[i, i]] += lambda;
        }
        let l = cholesky(&a).map_err(singular)?;
        Ok(cholesky_solve(&l, &x.t().dot(&y)))
    } else {
        let gram = x.dot(&x.t());
        ridge_dual(x, y, &gram, lambda)
    }
}

fn ridge_dual(x: ArrayView2<f64>, y: ArrayView1<f64>, gram: &Array2<f64>, lambda: f64) -> Result<Array1<f64>> {
    let mut k = gram.clone();
    for i in 0..k.nrows() {
        k[[i, i]] += lambda;
    }
    let alpha = cholesky_solve(&cholesky(&k)?, &y.to_owned());
    Ok(x.t().dot(&alpha))
}

pub fn ridge_fit(x: ArrayView2<f64>, y: ArrayView1<f64>, lambda: f64) -> Result<LinearModel> {
    Ok(ridge_path(x, y, &[lambda])?.remove(0))
}

/// Ridge fits for several λ sharing one standardization and Gram matrix.
pub fn ridge_path(x: ArrayView2<f64>, y: ArrayView1<f64>, lambdas: &[f64]) -> Result<Vec<LinearModel>> {
    check_xy(x, y)?;
    let st = Standardizer::fit(x);
    let xs = st.apply(x);
    let y_mean = y.mean().unwrap_or(0.0);
    let yc = &y - y_mean;
    let (n, p) = xs.dim();
    let gram = if p > n { Some(xs.dot(&xs.t())) } else { None };
    lambdas
        .iter()
        .map(|&lambda| {
            let w = match &gram {
                Some(g) if lambda > 0.0 => ridge_dual(xs.view(), yc.view(), g, lambda)?,
                _ => ridge_solve(xs.view(), yc.view(), lambda)?,
            };
            let (weights, intercept) = st.unstandardize(&w, y_mean);
            Ok(LinearModel {
                penalty: Penalty::Ridge,
                lambda,
                weights,
                intercept,
            })
        })
        .collect()
}

pub const LASSO_MAX_SWEEPS: usize = 20_000;

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Largest KKT violation of `(1/2n)‖y − Xw‖² + λ‖w‖₁` at `w`, given the
/// residual `r = y − Xw`.
pub fn lasso_kkt_violation(x: ArrayView2<f64>, r: ArrayView1<f64>, w: ArrayView1<f64>, lambda: f64) -> f64 {
    let n = x.nrows() as f64;
    let mut worst = 0.0f64;
    for (j, col) in x.axis_iter(Axis(1)).enumerate() {
        let g = col.dot(&r) / n;
        let v = if w[j] == 0.0 {
            (g.abs() - lambda).max(0.0)
        } else {
            (g - lambda * w[j].signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// Coordinate descent on a centred design; returns the weights and the
/// final residual.
pub fn lasso_solve(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    lambda: f64,
    tol: f64,
) -> Result<(Array1<f64>, Array1<f64>)> {
    if !(lambda >= 0.0) {
        return Err(Error::Range(format!("lasso λ must be >= 0, got {lambda}")));
    }
    let (n, p) = x.dim();
    let nf = n as f64;
    let col_sq: Vec<f64> = x.axis_iter(Axis(1)).map(|c| c.dot(&c) / nf).collect();
    let mut w = Array1::<f64>::zeros(p);
    let mut r = y.to_owned();
    for sweep in 0..LASSO_MAX_SWEEPS {
        for j in 0..p {
            if col_sq[j] == 0.0 {
                continue;
            }
            let col = x.column(j);
            let rho = col.dot(&r) / nf + col_sq[j] * w[j];
            let new = soft_threshold(rho, lambda) / col_sq[j];
            let delta = new - w[j];
            if delta != 0.0 {
                r.scaled_add(-delta, &col);
                w[j] = new;
            }
        }
        if lasso_kkt_violation(x, r.view(), w.view(), lambda) <= tol {
            return Ok((w, r));
        }
        if sweep + 1 == LASSO_MAX_SWEEPS {
            log::warn!("lasso did not reach KKT tolerance {tol:e} in {LASSO_MAX_SWEEPS} sweeps");
        }
    }
    Ok((w, r))
}

pub fn lasso_fit(x: ArrayView2<f64>, y: ArrayView1<f64>, lambda: f64, tol: f64) -> Result<LinearModel> {
    check_xy(x, y)?;
    let st = Standardizer::fit(x);
    let xs = st.apply(x);
    let y_mean = y.mean().unwrap_or(0.0);
    let yc = &y - y_mean;
    let (w, _) = lasso_solve(xs.view(), yc.view(), lambda, tol)?;
    let (weights, intercept) = st.unstandardize(&w, y_mean);
    Ok(LinearModel {
        penalty: Penalty::Lasso,
        lambda,
        weights,
        intercept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn linear_data() -> (Array2<f64>, Array1<f64>) {
        let x = array![
            [1.0, 0.5, -2.0],
            [2.0, -1.0, 0.0],
            [0.0, 3.0, 1.0],
            [4.0, 1.0, 2.0],
            [-1.0, 2.0, 5.0],
            [3.0, -2.0, 1.5],
        ];
        let w = array![1.5, -0.5, 2.0];
        let y = x.dot(&w) + 0.7;
        (x, y)
    }

    #[test]
    fn ridge_without_penalty_recovers_weights() {
        let (x, y) = linear_data();
        let m = ridge_fit(x.view(), y.view(), 0.0).unwrap();
        for (got, want) in m.weights.iter().zip([1.5, -0.5, 2.0]) {
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
        assert!((m.intercept - 0.7).abs() < 1e-8);
    }

    #[test]
    fn ridge_zero_lambda_singular_is_reported() {
        let x = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let y = array![1.0, 2.0, 3.5];
        let err = ridge_fit(x.view(), y.view(), 0.0).unwrap_err();
        assert!(err.to_string().contains("λ > 0"), "{err}");
        assert!(ridge_fit(x.view(), y.view(), 0.1).is_ok());
    }

    #[test]
    fn primal_and_dual_agree() {
        let x = array![[1.0, 0.2, -0.3, 2.0], [0.5, -1.0, 0.4, 0.1], [-0.7, 0.3, 1.2, -0.5]];
        let y = array![0.3, -0.2, 1.1];
        let lambda = 0.37;
        let dual = ridge_solve(x.view(), y.view(), lambda).unwrap();
        let mut a = x.t().dot(&x);
        for i in 0..4 {
            a[[i, i]] += lambda;
        }
        let primal = cholesky_solve(&cholesky(&a).unwrap(), &x.t().dot(&y));
        for (d, p) in dual.iter().zip(primal.iter()) {
            assert!((d - p).abs() < 1e-12);
        }
    }

    #[test]
    fn lasso_huge_lambda_gives_mean() {
        let (x, y) = linear_data();
        let m = lasso_fit(x.view(), y.view(), 1e6, 1e-8).unwrap();
        assert!(m.weights.iter().all(|&w| w == 0.0));
        assert!((m.intercept - y.mean().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn lasso_small_lambda_approaches_least_squares() {
        let (x, y) = linear_data();
        let m = lasso_fit(x.view(), y.view(), 1e-9, 1e-12).unwrap();
        for (got, want) in m.weights.iter().zip([1.5, -0.5, 2.0]) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn constant_column_gets_zero_weight() {
        let x = array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0], [4.0, 5.0]];
        let y = array![2.0, 4.0, 6.0, 8.0];
        let m = ridge_fit(x.view(), y.view(), 1e-3).unwrap();
        assert_eq!(m.weights[1], 0.0);
        let m = lasso_fit(x.view(), y.view(), 1e-3, 1e-10).unwrap();
        assert_eq!(m.weights[1], 0.0);
    }
}
