use crate::error::{Error, Result};

fn check_len(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::Shape(format!("{} targets vs {} predictions", y.len(), y_hat.len())));
    }
    if y.is_empty() {
        return Err(Error::Data("no rows to score".into()));
    }
    Ok(())
}

/// Mean squared residual.
pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_len(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_len(y, y_hat)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Degenerate("R² is undefined for a constant target".into()));
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_mean_predictions() {
        let y = [1.0, 2.0, 4.0, 7.0];
        assert_eq!(r2(&y, &y).unwrap(), 1.0);
        assert_eq!(mse(&y, &y).unwrap(), 0.0);
        let m = [3.5; 4];
        assert_eq!(r2(&y, &m).unwrap(), 0.0);
    }

    #[test]
    fn known_residuals() {
        let y = [0.0, 2.0];
        let y_hat = [1.0, 1.0];
        assert_eq!(mse(&y, &y_hat).unwrap(), 1.0);
        assert_eq!(r2(&y, &y_hat).unwrap(), 0.0);
    }

    #[test]
    fn constant_target_is_an_error() {
        assert!(matches!(r2(&[2.0, 2.0], &[1.0, 3.0]), Err(Error::Degenerate(_))));
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn single_trial_has_zero_sd() {
        assert_eq!(mean_sd(&[0.7]), (0.7, 0.0));
    }
}
