use serde::{Deserialize, Serialize};

use super::dataset::Sample;
use super::InputShape;
use crate::error::{Error, Result};

/// Ridge strength used when the normal equations are singular.
pub const RIDGE_FALLBACK: f64 = 1e-6;

/// An ordinary-least-squares fit with intercept, one coefficient column per
/// output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeastSquares {
    /// `coef[k][j]`: weight of feature `j` for output `k`.
    pub coef: Vec<Vec<f64>>,
    pub intercept: Vec<f64>,
    /// In-sample coefficient of determination per output (NaN when the
    /// target has no variance).
    pub r2: Vec<f64>,
    /// True when the ridge fallback was needed.
    pub ridge: bool,
}

impl LeastSquares {
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.coef
            .iter()
            .zip(&self.intercept)
            .map(|(c, b)| b + crate::scalar::dot(c, x))
            .collect()
    }
}

/// In-place Cholesky of a symmetric positive definite row-major matrix.
/// Returns false if a pivot is not positive relative to `tol`.
fn cholesky(a: &mut [f64], d: usize, tol: f64) -> bool {
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= a[j * d + k] * a[j * d + k];
        }
        if !(s > tol) {
            return false;
        }
        let l = s.sqrt();
        a[j * d + j] = l;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = s / l;
        }
    }
    true
}

fn cholesky_solve(l: &[f64], d: usize, b: &mut [f64]) {
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * b[k];
        }
        b[i] = s / l[i * d + i];
    }
    for i in (0..d).rev() {
        let mut s = b[i];
        for k in i + 1..d {
            s -= l[k * d + i] * b[k];
        }
        b[i] = s / l[i * d + i];
    }
}

/// Fits `y ≈ b + W x` by the normal equations on centered data, falling
/// back to ridge `λ = 1e-6` if they are singular.
pub fn least_squares(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<LeastSquares> {
    let n = x.len();
    if n == 0 || n != y.len() {
        return Err(Error::input(format!("{n} feature rows for {} targets", y.len())));
    }
    let d = x[0].len();
    let k = y[0].len();
    if x.iter().any(|r| r.len() != d) || y.iter().any(|r| r.len() != k) {
        return Err(Error::input("ragged least-squares input"));
    }
    let nf = n as f64;
    let mut xm = vec![0.0; d];
    let mut ym = vec![0.0; k];
    for (xr, yr) in x.iter().zip(y) {
        crate::scalar::axpy(1.0 / nf, xr, &mut xm);
        crate::scalar::axpy(1.0 / nf, yr, &mut ym);
    }

    // upper triangle of XcᵀXc, then mirrored
    let mut gram = vec![0.0; d * d];
    let mut xty = vec![0.0; d * k];
    let mut xc = vec![0.0; d];
    for (xr, yr) in x.iter().zip(y) {
        for j in 0..d {
            xc[j] = xr[j] - xm[j];
        }
        for i in 0..d {
            let xi = xc[i];
            if xi == 0.0 {
                continue;
            }
            crate::scalar::axpy(xi, &xc[i..], &mut gram[i * d + i..(i + 1) * d]);
        }
        for (o, (&yv, &mean)) in yr.iter().zip(&ym).enumerate() {
            let yc = yv - mean;
            for j in 0..d {
                xty[o * d + j] += xc[j] * yc;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram[i * d + j] = gram[j * d + i];
        }
    }
    if gram.iter().chain(&xty).any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite least-squares input"));
    }

    let max_diag = (0..d).map(|i| gram[i * d + i]).fold(0.0, f64::max);
    let tol = 1e-12 * max_diag.max(1e-300);
    let mut factor = gram.clone();
    let mut ridge = false;
    if !cholesky(&mut factor, d, tol) {
        ridge = true;
        factor.copy_from_slice(&gram);
        for i in 0..d {
            factor[i * d + i] += RIDGE_FALLBACK;
        }
        if !cholesky(&mut factor, d, 0.0) {
            return Err(Error::numeric(
                "ridge-regularized normal equations are not positive definite",
            ));
        }
    }

    let mut coef = Vec::with_capacity(k);
    let mut intercept = Vec::with_capacity(k);
    for o in 0..k {
        let mut b = xty[o * d..(o + 1) * d].to_vec();
        cholesky_solve(&factor, d, &mut b);
        intercept.push(ym[o] - crate::scalar::dot(&b, &xm));
        coef.push(b);
    }
    let mut fit = LeastSquares {
        coef,
        intercept,
        r2: Vec::new(),
        ridge,
    };
    fit.r2 = r_squared(&fit, x, y);
    Ok(fit)
}

/// Coefficient of determination of `fit` on `(x, y)`, per output.
pub fn r_squared(fit: &LeastSquares, x: &[Vec<f64>], y: &[Vec<f64>]) -> Vec<f64> {
    let k = fit.intercept.len();
    let n = x.len() as f64;
    let mut mean = vec![0.0; k];
    for yr in y {
        crate::scalar::axpy(1.0 / n, yr, &mut mean);
    }
    let mut ss_res = vec![0.0; k];
    let mut ss_tot = vec![0.0; k];
    for (xr, yr) in x.iter().zip(y) {
        let p = fit.predict(xr);
        for o in 0..k {
            ss_res[o] += (yr[o] - p[o]).powi(2);
            ss_tot[o] += (yr[o] - mean[o]).powi(2);
        }
    }
    ss_res
        .iter()
        .zip(&ss_tot)
        .map(|(&r, &t)| if t > 1e-12 * n { 1.0 - r / t } else { f64::NAN })
        .collect()
}

/// Linear regression from the flattened model inputs to the five tail
/// percentiles, the reference point for the predictor's RMSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBaseline {
    pub shape: InputShape,
    pub fit: LeastSquares,
}

impl LinearBaseline {
    pub fn train(samples: &[Sample], shape: InputShape) -> Result<Self> {
        let x: Vec<Vec<f64>> = samples.iter().map(Sample::flatten).collect();
        let y: Vec<Vec<f64>> = samples.iter().map(|s| s.percentiles.to_vec()).collect();
        if x.iter().any(|r| r.len() != shape.flat_len()) {
            return Err(Error::config("sample tensors disagree with the baseline shape"));
        }
        Ok(LinearBaseline {
            shape,
            fit: least_squares(&x, &y)?,
        })
    }

    pub fn predict(&self, sample: &Sample) -> Vec<f64> {
        self.fit.predict(&sample.flatten())
    }

    /// RMSE in ms over all five percentiles.
    pub fn rmse(&self, samples: &[Sample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let mut sq = 0.0;
        let mut count = 0usize;
        for s in samples {
            for (p, t) in self.predict(s).iter().zip(&s.percentiles) {
                sq += (p - t) * (p - t);
                count += 1;
            }
        }
        (sq / count as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_planted_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = [2.0, -1.0, 0.5];
        let x: Vec<Vec<f64>> = (0..200).map(|_| (0..3).map(|_| rng.random()).collect()).collect();
        let y: Vec<Vec<f64>> = x
            .iter()
            .map(|r| vec![3.0 + crate::scalar::dot(&w, r), -crate::scalar::dot(&w, r)])
            .collect();
        let fit = least_squares(&x, &y).unwrap();
        assert!(!fit.ridge);
        for (j, wj) in w.iter().enumerate() {
            assert!((fit.coef[0][j] - wj).abs() < 1e-9);
            assert!((fit.coef[1][j] + wj).abs() < 1e-9);
        }
        assert!((fit.intercept[0] - 3.0).abs() < 1e-9);
        assert!((fit.r2[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn collinear_columns_fall_back_to_ridge() {
        let x: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, 2.0 * i as f64, 1.0]).collect();
        let y: Vec<Vec<f64>> = (0..50).map(|i| vec![3.0 * i as f64]).collect();
        let fit = least_squares(&x, &y).unwrap();
        assert!(fit.ridge);
        assert!((fit.predict(&[10.0, 20.0, 1.0])[0] - 30.0).abs() < 1e-3);
    }

    #[test]
    fn constant_target_has_undefined_r2() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64).sin()]).collect();
        let y = vec![vec![4.0]; 20];
        let fit = least_squares(&x, &y).unwrap();
        assert!(fit.coef[0][0].abs() < 1e-9);
        assert!(fit.r2[0].is_nan());
    }
}
