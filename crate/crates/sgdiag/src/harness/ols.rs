//! Ordinary least squares with classical standard errors and two-sided
//! t-tests, via Householder QR. Small dense problems only — the experiment
//! regressions have a handful of columns.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Result, SgdiagError};
use crate::numeric::dot;

#[derive(Debug, Clone, Serialize)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub t_values: Vec<f64>,
    pub p_values: Vec<f64>,
    pub df: u64,
    pub rss: f64,
}

/// Fit y on the given design (rows = observations). Requires more rows than
/// columns and a full-rank design; a numerically rank-deficient column is
/// reported by index.
pub fn ols_fit(design: &[Vec<f64>], y: &[f64]) -> Result<OlsFit> {
    let n = design.len();
    if n == 0 {
        return Err(SgdiagError::Empty("ols needs at least one row".into()));
    }
    if y.len() != n {
        return Err(SgdiagError::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    let k = design[0].len();
    if k == 0 {
        return Err(SgdiagError::Empty("ols needs at least one column".into()));
    }
    for row in design {
        if row.len() != k {
            return Err(SgdiagError::DimensionMismatch {
                expected: k,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(SgdiagError::NonFinite { index: 0 });
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(SgdiagError::NonFinite { index: 0 });
    }
    if n <= k {
        return Err(SgdiagError::InvalidConfig(format!(
            "ols needs more observations ({n}) than columns ({k})"
        )));
    }

    // column-major copy; the factorization overwrites it with R.
    let mut a = vec![0.0; n * k];
    for (i, row) in design.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            a[j * n + i] = v;
        }
    }
    let max_col_norm = (0..k)
        .map(|j| dot(&a[j * n..j * n + n], &a[j * n..j * n + n]).sqrt())
        .fold(0.0f64, f64::max);
    let tol = max_col_norm.max(1.0) * 1e-12 * (n as f64).sqrt();
    let mut qty = y.to_vec();

    for j in 0..k {
        let col = &a[j * n + j..j * n + n];
        let norm = dot(col, col).sqrt();
        if norm <= tol {
            return Err(SgdiagError::RankDeficient { col: j });
        }
        let alpha = if a[j * n + j] >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = col.to_vec();
        v[0] -= alpha;
        let vn2 = dot(&v, &v);
        a[j * n + j] = alpha;
        for i in j + 1..n {
            a[j * n + i] = 0.0;
        }
        if vn2 > 0.0 {
            for jj in j + 1..k {
                let mut d = 0.0;
                for i in j..n {
                    d += v[i - j] * a[jj * n + i];
                }
                let f = 2.0 * d / vn2;
                for i in j..n {
                    a[jj * n + i] -= f * v[i - j];
                }
            }
            let mut d = 0.0;
            for i in j..n {
                d += v[i - j] * qty[i];
            }
            let f = 2.0 * d / vn2;
            for i in j..n {
                qty[i] -= f * v[i - j];
            }
        }
    }

    // back-substitute R beta = (Q^T y)[0..k]; R[i][j] lives at a[j*n + i].
    let mut beta = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = qty[i];
        for j in i + 1..k {
            s -= a[j * n + i] * beta[j];
        }
        beta[i] = s / a[i * n + i];
    }

    let mut rss = 0.0;
    for (row, &yi) in design.iter().zip(y.iter()) {
        let r = yi - dot(row, &beta);
        rss += r * r;
    }
    let df = (n - k) as u64;
    let s2 = rss / df as f64;

    // (X^T X)^{-1} diagonal from R^{-1}: diag_i = sum_j (R^{-1})_{ij}^2.
    let mut rinv = vec![vec![0.0; k]; k];
    for j in 0..k {
        for i in (0..=j).rev() {
            let mut s = if i == j { 1.0 } else { 0.0 };
            for l in i + 1..=j {
                s -= a[l * n + i] * rinv[l][j];
            }
            rinv[i][j] = s / a[i * n + i];
        }
    }

    let mut standard_errors = vec![0.0; k];
    let mut t_values = vec![0.0; k];
    let mut p_values = vec![0.0; k];
    for i in 0..k {
        let c = (i..k).map(|j| rinv[i][j] * rinv[i][j]).sum::<f64>();
        let se = (s2 * c).sqrt();
        standard_errors[i] = se;
        if se == 0.0 {
            // an exact fit: the coefficient is measured without error
            t_values[i] = if beta[i] == 0.0 {
                0.0
            } else {
                f64::INFINITY.copysign(beta[i])
            };
            p_values[i] = if beta[i] == 0.0 { 1.0 } else { 0.0 };
        } else {
            t_values[i] = beta[i] / se;
            p_values[i] = two_sided_t_p_value(t_values[i], df as f64);
        }
    }

    Ok(OlsFit {
        coefficients: beta,
        standard_errors,
        t_values,
        p_values,
        df,
        rss,
    })
}

/// P(|T_df| >= |t|) for a Student t variable with `df` degrees of freedom.
pub fn two_sided_t_p_value(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let dist = StudentsT::new(0.0, 1.0, df).expect("degrees of freedom must be positive");
    (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
}

/// Conventional significance markers: `***` below 0.1%, `**` below 1%,
/// `*` below 5%, `.` below 10%, empty otherwise.
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else if p < 0.1 {
        "."
    } else {
        ""
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_proportional_fit_has_zero_error_and_zero_p() {
        let design: Vec<Vec<f64>> = (1..=10).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (1..=10).map(|i| 2.0 * i as f64).collect();
        let fit = ols_fit(&design, &y).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-12);
        assert!(fit.standard_errors[0] < 1e-12);
        assert!(fit.p_values[0] < 1e-12);
    }

    #[test]
    fn constant_response_exact_fit_hits_the_se_zero_branch() {
        let design: Vec<Vec<f64>> = (0..5).map(|_| vec![1.0]).collect();
        let y = vec![3.0; 5];
        let fit = ols_fit(&design, &y).unwrap();
        assert_eq!(fit.rss, 0.0);
        assert_eq!(fit.standard_errors[0], 0.0);
        assert_eq!(fit.p_values[0], 0.0);
        let zero = ols_fit(&design, &vec![0.0; 5]).unwrap();
        assert_eq!(zero.p_values[0], 1.0, "zero coefficient, zero evidence");
    }

    #[test]
    fn duplicate_columns_are_reported_rank_deficient() {
        let design: Vec<Vec<f64>> = (1..=8).map(|i| vec![i as f64, i as f64]).collect();
        let y: Vec<f64> = (1..=8).map(|i| i as f64).collect();
        match ols_fit(&design, &y) {
            Err(SgdiagError::RankDeficient { col }) => assert_eq!(col, 1),
            other => panic!("expected RankDeficient, got {other:?}"),
        }
    }

    #[test]
    fn more_columns_than_rows_is_rejected() {
        let design = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let y = vec![1.0, 2.0];
        assert!(ols_fit(&design, &y).is_err());
    }

    #[test]
    fn intercept_only_matches_textbook_formulas() {
        let y = vec![2.0, 4.0, 6.0, 8.0];
        let design: Vec<Vec<f64>> = y.iter().map(|_| vec![1.0]).collect();
        let fit = ols_fit(&design, &y).unwrap();
        let mean = 5.0;
        let s2 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        let se = (s2 / 4.0).sqrt();
        assert!((fit.coefficients[0] - mean).abs() < 1e-12);
        assert!((fit.standard_errors[0] - se).abs() < 1e-12);
        assert_eq!(fit.df, 3);
    }

    #[test]
    fn p_value_symmetry_and_bounds() {
        assert!((two_sided_t_p_value(0.0, 10.0) - 1.0).abs() < 1e-12);
        let p = two_sided_t_p_value(1.5, 10.0);
        let q = two_sided_t_p_value(-1.5, 10.0);
        assert!((p - q).abs() < 1e-15);
        assert!(p > 0.0 && p < 1.0);
        assert_eq!(two_sided_t_p_value(f64::INFINITY, 5.0), 0.0);
    }

    #[test]
    fn star_thresholds_follow_the_legend() {
        assert_eq!(significance_stars(0.0005), "***");
        assert_eq!(significance_stars(0.005), "**");
        assert_eq!(significance_stars(0.03), "*");
        assert_eq!(significance_stars(0.07), ".");
        assert_eq!(significance_stars(0.2), "");
        assert_eq!(significance_stars(0.001), "**");
        assert_eq!(significance_stars(0.05), ".");
    }
}
