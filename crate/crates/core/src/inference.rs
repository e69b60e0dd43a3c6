//! Cross-fitted confidence intervals with a conservative variance floor.
//!
//! Fold estimates `psi_1..psi_B` from disjoint evaluation folds are treated
//! as approximately i.i.d. normal. The interval is
//!
//! ```text
//! psi_bar ± t_{B-1, alpha/2} * sqrt(s^2 / B + c^2 / n)
//! ```
//!
//! with `s^2` the unbiased across-fold variance. The `c^2/n` term keeps the
//! interval from collapsing at rate `1/n` near the null of a quadratic
//! functional, where the usual influence-function standard error degenerates;
//! the price is conservatism near zero. The default scale constant is the
//! squared sample variance of `Y` (see [`default_c`]), overridable wherever
//! intervals are produced.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// A pooled estimate with its conservative t interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateResult {
    pub parameter_id: String,
    #[serde(with = "nullable_floats")]
    pub fold_estimates: Vec<f64>,
    pub psi_bar: f64,
    /// Unbiased across-fold variance (denominator `B - 1`).
    pub s2: f64,
    /// Conservative inflation constant.
    pub c: f64,
    pub se: f64,
    #[serde(with = "nullable_float")]
    pub ci_low: f64,
    #[serde(with = "nullable_float")]
    pub ci_high: f64,
    pub alpha: f64,
    pub fold_count: usize,
    pub n: usize,
    /// Set when any fold was singular or non-finite; the interval is then
    /// the whole real line.
    pub infinite_flag: bool,
}

/// Build the t-Cross interval from per-fold estimates.
///
/// Any non-finite fold estimate yields an `infinite_flag` result with an
/// unbounded interval: a singular design is an impossible inferential task,
/// not a crash.
pub fn t_cross(
    parameter_id: &str,
    fold_estimates: &[f64],
    c: f64,
    n: usize,
    alpha: f64,
) -> Result<EstimateResult> {
    let b = fold_estimates.len();
    if b < 2 {
        return Err(Error::InvalidConfig(format!(
            "t_cross needs at least 2 folds, got {b}"
        )));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha must be in (0,1), got {alpha}")));
    }
    if c < 0.0 {
        return Err(Error::InvalidConfig(format!("c must be nonnegative, got {c}")));
    }
    if fold_estimates.iter().any(|v| !v.is_finite()) {
        return Ok(EstimateResult {
            parameter_id: parameter_id.to_string(),
            fold_estimates: fold_estimates.to_vec(),
            psi_bar: f64::NAN,
            s2: f64::NAN,
            c,
            se: f64::INFINITY,
            ci_low: f64::NEG_INFINITY,
            ci_high: f64::INFINITY,
            alpha,
            fold_count: b,
            n,
            infinite_flag: true,
        });
    }
    let bf = b as f64;
    let psi_bar = fold_estimates.iter().sum::<f64>() / bf;
    let s2 = fold_estimates.iter().map(|v| (v - psi_bar).powi(2)).sum::<f64>() / (bf - 1.0);
    let se = (s2 / bf + c * c / n as f64).sqrt();
    let t = student_t_critical(b - 1, alpha);
    Ok(EstimateResult {
        parameter_id: parameter_id.to_string(),
        fold_estimates: fold_estimates.to_vec(),
        psi_bar,
        s2,
        c,
        se,
        ci_low: psi_bar - t * se,
        ci_high: psi_bar + t * se,
        alpha,
        fold_count: b,
        n,
        infinite_flag: false,
    })
}

/// The default inflation constant: the squared sample variance of `Y`,
/// computed from the full sample (the variance is a marginal functional, so
/// full-sample estimation minimizes noise in the floor term).
pub fn default_c(data: &Dataset) -> Result<f64> {
    if data.n() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: data.n() });
    }
    let mean = data.y.mean();
    let var = data.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / data.n() as f64;
    Ok(var * var)
}

/// Two-sided Student-t critical value `t_{df, alpha/2}`:
/// `P(|T_df| > t) = alpha`.
pub fn student_t_critical(df: usize, alpha: f64) -> f64 {
    let nu = df as f64;
    // P(|T| > t) = I_x(nu/2, 1/2) with x = nu / (nu + t^2).
    let x = special::inverse_reg_inc_beta(alpha, nu / 2.0, 0.5);
    (nu * (1.0 - x) / x).sqrt()
}

/// Regularized incomplete beta and its inverse, implemented in-repo so the
/// critical values carry no table or external dependency.
pub mod special {
    /// ln Γ(x) by the Lanczos approximation.
    pub fn ln_gamma(x: f64) -> f64 {
        const COEF: [f64; 6] = [
            76.18009172947146,
            -86.50532032941677,
            24.01409824083091,
            -1.231739572450155,
            0.1208650973866179e-2,
            -0.5395239384953e-5,
        ];
        let mut y = x;
        let tmp = x + 5.5;
        let tmp = tmp - (x + 0.5) * tmp.ln();
        let mut ser = 1.000000000190015;
        for c in COEF {
            y += 1.0;
            ser += c / y;
        }
        -tmp + (2.5066282746310005 * ser / x).ln()
    }

    fn betacf(x: f64, a: f64, b: f64) -> f64 {
        const MAX_ITER: usize = 300;
        const EPS: f64 = 3e-16;
        const FPMIN: f64 = 1e-300;
        let qab = a + b;
        let qap = a + 1.0;
        let qam = a - 1.0;
        let mut c = 1.0;
        let mut d = 1.0 - qab * x / qap;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        d = 1.0 / d;
        let mut h = d;
        for m in 1..=MAX_ITER {
            let m = m as f64;
            let m2 = 2.0 * m;
            let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
            d = 1.0 + aa * d;
            if d.abs() < FPMIN {
                d = FPMIN;
            }
            c = 1.0 + aa / c;
            if c.abs() < FPMIN {
                c = FPMIN;
            }
            d = 1.0 / d;
            h *= d * c;
            let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
            d = 1.0 + aa * d;
            if d.abs() < FPMIN {
                d = FPMIN;
            }
            c = 1.0 + aa / c;
            if c.abs() < FPMIN {
                c = FPMIN;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < EPS {
                break;
            }
        }
        h
    }

    /// Regularized incomplete beta function `I_x(a, b)`.
    pub fn reg_inc_beta(x: f64, a: f64, b: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let ln_front =
            ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
        let front = ln_front.exp();
        if x < (a + 1.0) / (a + b + 2.0) {
            front * betacf(x, a, b) / a
        } else {
            1.0 - front * betacf(1.0 - x, b, a) / b
        }
    }

    /// Inverse of `I_x(a, b)` in `x`, by bisection.
    pub fn inverse_reg_inc_beta(p: f64, a: f64, b: f64) -> f64 {
        assert!((0.0..=1.0).contains(&p), "probability out of range");
        let mut lo = 0.0f64;
        let mut hi = 1.0f64;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if reg_inc_beta(mid, a, b) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Serialize possibly non-finite floats as JSON null.
mod nullable_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

mod nullable_floats {
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            if x.is_finite() {
                seq.serialize_element(&Some(*x))?;
            } else {
                seq.serialize_element(&Option::<f64>::None)?;
            }
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(d)?
            .into_iter()
            .map(|x| x.unwrap_or(f64::NAN))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identical_folds_zero_c_degenerate_interval() {
        let r = t_cross("psi_2", &[3.0, 3.0, 3.0, 3.0, 3.0], 0.0, 100, 0.05).unwrap();
        assert_abs_diff_eq!(r.ci_low, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.ci_high, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn identical_folds_positive_c_floor_width() {
        let n = 400;
        let c = 2.0;
        let r = t_cross("psi_2", &[1.0; 5], c, n, 0.05).unwrap();
        let t = student_t_critical(4, 0.05);
        let want = t * c / (n as f64).sqrt();
        assert_abs_diff_eq!(r.ci_high - r.psi_bar, want, epsilon = 1e-12);
        assert_abs_diff_eq!(r.psi_bar - r.ci_low, want, epsilon = 1e-12);
    }

    #[test]
    fn se_identity_holds() {
        let r = t_cross("p", &[1.0, 2.0, 0.5, 1.5, 3.0], 1.3, 777, 0.1).unwrap();
        assert_abs_diff_eq!(
            r.se * r.se,
            r.s2 / 5.0 + r.c * r.c / 777.0,
            epsilon = 1e-12
        );
        assert!(r.se >= r.c / (777f64).sqrt());
        assert!(r.ci_low <= r.psi_bar && r.psi_bar <= r.ci_high);
    }

    #[test]
    fn t4_critical_value() {
        assert!((student_t_critical(4, 0.05) - 2.776).abs() < 1e-3);
    }

    #[test]
    fn non_finite_fold_gives_infinite_interval() {
        let r = t_cross("p", &[1.0, f64::NAN, 2.0, 1.0, 1.0], 1.0, 10, 0.05).unwrap();
        assert!(r.infinite_flag);
        assert_eq!(r.ci_low, f64::NEG_INFINITY);
        assert_eq!(r.ci_high, f64::INFINITY);
    }

    #[test]
    fn default_c_is_squared_variance() {
        use nalgebra::{DMatrix, DVector};
        let d = Dataset::new(
            DMatrix::from_element(4, 1, 0.0),
            DMatrix::zeros(4, 0),
            DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0]),
            vec!["x".into()],
            vec![],
            "y".into(),
        )
        .unwrap();
        assert_abs_diff_eq!(default_c(&d).unwrap(), 0.0);

        // sample variance 2 (denominator n): values -2, 0, 2, 0 -> var 2
        let d = Dataset::new(
            DMatrix::from_element(4, 1, 0.0),
            DMatrix::zeros(4, 0),
            DVector::from_vec(vec![-2.0, 0.0, 2.0, 0.0]),
            vec!["x".into()],
            vec![],
            "y".into(),
        )
        .unwrap();
        assert_abs_diff_eq!(default_c(&d).unwrap(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn default_c_monte_carlo() {
        use nalgebra::{DMatrix, DVector};
        use rand_distr::{Distribution, Normal};
        let mut r = crate::rng::stream(23, "test-default-c", 0);
        let normal = Normal::new(0.0, 3.0).unwrap();
        let n = 1_000_000;
        let y = DVector::from_iterator(n, (0..n).map(|_| normal.sample(&mut r)));
        let d = Dataset::new(
            DMatrix::from_element(n, 1, 0.0),
            DMatrix::zeros(n, 0),
            y,
            vec!["x".into()],
            vec![],
            "y".into(),
        )
        .unwrap();
        let c = default_c(&d).unwrap();
        assert!((c - 81.0).abs() / 81.0 < 0.02, "c = {c}");
    }

    /// Student-t tail probability by adaptive Simpson integration of the
    /// density; an independent oracle for the quantile routine.
    fn t_tail_by_quadrature(t: f64, df: usize) -> f64 {
        let nu = df as f64;
        let log_norm = special::ln_gamma((nu + 1.0) / 2.0)
            - special::ln_gamma(nu / 2.0)
            - 0.5 * (nu * std::f64::consts::PI).ln();
        let dens = |x: f64| (log_norm - 0.5 * (nu + 1.0) * (1.0 + x * x / nu).ln()).exp();
        // integrate density from 0 to t with Simpson panels, tail = 0.5 - that
        let panels = 40_000;
        let hstep = t / panels as f64;
        let mut acc = dens(0.0) + dens(t);
        for i in 1..panels {
            let x = i as f64 * hstep;
            acc += dens(x) * if i % 2 == 0 { 2.0 } else { 4.0 };
        }
        0.5 - acc * hstep / 3.0
    }

    #[test]
    fn t_quantiles_match_quadrature_oracle() {
        for df in 2..=20 {
            for alpha in [0.01, 0.05, 0.10] {
                let t = student_t_critical(df, alpha);
                let tail = t_tail_by_quadrature(t, df);
                assert!(
                    (tail - alpha / 2.0).abs() < 1e-6,
                    "df={df} alpha={alpha}: tail {tail}"
                );
            }
        }
    }

    #[test]
    fn width_monotone_in_c_and_s2() {
        let folds = [1.0, 1.2, 0.8, 1.1, 0.9];
        let w = |c: f64| {
            let r = t_cross("p", &folds, c, 100, 0.05).unwrap();
            r.ci_high - r.ci_low
        };
        assert!(w(0.0) < w(1.0) && w(1.0) < w(5.0));

        let spread = [0.0, 4.0, -2.0, 3.0, 1.0];
        let tight = t_cross("p", &folds, 1.0, 100, 0.05).unwrap();
        let wide = t_cross("p", &spread, 1.0, 100, 0.05).unwrap();
        assert!(wide.ci_high - wide.ci_low > tight.ci_high - tight.ci_low);
    }
}
