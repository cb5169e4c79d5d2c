//! Trend test used on latency series.

use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlopeTest {
    /// Least-squares slope of `y` against its index.
    pub slope: f64,
    pub t: f64,
    /// One-sided p-value for a positive slope.
    pub p_increasing: f64,
}

/// OLS fit of `y[i]` on `i` with a one-sided t-test of `slope > 0`.
pub fn slope_test(y: &[f64]) -> Option<SlopeTest> {
    let n = y.len();
    if n < 3 {
        return None;
    }
    let nf = n as f64;
    let xm = (nf - 1.0) / 2.0;
    let ym = y.iter().sum::<f64>() / nf;
    let sxx: f64 = (0..n).map(|i| (i as f64 - xm).powi(2)).sum();
    let sxy: f64 = y.iter().enumerate().map(|(i, v)| (i as f64 - xm) * (v - ym)).sum();
    let slope = sxy / sxx;
    let sse: f64 = y.iter().enumerate().map(|(i, v)| (v - ym - slope * (i as f64 - xm)).powi(2)).sum();
    let se = (sse / (nf - 2.0) / sxx).sqrt();
    if se == 0.0 {
        let p = if slope > 0.0 { 0.0 } else { 1.0 };
        return Some(SlopeTest { slope, t: f64::INFINITY.copysign(slope), p_increasing: p });
    }
    let t = slope / se;
    let dist = StudentsT::new(0.0, 1.0, nf - 2.0).ok()?;
    Some(SlopeTest { slope, t, p_increasing: 1.0 - dist.cdf(t) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_noise_is_not_increasing() {
        let y: Vec<f64> = (0..200).map(|i| ((i * 37 % 11) as f64 - 5.0) * 1e-3).collect();
        let s = slope_test(&y).unwrap();
        assert!(s.p_increasing > 0.05, "{s:?}");
    }

    #[test]
    fn linear_growth_is_detected() {
        let y: Vec<f64> = (0..200).map(|i| i as f64 + ((i * 37 % 11) as f64 - 5.0)).collect();
        let s = slope_test(&y).unwrap();
        assert!((s.slope - 1.0).abs() < 0.05);
        assert!(s.p_increasing < 1e-6);
    }

    #[test]
    fn slope_matches_closed_form_on_exact_line() {
        let y: Vec<f64> = (0..10).map(|i| 3.0 - 0.5 * i as f64).collect();
        let s = slope_test(&y).unwrap();
        assert!((s.slope + 0.5).abs() < 1e-12);
        assert_eq!(s.p_increasing, 1.0);
    }
}
