//! Summary statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample mean with its standard error `sd / √n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        let n = xs.len();
        if n < 2 {
            return Err(Error::invalid(format!(
                "mean and standard error need at least 2 samples, got {n}"
            )));
        }
        let mean = crate::linalg::pairwise_sum_scalars(xs) / n as f64;
        let ss: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
        let var = crate::linalg::pairwise_sum_scalars(&ss) / (n - 1) as f64;
        Ok(Self {
            mean,
            se: (var / n as f64).sqrt(),
            n,
        })
    }

    /// `|mean - target| <= k · se`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            mean: self.mean * c,
            se: self.se * c.abs(),
            n: self.n,
        }
    }
}

impl std::fmt::Display for MeanSe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.6e} ± {:.2e}", self.mean, self.se)
    }
}

/// Pearson correlation coefficient.
pub fn pearson_corr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::mismatch("pearson_corr", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::invalid("pearson_corr needs at least 2 points"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // Relative threshold so that constant vectors with rounding noise count
    // as degenerate.
    let scale_a = a.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let scale_b = b.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if saa <= (1e-14 * scale_a).powi(2) * n || saa == 0.0 {
        return Err(Error::ZeroVariance("first argument"));
    }
    if sbb <= (1e-14 * scale_b).powi(2) * n || sbb == 0.0 {
        return Err(Error::ZeroVariance("second argument"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Ordinary least-squares line `y ≈ intercept + slope · x`.
#[derive(Clone, Copy, Debug)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() {
        return Err(Error::mismatch("fit_line", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::invalid("fit_line needs at least 2 points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("fit_line abscissa"));
    }
    let slope = sxy / sxx;
    Ok(LineFit {
        slope,
        intercept: my - slope * mx,
    })
}

/// Slope of `y` against `x` through the origin, `Σxy / Σx²`.
pub fn slope_through_origin(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::mismatch("slope_through_origin", x.len(), y.len()));
    }
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("slope abscissa"));
    }
    Ok(x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn self_and_negated_correlation() {
        let x = [1.0, 4.0, 2.0, 8.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_relative_eq!(pearson_corr(&x, &x).unwrap(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(pearson_corr(&x, &neg).unwrap(), -1.0, epsilon = 1e-15);
    }

    #[test]
    fn correlation_matches_hand_formula() {
        // means 2 and 7/3; deviations (-1,0,1) and (-4/3,-1/3,5/3):
        // Σdxdy = 3, Σdx² = 2, Σdy² = 42/9.
        let expected = 3.0 / (2.0_f64.sqrt() * (42.0_f64 / 9.0).sqrt());
        let r = pearson_corr(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert_relative_eq!(r, expected, epsilon = 1e-14);
        assert_relative_eq!(r, 0.981_980_506_061_965_7, epsilon = 1e-14);
    }

    #[test]
    fn zero_variance_is_error() {
        assert!(matches!(
            pearson_corr(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::ZeroVariance(_))
        ));
    }

    #[test]
    fn mean_se_of_known_sample() {
        let m = MeanSe::from_samples(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_relative_eq!(m.mean, 2.5);
        // sample sd = sqrt(5/3)
        assert_relative_eq!(m.se, (5.0_f64 / 3.0).sqrt() / 2.0, epsilon = 1e-15);
        assert!(m.se >= 0.0);
    }

    #[test]
    fn line_fit_recovers_slope() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let fit = fit_line(&x, &y).unwrap();
        assert_relative_eq!(fit.slope, -0.5, epsilon = 1e-14);
        assert_relative_eq!(fit.intercept, 2.0, epsilon = 1e-14);
    }
}
