//! Closed-form calculators: the PAC-Bayes bound under Gaussian attention
//! noise, and the variance decomposition of perturbed gradients.
//!
//! The KL term follows the per-logit approximation against a point-mass
//! prior, `H n^2 (-ln sigma + C0)` with `C0 = -ln(2 pi e) / 2`. It is
//! negative for large `sigma` and is passed through unclamped; the bound
//! reports a [`Error::Domain`] when the radicand goes negative.
//!
//! The variance identity is `Var[a + b] = Var[a] + 2 Cov(a, b) + Var[b]`
//! with `a = g_base`, `b = g_ad - g_base`, using the trace of the sample
//! covariance (sum of per-coordinate `n - 1` variances) as the scalar
//! variance of a gradient vector. Perturbation reduces variance exactly
//! when `Cov(g_base, dg) < -Var[dg] / 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `-ln(2 pi e) / 2`.
pub fn c0() -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryInputs {
    pub heads: usize,
    pub seq_len: usize,
    /// Training-set size.
    pub samples: usize,
    pub delta: f64,
    pub sigma: f64,
    pub empirical_risk: f64,
}

impl TheoryInputs {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Parameter(m));
        if self.heads == 0 || self.seq_len == 0 {
            return err(format!("heads and seq_len must be >= 1, got {} and {}", self.heads, self.seq_len));
        }
        if self.samples < 2 {
            return err(format!("sample count must be >= 2, got {}", self.samples));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return err(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return err(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.empirical_risk) {
            return err(format!("empirical risk must lie in [0, 1], got {}", self.empirical_risk));
        }
        Ok(())
    }
}

/// `H n^2 (-ln sigma + C0)`.
pub fn kl_gaussian_attention(heads: usize, seq_len: usize, sigma: f64) -> Result<f64> {
    if heads == 0 || seq_len == 0 {
        return Err(Error::Parameter("heads and seq_len must be >= 1".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    let n = seq_len as f64;
    Ok(heads as f64 * n * n * (-sigma.ln() + c0()))
}

/// `kl + ln(2 sqrt(N) / delta)`, the numerator under the square root.
pub fn bound_radicand(samples: usize, delta: f64, kl: f64) -> f64 {
    kl + (2.0 * (samples as f64).sqrt() / delta).ln()
}

/// `R + sqrt((kl + ln(2 sqrt(N) / delta)) / (2N - 1))`.
pub fn pac_bayes_bound(inputs: &TheoryInputs, kl: f64) -> Result<f64> {
    inputs.validate()?;
    let radicand = bound_radicand(inputs.samples, inputs.delta, kl);
    if radicand.is_nan() || radicand < 0.0 {
        return Err(Error::Domain {
            what: "pac-bayes bound",
            radicand,
        });
    }
    let denom = 2.0 * inputs.samples as f64 - 1.0;
    Ok(inputs.empirical_risk + (radicand / denom).sqrt())
}

/// Bound with the Gaussian-attention KL substituted in.
pub fn instantiated_bound(inputs: &TheoryInputs) -> Result<(f64, f64)> {
    inputs.validate()?;
    let kl = kl_gaussian_attention(inputs.heads, inputs.seq_len, inputs.sigma)?;
    Ok((kl, pac_bayes_bound(inputs, kl)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub samples: usize,
    pub var_base: f64,
    pub var_ad: f64,
    pub var_delta: f64,
    pub cov: f64,
    /// `var_ad - (var_base + 2 cov + var_delta)`.
    pub identity_residual: f64,
    /// `cov < -var_delta / 2`.
    pub condition_holds: bool,
}

impl VarianceReport {
    /// Residual scaled by the largest variance in the report.
    pub fn relative_residual(&self) -> f64 {
        let scale = self.var_ad.max(self.var_base).max(self.var_delta).max(f64::MIN_POSITIVE);
        self.identity_residual.abs() / scale
    }

    /// `1 - var_ad / var_base`; positive when perturbation lowered variance.
    pub fn reduction(&self) -> f64 {
        if self.var_base > 0.0 {
            1.0 - self.var_ad / self.var_base
        } else {
            0.0
        }
    }
}

/// Running mean and co-moments of one coordinate (Welford updates).
#[derive(Default, Clone, Copy)]
struct Moments {
    mean_base: f64,
    mean_delta: f64,
    mean_ad: f64,
    m2_base: f64,
    m2_delta: f64,
    m2_ad: f64,
    c_base_delta: f64,
}

/// Decomposes the variance of paired gradient samples `(g_base, g_ad)`.
pub fn variance_decomposition(g_base: &[Vec<f64>], g_ad: &[Vec<f64>]) -> Result<VarianceReport> {
    if g_base.len() != g_ad.len() {
        return Err(Error::shape("variance_decomposition", &[g_base.len()], &[g_ad.len()]));
    }
    let n = g_base.len();
    if n < 2 {
        return Err(Error::Parameter(format!("variance needs >= 2 paired samples, got {n}")));
    }
    let dim = g_base[0].len();
    if let Some(bad) = g_base.iter().chain(g_ad).find(|v| v.len() != dim) {
        return Err(Error::shape("variance_decomposition", &[dim], &[bad.len()]));
    }

    let mut acc = vec![Moments::default(); dim];
    for (count, (base, ad)) in g_base.iter().zip(g_ad).enumerate() {
        let c = (count + 1) as f64;
        for ((m, &b), &a) in acc.iter_mut().zip(base).zip(ad) {
            let d = a - b;
            let db = b - m.mean_base;
            let dd = d - m.mean_delta;
            let da = a - m.mean_ad;
            m.mean_base += db / c;
            m.mean_delta += dd / c;
            m.mean_ad += da / c;
            m.m2_base += db * (b - m.mean_base);
            m.m2_delta += dd * (d - m.mean_delta);
            m.m2_ad += da * (a - m.mean_ad);
            m.c_base_delta += db * (d - m.mean_delta);
        }
    }

    let denom = (n - 1) as f64;
    let var_base = acc.iter().map(|m| m.m2_base).sum::<f64>() / denom;
    let var_delta = acc.iter().map(|m| m.m2_delta).sum::<f64>() / denom;
    let var_ad = acc.iter().map(|m| m.m2_ad).sum::<f64>() / denom;
    let cov = acc.iter().map(|m| m.c_base_delta).sum::<f64>() / denom;
    Ok(VarianceReport {
        samples: n,
        var_base,
        var_ad,
        var_delta,
        cov,
        identity_residual: var_ad - (var_base + 2.0 * cov + var_delta),
        condition_holds: cov < -0.5 * var_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs(samples: usize, delta: f64, risk: f64) -> TheoryInputs {
        TheoryInputs {
            heads: 1,
            seq_len: 1,
            samples,
            delta,
            sigma: 1.0,
            empirical_risk: risk,
        }
    }

    #[test]
    fn c0_value() {
        assert!((c0() - -1.4189385332046727418).abs() < 1e-15);
        assert!((kl_gaussian_attention(1, 1, 1.0).unwrap() - c0()).abs() < 1e-15);
    }

    #[test]
    fn kl_frozen_value_and_scaling() {
        let v = kl_gaussian_attention(8, 16, 0.3).unwrap();
        assert!((v - -440.24981274365286227).abs() / 440.0 < 1e-13);
        let one = kl_gaussian_attention(1, 4, 0.2).unwrap();
        let two = kl_gaussian_attention(1, 8, 0.2).unwrap();
        assert!((two - 4.0 * one).abs() < 1e-12);
        assert!(kl_gaussian_attention(1, 1, 0.0).is_err());
        assert!(kl_gaussian_attention(1, 1, -1.0).is_err());
    }

    #[test]
    fn zero_kl_reduction() {
        let inp = inputs(500, 0.1, 0.0);
        let expected = ((2.0 * 500f64.sqrt() / 0.1).ln() / 999.0).sqrt();
        assert!((pac_bayes_bound(&inp, 0.0).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn frozen_bound() {
        let v = pac_bayes_bound(&inputs(1000, 0.05, 0.1), 50.0).unwrap();
        assert!((v - 0.26907297649977582769).abs() < 1e-13);
    }

    #[test]
    fn bound_tends_to_risk() {
        let v = pac_bayes_bound(&inputs(usize::MAX / 4, 0.05, 0.3), 10.0).unwrap();
        assert!((v - 0.3).abs() < 1e-7);
    }

    #[test]
    fn negative_radicand_is_a_domain_error() {
        match pac_bayes_bound(&inputs(1000, 0.05, 0.0), -100.0) {
            Err(Error::Domain { radicand, .. }) => assert!(radicand < 0.0),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(inputs(1, 0.05, 0.0).validate().is_err());
        assert!(inputs(10, 1.0, 0.0).validate().is_err());
        assert!(inputs(10, 0.5, 1.5).validate().is_err());
    }

    #[test]
    fn no_perturbation_case() {
        let base = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.0]];
        let r = variance_decomposition(&base, &base).unwrap();
        assert_eq!(r.var_ad, r.var_base);
        assert_eq!(r.cov, 0.0);
        assert_eq!(r.var_delta, 0.0);
        assert!(!r.condition_holds);
    }

    #[test]
    fn full_cancellation() {
        let base = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.0]];
        let zeros = vec![vec![0.0; 2]; 3];
        let r = variance_decomposition(&base, &zeros).unwrap();
        assert_eq!(r.var_ad, 0.0);
        assert!(r.identity_residual.abs() < 1e-12 * r.var_base);
        assert!(r.condition_holds);
    }

    #[test]
    fn errors() {
        assert!(variance_decomposition(&[vec![1.0]], &[vec![1.0]]).is_err());
        assert!(variance_decomposition(&[vec![1.0], vec![2.0]], &[vec![1.0], vec![2.0, 3.0]]).is_err());
        assert!(variance_decomposition(&[vec![1.0], vec![2.0]], &[vec![1.0]]).is_err());
    }
}
