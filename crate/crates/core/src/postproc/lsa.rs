//! Ephraim-Malah log-spectral amplitude gain.

use super::PpError;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Exponential integral E1(v) for v > 0.
///
/// Power series up to v = 1, Lentz continued fraction above.
pub fn expint_e1(v: f64) -> f64 {
    debug_assert!(v > 0.0);
    if v <= 1.0 {
        let mut sum = 0.0;
        let mut term = 1.0;
        for k in 1..200 {
            term *= -v / k as f64;
            let add = term / k as f64;
            sum += add;
            if add.abs() < 1e-17 * sum.abs().max(1e-300) {
                break;
            }
        }
        -EULER_GAMMA - v.ln() - sum
    } else {
        const TINY: f64 = 1e-300;
        let mut b = v + 1.0;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -((i * i) as f64);
            b += 2.0;
            d = 1.0 / (an * d + b);
            c = b + an / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h * (-v).exp()
    }
}

/// Unclamped LSA gain `xi / (1 + xi) * exp(E1(v) / 2)` with
/// `v = gamma * xi / (1 + xi)`.
pub fn mmse_lsa_gain(xi: f64, gamma: f64) -> Result<f64, PpError> {
    if !(xi > 0.0 && xi.is_finite()) || !(gamma > 0.0 && gamma.is_finite()) {
        return Err(PpError::NonPositiveSnr { xi, gamma });
    }
    Ok(lsa_gain_unchecked(xi, gamma))
}

pub(crate) fn lsa_gain_unchecked(xi: f64, gamma: f64) -> f64 {
    let w = xi / (1.0 + xi);
    let v = gamma * w;
    w * (0.5 * expint_e1(v)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// E1(v) = integral over u from ln v to infinity of exp(-e^u), by Simpson's rule.
    pub(crate) fn e1_oracle(v: f64) -> f64 {
        let a = v.ln();
        let b = 60f64.ln().max(a + 1.0);
        let n = 40_000;
        let h = (b - a) / n as f64;
        let f = |u: f64| (-(u.exp())).exp();
        let mut s = f(a) + f(b);
        for i in 1..n {
            let u = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(u);
        }
        s * h / 3.0
    }

    #[test]
    fn e1_reference_points() {
        assert!((expint_e1(0.5) - 0.559_773_594_776_160_8).abs() < 1e-13);
        assert!((expint_e1(1.0) - 0.219_383_934_395_520_3).abs() < 1e-13);
        assert!((expint_e1(2.0) - 0.048_900_510_708_061_12).abs() < 1e-13);
        for v in [1e-5, 0.01, 0.3, 0.99, 1.01, 3.0, 10.0, 30.0] {
            let rel = (expint_e1(v) - e1_oracle(v)).abs() / e1_oracle(v);
            assert!(rel < 1e-9, "v={v}: {rel}");
        }
    }

    #[test]
    fn unit_snr_example() {
        let g = mmse_lsa_gain(1.0, 1.0).unwrap();
        assert!((g - 0.5 * (0.5 * e1_oracle(0.5)).exp()).abs() < 1e-9);
        assert!((g - 0.6615).abs() < 1e-4);
    }

    #[test]
    fn rejects_non_positive() {
        assert!(mmse_lsa_gain(0.0, 1.0).is_err());
        assert!(mmse_lsa_gain(1.0, -1.0).is_err());
        assert!(mmse_lsa_gain(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn high_snr_limit() {
        let g = mmse_lsa_gain(1e6, 1e6).unwrap();
        assert!((g - 1.0).abs() < 1e-3);
    }
}
