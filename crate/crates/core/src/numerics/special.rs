//! Log-gamma and digamma for positive real arguments.
//!
//! `lgamma` uses the Lanczos approximation with g = 7 and nine
//! coefficients, with the reflection formula below 0.5. `digamma` shifts
//! the argument up to at least 6 with the recurrence
//! psi(z) = psi(z + 1) - 1/z and then applies the asymptotic series.

use crate::error::{Error, Result};
use std::f64::consts::PI;

const LANCZOS_G: f64 = 7.0;

#[allow(clippy::excessive_precision, clippy::unreadable_literal)]
const LANCZOS_COEFFS: [f64; 9] = [
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
];

/// ln(sqrt(2 pi))
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

fn check_domain(z: f64, name: &str) -> Result<()> {
    if !z.is_finite() || z <= 0.0 {
        return Err(Error::Domain(format!("{name} requires a finite positive argument, got {z}")));
    }
    Ok(())
}

/// Natural logarithm of the gamma function for `z > 0`.
pub fn lgamma(z: f64) -> Result<f64> {
    check_domain(z, "lgamma")?;
    Ok(lgamma_unchecked(z))
}

/// Digamma (derivative of `lgamma`) for `z > 0`.
pub fn digamma(z: f64) -> Result<f64> {
    check_domain(z, "digamma")?;
    Ok(digamma_unchecked(z))
}

/// `lgamma` without the domain check. Callers guarantee `z > 0`.
pub(crate) fn lgamma_unchecked(z: f64) -> f64 {
    // Exact values at the two integer anchors so Γ(1) = Γ(2) = 1 hold bit-exactly.
    if z == 1.0 || z == 2.0 {
        return 0.0;
    }
    if z < 0.5 {
        // Γ(z)Γ(1-z) = π / sin(πz); sin(πz) > 0 on (0, 0.5).
        return (PI / (PI * z).sin()).ln() - lgamma_unchecked(1.0 - z);
    }
    let x = z - 1.0;
    let mut series = LANCZOS_COEFFS[0];
    for (i, c) in LANCZOS_COEFFS.iter().enumerate().skip(1) {
        series += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    LN_SQRT_2PI + (x + 0.5) * t.ln() - t + series.ln()
}

pub(crate) fn digamma_unchecked(z: f64) -> f64 {
    let mut x = z;
    let mut acc = 0.0;
    while x < 6.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli-number series: 1/12, 1/120, 1/252, 1/240, 1/132, 691/32760, 1/12
    let tail = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 * inv - tail
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values evaluated with mpmath at 40 significant digits.
    #[allow(clippy::excessive_precision)]
    const REFERENCE: [(f64, f64, f64); 17] = [
        (0.001, 6.907178885383853682512345, -1000.575571931810300471473),
        (0.01, 4.599479878042021722513945, -100.560885457868674497481),
        (0.1, 2.252712651734205959869702, -10.42375494041107679516822),
        (0.5, 0.5723649429247000870717137, -1.963510026021423479440976),
        (1.0, 0.0, -0.5772156649015328606065121),
        (1.5, -0.1207822376352452223455184, 0.03648997397857652055902367),
        (2.0, 0.0, 0.4227843350984671393934879),
        (2.5, 0.2846828704729191596324947, 0.7031566406452431872256903),
        (3.7, 1.428072326665387921872381, 1.167153539361511385873864),
        (4.0, 1.791759469228055000812477, 1.256117668431800472726821),
        (7.25, 7.052185450738539444925749, 1.910453526883736028382495),
        (10.0, 12.80182748008146961120772, 2.251752589066721107647456),
        (33.3, 82.60372358165495292832303, 3.490467238520242863925262),
        (100.0, 359.134205369575398776044, 4.600161852738087400198606),
        (1234.5, 7550.550901077894895729836, 7.118016231827997843305218),
        (1e5, 1051287.708973656894900858, 11.51292046496189508675671),
        (1e6, 12815504.56914761165997697, 13.81551005796419077077462),
    ];

    #[test]
    fn lgamma_matches_reference() {
        for &(z, want, _) in &REFERENCE {
            let got = lgamma(z).unwrap();
            // Absolute 1e-12 is below f64 resolution once |ln Γ| exceeds ~1e3,
            // so the bound scales with the magnitude there.
            let tol = 1e-12 * want.abs().max(1.0);
            assert!((got - want).abs() < tol, "lgamma({z}) = {got}, want {want}");
        }
    }

    #[test]
    fn digamma_matches_reference() {
        for &(z, _, want) in &REFERENCE {
            let got = digamma(z).unwrap();
            assert!((got - want).abs() < 1e-10, "digamma({z}) = {got}, want {want}");
        }
    }

    #[test]
    fn worked_examples() {
        assert_eq!(lgamma(1.0).unwrap(), 0.0);
        assert_eq!(lgamma(2.0).unwrap(), 0.0);
        assert!((lgamma(0.5).unwrap() - 0.5723649429).abs() < 1e-10);
        assert!((lgamma(4.0).unwrap() - 6f64.ln()).abs() < 1e-13);
        assert!((digamma(1.0).unwrap() + 0.5772156649).abs() < 1e-10);
        assert!((digamma(2.0).unwrap() - 0.4227843351).abs() < 1e-10);
        assert!((digamma(0.5).unwrap() + 1.9635100260).abs() < 1e-10);
    }

    #[test]
    fn digamma_is_derivative_of_lgamma() {
        for z in [0.01f64, 0.3, 1.0, 2.7, 9.0, 55.5] {
            let h = 1e-6 * z.max(1.0);
            let fd = (lgamma(z + h).unwrap() - lgamma(z - h).unwrap()) / (2.0 * h);
            let d = digamma(z).unwrap();
            assert!((fd - d).abs() < 1e-6 * d.abs().max(1.0), "z={z}: fd {fd} vs {d}");
        }
    }

    #[test]
    fn domain_errors() {
        for z in [0.0, -1.0, f64::NAN, f64::INFINITY, f64::NEG_INFINITY] {
            assert!(matches!(lgamma(z), Err(Error::Domain(_))));
            assert!(matches!(digamma(z), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn recurrence_holds_on_a_dense_grid() {
        // ln Γ(z+1) = ln Γ(z) + ln z
        let mut z = 1e-3;
        while z < 1e4 {
            let lhs = lgamma(z + 1.0).unwrap();
            let rhs = lgamma(z).unwrap() + z.ln();
            assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0) * 10.0, "z={z}");
            z *= 1.37;
        }
    }
}
