//! Effective-specific-heat model of the phase change material.
//!
//! Latent heat is folded into a Gaussian bump of unit area centred on the
//! melt temperature, so melt fraction is the Gaussian CDF and the specific
//! enthalpy has a closed form.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::params::PcmParams;

/// Reference temperature for enthalpies.
pub const ENTHALPY_REFERENCE_C: f64 = 0.0;

fn check(temperature_c: f64) -> Result<()> {
    if temperature_c.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!("non-finite temperature {temperature_c}")))
    }
}

#[inline]
fn standard_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

#[inline]
fn standard_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// Normalized latent-heat bump, `∫ bump dT = 1` [1/K].
#[inline]
pub fn melt_density(temperature_c: f64, pcm: &PcmParams) -> f64 {
    let z = (temperature_c - pcm.melt_temperature_c) / pcm.melt_width_c;
    standard_pdf(z) / pcm.melt_width_c
}

#[inline]
pub(crate) fn melt_fraction_unchecked(temperature_c: f64, pcm: &PcmParams) -> f64 {
    standard_cdf((temperature_c - pcm.melt_temperature_c) / pcm.melt_width_c)
}

#[inline]
pub(crate) fn effective_specific_heat_unchecked(temperature_c: f64, pcm: &PcmParams) -> f64 {
    let lambda = melt_fraction_unchecked(temperature_c, pcm);
    (1.0 - lambda) * pcm.solid_specific_heat_j_per_kg_k
        + lambda * pcm.liquid_specific_heat_j_per_kg_k
        + pcm.latent_heat_j_per_kg * melt_density(temperature_c, pcm)
}

/// Fraction of the PCM that is liquid at `temperature_c`, in [0, 1].
pub fn melt_fraction(temperature_c: f64, pcm: &PcmParams) -> Result<f64> {
    check(temperature_c)?;
    Ok(melt_fraction_unchecked(temperature_c, pcm))
}

/// Apparent specific heat [J/(kg K)]: the phase-blended sensible heat plus
/// the latent-heat bump.
pub fn effective_specific_heat(temperature_c: f64, pcm: &PcmParams) -> Result<f64> {
    check(temperature_c)?;
    Ok(effective_specific_heat_unchecked(temperature_c, pcm))
}

/// `∫ melt_fraction dT` from the melt temperature's far past, in closed form.
#[inline]
fn melt_fraction_integral(temperature_c: f64, pcm: &PcmParams) -> f64 {
    let s = pcm.melt_width_c;
    let z = (temperature_c - pcm.melt_temperature_c) / s;
    (temperature_c - pcm.melt_temperature_c) * standard_cdf(z) + s * standard_pdf(z)
}

/// Specific enthalpy [J/kg] relative to [`ENTHALPY_REFERENCE_C`]; its
/// derivative is [`effective_specific_heat`].
pub(crate) fn specific_enthalpy(temperature_c: f64, pcm: &PcmParams) -> f64 {
    let t0 = ENTHALPY_REFERENCE_C;
    pcm.solid_specific_heat_j_per_kg_k * (temperature_c - t0)
        + (pcm.liquid_specific_heat_j_per_kg_k - pcm.solid_specific_heat_j_per_kg_k)
            * (melt_fraction_integral(temperature_c, pcm) - melt_fraction_integral(t0, pcm))
        + pcm.latent_heat_j_per_kg
            * (melt_fraction_unchecked(temperature_c, pcm) - melt_fraction_unchecked(t0, pcm))
}

/// Phase-blended PCM conductivity.
#[inline]
pub(crate) fn conductivity(temperature_c: f64, pcm: &PcmParams) -> f64 {
    let lambda = melt_fraction_unchecked(temperature_c, pcm);
    (1.0 - lambda) * pcm.solid_conductivity_w_per_m_k + lambda * pcm.liquid_conductivity_w_per_m_k
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::SystemParams;
    use proptest::prelude::*;

    fn pcm() -> PcmParams {
        SystemParams::default().pcm
    }

    /// Adaptive Simpson quadrature, independent of the closed forms above.
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let lm = 0.5 * (a + m);
            let rm = 0.5 * (m + b);
            let flm = f(lm);
            let frm = f(rm);
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                    + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        let fa = f(a);
        let fb = f(b);
        let fm = f(0.5 * (a + b));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    #[test]
    fn tails_recover_phase_specific_heats() {
        let p = pcm();
        let below = p.melt_temperature_c - 10.0 * p.melt_width_c;
        let above = p.melt_temperature_c + 10.0 * p.melt_width_c;
        let cs = effective_specific_heat(below, &p).unwrap();
        let cl = effective_specific_heat(above, &p).unwrap();
        assert!((cs / p.solid_specific_heat_j_per_kg_k - 1.0).abs() < 1e-6);
        assert!((cl / p.liquid_specific_heat_j_per_kg_k - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bump_integrates_to_latent_heat() {
        let p = pcm();
        let a = p.melt_temperature_c - 10.0 * p.melt_width_c;
        let b = p.melt_temperature_c + 10.0 * p.melt_width_c;
        let excess = |t: f64| {
            let lambda = melt_fraction(t, &p).unwrap();
            let base = (1.0 - lambda) * p.solid_specific_heat_j_per_kg_k
                + lambda * p.liquid_specific_heat_j_per_kg_k;
            effective_specific_heat(t, &p).unwrap() - base
        };
        let integral = simpson(&excess, a, b, 1e-6);
        assert!((integral / p.latent_heat_j_per_kg - 1.0).abs() < 1e-4, "{integral}");
    }

    #[test]
    fn melt_fraction_at_melt_point_and_tail() {
        let p = pcm();
        assert!((melt_fraction(p.melt_temperature_c, &p).unwrap() - 0.5).abs() < 1e-15);
        let tail = melt_fraction(p.melt_temperature_c - 10.0 * p.melt_width_c, &p).unwrap();
        assert!(tail <= 1e-6);
    }

    #[test]
    fn melt_fraction_matches_quadrature_of_bump() {
        let p = pcm();
        let lo = p.melt_temperature_c - 12.0 * p.melt_width_c;
        for i in 0..100 {
            let t = p.melt_temperature_c - 6.0 * p.melt_width_c + 0.12 * p.melt_width_c * i as f64;
            let q = simpson(&|s| melt_density(s, &p), lo, t, 1e-12);
            let lambda = melt_fraction(t, &p).unwrap();
            assert!((q - lambda).abs() < 1e-8, "t={t} q={q} lambda={lambda}");
        }
    }

    #[test]
    fn non_finite_temperature_is_rejected() {
        let p = pcm();
        assert!(melt_fraction(f64::NAN, &p).is_err());
        assert!(effective_specific_heat(f64::INFINITY, &p).is_err());
    }

    #[test]
    fn enthalpy_derivative_is_effective_specific_heat() {
        let p = pcm();
        for i in 0..200 {
            let t = 0.0 + 0.2 * i as f64;
            let h = 1e-4;
            let fd = (specific_enthalpy(t + h, &p) - specific_enthalpy(t - h, &p)) / (2.0 * h);
            let cp = effective_specific_heat(t, &p).unwrap();
            assert!((fd - cp).abs() / cp < 1e-6, "t={t} fd={fd} cp={cp}");
        }
        assert!(specific_enthalpy(ENTHALPY_REFERENCE_C, &p).abs() < 1e-9);
    }

    #[test]
    fn specific_heat_and_slope_are_continuous() {
        let p = pcm();
        let c = |t: f64| effective_specific_heat(t, &p).unwrap();
        let slope = |t: f64| (c(t + 1e-5) - c(t - 1e-5)) / 2e-5;
        let a = p.melt_temperature_c - 8.0 * p.melt_width_c;
        let max_slope = (0..2000)
            .map(|i| slope(a + 0.008 * p.melt_width_c * i as f64).abs())
            .fold(0.0, f64::max);
        let delta = 1e-8;
        for i in 0..2000 {
            let t = a + 0.008 * p.melt_width_c * i as f64;
            assert!((c(t + delta) - c(t)).abs() / c(t) <= 1e-6);
            assert!((slope(t + delta) - slope(t)).abs() / max_slope <= 1e-6);
        }
    }

    proptest! {
        #[test]
        fn melt_fraction_is_monotone(a in -40.0f64..200.0, b in -40.0f64..200.0) {
            let p = pcm();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(melt_fraction(lo, &p).unwrap() <= melt_fraction(hi, &p).unwrap());
        }

        #[test]
        fn specific_heat_bounded_below(t in -40.0f64..200.0) {
            let p = pcm();
            let floor = p.solid_specific_heat_j_per_kg_k.min(p.liquid_specific_heat_j_per_kg_k);
            prop_assert!(effective_specific_heat(t, &p).unwrap() >= floor);
        }
    }
}
