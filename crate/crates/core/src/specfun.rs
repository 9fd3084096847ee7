//! Special functions used by the second-stage inference and the pricing
//! policies: Lambert W (principal branch), digamma/trigamma/tetragamma and
//! the standard normal pdf, cdf and quantile.

use std::f64::consts::{E, PI};

use crate::error::{Error, Result};

/// Convergence controls shared by the iterative evaluators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecFunTolerance {
    pub max_iterations: usize,
    pub abs_tol: f64,
}

impl Default for SpecFunTolerance {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            abs_tol: 1e-12,
        }
    }
}

impl SpecFunTolerance {
    pub fn new(max_iterations: usize, abs_tol: f64) -> Result<Self> {
        if max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(abs_tol > 0.0) {
            return Err(Error::Config(format!("abs_tol must be positive, got {abs_tol}")));
        }
        Ok(Self {
            max_iterations,
            abs_tol,
        })
    }
}

/// Branch point of W: the minimum of w·eʷ.
pub const LAMBERT_BRANCH_POINT: f64 = -1.0 / E;

/// Principal branch W₀(x) with default tolerances.
pub fn lambert_w0(x: f64) -> Result<f64> {
    lambert_w0_with(x, &SpecFunTolerance::default())
}

/// Principal branch W₀(x): the root w ≥ −1 of w·eʷ = x, by Halley iteration.
pub fn lambert_w0_with(x: f64, tol: &SpecFunTolerance) -> Result<f64> {
    if x.is_nan() || x < LAMBERT_BRANCH_POINT - 4.0 * f64::EPSILON {
        return Err(Error::Domain(format!(
            "lambert_w0 requires x >= -1/e, got {x}"
        )));
    }
    if x.is_infinite() {
        return Ok(f64::INFINITY);
    }
    if x <= LAMBERT_BRANCH_POINT {
        return Ok(-1.0);
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    // w·eʷ overflows in the Halley step long before x does
    if x > LOG_FORM_FROM {
        return w0_log_form(x.ln(), tol);
    }

    let mut w = if x < -0.25 {
        // series in p = sqrt(2(e·x + 1)) about the branch point
        let p = (2.0 * (E * x + 1.0)).max(0.0).sqrt();
        -1.0 + p * (1.0 - p * (1.0 / 3.0 - p * 11.0 / 72.0))
    } else if x > E {
        let l = x.ln();
        l - l.ln()
    } else {
        x.ln_1p()
    };

    for _ in 0..tol.max_iterations {
        let ew = w.exp();
        let f = w * ew - x;
        if f == 0.0 {
            return Ok(w);
        }
        let wp1 = w + 1.0;
        if wp1.abs() < 1e-14 {
            return Ok(w);
        }
        let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
        let step = f / denom;
        w -= step;
        if step.abs() <= tol.abs_tol * (1.0 + w.abs()) {
            return Ok(w);
        }
    }
    Err(Error::Convergence {
        what: "lambert_w0",
        iterations: tol.max_iterations,
    })
}

/// W₀(eᶻ) without forming eᶻ, so arguments beyond the f64 range are fine.
/// For large z the root satisfies w + ln w = z.
pub fn lambert_w0_exp(z: f64) -> Result<f64> {
    if z.is_nan() {
        return Err(Error::Domain("lambert_w0_exp of NaN".into()));
    }
    if z <= LOG_FORM_FROM.ln() {
        return lambert_w0(z.exp());
    }
    w0_log_form(z, &SpecFunTolerance::default())
}

const LOG_FORM_FROM: f64 = 1e10;

/// Newton on w + ln w = z, valid for large z.
fn w0_log_form(z: f64, tol: &SpecFunTolerance) -> Result<f64> {
    let mut w = z - z.ln();
    for _ in 0..tol.max_iterations {
        let g = w + w.ln() - z;
        let step = g / (1.0 + 1.0 / w);
        w -= step;
        if step.abs() <= tol.abs_tol * (1.0 + w.abs()) {
            return Ok(w);
        }
    }
    Err(Error::Convergence {
        what: "lambert_w0_exp",
        iterations: tol.max_iterations,
    })
}

// Shift point for the recurrences; the asymptotic tails below are accurate to
// well under 1e-14 from here on.
const ASYMPTOTIC_FROM: f64 = 10.0;

fn require_positive(name: &str, a: f64) -> Result<()> {
    if a > 0.0 && a.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} requires a > 0, got {a}")))
    }
}

/// ψ(a) = d/da ln Γ(a) for a > 0.
pub fn digamma(a: f64) -> Result<f64> {
    require_positive("digamma", a)?;
    let mut x = a;
    let mut acc = 0.0;
    while x < ASYMPTOTIC_FROM {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let tail = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    Ok(acc + x.ln() - 0.5 * inv - tail)
}

/// ψ'(a) for a > 0.
pub fn trigamma(a: f64) -> Result<f64> {
    require_positive("trigamma", a)?;
    let mut x = a;
    let mut acc = 0.0;
    while x < ASYMPTOTIC_FROM {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let tail = inv
        * inv2
        * (1.0 / 6.0
            - inv2
                * (1.0 / 30.0
                    - inv2
                        * (1.0 / 42.0
                            - inv2
                                * (1.0 / 30.0
                                    - inv2 * (5.0 / 66.0 - inv2 * (691.0 / 2730.0 - inv2 * 7.0 / 6.0))))));
    Ok(acc + inv + 0.5 * inv2 + tail)
}

/// ψ''(a) for a > 0. Used as the Newton slope when inverting trigamma.
pub fn tetragamma(a: f64) -> Result<f64> {
    require_positive("tetragamma", a)?;
    let mut x = a;
    let mut acc = 0.0;
    while x < ASYMPTOTIC_FROM {
        acc -= 2.0 / (x * x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let tail = inv2
        * inv2
        * (0.5
            - inv2
                * (1.0 / 6.0
                    - inv2
                        * (1.0 / 6.0
                            - inv2
                                * (3.0 / 10.0
                                    - inv2 * (5.0 / 6.0 - inv2 * (691.0 / 210.0 - inv2 * 35.0 / 2.0))))));
    Ok(acc - inv2 - inv2 * inv - tail)
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn std_normal_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Inverse of [`std_normal_cdf`] on (0, 1): rational initial approximation
/// followed by one Halley refinement against the cdf.
pub fn std_normal_quantile(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!(
            "std_normal_quantile requires u in (0, 1), got {u}"
        )));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if u < P_LOW {
        tail((-2.0 * u.ln()).sqrt())
    } else if u <= 1.0 - P_LOW {
        let q = u - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (-u).ln_1p()).sqrt())
    };

    let err = std_normal_cdf(x) - u;
    let step = err * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - step / (1.0 + 0.5 * x * step))
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (f(lo) < 0.0) == (f(mid) < 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn lambert_trivial_points() {
        assert_eq!(lambert_w0(0.0).unwrap(), 0.0);
        assert!((lambert_w0(E).unwrap() - 1.0).abs() < 1e-14);
        assert!((lambert_w0(LAMBERT_BRANCH_POINT).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn lambert_matches_bisection_oracle() {
        let oracle = bisect(|w| w * w.exp() - 2.5, 0.0, 3.0);
        let w = lambert_w0(2.5).unwrap();
        assert!((w - oracle).abs() < 1e-12, "{w} vs {oracle}");
    }

    #[test]
    fn lambert_rejects_below_branch() {
        assert!(matches!(lambert_w0(-0.5), Err(Error::Domain(_))));
        assert!(lambert_w0(f64::NAN).is_err());
    }

    #[test]
    fn lambert_iteration_budget_is_enforced() {
        let tol = SpecFunTolerance::new(1, 1e-300).unwrap();
        assert!(matches!(
            lambert_w0_with(1e6, &tol),
            Err(Error::Convergence { .. })
        ));
        assert!(SpecFunTolerance::new(0, 1e-12).is_err());
        assert!(SpecFunTolerance::new(10, 0.0).is_err());
    }

    #[test]
    fn lambert_identity_on_log_grid() {
        // log-spaced in distance from the branch point, up to 1e6
        let lo = (1e-6f64).ln();
        let hi = (1e6 - LAMBERT_BRANCH_POINT).ln();
        for i in 0..=2000 {
            let t = lo + (hi - lo) * i as f64 / 2000.0;
            let x = LAMBERT_BRANCH_POINT + t.exp();
            let w = lambert_w0(x).unwrap();
            assert!(w >= -1.0);
            let resid = (w * w.exp() - x).abs();
            assert!(resid <= 1e-10 * x.abs().max(1.0), "x={x} w={w} resid={resid}");
        }
    }

    #[test]
    fn lambert_of_exp_agrees_and_survives_overflow() {
        for z in [-5.0, 0.0, 3.0, 50.0, 699.0] {
            let a = lambert_w0_exp(z).unwrap();
            let b = lambert_w0(f64::exp(z)).unwrap();
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        for z in [701.0, 5e3, 1e6] {
            let w = lambert_w0_exp(z).unwrap();
            assert!((w + w.ln() - z).abs() <= 1e-10 * z);
        }
    }

    #[test]
    fn lambert_near_f64_max() {
        for x in [1e9, 1e11, 1e150, 1e300, f64::MAX] {
            let w = lambert_w0(x).unwrap();
            // compare in log form; w·eʷ itself overflows near the top
            let resid = (w + w.ln() - x.ln()).abs();
            assert!(resid <= 1e-13 * x.ln(), "x={x} w={w}");
        }
    }

    #[test]
    fn digamma_known_values() {
        assert!((digamma(1.0).unwrap() + EULER_GAMMA).abs() < 1e-12);
        assert!((digamma(2.0).unwrap() - (1.0 - EULER_GAMMA)).abs() < 1e-12);
        // ψ(1/2) = −γ − 2 ln 2, then five recurrence steps to 5.5
        let mut oracle = -EULER_GAMMA - 2.0 * std::f64::consts::LN_2;
        for k in 0..5 {
            oracle += 1.0 / (0.5 + k as f64);
        }
        assert!((digamma(5.5).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn trigamma_known_values() {
        let z2 = PI * PI / 6.0;
        assert!((trigamma(1.0).unwrap() - z2).abs() < 1e-12);
        assert!((trigamma(2.0).unwrap() - (z2 - 1.0)).abs() < 1e-12);
        // direct series Σ 1/(a+k)² with an Euler–Maclaurin tail
        let a = 3.25;
        let n = 200_000;
        let mut oracle: f64 = (0..n).map(|k| 1.0 / ((a + k as f64) * (a + k as f64))).rev().sum();
        let m = a + n as f64;
        oracle += 1.0 / m + 0.5 / (m * m) + 1.0 / (6.0 * m * m * m);
        assert!((trigamma(a).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn tetragamma_matches_trigamma_slope() {
        for a in [0.05, 0.3, 1.0, 4.2, 17.0, 250.0] {
            let h = 1e-5 * a;
            let fd = (trigamma(a + h).unwrap() - trigamma(a - h).unwrap()) / (2.0 * h);
            let t = tetragamma(a).unwrap();
            assert!((t - fd).abs() <= 1e-6 * t.abs(), "a={a}: {t} vs {fd}");
        }
    }

    #[test]
    fn polygamma_domain_errors() {
        for a in [0.0, -1.0, f64::NAN] {
            assert!(digamma(a).is_err());
            assert!(trigamma(a).is_err());
            assert!(tetragamma(a).is_err());
        }
    }

    #[test]
    fn polygamma_recurrences_on_grid() {
        let mut prev_tri = f64::INFINITY;
        for i in 0..=5000 {
            let a = 0.1 + (100.0 - 0.1) * i as f64 / 5000.0;
            let d = digamma(a + 1.0).unwrap() - digamma(a).unwrap();
            assert!((d - 1.0 / a).abs() < 1e-9, "digamma recurrence at {a}");
            let t = trigamma(a + 1.0).unwrap() - trigamma(a).unwrap();
            assert!((t + 1.0 / (a * a)).abs() < 1e-9, "trigamma recurrence at {a}");
            let tri = trigamma(a).unwrap();
            assert!(tri > 0.0 && tri < prev_tri);
            prev_tri = tri;
        }
    }

    #[test]
    fn normal_cdf_against_quadrature() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert_eq!(std_normal_quantile(0.5).unwrap(), 0.0);
        // composite Simpson on [0, 1.96]
        let n = 20_000;
        let h = 1.96 / n as f64;
        let mut s = std_normal_pdf(0.0) + std_normal_pdf(1.96);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * std_normal_pdf(i as f64 * h);
        }
        let oracle = 0.5 + s * h / 3.0;
        assert!((std_normal_cdf(1.96) - oracle).abs() < 1e-12);
        assert!((std_normal_cdf(1.96) - 0.975_002_1).abs() < 1e-7);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for i in 0..=1200 {
            let z = -6.0 + 12.0 * i as f64 / 1200.0;
            let back = std_normal_quantile(std_normal_cdf(z)).unwrap();
            assert!((back - z).abs() < 1e-8, "z={z} back={back}");
        }
        for u in [1e-300, 1e-12, 0.01, 0.3, 0.97, 1.0 - 1e-12] {
            let z = std_normal_quantile(u).unwrap();
            let err = (std_normal_cdf(z) - u).abs();
            let tol = if u < 0.5 { 1e-10 * u } else { 1e-15 };
            assert!(err <= tol, "u={u} err={err}");
        }
        assert!(std_normal_quantile(0.0).is_err());
        assert!(std_normal_quantile(1.0).is_err());
    }
}
