//! Scalar kernels shared by the two free-form deformation models.

use crate::error::{Error, Result};

const CENTER: f64 = 2.0 / 3.0;

/// Cubic B-spline with support `|u| < 2`.
#[inline]
pub fn cubic_bspline(u: f64) -> f64 {
    bspline_with_center(u, CENTER)
}

/// The cubic B-spline with its central constant perturbed. Only used to
/// confirm that the self-check notices a broken kernel.
#[doc(hidden)]
pub fn corrupted_cubic_bspline(u: f64) -> f64 {
    bspline_with_center(u, CENTER + 1e-3)
}

#[inline(always)]
fn bspline_with_center(u: f64, center: f64) -> f64 {
    let a = u.abs();
    if a < 1.0 {
        // 2/3 - a^2 + a^3/2
        center + a * a * (-1.0 + 0.5 * a)
    } else if a < 2.0 {
        let t = 2.0 - a;
        t * t * t / 6.0
    } else {
        0.0
    }
}

/// `exp(x)` for `x <= 0`, branch-free so that lane loops vectorize.
/// Relative error stays within a few ulp; arguments below -708 are clamped.
#[inline]
#[allow(clippy::excessive_precision)]
pub(crate) fn exp_nonpositive(x: f64) -> f64 {
    const MAGIC: f64 = 6755399441055744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.max(-708.0);
    let t = x * std::f64::consts::LOG2_E + MAGIC;
    let n = t - MAGIC;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // Taylor series to degree 12 on |r| <= ln2 / 2
    let mut p = 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let k = (t.to_bits() as i64).wrapping_sub(MAGIC.to_bits() as i64);
    p * f64::from_bits(((k + 1023) as u64) << 52)
}

/// Separable 2-D basis `b(u1) * b(u2)`.
#[inline]
pub fn bspline_basis_product(u1: f64, u2: f64) -> f64 {
    cubic_bspline(u1) * cubic_bspline(u2)
}

/// Decay factor and grid spacing of the exponential kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    pub theta: f64,
    pub eta: f64,
}

impl KernelConfig {
    pub fn new(theta: f64, eta: f64) -> Result<Self> {
        let cfg = Self { theta, eta };
        cfg.scale()?;
        Ok(cfg)
    }

    /// The product `theta * eta`, the distance at which weights fall to `1/e`.
    pub fn scale(&self) -> Result<f64> {
        let s = self.theta * self.eta;
        if s > 0.0 && s.is_finite() {
            Ok(s)
        } else {
            Err(Error::NonPositiveScale(s))
        }
    }
}

/// `exp(-r / (theta * eta))`. The weights are not normalized across control
/// points.
pub fn exp_decay_weight(r: f64, cfg: &KernelConfig) -> Result<f64> {
    let s = cfg.scale()?;
    Ok((-r / s).exp())
}
