//! Scalar functions applied through the functional calculus.

use std::fmt;
use std::sync::Arc;

use nalgebra::Complex;

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

type ComplexFn = dyn Fn(C64) -> C64 + Send + Sync;

/// A function holomorphic on a sector around the positive reals.
#[derive(Clone)]
pub enum SpectralFunction {
    /// `z^p` on the principal branch; negative `p` decays with rate `−p`.
    Power(f64),
    /// `z^{−p}`.
    InversePower(f64),
    /// User-supplied function; must be real on the positive reals.
    Custom {
        name: String,
        f: Arc<ComplexFn>,
        /// `r` with `sup |λ^r f(λ)| < ∞` on the sector, if the function decays.
        decay_r: Option<f64>,
    },
}

impl fmt::Debug for SpectralFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl SpectralFunction {
    pub fn custom(name: impl Into<String>, decay_r: Option<f64>, f: impl Fn(C64) -> C64 + Send + Sync + 'static) -> Self {
        SpectralFunction::Custom { name: name.into(), f: Arc::new(f), decay_r }
    }

    pub fn identity() -> Self {
        SpectralFunction::Power(1.0)
    }

    pub fn name(&self) -> String {
        match self {
            SpectralFunction::Power(p) => format!("z^{p}"),
            SpectralFunction::InversePower(p) => format!("z^-{p}"),
            SpectralFunction::Custom { name, .. } => name.clone(),
        }
    }

    /// Exponent when the function is a power of `z`.
    pub fn exponent(&self) -> Option<f64> {
        match self {
            SpectralFunction::Power(p) => Some(*p),
            SpectralFunction::InversePower(p) => Some(-*p),
            SpectralFunction::Custom { .. } => None,
        }
    }

    /// Decay rate on the sector; `None` when the function does not decay.
    pub fn decay_r(&self) -> Option<f64> {
        match self {
            SpectralFunction::Custom { decay_r, .. } => decay_r.filter(|r| *r > 0.0),
            _ => self.exponent().filter(|p| *p < 0.0).map(|p| -p),
        }
    }

    pub fn eval(&self, z: C64) -> C64 {
        match self {
            SpectralFunction::Custom { f, .. } => f(z),
            _ => {
                let p = self.exponent().unwrap();
                if p == 0.0 {
                    C64::new(1.0, 0.0)
                } else if p.fract() == 0.0 && p.abs() <= 64.0 {
                    z.powi(p as i32)
                } else {
                    (z.ln() * p).exp()
                }
            }
        }
    }

    pub fn eval_real(&self, x: f64) -> f64 {
        match self {
            SpectralFunction::Custom { f, .. } => f(C64::new(x, 0.0)).re,
            _ => {
                let p = self.exponent().unwrap();
                if p.fract() == 0.0 && p.abs() <= 64.0 {
                    x.powi(p as i32)
                } else {
                    x.powf(p)
                }
            }
        }
    }

    /// `f'(x)` on the positive reals (complex step for custom functions).
    pub fn derivative_real(&self, x: f64) -> f64 {
        match self {
            SpectralFunction::Custom { f, .. } => {
                let h = 1e-20 * x.abs().max(1.0);
                f(C64::new(x, h)).im / h
            }
            _ => {
                let p = self.exponent().unwrap();
                if p == 0.0 {
                    0.0
                } else {
                    p * self.with_exponent(p - 1.0).eval_real(x)
                }
            }
        }
    }

    fn with_exponent(&self, p: f64) -> Self {
        SpectralFunction::Power(p)
    }

    /// Divided difference `f[a, b]`, equal to `f'(a)` when `a = b`.
    pub fn divided_difference(&self, a: f64, b: f64) -> f64 {
        let scale = a.abs().max(b.abs());
        if (a - b).abs() <= 1e-9 * scale {
            return self.derivative_real(0.5 * (a + b));
        }
        if let Some(p) = self.exponent() {
            if a > 0.0 && b > 0.0 {
                // (b^p − a^p)/(b − a) = a^p·expm1(p·ln(b/a))/(b − a), stable for b close to a
                let l = (b / a).ln();
                return self.eval_real(a) * (p * l).exp_m1() / (b - a);
            }
        }
        (self.eval_real(b) - self.eval_real(a)) / (b - a)
    }

    /// Splits `f = z^k·g` with `g` decaying; `k = 0` when `f` already decays.
    pub fn growth_split(&self) -> Result<(u32, SpectralFunction)> {
        if self.decay_r().is_some() {
            return Ok((0, self.clone()));
        }
        match self.exponent() {
            Some(p) if p >= 0.0 => {
                let k = p.floor() as u32 + 1;
                Ok((k, SpectralFunction::Power(p - k as f64)))
            }
            _ => Err(Error::Unsupported(format!(
                "function `{}` has no decay on the sector; supply decay_r > 0 or use a power",
                self.name()
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn powers() {
        let f = SpectralFunction::Power(0.5);
        assert!((f.eval_real(4.0) - 2.0).abs() < 1e-15);
        let z = C64::new(0.0, 4.0);
        let w = f.eval(z);
        assert!((w * w - z).norm() < 1e-14);
        assert!((SpectralFunction::InversePower(1.0).eval_real(4.0) - 0.25).abs() < 1e-16);
        assert_eq!(SpectralFunction::Power(0.0).eval_real(7.0), 1.0);
        assert_eq!(SpectralFunction::InversePower(0.5).decay_r(), Some(0.5));
        assert_eq!(SpectralFunction::Power(1.5).decay_r(), None);
    }

    #[test]
    fn split_has_positive_decay() {
        let (k, g) = SpectralFunction::Power(1.5).growth_split().unwrap();
        assert_eq!(k, 2);
        assert_eq!(g.decay_r(), Some(0.5));
        let (k, g) = SpectralFunction::Power(2.0).growth_split().unwrap();
        assert_eq!(k, 3);
        assert_eq!(g.decay_r(), Some(1.0));
        let (k, _) = SpectralFunction::InversePower(0.5).growth_split().unwrap();
        assert_eq!(k, 0);
        let c = SpectralFunction::custom("exp", None, |z| z.exp());
        assert!(matches!(c.growth_split(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn divided_differences() {
        for f in [SpectralFunction::Power(1.5), SpectralFunction::InversePower(0.5), SpectralFunction::Power(3.0)] {
            for (a, b) in [(1.0, 2.0), (3.0, 3.0 + 1e-12), (5.0, 5.0), (1.0, 1.0 + 1e-6)] {
                let got = f.divided_difference(a, b);
                let exact = if (b - a).abs() < 1e-3 {
                    // f[a, b] = f'(m) + O((b − a)²)
                    f.derivative_real(0.5 * (a + b))
                } else {
                    (f.eval_real(b) - f.eval_real(a)) / (b - a)
                };
                assert!((got - exact).abs() < 1e-9 * exact.abs().max(1.0), "{f:?} [{a},{b}]: {got} vs {exact}");
            }
        }
    }

    #[test]
    fn custom_derivative_by_complex_step() {
        let f = SpectralFunction::custom("1/(1+z)", Some(1.0), |z| (z + 1.0).inv());
        assert!((f.derivative_real(1.0) + 0.25).abs() < 1e-14);
    }
}
