//! Elementwise nonlinearities with hand-written derivatives. Keeping them in
//! one enum gives the tape a single code path and lets one property test
//! cover every variant.

use super::LOG_FLOOR;

/// Smoothing applied to the sharpened-logistic input transform so its slope
/// at the origin stays finite.
const SHARPEN_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PointwiseFn {
    /// atan(x).
    Arctan,
    /// exp(x); errors upstream if the result overflows.
    Exp,
    /// ln(max(x, 1e-12)); negative inputs are a domain error upstream.
    LogGuarded,
    /// Numerically stable logistic 1/(1+exp(-x)).
    Sigmoid,
    /// Gaussian error linear unit (tanh approximation).
    Gelu,
    /// Relaxed step (1/pi)·atan(beta·x) + 1/2.
    RelaxArctan { beta: f64 },
    /// Relaxed step sigmoid(beta · x/(|x|^lambda + eps)); lambda = 0 is the
    /// plain logistic, lambda > 0 sharpens the response near zero.
    RelaxLogistic { beta: f64, lambda: f64 },
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// x/(|x|^lambda + eps) and its derivative; odd, strictly increasing.
fn sharpen(x: f64, lambda: f64) -> (f64, f64) {
    if lambda == 0.0 {
        let d = 1.0 + SHARPEN_EPS;
        return (x / d, 1.0 / d);
    }
    let p = x.abs().powf(lambda);
    let denom = p + SHARPEN_EPS;
    let value = x / denom;
    let deriv = ((1.0 - lambda) * p + SHARPEN_EPS) / (denom * denom);
    (value, deriv)
}

impl PointwiseFn {
    pub fn name(&self) -> &'static str {
        match self {
            PointwiseFn::Arctan => "arctan",
            PointwiseFn::Exp => "exp",
            PointwiseFn::LogGuarded => "log",
            PointwiseFn::Sigmoid => "sigmoid",
            PointwiseFn::Gelu => "gelu",
            PointwiseFn::RelaxArctan { .. } => "relax_arctan",
            PointwiseFn::RelaxLogistic { .. } => "relax_logistic",
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            PointwiseFn::Arctan => x.atan(),
            PointwiseFn::Exp => x.exp(),
            PointwiseFn::LogGuarded => x.max(LOG_FLOOR).ln(),
            PointwiseFn::Sigmoid => sigmoid(x),
            PointwiseFn::Gelu => {
                let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            PointwiseFn::RelaxArctan { beta } => {
                (beta * x).atan() / std::f64::consts::PI + 0.5
            }
            PointwiseFn::RelaxLogistic { beta, lambda } => {
                sigmoid(beta * sharpen(x, lambda).0)
            }
        }
    }

    pub fn deriv(&self, x: f64) -> f64 {
        match *self {
            PointwiseFn::Arctan => 1.0 / (1.0 + x * x),
            PointwiseFn::Exp => x.exp(),
            PointwiseFn::LogGuarded => {
                if x > LOG_FLOOR {
                    1.0 / x
                } else {
                    0.0
                }
            }
            PointwiseFn::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            PointwiseFn::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                let u = c * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let sech2 = 1.0 - t * t;
                0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x)
            }
            PointwiseFn::RelaxArctan { beta } => {
                let bx = beta * x;
                beta / (std::f64::consts::PI * (1.0 + bx * bx))
            }
            PointwiseFn::RelaxLogistic { beta, lambda } => {
                let (u, du) = sharpen(x, lambda);
                let s = sigmoid(beta * u);
                s * (1.0 - s) * beta * du
            }
        }
    }

    /// Domain check applied before evaluation; returns a message on failure.
    pub fn domain_error(&self, x: f64) -> Option<String> {
        match self {
            PointwiseFn::LogGuarded if x < 0.0 => {
                Some(format!("log of negative value {x}"))
            }
            PointwiseFn::Exp if x > 700.0 => {
                Some(format!("exp overflow for input {x}"))
            }
            _ => None,
        }
    }
}
