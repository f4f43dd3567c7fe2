//! Normal-Inverse-Gamma evidential distribution.
//!
//! A boundary observation `b` is modelled as Gaussian with unknown mean and
//! variance under an NIG prior `(gamma, upsilon, alpha, beta)`. Marginalising
//! the prior gives a Student-t likelihood with `2 alpha` degrees of freedom,
//! location `gamma` and squared scale `beta (1 + upsilon) / (upsilon alpha)`.

use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};

/// Numerical floor added to every positivity constraint.
pub const EPS: f64 = 1e-6;

/// Minimum distance of `alpha` from the pole at 1 for the uncertainty formulas.
pub const POLE_EPS: f64 = 1e-6;

const LN_PI: f64 = 1.144_729_885_849_400_2;

/// Parameters of the NIG prior over a boundary's Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NigParams {
    pub gamma: f64,
    pub upsilon: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl NigParams {
    /// Builds parameters from already-constrained values, rejecting any that
    /// fall outside the NIG domain.
    pub fn new(gamma: f64, upsilon: f64, alpha: f64, beta: f64) -> Result<Self> {
        let p = Self {
            gamma,
            upsilon,
            alpha,
            beta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() {
            return Err(Error::InvalidInput(format!("gamma must be finite; got {}", self.gamma)));
        }
        if !(self.upsilon.is_finite() && self.upsilon > 0.0) {
            return Err(Error::InvalidInput(format!(
                "upsilon must be finite and > 0; got {}",
                self.upsilon
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 1.0) {
            return Err(Error::InvalidInput(format!(
                "alpha must be finite and > 1; got {}",
                self.alpha
            )));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidInput(format!(
                "beta must be finite and > 0; got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// Total evidence `2 upsilon + alpha`.
    pub fn evidence(&self) -> f64 {
        2.0 * self.upsilon + self.alpha
    }

    /// Degrees of freedom and squared scale of the marginal Student-t.
    pub fn student_t(&self) -> (f64, f64) {
        let dof = 2.0 * self.alpha;
        let scale2 = self.beta * (1.0 + self.upsilon) / (self.upsilon * self.alpha);
        (dof, scale2)
    }
}

/// Mean and variance of the boundary Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianMoments {
    pub mu: f64,
    pub sigma2: f64,
}

impl GaussianMoments {
    pub fn new(mu: f64, sigma2: f64) -> Result<Self> {
        if !(sigma2 >= 0.0) {
            return Err(Error::InvalidInput(format!("sigma2 must be >= 0; got {sigma2}")));
        }
        Ok(Self { mu, sigma2 })
    }
}

/// Prediction together with its aleatoric and epistemic uncertainty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UncertaintyTriple {
    pub prediction: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps four unconstrained head outputs onto the NIG domain.
///
/// `gamma` passes through; the remaining three go through softplus with a
/// floor of [`EPS`] (plus one for `alpha`).
pub fn constrain_raw_to_nig(raw: [f64; 4]) -> Result<NigParams> {
    const NAMES: [&str; 4] = ["gamma", "upsilon", "alpha", "beta"];
    for (name, v) in NAMES.iter().zip(raw) {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("raw {name} component is not finite ({v})")));
        }
    }
    Ok(NigParams {
        gamma: raw[0],
        upsilon: softplus(raw[1]) + EPS,
        alpha: softplus(raw[2]) + 1.0 + EPS,
        beta: softplus(raw[3]) + EPS,
    })
}

/// Jacobian diagonal of [`constrain_raw_to_nig`]; the map is elementwise.
pub fn constraint_jacobian(raw: [f64; 4]) -> [f64; 4] {
    [1.0, sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])]
}

/// Negative log-likelihood of `b` under the marginal Student-t.
pub fn student_t_nll(b: f64, p: &NigParams) -> f64 {
    let r = b - p.gamma;
    let omega = 2.0 * p.beta * (1.0 + p.upsilon);
    let s = r * r * p.upsilon + omega;
    0.5 * (LN_PI - p.upsilon.ln()) - p.alpha * omega.ln()
        + (p.alpha + 0.5) * s.ln()
        + ln_gamma(p.alpha)
        - ln_gamma(p.alpha + 0.5)
}

/// Partial derivatives of [`student_t_nll`] with respect to
/// `(gamma, upsilon, alpha, beta)`.
pub fn nll_gradients(b: f64, p: &NigParams) -> [f64; 4] {
    let r = b - p.gamma;
    let omega = 2.0 * p.beta * (1.0 + p.upsilon);
    let s = r * r * p.upsilon + omega;
    let a_half = p.alpha + 0.5;
    let d_gamma = -a_half * 2.0 * r * p.upsilon / s;
    let d_upsilon =
        -0.5 / p.upsilon - p.alpha * 2.0 * p.beta / omega + a_half * (r * r + 2.0 * p.beta) / s;
    let d_alpha = s.ln() - omega.ln() + digamma(p.alpha) - digamma(a_half);
    let d_beta = -p.alpha / p.beta + a_half * 2.0 * (1.0 + p.upsilon) / s;
    [d_gamma, d_upsilon, d_alpha, d_beta]
}

/// Chain rule from constrained-space gradients back to raw head outputs.
pub fn raw_gradients(raw: [f64; 4], constrained: [f64; 4]) -> [f64; 4] {
    let jac = constraint_jacobian(raw);
    [
        constrained[0] * jac[0],
        constrained[1] * jac[1],
        constrained[2] * jac[2],
        constrained[3] * jac[3],
    ]
}

/// Prediction, aleatoric `E[sigma^2]` and epistemic `Var[mu]`.
pub fn nig_uncertainties(p: &NigParams) -> Result<UncertaintyTriple> {
    if !(p.alpha > 1.0 + POLE_EPS) {
        return Err(Error::Pole(format!(
            "alpha = {} is within {POLE_EPS} of the pole at 1",
            p.alpha
        )));
    }
    let aleatoric = p.beta / (p.alpha - 1.0);
    Ok(UncertaintyTriple {
        prediction: p.gamma,
        aleatoric,
        epistemic: aleatoric / p.upsilon,
    })
}
