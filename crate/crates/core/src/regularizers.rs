//! Evidence regularizers.
//!
//! The vanilla penalty `delta * phi` pushes evidence down in proportion to the
//! error alone. The geometric penalty `(delta_bar + phi_bar - 1)^2` pulls each
//! normalized (error, evidence) point onto the line `phi_bar = 1 - delta_bar`,
//! so its gradient depends on both coordinates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential::{NigParams, EPS};

/// Error `|b - gamma|` and evidence `2 upsilon + alpha` of one prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvidencePair {
    pub delta: f64,
    pub phi: f64,
}

/// Batch-normalized error and evidence, both in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedPair {
    pub delta_bar: f64,
    pub phi_bar: f64,
}

/// Which evidential objective a run trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerMode {
    /// Evidential head receives no loss at all.
    None,
    NllOnly,
    Vanilla,
    Geom,
}

impl RegularizerMode {
    pub const ALL: [RegularizerMode; 4] = [
        RegularizerMode::None,
        RegularizerMode::NllOnly,
        RegularizerMode::Vanilla,
        RegularizerMode::Geom,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RegularizerMode::None => "none",
            RegularizerMode::NllOnly => "nll_only",
            RegularizerMode::Vanilla => "vanilla",
            RegularizerMode::Geom => "geom",
        }
    }
}

impl fmt::Display for RegularizerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegularizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegularizerMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown regularizer mode '{s}'")))
    }
}

pub fn evidence_pair(b: f64, p: &NigParams) -> EvidencePair {
    EvidencePair {
        delta: (b - p.gamma).abs(),
        phi: p.evidence(),
    }
}

/// Returns `(loss, d loss / d phi)`.
pub fn vanilla_regularizer(pair: EvidencePair) -> (f64, f64) {
    (pair.delta * pair.phi, pair.delta)
}

/// Max statistics used to normalize a batch. They are treated as constants
/// by every gradient computation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchScale {
    pub max_delta: f64,
    pub max_phi: f64,
}

impl BatchScale {
    pub fn of(pairs: &[EvidencePair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidInput("cannot normalize an empty batch".into()));
        }
        let max_delta = pairs.iter().map(|p| p.delta).fold(f64::NEG_INFINITY, f64::max);
        let max_phi = pairs.iter().map(|p| p.phi).fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { max_delta, max_phi })
    }

    pub fn delta_denominator(&self) -> f64 {
        self.max_delta + EPS
    }

    pub fn phi_denominator(&self) -> f64 {
        self.max_phi + EPS
    }

    pub fn apply(&self, pair: EvidencePair) -> NormalizedPair {
        NormalizedPair {
            delta_bar: pair.delta / self.delta_denominator(),
            phi_bar: pair.phi / self.phi_denominator(),
        }
    }
}

/// Max-normalizes errors and evidences over a batch.
pub fn normalize_batch(pairs: &[EvidencePair]) -> Result<Vec<NormalizedPair>> {
    let scale = BatchScale::of(pairs)?;
    Ok(pairs.iter().map(|&p| scale.apply(p)).collect())
}

/// Returns `(loss, d loss / d phi_bar)`.
pub fn geom_regularizer(np: NormalizedPair) -> (f64, f64) {
    let r = np.delta_bar + np.phi_bar - 1.0;
    (r * r, 2.0 * r)
}

/// One point of a sampled gradient field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldPoint {
    pub delta: f64,
    pub phi: f64,
    pub minus_grad: f64,
}

/// Minus-gradient of the regularizer with respect to evidence over a
/// `resolution x resolution` grid on `[0, 1]^2`, row-major in `delta`.
pub fn sample_gradient_field(mode: RegularizerMode, resolution: usize) -> Result<Vec<FieldPoint>> {
    if resolution < 2 {
        return Err(Error::InvalidInput(format!(
            "gradient field needs at least 2 points per axis; got {resolution}"
        )));
    }
    let step = (resolution - 1) as f64;
    let mut out = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        let delta = i as f64 / step;
        for j in 0..resolution {
            let phi = j as f64 / step;
            let minus_grad = match mode {
                RegularizerMode::Vanilla => -vanilla_regularizer(EvidencePair { delta, phi }).1,
                RegularizerMode::Geom => {
                    -geom_regularizer(NormalizedPair {
                        delta_bar: delta,
                        phi_bar: phi,
                    })
                    .1
                }
                other => {
                    return Err(Error::InvalidInput(format!(
                        "gradient field is defined for vanilla and geom, not {other}"
                    )))
                }
            };
            out.push(FieldPoint {
                delta,
                phi,
                minus_grad,
            });
        }
    }
    Ok(out)
}
