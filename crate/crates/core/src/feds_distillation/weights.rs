use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// λ values of the MSE-optimized presets, indexed by `lambda_index`.
pub const LAMBDA_PRESETS: [f64; 7] = [0.0016, 0.0032, 0.0075, 0.015, 0.03, 0.045, 0.06];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distortion {
    Mse,
    MsSsim,
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distortion::Mse => "mse",
            Distortion::MsSsim => "ms-ssim",
        })
    }
}

impl FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(Distortion::Mse),
            "ms-ssim" | "msssim" | "ms_ssim" => Ok(Distortion::MsSsim),
            other => Err(Error::Config(format!("unknown distortion '{other}'"))),
        }
    }
}

/// Rate-distortion trade-off and distillation term weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FEDSWeights {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub distortion: Distortion,
}

impl Default for FEDSWeights {
    fn default() -> Self {
        Self::preset(3).expect("preset 3 exists")
    }
}

impl FEDSWeights {
    pub const DEFAULT_ALPHA: f64 = 1.0;
    pub const DEFAULT_BETA: f64 = 0.5;
    pub const DEFAULT_GAMMA: f64 = 0.5;

    /// Default distillation weights with the λ of an MSE preset.
    pub fn preset(lambda_index: usize) -> Result<Self> {
        let lambda = *LAMBDA_PRESETS.get(lambda_index).ok_or_else(|| {
            Error::Config(format!(
                "lambda index {lambda_index} outside 0..{}",
                LAMBDA_PRESETS.len()
            ))
        })?;
        Ok(Self {
            lambda,
            alpha: Self::DEFAULT_ALPHA,
            beta: Self::DEFAULT_BETA,
            gamma: Self::DEFAULT_GAMMA,
            distortion: Distortion::Mse,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    /// Index of λ in the preset table, if it is one of them.
    pub fn lambda_index(&self) -> Option<usize> {
        LAMBDA_PRESETS.iter().position(|&l| l == self.lambda)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let w = FEDSWeights::preset(0).unwrap();
        assert_eq!((w.alpha, w.beta, w.gamma), (1.0, 0.5, 0.5));
        assert_eq!(w.lambda, 0.0016);
        assert_eq!(FEDSWeights::preset(6).unwrap().lambda, 0.06);
        assert!(FEDSWeights::preset(7).is_err());
        assert_eq!(FEDSWeights::preset(4).unwrap().lambda_index(), Some(4));
    }

    #[test]
    fn distortion_parse() {
        assert_eq!("MS-SSIM".parse::<Distortion>().unwrap(), Distortion::MsSsim);
        assert_eq!("mse".parse::<Distortion>().unwrap(), Distortion::Mse);
        assert!("l1".parse::<Distortion>().is_err());
    }
}
