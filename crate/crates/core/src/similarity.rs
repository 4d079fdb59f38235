//! Channel-spatial cosine similarity between feature maps of shape `[C, H, W]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsCosSimConfig {
    /// Weight of the channel term; the spatial term gets `1 - alpha`.
    pub alpha: f64,
    /// Similarity assigned to a pair in which either vector has zero norm.
    pub zero_vector_policy: f64,
}

impl Default for CsCosSimConfig {
    fn default() -> Self {
        CsCosSimConfig {
            alpha: 0.5,
            zero_vector_policy: 0.0,
        }
    }
}

impl CsCosSimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !self.zero_vector_policy.is_finite() {
            return Err(Error::InvalidArgument("zero_vector_policy must be finite".into()));
        }
        Ok(())
    }
}

fn dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if a.rank() != 3 {
        return Err(Error::shape(op, format!("expected [C, H, W], got {:?}", a.shape())));
    }
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok((a.shape()[0], a.shape()[1] * a.shape()[2]))
}

fn cosine(dot: f64, na: f64, nb: f64, zero: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return zero;
    }
    // sqrt(x * x) == x exactly, so identical vectors give exactly 1.
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Mean over channels of the cosine between flattened `H x W` slices.
pub fn channel_cossim(a: &Tensor, b: &Tensor, zero_vector_policy: f64) -> Result<f64> {
    let (c, hw) = dims("channel_cossim", a, b)?;
    let mut total = 0.0;
    for (sa, sb) in a.data().chunks(hw).zip(b.data().chunks(hw)) {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (x, y) in sa.iter().zip(sb) {
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        total += cosine(dot, na, nb, zero_vector_policy);
    }
    Ok(total / c as f64)
}

/// Mean over grid locations of the cosine between `C`-length channel vectors.
pub fn spatial_cossim(a: &Tensor, b: &Tensor, zero_vector_policy: f64) -> Result<f64> {
    let (c, hw) = dims("spatial_cossim", a, b)?;
    let mut dot = vec![0.0; hw];
    let mut na = vec![0.0; hw];
    let mut nb = vec![0.0; hw];
    for ch in 0..c {
        let sa = &a.data()[ch * hw..(ch + 1) * hw];
        let sb = &b.data()[ch * hw..(ch + 1) * hw];
        for p in 0..hw {
            dot[p] += sa[p] * sb[p];
            na[p] += sa[p] * sa[p];
            nb[p] += sb[p] * sb[p];
        }
    }
    let total: f64 = (0..hw)
        .map(|p| cosine(dot[p], na[p], nb[p], zero_vector_policy))
        .sum();
    Ok(total / hw as f64)
}

pub fn cs_cossim(a: &Tensor, b: &Tensor, cfg: &CsCosSimConfig) -> Result<f64> {
    cfg.validate()?;
    let ch = channel_cossim(a, b, cfg.zero_vector_policy)?;
    let sp = spatial_cossim(a, b, cfg.zero_vector_policy)?;
    Ok(combine(ch, sp, cfg.alpha))
}

/// `alpha * channel + (1 - alpha) * spatial`, returning the exact term when
/// the weight is degenerate.
pub fn combine(channel: f64, spatial: f64, alpha: f64) -> f64 {
    if alpha == 1.0 {
        channel
    } else if alpha == 0.0 {
        spatial
    } else {
        alpha * channel + (1.0 - alpha) * spatial
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 3], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn hand_channel_example() {
        let a = t([1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t([1, 2, 2], &[1.0, 1.0, 1.0, 1.0]);
        let v = channel_cossim(&a, &b, 0.0).unwrap();
        assert!((v - 0.7071067811865475).abs() < 1e-15);
    }

    #[test]
    fn self_and_antipodal() {
        let a = t([2, 1, 2], &[1.0, -2.0, 0.5, 3.0]);
        let neg = a.scale(-1.0);
        let cfg = CsCosSimConfig::default();
        assert_eq!(cs_cossim(&a, &a, &cfg).unwrap(), 1.0);
        assert_eq!(channel_cossim(&a, &neg, 0.0).unwrap(), -1.0);
        assert_eq!(spatial_cossim(&a, &neg, 0.0).unwrap(), -1.0);
    }

    #[test]
    fn single_channel_positive_is_one_everywhere() {
        let a = t([1, 2, 2], &[0.1, 5.0, 2.0, 7.0]);
        let b = t([1, 2, 2], &[3.0, 0.2, 9.0, 1.0]);
        assert_eq!(spatial_cossim(&a, &b, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn combine_examples() {
        assert!((combine(0.8, 0.6, 0.5) - 0.7).abs() < 1e-15);
        assert_eq!(combine(0.123, 0.9, 1.0), 0.123);
    }

    #[test]
    fn zero_vectors_follow_policy() {
        let a = t([1, 1, 2], &[0.0, 0.0]);
        let b = t([1, 1, 2], &[1.0, 2.0]);
        assert_eq!(channel_cossim(&a, &b, 0.0).unwrap(), 0.0);
        assert_eq!(channel_cossim(&a, &b, 0.25).unwrap(), 0.25);
        assert_eq!(spatial_cossim(&a, &b, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn rejects_mismatch_and_bad_alpha() {
        let a = t([1, 1, 2], &[1.0, 0.0]);
        let b = t([1, 2, 1], &[1.0, 0.0]);
        assert!(cs_cossim(&a, &b, &CsCosSimConfig::default()).is_err());
        let cfg = CsCosSimConfig {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(cs_cossim(&a, &a, &cfg).is_err());
    }
}
